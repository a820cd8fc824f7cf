#pragma once

// Tape-based reverse-mode differentiation over dense double tensors.
//
// Every op records its output on the tape of its inputs. A node keeps a
// backward closure only when at least one input requires a gradient, so
// inference on frozen parameters records values and nothing else.
//
//   Tape tape;
//   Var w = tape.param(weight);
//   Var x = tape.constant(input);
//   Var loss = sum(tanh(matmul(x, w)));
//   tape.backward(loss);            // weight.grad now holds dloss/dweight

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "capseq/rng.hpp"
#include "capseq/tensor.hpp"

namespace capseq {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter(std::string name_, Tensor value_)
      : name(std::move(name_)), value(std::move(value_)), grad(value.shape()) {}
};

// Owns named parameters with stable addresses, in registration order.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Tensor value);
  Parameter* find(const std::string& name) noexcept;
  const Parameter* find(const std::string& name) const noexcept;
  Parameter& get(const std::string& name);

  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::size_t size() const noexcept { return params_.size(); }
  std::size_t scalar_count() const noexcept;

  void zero_grad();

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, Parameter*> by_name_;
};

class Tape;

// Handle to one node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}

  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

  Tape* tape() const noexcept { return tape_; }
  std::size_t index() const noexcept { return index_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t index_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&)>;

  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };

  Tape() = default;
  // With gradients disabled, parameter leaves never require a gradient and
  // no backward closures are kept.
  explicit Tape(bool gradients_enabled) : gradients_enabled_(gradients_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // One leaf per parameter; repeated calls return the same node.
  Var param(Parameter& p);

  // Reverse sweep from a scalar. Node gradients are re-zeroed first, so
  // repeated calls on the same tape give identical results. Every parameter
  // leaf on the tape gets its gradient assigned (zero when unreachable or
  // not trainable).
  void backward(const Var& loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  Node& node(std::size_t i) { return nodes_[i]; }
  const Node& node(std::size_t i) const { return nodes_[i]; }

  // Gradient buffer of a node, for use inside backward closures.
  Tensor& grad(std::size_t i) { return nodes_[i].grad; }
  const Tensor& value(std::size_t i) const { return nodes_[i].value; }
  bool requires_grad(std::size_t i) const { return nodes_[i].requires_grad; }

  // Used by op implementations.
  Var record(Tensor value, bool requires_grad, BackwardFn backward);

 private:
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
  bool gradients_enabled_ = true;
};

// ---------------------------------------------------------------------------
// Ops. All inputs must live on the same tape. Inputs are checked for
// finiteness and compatible shapes; violations throw ShapeError or
// ValidationError naming the shapes involved.

// [m,k] x [k,n] -> [m,n]
Var matmul(const Var& a, const Var& b);
// [B,m,k] x [B,k,n] -> [B,m,n]
Var batched_matmul(const Var& a, const Var& b);
// Same shape, or b a row vector ([n] or [1,n]) broadcast over the rows of a.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double offset);

Var sigmoid(const Var& x);
Var tanh(const Var& x);
Var relu(const Var& x);
Var gelu(const Var& x);
// Natural log with inputs clamped from below at `floor`; clamped entries
// pass no gradient.
Var log_clamped(const Var& x, double floor = 1e-12);
Var square(const Var& x);

// Softmax of a rank-2 tensor along axis 0 or 1.
Var softmax(const Var& x, std::size_t axis);
// Row-wise softmax of a square [L,L] tensor restricted to columns <= row.
Var causal_softmax(const Var& x);

// Rows of `table` ([V,m]) selected by ids -> [ids.size(), m].
Var embedding(const Var& table, std::span<const int> ids);
// Concatenate rank-2 tensors along axis 0 or 1.
Var concat(std::span<const Var> parts, std::size_t axis);
Var slice_rows(const Var& x, std::size_t begin, std::size_t count);
Var slice_cols(const Var& x, std::size_t begin, std::size_t count);
// Appends zero rows up to `rows`.
Var pad_rows(const Var& x, std::size_t rows);
// Each row of [B,d] repeated `times` consecutively -> [B*times, d].
Var repeat_rows(const Var& x, std::size_t times);
// Mean over consecutive groups of `group` rows: [B*group, d] -> [B, d].
Var group_mean_rows(const Var& x, std::size_t group);
Var transpose(const Var& x);
Var reshape(const Var& x, Shape shape);

Var sum(const Var& x);
Var mean(const Var& x);
// Sum over axis 0 of a rank-2 tensor -> [1, n].
Var sum_rows(const Var& x);

// Same-padded stride-1 cross-correlation.
// input [N,Cin,H,W], kernel [Cout,Cin,k,k] (k odd), bias [Cout] -> [N,Cout,H,W]
Var conv2d(const Var& input, const Var& kernel, const Var& bias);
// [N,C,H,W] -> [N,C,out_h,out_w] with floor/ceil bin edges.
Var adaptive_avg_pool(const Var& input, std::size_t out_h, std::size_t out_w);
// [N,C,h,w] -> [N*h*w, C]; row n*h*w + y*w + x holds the channel vector.
Var spatial_to_rows(const Var& input);

// Inverted dropout; identity when !training or rate == 0.
Var dropout(const Var& x, double rate, Rng& rng, bool training);

// Row-wise layer normalisation of [L,d] with gain/bias [d].
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);

// probs[i, targets[i]] for each row -> [rows, 1].
Var pick(const Var& probs, std::span<const int> targets);
// Mean over rows of -log softmax(logits)[row, target].
Var cross_entropy_logits(const Var& logits, std::span<const int> targets);

}  // namespace capseq
