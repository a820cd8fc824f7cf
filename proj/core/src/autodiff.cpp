#include "capseq/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "capseq/error.hpp"

namespace capseq {

// ---------------------------------------------------------------------------
// ParameterStore

Parameter& ParameterStore::add(const std::string& name, Tensor value) {
  if (by_name_.count(name) != 0) throw ValidationError("duplicate parameter name '" + name + "'");
  params_.push_back(std::make_unique<Parameter>(name, std::move(value)));
  by_name_[name] = params_.back().get();
  return *params_.back();
}

Parameter* ParameterStore::find(const std::string& name) noexcept {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? nullptr : it->second;
}

const Parameter* ParameterStore::find(const std::string& name) const noexcept {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? nullptr : it->second;
}

Parameter& ParameterStore::get(const std::string& name) {
  Parameter* p = find(name);
  if (p == nullptr) throw ValidationError("unknown parameter '" + name + "'");
  return *p;
}

std::vector<Parameter*> ParameterStore::all() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
  std::vector<const Parameter*> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::size_t ParameterStore::scalar_count() const noexcept {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->grad.fill(0.0);
}

// ---------------------------------------------------------------------------
// Var / Tape

const Tensor& Var::value() const { return tape_->node(index_).value; }
const Tensor& Var::grad() const { return tape_->node(index_).grad; }
bool Var::requires_grad() const { return tape_->node(index_).requires_grad; }

Var Tape::record(Tensor value, bool requires_grad, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  if (!value.all_finite()) throw ValidationError("non-finite value in constant " + to_string(value.shape()));
  return record(std::move(value), false, nullptr);
}

Var Tape::param(Parameter& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) return Var(this, it->second);
  Var v = record(p.value, p.trainable && gradients_enabled_, nullptr);
  nodes_[v.index()].param = &p;
  param_nodes_[&p] = v.index();
  return v;
}

void Tape::backward(const Var& loss) {
  if (loss.tape() != this) throw ValidationError("backward: loss is not on this tape");
  if (loss.value().size() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  for (auto& n : nodes_) {
    if (n.requires_grad) {
      if (n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
      else n.grad.fill(0.0);
    }
  }
  if (nodes_[loss.index()].requires_grad) {
    nodes_[loss.index()].grad[0] = 1.0;
    for (std::size_t i = loss.index() + 1; i-- > 0;) {
      if (nodes_[i].requires_grad && nodes_[i].backward) nodes_[i].backward(*this);
    }
  }
  for (auto& n : nodes_) {
    if (n.param == nullptr) continue;
    if (n.param->grad.shape() != n.param->value.shape()) n.param->grad = Tensor(n.param->value.shape());
    if (n.requires_grad) {
      n.param->grad = n.grad;
    } else {
      n.param->grad.fill(0.0);
    }
  }
}

// ---------------------------------------------------------------------------
// helpers

namespace {

Tape& tape_of(const Var& a) {
  if (!a.valid()) throw ValidationError("op on an empty Var");
  return *a.tape();
}

Tape& tape_of(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  if (b.tape() != &t) throw ValidationError("op inputs live on different tapes");
  return t;
}

void require_finite(const Var& v, const char* op) {
  if (!v.value().all_finite()) {
    throw ValidationError(std::string(op) + ": non-finite input of shape " + to_string(v.shape()));
  }
}

void require_rank(const Var& v, std::size_t rank, const char* op) {
  if (v.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     to_string(v.shape()));
  }
}

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

// Elementwise unary op with derivative expressed through input x and output y.
template <typename F, typename D>
Var unary(const Var& x, const char* name, F f, D dfdx) {
  Tape& t = tape_of(x);
  require_finite(x, name);
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const std::size_t xi = x.index();
  return t.record(std::move(out), x.requires_grad(), [xi, dfdx, out_i = t.size()](Tape& tp) {
    const Tensor& xv = tp.value(xi);
    const Tensor& yv = tp.value(out_i);
    const Tensor& gy = tp.grad(out_i);
    Tensor& gx = tp.grad(xi);
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += gy[i] * dfdx(xv[i], yv[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// linear algebra

Var matmul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  require_finite(a, "matmul");
  require_finite(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) shape_mismatch("matmul", a.shape(), b.shape());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  const std::size_t ai = a.index(), bi = b.index(), oi = t.size();
  return t.record(std::move(out), a.requires_grad() || b.requires_grad(), [=](Tape& tp) {
    const Tensor& av = tp.value(ai);
    const Tensor& bv = tp.value(bi);
    const Tensor& go = tp.grad(oi);
    if (tp.requires_grad(ai)) {
      Tensor& ga = tp.grad(ai);
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = go.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = bv.data() + p * n;
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad(bi);
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = go.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          if (aip == 0.0) continue;
          double* gbrow = gb.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
        }
      }
    }
  });
}

Var batched_matmul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require_rank(a, 3, "batched_matmul");
  require_rank(b, 3, "batched_matmul");
  require_finite(a, "batched_matmul");
  require_finite(b, "batched_matmul");
  const std::size_t batch = a.shape()[0], m = a.shape()[1], k = a.shape()[2], n = b.shape()[2];
  if (b.shape()[0] != batch || b.shape()[1] != k) shape_mismatch("batched_matmul", a.shape(), b.shape());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out({batch, m, n});
  for (std::size_t s = 0; s < batch; ++s) {
    const double* A = av.data() + s * m * k;
    const double* B = bv.data() + s * k * n;
    double* O = out.data() + s * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) O[i * n + j] += A[i * k + p] * B[p * n + j];
  }
  const std::size_t ai = a.index(), bi = b.index(), oi = t.size();
  return t.record(std::move(out), a.requires_grad() || b.requires_grad(), [=](Tape& tp) {
    const Tensor& av = tp.value(ai);
    const Tensor& bv = tp.value(bi);
    const Tensor& go = tp.grad(oi);
    const bool want_a = tp.requires_grad(ai), want_b = tp.requires_grad(bi);
    for (std::size_t s = 0; s < batch; ++s) {
      const double* A = av.data() + s * m * k;
      const double* B = bv.data() + s * k * n;
      const double* G = go.data() + s * m * n;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t j = 0; j < n; ++j) {
            if (want_a) tp.grad(ai)[s * m * k + i * k + p] += G[i * n + j] * B[p * n + j];
            if (want_b) tp.grad(bi)[s * k * n + p * n + j] += A[i * k + p] * G[i * n + j];
          }
    }
  });
}

Var add(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require_finite(a, "add");
  require_finite(b, "add");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool same = av.shape() == bv.shape();
  const bool row_broadcast =
      !same && av.rank() == 2 &&
      ((bv.rank() == 1 && bv.dim(0) == av.dim(1)) || (bv.rank() == 2 && bv.dim(0) == 1 && bv.dim(1) == av.dim(1)));
  if (!same && !row_broadcast) shape_mismatch("add", av.shape(), bv.shape());
  Tensor out = av;
  const std::size_t width = bv.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[same ? i : i % width];
  const std::size_t ai = a.index(), bi = b.index(), oi = t.size();
  return t.record(std::move(out), a.requires_grad() || b.requires_grad(), [=](Tape& tp) {
    const Tensor& go = tp.grad(oi);
    if (tp.requires_grad(ai)) {
      Tensor& ga = tp.grad(ai);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad(bi);
      for (std::size_t i = 0; i < go.size(); ++i) gb[same ? i : i % width] += go[i];
    }
  });
}

Var sub(const Var& a, const Var& b) { return add(a, scale(b, -1.0)); }

Var mul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require_finite(a, "mul");
  require_finite(b, "mul");
  if (a.shape() != b.shape()) shape_mismatch("mul", a.shape(), b.shape());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ai = a.index(), bi = b.index(), oi = t.size();
  return t.record(std::move(out), a.requires_grad() || b.requires_grad(), [=](Tape& tp) {
    const Tensor& go = tp.grad(oi);
    const Tensor& av = tp.value(ai);
    const Tensor& bv = tp.value(bi);
    if (tp.requires_grad(ai)) {
      Tensor& ga = tp.grad(ai);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
    }
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad(bi);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
    }
  });
}

Var scale(const Var& a, double factor) {
  return unary(
      a, "scale", [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Var add_scalar(const Var& a, double offset) {
  return unary(
      a, "add_scalar", [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

// ---------------------------------------------------------------------------
// activations

Var sigmoid(const Var& x) {
  return unary(
      x, "sigmoid",
      [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Var tanh(const Var& x) {
  return unary(
      x, "tanh", [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var relu(const Var& x) {
  return unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var gelu(const Var& x) {
  static constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  static constexpr double kA = 0.044715;
  return unary(
      x, "gelu",
      [](double v) { return 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v))); },
      [](double v, double) {
        const double th = std::tanh(kC * (v + kA * v * v * v));
        return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * kC * (1.0 + 3.0 * kA * v * v);
      });
}

Var log_clamped(const Var& x, double floor) {
  return unary(
      x, "log", [floor](double v) { return std::log(std::max(v, floor)); },
      [floor](double v, double) { return v > floor ? 1.0 / v : 0.0; });
}

Var square(const Var& x) {
  return unary(
      x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

// ---------------------------------------------------------------------------
// softmax

Var softmax(const Var& x, std::size_t axis) {
  Tape& t = tape_of(x);
  require_rank(x, 2, "softmax");
  require_finite(x, "softmax");
  if (axis > 1) throw ShapeError("softmax: axis must be 0 or 1 for shape " + to_string(x.shape()));
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  // Walk "lines" along the reduced axis: count lines, each of `len` entries with `stride`.
  const std::size_t lines = axis == 1 ? rows : cols;
  const std::size_t len = axis == 1 ? cols : rows;
  const std::size_t stride = axis == 1 ? 1 : cols;
  auto base = [=](std::size_t line) { return axis == 1 ? line * cols : line; };
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t l = 0; l < lines; ++l) {
    const std::size_t b0 = base(l);
    double mx = xv[b0];
    for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, xv[b0 + j * stride]);
    double total = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      const double e = std::exp(xv[b0 + j * stride] - mx);
      out[b0 + j * stride] = e;
      total += e;
    }
    for (std::size_t j = 0; j < len; ++j) out[b0 + j * stride] /= total;
  }
  const std::size_t xi = x.index(), oi = t.size();
  return t.record(std::move(out), x.requires_grad(), [=](Tape& tp) {
    const Tensor& y = tp.value(oi);
    const Tensor& gy = tp.grad(oi);
    Tensor& gx = tp.grad(xi);
    for (std::size_t l = 0; l < lines; ++l) {
      const std::size_t b0 = base(l);
      double dot = 0.0;
      for (std::size_t j = 0; j < len; ++j) dot += gy[b0 + j * stride] * y[b0 + j * stride];
      for (std::size_t j = 0; j < len; ++j) {
        const std::size_t p = b0 + j * stride;
        gx[p] += y[p] * (gy[p] - dot);
      }
    }
  });
}

Var causal_softmax(const Var& x) {
  Tape& t = tape_of(x);
  require_rank(x, 2, "causal_softmax");
  require_finite(x, "causal_softmax");
  const std::size_t n = x.shape()[0];
  if (x.shape()[1] != n) throw ShapeError("causal_softmax: expected square input, got " + to_string(x.shape()));
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double mx = xv[i * n];
    for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, xv[i * n + j]);
    double total = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      out[i * n + j] = std::exp(xv[i * n + j] - mx);
      total += out[i * n + j];
    }
    for (std::size_t j = 0; j <= i; ++j) out[i * n + j] /= total;
  }
  const std::size_t xi = x.index(), oi = t.size();
  return t.record(std::move(out), x.requires_grad(), [=](Tape& tp) {
    const Tensor& y = tp.value(oi);
    const Tensor& gy = tp.grad(oi);
    Tensor& gx = tp.grad(xi);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j <= i; ++j) dot += gy[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j <= i; ++j) gx[i * n + j] += y[i * n + j] * (gy[i * n + j] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// indexing and layout

Var embedding(const Var& table, std::span<const int> ids) {
  Tape& t = tape_of(table);
  require_rank(table, 2, "embedding");
  const std::size_t vocab = table.shape()[0], width = table.shape()[1];
  std::vector<int> rows(ids.begin(), ids.end());
  Tensor out({rows.size(), width});
  const Tensor& tv = table.value();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || static_cast<std::size_t>(rows[r]) >= vocab) {
      throw ValidationError("embedding: id " + std::to_string(rows[r]) + " outside table of shape " +
                            to_string(table.shape()));
    }
    std::copy_n(tv.data() + rows[r] * width, width, out.data() + r * width);
  }
  const std::size_t ti = table.index(), oi = t.size();
  return t.record(std::move(out), table.requires_grad(), [=](Tape& tp) {
    const Tensor& go = tp.grad(oi);
    Tensor& gt = tp.grad(ti);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t j = 0; j < width; ++j) gt[rows[r] * width + j] += go[r * width + j];
  });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ValidationError("concat: no inputs");
  Tape& t = tape_of(parts[0]);
  if (axis > 1) throw ShapeError("concat: axis must be 0 or 1");
  bool needs = false;
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.tape() != &t) throw ValidationError("concat: inputs live on different tapes");
    require_rank(p, 2, "concat");
    require_finite(p, "concat");
    if (p.shape()[1 - axis] != parts[0].shape()[1 - axis]) shape_mismatch("concat", parts[0].shape(), p.shape());
    total += p.shape()[axis];
    needs = needs || p.requires_grad();
  }
  const std::size_t rows = axis == 0 ? total : parts[0].shape()[0];
  const std::size_t cols = axis == 1 ? total : parts[0].shape()[1];
  Tensor out({rows, cols});
  std::vector<std::size_t> indices, offsets;
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    const std::size_t pr = v.dim(0), pc = v.dim(1);
    for (std::size_t r = 0; r < pr; ++r)
      for (std::size_t c = 0; c < pc; ++c) {
        if (axis == 0) out[(offset + r) * cols + c] = v[r * pc + c];
        else out[r * cols + offset + c] = v[r * pc + c];
      }
    indices.push_back(p.index());
    offsets.push_back(offset);
    offset += v.dim(axis);
  }
  const std::size_t oi = t.size();
  return t.record(std::move(out), needs, [=](Tape& tp) {
    const Tensor& go = tp.grad(oi);
    for (std::size_t k = 0; k < indices.size(); ++k) {
      if (!tp.requires_grad(indices[k])) continue;
      Tensor& g = tp.grad(indices[k]);
      const std::size_t pr = g.dim(0), pc = g.dim(1);
      for (std::size_t r = 0; r < pr; ++r)
        for (std::size_t c = 0; c < pc; ++c) {
          g[r * pc + c] += axis == 0 ? go[(offsets[k] + r) * cols + c] : go[r * cols + offsets[k] + c];
        }
    }
  });
}

Var slice_rows(const Var& x, std::size_t begin, std::size_t count) {
  Tape& t = tape_of(x);
  require_rank(x, 2, "slice_rows");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (begin + count > rows) {
    throw ShapeError("slice_rows: rows [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                     ") out of range for shape " + to_string(x.shape()));
  }
  const Tensor& xv = x.value();
  Tensor out({count, cols});
  std::copy_n(xv.data() + begin * cols, count * cols, out.data());
  const std::size_t xi = x.index(), oi = t.size();
  return t.record(std::move(out), x.requires_grad(), [=](Tape& tp) {
    const Tensor& go = tp.grad(oi);
    Tensor& gx = tp.grad(xi);
    for (std::size_t i = 0; i < count * cols; ++i) gx[begin * cols + i] += go[i];
  });
}

Var slice_cols(const Var& x, std::size_t begin, std::size_t count) {
  Tape& t = tape_of(x);
  require_rank(x, 2, "slice_cols");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (begin + count > cols) {
    throw ShapeError("slice_cols: cols [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                     ") out of range for shape " + to_string(x.shape()));
  }
  const Tensor& xv = x.value();
  Tensor out({rows, count});
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(xv.data() + r * cols + begin, count, out.data() + r * count);
  const std::size_t xi = x.index(), oi = t.size();
  return t.record(std::move(out), x.requires_grad(), [=](Tape& tp) {
    const Tensor& go = tp.grad(oi);
    Tensor& gx = tp.grad(xi);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < count; ++c) gx[r * cols + begin + c] += go[r * count + c];
  });
}

Var pad_rows(const Var& x, std::size_t rows) {
  Tape& t = tape_of(x);
  require_rank(x, 2, "pad_rows");
  const std::size_t have = x.shape()[0], cols = x.shape()[1];
  if (rows < have) throw ShapeError("pad_rows: cannot pad " + to_string(x.shape()) + " to " + std::to_string(rows) + " rows");
  Tensor out({rows, cols});
  std::copy_n(x.value().data(), have * cols, out.data());
  const std::size_t xi = x.index(), oi = t.size();
  return t.record(std::move(out), x.requires_grad(), [=](Tape& tp) {
    const Tensor& go = tp.grad(oi);
    Tensor& gx = tp.grad(xi);
    for (std::size_t i = 0; i < have * cols; ++i) gx[i] += go[i];
  });
}

Var repeat_rows(const Var& x, std::size_t times) {
  Tape& t = tape_of(x);
  require_rank(x, 2, "repeat_rows");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  const Tensor& xv = x.value();
  Tensor out({rows * times, cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < times; ++k) std::copy_n(xv.data() + r * cols, cols, out.data() + (r * times + k) * cols);
  const std::size_t xi = x.index(), oi = t.size();
  return t.record(std::move(out), x.requires_grad(), [=](Tape& tp) {
    const Tensor& go = tp.grad(oi);
    Tensor& gx = tp.grad(xi);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t k = 0; k < times; ++k)
        for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += go[(r * times + k) * cols + c];
  });
}

Var group_mean_rows(const Var& x, std::size_t group) {
  Tape& t = tape_of(x);
  require_rank(x, 2, "group_mean_rows");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (group == 0 || rows % group != 0) {
    throw ShapeError("group_mean_rows: group " + std::to_string(group) + " does not divide shape " + to_string(x.shape()));
  }
  const std::size_t groups = rows / group;
  const Tensor& xv = x.value();
  Tensor out({groups, cols});
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t k = 0; k < group; ++k)
      for (std::size_t c = 0; c < cols; ++c) out[g * cols + c] += xv[(g * group + k) * cols + c];
    for (std::size_t c = 0; c < cols; ++c) out[g * cols + c] /= static_cast<double>(group);
  }
  const std::size_t xi = x.index(), oi = t.size();
  return t.record(std::move(out), x.requires_grad(), [=](Tape& tp) {
    const Tensor& go = tp.grad(oi);
    Tensor& gx = tp.grad(xi);
    const double inv = 1.0 / static_cast<double>(group);
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t k = 0; k < group; ++k)
        for (std::size_t c = 0; c < cols; ++c) gx[(g * group + k) * cols + c] += go[g * cols + c] * inv;
  });
}

Var transpose(const Var& x) {
  Tape& t = tape_of(x);
  require_rank(x, 2, "transpose");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  const Tensor& xv = x.value();
  Tensor out({cols, rows});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = xv[r * cols + c];
  const std::size_t xi = x.index(), oi = t.size();
  return t.record(std::move(out), x.requires_grad(), [=](Tape& tp) {
    const Tensor& go = tp.grad(oi);
    Tensor& gx = tp.grad(xi);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += go[c * rows + r];
  });
}

Var reshape(const Var& x, Shape shape) {
  Tape& t = tape_of(x);
  Tensor out = x.value().reshaped(std::move(shape));
  const std::size_t xi = x.index(), oi = t.size();
  return t.record(std::move(out), x.requires_grad(), [=](Tape& tp) {
    const Tensor& go = tp.grad(oi);
    Tensor& gx = tp.grad(xi);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
  });
}

// ---------------------------------------------------------------------------
// reductions

Var sum(const Var& x) {
  Tape& t = tape_of(x);
  require_finite(x, "sum");
  double total = 0.0;
  for (double v : x.value().values()) total += v;
  const std::size_t xi = x.index(), oi = t.size();
  return t.record(Tensor::scalar(total), x.requires_grad(), [=](Tape& tp) {
    const double g = tp.grad(oi)[0];
    Tensor& gx = tp.grad(xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

Var mean(const Var& x) {
  if (x.value().size() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

Var sum_rows(const Var& x) {
  Tape& t = tape_of(x);
  require_rank(x, 2, "sum_rows");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  const Tensor& xv = x.value();
  Tensor out({1, cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c] += xv[r * cols + c];
  const std::size_t xi = x.index(), oi = t.size();
  return t.record(std::move(out), x.requires_grad(), [=](Tape& tp) {
    const Tensor& go = tp.grad(oi);
    Tensor& gx = tp.grad(xi);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += go[c];
  });
}

// ---------------------------------------------------------------------------
// convolution and pooling

Var conv2d(const Var& input, const Var& kernel, const Var& bias) {
  Tape& t = tape_of(input, kernel);
  if (bias.tape() != &t) throw ValidationError("conv2d: inputs live on different tapes");
  require_rank(input, 4, "conv2d");
  require_rank(kernel, 4, "conv2d");
  require_finite(input, "conv2d");
  require_finite(kernel, "conv2d");
  require_finite(bias, "conv2d");
  const std::size_t batch = input.shape()[0], cin = input.shape()[1], h = input.shape()[2], w = input.shape()[3];
  const std::size_t cout = kernel.shape()[0], ks = kernel.shape()[2];
  if (kernel.shape()[1] != cin || kernel.shape()[3] != ks || ks % 2 == 0) {
    shape_mismatch("conv2d", input.shape(), kernel.shape());
  }
  if (bias.value().size() != cout) shape_mismatch("conv2d", kernel.shape(), bias.shape());
  const long pad = static_cast<long>(ks / 2);
  const long H = static_cast<long>(h), W = static_cast<long>(w);

  // Visits every (output, input, weight) triple contributing to the correlation.
  auto sweep = [=](auto&& visit) {
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t ci = 0; ci < cin; ++ci)
          for (long ky = 0; ky < static_cast<long>(ks); ++ky)
            for (long kx = 0; kx < static_cast<long>(ks); ++kx) {
              const std::size_t kidx = ((co * cin + ci) * ks + ky) * ks + kx;
              const long dy = ky - pad, dx = kx - pad;
              const long y0 = std::max(0L, -dy), y1 = std::min(H, H - dy);
              const long x0 = std::max(0L, -dx), x1 = std::min(W, W - dx);
              for (long y = y0; y < y1; ++y) {
                const std::size_t orow = ((n * cout + co) * h + y) * w;
                const std::size_t irow = ((n * cin + ci) * h + (y + dy)) * w;
                visit(kidx, orow, irow + dx, static_cast<std::size_t>(x0), static_cast<std::size_t>(x1));
              }
            }
  };

  const Tensor& iv = input.value();
  const Tensor& kv = kernel.value();
  const Tensor& bv = bias.value();
  Tensor out({batch, cout, h, w});
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t co = 0; co < cout; ++co)
      std::fill_n(out.data() + (n * cout + co) * h * w, h * w, bv[co]);
  sweep([&](std::size_t kidx, std::size_t orow, std::size_t ishift, std::size_t x0, std::size_t x1) {
    const double k = kv[kidx];
    double* o = out.data() + orow;
    const double* in = iv.data() + ishift;
    for (std::size_t x = x0; x < x1; ++x) o[x] += k * in[x];
  });

  const std::size_t ii = input.index(), ki = kernel.index(), bi = bias.index(), oi = t.size();
  const bool needs = input.requires_grad() || kernel.requires_grad() || bias.requires_grad();
  return t.record(std::move(out), needs, [=](Tape& tp) {
    const Tensor& go = tp.grad(oi);
    const bool want_i = tp.requires_grad(ii), want_k = tp.requires_grad(ki);
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad(bi);
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t co = 0; co < cout; ++co) {
          const double* g = go.data() + (n * cout + co) * h * w;
          double acc = 0.0;
          for (std::size_t p = 0; p < h * w; ++p) acc += g[p];
          gb[co] += acc;
        }
    }
    if (!want_i && !want_k) return;
    const Tensor& iv = tp.value(ii);
    const Tensor& kv = tp.value(ki);
    sweep([&](std::size_t kidx, std::size_t orow, std::size_t ishift, std::size_t x0, std::size_t x1) {
      const double* g = go.data() + orow;
      if (want_k) {
        const double* in = iv.data() + ishift;
        double acc = 0.0;
        for (std::size_t x = x0; x < x1; ++x) acc += g[x] * in[x];
        tp.grad(ki)[kidx] += acc;
      }
      if (want_i) {
        const double k = kv[kidx];
        double* gi = tp.grad(ii).data() + ishift;
        for (std::size_t x = x0; x < x1; ++x) gi[x] += k * g[x];
      }
    });
  });
}

Var adaptive_avg_pool(const Var& input, std::size_t out_h, std::size_t out_w) {
  Tape& t = tape_of(input);
  require_rank(input, 4, "adaptive_avg_pool");
  require_finite(input, "adaptive_avg_pool");
  const std::size_t batch = input.shape()[0], ch = input.shape()[1], h = input.shape()[2], w = input.shape()[3];
  if (out_h == 0 || out_w == 0 || out_h > h || out_w > w) {
    throw ShapeError("adaptive_avg_pool: cannot pool " + to_string(input.shape()) + " to " + std::to_string(out_h) +
                     "x" + std::to_string(out_w));
  }
  auto lo = [](std::size_t i, std::size_t in, std::size_t out) { return (i * in) / out; };
  auto hi = [](std::size_t i, std::size_t in, std::size_t out) { return ((i + 1) * in + out - 1) / out; };
  const Tensor& iv = input.value();
  Tensor out({batch, ch, out_h, out_w});
  for (std::size_t p = 0; p < batch * ch; ++p) {
    const double* plane = iv.data() + p * h * w;
    for (std::size_t oy = 0; oy < out_h; ++oy)
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const std::size_t y0 = lo(oy, h, out_h), y1 = hi(oy, h, out_h);
        const std::size_t x0 = lo(ox, w, out_w), x1 = hi(ox, w, out_w);
        double acc = 0.0;
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t x = x0; x < x1; ++x) acc += plane[y * w + x];
        out[(p * out_h + oy) * out_w + ox] = acc / static_cast<double>((y1 - y0) * (x1 - x0));
      }
  }
  const std::size_t ii = input.index(), oi = t.size();
  return t.record(std::move(out), input.requires_grad(), [=](Tape& tp) {
    const Tensor& go = tp.grad(oi);
    Tensor& gi = tp.grad(ii);
    for (std::size_t p = 0; p < batch * ch; ++p)
      for (std::size_t oy = 0; oy < out_h; ++oy)
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          const std::size_t y0 = lo(oy, h, out_h), y1 = hi(oy, h, out_h);
          const std::size_t x0 = lo(ox, w, out_w), x1 = hi(ox, w, out_w);
          const double g = go[(p * out_h + oy) * out_w + ox] / static_cast<double>((y1 - y0) * (x1 - x0));
          for (std::size_t y = y0; y < y1; ++y)
            for (std::size_t x = x0; x < x1; ++x) gi[p * h * w + y * w + x] += g;
        }
  });
}

Var spatial_to_rows(const Var& input) {
  Tape& t = tape_of(input);
  require_rank(input, 4, "spatial_to_rows");
  const std::size_t batch = input.shape()[0], ch = input.shape()[1], h = input.shape()[2], w = input.shape()[3];
  const std::size_t cells = h * w;
  const Tensor& iv = input.value();
  Tensor out({batch * cells, ch});
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t s = 0; s < cells; ++s) out[(n * cells + s) * ch + c] = iv[(n * ch + c) * cells + s];
  const std::size_t ii = input.index(), oi = t.size();
  return t.record(std::move(out), input.requires_grad(), [=](Tape& tp) {
    const Tensor& go = tp.grad(oi);
    Tensor& gi = tp.grad(ii);
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t s = 0; s < cells; ++s) gi[(n * ch + c) * cells + s] += go[(n * cells + s) * ch + c];
  });
}

// ---------------------------------------------------------------------------
// regularisation and normalisation

Var dropout(const Var& x, double rate, Rng& rng, bool training) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ValidationError("dropout: rate must be in [0,1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  Tape& t = tape_of(x);
  require_finite(x, "dropout");
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.value().size());
  for (auto& m : mask) m = rng.uniform() < rate ? 0.0 : keep_scale;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  const std::size_t xi = x.index(), oi = t.size();
  return t.record(std::move(out), x.requires_grad(), [=, mask = std::move(mask)](Tape& tp) {
    const Tensor& go = tp.grad(oi);
    Tensor& gx = tp.grad(xi);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * mask[i];
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  Tape& t = tape_of(x, gain);
  if (bias.tape() != &t) throw ValidationError("layer_norm: inputs live on different tapes");
  require_rank(x, 2, "layer_norm");
  require_finite(x, "layer_norm");
  const std::size_t rows = x.shape()[0], d = x.shape()[1];
  if (gain.value().size() != d) shape_mismatch("layer_norm", x.shape(), gain.shape());
  if (bias.value().size() != d) shape_mismatch("layer_norm", x.shape(), bias.shape());
  const Tensor& xv = x.value();
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  Tensor out({rows, d});
  std::vector<double> normed(rows * d), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      normed[r * d + j] = (row[j] - mu) * inv_std[r];
      out[r * d + j] = normed[r * d + j] * gv[j] + bv[j];
    }
  }
  const std::size_t xi = x.index(), gi = gain.index(), bi = bias.index(), oi = t.size();
  const bool needs = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
  return t.record(std::move(out), needs,
                  [=, normed = std::move(normed), inv_std = std::move(inv_std)](Tape& tp) {
                    const Tensor& go = tp.grad(oi);
                    const Tensor& gv = tp.value(gi);
                    for (std::size_t r = 0; r < rows; ++r) {
                      const double* g = go.data() + r * d;
                      const double* xh = normed.data() + r * d;
                      if (tp.requires_grad(gi))
                        for (std::size_t j = 0; j < d; ++j) tp.grad(gi)[j] += g[j] * xh[j];
                      if (tp.requires_grad(bi))
                        for (std::size_t j = 0; j < d; ++j) tp.grad(bi)[j] += g[j];
                      if (tp.requires_grad(xi)) {
                        double mean_g = 0.0, mean_gx = 0.0;
                        for (std::size_t j = 0; j < d; ++j) {
                          const double gh = g[j] * gv[j];
                          mean_g += gh;
                          mean_gx += gh * xh[j];
                        }
                        mean_g /= static_cast<double>(d);
                        mean_gx /= static_cast<double>(d);
                        Tensor& gx = tp.grad(xi);
                        for (std::size_t j = 0; j < d; ++j) {
                          gx[r * d + j] += inv_std[r] * (g[j] * gv[j] - mean_g - xh[j] * mean_gx);
                        }
                      }
                    }
                  });
}

// ---------------------------------------------------------------------------
// losses

Var pick(const Var& probs, std::span<const int> targets) {
  Tape& t = tape_of(probs);
  require_rank(probs, 2, "pick");
  const std::size_t rows = probs.shape()[0], cols = probs.shape()[1];
  if (targets.size() != rows) {
    throw ShapeError("pick: " + std::to_string(targets.size()) + " targets for shape " + to_string(probs.shape()));
  }
  std::vector<int> tg(targets.begin(), targets.end());
  Tensor out({rows, 1});
  for (std::size_t r = 0; r < rows; ++r) {
    if (tg[r] < 0 || static_cast<std::size_t>(tg[r]) >= cols) {
      throw ValidationError("pick: target " + std::to_string(tg[r]) + " outside " + std::to_string(cols) + " columns");
    }
    out[r] = probs.value()[r * cols + tg[r]];
  }
  const std::size_t pi = probs.index(), oi = t.size();
  return t.record(std::move(out), probs.requires_grad(), [=](Tape& tp) {
    const Tensor& go = tp.grad(oi);
    Tensor& gp = tp.grad(pi);
    for (std::size_t r = 0; r < rows; ++r) gp[r * cols + tg[r]] += go[r];
  });
}

Var cross_entropy_logits(const Var& logits, std::span<const int> targets) {
  Tape& t = tape_of(logits);
  require_rank(logits, 2, "cross_entropy_logits");
  require_finite(logits, "cross_entropy_logits");
  const std::size_t rows = logits.shape()[0], cols = logits.shape()[1];
  if (targets.size() != rows || rows == 0) {
    throw ShapeError("cross_entropy_logits: " + std::to_string(targets.size()) + " targets for shape " +
                     to_string(logits.shape()));
  }
  std::vector<int> tg(targets.begin(), targets.end());
  const Tensor& lv = logits.value();
  std::vector<double> probs(rows * cols);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (tg[r] < 0 || static_cast<std::size_t>(tg[r]) >= cols) {
      throw ValidationError("cross_entropy_logits: target " + std::to_string(tg[r]) + " outside " +
                            std::to_string(cols) + " classes");
    }
    const double* row = lv.data() + r * cols;
    double mx = row[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      probs[r * cols + j] = std::exp(row[j] - mx);
      z += probs[r * cols + j];
    }
    for (std::size_t j = 0; j < cols; ++j) probs[r * cols + j] /= z;
    total += (mx + std::log(z)) - row[tg[r]];
  }
  const double inv_rows = 1.0 / static_cast<double>(rows);
  const std::size_t li = logits.index(), oi = t.size();
  return t.record(Tensor::scalar(total * inv_rows), logits.requires_grad(),
                  [=, probs = std::move(probs)](Tape& tp) {
                    const double g = tp.grad(oi)[0] * inv_rows;
                    Tensor& gl = tp.grad(li);
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t j = 0; j < cols; ++j) gl[r * cols + j] += g * probs[r * cols + j];
                      gl[r * cols + tg[r]] -= g;
                    }
                  });
}

}  // namespace capseq
