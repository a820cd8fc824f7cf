#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "capseq/error.hpp"
#include "capseq/sat_model.hpp"
#include "support/gradcheck.hpp"
#include "support/synthetic.hpp"

using namespace capseq;
using capseq::testing::check_gradients;
using capseq::testing::random_tensor;

namespace {

SatConfig tiny_config() {
  SatConfig c;
  c.vocab_size = 8;
  c.embed_dim = 4;
  c.hidden_dim = 5;
  c.attention_dim = 3;
  c.features = 3;
  c.pooled_side = 2;
  c.conv1_channels = 2;
  c.conv2_channels = 2;
  c.image_side = 6;
  c.dropout = 0.1;
  return c;
}

Image random_image(Rng& rng, std::size_t side) {
  Image img{side, side, std::vector<double>(side * side)};
  for (double& v : img.values) v = rng.uniform();
  return img;
}

void zero_all(SatModel& m) {
  for (Parameter* p : m.params().all()) p->value.fill(0.0);
}

Tensor region_rows(Rng& rng, std::size_t batch, std::size_t regions, std::size_t features) {
  return random_tensor(rng, {batch * regions, features});
}

}  // namespace

TEST_CASE("encoder emits r*r regions for any sufficiently large input") {
  SatModel model(tiny_config(), 1);
  Rng rng(2);
  for (std::size_t side : {2, 3, 5, 6, 9}) {
    Image img = random_image(rng, side);
    Tape tape;
    const Image* batch[] = {&img};
    auto grid = model.encode_image(tape, batch);
    CHECK(grid.regions == 4);
    CHECK(grid.rows.shape() == Shape{4, 3});
  }
  Image small = random_image(rng, 1);
  Tape tape;
  const Image* batch[] = {&small};
  CHECK_THROWS_AS(model.encode_image(tape, batch), ValidationError);
}

TEST_CASE("spatially constant input gives identical regions with 1x1 kernels") {
  // With zero padding, larger kernels see the border and break the symmetry.
  SatConfig c = tiny_config();
  c.kernel_size = 1;
  SatModel model(c, 3);
  Image img{8, 8, std::vector<double>(64, 0.6)};
  Tape tape;
  const Image* batch[] = {&img};
  auto rows = model.encode_image(tape, batch).rows.value();
  for (std::size_t i = 1; i < 4; ++i)
    for (std::size_t f = 0; f < 3; ++f) CHECK(rows.at(i, f) == rows.at(0, f));
}

TEST_CASE("init_state with zero weights is zero") {
  SatModel model(tiny_config(), 4);
  zero_all(model);
  Rng rng(5);
  Tape tape;
  auto grid = model.annotations(tape, region_rows(rng, 2, 4, 3), 2);
  auto s = model.init_state(grid);
  for (double v : s.h.value().values()) CHECK(v == 0.0);
  for (double v : s.c.value().values()) CHECK(v == 0.0);
}

TEST_CASE("identical regions: mean equals any region") {
  Tape tape;
  Tensor rows({4, 3});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t f = 0; f < 3; ++f) rows.at(i, f) = 0.1 * static_cast<double>(f + 1);
  auto m = group_mean_rows(tape.constant(rows), 4).value();
  for (std::size_t f = 0; f < 3; ++f) CHECK(m.at(0, f) == doctest::Approx(rows.at(0, f)).epsilon(1e-15));
}

TEST_CASE("constant attention scores give uniform weights and the mean context") {
  SatModel model(tiny_config(), 6);
  model.params().get("attention.W_a").value.fill(0.0);
  Rng rng(7);
  Tape tape;
  Tensor rows = region_rows(rng, 1, 4, 3);
  auto grid = model.annotations(tape, rows, 1);
  auto att = model.attend(grid, tape.constant(random_tensor(rng, {1, 5})));
  for (double a : att.alpha.value().values()) CHECK(a == doctest::Approx(0.25).epsilon(1e-15));
  for (std::size_t f = 0; f < 3; ++f) {
    double mean = 0.0;
    for (std::size_t i = 0; i < 4; ++i) mean += rows.at(i, f) / 4.0;
    CHECK(att.context.value()[f] == doctest::Approx(mean).epsilon(1e-14));
  }
}

TEST_CASE("softmax of log weights recovers the normalised weights") {
  Tape tape;
  auto a = softmax(tape.constant(Tensor::matrix(1, 3, {std::log(1.0), std::log(2.0), std::log(3.0)})), 1).value();
  CHECK(a[0] == doctest::Approx(1.0 / 6).epsilon(1e-15));
  CHECK(a[1] == doctest::Approx(2.0 / 6).epsilon(1e-15));
  CHECK(a[2] == doctest::Approx(3.0 / 6).epsilon(1e-15));
}

TEST_CASE("attention scores are read through the MLP") {
  // One attention unit reading feature 0, so e_i = a_i[0].
  SatConfig c = tiny_config();
  c.attention_dim = 1;
  SatModel model(c, 8);
  zero_all(model);
  model.params().get("attention.W_a").value[0] = 1.0;
  model.params().get("attention.w").value[0] = 1.0;
  Tensor rows({4, 3});
  for (std::size_t i = 0; i < 4; ++i) rows.at(i, 0) = std::log(static_cast<double>(i + 1));
  Tape tape;
  auto att = model.attend(model.annotations(tape, rows, 1), tape.constant(Tensor({1, 5})));
  for (std::size_t i = 0; i < 4; ++i) CHECK(att.alpha.value()[i] == doctest::Approx((i + 1) / 10.0).epsilon(1e-14));

  // Score gap of 50 makes the context the selected region.
  Rng rng(9);
  Tensor sharp = random_tensor(rng, {4, 3});
  for (std::size_t i = 0; i < 4; ++i) sharp.at(i, 0) = i == 2 ? 50.0 : 0.0;
  Tape t2;
  auto hard = model.attend(model.annotations(t2, sharp, 1), t2.constant(Tensor({1, 5})));
  for (std::size_t f = 0; f < 3; ++f) CHECK(std::abs(hard.context.value()[f] - sharp.at(2, f)) <= 1e-9);
}

TEST_CASE("LSTM step with zero weights") {
  SatModel model(tiny_config(), 10);
  zero_all(model);
  Tape tape;
  DecoderState s{tape.constant(Tensor({1, 5})), tape.constant(Tensor({1, 5}))};
  const int z[] = {3};
  auto next = model.lstm_step(z, s, tape.constant(Tensor({1, 3}, 0.7)));
  for (double v : next.c.value().values()) CHECK(v == 0.0);
  for (double v : next.h.value().values()) CHECK(v == 0.0);
}

TEST_CASE("forget gate open, input gate closed carries memory") {
  SatModel model(tiny_config(), 11);
  zero_all(model);
  auto& b = model.params().get("lstm.b").value;
  for (std::size_t k = 0; k < 5; ++k) {
    b[k] = -50.0;     // i
    b[5 + k] = 50.0;  // f
  }
  Rng rng(12);
  Tape tape;
  Tensor c_prev = random_tensor(rng, {1, 5});
  DecoderState s{tape.constant(random_tensor(rng, {1, 5})), tape.constant(c_prev)};
  const int z[] = {1};
  auto next = model.lstm_step(z, s, tape.constant(random_tensor(rng, {1, 3})));
  for (std::size_t k = 0; k < 5; ++k) CHECK(next.c.value()[k] == doctest::Approx(c_prev[k]).epsilon(1e-15));
}

TEST_CASE("output distribution: uniform at zero weights, normalised in general") {
  SatModel model(tiny_config(), 13);
  Rng rng(14);
  {
    Tape tape;
    auto probs = model.output_distribution(tape.constant(random_tensor(rng, {2, 5})),
                                           tape.constant(random_tensor(rng, {2, 3})), std::vector<int>{1, 4}, true, rng);
    for (std::size_t r = 0; r < 2; ++r) {
      double s = 0.0;
      for (std::size_t w = 0; w < 8; ++w) s += probs.value().at(r, w);
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }
  zero_all(model);
  Tape tape;
  auto probs = model.output_distribution(tape.constant(random_tensor(rng, {1, 5})),
                                         tape.constant(random_tensor(rng, {1, 3})), std::vector<int>{2}, false, rng);
  for (double v : probs.value().values()) CHECK(v == doctest::Approx(1.0 / 8).epsilon(1e-15));
}

TEST_CASE("attention weights are a distribution and the context is a convex combination") {
  Rng rng(15);
  for (int trial = 0; trial < 100; ++trial) {
    SatModel model(tiny_config(), 100 + trial);
    Tape tape;
    Tensor rows = region_rows(rng, 3, 4, 3);
    auto att = model.attend(model.annotations(tape, rows, 3), tape.constant(random_tensor(rng, {3, 5}, -2, 2)));
    for (std::size_t b = 0; b < 3; ++b) {
      double s = 0.0;
      for (std::size_t i = 0; i < 4; ++i) {
        CHECK(att.alpha.value().at(b, i) >= 0.0);
        s += att.alpha.value().at(b, i);
      }
      CHECK(std::abs(s - 1.0) <= 1e-9);
      for (std::size_t f = 0; f < 3; ++f) {
        double lo = 1e300, hi = -1e300;
        for (std::size_t i = 0; i < 4; ++i) {
          lo = std::min(lo, rows.at(b * 4 + i, f));
          hi = std::max(hi, rows.at(b * 4 + i, f));
        }
        CHECK(att.context.value().at(b, f) >= lo - 1e-9);
        CHECK(att.context.value().at(b, f) <= hi + 1e-9);
      }
    }
  }
}

TEST_CASE("caption sorting and effective batch") {
  const std::size_t lengths[] = {2, 5, 3};
  auto order = sort_by_length(lengths);
  CHECK(order == std::vector<std::size_t>{1, 2, 0});
  const std::size_t sorted[] = {5, 3, 2};
  auto eff = effective_batch_sizes(sorted);
  CHECK(eff == std::vector<std::size_t>{3, 3, 2, 1, 1});
  CHECK(eff[4] == 1);
}

TEST_CASE("sat_loss: perfect predictions and the plain cross-entropy case") {
  Tape tape;
  Var p0 = tape.constant(Tensor::matrix(2, 3, {0, 1, 0, 1, 0, 0}));
  Var p1 = tape.constant(Tensor::matrix(1, 3, {0, 0, 1}));
  const Var probs[] = {p0, p1};
  const std::vector<std::vector<int>> targets{{1, 0}, {2}};
  CHECK(sat_loss(probs, targets, {}, 0.0).value().item() == 0.0);

  Var q0 = tape.constant(Tensor::matrix(1, 2, {0.25, 0.75}));
  const Var qs[] = {q0};
  const std::vector<std::vector<int>> qt{{1}};
  CHECK(sat_loss(qs, qt, {}, 0.0).value().item() == -std::log(0.75));
}

TEST_CASE("uniform attention penalty equals lambda R (1 - T/R)^2") {
  const std::size_t R = 4, T = 3;
  Tape tape;
  std::vector<Var> alphas;
  for (std::size_t t = 0; t < T; ++t) alphas.push_back(tape.constant(Tensor({1, R}, 1.0 / R)));
  Var p = tape.constant(Tensor::matrix(1, 2, {0.5, 0.5}));
  const Var probs[] = {p};
  const std::vector<std::vector<int>> targets{{0}};
  const double ce = std::log(2.0);
  const double lambda = 0.7;
  const double loss = sat_loss(probs, targets, alphas, lambda).value().item();
  const double expected = lambda * R * std::pow(1.0 - static_cast<double>(T) / R, 2);
  CHECK(std::abs(loss - ce - expected) <= 1e-12);
}

TEST_CASE("zero-probability targets are clamped") {
  Tape tape;
  Var p = tape.constant(Tensor::matrix(1, 2, {1.0, 0.0}));
  const Var probs[] = {p};
  const std::vector<std::vector<int>> targets{{1}};
  std::size_t clamped = 0;
  const double loss = sat_loss(probs, targets, {}, 0.0, &clamped).value().item();
  CHECK(clamped == 1);
  CHECK(loss == doctest::Approx(-std::log(1e-12)));
}

TEST_CASE("gradients of each SAT stage match finite differences") {
  SatModel model(tiny_config(), 16);
  Rng rng(17);
  Tensor rows = region_rows(rng, 2, 4, 3);
  Tensor h0 = random_tensor(rng, {2, 5});
  Tensor c0 = random_tensor(rng, {2, 5});
  Tensor proj = random_tensor(rng, {2, 8});
  Tensor proj4 = random_tensor(rng, {2, 4});
  const std::vector<int> z{3, 6};
  auto params = model.decoder_params();

  SUBCASE("init") {
    auto r = check_gradients(params, [&](Tape& t) {
      auto s = model.init_state(model.annotations(t, rows, 2));
      return add(sum(mul(s.h, t.constant(h0))), sum(mul(s.c, t.constant(c0))));
    });
    CHECK(r.max_rel_error <= 1e-4);
  }
  SUBCASE("attention") {
    auto r = check_gradients(params, [&](Tape& t) {
      auto att = model.attend(model.annotations(t, rows, 2), t.constant(h0));
      return add(sum(mul(att.alpha, t.constant(proj4))), sum(att.context));
    });
    CHECK(r.max_rel_error <= 1e-4);
  }
  SUBCASE("lstm") {
    auto r = check_gradients(params, [&](Tape& t) {
      auto s = model.lstm_step(z, {t.constant(h0), t.constant(c0)}, t.constant(Tensor({2, 3}, 0.3)));
      return add(sum(mul(s.h, t.constant(c0))), sum(mul(s.c, t.constant(h0))));
    });
    CHECK(r.max_rel_error <= 1e-4);
  }
  SUBCASE("deep output") {
    auto r = check_gradients(params, [&](Tape& t) {
      Rng drop(5);
      auto probs = model.output_distribution(t.constant(h0), t.constant(Tensor({2, 3}, -0.2)), z, true, drop);
      return sum(mul(log_clamped(probs), t.constant(proj)));
    });
    CHECK(r.max_rel_error <= 1e-4);
  }
}

TEST_CASE("end-to-end SAT gradient including the full encoder") {
  SatConfig c = tiny_config();
  c.lambda_ds = 0.3;
  SatModel model(c, 18);
  model.set_encoder_finetune(true);
  for (Parameter* p : model.encoder_params()) p->trainable = true;
  Rng rng(19);
  Image a = random_image(rng, 6), b = random_image(rng, 6);
  const std::vector<SatExample> batch{{&a, nullptr, {1, 4, 5, 6, 2}}, {&b, nullptr, {1, 7, 2}}};
  auto r = check_gradients(model.params().all(), [&](Tape& t) {
    Rng drop(3);
    return sat_forward(model, t, batch, true, drop).loss;
  });
  INFO(r.worst);
  CHECK(r.components == model.params().scalar_count());
  CHECK(r.max_rel_error <= 1e-4);
}

TEST_CASE("lambda 0 loss is the cross-entropy exactly") {
  SatModel model(tiny_config(), 20);
  Rng rng(21);
  Image a = random_image(rng, 6);
  const std::vector<SatExample> batch{{&a, nullptr, {1, 4, 5, 2}}};
  Tape tape;
  Rng drop(1);
  auto fwd = sat_forward(model, tape, batch, false, drop);
  CHECK(fwd.loss.value().item() == fwd.cross_entropy.value().item());
  CHECK_FALSE(fwd.penalty.has_value());
  CHECK(fwd.alphas.size() == 3);
}

TEST_CASE("frozen encoder is untouched by training; fine-tune trains the last layer only") {
  SatConfig c = tiny_config();
  SatModel model(c, 22);
  Rng rng(23);
  Image a = random_image(rng, 6), b = random_image(rng, 6);
  const std::vector<SatExample> data{{&a, nullptr, {1, 4, 5, 2}}, {&b, nullptr, {1, 6, 2}}};
  auto before = model.encoder_params();
  std::vector<Tensor> saved;
  for (Parameter* p : before) saved.push_back(p->value);
  SatTrainConfig tc;
  tc.epochs = 10;
  tc.batch_size = 2;
  train_teacher_forcing(model, data, tc);
  for (std::size_t i = 0; i < saved.size(); ++i) CHECK(before[i]->value == saved[i]);

  model.set_encoder_finetune(true);
  model.set_encoder_finetune(true);
  CHECK(model.params().get("encoder.conv3.weight").trainable);
  CHECK_FALSE(model.params().get("encoder.conv2.weight").trainable);
  Tape tape;
  Rng drop(2);
  tape.backward(sat_forward(model, tape, data, true, drop).loss);
  double norm = 0.0;
  for (double g : model.params().get("encoder.conv3.weight").grad.values()) norm += g * g;
  CHECK(norm > 0.0);
  for (double g : model.params().get("encoder.conv1.weight").grad.values()) CHECK(g == 0.0);

  tc.epochs = 2;
  train_teacher_forcing(model, data, tc);
  CHECK(model.params().get("encoder.conv3.weight").value != saved[4]);
  CHECK(model.params().get("encoder.conv1.weight").value == saved[0]);
  model.set_encoder_finetune(false);
  model.set_encoder_finetune(false);
  CHECK_FALSE(model.params().get("encoder.conv3.weight").trainable);
}

TEST_CASE("full-batch training loss falls over the first 20 epochs on the synthetic corpus") {
  capseq::testing::SyntheticCorpus corpus;
  SatConfig c;
  c.vocab_size = corpus.vocab.size();
  SatModel model(c, 24);
  SatTrainConfig tc;
  tc.epochs = 20;
  tc.batch_size = 8;
  tc.lr = 1e-3;
  auto trace = train_teacher_forcing(model, corpus.examples, tc);
  REQUIRE(trace.size() == 20);
  for (std::size_t e = 1; e < trace.size(); ++e) CHECK(trace[e] < trace[e - 1]);
}

TEST_CASE("heatmap export") {
  const std::vector<double> uniform(16, 1.0 / 16);
  auto flat = export_heatmap(uniform, 4, 32, 32);
  CHECK(flat.height == 32);
  CHECK(flat.width == 32);
  for (double v : flat.values) CHECK(v == 0.0);

  std::vector<double> one_hot(16, 0.0);
  one_hot[1 * 4 + 2] = 1.0;
  auto map = export_heatmap(one_hot, 4, 32, 32);
  // Cell (1, 2) covers rows 8..15 and columns 16..23; its centre pixels hold the peak.
  auto peak = std::max_element(map.values.begin(), map.values.end());
  CHECK(*peak == 1.0);
  const std::size_t idx = static_cast<std::size_t>(peak - map.values.begin());
  CHECK((idx / 32 == 11 || idx / 32 == 12));
  CHECK((idx % 32 == 19 || idx % 32 == 20));
  for (double v : map.values) CHECK((v >= 0.0 && v <= 1.0));

  auto odd = export_heatmap(one_hot, 4, 7, 13);
  CHECK(odd.height == 7);
  CHECK(odd.width == 13);
  CHECK_THROWS_AS(export_heatmap(uniform, 3, 8, 8), ValidationError);

  const auto dir = std::filesystem::temp_directory_path() / "capseq_test_sat";
  std::filesystem::create_directories(dir);
  write_heatmap(map, dir / "h.pgm", dir / "h.csv");
  auto raw = read_pgm(dir / "h.pgm");
  CHECK(raw.height == 32);
  CHECK(*std::max_element(raw.pixels.begin(), raw.pixels.end()) == 255);
  std::ifstream csv(dir / "h.csv");
  std::string line;
  std::size_t rows = 0;
  while (std::getline(csv, line)) ++rows;
  CHECK(rows == 32);
}
