#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "loagen/core/optim.hpp"
#include "loagen/model/translator.hpp"
#include "support/gradcheck.hpp"

using namespace loagen;
using namespace loagen::model;

namespace {

TranslatorConfig tiny_cfg() {
  TranslatorConfig c;
  c.width = 16;
  c.depth = 1;
  c.heads = 2;
  c.loa_dim = 8;
  c.lambda = 8;
  c.target_length = 4;
  c.max_condition_length = 16;
  return c;
}

LoaSequence make_target(std::size_t L, std::size_t D, Rng& rng,
                        std::size_t lambda = 8) {
  LoaSequence y;
  y.vectors = rng.randn({L, D});
  y.lambda = lambda;
  return y;
}

}  // namespace

TEST_CASE("target stats: exact moments and round trip") {
  LoaSequence a, b;
  a.vectors = Tensor({2, 2}, {1.0, 10.0, 3.0, 20.0});
  b.vectors = Tensor({2, 2}, {5.0, 30.0, 7.0, 40.0});
  auto s = TargetStats::compute({a, b});
  CHECK(s.mean.at(0, 0) == doctest::Approx(4.0));
  CHECK(s.mean.at(0, 1) == doctest::Approx(25.0));
  CHECK(s.std.at(0, 0) == doctest::Approx(std::sqrt(5.0)));

  Rng rng(1);
  Tensor y = rng.randn({3, 2});
  Tensor rt = s.invert(s.apply(y));
  for (std::size_t i = 0; i < y.numel(); ++i)
    CHECK(rt[i] == doctest::Approx(y[i]).epsilon(1e-12));
}

TEST_CASE("generate: rollout shape, determinism, length gating") {
  Rng rng(2);
  nn::ParamStore ps;
  LoaTranslator tr(ps, tiny_cfg(), rng);
  Var C = Var::constant(rng.randn({3, 16}));
  auto y1 = tr.generate(C, 4, /*allow_untrained=*/true);
  auto y2 = tr.generate(C, 4, true);
  CHECK(y1.length() == 4);
  CHECK(y1.vectors.cols() == 8);
  CHECK(y1.lambda == 8);
  for (std::size_t i = 0; i < y1.vectors.numel(); ++i)
    CHECK(y1.vectors[i] == y2.vectors[i]);

  CHECK_THROWS_AS(tr.generate(C, 4), StateError);
  CHECK_THROWS_AS(tr.generate(C, 5, true), ConfigError);
  tr.set_trained(true);
  CHECK_NOTHROW(tr.generate(C, 4));
}

TEST_CASE("loss input validation") {
  Rng rng(3);
  nn::ParamStore ps;
  LoaTranslator tr(ps, tiny_cfg(), rng);
  Var C = Var::constant(rng.randn({3, 16}));
  LoaSequence empty;
  CHECK_THROWS_AS(tr.loss(C, empty), StateError);

  auto bad_lambda = make_target(4, 8, rng, 2);
  CHECK_THROWS_AS(tr.loss(C, bad_lambda), ConfigError);
  auto bad_len = make_target(6, 8, rng);
  CHECK_THROWS_AS(tr.loss(C, bad_len), ConfigError);

  auto y = make_target(4, 8, rng);
  Var Cbad = Var::constant(rng.randn({3, 12}));
  CHECK_THROWS_AS(tr.loss(Cbad, y), ShapeError);
  Var Clong = Var::constant(rng.randn({17, 16}));
  CHECK_THROWS_AS(tr.loss(Clong, y), LengthError);
  CHECK_NOTHROW(tr.loss(C, y));
}

TEST_CASE("causality: prediction at l is invariant to targets >= l") {
  Rng rng(4);
  nn::ParamStore ps;
  LoaTranslator tr(ps, tiny_cfg(), rng);
  Var C = Var::constant(rng.randn({2, 16}));
  auto y = make_target(4, 8, rng);
  Tensor base = tr.predict_teacher(C, y);

  // perturb y_3 (row 2): predictions y_1, y_2 (rows 0,1) must be bit-identical
  auto yp = y;
  for (std::size_t d = 0; d < 8; ++d) yp.vectors.at(2, d) += 1.5;
  Tensor pert = tr.predict_teacher(C, yp);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t d = 0; d < 8; ++d)
      CHECK(base.at(r, d) == pert.at(r, d));
  // and the prediction that consumes y_3 changes
  bool moved = false;
  for (std::size_t d = 0; d < 8; ++d)
    if (base.at(3, d) != pert.at(3, d)) moved = true;
  CHECK(moved);
}

TEST_CASE("condition visibility: perturbing C changes the first prediction") {
  Rng rng(5);
  nn::ParamStore ps;
  LoaTranslator tr(ps, tiny_cfg(), rng);
  Tensor Cv = rng.randn({2, 16});
  auto y = make_target(4, 8, rng);
  Tensor base = tr.predict_teacher(Var::constant(Cv), y);
  Cv.at(0, 0) += 2.0;
  Tensor pert = tr.predict_teacher(Var::constant(Cv), y);
  bool moved = false;
  for (std::size_t d = 0; d < 8; ++d)
    if (base.at(0, d) != pert.at(0, d)) moved = true;
  CHECK(moved);
}

TEST_CASE("loss agrees with teacher predictions under the stats transform") {
  Rng rng(6);
  nn::ParamStore ps;
  LoaTranslator tr(ps, tiny_cfg(), rng);
  TargetStats s;
  s.mean = rng.randn({1, 8});
  s.std = Tensor({1, 8}, 2.5);
  tr.set_stats(s);
  Var C = Var::constant(rng.randn({2, 16}));
  auto y = make_target(4, 8, rng);
  double l = tr.loss(C, y).scalar();

  Tensor pred = tr.predict_teacher(C, y);
  Tensor ps_ = s.apply(pred), ys = s.apply(y.vectors);
  double acc = 0.0;
  for (std::size_t i = 0; i < ps_.numel(); ++i) {
    double d = ps_[i] - ys[i];
    acc += d * d;
  }
  CHECK(l == doctest::Approx(acc / static_cast<double>(ps_.numel()))
                 .epsilon(1e-10));
}

TEST_CASE("translator gradient matches finite differences") {
  Rng rng(7);
  nn::ParamStore ps;
  auto c = tiny_cfg();
  c.width = 8;
  c.loa_dim = 4;
  c.target_length = 3;
  LoaTranslator tr(ps, c, rng);
  Var C = Var::constant(rng.randn({2, 8}, 0.5));
  auto y = make_target(3, 4, rng);
  ps.zero_grad();
  ag::backward(tr.loss(C, y));
  auto r = test::gradcheck(ps, [&] { return tr.loss(C, y).scalar(); }, 1e-5, 6);
  CAPTURE(r.rel_error);
  CHECK(r.rel_error < 1e-4);
}

TEST_CASE("overfit one pair: rollout mse under 10% of target variance") {
  Rng rng(8);
  nn::ParamStore ps;
  LoaTranslator tr(ps, tiny_cfg(), rng);
  Var C = Var::constant(rng.randn({2, 16}));
  auto y = make_target(4, 8, rng);
  tr.set_stats(TargetStats::compute({y}));
  optim::AdamW opt(ps, {.lr = 3e-3});
  std::vector<double> losses;
  for (int i = 0; i < 500; ++i) {
    ps.zero_grad();
    Var l = tr.loss(C, y);
    losses.push_back(l.scalar());
    ag::backward(l);
    opt.step();
  }
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 50; ++i) {
    head += losses[static_cast<std::size_t>(i)];
    tail += losses[losses.size() - 1 - static_cast<std::size_t>(i)];
  }
  CHECK(tail < head);  // smoothed decrease

  tr.set_trained(true);
  auto yhat = tr.generate(C, 4);
  double mse = 0.0, var = 0.0, mean = 0.0;
  for (std::size_t i = 0; i < y.vectors.numel(); ++i) mean += y.vectors[i];
  mean /= static_cast<double>(y.vectors.numel());
  for (std::size_t i = 0; i < y.vectors.numel(); ++i) {
    double d = yhat.vectors[i] - y.vectors[i];
    mse += d * d;
    double v = y.vectors[i] - mean;
    var += v * v;
  }
  CAPTURE(mse / var);
  CHECK(mse < 0.1 * var);
}
