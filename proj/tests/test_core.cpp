#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "loagen/core/autograd.hpp"
#include "loagen/core/checkpoint.hpp"
#include "loagen/core/config.hpp"
#include "loagen/core/nn.hpp"
#include "loagen/core/optim.hpp"
#include "support/gradcheck.hpp"

using namespace loagen;
using ag::Var;

namespace {

// Rebuilds the graph, runs backward, returns the loss value.
double run_graph(nn::ParamStore& ps, const std::function<Var()>& build,
                 bool do_backward) {
  if (do_backward) ps.zero_grad();
  Var loss = build();
  if (do_backward) ag::backward(loss);
  return loss.scalar();
}

void check_graph(nn::ParamStore& ps, const std::function<Var()>& build,
                 double tol = 1e-6) {
  run_graph(ps, build, true);
  auto r = test::gradcheck(ps, [&] { return run_graph(ps, build, false); });
  CAPTURE(r.rel_error);
  CAPTURE(r.max_abs_diff);
  CHECK(r.rel_error < tol);
}

}  // namespace

TEST_CASE("elementwise and reduction gradients") {
  Rng rng(1);
  nn::ParamStore ps;
  Var a = ps.add("a", rng.randn({3, 4}));
  Var b = ps.add("b", rng.randn({3, 4}));
  check_graph(ps, [&] {
    Var x = ag::mul(ag::add(a, ag::scale(b, 0.7)), ag::sub(a, b));
    x = ag::add_scalar(x, 0.3);
    return ag::mean(ag::mul(x, x));
  });
}

TEST_CASE("nonlinearity gradients") {
  Rng rng(2);
  nn::ParamStore ps;
  Var a = ps.add("a", rng.randn({2, 5}));
  check_graph(ps, [&] {
    Var x = ag::gelu(a);
    x = ag::add(x, ag::silu(a));
    x = ag::add(x, ag::tanh_(a));
    x = ag::add(x, ag::sigmoid(a));
    x = ag::add(x, ag::exp_(ag::scale(a, 0.3)));
    return ag::sum(ag::mul(x, x));
  });
}

TEST_CASE("matmul / transpose / slicing / concat gradients") {
  Rng rng(3);
  nn::ParamStore ps;
  Var a = ps.add("a", rng.randn({4, 3}));
  Var b = ps.add("b", rng.randn({3, 5}));
  Var c = ps.add("c", rng.randn({2, 5}));
  check_graph(ps, [&] {
    Var m = ag::matmul(a, b);                      // 4x5
    Var t = ag::transpose2d(m);                    // 5x4
    Var s = ag::slice_rows(m, 1, 2);               // 2x5
    Var cc = ag::concat_rows({s, c});              // 4x5
    Var sc = ag::slice_cols(cc, 1, 3);             // 4x3
    Var cat = ag::concat_cols({sc, a});            // 4x6
    Var sel = ag::select_rows(cat, {0, 2, 2, 3});  // repeated index
    return ag::add(ag::mse(sel, Var::constant(Tensor({4, 6}, 0.5))),
                   ag::scale(ag::mean(t), 0.1));
  });
}

TEST_CASE("softmax, cross entropy, layernorm, l2norm gradients") {
  Rng rng(4);
  nn::ParamStore ps;
  Var a = ps.add("a", rng.randn({3, 6}));
  Var g = ps.add("g", rng.randn({6}, 0.2));
  Var be = ps.add("be", rng.randn({6}, 0.2));
  check_graph(ps, [&] {
    Var sm = ag::softmax_rows(a);
    Var ln = ag::layer_norm_rows(a, g, be);
    Var l2 = ag::l2_normalize_rows(a);
    Var ce = ag::cross_entropy_rows(ag::matmul(a, ag::transpose2d(a)), {0, 1, 2});
    return ag::add(ag::add(ag::mean(ag::mul(sm, ln)), ag::mean(ag::mul(l2, l2))),
                   ag::scale(ce, 0.5));
  });
}

TEST_CASE("bias broadcast, scale_by, mean_rows gradients") {
  Rng rng(5);
  nn::ParamStore ps;
  Var x = ps.add("x", rng.randn({4, 3}));
  Var b = ps.add("b", rng.randn({3}));
  Var xc = ps.add("xc", rng.randn({2, 4, 3}));
  Var bc = ps.add("bc", rng.randn({2}));
  Var s = ps.add("s", rng.randn({1}));
  check_graph(ps, [&] {
    Var r = ag::add_row_bias(x, b);
    Var m = ag::mean_rows(r);  // 1x3
    Var c = ag::add_channel_bias(xc, bc);
    Var sb = ag::scale_by(r, s);
    return ag::add(ag::add(ag::sum(ag::mul(m, m)), ag::mean(ag::mul(c, c))),
                   ag::mean(ag::mul(sb, sb)));
  });
}

TEST_CASE("conv2d and upsample gradients") {
  Rng rng(6);
  nn::ParamStore ps;
  Var x = ps.add("x", rng.randn({2, 6, 4}));
  Var w = ps.add("w", rng.randn({3, 2, 3, 3}, 0.4));
  Var b = ps.add("b", rng.randn({3}));
  SUBCASE("stride 1 pad 1") {
    check_graph(ps, [&] {
      Var y = ag::conv2d(x, w, b, 1, 1);
      return ag::mean(ag::mul(y, y));
    });
  }
  SUBCASE("stride 2 pad 1") {
    check_graph(ps, [&] {
      Var y = ag::conv2d(x, w, b, 2, 1);
      Var u = ag::upsample_nearest2(y);
      return ag::mean(ag::mul(u, u));
    });
  }
}

TEST_CASE("transformer block gradcheck (tiny)") {
  Rng rng(7);
  nn::ParamStore ps;
  nn::TransformerBlock::Options opt;
  opt.dim = 8;
  opt.heads = 2;
  opt.mlp_hidden = 12;
  opt.cross_dims = 6;
  nn::TransformerBlock blk(ps, "blk", opt, rng);
  Tensor xin = rng.randn({5, 8});
  Tensor kv = rng.randn({3, 6});
  Tensor mask = nn::causal_prefix_mask(5, 2);
  check_graph(ps, [&] {
    Var x = Var::constant(xin);
    Var c = Var::constant(kv);
    Var y = blk(x, &mask, &c);
    return ag::mse(y, Var::constant(Tensor({5, 8}, 0.1)));
  }, 2e-6);
}

TEST_CASE("shape errors are reported") {
  Rng rng(8);
  Var a = Var::constant(rng.randn({2, 3}));
  Var b = Var::constant(rng.randn({3, 3}));
  CHECK_THROWS_AS(ag::add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(ag::matmul(a, a), std::invalid_argument);
  CHECK_THROWS_AS(ag::slice_rows(a, 1, 5), std::invalid_argument);
}

TEST_CASE("adamw with warmup reduces a quadratic and ramps lr") {
  Rng rng(9);
  nn::ParamStore ps;
  Var w = ps.add("w", rng.randn({4, 4}));
  optim::AdamW::Options o;
  o.lr = 0.05;
  o.warmup_steps = 10;
  optim::AdamW opt(ps, o);
  CHECK(opt.current_lr() == doctest::Approx(0.05 / 10));
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 200; ++i) {
    ps.zero_grad();
    Var loss = ag::mse(w, Var::constant(Tensor({4, 4}, 2.0)));
    ag::backward(loss);
    if (i == 0) first = loss.scalar();
    last = loss.scalar();
    opt.step();
  }
  CHECK(opt.current_lr() == doctest::Approx(0.05));
  CHECK(last < 0.05 * first);
}

TEST_CASE("checkpoint round-trip preserves values and digests") {
  Rng rng(10);
  nn::ParamStore ps;
  ps.add("layer.w", rng.randn({3, 7}));
  ps.add("layer.b", rng.randn({7}));
  auto dir = std::filesystem::temp_directory_path() / "loagen_ckpt_test";
  std::filesystem::create_directories(dir);

  ckpt::Manifest m;
  m.stage = "unit";
  m.config_hash = "deadbeef";
  m.step = 42;
  m.metrics["loss"] = 0.5;
  ckpt::save(ps, m, dir.string(), "model");

  auto d0 = ps.digest();
  nn::ParamStore ps2;
  Rng rng2(99);
  ps2.add("layer.w", rng2.randn({3, 7}));
  ps2.add("layer.b", rng2.randn({7}));
  auto m2 = ckpt::load(ps2, dir.string(), "model");
  CHECK(ps2.digest() == d0);
  CHECK(m2.step == 42);
  CHECK(m2.stage == "unit");
  CHECK(m2.metrics.at("loss") == doctest::Approx(0.5));

  // save -> load -> save produces identical blobs
  ckpt::save(ps2, m2, dir.string(), "model2");
  std::ifstream f1(dir / "model.bin", std::ios::binary);
  std::ifstream f2(dir / "model2.bin", std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), {});
  std::string s2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(s1 == s2);
  std::filesystem::remove_all(dir);
}

TEST_CASE("config dotted lookup and hash stability") {
  Config c(nlohmann::json{{"mel", {{"hop", 160}, {"n_mels", 128}}}});
  CHECK(c.get<int>("mel.hop", 0) == 160);
  CHECK(c.get<int>("mel.missing", 7) == 7);
  CHECK(c.get<double>("absent.key", 1.5) == doctest::Approx(1.5));
  auto h1 = c.hash();
  Config c2(nlohmann::json{{"mel", {{"hop", 160}, {"n_mels", 128}}}});
  CHECK(c2.hash() == h1);
  c2.set<int>("mel.hop", 161);
  CHECK(c2.hash() != h1);
}
