#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "loagen/core/optim.hpp"
#include "loagen/model/semantic_encoder.hpp"
#include "support/gradcheck.hpp"

using namespace loagen;
using namespace loagen::model;

namespace {

audio::MelSpectrogram make_mel(std::size_t T, std::size_t F, Rng& rng,
                               double scale = 1.0) {
  audio::MelSpectrogram X;
  X.values = rng.randn({T, F}, scale);
  X.frame_hop = 160;
  X.sample_rate = 16000;
  return X;
}

MaeConfig tiny_cfg() {
  MaeConfig c;
  c.patch_size = 4;
  c.embed_dim = 16;
  c.depth = 2;
  c.heads = 2;
  c.decoder_dim = 12;
  c.decoder_depth = 1;
  c.decoder_heads = 2;
  c.avg_layers = 2;
  return c;
}

}  // namespace

TEST_CASE("patchify shapes: 1024x128 with P=16 gives 64x8 grid, length 512") {
  Rng rng(1);
  nn::ParamStore ps;
  MaeConfig c;
  c.patch_size = 16;
  c.embed_dim = 32;  // slim embedding, this is a shape test
  c.depth = 1;
  c.avg_layers = 1;
  SemanticEncoder mae(ps, c, rng);
  auto X = make_mel(1024, 128, rng);
  auto g = mae.patchify(X);
  CHECK(g.t_patches == 64);
  CHECK(g.f_patches == 8);
  CHECK(g.length() == 512);
  CHECK(g.dim() == 32);
}

TEST_CASE("patchify: single patch and non-divisible axis") {
  Rng rng(2);
  nn::ParamStore ps;
  auto c = tiny_cfg();
  SemanticEncoder mae(ps, c, rng);
  auto X1 = make_mel(4, 4, rng);
  auto g = mae.patchify(X1);
  CHECK(g.length() == 1);

  auto Xbad = make_mel(10, 8, rng);
  CHECK_THROWS_WITH_AS(mae.patchify(Xbad),
                       doctest::Contains("time axis"), ShapeError);
  auto Xbad2 = make_mel(8, 10, rng);
  CHECK_THROWS_WITH_AS(mae.patchify(Xbad2),
                       doctest::Contains("frequency axis"), ShapeError);
}

TEST_CASE("pooling law on the default 64x8 grid: lengths 512/128/32/8") {
  Rng rng(3);
  PatchGrid g;
  g.t_patches = 64;
  g.f_patches = 8;
  g.patch_size = 16;
  g.embeddings = rng.randn({512, 24});
  CHECK(pool_loa(g, 1).length() == 512);
  CHECK(pool_loa(g, 2).length() == 128);
  CHECK(pool_loa(g, 4).length() == 32);
  CHECK(pool_loa(g, 8).length() == 8);
}

TEST_CASE("pool_loa with lambda=1 is the exact identity up to reshape") {
  Rng rng(4);
  PatchGrid g;
  g.t_patches = 6;
  g.f_patches = 4;
  g.embeddings = rng.randn({24, 5});
  auto y = pool_loa(g, 1);
  CHECK(y.vectors.shape() == g.embeddings.shape());
  for (std::size_t i = 0; i < y.vectors.numel(); ++i)
    CHECK(y.vectors[i] == g.embeddings[i]);
}

TEST_CASE("pool_loa on constant grid returns the constant in both modes") {
  PatchGrid g;
  g.t_patches = 4;
  g.f_patches = 4;
  g.embeddings = Tensor({16, 3}, 2.5);
  for (auto mode : {PoolMode::kAvgMaxBlend, PoolMode::kAvgOfMax}) {
    auto y = pool_loa(g, 2, mode);
    CHECK(y.length() == 4);
    for (std::size_t i = 0; i < y.vectors.numel(); ++i)
      CHECK(y.vectors[i] == doctest::Approx(2.5));
  }
}

TEST_CASE("pool_loa rejects lambda not dividing an axis") {
  PatchGrid g;
  g.t_patches = 6;
  g.f_patches = 4;
  g.embeddings = Tensor({24, 2});
  CHECK_THROWS_AS(pool_loa(g, 4), ShapeError);
}

TEST_CASE("pool_loa reshape is time-major") {
  // grid 2x2, one channel; value = 10*t + f
  PatchGrid g;
  g.t_patches = 2;
  g.f_patches = 2;
  g.embeddings = Tensor({4, 1}, {0.0, 1.0, 10.0, 11.0});
  auto y = pool_loa(g, 1);
  CHECK(y.vectors[0] == 0.0);
  CHECK(y.vectors[1] == 1.0);   // f inner
  CHECK(y.vectors[2] == 10.0);  // t outer
}

TEST_CASE("mask spec: count, uniqueness, range") {
  Rng rng(5);
  auto m = MaskSpec::random(100, 0.75, rng);
  CHECK(m.masked_indices.size() == 75);
  for (std::size_t i = 1; i < m.masked_indices.size(); ++i)
    CHECK(m.masked_indices[i] > m.masked_indices[i - 1]);
  CHECK(m.masked_indices.back() < 100);
}

TEST_CASE("mae loss restricted to masked set") {
  Rng rng(6);
  nn::ParamStore ps;
  SemanticEncoder mae(ps, tiny_cfg(), rng);
  auto X = make_mel(8, 8, rng);  // 2x2 grid of 4x4 patches
  MaskSpec m;
  m.ratio = 0.5;
  m.masked_indices = {1, 2};
  double l0 = mae.pretrain_loss(X, m).scalar();

  // perturbing the target on an UNMASKED patch leaves the loss unchanged
  Tensor target = mae.extract_patches(X);
  for (std::size_t c = 0; c < target.cols(); ++c) target.at(0, c) += 3.21;
  CHECK(mae.pretrain_loss(X, m, &target).scalar() ==
        doctest::Approx(l0).epsilon(1e-12));

  // perturbing the target on a MASKED patch changes it
  Tensor target2 = mae.extract_patches(X);
  for (std::size_t c = 0; c < target2.cols(); ++c) target2.at(1, c) += 3.21;
  CHECK(mae.pretrain_loss(X, m, &target2).scalar() != doctest::Approx(l0));

  // decoder output equal to the target on the masked set -> loss 0
  Tensor perfect = mae.reconstruct(X, m);
  CHECK(mae.pretrain_loss(X, m, &perfect).scalar() ==
        doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("mae: empty mask is a configuration error") {
  Rng rng(7);
  nn::ParamStore ps;
  SemanticEncoder mae(ps, tiny_cfg(), rng);
  auto X = make_mel(8, 8, rng);
  MaskSpec m;
  CHECK_THROWS_AS(mae.pretrain_loss(X, m), ConfigError);
}

TEST_CASE("mae gradient matches central finite differences") {
  Rng rng(8);
  nn::ParamStore ps;
  auto c = tiny_cfg();
  c.embed_dim = 8;
  c.decoder_dim = 8;
  c.heads = 2;
  SemanticEncoder mae(ps, c, rng);
  auto X = make_mel(8, 8, rng, 0.5);
  MaskSpec m;
  m.ratio = 0.5;
  m.masked_indices = {0, 3};

  ps.zero_grad();
  ag::backward(mae.pretrain_loss(X, m));
  auto r = test::gradcheck(
      ps, [&] { return mae.pretrain_loss(X, m).scalar(); }, 1e-5, 6);
  CAPTURE(r.rel_error);
  CHECK(r.rel_error < 1e-4);
}

TEST_CASE("mae overfits a single batch") {
  Rng rng(9);
  nn::ParamStore ps;
  SemanticEncoder mae(ps, tiny_cfg(), rng);
  auto X = make_mel(8, 8, rng, 0.5);
  Rng mask_rng(11);
  auto m = MaskSpec::random(4, 0.5, mask_rng);
  optim::AdamW opt(ps, {.lr = 3e-3});
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 300; ++i) {
    ps.zero_grad();
    Var loss = mae.pretrain_loss(X, m);
    if (i == 0) first = loss.scalar();
    last = loss.scalar();
    ag::backward(loss);
    opt.step();
  }
  CHECK(last < first);
  CHECK(last < 0.1 * first);
}

TEST_CASE("encode: determinism, averaging window semantics, state gating") {
  Rng rng(10);
  nn::ParamStore ps;
  auto c = tiny_cfg();
  SemanticEncoder mae(ps, c, rng);
  auto X = make_mel(8, 8, rng);

  CHECK_THROWS_AS(mae.encode(X), StateError);
  auto g1 = mae.encode(X, /*allow_untrained=*/true);
  auto g2 = mae.encode(X, true);
  for (std::size_t i = 0; i < g1.embeddings.numel(); ++i)
    CHECK(g1.embeddings[i] == g2.embeddings[i]);

  // window of 1 equals the final layer output: compare depth-2 average vs
  // single layer by linearity (avg of 2 != last unless equal); direct check:
  auto glast = mae.encode_layers(X, 1, true);
  auto gall = mae.encode_layers(X, 2, true);
  bool differ = false;
  for (std::size_t i = 0; i < glast.embeddings.numel(); ++i)
    if (std::abs(glast.embeddings[i] - gall.embeddings[i]) > 1e-12)
      differ = true;
  CHECK(differ);

  CHECK_THROWS_AS(mae.encode_layers(X, 5, true), ConfigError);

  mae.set_trained(true);
  CHECK_NOTHROW(mae.encode(X));
}
