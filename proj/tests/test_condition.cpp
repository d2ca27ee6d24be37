#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "loagen/core/optim.hpp"
#include "loagen/model/condition.hpp"
#include "support/gradcheck.hpp"

using namespace loagen;
using namespace loagen::model;

namespace {

EmbedderConfig tiny_embedder_cfg() {
  EmbedderConfig c;
  c.dim = 8;
  c.hidden = 16;
  c.text_emb_dim = 8;
  c.time_chunks = 2;
  c.n_mels = 16;
  return c;
}

// four synthetic mel classes: energy in a class-specific band, plus a chirp
audio::MelSpectrogram class_mel(int cls, Rng& rng) {
  audio::MelSpectrogram X;
  X.values = rng.randn({8, 16}, 0.1);
  X.frame_hop = 160;
  X.sample_rate = 16000;
  for (std::size_t t = 0; t < 8; ++t) {
    if (cls == 3) {
      X.values.at(t, 2 + t) += 2.0;  // rising band
    } else {
      for (std::size_t f = static_cast<std::size_t>(cls) * 5;
           f < static_cast<std::size_t>(cls) * 5 + 4; ++f)
        X.values.at(t, f) += 2.0;
    }
  }
  return X;
}

const std::vector<std::string> kCaptions = {"a low tone", "a high tone",
                                            "a noise burst", "a rising chirp"};

TextVocab toy_vocab() { return TextVocab::build(kCaptions); }

}  // namespace

TEST_CASE("contrastive loss at init is close to ln(batch)") {
  Rng rng(1);
  nn::ParamStore ps;
  ContrastiveEmbedder emb(ps, tiny_embedder_cfg(), toy_vocab(), rng);
  std::vector<audio::MelSpectrogram> mels;
  std::vector<std::string> caps;
  for (int c = 0; c < 4; ++c) {
    mels.push_back(class_mel(c, rng));
    caps.push_back(kCaptions[static_cast<std::size_t>(c)]);
  }
  double l = emb.contrastive_loss(mels, caps).scalar();
  double expect = std::log(4.0);
  CAPTURE(l);
  CHECK(std::abs(l - expect) < 0.1 * expect);
}

TEST_CASE("contrastive loss rejects degenerate batches") {
  Rng rng(2);
  nn::ParamStore ps;
  ContrastiveEmbedder emb(ps, tiny_embedder_cfg(), toy_vocab(), rng);
  std::vector<audio::MelSpectrogram> mels = {class_mel(0, rng),
                                             class_mel(1, rng)};
  CHECK_THROWS_AS(emb.contrastive_loss(mels, {"a low tone", "a low tone"}),
                  DegenerateCorpusError);
  CHECK_THROWS_AS(
      emb.contrastive_loss({class_mel(0, rng)}, {"a low tone"}), InputError);
}

TEST_CASE("embeddings are unit-norm and deterministic") {
  Rng rng(3);
  nn::ParamStore ps;
  ContrastiveEmbedder emb(ps, tiny_embedder_cfg(), toy_vocab(), rng);
  auto X = class_mel(1, rng);
  auto a1 = emb.embed_audio(X, /*allow_untrained=*/true);
  auto a2 = emb.embed_audio(X, true);
  auto t1 = emb.embed_text("a high tone", true);
  CHECK(a1.length() == 1);
  CHECK(a1.dim() == 8);
  CHECK(t1.modality == Modality::kGlobalText);
  CHECK(a1.modality == Modality::kGlobalAudio);
  double na = 0.0, nt = 0.0;
  for (std::size_t i = 0; i < 8; ++i) {
    na += a1.features[i] * a1.features[i];
    nt += t1.features[i] * t1.features[i];
    CHECK(a1.features[i] == a2.features[i]);
  }
  CHECK(std::abs(std::sqrt(na) - 1.0) < 1e-6);
  CHECK(std::abs(std::sqrt(nt) - 1.0) < 1e-6);
}

TEST_CASE("embedder state gating and empty inputs") {
  Rng rng(4);
  nn::ParamStore ps;
  ContrastiveEmbedder emb(ps, tiny_embedder_cfg(), toy_vocab(), rng);
  auto X = class_mel(0, rng);
  CHECK_THROWS_AS(emb.embed_audio(X), StateError);
  CHECK_THROWS_AS(emb.embed_text("a low tone"), StateError);
  emb.set_trained(true);
  CHECK_NOTHROW(emb.embed_audio(X));
  CHECK_THROWS_AS(emb.embed_text("   "), InputError);
}

TEST_CASE("trained embedder: paired cosine beats mismatched on held-out items") {
  Rng rng(5);
  nn::ParamStore ps;
  ContrastiveEmbedder emb(ps, tiny_embedder_cfg(), toy_vocab(), rng);
  optim::AdamW opt(ps, {.lr = 3e-3});
  for (int step = 0; step < 200; ++step) {
    std::vector<audio::MelSpectrogram> mels;
    std::vector<std::string> caps;
    for (int c = 0; c < 4; ++c) {
      mels.push_back(class_mel(c, rng));
      caps.push_back(kCaptions[static_cast<std::size_t>(c)]);
    }
    ps.zero_grad();
    Var loss = emb.contrastive_loss(mels, caps);
    ag::backward(loss);
    opt.step();
  }
  emb.set_trained(true);

  Rng held(777);
  double paired = 0.0, mismatched = 0.0;
  int np = 0, nm = 0;
  for (int c = 0; c < 4; ++c) {
    auto a = emb.embed_audio(class_mel(c, held));
    for (int k = 0; k < 4; ++k) {
      auto t = emb.embed_text(kCaptions[static_cast<std::size_t>(k)]);
      double cos = 0.0;
      for (std::size_t i = 0; i < 8; ++i) cos += a.features[i] * t.features[i];
      if (k == c) {
        paired += cos;
        ++np;
      } else {
        mismatched += cos;
        ++nm;
      }
    }
  }
  double margin = paired / np - mismatched / nm;
  CAPTURE(margin);
  CHECK(margin > 0.0);
}

TEST_CASE("contrastive gradient matches finite differences") {
  Rng rng(6);
  nn::ParamStore ps;
  EmbedderConfig c = tiny_embedder_cfg();
  c.hidden = 8;
  ContrastiveEmbedder emb(ps, c, toy_vocab(), rng);
  std::vector<audio::MelSpectrogram> mels = {class_mel(0, rng),
                                             class_mel(2, rng)};
  std::vector<std::string> caps = {"a low tone", "a noise burst"};
  ps.zero_grad();
  ag::backward(emb.contrastive_loss(mels, caps));
  auto r = test::gradcheck(
      ps, [&] { return emb.contrastive_loss(mels, caps).scalar(); }, 1e-5, 6);
  CAPTURE(r.rel_error);
  CHECK(r.rel_error < 1e-4);
}

TEST_CASE("text sequence encoder is order-sensitive") {
  Rng rng(7);
  nn::ParamStore ps;
  TextEncoderConfig c;
  c.dim = 16;
  c.depth = 1;
  c.heads = 2;
  auto vocab =
      TextVocab::build({"dog barks then cat meows", "cat meows then dog barks"});
  TextSequenceEncoder enc(ps, c, vocab, rng);
  auto a = enc.encode("dog barks then cat meows");
  auto b = enc.encode("cat meows then dog barks");
  CHECK(a.length() == 5);
  CHECK(b.length() == 5);
  double d2 = 0.0;
  for (std::size_t i = 0; i < a.features.numel(); ++i) {
    double d = a.features[i] - b.features[i];
    d2 += d * d;
  }
  CHECK(d2 > 1e-8);
}

TEST_CASE("text sequence encoder: single token, truncation, empty input") {
  Rng rng(8);
  nn::ParamStore ps;
  TextEncoderConfig c;
  c.dim = 16;
  c.depth = 1;
  c.heads = 2;
  c.max_len = 4;
  auto vocab = TextVocab::build({"one two three four five six"});
  TextSequenceEncoder enc(ps, c, vocab, rng);
  CHECK(enc.encode("one").length() == 1);
  CHECK(enc.encode("one two three four five six").length() == 4);
  CHECK_THROWS_AS(enc.encode(""), InputError);
  CHECK_THROWS_AS(enc.encode("  \t "), InputError);
}

TEST_CASE("phoneme encoder appends exactly one stop token") {
  Rng rng(9);
  nn::ParamStore ps;
  PhonemeEncoderConfig c;
  c.dim = 16;
  c.depth = 1;
  c.heads = 2;
  std::vector<std::string> syms = {"a", "b", "k", "s", "t", "ih", "eh", "uw"};
  PhonemeEncoder enc(ps, c, syms, rng);
  std::vector<std::string> twelve(12, "a");
  for (std::size_t i = 0; i < 12; ++i) twelve[i] = syms[i % syms.size()];
  CHECK(enc.encode(twelve).length() == 13);
  CHECK(enc.encode({}).length() == 1);
  CHECK_THROWS_WITH_AS(enc.encode({"a", "zz"}), doctest::Contains("zz"),
                       VocabularyError);
}

TEST_CASE("assemble: lengths, boundaries, order, empty list") {
  Rng rng(10);
  nn::ParamStore ps;
  ConditionAssembler asm_(ps, 24,
                          {{Modality::kGlobalText, 8},
                           {Modality::kGlobalAudio, 8},
                           {Modality::kTextSequence, 16},
                           {Modality::kPhoneme, 12}},
                          rng);
  ConditionSegment g{rng.randn({1, 8}), Modality::kGlobalText, "g"};
  ConditionSegment t{rng.randn({7, 16}), Modality::kTextSequence, "t"};
  ConditionSegment p{rng.randn({14, 12}), Modality::kPhoneme, "p"};
  ConditionSegment t5{rng.randn({5, 16}), Modality::kTextSequence, "t5"};

  auto b = asm_.assemble({g, t});
  CHECK(b.length() == 8);
  CHECK(b.features.cols() == 24);

  CHECK(asm_.assemble({g}).length() == 1);

  auto b3 = asm_.assemble({g, t5, p});
  CHECK(b3.length() == 20);
  REQUIRE(b3.boundaries.size() == 3);
  CHECK(b3.boundaries[0].offset == 0);
  CHECK(b3.boundaries[0].length == 1);
  CHECK(b3.boundaries[1].offset == 1);
  CHECK(b3.boundaries[1].length == 5);
  CHECK(b3.boundaries[2].offset == 6);
  CHECK(b3.boundaries[2].length == 14);

  // permuting segments permutes boundary records identically
  auto b3r = asm_.assemble({p, g, t5});
  CHECK(b3r.boundaries[0].modality == Modality::kPhoneme);
  CHECK(b3r.boundaries[1].modality == Modality::kGlobalText);
  CHECK(b3r.boundaries[0].length == 14);
  CHECK(b3r.boundaries[1].offset == 14);

  CHECK_THROWS_AS(asm_.assemble({}), InputError);
}

TEST_CASE("projections are modality-specific even at equal input width") {
  Rng rng(11);
  nn::ParamStore ps;
  ConditionAssembler asm_(
      ps, 24, {{Modality::kGlobalText, 8}, {Modality::kGlobalAudio, 8}}, rng);
  CHECK(ps.has("cond.proj.global_text.w"));
  CHECK(ps.has("cond.proj.global_audio.w"));

  Tensor feat = rng.randn({1, 8});
  ConditionSegment as_text{feat, Modality::kGlobalText, ""};
  ConditionSegment as_audio{feat, Modality::kGlobalAudio, ""};
  auto bt = asm_.assemble({as_text});
  auto ba = asm_.assemble({as_audio});
  bool differ = false;
  for (std::size_t i = 0; i < bt.features.numel(); ++i)
    if (bt.features[i] != ba.features[i]) differ = true;
  CHECK(differ);
}
