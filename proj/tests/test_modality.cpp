#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <vector>

#include "mflow/data.hpp"
#include "mflow/errors.hpp"
#include "mflow/modality.hpp"
#include "mflow/objectives.hpp"
#include "mflow/optim.hpp"
#include "test_util.hpp"

namespace mflow {
namespace {

using test::normal_tensor;

std::vector<Sample> scenes(const std::string& modality, std::size_t n, std::uint64_t seed = 3) {
  std::vector<Sample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(render_modality(make_scene(seed, i), modality));
  return out;
}

TEST(Registry, DefaultShapes) {
  const ModalityRegistry reg = default_registry();
  ASSERT_EQ(reg.specs().size(), 4u);
  EXPECT_EQ(reg.get("text").latent, (LatentShape{64, 1, 1}));
  for (const char* m : {"xray", "ct", "mri"}) {
    EXPECT_EQ(reg.get(m).latent, (LatentShape{4, 8, 8}));
    EXPECT_EQ(reg.get(m).context_len, 4u);
  }
  EXPECT_EQ(reg.embed_dim(), 64u);
}

TEST(Registry, RejectsDuplicatesAndMismatchedWidth) {
  ModalityRegistry reg = default_registry();
  ModalitySpec dup = reg.get("ct");
  EXPECT_THROW(reg.add(dup), ParameterError);
  ModalitySpec odd = dup;
  odd.name = "pet";
  odd.embed_dim = 32;
  EXPECT_THROW(reg.add(odd), ParameterError);
  EXPECT_THROW(reg.get("pet"), ParameterError);
}

TEST(Vocab, RoundTripAndErrors) {
  const TokenSeq seq = std::get<TokenSeq>(render_modality(make_scene(1, 9), "text"));
  EXPECT_EQ(vocab::parse(vocab::to_string(seq)), seq);
  EXPECT_THROW(vocab::id("blobs=9"), FormatError);
  EXPECT_EQ(vocab::token(vocab::kPad), "<pad>");
}

TEST(Vocab, DescriptorsAreDistinct) {
  std::set<std::array<double, 4>> seen;
  for (std::size_t i = 0; i < vocab::size(); ++i) seen.insert(vocab::descriptor(static_cast<int>(i)));
  EXPECT_EQ(seen.size(), vocab::size());
}

TEST(Autoencoder, SpaceToDepthRoundTripIsBitExact) {
  SpaceToDepthAutoencoder ae(16);
  for (const Sample& s : scenes("mri", 8)) {
    Tensor z = ae.encode(s);
    EXPECT_EQ(z.shape(), (Shape{4, 8, 8}));
    EXPECT_EQ(std::get<Image>(ae.decode(z)), std::get<Image>(s));
  }
}

TEST(Autoencoder, CodebookRoundTripRecoversTokens) {
  TokenCodebookAutoencoder ae(64);
  for (const Sample& s : scenes("text", 16)) {
    EXPECT_EQ(std::get<TokenSeq>(ae.decode(ae.encode(s))), std::get<TokenSeq>(s));
  }
  EXPECT_THROW(TokenCodebookAutoencoder(32), ParameterError);
}

TEST(Autoencoder, StandardizedLatentsInvert) {
  const ModelConfig cfg;
  const ModalityRegistry reg = default_registry(cfg);
  for (const ModalitySpec& spec : reg.specs()) {
    const ModalityCodecs c = make_codecs(spec, cfg, 5);
    const auto xs = scenes(spec.name, 4);
    const auto back = decode_latents(c, encode_latents(c, xs));
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (const auto* img = std::get_if<Image>(&xs[i])) {
        const Image& got = std::get<Image>(back[i]);
        for (std::size_t p = 0; p < img->pixels.size(); ++p) {
          EXPECT_NEAR(got.pixels[p], img->pixels[p], 1e-14);
        }
      } else {
        EXPECT_EQ(std::get<TokenSeq>(back[i]), std::get<TokenSeq>(xs[i]));
      }
    }
  }
}

TEST(PromptEncoder, UnitNormAndDeterministic) {
  const ModelConfig cfg;
  const ModalityRegistry reg = default_registry(cfg);
  for (const ModalitySpec& spec : reg.specs()) {
    Rng rng(12);
    auto enc = make_prompt_encoder(spec, cfg, rng);
    const auto xs = scenes(spec.name, 6);
    for (const Sample& x : xs) {
      Tensor a = encode_prompt(*enc, x);
      Tensor b = encode_prompt(*enc, x);
      double norm = 0;
      for (double v : a.data()) norm += v * v;
      EXPECT_NEAR(std::sqrt(norm), 1.0, 1e-6) << spec.name;
      for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
    }
  }
}

TEST(PromptEncoder, GradientMatchesFiniteDifferences) {
  const ModelConfig cfg;
  for (const char* m : {"xray", "text"}) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      Rng rng(seed);
      auto enc = make_prompt_encoder(default_registry(cfg).get(m), cfg, rng);
      const auto xs = scenes(m, 3, seed);
      Tensor w = normal_tensor({3, 64}, rng);
      for (const ParamEntry& e : enc->params().entries()) {
        const double err = grad_check(
            [&](const Tensor&) { return sum(mul(enc->encode(xs), w)); }, e.tensor, 1e-5, 8, seed);
        EXPECT_LT(err, 1e-3) << m << " " << e.name;
      }
    }
  }
}

TEST(Pooling, StridedMeanPoolGroups) {
  Tensor t = Tensor::from({1, 4, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor p = strided_mean_pool(t, 2);
  ASSERT_EQ(p.shape(), (Shape{1, 2, 2}));
  EXPECT_DOUBLE_EQ(p[0], 2);
  EXPECT_DOUBLE_EQ(p[1], 3);
  EXPECT_DOUBLE_EQ(p[2], 6);
  EXPECT_DOUBLE_EQ(p[3], 7);
  EXPECT_THROW(strided_mean_pool(t, 5), ParameterError);
}

TEST(Adaptation, ShapeContract) {
  const ModelConfig cfg;
  const ModalityRegistry reg = default_registry(cfg);
  const ModalityCodecs ct = make_codecs(reg.get("ct"), cfg, 1);
  Rng rng(2);
  Tensor zb = normal_tensor({1, 16, 64}, rng);
  GuidedAdaptation f = build_adaptation(zb, reg.get("xray"), ct.embedding);
  EXPECT_EQ(f.tokens.shape(), (Shape{1, 4, 64}));
}

TEST(Adaptation, ConstantSourceGivesIdenticalRows) {
  const ModelConfig cfg;
  const ModalityRegistry reg = default_registry(cfg);
  const ModalityCodecs ct = make_codecs(reg.get("ct"), cfg, 1);
  GuidedAdaptation f = build_adaptation(Tensor::full({2, 16, 64}, 0.37), reg.get("mri"), ct.embedding);
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t r = 1; r < 4; ++r) {
      for (std::size_t j = 0; j < 64; ++j) {
        EXPECT_EQ(f.tokens[(n * 4 + r) * 64 + j], f.tokens[n * 4 * 64 + j]);
      }
    }
  }
}

TEST(Adaptation, TrainableCopyNeverAliasesSource) {
  const ModelConfig cfg;
  const ModalityRegistry reg = default_registry(cfg);
  const ModalityCodecs ct = make_codecs(reg.get("ct"), cfg, 1);
  Rng rng(3);
  Tensor zb = normal_tensor({2, 16, 64}, rng);
  const std::vector<double> before(zb.data().begin(), zb.data().end());
  GuidedAdaptation f = build_adaptation(zb, reg.get("xray"), ct.embedding).as_trainable();
  for (double& v : f.tokens.mutable_data()) v += 1.0;
  EXPECT_TRUE(std::equal(before.begin(), before.end(), zb.data().begin()));
}

TEST(Adaptation, OneCrossGuidedStepMovesTokensOnly) {
  const ModelConfig cfg;
  const ModalityRegistry reg = default_registry(cfg);
  const ModalityCodecs ct = make_codecs(reg.get("ct"), cfg, 1);
  DiffuserModel mri(reg.get("mri"), cfg, 1);
  Rng rng(4);
  test::perturb(mri.params(), rng, 0.05);
  test::perturb(ct.context->params(), rng, 0.05);
  Tensor zb = normal_tensor({2, 16, 64}, rng);
  const std::vector<double> zb_before(zb.data().begin(), zb.data().end());
  GuidedAdaptation f = build_adaptation(zb, reg.get("mri"), ct.embedding).as_trainable();
  const std::vector<double> f_before(f.tokens.data().begin(), f.tokens.data().end());
  AdamState opt;
  opt.add("f", f.tokens, {1e-3, 0.0});
  NoiseSchedule sched(1000, 0.00085, 0.012);
  Tensor z0 = normal_tensor({2, 4, 8, 8}, rng);
  Tensor eps = normal_tensor({2, 4, 8, 8}, rng);
  Tensor ztb = normal_tensor({2, 4, 8, 8}, rng);
  Tensor loss = cross_guided_loss(mri, z0, {100, 600}, eps, sched, ztb, f, *ct.context);
  backward(loss);
  adam_step(opt);
  EXPECT_FALSE(std::equal(f_before.begin(), f_before.end(), f.tokens.data().begin()));
  EXPECT_TRUE(std::equal(zb_before.begin(), zb_before.end(), zb.data().begin()));
}

ModalitySpec tiny_source() {
  ModalitySpec s;
  s.name = "tiny";
  s.latent = {4, 2, 2};
  s.context_len = 4;
  s.embed_dim = 64;
  return s;
}

TEST(ContextEncoder, ConcatenatesLatentAndAdaptationTokens) {
  Rng rng(5);
  ContextEncoder v(tiny_source(), 4, "context.tiny", rng);
  GuidedAdaptation f{normal_tensor({3, 4, 64}, rng)};
  Tensor out = encode_context(v, normal_tensor({3, 4, 2, 2}, rng), f);
  EXPECT_EQ(out.shape(), (Shape{3, 8, 64}));
}

TEST(ContextEncoder, ZeroResidualBranchIsIdentity) {
  Rng rng(6);
  const ModalitySpec src = tiny_source();
  ContextEncoder v(src, 4, "context.tiny", rng);
  GuidedAdaptation f{normal_tensor({2, 4, 64}, rng)};
  Tensor z = normal_tensor({2, 4, 2, 2}, rng);
  Tensor out = v(z, f);
  const ParamStore& p = v.params();
  Linear in_proj;
  in_proj.weight = p.find("context.tiny.in.w")->tensor;
  in_proj.bias = p.find("context.tiny.in.b")->tensor;
  in_proj.in = 4;
  in_proj.out = 64;
  Tensor lat = add(in_proj(latent_tokens(z, src)), grid_positions(2, 2, 64));
  Tensor want = concat({lat, f.tokens}, 1);
  ASSERT_EQ(out.shape(), want.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_EQ(out[i], want[i]);
}

TEST(ContextEncoder, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    ContextEncoder v(tiny_source(), 4, "context.tiny", rng);
    test::perturb(v.params(), rng, 0.1);
    Tensor f = normal_tensor({2, 4, 64}, rng);
    Tensor z = normal_tensor({2, 4, 2, 2}, rng);
    Tensor w = normal_tensor({2, 8, 64}, rng);
    auto loss_f = [&](const Tensor& x) { return sum(mul(v(z, GuidedAdaptation{x}), w)); };
    auto loss_z = [&](const Tensor& x) { return sum(mul(v(x, GuidedAdaptation{f}), w)); };
    EXPECT_LT(grad_check(loss_f, f, 1e-5, 32, seed), 1e-3);
    EXPECT_LT(grad_check(loss_z, z, 1e-5, 16, seed), 1e-3);
    for (const ParamEntry& e : v.params().entries()) {
      EXPECT_LT(grad_check([&](const Tensor&) { return loss_f(f); }, e.tensor, 1e-5, 8, seed), 1e-3)
          << e.name;
    }
  }
}

TEST(LatentTokens, OneTokenPerCell) {
  const ModalityRegistry reg = default_registry();
  Rng rng(7);
  Tensor z = normal_tensor({2, 4, 8, 8}, rng);
  Tensor t = latent_tokens(z, reg.get("xray"));
  ASSERT_EQ(t.shape(), (Shape{2, 64, 4}));
  // Token (n, y*8+x) holds channel c of cell (y, x).
  EXPECT_EQ(t[((1 * 64) + 3 * 8 + 5) * 4 + 2], z[((1 * 4 + 2) * 8 + 3) * 8 + 5]);
  EXPECT_EQ(latent_tokens(Tensor::zeros({3, 64, 1, 1}), reg.get("text")).shape(), (Shape{3, 1, 64}));
  EXPECT_THROW(latent_tokens(z, reg.get("text")), ShapeError);
}

TEST(GridPositions, ShapesAndDistinctRows) {
  Tensor flat = grid_positions(1, 1, 32);
  for (double v : flat.data()) EXPECT_EQ(v, 0.0);
  Tensor g = grid_positions(8, 8, 32);
  ASSERT_EQ(g.shape(), (Shape{64, 32}));
  for (std::size_t a = 0; a < 64; ++a) {
    for (std::size_t b = a + 1; b < 64; ++b) {
      double d = 0;
      for (std::size_t j = 0; j < 32; ++j) d += std::abs(g[a * 32 + j] - g[b * 32 + j]);
      EXPECT_GT(d, 1e-6);
    }
  }
  EXPECT_THROW(grid_positions(8, 8, 30), ParameterError);
}

}  // namespace
}  // namespace mflow
