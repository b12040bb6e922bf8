#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "mflow/checkpoint.hpp"
#include "mflow/config.hpp"
#include "mflow/data.hpp"
#include "mflow/errors.hpp"
#include "mflow/metrics.hpp"
#include "mflow/rng.hpp"
#include "mflow/system.hpp"
#include "oracles.hpp"

namespace mflow {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("mflow_test_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Image random_image(Rng& rng, std::size_t h = 16, std::size_t w = 16) {
  Image img{h, w, std::vector<double>(h * w)};
  for (double& p : img.pixels) p = rng.uniform();
  return img;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Bitwise reflected CRC-32 (polynomial 0xEDB88320).
std::uint32_t reference_crc32(const std::uint8_t* data, std::size_t n) {
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) {
    crc ^= data[i];
    for (int b = 0; b < 8; ++b) crc = (crc >> 1) ^ (0xEDB88320u & (0u - (crc & 1u)));
  }
  return ~crc;
}

// ---------------------------------------------------------------------------
// scenes and renders

TEST(Scene, PureFunctionOfSeedAndId) {
  EXPECT_EQ(make_scene(3, 17).blobs, make_scene(3, 17).blobs);
  EXPECT_NE(make_scene(3, 17).blobs, make_scene(3, 18).blobs);
  EXPECT_NE(make_scene(3, 17).blobs, make_scene(4, 17).blobs);
}

TEST(Scene, BlobsStayInDeclaredRanges) {
  for (std::uint64_t id = 0; id < 500; ++id) {
    const Scene s = make_scene(11, id);
    ASSERT_GE(s.blobs.size(), 1u);
    ASSERT_LE(s.blobs.size(), 3u);
    for (const Blob& b : s.blobs) {
      EXPECT_GE(b.x, 0.0);
      EXPECT_LE(b.x, 1.0);
      EXPECT_GE(b.y, 0.0);
      EXPECT_LE(b.y, 1.0);
      EXPECT_GE(b.radius, 0.05);
      EXPECT_LE(b.radius, 0.2);
      EXPECT_GE(b.intensity, 0.3);
      EXPECT_LE(b.intensity, 1.0);
    }
  }
}

TEST(Render, SameSceneTwiceIsIdentical) {
  const Scene s = make_scene(5, 2);
  for (const char* m : {"text", "xray", "ct", "mri"}) {
    EXPECT_EQ(render_modality(s, m), render_modality(s, m)) << m;
  }
}

TEST(Render, ImagesAreSixteenSquareInUnitRange) {
  for (std::uint64_t id = 0; id < 50; ++id) {
    const Scene s = make_scene(1, id);
    for (const char* m : {"xray", "ct", "mri"}) {
      const Image img = std::get<Image>(render_modality(s, m));
      ASSERT_EQ(img.height, 16u);
      ASSERT_EQ(img.width, 16u);
      ASSERT_EQ(img.pixels.size(), 256u);
      for (double p : img.pixels) {
        ASSERT_GE(p, 0.0);
        ASSERT_LE(p, 1.0);
      }
    }
    EXPECT_LE(std::get<TokenSeq>(render_modality(s, "text")).ids.size(), vocab::kMaxTokens);
  }
}

TEST(Render, CtBeforeSharpeningIsOneMinusXray) {
  for (std::uint64_t id = 0; id < 20; ++id) {
    const Scene s = make_scene(9, id);
    const Image x = render_xray(s);
    const Image c = render_ct_inverted(s);
    for (std::size_t i = 0; i < x.pixels.size(); ++i) EXPECT_EQ(c.pixels[i], 1.0 - x.pixels[i]);
  }
}

TEST(Render, OneBlobCaptionStartsWithBlobsOne) {
  std::size_t seen = 0;
  for (std::uint64_t id = 0; id < 200 && seen < 5; ++id) {
    const Scene s = make_scene(2, id);
    if (s.blobs.size() != 1) continue;
    ++seen;
    const TokenSeq t = render_text(s);
    ASSERT_FALSE(t.ids.empty());
    EXPECT_EQ(vocab::token(t.ids.front()), "blobs=1");
    EXPECT_EQ(vocab::to_string(t).rfind("blobs=1 at (", 0), 0u);
  }
  EXPECT_EQ(seen, 5u);
}

TEST(Render, UnknownModalityIsParameterError) {
  EXPECT_THROW(render_modality(make_scene(1, 1), "pet"), ParameterError);
}

// ---------------------------------------------------------------------------
// paired datasets

TEST(Pairs, TrainAndValidationIdsNeverOverlap) {
  std::set<std::uint64_t> train;
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::uint64_t id : train_scene_ids(k, 512)) EXPECT_TRUE(train.insert(id).second);
  }
  for (std::uint64_t id : val_scene_ids(64)) EXPECT_EQ(train.count(id), 0u);
}

TEST(Pairs, BothSidesRenderTheSameScene) {
  const PairedDataset ds = make_pairs("text", "xray", 4, train_scene_ids(0, 8));
  ASSERT_EQ(ds.size(), 8u);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Scene s = make_scene(4, ds.scene_ids[i]);
    EXPECT_EQ(ds.xa[i], render_modality(s, "text"));
    EXPECT_EQ(ds.xb[i], render_modality(s, "xray"));
  }
}

TEST(Pairs, FileRoundTripIsExactAndRegenerationBitIdentical) {
  const fs::path dir = scratch("pairs");
  const PairedDataset ds = make_pairs("ct", "mri", 6, train_scene_ids(2, 10));
  write_pairs(ds, (dir / "a.tsv").string());
  write_pairs(make_pairs("ct", "mri", 6, train_scene_ids(2, 10)), (dir / "b.tsv").string());
  EXPECT_EQ(slurp(dir / "a.tsv"), slurp(dir / "b.tsv"));
  EXPECT_EQ(slurp(dir / "a.tsv").rfind("scene\tct\tmri\n", 0), 0u);

  const PairedDataset back = read_pairs((dir / "a.tsv").string());
  EXPECT_EQ(back.a, "ct");
  EXPECT_EQ(back.b, "mri");
  EXPECT_EQ(back.scene_ids, ds.scene_ids);
  EXPECT_EQ(back.xa, ds.xa);
  EXPECT_EQ(back.xb, ds.xb);
}

TEST(Pairs, TextSamplesRoundTrip) {
  const Sample t = render_modality(make_scene(8, 3), "text");
  EXPECT_EQ(parse_sample(format_sample(t), ModalityKind::kText), t);
  EXPECT_THROW(vocab::id("banana"), FormatError);
}

// ---------------------------------------------------------------------------
// metrics

TEST(Psnr, IdenticalImagesHitTheCap) {
  Rng rng(1);
  const Image a = random_image(rng);
  EXPECT_EQ(psnr(a, a), 99.0);
}

TEST(Psnr, ConstantDifferenceOfATenthIsTwentyDb) {
  Image a{16, 16, std::vector<double>(256, 0.3)};
  Image b{16, 16, std::vector<double>(256, 0.4)};
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-9);
}

TEST(Psnr, SymmetricAndShapeChecked) {
  Rng rng(2);
  const Image a = random_image(rng), b = random_image(rng);
  EXPECT_EQ(psnr(a, b), psnr(b, a));
  EXPECT_THROW(psnr(a, random_image(rng, 16, 8)), ShapeError);
}

TEST(Ssim, IdenticalImagesGiveOne) {
  Rng rng(3);
  const Image a = random_image(rng);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
}

TEST(Ssim, InvertedCheckerboardIsNotPositive) {
  Image a{16, 16, std::vector<double>(256)};
  for (std::size_t y = 0; y < 16; ++y) {
    for (std::size_t x = 0; x < 16; ++x) a.pixels[y * 16 + x] = (x + y) % 2 == 0 ? 1.0 : 0.0;
  }
  Image b = a;
  for (double& p : b.pixels) p = 1.0 - p;
  const double s = ssim(a, b);
  EXPECT_LE(s, 0.0);
  EXPECT_NEAR(s, oracle::ssim(a.pixels, b.pixels, 16, 16), 1e-9);
}

TEST(Ssim, SymmetricAndNeedsAFullWindow) {
  Rng rng(4);
  const Image a = random_image(rng), b = random_image(rng);
  EXPECT_EQ(ssim(a, b), ssim(b, a));
  EXPECT_THROW(ssim(random_image(rng, 7, 16), random_image(rng, 7, 16)), ShapeError);
  EXPECT_THROW(ssim(a, random_image(rng, 16, 8)), ShapeError);
}

TEST(Metrics, MatchStraightforwardOracleOnTwentyPairs) {
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    const std::size_t h = 8 + rng.below(12), w = 8 + rng.below(12);
    const Image a = random_image(rng, h, w);
    Image b = a;
    const double noise = rng.uniform(0.01, 0.5);
    for (double& p : b.pixels) p = std::clamp(p + noise * rng.normal(), 0.0, 1.0);
    EXPECT_NEAR(psnr(a, b), oracle::psnr(a.pixels, b.pixels), 1e-9);
    EXPECT_NEAR(ssim(a, b), oracle::ssim(a.pixels, b.pixels, h, w), 1e-9);
  }
}

Tensor one_hot_rows(std::size_t n, const std::vector<std::size_t>& hot) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + hot[i]] = 1.0;
  return Tensor::from({n, n}, std::move(v));
}

TEST(Retrieval, OneHotIdentityIsPerfect) {
  std::vector<std::size_t> id(8);
  for (std::size_t i = 0; i < 8; ++i) id[i] = i;
  const Tensor z = one_hot_rows(8, id);
  EXPECT_EQ(retrieval_topk(z, z, 1), 1.0);
}

TEST(Retrieval, DerangementScoresZero) {
  std::vector<std::size_t> id(8), shifted(8);
  for (std::size_t i = 0; i < 8; ++i) {
    id[i] = i;
    shifted[i] = (i + 1) % 8;
  }
  EXPECT_EQ(retrieval_topk(one_hot_rows(8, id), one_hot_rows(8, shifted), 1), 0.0);
}

TEST(Retrieval, TiesRankTheLowerIndexFirst) {
  const Tensor za = Tensor::from({2, 2}, {1, 0, 1, 0});
  const Tensor zb = Tensor::from({2, 2}, {1, 0, 1, 0});
  EXPECT_EQ(retrieval_topk(za, zb, 1), 0.5);
  EXPECT_EQ(retrieval_topk(za, zb, 2), 1.0);
}

TEST(Retrieval, KBeyondRowsIsRejected) {
  const Tensor z = Tensor::from({2, 2}, {1, 0, 0, 1});
  EXPECT_THROW(retrieval_topk(z, z, 3), ParameterError);
  EXPECT_THROW(retrieval_topk(z, z, 0), ParameterError);
}

TEST(Retrieval, RandomUnitVectorsSitInTheBinomialChanceBand) {
  constexpr std::size_t n = 32, d = 64, trials = 100;
  Rng rng(6);
  auto unit_rows = [&] {
    std::vector<double> v = rng.normals(n * d);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < d; ++j) s += v[i * d + j] * v[i * d + j];
      for (std::size_t j = 0; j < d; ++j) v[i * d + j] /= std::sqrt(s);
    }
    return Tensor::from({n, d}, std::move(v));
  };
  double mean = 0;
  for (std::size_t t = 0; t < trials; ++t) mean += retrieval_topk(unit_rows(), unit_rows(), 1);
  mean /= trials;
  const double p = 1.0 / n;
  const double half = 1.96 * std::sqrt(p * (1 - p) / (n * trials));
  EXPECT_GE(mean, p - half);
  EXPECT_LE(mean, p + half);
}

// ---------------------------------------------------------------------------
// PGM / PPM

TEST(Netpbm, PgmHeaderAndQuantisedRoundTrip) {
  const fs::path dir = scratch("pgm");
  Rng rng(7);
  const Image a = random_image(rng, 16, 12);
  write_pgm(a, (dir / "a.pgm").string());
  const std::string raw = slurp(dir / "a.pgm");
  const std::string header = "P5\n12 16\n255\n";
  ASSERT_EQ(raw.substr(0, header.size()), header);
  EXPECT_EQ(raw.size(), header.size() + 16 * 12);
  const Image back = read_pgm((dir / "a.pgm").string());
  ASSERT_EQ(back.height, 16u);
  ASSERT_EQ(back.width, 12u);
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    EXPECT_NEAR(back.pixels[i], a.pixels[i], 0.5 / 255 + 1e-12);
  }
}

TEST(Netpbm, PpmInterleavesThreePlanes) {
  const fs::path dir = scratch("ppm");
  Image r{16, 16, std::vector<double>(256, 1.0)};
  Image g{16, 16, std::vector<double>(256, 0.0)};
  Image b{16, 16, std::vector<double>(256, 0.5)};
  write_ppm(r, g, b, (dir / "c.ppm").string());
  const std::string raw = slurp(dir / "c.ppm");
  const std::string header = "P6\n16 16\n255\n";
  ASSERT_EQ(raw.substr(0, header.size()), header);
  ASSERT_EQ(raw.size(), header.size() + 3 * 256);
  EXPECT_EQ(static_cast<unsigned char>(raw[header.size()]), 255);
  EXPECT_EQ(static_cast<unsigned char>(raw[header.size() + 1]), 0);
  EXPECT_EQ(static_cast<unsigned char>(raw[header.size() + 2]), 128);
  EXPECT_THROW(write_ppm(r, g, Image{8, 8, std::vector<double>(64)}, (dir / "d.ppm").string()),
               ShapeError);
}

TEST(Netpbm, ReadingGarbageIsFormatError) {
  const fs::path dir = scratch("bad_pgm");
  std::ofstream(dir / "x.pgm") << "P2\n1 1\n255\n0\n";
  EXPECT_THROW(read_pgm((dir / "x.pgm").string()), FormatError);
  EXPECT_THROW(read_pgm((dir / "missing.pgm").string()), IoError);
}

// ---------------------------------------------------------------------------
// checkpoints

class CheckpointTest : public ::testing::Test {
 protected:
  CheckpointTest() : sys_(Settings{}) {
    Rng rng(8);
    for (const ParamRef& p : sys_.parameters()) {
      Tensor t = p.tensor;
      for (double& v : t.mutable_data()) v += 0.1 * rng.normal();
    }
  }
  System sys_;
};

TEST_F(CheckpointTest, SaveLoadRestoresEveryParameterAsFloat32) {
  const fs::path dir = scratch("ckpt");
  save_checkpoint(sys_, (dir / "a.mm2g").string());
  System other{Settings{}};
  load_checkpoint(other, (dir / "a.mm2g").string());
  const auto mine = sys_.parameters(), theirs = other.parameters();
  ASSERT_EQ(mine.size(), theirs.size());
  for (std::size_t i = 0; i < mine.size(); ++i) {
    ASSERT_EQ(mine[i].name, theirs[i].name);
    const auto a = mine[i].tensor.data(), b = theirs[i].tensor.data();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t j = 0; j < a.size(); ++j) {
      ASSERT_EQ(b[j], static_cast<double>(static_cast<float>(a[j]))) << mine[i].name;
    }
  }
  save_checkpoint(other, (dir / "b.mm2g").string());
  EXPECT_EQ(slurp(dir / "a.mm2g"), slurp(dir / "b.mm2g"));
}

TEST_F(CheckpointTest, EncodeDecodeEncodeIsByteExact) {
  const auto bytes = encode_checkpoint(snapshot(sys_));
  EXPECT_EQ(encode_checkpoint(decode_checkpoint(bytes)), bytes);
}

TEST_F(CheckpointTest, LayoutHasMagicVersionAndTrailingCrc) {
  const auto bytes = encode_checkpoint(snapshot(sys_));
  ASSERT_GT(bytes.size(), 12u);
  EXPECT_EQ(std::memcmp(bytes.data(), "MM2G", 4), 0);
  const std::uint32_t version = bytes[4] | bytes[5] << 8 | bytes[6] << 16 | bytes[7] << 24;
  EXPECT_EQ(version, kCheckpointVersion);
  const std::size_t n = bytes.size();
  const std::uint32_t stored = static_cast<std::uint32_t>(bytes[n - 4]) | bytes[n - 3] << 8 |
                               bytes[n - 2] << 16 | static_cast<std::uint32_t>(bytes[n - 1]) << 24;
  EXPECT_EQ(stored, reference_crc32(bytes.data(), n - 4));
}

TEST_F(CheckpointTest, FlippedPayloadByteIsIntegrityError) {
  auto bytes = encode_checkpoint(snapshot(sys_));
  bytes[bytes.size() - 100] ^= 0x01;
  EXPECT_THROW(decode_checkpoint(bytes), IntegrityError);
}

TEST_F(CheckpointTest, WrongMagicVersionOrTruncationIsFormatError) {
  const auto good = encode_checkpoint(snapshot(sys_));
  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad_magic), FormatError);
  auto bad_version = good;
  bad_version[4] = 9;
  EXPECT_THROW(decode_checkpoint(bad_version), FormatError);
  const std::vector<std::uint8_t> truncated(good.begin(), good.begin() + good.size() / 2);
  EXPECT_THROW(decode_checkpoint(truncated), Error);
  EXPECT_THROW(decode_checkpoint(std::vector<std::uint8_t>{'M', 'M'}), FormatError);
}

TEST_F(CheckpointTest, MismatchedModelIsRejected) {
  Settings small;
  small.model.channels = 16;
  System other(small);
  EXPECT_THROW(restore(other, snapshot(sys_)), FormatError);
}

// ---------------------------------------------------------------------------
// configuration

TEST(ConfigFile, ParsesCommentsAndWhitespace) {
  const Config c = Config::parse("# header\n  seed = 42  # trailing\n\nflows.steps=3\n");
  EXPECT_EQ(c.u64("seed"), 42u);
  EXPECT_EQ(c.count("flows.steps"), 3u);
  EXPECT_EQ(c.get("schedule.spacing"), "linear");
}

TEST(ConfigFile, UnknownKeysAndMalformedLinesAreUsageErrors) {
  EXPECT_THROW(Config::parse("no_equals_here\n"), UsageError);
  EXPECT_THROW(Config::parse("flows.stepz = 3\n"), UsageError);
  Config c;
  EXPECT_THROW(c.set("bogus", "1"), UsageError);
  EXPECT_NO_THROW(c.set("data.ct-xray", "x.tsv"));
  EXPECT_EQ(c.dataset_path("xray", "ct"), "x.tsv");
  EXPECT_EQ(c.dataset_path("mri", "xray"), "");
}

TEST(ConfigFile, DumpParsesBackToTheSameValues) {
  Config c;
  c.set("seed", "99");
  c.set("flows.rounds", "ct-mri");
  EXPECT_EQ(Config::parse(c.dump()).values(), c.values());
}

TEST(ConfigFile, ShippedDefaultsMatchBuiltIns) {
  const fs::path path = fs::path(MFLOW_SOURCE_DIR) / "configs" / "default.cfg";
  const Config shipped = Config::load(path.string());
  const Config builtin;
  for (const auto& [key, value] : builtin.values()) EXPECT_EQ(shipped.get(key), value) << key;
  EXPECT_EQ(shipped.dataset_path("xray", "text"), "run/text-xray.tsv");
  EXPECT_THROW(Config::load("/nonexistent/x.cfg"), IoError);
}

TEST(ConfigFile, SettingsFollowTheValues) {
  Config c;
  c.set("seed", "5");
  c.set("flows.rounds", "text-xray,ct-mri");
  c.set("schedule.spacing", "scaled_linear");
  const Settings s = Settings::from(c);
  EXPECT_EQ(s.seed, 5u);
  ASSERT_EQ(s.flow_pairs.size(), 2u);
  EXPECT_EQ(s.flow_pairs[1], std::make_pair(std::string("ct"), std::string("mri")));
  EXPECT_EQ(s.spacing, BetaSpacing::kScaledLinear);
}

}  // namespace
}  // namespace mflow
