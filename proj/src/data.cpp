#include "mflow/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <sstream>

#include "mflow/errors.hpp"
#include "mflow/rng.hpp"

namespace mflow {

namespace {

constexpr std::uint64_t kSceneStream = 0x5ce9e;

double clip01(double v) { return std::clamp(v, 0.0, 1.0); }

int quantize(double v, double lo, double hi, int levels) {
  const int q = static_cast<int>(std::floor((v - lo) / (hi - lo) * levels));
  return std::clamp(q, 0, levels - 1);
}

Image blank() { return Image{kImageSize, kImageSize, std::vector<double>(kImageSize * kImageSize)}; }

// Raw (unclipped) sum of blob profiles at pixel centers.
std::vector<double> blob_field(const Scene& scene) {
  std::vector<double> f(kImageSize * kImageSize, 0.0);
  for (std::size_t py = 0; py < kImageSize; ++py) {
    const double y = (static_cast<double>(py) + 0.5) / kImageSize;
    for (std::size_t px = 0; px < kImageSize; ++px) {
      const double x = (static_cast<double>(px) + 0.5) / kImageSize;
      double v = 0.0;
      for (const Blob& b : scene.blobs) {
        const double d2 = (x - b.x) * (x - b.x) + (y - b.y) * (y - b.y);
        v += b.intensity * std::exp(-d2 / (2.0 * b.radius * b.radius));
      }
      f[py * kImageSize + px] = v;
    }
  }
  return f;
}

ModalityKind kind_of(const std::string& modality) {
  return modality == "text" ? ModalityKind::kText : ModalityKind::kImage;
}

}  // namespace

Scene make_scene(std::uint64_t seed, std::uint64_t scene_id) {
  Rng rng(derive_key(seed, kSceneStream, scene_id));
  Scene s;
  s.seed = scene_id;
  const auto count = 1 + rng.below(3);
  for (std::uint64_t i = 0; i < count; ++i) {
    Blob b;
    b.x = rng.uniform();
    b.y = rng.uniform();
    b.radius = rng.uniform(0.05, 0.2);
    b.intensity = rng.uniform(0.3, 1.0);
    s.blobs.push_back(b);
  }
  std::sort(s.blobs.begin(), s.blobs.end(),
            [](const Blob& l, const Blob& r) { return l.y != r.y ? l.y < r.y : l.x < r.x; });
  return s;
}

Image render_xray(const Scene& scene) {
  Image img = blank();
  auto f = blob_field(scene);
  for (std::size_t i = 0; i < f.size(); ++i) img.pixels[i] = clip01(f[i]);
  return img;
}

Image render_ct_inverted(const Scene& scene) {
  Image img = render_xray(scene);
  for (double& p : img.pixels) p = 1.0 - p;
  return img;
}

Image render_ct(const Scene& scene) {
  const Image inv = render_ct_inverted(scene);
  Image out = blank();
  const int n = static_cast<int>(kImageSize);
  constexpr double kBoost = 1.5;
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      double blur = 0.0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int sy = std::clamp(y + dy, 0, n - 1), sx = std::clamp(x + dx, 0, n - 1);
          blur += inv.pixels[static_cast<std::size_t>(sy * n + sx)];
        }
      }
      blur /= 9.0;
      const double v = inv.pixels[static_cast<std::size_t>(y * n + x)];
      out.pixels[static_cast<std::size_t>(y * n + x)] = clip01(v + kBoost * (v - blur));
    }
  }
  return out;
}

Image render_mri(const Scene& scene) {
  Image img = render_xray(scene);
  for (std::size_t py = 0; py < kImageSize; ++py) {
    for (std::size_t px = 0; px < kImageSize; ++px) {
      const double texture = 0.04 * std::sin(std::numbers::pi * 0.75 * static_cast<double>(px)) *
                             std::cos(std::numbers::pi * 0.5 * static_cast<double>(py));
      double& p = img.pixels[py * kImageSize + px];
      p = clip01(std::sqrt(p) + texture);
    }
  }
  return img;
}

TokenSeq render_text(const Scene& scene) {
  TokenSeq seq;
  seq.ids.push_back(vocab::blobs(static_cast<int>(scene.blobs.size())));
  // Reading order (row, then column) so the caption is a function of the image.
  std::vector<std::array<int, 4>> items;
  for (const Blob& b : scene.blobs) {
    items.push_back({quantize(b.y, 0.0, 1.0, vocab::kGrid), quantize(b.x, 0.0, 1.0, vocab::kGrid),
                     quantize(b.radius, 0.05, 0.2, vocab::kLevels),
                     quantize(b.intensity, 0.3, 1.0, vocab::kLevels)});
  }
  std::sort(items.begin(), items.end());
  for (const auto& [qy, qx, r, i] : items) {
    seq.ids.push_back(vocab::at());
    seq.ids.push_back(vocab::position(qx, qy));
    seq.ids.push_back(vocab::radius(r));
    seq.ids.push_back(vocab::intensity(i));
  }
  return seq;
}

Sample render_modality(const Scene& scene, const std::string& modality) {
  if (modality == "text") return render_text(scene);
  if (modality == "xray") return render_xray(scene);
  if (modality == "ct") return render_ct(scene);
  if (modality == "mri") return render_mri(scene);
  throw ParameterError("no renderer for modality '" + modality + "'");
}

std::vector<std::uint64_t> train_scene_ids(std::size_t dataset_index, std::size_t count) {
  if (count >= kTrainStride) throw ParameterError("training set too large for its id range");
  std::vector<std::uint64_t> ids(count);
  for (std::size_t i = 0; i < count; ++i) ids[i] = dataset_index * kTrainStride + i;
  return ids;
}

std::vector<std::uint64_t> val_scene_ids(std::size_t count) {
  std::vector<std::uint64_t> ids(count);
  for (std::size_t i = 0; i < count; ++i) ids[i] = kValBase + i;
  return ids;
}

PairedDataset make_pairs(const std::string& a, const std::string& b, std::uint64_t seed,
                         const std::vector<std::uint64_t>& scene_ids) {
  PairedDataset ds{a, b, scene_ids, {}, {}};
  ds.xa.reserve(scene_ids.size());
  ds.xb.reserve(scene_ids.size());
  for (std::uint64_t id : scene_ids) {
    const Scene s = make_scene(seed, id);
    ds.xa.push_back(render_modality(s, a));
    ds.xb.push_back(render_modality(s, b));
  }
  return ds;
}

std::string format_sample(const Sample& x) {
  if (const auto* seq = std::get_if<TokenSeq>(&x)) return vocab::to_string(*seq);
  const Image& img = std::get<Image>(x);
  std::string out;
  char buf[64];
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%a", img.pixels[i]);
    if (i) out += ',';
    out += buf;
  }
  return out;
}

Sample parse_sample(const std::string& text, ModalityKind kind) {
  if (kind == ModalityKind::kText) return vocab::parse(text);
  Image img{kImageSize, kImageSize, {}};
  img.pixels.reserve(kImageSize * kImageSize);
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find(',', pos), text.size());
    const std::string field = text.substr(pos, end - pos);
    char* stop = nullptr;
    const double v = std::strtod(field.c_str(), &stop);
    if (field.empty() || stop != field.c_str() + field.size()) {
      throw FormatError("bad pixel value '" + field + "'");
    }
    img.pixels.push_back(v);
    pos = end + 1;
  }
  if (img.pixels.size() != kImageSize * kImageSize) {
    throw FormatError("image has " + std::to_string(img.pixels.size()) + " pixels, expected " +
                      std::to_string(kImageSize * kImageSize));
  }
  return img;
}

void write_pairs(const PairedDataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  os << "scene\t" << ds.a << '\t' << ds.b << '\n';
  for (std::size_t i = 0; i < ds.size(); ++i) {
    os << ds.scene_ids[i] << '\t' << format_sample(ds.xa[i]) << '\t' << format_sample(ds.xb[i])
       << '\n';
  }
  if (!os) throw IoError("write failed: " + path);
}

PairedDataset read_pairs(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path);
  std::string line;
  if (!std::getline(is, line)) throw FormatError(path + ": empty dataset file");
  PairedDataset ds;
  {
    std::istringstream hs(line);
    std::string scene;
    if (!std::getline(hs, scene, '\t') || scene != "scene" || !std::getline(hs, ds.a, '\t') ||
        !std::getline(hs, ds.b, '\t')) {
      throw FormatError(path + ": header must be 'scene<TAB>a<TAB>b'");
    }
  }
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected three fields");
    }
    ds.scene_ids.push_back(std::stoull(line.substr(0, t1)));
    ds.xa.push_back(parse_sample(line.substr(t1 + 1, t2 - t1 - 1), kind_of(ds.a)));
    ds.xb.push_back(parse_sample(line.substr(t2 + 1), kind_of(ds.b)));
  }
  return ds;
}

}  // namespace mflow
