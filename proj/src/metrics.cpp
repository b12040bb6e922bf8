#include "mflow/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "mflow/errors.hpp"

namespace mflow {

namespace {

void require_same(const Image& a, const Image& b, const char* what) {
  if (a.height != b.height || a.width != b.width || a.pixels.size() != b.pixels.size()) {
    throw ShapeError(std::string(what) + ": images differ in shape (" + std::to_string(a.height) +
                     "x" + std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                     std::to_string(b.width) + ")");
  }
}

unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

double psnr(const Image& a, const Image& b, double peak) {
  require_same(a, b, "psnr");
  double se = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = a.pixels[i] - b.pixels[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.pixels.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

double ssim(const Image& a, const Image& b, double peak) {
  require_same(a, b, "ssim");
  constexpr std::size_t kWin = 8;
  if (a.height < kWin || a.width < kWin) {
    throw ShapeError("ssim needs images of at least 8x8");
  }
  const double c1 = (0.01 * peak) * (0.01 * peak);
  const double c2 = (0.03 * peak) * (0.03 * peak);
  const double n = static_cast<double>(kWin * kWin);
  double total = 0.0;
  std::size_t windows = 0;
  for (std::size_t y0 = 0; y0 + kWin <= a.height; ++y0) {
    for (std::size_t x0 = 0; x0 + kWin <= a.width; ++x0) {
      double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
      for (std::size_t y = y0; y < y0 + kWin; ++y) {
        for (std::size_t x = x0; x < x0 + kWin; ++x) {
          const double pa = a.pixels[y * a.width + x], pb = b.pixels[y * b.width + x];
          sa += pa;
          sb += pb;
          saa += pa * pa;
          sbb += pb * pb;
          sab += pa * pb;
        }
      }
      const double ma = sa / n, mb = sb / n;
      const double va = saa / n - ma * ma, vb = sbb / n - mb * mb, cov = sab / n - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++windows;
    }
  }
  return total / static_cast<double>(windows);
}

double retrieval_topk(const Tensor& zA, const Tensor& zB, std::size_t k) {
  if (zA.dim() != 2 || zA.shape() != zB.shape()) {
    throw ShapeError("retrieval needs two [N,d] tensors, got " + shape_str(zA.shape()) + " and " +
                     shape_str(zB.shape()));
  }
  const std::size_t n = zA.extent(0), d = zA.extent(1);
  if (k == 0 || k > n) {
    throw ParameterError("k = " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
  auto a = zA.data();
  auto b = zB.data();
  std::size_t hits = 0;
  std::vector<double> score(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += a[i * d + c] * b[j * d + c];
      score[j] = s;
    }
    // Rank of the partner: candidates that beat it, with lower indices
    // winning ties.
    std::size_t better = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (score[j] > score[i] || (score[j] == score[i] && j < i)) ++better;
    }
    if (better < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

void write_pgm(const Image& img, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  os << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  for (double p : img.pixels) os.put(static_cast<char>(to_byte(p)));
  if (!os) throw IoError("write failed: " + path);
}

void write_ppm(const Image& r, const Image& g, const Image& b, const std::string& path) {
  require_same(r, g, "write_ppm");
  require_same(r, b, "write_ppm");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  os << "P6\n" << r.width << ' ' << r.height << "\n255\n";
  for (std::size_t i = 0; i < r.pixels.size(); ++i) {
    os.put(static_cast<char>(to_byte(r.pixels[i])));
    os.put(static_cast<char>(to_byte(g.pixels[i])));
    os.put(static_cast<char>(to_byte(b.pixels[i])));
  }
  if (!os) throw IoError("write failed: " + path);
}

Image read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (magic != "P5" || maxval != 255 || w == 0 || h == 0) {
    throw FormatError(path + ": not an 8-bit binary PGM");
  }
  is.get();
  Image img{h, w, std::vector<double>(w * h)};
  for (double& p : img.pixels) {
    const int c = is.get();
    if (c == EOF) throw FormatError(path + ": truncated PGM payload");
    p = static_cast<double>(c) / 255.0;
  }
  return img;
}

}  // namespace mflow
