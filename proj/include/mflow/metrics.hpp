#pragma once

#include <cstddef>
#include <string>

#include "mflow/modality.hpp"
#include "mflow/tensor.hpp"

namespace mflow {

constexpr double kPsnrCap = 99.0;

// 10 log10(peak^2 / MSE), capped at 99 dB.
double psnr(const Image& a, const Image& b, double peak = 1.0);

// Single-scale SSIM: 8x8 windows at stride 1, uniform weights,
// C1 = (0.01 peak)^2, C2 = (0.03 peak)^2, averaged over windows.
double ssim(const Image& a, const Image& b, double peak = 1.0);

// Fraction of rows i whose partner zB[i] is among the k highest dot
// products with zA[i]; ties rank the lower index first.
double retrieval_topk(const Tensor& zA, const Tensor& zB, std::size_t k);

// Binary PGM (P5, maxval 255) of a [0, 1] image.
void write_pgm(const Image& img, const std::string& path);
// Binary PPM (P6, maxval 255) with the three images as R, G and B planes.
void write_ppm(const Image& r, const Image& g, const Image& b, const std::string& path);
Image read_pgm(const std::string& path);

}  // namespace mflow
