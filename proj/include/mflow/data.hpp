#pragma once

// Synthetic scenes and their four paired renderings.

#include <cstdint>
#include <string>
#include <vector>

#include "mflow/modality.hpp"

namespace mflow {

struct Blob {
  double x = 0.5;          // center, [0, 1]
  double y = 0.5;
  double radius = 0.1;     // [0.05, 0.2]
  double intensity = 0.5;  // [0.3, 1.0]
  bool operator==(const Blob&) const = default;
};

struct Scene {
  std::uint64_t seed = 0;
  std::vector<Blob> blobs;  // 1..3, sorted by (y, x)
};

constexpr std::size_t kImageSize = 16;

// Pure function of (seed, scene_id).
Scene make_scene(std::uint64_t seed, std::uint64_t scene_id);

// xray: clipped sum of Gaussian blobs.
Image render_xray(const Scene& scene);
// ct before sharpening: 1 - xray.
Image render_ct_inverted(const Scene& scene);
// ct: inverted render with an unsharp-mask edge boost, clipped.
Image render_ct(const Scene& scene);
// mri: sqrt(xray) plus a fixed sinusoidal texture, clipped.
Image render_mri(const Scene& scene);
// "blobs=N" followed by "at (qx,qy) r=qr i=qi" per blob.
TokenSeq render_text(const Scene& scene);

// Dispatches on modality name; ParameterError for unknown names.
Sample render_modality(const Scene& scene, const std::string& modality);

// Scene ids: training pairs of the k-th dataset use [k * kTrainStride, ...),
// validation scenes use [kValBase, ...). The ranges never overlap.
constexpr std::uint64_t kTrainStride = 1'000'000;
constexpr std::uint64_t kValBase = 900'000'000;

struct PairedDataset {
  std::string a;
  std::string b;
  std::vector<std::uint64_t> scene_ids;
  std::vector<Sample> xa;
  std::vector<Sample> xb;
  std::size_t size() const { return scene_ids.size(); }
};

PairedDataset make_pairs(const std::string& a, const std::string& b, std::uint64_t seed,
                         const std::vector<std::uint64_t>& scene_ids);
std::vector<std::uint64_t> train_scene_ids(std::size_t dataset_index, std::size_t count);
std::vector<std::uint64_t> val_scene_ids(std::size_t count);

// Tab-separated text: header "scene\t<a>\t<b>", then one pair per line.
// Images are stored as comma-separated hexadecimal floats (exact), text as
// space-separated tokens.
void write_pairs(const PairedDataset& ds, const std::string& path);
PairedDataset read_pairs(const std::string& path);

std::string format_sample(const Sample& x);
Sample parse_sample(const std::string& text, ModalityKind kind);

}  // namespace mflow
