#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mflow/rng.hpp"
#include "mflow/tensor.hpp"

namespace mflow {

enum class ParamGroup {
  kEncoder,         // prompt encoders C_M
  kBackbone,        // denoiser weights outside cross-attention
  kCrossAttention,  // denoiser cross-attention sublayers (theta_c)
  kContext,         // context encoders V_M
  kAdaptation,      // embedding layers F_emb producing guided adaptations
  kAlignment,       // contrastive temperature
};

const char* group_name(ParamGroup group);

struct ParamEntry {
  std::string name;
  ParamGroup group;
  Tensor tensor;
};

// Ordered, name-unique parameter registry. Registration order is the
// canonical order used by checkpoints and optimizers.
class ParamStore {
 public:
  explicit ParamStore(std::string prefix = {}) : prefix_(std::move(prefix)) {}

  Tensor add(const std::string& name, ParamGroup group, Shape shape, std::vector<double> init);
  Tensor zeros(const std::string& name, ParamGroup group, Shape shape);
  Tensor ones(const std::string& name, ParamGroup group, Shape shape);
  // Uniform(-s, s) with s = 1/sqrt(fan_in).
  Tensor uniform(const std::string& name, ParamGroup group, Shape shape, std::size_t fan_in,
                 Rng& rng);

  const std::vector<ParamEntry>& entries() const { return entries_; }
  const ParamEntry* find(const std::string& full_name) const;
  const std::string& prefix() const { return prefix_; }
  std::size_t count() const { return entries_.size(); }
  std::size_t scalar_count() const;

 private:
  std::string prefix_;
  std::vector<ParamEntry> entries_;
};

// Spatial geometry of a token-layout activation [N*H*W, C].
struct Geometry {
  std::size_t batch = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t tokens() const { return batch * height * width; }
};

// y = x W + b over the last axis; any leading shape is preserved.
struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out] or undefined
  std::size_t in = 0;
  std::size_t out = 0;

  Linear() = default;
  Linear(ParamStore& store, const std::string& name, ParamGroup group, std::size_t in,
         std::size_t out, Rng& rng, bool with_bias = true, bool zero_init = false);
  Tensor operator()(const Tensor& x) const;
};

// Per-feature affine layer normalization over the last axis.
struct LayerNorm {
  Tensor gain;
  Tensor shift;

  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& name, ParamGroup group, std::size_t width);
  Tensor operator()(const Tensor& x) const;
};

// 3x3 convolution, padding 1, on token-layout activations. With taps == 1 it
// is the pointwise (1x1) variant, which is all a 3x3 kernel can see on a 1x1 grid.
struct Conv3x3 {
  Tensor weight;  // [taps*in, out]
  Tensor bias;    // [out]
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t stride = 1;
  std::size_t taps = 9;

  Conv3x3() = default;
  Conv3x3(ParamStore& store, const std::string& name, ParamGroup group, std::size_t in,
          std::size_t out, Rng& rng, std::size_t stride = 1, bool zero_init = false);
  static Conv3x3 pointwise(ParamStore& store, const std::string& name, ParamGroup group,
                           std::size_t in, std::size_t out, Rng& rng, bool zero_init = false);
  // x: [g.tokens(), in] -> [N*Ho*Wo, out]; `out_geometry` receives (Ho, Wo).
  Tensor operator()(const Tensor& x, const Geometry& g, Geometry* out_geometry = nullptr) const;
};

// Multi-head attention of queries [N, Lq, Cq] over keys/values [N, Lk, Ck].
struct Attention {
  Linear q, k, v, o;
  std::size_t heads = 1;
  std::size_t width = 0;

  Attention() = default;
  Attention(ParamStore& store, const std::string& name, ParamGroup group, std::size_t query_width,
            std::size_t context_width, std::size_t width, std::size_t heads, Rng& rng,
            bool zero_output = true);
  Tensor operator()(const Tensor& queries, const Tensor& context) const;
};

// Index maps shared by gather-based layers. Results are cached per shape.
std::shared_ptr<const std::vector<std::int64_t>> im2col_index(const Geometry& g,
                                                              std::size_t channels,
                                                              std::size_t stride);
std::shared_ptr<const std::vector<std::int64_t>> upsample2x_index(const Geometry& g,
                                                                  std::size_t channels);
// Repeats each of `batch` rows `repeat` times: [batch, C] -> [batch*repeat, C].
Tensor repeat_rows(const Tensor& x, std::size_t repeat);

// Fixed 2-D sinusoidal positions [H*W, dim]: the first half of the columns
// encode the column index, the second half the row index, each as sin/cos pairs
// with frequencies from pi down to pi/max(H, W). A 1x1 grid yields zeros.
Tensor grid_positions(std::size_t height, std::size_t width, std::size_t dim);

// [N, C, H, W] <-> token layout [N*H*W, C].
Tensor to_tokens(const Tensor& nchw);
Tensor from_tokens(const Tensor& tokens, std::size_t batch, std::size_t channels,
                   std::size_t height, std::size_t width);

}  // namespace mflow
