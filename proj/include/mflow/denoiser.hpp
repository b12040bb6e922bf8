#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mflow/modality.hpp"
#include "mflow/nn.hpp"

namespace mflow {

// Anything that predicts the added noise from (z_t, t, context).
class EpsModel {
 public:
  virtual ~EpsModel() = default;
  // z_t: [N, C, H, W]; t: N steps; context: [N, L, D] or nullptr for the
  // unconditional branch. Returns a tensor shaped like z_t.
  virtual Tensor predict_eps(const Tensor& z_t, std::span<const std::size_t> t,
                             const Tensor* context) const = 0;
};

// Sinusoidal embedding: entries 2i and 2i+1 are sin and cos of t * 10000^(-2i/dim).
std::vector<double> time_embed(std::size_t t, std::size_t dim);

// UNet-lite epsilon predictor with one cross-attention sublayer per level.
//
// Layout (token activations [N*H*W, C]):
//   conv_in + pos -> res0 -> ca0 -> [down -> res1 -> ca1 -> up] + skip -> res2 -> ca2 -> out
// For 1x1 latents the down/up pair is omitted, convolutions are pointwise and
// the trunk is widened to at least twice the latent width. Output projection is
// zero-initialized so the model predicts 0 at construction.
class DiffuserModel final : public EpsModel {
 public:
  DiffuserModel(const ModalitySpec& spec, const ModelConfig& cfg, std::uint64_t seed);

  Tensor predict_eps(const Tensor& z_t, std::span<const std::size_t> t,
                     const Tensor* context) const override;

  // Learned null context [N, 1, D] used when no context is supplied.
  Tensor null_context(std::size_t batch) const;
  // Replaces the context of samples with keep[i] == false by the null token.
  Tensor mask_context(const Tensor& context, const std::vector<bool>& keep) const;

  const ModalitySpec& modality() const { return spec_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

 private:
  struct ResBlock {
    LayerNorm norm1, norm2;
    Conv3x3 conv1, conv2;
    Linear time;
  };
  struct CrossBlock {
    LayerNorm norm;
    Attention attn;
  };

  Conv3x3 conv(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
               Rng& rng, bool zero_init = false) const;
  ResBlock make_res(const std::string& name, Rng& rng);
  CrossBlock make_cross(const std::string& name, Rng& rng);
  Tensor run_res(const ResBlock& b, const Tensor& h, const Tensor& temb, const Geometry& g) const;
  Tensor run_cross(const CrossBlock& b, const Tensor& h, const Tensor& ctx, const Geometry& g,
                   const Tensor& pos) const;

  ModalitySpec spec_;
  std::size_t channels_;
  std::size_t heads_;
  ParamStore params_;
  Linear time1_, time2_;
  Conv3x3 conv_in_;
  Tensor pos_;   // fixed grid positions so queries know where they are
  Tensor pos1_;  // same at the downsampled level
  ResBlock res0_, res1_, res2_;
  CrossBlock ca0_, ca1_, ca2_;
  Conv3x3 down_;
  bool spatial_ = true;
  LayerNorm norm_out_;
  Conv3x3 conv_out_;
  Tensor null_token_;
};

}  // namespace mflow
