#pragma once

// Per-modality machinery: registry of modality specs, raw sample types,
// pluggable autoencoders, prompt encoders, context encoders and the guided
// adaptation tokens that let one modality condition another.

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mflow/nn.hpp"
#include "mflow/tensor.hpp"

namespace mflow {

enum class ModalityKind { kImage, kText };

struct LatentShape {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t numel() const { return channels * height * width; }
  bool operator==(const LatentShape&) const = default;
};

struct ModalitySpec {
  std::string name;
  ModalityKind kind = ModalityKind::kImage;
  LatentShape latent;
  std::size_t context_len = 1;  // adaptation tokens this modality receives
  std::size_t embed_dim = 64;   // shared alignment width
  // Diffusion runs on (autoencoder latent - latent_shift) / latent_scale so
  // every modality enters the noise process at roughly unit variance.
  double latent_shift = 0.0;
  double latent_scale = 1.0;
};

class ModalityRegistry {
 public:
  // Throws ParameterError on duplicate names, empty extents, or an embed_dim
  // that differs from already-registered modalities.
  void add(ModalitySpec spec);
  const ModalitySpec& get(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::size_t index_of(const std::string& name) const;
  const std::vector<ModalitySpec>& specs() const { return specs_; }
  std::size_t embed_dim() const;

 private:
  std::vector<ModalitySpec> specs_;
};

struct ModelConfig {
  std::size_t embed_dim = 64;
  std::size_t image_size = 16;
  std::size_t image_context_len = 4;
  std::size_t channels = 32;  // denoiser width
  std::size_t heads = 4;
  std::size_t encoder_width = 16;  // prompt encoder trunk width
};

// text (64x1x1), xray/ct/mri (4x8x8) at the default toy scale.
// Latent shift/scale constants are the rounded mean/std of the toy renders.
ModalityRegistry default_registry(const ModelConfig& cfg = {});

// ---------------------------------------------------------------------------
// Raw samples

struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;  // row-major, [0, 1]
  bool operator==(const Image&) const = default;
};

struct TokenSeq {
  std::vector<int> ids;
  bool operator==(const TokenSeq&) const = default;
};

using Sample = std::variant<Image, TokenSeq>;

// Fixed text vocabulary: "<pad>", "blobs=1..3", "at", "(qx,qy)" for a
// 16x16 grid, "r=0..3", "i=0..3".
namespace vocab {
constexpr std::size_t kMaxTokens = 16;
constexpr int kPad = 0;
constexpr int kGrid = 16;
constexpr int kLevels = 4;
std::size_t size();
int id(const std::string& token);  // FormatError on unknown token
const std::string& token(int id);
int blobs(int count);
int at();
int position(int qx, int qy);
int radius(int level);
int intensity(int level);
// Four-number structured description of a token: a two-sign type code followed
// by its value(s) on a common scale. Neighbouring grid cells get nearby codes.
std::array<double, 4> descriptor(int id);
std::string to_string(const TokenSeq& seq);
TokenSeq parse(const std::string& text);
}  // namespace vocab

// ---------------------------------------------------------------------------
// Autoencoders (latent <-> raw sample)

class Autoencoder {
 public:
  virtual ~Autoencoder() = default;
  // Latents are [C, H, W] tensors without a batch axis.
  virtual Tensor encode(const Sample& x) const = 0;
  virtual Sample decode(const Tensor& z) const = 0;
  virtual LatentShape latent_shape() const = 0;
};

// Lossless 2x2 space-to-depth rearrangement: 1xHxW image -> 4x(H/2)x(W/2).
class SpaceToDepthAutoencoder final : public Autoencoder {
 public:
  explicit SpaceToDepthAutoencoder(std::size_t image_size) : size_(image_size) {}
  Tensor encode(const Sample& x) const override;
  Sample decode(const Tensor& z) const override;
  LatentShape latent_shape() const override { return {4, size_ / 2, size_ / 2}; }

 private:
  std::size_t size_;
};

// Token sequence -> per-slot token descriptors (zero padded to the slot
// width); decodes by nearest code. Requires a latent width of at least 64.
class TokenCodebookAutoencoder final : public Autoencoder {
 public:
  explicit TokenCodebookAutoencoder(std::size_t embed_dim);
  Tensor encode(const Sample& x) const override;
  Sample decode(const Tensor& z) const override;
  LatentShape latent_shape() const override { return {dim_, 1, 1}; }

 private:
  std::size_t dim_;
  std::size_t code_width_;
  std::vector<double> codes_;  // vocab::size() x code_width_
};

std::unique_ptr<Autoencoder> make_autoencoder(const ModalitySpec& spec, const ModelConfig& cfg);

// Stacks encoded latents of a batch into [N, C, H, W].
Tensor encode_batch(const Autoencoder& ae, std::span<const Sample> batch);
// Splits [N, C, H, W] latents and decodes each sample.
std::vector<Sample> decode_batch(const Autoencoder& ae, const Tensor& z);

// ---------------------------------------------------------------------------
// Prompt encoders C_M

class PromptEncoder {
 public:
  virtual ~PromptEncoder() = default;
  // Per-token features [N, n, D] before pooling.
  virtual Tensor token_features(std::span<const Sample> batch) const = 0;
  // Pooled projection [N, D] (not normalized).
  Tensor project(std::span<const Sample> batch) const;
  // Unit-norm embeddings [N, D].
  Tensor encode(std::span<const Sample> batch) const;
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  std::size_t embed_dim() const { return dim_; }

 protected:
  PromptEncoder(const std::string& prefix, std::size_t embed_dim, Rng& rng);
  ParamStore params_;
  std::size_t dim_;
  Linear head_;
};

// Single-sample convenience: unit-norm embedding of shape [D].
Tensor encode_prompt(const PromptEncoder& enc, const Sample& x);

std::unique_ptr<PromptEncoder> make_prompt_encoder(const ModalitySpec& spec,
                                                   const ModelConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// Latent tokenization, sampling strategy and guided adaptation

// [N, C, H, W] latent -> [N, H*W, C]: one token per latent cell, row-major.
Tensor latent_tokens(const Tensor& z, const ModalitySpec& spec);
std::size_t latent_token_count(const ModalitySpec& spec);
std::size_t latent_token_width(const ModalitySpec& spec);

// Strided mean pooling of [N, n, D] tokens to [N, count, D].
Tensor strided_mean_pool(const Tensor& tokens, std::size_t count);

struct GuidedAdaptation {
  Tensor tokens;  // [N, context_len_A, D]
  // Detached trainable copy (textual-inversion style free tokens).
  GuidedAdaptation as_trainable() const;
};

// f_B = F_emb(phi_s(z_B)); z_B is [N, n, D] token features of modality B.
GuidedAdaptation build_adaptation(const Tensor& z_b, const ModalitySpec& receiver,
                                  const Linear& embedding);

// V_B: projects partner latent tokens to D (plus fixed grid positions),
// concatenates the adaptation tokens and applies one pre-norm transformer
// block (self-attention) whose residual branch is zero-initialized.
class ContextEncoder {
 public:
  ContextEncoder(const ModalitySpec& source, std::size_t heads, const std::string& prefix,
                 Rng& rng);
  // z_t: [N, C, H, W] latent of the source modality. Returns
  // [N, H*W + L_f, D].
  Tensor operator()(const Tensor& z_t, const GuidedAdaptation& f) const;
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

 private:
  ModalitySpec source_;
  ParamStore params_;
  Linear in_proj_;
  Tensor pos_;
  LayerNorm norm_;
  Attention attn_;
};

Tensor encode_context(const ContextEncoder& v, const Tensor& z_t, const GuidedAdaptation& f);

// Everything one modality owns besides its denoiser.
struct ModalityCodecs {
  ModalitySpec spec;
  std::unique_ptr<Autoencoder> autoencoder;
  std::unique_ptr<PromptEncoder> encoder;
  std::unique_ptr<ContextEncoder> context;
  std::unique_ptr<ParamStore> embedding_params;
  Linear embedding;  // F_emb
};

ModalityCodecs make_codecs(const ModalitySpec& spec, const ModelConfig& cfg, std::uint64_t seed);

// Standardized diffusion latents of a batch, and their inverse.
Tensor encode_latents(const ModalityCodecs& codecs, std::span<const Sample> batch);
std::vector<Sample> decode_latents(const ModalityCodecs& codecs, const Tensor& z);

}  // namespace mflow
