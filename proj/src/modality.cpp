#include "mflow/modality.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "mflow/errors.hpp"

namespace mflow {

// ---------------------------------------------------------------------------
// Registry

void ModalityRegistry::add(ModalitySpec spec) {
  if (spec.name.empty()) throw ParameterError("modality name must not be empty");
  if (contains(spec.name)) throw ParameterError("modality registered twice: " + spec.name);
  if (spec.latent.channels == 0 || spec.latent.height == 0 || spec.latent.width == 0) {
    throw ParameterError("modality " + spec.name + " has an empty latent extent");
  }
  if (spec.context_len == 0 || spec.embed_dim == 0) {
    throw ParameterError("modality " + spec.name + " needs positive context_len and embed_dim");
  }
  if (!specs_.empty() && spec.embed_dim != specs_.front().embed_dim) {
    throw ParameterError("modality " + spec.name + " embed_dim " + std::to_string(spec.embed_dim) +
                         " differs from shared dimension " +
                         std::to_string(specs_.front().embed_dim));
  }
  specs_.push_back(std::move(spec));
}

const ModalitySpec& ModalityRegistry::get(const std::string& name) const {
  return specs_.at(index_of(name));
}

bool ModalityRegistry::contains(const std::string& name) const {
  return std::any_of(specs_.begin(), specs_.end(),
                     [&](const ModalitySpec& s) { return s.name == name; });
}

std::size_t ModalityRegistry::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    if (specs_[i].name == name) return i;
  }
  throw ParameterError("unknown modality: " + name);
}

std::size_t ModalityRegistry::embed_dim() const {
  return specs_.empty() ? 0 : specs_.front().embed_dim;
}

ModalityRegistry default_registry(const ModelConfig& cfg) {
  ModalityRegistry reg;
  const std::size_t half = cfg.image_size / 2;
  reg.add({"text", ModalityKind::kText, {cfg.embed_dim, 1, 1}, 1, cfg.embed_dim, 0.0, 0.65});
  const std::pair<const char*, std::pair<double, double>> images[] = {
      {"xray", {0.1, 0.2}}, {"ct", {0.9, 0.2}}, {"mri", {0.2, 0.25}}};
  for (const auto& [name, norm] : images) {
    reg.add({name, ModalityKind::kImage, {4, half, half}, cfg.image_context_len, cfg.embed_dim,
             norm.first, norm.second});
  }
  return reg;
}

// ---------------------------------------------------------------------------
// Vocabulary

namespace vocab {
namespace {

struct Table {
  std::vector<std::string> tokens;
  std::map<std::string, int> ids;
  Table() {
    auto push = [&](std::string t) {
      ids.emplace(t, static_cast<int>(tokens.size()));
      tokens.push_back(std::move(t));
    };
    push("<pad>");
    for (int n = 1; n <= 3; ++n) push("blobs=" + std::to_string(n));
    push("at");
    for (int y = 0; y < kGrid; ++y) {
      for (int x = 0; x < kGrid; ++x) {
        push("(" + std::to_string(x) + "," + std::to_string(y) + ")");
      }
    }
    for (int r = 0; r < kLevels; ++r) push("r=" + std::to_string(r));
    for (int i = 0; i < kLevels; ++i) push("i=" + std::to_string(i));
  }
};

const Table& table() {
  static const Table t;
  return t;
}

}  // namespace

std::size_t size() { return table().tokens.size(); }

int id(const std::string& tok) {
  auto it = table().ids.find(tok);
  if (it == table().ids.end()) throw FormatError("unknown token '" + tok + "'");
  return it->second;
}

const std::string& token(int i) {
  if (i < 0 || static_cast<std::size_t>(i) >= size()) {
    throw FormatError("token id out of range: " + std::to_string(i));
  }
  return table().tokens[static_cast<std::size_t>(i)];
}

int blobs(int count) { return id("blobs=" + std::to_string(count)); }
int at() { return id("at"); }
int position(int qx, int qy) { return 5 + qy * kGrid + qx; }
int radius(int level) { return 5 + kGrid * kGrid + level; }
int intensity(int level) { return 5 + kGrid * kGrid + kLevels + level; }

std::array<double, 4> descriptor(int i) {
  token(i);
  const int grid = kGrid * kGrid;
  const double half = (kGrid - 1) / 2.0;
  const double level_mid = (kLevels - 1) / 2.0;
  if (i == kPad) return {0.0, 0.0, 0.0, 0.0};
  if (i <= 3) return {-1.0, -1.0, (i - 2) * 0.8, 0.0};
  if (i == 4) return {-1.0, 1.0, 0.0, 0.0};
  if (i < 5 + grid) {
    const int q = i - 5;
    return {1.0, 1.0, (q % kGrid - half) / 5.0, (q / kGrid - half) / 5.0};
  }
  const int r = i - 5 - grid;
  if (r < kLevels) return {1.0, -1.0, (r - level_mid) / 1.25, -0.75};
  return {1.0, -1.0, (r - kLevels - level_mid) / 1.25, 0.75};
}

std::string to_string(const TokenSeq& seq) {
  std::string out;
  for (int t : seq.ids) {
    if (!out.empty()) out += ' ';
    out += token(t);
  }
  return out;
}

TokenSeq parse(const std::string& text) {
  TokenSeq seq;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) seq.ids.push_back(id(tok));
  if (seq.ids.size() > kMaxTokens) {
    throw FormatError("token sequence longer than " + std::to_string(kMaxTokens));
  }
  return seq;
}

}  // namespace vocab

// ---------------------------------------------------------------------------
// Autoencoders

Tensor SpaceToDepthAutoencoder::encode(const Sample& x) const {
  const auto* img = std::get_if<Image>(&x);
  if (!img || img->height != size_ || img->width != size_) {
    throw ShapeError("space-to-depth autoencoder expects a " + std::to_string(size_) + "x" +
                     std::to_string(size_) + " image");
  }
  const std::size_t h = size_ / 2;
  std::vector<double> z(4 * h * h);
  for (std::size_t dy = 0; dy < 2; ++dy) {
    for (std::size_t dx = 0; dx < 2; ++dx) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x2 = 0; x2 < h; ++x2) {
          z[((dy * 2 + dx) * h + y) * h + x2] = img->pixels[(2 * y + dy) * size_ + 2 * x2 + dx];
        }
      }
    }
  }
  return Tensor::from({4, h, h}, std::move(z));
}

Sample SpaceToDepthAutoencoder::decode(const Tensor& z) const {
  const std::size_t h = size_ / 2;
  if (z.shape() != Shape{4, h, h}) {
    throw ShapeError("space-to-depth decode expects [4x" + std::to_string(h) + "x" +
                     std::to_string(h) + "], got " + shape_str(z.shape()));
  }
  Image img{size_, size_, std::vector<double>(size_ * size_)};
  auto d = z.data();
  for (std::size_t dy = 0; dy < 2; ++dy) {
    for (std::size_t dx = 0; dx < 2; ++dx) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x2 = 0; x2 < h; ++x2) {
          img.pixels[(2 * y + dy) * size_ + 2 * x2 + dx] = d[((dy * 2 + dx) * h + y) * h + x2];
        }
      }
    }
  }
  return img;
}

TokenCodebookAutoencoder::TokenCodebookAutoencoder(std::size_t embed_dim) : dim_(embed_dim) {
  if (embed_dim % vocab::kMaxTokens != 0) {
    throw ParameterError("text latent width must be a multiple of " +
                         std::to_string(vocab::kMaxTokens));
  }
  code_width_ = embed_dim / vocab::kMaxTokens;
  if (code_width_ < 4) throw ParameterError("text latent width must be at least 64");
  codes_.assign(vocab::size() * code_width_, 0.0);
  for (std::size_t t = 0; t < vocab::size(); ++t) {
    const auto d = vocab::descriptor(static_cast<int>(t));
    std::copy(d.begin(), d.end(), codes_.begin() + static_cast<std::ptrdiff_t>(t * code_width_));
  }
}

Tensor TokenCodebookAutoencoder::encode(const Sample& x) const {
  const auto* seq = std::get_if<TokenSeq>(&x);
  if (!seq || seq->ids.size() > vocab::kMaxTokens) {
    throw ShapeError("codebook autoencoder expects at most 16 tokens");
  }
  std::vector<double> z(dim_);
  for (std::size_t slot = 0; slot < vocab::kMaxTokens; ++slot) {
    const int t = slot < seq->ids.size() ? seq->ids[slot] : vocab::kPad;
    vocab::token(t);  // range check
    std::copy_n(codes_.begin() + static_cast<std::ptrdiff_t>(t * code_width_), code_width_,
                z.begin() + static_cast<std::ptrdiff_t>(slot * code_width_));
  }
  return Tensor::from({dim_, 1, 1}, std::move(z));
}

Sample TokenCodebookAutoencoder::decode(const Tensor& z) const {
  if (z.numel() != dim_) throw ShapeError("codebook decode expects " + std::to_string(dim_) + " values");
  auto d = z.data();
  TokenSeq seq;
  for (std::size_t slot = 0; slot < vocab::kMaxTokens; ++slot) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < vocab::size(); ++t) {
      double dist = 0.0;
      for (std::size_t j = 0; j < code_width_; ++j) {
        const double diff = d[slot * code_width_ + j] - codes_[t * code_width_ + j];
        dist += diff * diff;
      }
      if (dist < best_d) {
        best_d = dist;
        best = static_cast<int>(t);
      }
    }
    seq.ids.push_back(best);
  }
  while (!seq.ids.empty() && seq.ids.back() == vocab::kPad) seq.ids.pop_back();
  return seq;
}

std::unique_ptr<Autoencoder> make_autoencoder(const ModalitySpec& spec, const ModelConfig& cfg) {
  if (spec.kind == ModalityKind::kText) {
    return std::make_unique<TokenCodebookAutoencoder>(spec.latent.channels);
  }
  return std::make_unique<SpaceToDepthAutoencoder>(cfg.image_size);
}

Tensor encode_batch(const Autoencoder& ae, std::span<const Sample> batch) {
  const LatentShape ls = ae.latent_shape();
  std::vector<double> out;
  out.reserve(batch.size() * ls.numel());
  for (const auto& s : batch) {
    Tensor z = ae.encode(s);
    out.insert(out.end(), z.data().begin(), z.data().end());
  }
  return Tensor::from({batch.size(), ls.channels, ls.height, ls.width}, std::move(out));
}

std::vector<Sample> decode_batch(const Autoencoder& ae, const Tensor& z) {
  if (z.dim() != 4) throw ShapeError("decode_batch expects [N,C,H,W], got " + shape_str(z.shape()));
  const std::size_t n = z.extent(0);
  const std::size_t per = n == 0 ? 0 : z.numel() / n;
  const Shape one{z.extent(1), z.extent(2), z.extent(3)};
  auto d = z.data();
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> v(d.begin() + static_cast<std::ptrdiff_t>(i * per),
                          d.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
    out.push_back(ae.decode(Tensor::from(one, std::move(v))));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prompt encoders

namespace {

constexpr std::size_t kEncoderTokens = 16;

class ImagePromptEncoder final : public PromptEncoder {
 public:
  ImagePromptEncoder(const ModalitySpec& spec, const ModelConfig& cfg, Rng& rng)
      : PromptEncoder("encoder." + spec.name, spec.embed_dim, rng), size_(cfg.image_size) {
    if (size_ != 16) throw ParameterError("image prompt encoder expects 16x16 inputs");
    const std::size_t w = cfg.encoder_width;
    conv1_ = Conv3x3(params_, "conv1", ParamGroup::kEncoder, 1, w, rng, 2);
    conv2_ = Conv3x3(params_, "conv2", ParamGroup::kEncoder, w, 2 * w, rng, 2);
    token_ = Linear(params_, "token", ParamGroup::kEncoder, 2 * w, dim_, rng);
    pos_ = params_.uniform("pos", ParamGroup::kEncoder, {kEncoderTokens, dim_}, dim_, rng);
  }

  Tensor token_features(std::span<const Sample> batch) const override {
    const std::size_t n = batch.size();
    std::vector<double> px;
    px.reserve(n * size_ * size_);
    for (const auto& s : batch) {
      const auto* img = std::get_if<Image>(&s);
      if (!img || img->height != size_ || img->width != size_) {
        throw ShapeError("image prompt encoder expects 16x16 images");
      }
      px.insert(px.end(), img->pixels.begin(), img->pixels.end());
    }
    Geometry g{n, size_, size_};
    Tensor x = Tensor::from({n * size_ * size_, 1}, std::move(px));
    Geometry g1, g2;
    Tensor h = silu(conv1_(x, g, &g1));
    h = silu(conv2_(h, g1, &g2));
    Tensor tok = token_(h).reshape({n, kEncoderTokens, dim_});
    return silu(add(tok, pos_));
  }

 private:
  std::size_t size_;
  Conv3x3 conv1_, conv2_;
  Linear token_;
  Tensor pos_;
};

class TextPromptEncoder final : public PromptEncoder {
 public:
  TextPromptEncoder(const ModalitySpec& spec, const ModelConfig& cfg, Rng& rng)
      : PromptEncoder("encoder." + spec.name, spec.embed_dim, rng) {
    const std::size_t e = 2 * cfg.encoder_width;
    width_ = e;
    table_ = params_.uniform("table", ParamGroup::kEncoder, {vocab::size(), e}, 100, rng);
    // Start from a random linear image of the token descriptors so related
    // tokens (adjacent cells, nearby levels) begin with related embeddings.
    std::vector<double> mix(4 * e);
    for (auto& m : mix) m = rng.uniform(-1.0, 1.0);
    auto tab = table_.mutable_data();
    for (std::size_t t = 0; t < vocab::size(); ++t) {
      const auto d = vocab::descriptor(static_cast<int>(t));
      for (std::size_t j = 0; j < e; ++j) {
        for (std::size_t k = 0; k < 4; ++k) tab[t * e + j] += d[k] * mix[k * e + j];
      }
    }
    pos_ = params_.uniform("pos", ParamGroup::kEncoder, {vocab::kMaxTokens, e}, 1, rng);
    token_ = Linear(params_, "token", ParamGroup::kEncoder, e, dim_, rng);
  }

  Tensor token_features(std::span<const Sample> batch) const override {
    const std::size_t n = batch.size();
    auto idx = std::make_shared<std::vector<std::int64_t>>();
    idx->reserve(n * vocab::kMaxTokens * width_);
    for (const auto& s : batch) {
      const auto* seq = std::get_if<TokenSeq>(&s);
      if (!seq || seq->ids.size() > vocab::kMaxTokens) {
        throw ShapeError("text prompt encoder expects token sequences of length <= 16");
      }
      for (std::size_t slot = 0; slot < vocab::kMaxTokens; ++slot) {
        const int t = slot < seq->ids.size() ? seq->ids[slot] : vocab::kPad;
        vocab::token(t);
        for (std::size_t j = 0; j < width_; ++j) {
          idx->push_back(static_cast<std::int64_t>(static_cast<std::size_t>(t) * width_ + j));
        }
      }
    }
    Tensor emb = gather(table_, std::move(idx), {n, vocab::kMaxTokens, width_});
    Tensor h = silu(add(emb, pos_));
    return token_(h);
  }

 private:
  std::size_t width_ = 0;
  Tensor table_, pos_;
  Linear token_;
};

}  // namespace

PromptEncoder::PromptEncoder(const std::string& prefix, std::size_t embed_dim, Rng& rng)
    : params_(prefix), dim_(embed_dim) {
  head_ = Linear(params_, "head", ParamGroup::kEncoder, kEncoderTokens * embed_dim, embed_dim, rng);
}

Tensor PromptEncoder::project(std::span<const Sample> batch) const {
  Tensor tok = token_features(batch);
  const std::size_t n = tok.extent(0);
  return head_(silu(tok.reshape({n, tok.extent(1) * tok.extent(2)})));
}

Tensor PromptEncoder::encode(std::span<const Sample> batch) const {
  return l2_normalize(project(batch));
}

Tensor encode_prompt(const PromptEncoder& enc, const Sample& x) {
  Tensor z = enc.encode(std::span<const Sample>(&x, 1));
  return z.reshape({enc.embed_dim()});
}

std::unique_ptr<PromptEncoder> make_prompt_encoder(const ModalitySpec& spec,
                                                   const ModelConfig& cfg, Rng& rng) {
  if (spec.kind == ModalityKind::kText) return std::make_unique<TextPromptEncoder>(spec, cfg, rng);
  return std::make_unique<ImagePromptEncoder>(spec, cfg, rng);
}

// ---------------------------------------------------------------------------
// Tokens, pooling, adaptation

std::size_t latent_token_count(const ModalitySpec& spec) {
  return spec.latent.height * spec.latent.width;
}

std::size_t latent_token_width(const ModalitySpec& spec) { return spec.latent.channels; }

Tensor latent_tokens(const Tensor& z, const ModalitySpec& spec) {
  const LatentShape& ls = spec.latent;
  if (z.dim() != 4 || z.extent(1) != ls.channels || z.extent(2) != ls.height ||
      z.extent(3) != ls.width) {
    throw ShapeError("latent for " + spec.name + " must be [N," + std::to_string(ls.channels) +
                     "," + std::to_string(ls.height) + "," + std::to_string(ls.width) + "], got " +
                     shape_str(z.shape()));
  }
  const std::size_t n = z.extent(0);
  return to_tokens(z).reshape({n, ls.height * ls.width, ls.channels});
}

Tensor strided_mean_pool(const Tensor& tokens, std::size_t count) {
  if (tokens.dim() != 3) {
    throw ShapeError("strided_mean_pool expects [N,n,D], got " + shape_str(tokens.shape()));
  }
  const std::size_t n = tokens.extent(0), len = tokens.extent(1), d = tokens.extent(2);
  if (count == 0 || count > len) {
    throw ParameterError("cannot pool " + std::to_string(len) + " tokens to " +
                         std::to_string(count));
  }
  // Group k covers [floor(k*len/count), floor((k+1)*len/count)).
  std::vector<double> pool(count * len, 0.0);
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t lo = k * len / count, hi = (k + 1) * len / count;
    for (std::size_t j = lo; j < hi; ++j) pool[k * len + j] = 1.0 / static_cast<double>(hi - lo);
  }
  Tensor cols = permute(tokens, {1, 0, 2}).reshape({len, n * d});
  Tensor pooled = matmul(Tensor::from({count, len}, std::move(pool)), cols);
  return permute(pooled.reshape({count, n, d}), {1, 0, 2});
}

GuidedAdaptation GuidedAdaptation::as_trainable() const {
  Tensor leaf = tokens.detach();
  leaf.set_requires_grad(true);
  return {leaf};
}

GuidedAdaptation build_adaptation(const Tensor& z_b, const ModalitySpec& receiver,
                                  const Linear& embedding) {
  if (receiver.context_len == 0) {
    throw ParameterError("receiving modality " + receiver.name + " has context_len 0");
  }
  if (z_b.dim() != 3 || z_b.extent(2) != receiver.embed_dim) {
    throw ShapeError("adaptation source must be [N,n," + std::to_string(receiver.embed_dim) +
                     "], got " + shape_str(z_b.shape()));
  }
  return {embedding(strided_mean_pool(z_b, receiver.context_len))};
}

ContextEncoder::ContextEncoder(const ModalitySpec& source, std::size_t heads,
                               const std::string& prefix, Rng& rng)
    : source_(source), params_(prefix) {
  const std::size_t d = source.embed_dim;
  in_proj_ = Linear(params_, "in", ParamGroup::kContext, latent_token_width(source), d, rng);
  pos_ = grid_positions(source.latent.height, source.latent.width, d);
  norm_ = LayerNorm(params_, "norm", ParamGroup::kContext, d);
  attn_ = Attention(params_, "attn", ParamGroup::kContext, d, d, d, heads, rng, true);
}

Tensor ContextEncoder::operator()(const Tensor& z_t, const GuidedAdaptation& f) const {
  const std::size_t d = source_.embed_dim;
  if (!f.tokens || f.tokens.dim() != 3 || f.tokens.extent(2) != d) {
    throw ShapeError("adaptation tokens must be [N,L," + std::to_string(d) + "]");
  }
  Tensor lat = add(in_proj_(latent_tokens(z_t, source_)), pos_);
  if (f.tokens.extent(0) != lat.extent(0)) {
    throw ShapeError("adaptation batch " + std::to_string(f.tokens.extent(0)) +
                     " differs from latent batch " + std::to_string(lat.extent(0)));
  }
  Tensor joined = concat({lat, f.tokens}, 1);
  Tensor normed = norm_(joined);
  return add(joined, attn_(normed, normed));
}

Tensor encode_context(const ContextEncoder& v, const Tensor& z_t, const GuidedAdaptation& f) {
  return v(z_t, f);
}

ModalityCodecs make_codecs(const ModalitySpec& spec, const ModelConfig& cfg, std::uint64_t seed) {
  std::uint64_t tag = 0;
  for (char c : spec.name) tag = tag * 131 + static_cast<unsigned char>(c);
  ModalityCodecs m;
  m.spec = spec;
  m.autoencoder = make_autoencoder(spec, cfg);
  Rng enc_rng(derive_key(seed, tag, 1));
  m.encoder = make_prompt_encoder(spec, cfg, enc_rng);
  Rng ctx_rng(derive_key(seed, tag, 2));
  m.context = std::make_unique<ContextEncoder>(spec, cfg.heads, "context." + spec.name, ctx_rng);
  Rng emb_rng(derive_key(seed, tag, 3));
  m.embedding_params = std::make_unique<ParamStore>("adapt." + spec.name);
  m.embedding = Linear(*m.embedding_params, "emb", ParamGroup::kAdaptation, spec.embed_dim,
                       spec.embed_dim, emb_rng);
  return m;
}

Tensor encode_latents(const ModalityCodecs& codecs, std::span<const Sample> batch) {
  Tensor z = encode_batch(*codecs.autoencoder, batch);
  const double shift = codecs.spec.latent_shift, inv = 1.0 / codecs.spec.latent_scale;
  std::vector<double> v(z.data().begin(), z.data().end());
  for (double& x : v) x = (x - shift) * inv;
  return Tensor::from(z.shape(), std::move(v));
}

std::vector<Sample> decode_latents(const ModalityCodecs& codecs, const Tensor& z) {
  const double shift = codecs.spec.latent_shift, s = codecs.spec.latent_scale;
  std::vector<double> v(z.data().begin(), z.data().end());
  for (double& x : v) x = x * s + shift;
  return decode_batch(*codecs.autoencoder, Tensor::from(z.shape(), std::move(v)));
}

}  // namespace mflow
