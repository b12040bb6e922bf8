#include "mflow/denoiser.hpp"

#include <cmath>

#include "mflow/errors.hpp"

namespace mflow {

std::vector<double> time_embed(std::size_t t, std::size_t dim) {
  std::vector<double> out(dim);
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
    const double arg = static_cast<double>(t) * freq;
    out[2 * i] = std::sin(arg);
    out[2 * i + 1] = std::cos(arg);
  }
  return out;
}

DiffuserModel::DiffuserModel(const ModalitySpec& spec, const ModelConfig& cfg, std::uint64_t seed)
    : spec_(spec), channels_(cfg.channels), heads_(cfg.heads), params_("diffuser." + spec.name) {
  spatial_ = spec.latent.height > 1 || spec.latent.width > 1;
  if (!spatial_) {
    // A flat latent has no spatial redundancy; keep the trunk wider than it.
    while (channels_ < 2 * spec.latent.channels) channels_ += cfg.channels;
  }
  std::uint64_t tag = 0;
  for (char c : spec.name) tag = tag * 131 + static_cast<unsigned char>(c);
  Rng rng(derive_key(seed, tag, 7));
  const std::size_t c = channels_;
  const std::size_t lat = spec.latent.channels;
  if (spatial_ && (spec.latent.height % 2 != 0 || spec.latent.width % 2 != 0)) {
    throw ParameterError("spatial latents must have even extents");
  }
  const auto bb = ParamGroup::kBackbone;
  time1_ = Linear(params_, "backbone.time1", bb, c, 2 * c, rng);
  time2_ = Linear(params_, "backbone.time2", bb, 2 * c, 2 * c, rng);
  conv_in_ = conv(params_, "backbone.conv_in", lat, c, rng);
  pos_ = grid_positions(spec.latent.height, spec.latent.width, c);
  if (spatial_) pos1_ = grid_positions(spec.latent.height / 2, spec.latent.width / 2, c);
  res0_ = make_res("backbone.res0", rng);
  ca0_ = make_cross("ca.ca0", rng);
  if (spatial_) down_ = Conv3x3(params_, "backbone.down", bb, c, c, rng, 2);
  res1_ = make_res("backbone.res1", rng);
  ca1_ = make_cross("ca.ca1", rng);
  res2_ = make_res("backbone.res2", rng);
  ca2_ = make_cross("ca.ca2", rng);
  norm_out_ = LayerNorm(params_, "backbone.norm_out", bb, c);
  conv_out_ = conv(params_, "backbone.conv_out", c, lat, rng, true);
  null_token_ = params_.uniform("ca.null", ParamGroup::kCrossAttention, {spec.embed_dim},
                                spec.embed_dim, rng);
}

Conv3x3 DiffuserModel::conv(ParamStore& store, const std::string& name, std::size_t in,
                            std::size_t out, Rng& rng, bool zero_init) const {
  if (spatial_) return Conv3x3(store, name, ParamGroup::kBackbone, in, out, rng, 1, zero_init);
  return Conv3x3::pointwise(store, name, ParamGroup::kBackbone, in, out, rng, zero_init);
}

DiffuserModel::ResBlock DiffuserModel::make_res(const std::string& name, Rng& rng) {
  const auto bb = ParamGroup::kBackbone;
  ResBlock b;
  b.norm1 = LayerNorm(params_, name + ".norm1", bb, channels_);
  b.conv1 = conv(params_, name + ".conv1", channels_, channels_, rng);
  b.time = Linear(params_, name + ".time", bb, 2 * channels_, channels_, rng);
  b.norm2 = LayerNorm(params_, name + ".norm2", bb, channels_);
  b.conv2 = conv(params_, name + ".conv2", channels_, channels_, rng);
  return b;
}

DiffuserModel::CrossBlock DiffuserModel::make_cross(const std::string& name, Rng& rng) {
  const auto ca = ParamGroup::kCrossAttention;
  CrossBlock b;
  b.norm = LayerNorm(params_, name + ".norm", ca, channels_);
  b.attn = Attention(params_, name + ".attn", ca, channels_, spec_.embed_dim, channels_,
                     heads_, rng, true);
  return b;
}

Tensor DiffuserModel::run_res(const ResBlock& b, const Tensor& h, const Tensor& temb,
                              const Geometry& g) const {
  Tensor a = b.conv1(silu(b.norm1(h)), g);
  a = add(a, repeat_rows(b.time(temb), g.height * g.width));
  a = b.conv2(silu(b.norm2(a)), g);
  return add(h, a);
}

Tensor DiffuserModel::run_cross(const CrossBlock& b, const Tensor& h, const Tensor& ctx,
                                const Geometry& g, const Tensor& pos) const {
  Tensor q = b.norm(h).reshape({g.batch, g.height * g.width, channels_});
  if (spatial_) q = add(q, pos);
  Tensor mixed = b.attn(q, ctx).reshape({g.tokens(), channels_});
  return add(h, mixed);
}

Tensor DiffuserModel::null_context(std::size_t batch) const {
  const std::size_t d = spec_.embed_dim;
  return repeat_rows(null_token_.reshape({1, d}), batch).reshape({batch, 1, d});
}

Tensor DiffuserModel::mask_context(const Tensor& context, const std::vector<bool>& keep) const {
  const std::size_t n = context.extent(0), len = context.extent(1), d = context.extent(2);
  if (keep.size() != n) throw ShapeError("context mask length differs from batch size");
  std::vector<double> k(n * len), drop(n * len);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < len; ++j) {
      k[i * len + j] = keep[i] ? 1.0 : 0.0;
      drop[i * len + j] = keep[i] ? 0.0 : 1.0;
    }
  }
  Tensor nulls = repeat_rows(null_token_.reshape({1, d}), n * len).reshape({n, len, d});
  return add(mul(context, Tensor::from({n, len, 1}, std::move(k))),
             mul(nulls, Tensor::from({n, len, 1}, std::move(drop))));
}

Tensor DiffuserModel::predict_eps(const Tensor& z_t, std::span<const std::size_t> t,
                                  const Tensor* context) const {
  const LatentShape& ls = spec_.latent;
  if (z_t.dim() != 4 || z_t.extent(1) != ls.channels || z_t.extent(2) != ls.height ||
      z_t.extent(3) != ls.width) {
    throw ShapeError("diffuser " + spec_.name + " expects latents [N," +
                     std::to_string(ls.channels) + "," + std::to_string(ls.height) + "," +
                     std::to_string(ls.width) + "], got " + shape_str(z_t.shape()));
  }
  const std::size_t n = z_t.extent(0);
  if (t.size() != n) throw ShapeError("one diffusion step per sample is required");
  Tensor ctx;
  if (context) {
    if (context->dim() != 3 || context->extent(0) != n || context->extent(2) != spec_.embed_dim) {
      throw ShapeError("context must be [" + std::to_string(n) + ",L," +
                       std::to_string(spec_.embed_dim) + "], got " + shape_str(context->shape()));
    }
    ctx = *context;
  } else {
    ctx = null_context(n);
  }

  std::vector<double> te;
  te.reserve(n * channels_);
  for (std::size_t step : t) {
    auto e = time_embed(step, channels_);
    te.insert(te.end(), e.begin(), e.end());
  }
  Tensor temb = time2_(silu(time1_(Tensor::from({n, channels_}, std::move(te)))));

  Geometry g0{n, ls.height, ls.width};
  Tensor h = conv_in_(to_tokens(z_t), g0).reshape({n, g0.height * g0.width, channels_});
  h = add(h, pos_).reshape({g0.tokens(), channels_});
  h = run_res(res0_, h, temb, g0);
  h = run_cross(ca0_, h, ctx, g0, pos_);
  Tensor skip = h;
  if (spatial_) {
    Geometry g1;
    h = down_(h, g0, &g1);
    h = run_res(res1_, h, temb, g1);
    h = run_cross(ca1_, h, ctx, g1, pos1_);
    h = gather(h, upsample2x_index(g1, channels_), {g0.tokens(), channels_});
  } else {
    h = run_res(res1_, h, temb, g0);
    h = run_cross(ca1_, h, ctx, g0, pos_);
  }
  h = add(h, skip);
  h = run_res(res2_, h, temb, g0);
  h = run_cross(ca2_, h, ctx, g0, pos_);
  Tensor out = conv_out_(silu(norm_out_(h)), g0);
  return from_tokens(out, n, ls.channels, ls.height, ls.width);
}

}  // namespace mflow
