#include "mflow/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "mflow/errors.hpp"

namespace mflow {

namespace {

Tensor identity(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return Tensor::from({n, n}, std::move(v));
}

}  // namespace

Tensor diffusion_loss(const EpsModel& model, const Tensor& z0, const std::vector<std::size_t>& t,
                      const Tensor& eps, const NoiseSchedule& schedule, const Tensor* context) {
  if (z0.shape() != eps.shape()) {
    throw ShapeError("noise " + shape_str(eps.shape()) + " does not match latent " +
                     shape_str(z0.shape()));
  }
  Tensor z_t = forward_diffuse(z0, t, eps, schedule);
  Tensor eps_hat = model.predict_eps(z_t, t, context);
  return mean(square(sub(eps, eps_hat)));
}

Tensor Temperature::value() const {
  return exp(log_tau);
}

Tensor infonce_central(const ContrastiveBatch& batch) {
  const Tensor& za = batch.zA;
  const Tensor& zb = batch.zB;
  if (za.dim() != 2 || za.shape() != zb.shape()) {
    throw ShapeError("contrastive views must share shape [N,d], got " + shape_str(za.shape()) +
                     " and " + shape_str(zb.shape()));
  }
  if (!batch.tau || batch.tau.numel() != 1 || !(batch.tau.item() > 0.0)) {
    throw ParameterError("temperature must be a positive scalar");
  }
  const std::size_t n = za.extent(0);
  Tensor logits = div(matmul(za, transpose(zb)), batch.tau.reshape({}));
  Tensor eye = identity(n);
  const double inv_n = 1.0 / static_cast<double>(n);
  Tensor a_to_b = scale(sum(mul(log_softmax(logits, 1), eye)), -inv_n);
  Tensor b_to_a = scale(sum(mul(log_softmax(logits, 0), eye)), -inv_n);
  return add(a_to_b, b_to_a);
}

Tensor infonce_central(const Tensor& zA, const Tensor& zB, double tau) {
  if (!(tau > 0.0)) throw ParameterError("temperature must be positive");
  return infonce_central(ContrastiveBatch{zA, zB, Tensor::scalar(tau)});
}

Tensor vi_normalize(const Tensor& z, ViDiagnostics* diag) {
  if (z.dim() != 2) throw ShapeError("vi_normalize expects [K,d], got " + shape_str(z.shape()));
  const std::size_t k = z.extent(0), d = z.extent(1);
  if (k < 2) throw ParameterError("vi_normalize needs at least two rows");
  constexpr double kFloor = 1e-8;
  Tensor centered = sub(z, mean(z, 0));
  Tensor var = mean(square(centered), 0);
  if (diag) {
    diag->degenerate_columns = 0;
    for (std::size_t j = 0; j < d; ++j) {
      if (var[j] < kFloor) ++diag->degenerate_columns;
    }
  }
  Tensor denom = sqrt(scale(clamp_min(var, kFloor), static_cast<double>(k)));
  return div(centered, denom);
}

Tensor barlow_from_correlation(const Tensor& c, double lambda1) {
  if (c.dim() != 2 || c.extent(0) != c.extent(1)) {
    throw ShapeError("cross-correlation must be square, got " + shape_str(c.shape()));
  }
  const std::size_t d = c.extent(0);
  Tensor eye = identity(d);
  Tensor diag = sum(mul(c, eye), 1);
  Tensor on = mean(square(sub(Tensor::full({d}, 1.0), diag)));
  if (d < 2) return on;
  std::vector<double> off_mask(d * d, 1.0);
  for (std::size_t i = 0; i < d; ++i) off_mask[i * d + i] = 0.0;
  Tensor off = sum(square(mul(c, Tensor::from({d, d}, std::move(off_mask)))));
  return add(on, scale(off, lambda1 / static_cast<double>(d * (d - 1))));
}

Tensor vi_barlow(const ViewPair& pair, ViDiagnostics* diag) {
  if (pair.z1.shape() != pair.z2.shape()) {
    throw ShapeError("views differ in shape: " + shape_str(pair.z1.shape()) + " vs " +
                     shape_str(pair.z2.shape()));
  }
  ViDiagnostics d1, d2;
  Tensor n1 = vi_normalize(pair.z1, &d1);
  Tensor n2 = vi_normalize(pair.z2, &d2);
  if (diag) diag->degenerate_columns = d1.degenerate_columns + d2.degenerate_columns;
  return barlow_from_correlation(matmul(transpose(n1), n2), pair.lambda1);
}

Tensor cross_guided_loss(const EpsModel& model_a, const Tensor& z0_a,
                         const std::vector<std::size_t>& t, const Tensor& eps,
                         const NoiseSchedule& schedule, const Tensor& z_t_b,
                         const GuidedAdaptation& f_b, const ContextEncoder& v_b) {
  Tensor context = encode_context(v_b, z_t_b, f_b);
  return diffusion_loss(model_a, z0_a, t, eps, schedule, &context);
}

Sample augment(const Sample& x, Rng& rng) {
  if (const auto* seq = std::get_if<TokenSeq>(&x)) {
    TokenSeq out = *seq;
    for (int& id : out.ids) {
      if (rng.uniform() < 0.1) id = vocab::kPad;
    }
    return out;
  }
  const Image& img = std::get<Image>(x);
  const bool flip = rng.uniform() < 0.5;
  const int dx = static_cast<int>(rng.below(3)) - 1;
  const int dy = static_cast<int>(rng.below(3)) - 1;
  const int h = static_cast<int>(img.height), w = static_cast<int>(img.width);
  Image out{img.height, img.width, std::vector<double>(img.pixels.size())};
  for (int y = 0; y < h; ++y) {
    for (int xx = 0; xx < w; ++xx) {
      int sx = std::clamp(xx - dx, 0, w - 1);
      const int sy = std::clamp(y - dy, 0, h - 1);
      if (flip) sx = w - 1 - sx;
      const double v = img.pixels[static_cast<std::size_t>(sy * w + sx)] + 0.05 * rng.normal();
      out.pixels[static_cast<std::size_t>(y * w + xx)] = std::clamp(v, 0.0, 1.0);
    }
  }
  return out;
}

}  // namespace mflow
