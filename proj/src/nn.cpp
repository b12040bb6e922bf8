#include "mflow/nn.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <tuple>

#include "mflow/errors.hpp"

namespace mflow {

const char* group_name(ParamGroup group) {
  switch (group) {
    case ParamGroup::kEncoder:
      return "encoder";
    case ParamGroup::kBackbone:
      return "backbone";
    case ParamGroup::kCrossAttention:
      return "cross_attention";
    case ParamGroup::kContext:
      return "context";
    case ParamGroup::kAdaptation:
      return "adaptation";
    case ParamGroup::kAlignment:
      return "alignment";
  }
  return "unknown";
}

Tensor ParamStore::add(const std::string& name, ParamGroup group, Shape shape,
                       std::vector<double> init) {
  std::string full = prefix_.empty() ? name : prefix_ + "." + name;
  if (find(full)) throw ParameterError("duplicate parameter name " + full);
  Tensor t = Tensor::parameter(std::move(shape), std::move(init));
  entries_.push_back({std::move(full), group, t});
  return t;
}

Tensor ParamStore::zeros(const std::string& name, ParamGroup group, Shape shape) {
  const std::size_t n = shape_numel(shape);
  return add(name, group, std::move(shape), std::vector<double>(n, 0.0));
}

Tensor ParamStore::ones(const std::string& name, ParamGroup group, Shape shape) {
  const std::size_t n = shape_numel(shape);
  return add(name, group, std::move(shape), std::vector<double>(n, 1.0));
}

Tensor ParamStore::uniform(const std::string& name, ParamGroup group, Shape shape,
                           std::size_t fan_in, Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> init(shape_numel(shape));
  for (auto& v : init) v = rng.uniform(-s, s);
  return add(name, group, std::move(shape), std::move(init));
}

const ParamEntry* ParamStore::find(const std::string& full_name) const {
  for (const auto& e : entries_) {
    if (e.name == full_name) return &e;
  }
  return nullptr;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

// ---------------------------------------------------------------------------

Linear::Linear(ParamStore& store, const std::string& name, ParamGroup group, std::size_t in_,
               std::size_t out_, Rng& rng, bool with_bias, bool zero_init)
    : in(in_), out(out_) {
  weight = zero_init ? store.zeros(name + ".w", group, {in, out})
                     : store.uniform(name + ".w", group, {in, out}, in, rng);
  if (with_bias) bias = store.zeros(name + ".b", group, {out});
}

Tensor Linear::operator()(const Tensor& x) const {
  if (x.dim() == 0 || x.shape().back() != in) {
    throw ShapeError("linear layer expects width " + std::to_string(in) + ", got " +
                     shape_str(x.shape()));
  }
  if (bias) return affine(x, weight, bias);
  Shape out_shape = x.shape();
  out_shape.back() = out;
  Tensor flat = x.dim() == 2 ? x : x.reshape({x.numel() / in, in});
  Tensor y = matmul(flat, weight);
  return y.dim() == out_shape.size() ? y : y.reshape(out_shape);
}

LayerNorm::LayerNorm(ParamStore& store, const std::string& name, ParamGroup group,
                     std::size_t width) {
  gain = store.ones(name + ".g", group, {width});
  shift = store.zeros(name + ".b", group, {width});
}

Tensor LayerNorm::operator()(const Tensor& x) const {
  return add(mul(layer_norm(x), gain), shift);
}

Conv3x3::Conv3x3(ParamStore& store, const std::string& name, ParamGroup group, std::size_t in_,
                 std::size_t out_, Rng& rng, std::size_t stride_, bool zero_init)
    : in(in_), out(out_), stride(stride_) {
  weight = zero_init ? store.zeros(name + ".w", group, {9 * in, out})
                     : store.uniform(name + ".w", group, {9 * in, out}, 9 * in, rng);
  bias = store.zeros(name + ".b", group, {out});
}

Conv3x3 Conv3x3::pointwise(ParamStore& store, const std::string& name, ParamGroup group,
                           std::size_t in, std::size_t out, Rng& rng, bool zero_init) {
  Conv3x3 c;
  c.in = in;
  c.out = out;
  c.taps = 1;
  c.weight = zero_init ? store.zeros(name + ".w", group, {in, out})
                       : store.uniform(name + ".w", group, {in, out}, in, rng);
  c.bias = store.zeros(name + ".b", group, {out});
  return c;
}

Tensor Conv3x3::operator()(const Tensor& x, const Geometry& g, Geometry* out_geometry) const {
  if (x.dim() != 2 || x.extent(0) != g.tokens() || x.extent(1) != in) {
    throw ShapeError("conv3x3 expects [" + std::to_string(g.tokens()) + "x" +
                     std::to_string(in) + "], got " + shape_str(x.shape()));
  }
  if (taps == 1) {
    if (out_geometry) *out_geometry = g;
    return affine(x, weight, bias);
  }
  const std::size_t ho = (g.height + stride - 1) / stride;
  const std::size_t wo = (g.width + stride - 1) / stride;
  Tensor cols = gather(x, im2col_index(g, in, stride), {g.batch * ho * wo, 9 * in});
  if (out_geometry) *out_geometry = {g.batch, ho, wo};
  return affine(cols, weight, bias);
}

Attention::Attention(ParamStore& store, const std::string& name, ParamGroup group,
                     std::size_t query_width, std::size_t context_width, std::size_t width_,
                     std::size_t heads_, Rng& rng, bool zero_output)
    : heads(heads_), width(width_) {
  if (heads == 0 || width % heads != 0) {
    throw ParameterError("attention width " + std::to_string(width) +
                         " not divisible by head count " + std::to_string(heads));
  }
  q = Linear(store, name + ".q", group, query_width, width, rng, false);
  k = Linear(store, name + ".k", group, context_width, width, rng, false);
  v = Linear(store, name + ".v", group, context_width, width, rng, false);
  o = Linear(store, name + ".o", group, width, query_width, rng, true, zero_output);
}

Tensor Attention::operator()(const Tensor& queries, const Tensor& context) const {
  if (queries.dim() != 3 || context.dim() != 3 || queries.extent(0) != context.extent(0)) {
    throw ShapeError("attention expects [N,Lq,C] and [N,Lk,D], got " +
                     shape_str(queries.shape()) + " and " + shape_str(context.shape()));
  }
  return o(multihead_attention(q(queries), k(context), v(context), heads));
}

// ---------------------------------------------------------------------------

namespace {

using IndexMap = std::shared_ptr<const std::vector<std::int64_t>>;
using Key = std::tuple<int, std::size_t, std::size_t, std::size_t, std::size_t, std::size_t>;

IndexMap cached(const Key& key, const std::function<std::vector<std::int64_t>()>& build) {
  static std::mutex mu;
  static std::map<Key, IndexMap> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto made = std::make_shared<const std::vector<std::int64_t>>(build());
  cache.emplace(key, made);
  return made;
}

}  // namespace

std::shared_ptr<const std::vector<std::int64_t>> im2col_index(const Geometry& g,
                                                              std::size_t channels,
                                                              std::size_t stride) {
  return cached({0, g.batch, g.height, g.width, channels, stride}, [&] {
    const std::size_t ho = (g.height + stride - 1) / stride;
    const std::size_t wo = (g.width + stride - 1) / stride;
    std::vector<std::int64_t> idx;
    idx.reserve(g.batch * ho * wo * 9 * channels);
    for (std::size_t b = 0; b < g.batch; ++b) {
      for (std::size_t y = 0; y < ho; ++y) {
        for (std::size_t x = 0; x < wo; ++x) {
          for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
              const auto sy = static_cast<std::int64_t>(y * stride) + dy;
              const auto sx = static_cast<std::int64_t>(x * stride) + dx;
              const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<std::int64_t>(g.height) &&
                                  sx < static_cast<std::int64_t>(g.width);
              const std::int64_t row =
                  static_cast<std::int64_t>((b * g.height) * g.width) +
                  sy * static_cast<std::int64_t>(g.width) + sx;
              for (std::size_t c = 0; c < channels; ++c) {
                idx.push_back(inside ? row * static_cast<std::int64_t>(channels) +
                                           static_cast<std::int64_t>(c)
                                     : -1);
              }
            }
          }
        }
      }
    }
    return idx;
  });
}

std::shared_ptr<const std::vector<std::int64_t>> upsample2x_index(const Geometry& g,
                                                                  std::size_t channels) {
  return cached({1, g.batch, g.height, g.width, channels, 2}, [&] {
    std::vector<std::int64_t> idx;
    idx.reserve(g.batch * g.height * g.width * 4 * channels);
    for (std::size_t b = 0; b < g.batch; ++b) {
      for (std::size_t y = 0; y < 2 * g.height; ++y) {
        for (std::size_t x = 0; x < 2 * g.width; ++x) {
          const std::size_t row = (b * g.height + y / 2) * g.width + x / 2;
          for (std::size_t c = 0; c < channels; ++c) {
            idx.push_back(static_cast<std::int64_t>(row * channels + c));
          }
        }
      }
    }
    return idx;
  });
}

Tensor grid_positions(std::size_t height, std::size_t width, std::size_t dim) {
  if (dim % 4 != 0) throw ParameterError("grid position width must be a multiple of 4");
  std::vector<double> out(height * width * dim, 0.0);
  if (height * width > 1) {
    const std::size_t pairs = dim / 4;
    const double extent = static_cast<double>(std::max(height, width));
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        double* row = out.data() + (y * width + x) * dim;
        for (std::size_t i = 0; i < pairs; ++i) {
          const double e = pairs > 1 ? static_cast<double>(i) / static_cast<double>(pairs - 1) : 0.0;
          const double w = std::numbers::pi * std::pow(extent, -e);
          row[2 * i] = std::sin(w * static_cast<double>(x));
          row[2 * i + 1] = std::cos(w * static_cast<double>(x));
          row[dim / 2 + 2 * i] = std::sin(w * static_cast<double>(y));
          row[dim / 2 + 2 * i + 1] = std::cos(w * static_cast<double>(y));
        }
      }
    }
  }
  return Tensor::from({height * width, dim}, std::move(out));
}

Tensor repeat_rows(const Tensor& x, std::size_t repeat) {
  if (x.dim() != 2) throw ShapeError("repeat_rows expects 2-D input, got " + shape_str(x.shape()));
  const std::size_t rows = x.extent(0);
  const std::size_t c = x.extent(1);
  auto idx = cached({2, rows, repeat, c, 0, 0}, [&] {
    std::vector<std::int64_t> out;
    out.reserve(rows * repeat * c);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t k = 0; k < repeat; ++k) {
        for (std::size_t j = 0; j < c; ++j) out.push_back(static_cast<std::int64_t>(r * c + j));
      }
    }
    return out;
  });
  return gather(x, idx, {rows * repeat, c});
}

Tensor to_tokens(const Tensor& nchw) {
  if (nchw.dim() != 4) throw ShapeError("to_tokens expects [N,C,H,W], got " + shape_str(nchw.shape()));
  const auto& s = nchw.shape();
  return permute(nchw, {0, 2, 3, 1}).reshape({s[0] * s[2] * s[3], s[1]});
}

Tensor from_tokens(const Tensor& tokens, std::size_t batch, std::size_t channels,
                   std::size_t height, std::size_t width) {
  return permute(tokens.reshape({batch, height, width, channels}), {0, 3, 1, 2});
}

}  // namespace mflow
