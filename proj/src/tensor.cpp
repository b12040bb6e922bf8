#include "mflow/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#ifdef __GLIBC__
#include <malloc.h>
#endif
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "mflow/errors.hpp"
#include "mflow/rng.hpp"

namespace mflow {

namespace detail {

using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

struct Node {
  Shape shape;
  Buffer data;
  Buffer grad;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
  std::uint64_t id = 0;
};

}  // namespace detail

using detail::Buffer;
using detail::Node;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using ConstStrided = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using MutStrided = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

#ifdef __GLIBC__
// Keep large activation buffers on the heap instead of mmap/munmap per op.
const bool g_malloc_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  return true;
}();
#endif

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool t_grad_enabled = true;

std::shared_ptr<Node> new_node(Shape shape, Buffer data) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return n;
}

Buffer& grad_buffer(Node& n) {
  if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0);
  return n.grad;
}

// Builds the op output and, when needed, wires it into the graph.
Tensor make_result(Shape shape, Buffer data,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> rule) {
  auto out = new_node(std::move(shape), std::move(data));
  if (t_grad_enabled) {
    bool any = false;
    for (const Tensor* t : inputs) any = any || t->requires_grad();
    if (any) {
      out->requires_grad = true;
      out->leaf = false;
      for (const Tensor* t : inputs) out->inputs.push_back(t->node());
      out->backward = std::move(rule);
    }
  }
  return Tensor(std::move(out));
}

Tensor make_result_n(Shape shape, Buffer data, const std::vector<Tensor>& inputs,
                     std::function<void(Node&)> rule) {
  auto out = new_node(std::move(shape), std::move(data));
  if (t_grad_enabled) {
    bool any = false;
    for (const Tensor& t : inputs) any = any || t.requires_grad();
    if (any) {
      out->requires_grad = true;
      out->leaf = false;
      for (const Tensor& t : inputs) out->inputs.push_back(t.node());
      out->backward = std::move(rule);
    }
  }
  return Tensor(std::move(out));
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined tensor");
}

// ---------------------------------------------------------------------------
// Broadcasting

enum class Bcast { kSame, kScalar, kSuffix, kTrailing };

struct BcastPlan {
  Shape out;
  Bcast ka = Bcast::kSame;
  Bcast kb = Bcast::kSame;
  std::size_t pa = 1;
  std::size_t pb = 1;
};

inline std::size_t bmap(Bcast k, std::size_t i, std::size_t p) {
  switch (k) {
    case Bcast::kSame:
      return i;
    case Bcast::kScalar:
      return 0;
    case Bcast::kSuffix:
      return i % p;
    case Bcast::kTrailing:
      return i / p;
  }
  return i;
}

// How `small` expands onto `big`; false if not an allowed broadcast.
bool expansion(const Shape& big, const Shape& small, Bcast& kind, std::size_t& param) {
  if (big == small) {
    kind = Bcast::kSame;
    return true;
  }
  if (shape_numel(small) == 1 && small.size() <= 1) {
    kind = Bcast::kScalar;
    return true;
  }
  if (small.size() < big.size() && !small.empty() &&
      std::equal(small.begin(), small.end(), big.end() - small.size())) {
    kind = Bcast::kSuffix;
    param = shape_numel(small);
    return true;
  }
  if (small.size() == big.size() && !big.empty() && small.back() == 1 &&
      std::equal(small.begin(), small.end() - 1, big.begin())) {
    kind = Bcast::kTrailing;
    param = big.back();
    return true;
  }
  return false;
}

BcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  BcastPlan p;
  if (shape_numel(a) >= shape_numel(b) && expansion(a, b, p.kb, p.pb)) {
    p.out = a;
    return p;
  }
  if (expansion(b, a, p.ka, p.pa)) {
    p.out = b;
    return p;
  }
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                   shape_str(b));
}

template <typename Fwd, typename DA, typename DB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, DA da, DB db) {
  require_defined(a, name);
  require_defined(b, name);
  BcastPlan p = plan_broadcast(a.shape(), b.shape(), name);
  const std::size_t n = shape_numel(p.out);
  Buffer out(n);
  auto ad = a.data();
  auto bd = b.data();
  if (p.ka == Bcast::kSame && p.kb == Bcast::kSame) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[i], bd[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      out[i] = fwd(ad[bmap(p.ka, i, p.pa)], bd[bmap(p.kb, i, p.pb)]);
    }
  }
  return make_result(p.out, std::move(out), {&a, &b}, [p, n, da, db](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    const auto& g = self.grad;
    if (na.requires_grad) {
      auto& ga = grad_buffer(na);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ia = bmap(p.ka, i, p.pa);
        const std::size_t ib = bmap(p.kb, i, p.pb);
        ga[ia] += g[i] * da(na.data[ia], nb.data[ib], self.data[i]);
      }
    }
    if (nb.requires_grad) {
      auto& gb = grad_buffer(nb);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ia = bmap(p.ka, i, p.pa);
        const std::size_t ib = bmap(p.kb, i, p.pb);
        gb[ib] += g[i] * db(na.data[ia], nb.data[ib], self.data[i]);
      }
    }
  });
}

template <typename Fwd, typename D>
Tensor unary_op(const Tensor& a, const char* name, Fwd fwd, D d) {
  require_defined(a, name);
  auto ad = a.data();
  Buffer out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = fwd(ad[i]);
  return make_result(a.shape(), std::move(out), {&a}, [d](Node& self) {
    Node& na = *self.inputs[0];
    auto& ga = grad_buffer(na);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      ga[i] += self.grad[i] * d(na.data[i], self.data[i]);
    }
  });
}

// [outer, n, inner] factorization around `axis`.
struct AxisView {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisView axis_view(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(s));
  }
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// Shapes and tensor basics

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<std::size_t>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive: " + shape_str(shape));
  }
  const std::size_t n = shape_numel(shape);
  return Tensor(new_node(std::move(shape), Buffer(n, value)));
}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive: " + shape_str(shape));
  }
  return Tensor(new_node(std::move(shape), Buffer(data.begin(), data.end())));
}

Tensor Tensor::scalar(double value) { return Tensor(new_node({}, {value})); }

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
  Tensor t = from(std::move(shape), std::move(data));
  t.node_->requires_grad = true;
  return t;
}

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return node_->shape;
}

std::size_t Tensor::numel() const { return defined() ? node_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  require_defined(*this, "data");
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  require_defined(*this, "mutable_data");
  if (!node_->leaf) throw ShapeError("mutable_data is only available on leaf tensors");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return defined() && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  require_defined(*this, "set_requires_grad");
  if (!node_->leaf) throw ShapeError("requires_grad can only be toggled on leaves");
  node_->requires_grad = on;
  if (!on) node_->grad.clear();
}

bool Tensor::is_leaf() const { return defined() && node_->leaf; }

bool Tensor::has_grad() const { return defined() && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  require_defined(*this, "grad");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (defined()) node_->grad.clear();
}

Tensor Tensor::detach() const {
  require_defined(*this, "detach");
  return Tensor(new_node(node_->shape, node_->data));
}

Tensor Tensor::reshape(Shape shape) const {
  require_defined(*this, "reshape");
  if (shape_numel(shape) != numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(node_->shape) + " as " +
                     shape_str(shape));
  }
  return make_result(std::move(shape), node_->data, {this}, [](Node& self) {
    Node& in = *self.inputs[0];
    if (in.grad.empty()) {
      in.grad = std::move(self.grad);
      return;
    }
    for (std::size_t i = 0; i < in.grad.size(); ++i) in.grad[i] += self.grad[i];
  });
}

std::uint64_t Tensor::node_id() const { return defined() ? node_->id : 0; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double out) { return -out / y; });
}

Tensor neg(const Tensor& a) {
  return unary_op(
      a, "neg", [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary_op(
      a, "scale", [factor](double x) { return x * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary_op(
      a, "add_scalar", [value](double x) { return x + value; },
      [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double v : a.data()) {
    if (v < 0.0) throw DomainError("log of negative value " + std::to_string(v));
  }
  return unary_op(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  for (double v : a.data()) {
    if (v < 0.0) throw DomainError("sqrt of negative value " + std::to_string(v));
  }
  return unary_op(
      a, "sqrt", [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& a) {
  return unary_op(
      a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a, "sigmoid", [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& a) {
  return unary_op(
      a, "silu", [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Tensor clamp_min(const Tensor& a, double floor) {
  return unary_op(
      a, "clamp_min", [floor](double x) { return x > floor ? x : floor; },
      [floor](double x, double) { return x > floor ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.dim() != 2 || b.dim() != 2 || a.extent(1) != b.extent(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.extent(0));
  const auto k = static_cast<Eigen::Index>(a.extent(1));
  const auto n = static_cast<Eigen::Index>(b.extent(1));
  Buffer out(static_cast<std::size_t>(m * n));
  MutMap(out.data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  return make_result({a.extent(0), b.extent(1)}, std::move(out), {&a, &b},
                     [m, k, n](Node& self) {
                       Node& na = *self.inputs[0];
                       Node& nb = *self.inputs[1];
                       ConstMap g(self.grad.data(), m, n);
                       if (na.requires_grad) {
                         MutMap(grad_buffer(na).data(), m, k).noalias() +=
                             g * ConstMap(nb.data.data(), k, n).transpose();
                       }
                       if (nb.requires_grad) {
                         MutMap(grad_buffer(nb).data(), k, n).noalias() +=
                             ConstMap(na.data.data(), m, k).transpose() * g;
                       }
                     });
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_defined(x, "affine");
  require_defined(w, "affine");
  require_defined(b, "affine");
  if (x.dim() == 0 || w.dim() != 2 || x.shape().back() != w.extent(0) || b.dim() != 1 ||
      b.extent(0) != w.extent(1)) {
    throw ShapeError("affine: incompatible shapes " + shape_str(x.shape()) + ", " +
                     shape_str(w.shape()) + " and " + shape_str(b.shape()));
  }
  const auto k = static_cast<Eigen::Index>(w.extent(0));
  const auto n = static_cast<Eigen::Index>(w.extent(1));
  const auto m = static_cast<Eigen::Index>(x.numel()) / k;
  Buffer out(static_cast<std::size_t>(m * n));
  MutMap y(out.data(), m, n);
  y.noalias() = ConstMap(x.data().data(), m, k) * ConstMap(w.data().data(), k, n);
  y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data().data(), n);
  Shape shape = x.shape();
  shape.back() = w.extent(1);
  return make_result(std::move(shape), std::move(out), {&x, &w, &b}, [m, k, n](Node& self) {
    Node& nx = *self.inputs[0];
    Node& nw = *self.inputs[1];
    Node& nb = *self.inputs[2];
    ConstMap g(self.grad.data(), m, n);
    if (nx.requires_grad) {
      MutMap(grad_buffer(nx).data(), m, k).noalias() += g * ConstMap(nw.data.data(), k, n).transpose();
    }
    if (nw.requires_grad) {
      MutMap(grad_buffer(nw).data(), k, n).noalias() += ConstMap(nx.data.data(), m, k).transpose() * g;
    }
    if (nb.requires_grad) {
      Eigen::Map<Eigen::RowVectorXd>(grad_buffer(nb).data(), n) += g.colwise().sum();
    }
  });
}

Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  require_defined(q, "attention");
  require_defined(k, "attention");
  require_defined(v, "attention");
  if (q.dim() != 3 || k.dim() != 3 || v.shape() != k.shape() || q.extent(0) != k.extent(0) ||
      q.extent(2) != k.extent(2)) {
    throw ShapeError("attention: incompatible shapes " + shape_str(q.shape()) + ", " +
                     shape_str(k.shape()) + " and " + shape_str(v.shape()));
  }
  const std::size_t width = q.extent(2);
  if (heads == 0 || width % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(width) + " not divisible into " +
                     std::to_string(heads) + " heads");
  }
  const std::size_t batch = q.extent(0);
  const auto lq = static_cast<Eigen::Index>(q.extent(1));
  const auto lk = static_cast<Eigen::Index>(k.extent(1));
  const auto dh = static_cast<Eigen::Index>(width / heads);
  const auto w = static_cast<Eigen::Index>(width);
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  auto probs = std::make_shared<Buffer>(batch * heads * static_cast<std::size_t>(lq * lk));
  Buffer out(q.numel());
  const double* qd = q.data().data();
  const double* kd = k.data().data();
  const double* vd = v.data().data();
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t col = h * static_cast<std::size_t>(dh);
      ConstStrided Q(qd + n * lq * w + col, lq, dh, Eigen::OuterStride<>(w));
      ConstStrided K(kd + n * lk * w + col, lk, dh, Eigen::OuterStride<>(w));
      ConstStrided V(vd + n * lk * w + col, lk, dh, Eigen::OuterStride<>(w));
      MutMap P(probs->data() + (n * heads + h) * lq * lk, lq, lk);
      P.noalias() = (Q * K.transpose()) * sc;
      for (Eigen::Index r = 0; r < lq; ++r) {
        auto row = P.row(r);
        row = (row.array() - row.maxCoeff()).exp();
        row /= row.sum();
      }
      MutStrided(out.data() + n * lq * w + col, lq, dh, Eigen::OuterStride<>(w)).noalias() = P * V;
    }
  }
  return make_result(
      q.shape(), std::move(out), {&q, &k, &v},
      [probs, batch, heads, lq, lk, dh, w, sc](Node& self) {
        Node& nq = *self.inputs[0];
        Node& nk = *self.inputs[1];
        Node& nv = *self.inputs[2];
        double* gq = nq.requires_grad ? grad_buffer(nq).data() : nullptr;
        double* gk = nk.requires_grad ? grad_buffer(nk).data() : nullptr;
        double* gv = nv.requires_grad ? grad_buffer(nv).data() : nullptr;
        RowMat dp(lq, lk);
        for (std::size_t n = 0; n < batch; ++n) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t col = h * static_cast<std::size_t>(dh);
            const std::size_t qo = n * lq * w + col, ko = n * lk * w + col;
            ConstMap P(probs->data() + (n * heads + h) * lq * lk, lq, lk);
            ConstStrided dO(self.grad.data() + qo, lq, dh, Eigen::OuterStride<>(w));
            if (gv) {
              MutStrided(gv + ko, lk, dh, Eigen::OuterStride<>(w)).noalias() += P.transpose() * dO;
            }
            if (!gq && !gk) continue;
            ConstStrided V(nv.data.data() + ko, lk, dh, Eigen::OuterStride<>(w));
            dp.noalias() = dO * V.transpose();
            for (Eigen::Index r = 0; r < lq; ++r) {
              const double dot = dp.row(r).dot(P.row(r));
              dp.row(r) = (P.row(r).array() * (dp.row(r).array() - dot)) * sc;
            }
            if (gq) {
              ConstStrided K(nk.data.data() + ko, lk, dh, Eigen::OuterStride<>(w));
              MutStrided(gq + qo, lq, dh, Eigen::OuterStride<>(w)).noalias() += dp * K;
            }
            if (gk) {
              ConstStrided Q(nq.data.data() + qo, lq, dh, Eigen::OuterStride<>(w));
              MutStrided(gk + ko, lk, dh, Eigen::OuterStride<>(w)).noalias() += dp.transpose() * Q;
            }
          }
        }
      });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  require_defined(a, "bmm");
  require_defined(b, "bmm");
  if (a.dim() != 3 || b.dim() != 3 || a.extent(0) != b.extent(0)) {
    throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const auto batch = a.extent(0);
  const auto ar = static_cast<Eigen::Index>(a.extent(1));
  const auto ac = static_cast<Eigen::Index>(a.extent(2));
  const auto br = static_cast<Eigen::Index>(b.extent(1));
  const auto bc = static_cast<Eigen::Index>(b.extent(2));
  const Eigen::Index m = ta ? ac : ar;
  const Eigen::Index k = ta ? ar : ac;
  const Eigen::Index k2 = tb ? bc : br;
  const Eigen::Index n = tb ? br : bc;
  if (k != k2) {
    throw ShapeError("bmm: inner dimensions differ for " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  Buffer out(batch * static_cast<std::size_t>(m * n));
  for (std::size_t i = 0; i < batch; ++i) {
    ConstMap A(a.data().data() + i * ar * ac, ar, ac);
    ConstMap B(b.data().data() + i * br * bc, br, bc);
    MutMap C(out.data() + i * m * n, m, n);
    if (!ta && !tb) C.noalias() = A * B;
    else if (ta && !tb) C.noalias() = A.transpose() * B;
    else if (!ta && tb) C.noalias() = A * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  }
  return make_result(
      {batch, static_cast<std::size_t>(m), static_cast<std::size_t>(n)}, std::move(out),
      {&a, &b}, [=](Node& self) {
        Node& na = *self.inputs[0];
        Node& nb = *self.inputs[1];
        for (std::size_t i = 0; i < batch; ++i) {
          ConstMap G(self.grad.data() + i * m * n, m, n);
          ConstMap A(na.data.data() + i * ar * ac, ar, ac);
          ConstMap B(nb.data.data() + i * br * bc, br, bc);
          // C = op(A) op(B); d op(A) = G op(B)^T, d op(B) = op(A)^T G.
          if (na.requires_grad) {
            MutMap GA(grad_buffer(na).data() + i * ar * ac, ar, ac);
            if (!ta && !tb) GA.noalias() += G * B.transpose();
            else if (!ta && tb) GA.noalias() += G * B;
            else if (ta && !tb) GA.noalias() += B * G.transpose();
            else GA.noalias() += B.transpose() * G.transpose();
          }
          if (nb.requires_grad) {
            MutMap GB(grad_buffer(nb).data() + i * br * bc, br, bc);
            if (!ta && !tb) GB.noalias() += A.transpose() * G;
            else if (ta && !tb) GB.noalias() += A * G;
            else if (!ta && tb) GB.noalias() += G.transpose() * A;
            else GB.noalias() += G.transpose() * A.transpose();
          }
        }
      });
}

Tensor transpose(const Tensor& a) {
  require_defined(a, "transpose");
  if (a.dim() != 2) throw ShapeError("transpose expects a 2-D tensor, got " + shape_str(a.shape()));
  return permute(a, {1, 0});
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  require_defined(a, "permute");
  const Shape& s = a.shape();
  const std::size_t d = s.size();
  if (axes.size() != d) throw ShapeError("permute: axis count mismatch for " + shape_str(s));
  std::vector<bool> seen(d, false);
  Shape out_shape(d);
  for (std::size_t i = 0; i < d; ++i) {
    if (axes[i] >= d || seen[axes[i]]) throw ShapeError("permute: invalid axis list");
    seen[axes[i]] = true;
    out_shape[i] = s[axes[i]];
  }
  std::vector<std::size_t> in_stride(d, 1);
  for (std::size_t i = d; i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
  // src_index[j] for each output position j.
  const std::size_t n = a.numel();
  auto src = std::make_shared<std::vector<std::int64_t>>(n);
  std::vector<std::size_t> counter(d, 0);
  std::size_t offset = 0;
  for (std::size_t j = 0; j < n; ++j) {
    (*src)[j] = static_cast<std::int64_t>(offset);
    for (std::size_t ax = d; ax-- > 0;) {
      ++counter[ax];
      offset += in_stride[axes[ax]];
      if (counter[ax] < out_shape[ax]) break;
      offset -= in_stride[axes[ax]] * out_shape[ax];
      counter[ax] = 0;
    }
  }
  return gather(a, std::move(src), std::move(out_shape));
}

// ---------------------------------------------------------------------------
// Structural

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  for (const auto& p : parts) require_defined(p, "concat");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range for " + shape_str(s0));
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == s0[i];
    if (!ok) {
      throw ShapeError("concat: incompatible shapes " + shape_str(s0) + " and " + shape_str(s));
    }
    out_shape[axis] += s[axis];
  }
  AxisView v = axis_view(out_shape, axis, "concat");
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.extent(axis) * v.inner);
  const std::size_t row = v.n * v.inner;
  Buffer out(v.outer * row);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto src = parts[k].data();
    for (std::size_t o = 0; o < v.outer; ++o) {
      std::copy_n(src.data() + o * widths[k], widths[k], out.data() + o * row + off);
    }
    off += widths[k];
  }
  return make_result_n(std::move(out_shape), std::move(out), parts,
                       [widths, row, outer = v.outer](Node& self) {
                         std::size_t off = 0;
                         for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                           Node& in = *self.inputs[k];
                           if (in.requires_grad) {
                             auto& g = grad_buffer(in);
                             for (std::size_t o = 0; o < outer; ++o) {
                               const double* src = self.grad.data() + o * row + off;
                               double* dst = g.data() + o * widths[k];
                               for (std::size_t i = 0; i < widths[k]; ++i) dst[i] += src[i];
                             }
                           }
                           off += widths[k];
                         }
                       });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  require_defined(a, "slice");
  AxisView v = axis_view(a.shape(), axis, "slice");
  if (begin >= end || end > v.n) {
    throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of range for axis " + std::to_string(axis) + " of " +
                     shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  const std::size_t width = (end - begin) * v.inner;
  const std::size_t row = v.n * v.inner;
  const std::size_t start = begin * v.inner;
  Buffer out(v.outer * width);
  auto src = a.data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    std::copy_n(src.data() + o * row + start, width, out.data() + o * width);
  }
  return make_result(std::move(out_shape), std::move(out), {&a},
                     [outer = v.outer, width, row, start](Node& self) {
                       auto& g = grad_buffer(*self.inputs[0]);
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t i = 0; i < width; ++i) {
                           g[o * row + start + i] += self.grad[o * width + i];
                         }
                       }
                     });
}

Tensor gather(const Tensor& a, std::shared_ptr<const std::vector<std::int64_t>> index,
              Shape shape) {
  require_defined(a, "gather");
  if (!index || shape_numel(shape) != index->size()) {
    throw ShapeError("gather: index length does not match output shape " + shape_str(shape));
  }
  auto src = a.data();
  const auto limit = static_cast<std::int64_t>(src.size());
  Buffer out(index->size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::int64_t j = (*index)[i];
    if (j >= limit) throw ShapeError("gather: index out of range");
    out[i] = j >= 0 ? src[static_cast<std::size_t>(j)] : 0.0;
  }
  return make_result(std::move(shape), std::move(out), {&a}, [index](Node& self) {
    auto& g = grad_buffer(*self.inputs[0]);
    const auto& idx = *index;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] >= 0) g[static_cast<std::size_t>(idx[i])] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result({}, {s}, {&a}, [](Node& self) {
    auto& g = grad_buffer(*self.inputs[0]);
    const double go = self.grad[0];
    for (auto& v : g) v += go;
  });
}

Tensor sum(const Tensor& a, std::size_t axis, bool keepdim) {
  require_defined(a, "sum");
  AxisView v = axis_view(a.shape(), axis, "sum");
  Shape out_shape = a.shape();
  if (keepdim) out_shape[axis] = 1;
  else out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Buffer out(v.outer * v.inner, 0.0);
  auto src = a.data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t k = 0; k < v.n; ++k) {
      const double* row = src.data() + (o * v.n + k) * v.inner;
      double* dst = out.data() + o * v.inner;
      for (std::size_t i = 0; i < v.inner; ++i) dst[i] += row[i];
    }
  }
  return make_result(std::move(out_shape), std::move(out), {&a}, [v](Node& self) {
    auto& g = grad_buffer(*self.inputs[0]);
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t k = 0; k < v.n; ++k) {
        double* row = g.data() + (o * v.n + k) * v.inner;
        const double* src = self.grad.data() + o * v.inner;
        for (std::size_t i = 0; i < v.inner; ++i) row[i] += src[i];
      }
    }
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor mean(const Tensor& a, std::size_t axis, bool keepdim) {
  AxisView v = axis_view(a.shape(), axis, "mean");
  return scale(sum(a, axis, keepdim), 1.0 / static_cast<double>(v.n));
}

// ---------------------------------------------------------------------------
// Normalization

Tensor softmax(const Tensor& a, std::size_t axis) {
  require_defined(a, "softmax");
  AxisView v = axis_view(a.shape(), axis, "softmax");
  auto src = a.data();
  Buffer out(src.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.n * v.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < v.n; ++k) mx = std::max(mx, src[base + k * v.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < v.n; ++k) {
        const double e = std::exp(src[base + k * v.inner] - mx);
        out[base + k * v.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < v.n; ++k) out[base + k * v.inner] /= z;
    }
  }
  return make_result(a.shape(), std::move(out), {&a}, [v](Node& self) {
    auto& g = grad_buffer(*self.inputs[0]);
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t base = o * v.n * v.inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < v.n; ++k) {
          dot += self.grad[base + k * v.inner] * self.data[base + k * v.inner];
        }
        for (std::size_t k = 0; k < v.n; ++k) {
          const std::size_t j = base + k * v.inner;
          g[j] += self.data[j] * (self.grad[j] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& a, std::size_t axis) {
  require_defined(a, "log_softmax");
  AxisView v = axis_view(a.shape(), axis, "log_softmax");
  auto src = a.data();
  Buffer out(src.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.n * v.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < v.n; ++k) mx = std::max(mx, src[base + k * v.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < v.n; ++k) z += std::exp(src[base + k * v.inner] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t k = 0; k < v.n; ++k) {
        out[base + k * v.inner] = src[base + k * v.inner] - lse;
      }
    }
  }
  return make_result(a.shape(), std::move(out), {&a}, [v](Node& self) {
    auto& g = grad_buffer(*self.inputs[0]);
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t base = o * v.n * v.inner + i;
        double total = 0.0;
        for (std::size_t k = 0; k < v.n; ++k) total += self.grad[base + k * v.inner];
        for (std::size_t k = 0; k < v.n; ++k) {
          const std::size_t j = base + k * v.inner;
          g[j] += self.grad[j] - std::exp(self.data[j]) * total;
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& a, double eps) {
  require_defined(a, "layer_norm");
  if (a.dim() == 0) throw ShapeError("layer_norm of a scalar");
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.numel() / n;
  auto src = a.data();
  Buffer out(src.size());
  Buffer inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = src.data() + r * n;
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += x[i];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (x[i] - mu) * (x[i] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = (x[i] - mu) * is;
  }
  return make_result(a.shape(), std::move(out), {&a},
                     [n, rows, inv_std = std::move(inv_std)](Node& self) {
                       auto& g = grad_buffer(*self.inputs[0]);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* gy = self.grad.data() + r * n;
                         const double* y = self.data.data() + r * n;
                         double mg = 0.0, mgy = 0.0;
                         for (std::size_t i = 0; i < n; ++i) {
                           mg += gy[i];
                           mgy += gy[i] * y[i];
                         }
                         mg /= static_cast<double>(n);
                         mgy /= static_cast<double>(n);
                         for (std::size_t i = 0; i < n; ++i) {
                           g[r * n + i] += inv_std[r] * (gy[i] - mg - y[i] * mgy);
                         }
                       }
                     });
}

Tensor l2_normalize(const Tensor& a, double eps) {
  require_defined(a, "l2_normalize");
  if (a.dim() == 0) throw ShapeError("l2_normalize of a scalar");
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.numel() / n;
  auto src = a.data();
  Buffer out(src.size());
  Buffer norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) ss += src[r * n + i] * src[r * n + i];
    norms[r] = std::sqrt(ss + eps);
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = src[r * n + i] / norms[r];
  }
  return make_result(a.shape(), std::move(out), {&a},
                     [n, rows, norms = std::move(norms)](Node& self) {
                       auto& g = grad_buffer(*self.inputs[0]);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* gy = self.grad.data() + r * n;
                         const double* y = self.data.data() + r * n;
                         double dot = 0.0;
                         for (std::size_t i = 0; i < n; ++i) dot += gy[i] * y[i];
                         for (std::size_t i = 0; i < n; ++i) {
                           g[r * n + i] += (gy[i] - y[i] * dot) / norms[r];
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Backward

BackwardReport backward(const Tensor& loss) {
  require_defined(loss, "backward");
  if (loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  BackwardReport report;
  Node* root = loss.node().get();
  if (!root->requires_grad) return report;

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && !child->leaf && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  if (root->leaf) {
    grad_buffer(*root)[0] += 1.0;
    return report;
  }
  for (Node* n : order) n->grad.clear();
  root->grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->grad.empty()) grad_buffer(*n);
    n->backward(*n);
    ++report.rules_run;
    Buffer().swap(n->grad);
  }
  return report;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x_in, double h,
                  std::size_t coords, std::uint64_t seed) {
  Tensor x = x_in;
  if (!x.is_leaf()) throw ShapeError("grad_check requires a leaf tensor");
  const bool had_grad_flag = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();
  Tensor loss = f(x);
  backward(loss);
  std::vector<double> analytic(x.numel(), 0.0);
  if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());

  std::vector<std::size_t> picks;
  if (coords == 0 || coords >= x.numel()) {
    picks.resize(x.numel());
    std::iota(picks.begin(), picks.end(), 0);
  } else {
    Rng rng(seed);
    for (std::size_t i = 0; i < coords; ++i) picks.push_back(rng.below(x.numel()));
  }

  double worst = 0.0;
  auto values = x.mutable_data();
  NoGradGuard no_grad;
  for (std::size_t c : picks) {
    const double orig = values[c];
    values[c] = orig + h;
    const double fp = f(x).item();
    values[c] = orig - h;
    const double fm = f(x).item();
    values[c] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double err = std::abs(analytic[c] - numeric) / std::max(1.0, std::abs(numeric));
    worst = std::max(worst, err);
  }
  x.zero_grad();
  x.set_requires_grad(had_grad_flag);
  return worst;
}

}  // namespace mflow
