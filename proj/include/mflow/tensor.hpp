#pragma once

// Dense n-dimensional tensor with define-by-run reverse-mode autodiff.
//
// Every op returns a new tensor. When any input requires a gradient (and
// gradient recording is enabled) the output records its inputs and a backward
// rule; backward() walks that graph once in reverse topological order.
//
// Broadcasting is limited to three forms for binary ops:
//   * scalar against anything,
//   * suffix expansion: b.shape == a.shape[k:]            ([C] onto [M, C]),
//   * trailing expansion: b.shape == a.shape[:-1] + [1]   ([M, 1] onto [M, C]).
// Anything else is a ShapeError.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mflow {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> data);
  static Tensor scalar(double value);
  // Leaf that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<double> data);

  bool defined() const { return static_cast<bool>(node_); }
  explicit operator bool() const { return defined(); }

  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t extent(std::size_t axis) const { return shape().at(axis); }
  std::size_t numel() const;

  std::span<const double> data() const;
  // In-place access for leaves only (optimizer updates, initialization).
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // Copy of the values as a fresh leaf with no gradient tracking.
  Tensor detach() const;
  Tensor reshape(Shape shape) const;

  std::uint64_t node_id() const;
  // Identity comparison (same graph node).
  bool same(const Tensor& other) const { return node_ == other.node_; }

  // Internal constructor used by ops.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

// Elementwise and broadcasting arithmetic.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);   // DomainError on negative input
Tensor sqrt(const Tensor& a);  // DomainError on negative input
Tensor square(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
// max(a, floor); gradient passes only where a > floor.
Tensor clamp_min(const Tensor& a, double floor);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
// x [..., k] times w [k, n] plus b [n] on every row; returns [..., n].
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);
// Scaled dot-product attention of q [N, Lq, W] over k, v [N, Lk, W], split
// into `heads` equal column blocks; returns [N, Lq, W].
Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads);
// Batched [B,m,k] x [B,k,n], with optional transposition of either operand's
// last two axes.
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_a = false,
           bool transpose_b = false);
Tensor transpose(const Tensor& a);  // 2-D only
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);

// Structural.
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
// out[i] = index[i] >= 0 ? a.flat[index[i]] : 0, reshaped to `shape`.
Tensor gather(const Tensor& a, std::shared_ptr<const std::vector<std::int64_t>> index,
              Shape shape);

// Reductions.
Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::size_t axis, bool keepdim = false);

// Normalization / probability.
Tensor softmax(const Tensor& a, std::size_t axis);
Tensor log_softmax(const Tensor& a, std::size_t axis);
// Normalizes over the last axis with variance floor eps; no affine.
Tensor layer_norm(const Tensor& a, double eps = 1e-5);
// Rows of the last axis scaled to unit L2 norm.
Tensor l2_normalize(const Tensor& a, double eps = 1e-12);

struct BackwardReport {
  std::size_t rules_run = 0;
};

// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable from
// `loss`. Throws ShapeError when loss is not a scalar.
BackwardReport backward(const Tensor& loss);

// Central-difference gradient check of a scalar function at x.
// Returns max over the checked coordinates of
//   |analytic - numeric| / max(1, |numeric|).
// `coords` = 0 checks every coordinate; otherwise that many coordinates are
// drawn deterministically from `seed`.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double h = 1e-5, std::size_t coords = 0, std::uint64_t seed = 0);

}  // namespace mflow
