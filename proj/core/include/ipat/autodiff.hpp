#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// Ops are recorded on a Tape in execution order; Tape::backward replays the
// recorded closures in reverse. Ops whose inputs do not require gradients
// (or run while the tape has gradients disabled) are not recorded.
//
// Shape table ("..." = any leading dims, flattened to rows):
//   add/sub/mul(a, b)            a: S, b: S or a suffix of S        -> S
//   scale(a, c)                  a: S                               -> S
//   matmul(a, b)                 a: [..., K], b: [K, N]             -> [..., N]
//   transpose(a)                 a: [..., M, N]                     -> [..., N, M]
//   reshape(a, s)                numel(s) == numel(a)               -> s
//   concat(xs, axis)             equal dims except `axis`           -> summed along axis
//   slice(a, axis, b, e)         0 <= b <= e <= dim(axis)           -> dim(axis) = e - b
//   embedding_lookup(w, ids, s)  w: [V, D], numel(s) == ids.size()  -> [s..., D]
//   conv1d(x, w, bias, s, p)     x: [B, T, Cin], w: [K, Cin, Cout]  -> [B, T', Cout]
//   conv1d_depthwise(x, w, bias) x: [B, T, C], w: [K, C], K odd     -> [B, T, C]
//   relu/swish/sigmoid/tanh      S                                  -> S
//   softmax/log_softmax(a, axis) S                                  -> S
//   layer_norm(x, g, b)          x: [..., D], g, b: [D]             -> [..., D]
//   glu(x)                       x: [..., 2D]                       -> [..., D]
//   dropout(x, p, key, train)    S                                  -> S
//   length_mask(x, lens)         x: [B, T, ...], lens.size() == B   -> same
//   scaled_dot_attention         q: [B, Tq, D], k, v: [B, Tk, D]    -> [B, Tq, D]
//   sum/mean(a)                  S                                  -> [] (scalar)

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace ipat::ad {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Storage aligned to Eigen's widest packet. Vectorized kernels peel a
/// scalar prefix up to the first aligned element, so with plain malloc
/// alignment the summation order (and the rounding) would depend on where
/// the heap put a buffer.
template <typename T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

template <typename T>
struct TensorImpl {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;  // empty until first needed
  bool requires_grad = false;
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  /// Negative axes count from the end.
  std::int64_t dim(int axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->value.size()); }

  std::span<T> values() { return impl_->value; }
  std::span<const T> values() const { return impl_->value; }
  T* data() { return impl_->value.data(); }
  const T* data() const { return impl_->value.data(); }
  T item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  // Tensor is a handle: copies share storage, so gradient access is
  // available through const handles too.
  void set_requires_grad(bool on) const { impl_->requires_grad = on; }
  bool has_grad() const { return !impl_->grad.empty(); }
  /// Allocates a zero gradient on first use.
  std::span<T> grad() const;
  T* grad_data() const { return grad().data(); }
  void zero_grad() const;

  /// Deep copy of the values; the copy has no gradient and does not require one.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  /// Registers `output` as produced by an op; `fn` adds output.grad's
  /// contribution into the inputs' gradients.
  void record(Tensor<T>& output, BackwardFn fn);

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded closure once, in
  /// reverse order. Gradients of intermediates are reset first, so calling
  /// backward twice accumulates twice into the leaves.
  void backward(Tensor<T>& loss);
  void clear();
  std::size_t size() const { return nodes_.size(); }

  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool check_finite() const { return check_finite_; }
  void set_check_finite(bool on) { check_finite_ = on; }

  /// Throws NonFinite if `t` holds NaN/Inf and checking is on.
  void check(const Tensor<T>& t, const char* op) const;

 private:
  struct Node {
    Tensor<T> output;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
#ifdef NDEBUG
  bool check_finite_ = false;
#else
  bool check_finite_ = true;
#endif
};

struct AttentionMask {
  /// Valid key count per batch entry; empty means all keys valid.
  std::vector<int> key_lengths;
  /// Query i (aligned to the end of the key axis) sees keys j <= i + Tk - Tq.
  bool causal = false;
};

template <typename T> Tensor<T> add(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(Tape<T>& tp, const Tensor<T>& a, T c);
template <typename T> Tensor<T> matmul(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(Tape<T>& tp, const Tensor<T>& a);
template <typename T> Tensor<T> reshape(Tape<T>& tp, const Tensor<T>& a, Shape shape);
template <typename T>
Tensor<T> concat(Tape<T>& tp, std::span<const Tensor<T>> xs, int axis);
template <typename T>
Tensor<T> slice(Tape<T>& tp, const Tensor<T>& a, int axis, std::int64_t begin, std::int64_t end);
template <typename T>
Tensor<T> embedding_lookup(Tape<T>& tp, const Tensor<T>& table, std::span<const int> ids,
                           Shape index_shape);
template <typename T>
Tensor<T> conv1d(Tape<T>& tp, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 int stride, int padding);
template <typename T>
Tensor<T> conv1d_depthwise(Tape<T>& tp, const Tensor<T>& x, const Tensor<T>& w,
                           const Tensor<T>& bias);
template <typename T> Tensor<T> relu(Tape<T>& tp, const Tensor<T>& a);
template <typename T> Tensor<T> swish(Tape<T>& tp, const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(Tape<T>& tp, const Tensor<T>& a);
template <typename T> Tensor<T> tanh(Tape<T>& tp, const Tensor<T>& a);
template <typename T> Tensor<T> softmax(Tape<T>& tp, const Tensor<T>& a, int axis);
template <typename T> Tensor<T> log_softmax(Tape<T>& tp, const Tensor<T>& a, int axis);
template <typename T>
Tensor<T> layer_norm(Tape<T>& tp, const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps = T(1e-5));
template <typename T> Tensor<T> glu(Tape<T>& tp, const Tensor<T>& x);
/// Inverted dropout; the mask is a pure function of (key, element index).
template <typename T>
Tensor<T> dropout(Tape<T>& tp, const Tensor<T>& x, double p, std::uint64_t key, bool training);
template <typename T>
Tensor<T> length_mask(Tape<T>& tp, const Tensor<T>& x, std::span<const int> lengths);
/// Multi-head scaled dot-product attention. With `rel_key` ([2R+1, D/H]) the
/// logits gain q_i . rel_key[clip(j - i, -R, R) + R] (relative positions).
template <typename T>
Tensor<T> scaled_dot_attention(Tape<T>& tp, const Tensor<T>& q, const Tensor<T>& k,
                               const Tensor<T>& v, int heads, const AttentionMask& mask,
                               const Tensor<T>& rel_key = {});
template <typename T> Tensor<T> sum(Tape<T>& tp, const Tensor<T>& a);
template <typename T> Tensor<T> mean(Tape<T>& tp, const Tensor<T>& a);

}  // namespace ipat::ad
