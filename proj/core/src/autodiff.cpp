#include "ipat/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "ipat/error.hpp"
#include "ipat/rng.hpp"

namespace ipat::ad {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapM = Eigen::Map<const RowMat<T>>;
using Stride = Eigen::OuterStride<>;
template <typename T>
using SMap = Eigen::Map<RowMat<T>, 0, Stride>;
template <typename T>
using CSMap = Eigen::Map<const RowMat<T>, 0, Stride>;

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
  fail(ErrorCode::ShapeMismatch, std::string(op) + ": " + detail);
}

int normalize_axis(int axis, int rank, const char* op) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    shape_error(op, "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return a;
}

template <typename T>
bool tracks(const Tape<T>& tp, std::initializer_list<const Tensor<T>*> inputs) {
  if (!tp.grad_enabled()) return false;
  for (const auto* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
bool wants(const Tensor<T>& t) {
  return t.defined() && t.requires_grad();
}

// Is `b` a trailing suffix of `a`?
bool is_suffix(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()));
}

template <typename T>
void check_broadcast(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (!is_suffix(a.shape(), b.shape())) {
    shape_error(op, shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename T>
Tensor<T> finish(Tape<T>& tp, Tensor<T> out, const char* op) {
  tp.check(out, op);
  return out;
}

}  // namespace

std::int64_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---- Tensor ---------------------------------------------------------------

template <typename T>
Tensor<T>::Tensor(Shape shape, bool requires_grad) : impl_(std::make_shared<TensorImpl<T>>()) {
  for (auto d : shape) {
    if (d < 0) shape_error("tensor", "negative dimension in " + shape_str(shape));
  }
  impl_->value.assign(static_cast<std::size_t>(ad::numel(shape)), T(0));
  impl_->shape = std::move(shape);
  impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : impl_(std::make_shared<TensorImpl<T>>()) {
  if (static_cast<std::int64_t>(values.size()) != ad::numel(shape)) {
    shape_error("tensor", std::to_string(values.size()) + " values for shape " + shape_str(shape));
  }
  impl_->shape = std::move(shape);
  impl_->value.assign(values.begin(), values.end());
  impl_->requires_grad = requires_grad;
}

template <typename T>
std::int64_t Tensor<T>::dim(int axis) const {
  return impl_->shape[static_cast<std::size_t>(normalize_axis(axis, rank(), "dim"))];
}

template <typename T>
T Tensor<T>::item() const {
  if (impl_->value.size() != 1) {
    fail(ErrorCode::NonScalarLoss, "item() on tensor of shape " + shape_str(impl_->shape));
  }
  return impl_->value[0];
}

template <typename T>
std::span<T> Tensor<T>::grad() const {
  if (impl_->grad.size() != impl_->value.size()) impl_->grad.assign(impl_->value.size(), T(0));
  return impl_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() const {
  impl_->grad.assign(impl_->value.size(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor<T> out(impl_->shape);
  out.impl_->value = impl_->value;
  return out;
}

// ---- Tape -----------------------------------------------------------------

template <typename T>
void Tape<T>::record(Tensor<T>& output, BackwardFn fn) {
  output.set_requires_grad(true);
  nodes_.push_back(Node{output, std::move(fn)});
}

template <typename T>
void Tape<T>::backward(Tensor<T>& loss) {
  if (loss.numel() != 1) {
    fail(ErrorCode::NonScalarLoss, "backward needs a scalar loss, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  for (auto& n : nodes_) n.output.zero_grad();
  loss.grad()[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
}

template <typename T>
void Tape<T>::clear() {
  nodes_.clear();
}

template <typename T>
void Tape<T>::check(const Tensor<T>& t, const char* op) const {
  if (!check_finite_) return;
  for (T v : t.values()) {
    if (!std::isfinite(v)) fail(ErrorCode::NonFinite, std::string("non-finite value produced by ") + op);
  }
}

// ---- elementwise binary -----------------------------------------------------

template <typename T>
Tensor<T> add(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
  check_broadcast(a, b, "add");
  const std::int64_t inner = b.numel();
  const std::int64_t n = a.numel();
  std::vector<T> out(static_cast<std::size_t>(n));
  const T* pa = a.data();
  const T* pb = b.data();
  for (std::int64_t i = 0; i < n; ++i) out[i] = pa[i] + pb[inner ? i % inner : 0];
  Tensor<T> y(a.shape(), std::move(out));
  if (tracks(tp, {&a, &b})) {
    tp.record(y, [a, b, y, inner, n]() mutable {
      const T* g = y.grad().data();
      if (wants(a)) {
        T* ga = a.grad_data();
        for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (wants(b)) {
        T* gb = b.grad_data();
        for (std::int64_t i = 0; i < n; ++i) gb[i % inner] += g[i];
      }
    });
  }
  return finish(tp, y, "add");
}

template <typename T>
Tensor<T> sub(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
  check_broadcast(a, b, "sub");
  const std::int64_t inner = b.numel();
  const std::int64_t n = a.numel();
  std::vector<T> out(static_cast<std::size_t>(n));
  const T* pa = a.data();
  const T* pb = b.data();
  for (std::int64_t i = 0; i < n; ++i) out[i] = pa[i] - pb[inner ? i % inner : 0];
  Tensor<T> y(a.shape(), std::move(out));
  if (tracks(tp, {&a, &b})) {
    tp.record(y, [a, b, y, inner, n]() mutable {
      const T* g = y.grad().data();
      if (wants(a)) {
        T* ga = a.grad_data();
        for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (wants(b)) {
        T* gb = b.grad_data();
        for (std::int64_t i = 0; i < n; ++i) gb[i % inner] -= g[i];
      }
    });
  }
  return finish(tp, y, "sub");
}

template <typename T>
Tensor<T> mul(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
  check_broadcast(a, b, "mul");
  const std::int64_t inner = b.numel();
  const std::int64_t n = a.numel();
  std::vector<T> out(static_cast<std::size_t>(n));
  const T* pa = a.data();
  const T* pb = b.data();
  for (std::int64_t i = 0; i < n; ++i) out[i] = pa[i] * pb[inner ? i % inner : 0];
  Tensor<T> y(a.shape(), std::move(out));
  if (tracks(tp, {&a, &b})) {
    tp.record(y, [a, b, y, inner, n]() mutable {
      const T* g = y.grad().data();
      const T* pa = a.data();
      const T* pb = b.data();
      if (wants(a)) {
        T* ga = a.grad_data();
        for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * pb[i % inner];
      }
      if (wants(b)) {
        T* gb = b.grad_data();
        for (std::int64_t i = 0; i < n; ++i) gb[i % inner] += g[i] * pa[i];
      }
    });
  }
  return finish(tp, y, "mul");
}

template <typename T>
Tensor<T> scale(Tape<T>& tp, const Tensor<T>& a, T c) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= c;
  Tensor<T> y(a.shape(), std::move(out));
  if (tracks(tp, {&a})) {
    tp.record(y, [a, y, c]() mutable {
      const auto g = y.grad();
      T* ga = a.grad_data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    });
  }
  return finish(tp, y, "scale");
}

// ---- linear algebra and layout ----------------------------------------------

template <typename T>
Tensor<T> matmul(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 1 || b.rank() != 2 || a.dim(-1) != b.dim(0)) {
    shape_error("matmul", shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::int64_t K = b.dim(0);
  const std::int64_t N = b.dim(1);
  const std::int64_t M = K ? a.numel() / K : 0;
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  shape.push_back(N);
  Tensor<T> y(shape);
  if (M > 0 && N > 0) {
    MapM<T>(y.data(), M, N).noalias() = CMapM<T>(a.data(), M, K) * CMapM<T>(b.data(), K, N);
  }
  if (tracks(tp, {&a, &b})) {
    tp.record(y, [a, b, y, M, K, N]() mutable {
      if (M == 0 || N == 0 || K == 0) return;
      CMapM<T> g(y.grad().data(), M, N);
      if (wants(a)) {
        MapM<T>(a.grad_data(), M, K).noalias() += g * CMapM<T>(b.data(), K, N).transpose();
      }
      if (wants(b)) {
        MapM<T>(b.grad_data(), K, N).noalias() += CMapM<T>(a.data(), M, K).transpose() * g;
      }
    });
  }
  return finish(tp, y, "matmul");
}

template <typename T>
Tensor<T> transpose(Tape<T>& tp, const Tensor<T>& a) {
  if (a.rank() < 2) shape_error("transpose", "rank " + std::to_string(a.rank()) + " < 2");
  const std::int64_t M = a.dim(-2);
  const std::int64_t N = a.dim(-1);
  const std::int64_t batch = (M * N != 0) ? a.numel() / (M * N) : 0;
  Shape shape = a.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  Tensor<T> y(shape);
  for (std::int64_t b = 0; b < batch; ++b) {
    MapM<T>(y.data() + b * M * N, N, M) = CMapM<T>(a.data() + b * M * N, M, N).transpose();
  }
  if (tracks(tp, {&a})) {
    tp.record(y, [a, y, M, N, batch]() mutable {
      const T* g = y.grad().data();
      T* ga = a.grad_data();
      for (std::int64_t b = 0; b < batch; ++b) {
        MapM<T>(ga + b * M * N, M, N) += CMapM<T>(g + b * M * N, N, M).transpose();
      }
    });
  }
  return finish(tp, y, "transpose");
}

template <typename T>
Tensor<T> reshape(Tape<T>& tp, const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    shape_error("reshape", shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  Tensor<T> y(std::move(shape), std::vector<T>(a.values().begin(), a.values().end()));
  if (tracks(tp, {&a})) {
    tp.record(y, [a, y]() mutable {
      const auto g = y.grad();
      T* ga = a.grad_data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return finish(tp, y, "reshape");
}

template <typename T>
Tensor<T> concat(Tape<T>& tp, std::span<const Tensor<T>> xs, int axis) {
  if (xs.empty()) shape_error("concat", "no inputs");
  const int rank = xs[0].rank();
  const int ax = normalize_axis(axis, rank, "concat");
  Shape shape = xs[0].shape();
  std::vector<std::int64_t> sizes;
  shape[ax] = 0;
  for (const auto& x : xs) {
    if (x.rank() != rank) shape_error("concat", "rank mismatch");
    for (int d = 0; d < rank; ++d) {
      if (d != ax && x.shape()[d] != xs[0].shape()[d]) {
        shape_error("concat", shape_str(x.shape()) + " vs " + shape_str(xs[0].shape()));
      }
    }
    sizes.push_back(x.shape()[ax]);
    shape[ax] += x.shape()[ax];
  }
  std::int64_t outer = 1;
  std::int64_t inner = 1;
  for (int d = 0; d < ax; ++d) outer *= shape[d];
  for (int d = ax + 1; d < rank; ++d) inner *= shape[d];
  const std::int64_t total = shape[ax];
  Tensor<T> y(shape);
  std::int64_t offset = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const T* src = xs[i].data();
    const std::int64_t block = sizes[i] * inner;
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy(src + o * block, src + (o + 1) * block, y.data() + (o * total + offset) * inner);
    }
    offset += sizes[i];
  }
  bool any = false;
  for (const auto& x : xs) any = any || wants(x);
  if (tp.grad_enabled() && any) {
    std::vector<Tensor<T>> inputs(xs.begin(), xs.end());
    tp.record(y, [inputs, sizes, y, outer, inner, total]() mutable {
      const T* g = y.grad().data();
      std::int64_t offset = 0;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        const std::int64_t block = sizes[i] * inner;
        if (wants(inputs[i])) {
          T* gx = inputs[i].grad_data();
          for (std::int64_t o = 0; o < outer; ++o) {
            const T* src = g + (o * total + offset) * inner;
            for (std::int64_t j = 0; j < block; ++j) gx[o * block + j] += src[j];
          }
        }
        offset += sizes[i];
      }
    });
  }
  return finish(tp, y, "concat");
}

template <typename T>
Tensor<T> slice(Tape<T>& tp, const Tensor<T>& a, int axis, std::int64_t begin, std::int64_t end) {
  const int ax = normalize_axis(axis, a.rank(), "slice");
  const std::int64_t n = a.shape()[ax];
  if (begin < 0 || end < begin || end > n) {
    shape_error("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) +
                             ") on axis of size " + std::to_string(n));
  }
  Shape shape = a.shape();
  shape[ax] = end - begin;
  std::int64_t outer = 1;
  std::int64_t inner = 1;
  for (int d = 0; d < ax; ++d) outer *= shape[d];
  for (int d = ax + 1; d < a.rank(); ++d) inner *= shape[d];
  const std::int64_t block = (end - begin) * inner;
  Tensor<T> y(shape);
  for (std::int64_t o = 0; o < outer; ++o) {
    const T* src = a.data() + (o * n + begin) * inner;
    std::copy(src, src + block, y.data() + o * block);
  }
  if (tracks(tp, {&a})) {
    tp.record(y, [a, y, outer, inner, n, begin, block]() mutable {
      const T* g = y.grad().data();
      T* ga = a.grad_data();
      for (std::int64_t o = 0; o < outer; ++o) {
        T* dst = ga + (o * n + begin) * inner;
        for (std::int64_t j = 0; j < block; ++j) dst[j] += g[o * block + j];
      }
    });
  }
  return finish(tp, y, "slice");
}

template <typename T>
Tensor<T> embedding_lookup(Tape<T>& tp, const Tensor<T>& table, std::span<const int> ids,
                           Shape index_shape) {
  if (table.rank() != 2) shape_error("embedding_lookup", "table must be rank 2");
  if (numel(index_shape) != static_cast<std::int64_t>(ids.size())) {
    shape_error("embedding_lookup", std::to_string(ids.size()) + " ids for index shape " +
                                        shape_str(index_shape));
  }
  const std::int64_t V = table.dim(0);
  const std::int64_t D = table.dim(1);
  Shape shape = std::move(index_shape);
  shape.push_back(D);
  Tensor<T> y(shape);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= V) {
      fail(ErrorCode::IdOutOfRange, "embedding id " + std::to_string(ids[i]) + " outside [0," +
                                        std::to_string(V) + ")");
    }
    std::copy(table.data() + ids[i] * D, table.data() + (ids[i] + 1) * D, y.data() + i * D);
  }
  if (tracks(tp, {&table})) {
    std::vector<int> saved(ids.begin(), ids.end());
    tp.record(y, [table, y, saved, D]() mutable {
      const T* g = y.grad().data();
      T* gt = table.grad_data();
      for (std::size_t i = 0; i < saved.size(); ++i) {
        for (std::int64_t d = 0; d < D; ++d) gt[saved[i] * D + d] += g[i * D + d];
      }
    });
  }
  return finish(tp, y, "embedding_lookup");
}

template <typename T>
Tensor<T> conv1d(Tape<T>& tp, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 int stride, int padding) {
  if (x.rank() != 3 || w.rank() != 3 || w.dim(1) != x.dim(2)) {
    shape_error("conv1d", shape_str(x.shape()) + " with kernel " + shape_str(w.shape()));
  }
  if (stride < 1 || padding < 0) shape_error("conv1d", "stride must be >= 1 and padding >= 0");
  const std::int64_t B = x.dim(0), Tin = x.dim(1), Cin = x.dim(2);
  const std::int64_t K = w.dim(0), Cout = w.dim(2);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Cout)) {
    shape_error("conv1d", "bias " + shape_str(bias.shape()) + " for " + std::to_string(Cout) + " outputs");
  }
  const std::int64_t span = Tin + 2 * padding - K;
  if (span < 0) shape_error("conv1d", "input of length " + std::to_string(Tin) + " shorter than kernel");
  const std::int64_t Tout = span / stride + 1;
  const std::int64_t cols_w = K * Cin;
  // im2col: one row per output frame.
  Buffer<T> cols(static_cast<std::size_t>(B * Tout * cols_w), T(0));
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t t = 0; t < Tout; ++t) {
      T* row = cols.data() + (b * Tout + t) * cols_w;
      for (std::int64_t k = 0; k < K; ++k) {
        const std::int64_t src = t * stride - padding + k;
        if (src < 0 || src >= Tin) continue;
        std::copy(x.data() + (b * Tin + src) * Cin, x.data() + (b * Tin + src + 1) * Cin,
                  row + k * Cin);
      }
    }
  }
  Tensor<T> y(Shape{B, Tout, Cout});
  const std::int64_t rows = B * Tout;
  MapM<T> Y(y.data(), rows, Cout);
  Y.noalias() = CMapM<T>(cols.data(), rows, cols_w) * CMapM<T>(w.data(), cols_w, Cout);
  if (bias.defined()) {
    Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data(), Cout);
  }
  if (tracks(tp, {&x, &w, &bias})) {
    tp.record(y, [x, w, bias, y, cols = std::move(cols), B, Tin, Cin, K, Cout, Tout, stride,
                  padding, rows, cols_w]() mutable {
      CMapM<T> G(y.grad().data(), rows, Cout);
      if (wants(w)) {
        MapM<T>(w.grad_data(), cols_w, Cout).noalias() +=
            CMapM<T>(cols.data(), rows, cols_w).transpose() * G;
      }
      if (wants(bias)) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.grad_data(), Cout) += G.colwise().sum();
      }
      if (wants(x)) {
        RowMat<T> dcols = G * CMapM<T>(w.data(), cols_w, Cout).transpose();
        T* gx = x.grad_data();
        for (std::int64_t b = 0; b < B; ++b) {
          for (std::int64_t t = 0; t < Tout; ++t) {
            const T* row = dcols.data() + (b * Tout + t) * cols_w;
            for (std::int64_t k = 0; k < K; ++k) {
              const std::int64_t src = t * stride - padding + k;
              if (src < 0 || src >= Tin) continue;
              T* dst = gx + (b * Tin + src) * Cin;
              for (std::int64_t c = 0; c < Cin; ++c) dst[c] += row[k * Cin + c];
            }
          }
        }
      }
    });
  }
  return finish(tp, y, "conv1d");
}

template <typename T>
Tensor<T> conv1d_depthwise(Tape<T>& tp, const Tensor<T>& x, const Tensor<T>& w,
                           const Tensor<T>& bias) {
  if (x.rank() != 3 || w.rank() != 2 || w.dim(1) != x.dim(2) || w.dim(0) % 2 == 0) {
    shape_error("conv1d_depthwise", shape_str(x.shape()) + " with kernel " + shape_str(w.shape()));
  }
  const std::int64_t B = x.dim(0), Tn = x.dim(1), C = x.dim(2), K = w.dim(0);
  const std::int64_t half = K / 2;
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != C)) {
    shape_error("conv1d_depthwise", "bias " + shape_str(bias.shape()));
  }
  Tensor<T> y(x.shape());
  const T* px = x.data();
  const T* pw = w.data();
  T* py = y.data();
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t t = 0; t < Tn; ++t) {
      T* out = py + (b * Tn + t) * C;
      if (bias.defined()) std::copy(bias.data(), bias.data() + C, out);
      for (std::int64_t k = 0; k < K; ++k) {
        const std::int64_t src = t + k - half;
        if (src < 0 || src >= Tn) continue;
        const T* in = px + (b * Tn + src) * C;
        const T* wk = pw + k * C;
        for (std::int64_t c = 0; c < C; ++c) out[c] += wk[c] * in[c];
      }
    }
  }
  if (tracks(tp, {&x, &w, &bias})) {
    tp.record(y, [x, w, bias, y, B, Tn, C, K, half]() mutable {
      const T* g = y.grad().data();
      const T* px = x.data();
      const T* pw = w.data();
      T* gx = wants(x) ? x.grad_data() : nullptr;
      T* gw = wants(w) ? w.grad_data() : nullptr;
      T* gb = wants(bias) ? bias.grad_data() : nullptr;
      for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t t = 0; t < Tn; ++t) {
          const T* go = g + (b * Tn + t) * C;
          if (gb) {
            for (std::int64_t c = 0; c < C; ++c) gb[c] += go[c];
          }
          for (std::int64_t k = 0; k < K; ++k) {
            const std::int64_t src = t + k - half;
            if (src < 0 || src >= Tn) continue;
            const std::int64_t off = (b * Tn + src) * C;
            if (gw) {
              for (std::int64_t c = 0; c < C; ++c) gw[k * C + c] += go[c] * px[off + c];
            }
            if (gx) {
              for (std::int64_t c = 0; c < C; ++c) gx[off + c] += go[c] * pw[k * C + c];
            }
          }
        }
      }
    });
  }
  return finish(tp, y, "conv1d_depthwise");
}

// ---- activations --------------------------------------------------------------

template <typename T>
Tensor<T> relu(Tape<T>& tp, const Tensor<T>& a) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  Tensor<T> y(a.shape(), std::move(out));
  if (tracks(tp, {&a})) {
    tp.record(y, [a, y]() mutable {
      const auto g = y.grad();
      const T* pa = a.data();
      T* ga = a.grad_data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (pa[i] > T(0)) ga[i] += g[i];
      }
    });
  }
  return finish(tp, y, "relu");
}

template <typename T>
Tensor<T> sigmoid(Tape<T>& tp, const Tensor<T>& a) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v = T(1) / (T(1) + std::exp(-v));
  Tensor<T> y(a.shape(), std::move(out));
  if (tracks(tp, {&a})) {
    tp.record(y, [a, y]() mutable {
      const auto g = y.grad();
      const T* py = y.data();
      T* ga = a.grad_data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * py[i] * (T(1) - py[i]);
    });
  }
  return finish(tp, y, "sigmoid");
}

template <typename T>
Tensor<T> swish(Tape<T>& tp, const Tensor<T>& a) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v = v / (T(1) + std::exp(-v));
  Tensor<T> y(a.shape(), std::move(out));
  if (tracks(tp, {&a})) {
    tp.record(y, [a, y]() mutable {
      const auto g = y.grad();
      const T* pa = a.data();
      T* ga = a.grad_data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T s = T(1) / (T(1) + std::exp(-pa[i]));
        ga[i] += g[i] * s * (T(1) + pa[i] * (T(1) - s));
      }
    });
  }
  return finish(tp, y, "swish");
}

template <typename T>
Tensor<T> tanh(Tape<T>& tp, const Tensor<T>& a) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v = std::tanh(v);
  Tensor<T> y(a.shape(), std::move(out));
  if (tracks(tp, {&a})) {
    tp.record(y, [a, y]() mutable {
      const auto g = y.grad();
      const T* py = y.data();
      T* ga = a.grad_data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (T(1) - py[i] * py[i]);
    });
  }
  return finish(tp, y, "tanh");
}

namespace {

struct AxisSplit {
  std::int64_t outer = 1;
  std::int64_t n = 1;
  std::int64_t inner = 1;
};

template <typename T>
AxisSplit split_axis(const Tensor<T>& a, int axis, const char* op) {
  const int ax = normalize_axis(axis, a.rank(), op);
  AxisSplit s;
  s.n = a.shape()[ax];
  for (int d = 0; d < ax; ++d) s.outer *= a.shape()[d];
  for (int d = ax + 1; d < a.rank(); ++d) s.inner *= a.shape()[d];
  return s;
}

// Writes log-softmax (log_out) or softmax along the split axis.
template <typename T>
void softmax_forward(const T* x, T* y, const AxisSplit& s, bool log_out) {
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t i = 0; i < s.inner; ++i) {
      const T* px = x + o * s.n * s.inner + i;
      T* py = y + o * s.n * s.inner + i;
      T m = -std::numeric_limits<T>::infinity();
      for (std::int64_t j = 0; j < s.n; ++j) m = std::max(m, px[j * s.inner]);
      T z = 0;
      for (std::int64_t j = 0; j < s.n; ++j) z += std::exp(px[j * s.inner] - m);
      const T lz = m + std::log(z);
      for (std::int64_t j = 0; j < s.n; ++j) {
        py[j * s.inner] = log_out ? px[j * s.inner] - lz : std::exp(px[j * s.inner] - lz);
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> softmax(Tape<T>& tp, const Tensor<T>& a, int axis) {
  const AxisSplit s = split_axis(a, axis, "softmax");
  Tensor<T> y(a.shape());
  softmax_forward(a.data(), y.data(), s, false);
  if (tracks(tp, {&a})) {
    tp.record(y, [a, y, s]() mutable {
      const T* g = y.grad().data();
      const T* py = y.data();
      T* ga = a.grad_data();
      for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t i = 0; i < s.inner; ++i) {
          const std::int64_t base = o * s.n * s.inner + i;
          T dot = 0;
          for (std::int64_t j = 0; j < s.n; ++j) dot += g[base + j * s.inner] * py[base + j * s.inner];
          for (std::int64_t j = 0; j < s.n; ++j) {
            const std::int64_t k = base + j * s.inner;
            ga[k] += py[k] * (g[k] - dot);
          }
        }
      }
    });
  }
  return finish(tp, y, "softmax");
}

template <typename T>
Tensor<T> log_softmax(Tape<T>& tp, const Tensor<T>& a, int axis) {
  const AxisSplit s = split_axis(a, axis, "log_softmax");
  Tensor<T> y(a.shape());
  softmax_forward(a.data(), y.data(), s, true);
  if (tracks(tp, {&a})) {
    tp.record(y, [a, y, s]() mutable {
      const T* g = y.grad().data();
      const T* py = y.data();
      T* ga = a.grad_data();
      for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t i = 0; i < s.inner; ++i) {
          const std::int64_t base = o * s.n * s.inner + i;
          T total = 0;
          for (std::int64_t j = 0; j < s.n; ++j) total += g[base + j * s.inner];
          for (std::int64_t j = 0; j < s.n; ++j) {
            const std::int64_t k = base + j * s.inner;
            ga[k] += g[k] - std::exp(py[k]) * total;
          }
        }
      }
    });
  }
  return finish(tp, y, "log_softmax");
}

template <typename T>
Tensor<T> layer_norm(Tape<T>& tp, const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps) {
  if (x.rank() < 1) shape_error("layer_norm", "scalar input");
  const std::int64_t D = x.dim(-1);
  if (gain.numel() != D || bias.numel() != D) {
    shape_error("layer_norm", "gain/bias size does not match " + shape_str(x.shape()));
  }
  const std::int64_t rows = D ? x.numel() / D : 0;
  Tensor<T> y(x.shape());
  std::vector<T> xhat(static_cast<std::size_t>(x.numel()));
  std::vector<T> inv_std(static_cast<std::size_t>(rows));
  const T* px = x.data();
  const T* pg = gain.data();
  const T* pb = bias.data();
  T* py = y.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = px + r * D;
    T mu = 0;
    for (std::int64_t d = 0; d < D; ++d) mu += row[d];
    mu /= static_cast<T>(D);
    T var = 0;
    for (std::int64_t d = 0; d < D; ++d) var += (row[d] - mu) * (row[d] - mu);
    var /= static_cast<T>(D);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::int64_t d = 0; d < D; ++d) {
      const T h = (row[d] - mu) * is;
      xhat[r * D + d] = h;
      py[r * D + d] = pg[d] * h + pb[d];
    }
  }
  if (tracks(tp, {&x, &gain, &bias})) {
    tp.record(y, [x, gain, bias, y, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
                  D]() mutable {
      const T* g = y.grad().data();
      const T* pg = gain.data();
      T* gx = wants(x) ? x.grad_data() : nullptr;
      T* gg = wants(gain) ? gain.grad_data() : nullptr;
      T* gb = wants(bias) ? bias.grad_data() : nullptr;
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* gr = g + r * D;
        const T* hr = xhat.data() + r * D;
        if (gg || gb) {
          for (std::int64_t d = 0; d < D; ++d) {
            if (gg) gg[d] += gr[d] * hr[d];
            if (gb) gb[d] += gr[d];
          }
        }
        if (gx) {
          T mean_dh = 0;
          T mean_dh_h = 0;
          for (std::int64_t d = 0; d < D; ++d) {
            const T dh = gr[d] * pg[d];
            mean_dh += dh;
            mean_dh_h += dh * hr[d];
          }
          mean_dh /= static_cast<T>(D);
          mean_dh_h /= static_cast<T>(D);
          for (std::int64_t d = 0; d < D; ++d) {
            const T dh = gr[d] * pg[d];
            gx[r * D + d] += inv_std[r] * (dh - mean_dh - hr[d] * mean_dh_h);
          }
        }
      }
    });
  }
  return finish(tp, y, "layer_norm");
}

template <typename T>
Tensor<T> glu(Tape<T>& tp, const Tensor<T>& x) {
  if (x.rank() < 1 || x.dim(-1) % 2 != 0) shape_error("glu", "last dimension must be even");
  const std::int64_t D2 = x.dim(-1);
  const std::int64_t D = D2 / 2;
  const std::int64_t rows = D2 ? x.numel() / D2 : 0;
  Shape shape = x.shape();
  shape.back() = D;
  Tensor<T> y(shape);
  std::vector<T> gate(static_cast<std::size_t>(rows * D));
  const T* px = x.data();
  T* py = y.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t d = 0; d < D; ++d) {
      const T s = T(1) / (T(1) + std::exp(-px[r * D2 + D + d]));
      gate[r * D + d] = s;
      py[r * D + d] = px[r * D2 + d] * s;
    }
  }
  if (tracks(tp, {&x})) {
    tp.record(y, [x, y, gate = std::move(gate), rows, D, D2]() mutable {
      const T* g = y.grad().data();
      const T* px = x.data();
      T* gx = x.grad_data();
      for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t d = 0; d < D; ++d) {
          const T s = gate[r * D + d];
          const T go = g[r * D + d];
          gx[r * D2 + d] += go * s;
          gx[r * D2 + D + d] += go * px[r * D2 + d] * s * (T(1) - s);
        }
      }
    });
  }
  return finish(tp, y, "glu");
}

template <typename T>
Tensor<T> dropout(Tape<T>& tp, const Tensor<T>& x, double p, std::uint64_t key, bool training) {
  if (p < 0.0 || p >= 1.0) fail(ErrorCode::BadConfig, "dropout probability must be in [0, 1)");
  if (!training || p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  const std::int64_t n = x.numel();
  std::vector<T> mask(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    mask[i] = unit_double(mix64(key ^ mix64(static_cast<std::uint64_t>(i)))) < p ? T(0) : keep_scale;
  }
  std::vector<T> out(x.values().begin(), x.values().end());
  for (std::int64_t i = 0; i < n; ++i) out[i] *= mask[i];
  Tensor<T> y(x.shape(), std::move(out));
  if (tracks(tp, {&x})) {
    tp.record(y, [x, y, mask = std::move(mask)]() mutable {
      const auto g = y.grad();
      T* gx = x.grad_data();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
  }
  return finish(tp, y, "dropout");
}

template <typename T>
Tensor<T> length_mask(Tape<T>& tp, const Tensor<T>& x, std::span<const int> lengths) {
  if (x.rank() < 2 || static_cast<std::int64_t>(lengths.size()) != x.dim(0)) {
    shape_error("length_mask", shape_str(x.shape()) + " with " + std::to_string(lengths.size()) +
                                   " lengths");
  }
  const std::int64_t B = x.dim(0);
  const std::int64_t Tn = x.dim(1);
  const std::int64_t inner = (B * Tn != 0) ? x.numel() / (B * Tn) : 0;
  std::vector<T> out(x.values().begin(), x.values().end());
  std::vector<int> lens(lengths.begin(), lengths.end());
  for (std::int64_t b = 0; b < B; ++b) {
    const std::int64_t valid = std::clamp<std::int64_t>(lens[b], 0, Tn);
    std::fill(out.begin() + (b * Tn + valid) * inner, out.begin() + (b + 1) * Tn * inner, T(0));
  }
  Tensor<T> y(x.shape(), std::move(out));
  if (tracks(tp, {&x})) {
    tp.record(y, [x, y, lens, B, Tn, inner]() mutable {
      const T* g = y.grad().data();
      T* gx = x.grad_data();
      for (std::int64_t b = 0; b < B; ++b) {
        const std::int64_t valid = std::clamp<std::int64_t>(lens[b], 0, Tn);
        for (std::int64_t i = b * Tn * inner; i < (b * Tn + valid) * inner; ++i) gx[i] += g[i];
      }
    });
  }
  return finish(tp, y, "length_mask");
}

template <typename T>
Tensor<T> scaled_dot_attention(Tape<T>& tp, const Tensor<T>& q, const Tensor<T>& k,
                               const Tensor<T>& v, int heads, const AttentionMask& mask,
                               const Tensor<T>& rel_key) {
  if (q.rank() != 3 || k.rank() != 3 || v.shape() != k.shape() || q.dim(0) != k.dim(0) ||
      q.dim(2) != k.dim(2)) {
    shape_error("scaled_dot_attention", "q " + shape_str(q.shape()) + ", k " +
                                            shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  }
  const std::int64_t B = q.dim(0), Tq = q.dim(1), Tk = k.dim(1), D = q.dim(2);
  if (heads < 1 || D % heads != 0) {
    shape_error("scaled_dot_attention", "model width " + std::to_string(D) +
                                            " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::int64_t H = heads;
  const std::int64_t dk = D / H;
  if (!mask.key_lengths.empty() && static_cast<std::int64_t>(mask.key_lengths.size()) != B) {
    shape_error("scaled_dot_attention", "key_lengths size does not match batch");
  }
  const bool rel = rel_key.defined();
  std::int64_t R = 0;
  if (rel) {
    if (rel_key.rank() != 2 || rel_key.dim(1) != dk || rel_key.dim(0) % 2 == 0) {
      shape_error("scaled_dot_attention", "relative table " + shape_str(rel_key.shape()) +
                                              " for head width " + std::to_string(dk));
    }
    R = rel_key.dim(0) / 2;
  }
  const std::int64_t offset = Tk - Tq;
  const T sc = T(1) / std::sqrt(static_cast<T>(dk));
  const T neg_inf = -std::numeric_limits<T>::infinity();

  auto rel_index = [R, offset](std::int64_t i, std::int64_t j) {
    return std::clamp<std::int64_t>(j - (i + offset), -R, R) + R;
  };
  auto valid_keys = [&](std::int64_t b) {
    return mask.key_lengths.empty() ? Tk : std::clamp<std::int64_t>(mask.key_lengths[b], 0, Tk);
  };

  Tensor<T> y(q.shape());
  Buffer<T> probs(static_cast<std::size_t>(B * H * Tq * Tk), T(0));
  std::vector<std::int64_t> limits(static_cast<std::size_t>(B));
  RowMat<T> S(Tq, Tk);
  RowMat<T> P;
  for (std::int64_t b = 0; b < B; ++b) {
    const std::int64_t kv = valid_keys(b);
    if (kv == 0) shape_error("scaled_dot_attention", "batch entry with no valid keys");
    limits[b] = kv;
    for (std::int64_t h = 0; h < H; ++h) {
      CSMap<T> Q(q.data() + b * Tq * D + h * dk, Tq, dk, Stride(D));
      CSMap<T> Kh(k.data() + b * Tk * D + h * dk, Tk, dk, Stride(D));
      CSMap<T> Vh(v.data() + b * Tk * D + h * dk, Tk, dk, Stride(D));
      S.noalias() = sc * (Q * Kh.transpose());
      if (rel) {
        P.noalias() = sc * (Q * CMapM<T>(rel_key.data(), 2 * R + 1, dk).transpose());
        for (std::int64_t i = 0; i < Tq; ++i) {
          for (std::int64_t j = 0; j < Tk; ++j) S(i, j) += P(i, rel_index(i, j));
        }
      }
      MapM<T> A(probs.data() + (b * H + h) * Tq * Tk, Tq, Tk);
      for (std::int64_t i = 0; i < Tq; ++i) {
        std::int64_t end = kv;
        if (mask.causal) end = std::min<std::int64_t>(end, i + offset + 1);
        if (end <= 0) shape_error("scaled_dot_attention", "query with no visible keys");
        T m = neg_inf;
        for (std::int64_t j = 0; j < end; ++j) m = std::max(m, S(i, j));
        T z = 0;
        for (std::int64_t j = 0; j < end; ++j) {
          const T e = std::exp(S(i, j) - m);
          A(i, j) = e;
          z += e;
        }
        for (std::int64_t j = 0; j < end; ++j) A(i, j) /= z;
      }
      SMap<T>(y.data() + b * Tq * D + h * dk, Tq, dk, Stride(D)).noalias() = A * Vh;
    }
  }

  if (tracks(tp, {&q, &k, &v, &rel_key})) {
    tp.record(y, [q, k, v, rel_key, y, probs = std::move(probs), B, H, Tq, Tk, D, dk, R, sc, rel,
                  rel_index]() mutable {
      const T* g = y.grad().data();
      T* gq = wants(q) ? q.grad_data() : nullptr;
      T* gk = wants(k) ? k.grad_data() : nullptr;
      T* gv = wants(v) ? v.grad_data() : nullptr;
      T* grel = wants(rel_key) ? rel_key.grad_data() : nullptr;
      RowMat<T> dA(Tq, Tk);
      RowMat<T> dS(Tq, Tk);
      RowMat<T> dP;
      if (rel) dP.resize(Tq, 2 * R + 1);
      for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t h = 0; h < H; ++h) {
          const std::int64_t qoff = b * Tq * D + h * dk;
          const std::int64_t koff = b * Tk * D + h * dk;
          CSMap<T> G(g + qoff, Tq, dk, Stride(D));
          CSMap<T> Q(q.data() + qoff, Tq, dk, Stride(D));
          CSMap<T> Kh(k.data() + koff, Tk, dk, Stride(D));
          CSMap<T> Vh(v.data() + koff, Tk, dk, Stride(D));
          CMapM<T> A(probs.data() + (b * H + h) * Tq * Tk, Tq, Tk);
          if (gv) SMap<T>(gv + koff, Tk, dk, Stride(D)).noalias() += A.transpose() * G;
          if (!gq && !gk && !grel) continue;
          dA.noalias() = G * Vh.transpose();
          for (std::int64_t i = 0; i < Tq; ++i) {
            // Plain loop: Eigen's vectorized sum peels for alignment, which
            // would make the result depend on where `probs` was allocated.
            T dot = T(0);
            for (std::int64_t j = 0; j < Tk; ++j) dot += dA(i, j) * A(i, j);
            dS.row(i) = A.row(i).array() * (dA.row(i).array() - dot);
          }
          if (gq) SMap<T>(gq + qoff, Tq, dk, Stride(D)).noalias() += sc * (dS * Kh);
          if (gk) SMap<T>(gk + koff, Tk, dk, Stride(D)).noalias() += sc * (dS.transpose() * Q);
          if (rel) {
            dP.setZero();
            for (std::int64_t i = 0; i < Tq; ++i) {
              for (std::int64_t j = 0; j < Tk; ++j) dP(i, rel_index(i, j)) += dS(i, j);
            }
            CMapM<T> Rk(rel_key.data(), 2 * R + 1, dk);
            if (gq) SMap<T>(gq + qoff, Tq, dk, Stride(D)).noalias() += sc * (dP * Rk);
            if (grel) MapM<T>(grel, 2 * R + 1, dk).noalias() += sc * (dP.transpose() * Q);
          }
        }
      }
    });
  }
  return finish(tp, y, "scaled_dot_attention");
}

template <typename T>
Tensor<T> sum(Tape<T>& tp, const Tensor<T>& a) {
  T total = 0;
  for (T v : a.values()) total += v;
  Tensor<T> y = Tensor<T>::scalar(total);
  if (tracks(tp, {&a})) {
    tp.record(y, [a, y]() mutable {
      const T g = y.grad()[0];
      for (auto& ga : a.grad()) ga += g;
    });
  }
  return finish(tp, y, "sum");
}

template <typename T>
Tensor<T> mean(Tape<T>& tp, const Tensor<T>& a) {
  const T n = static_cast<T>(std::max<std::int64_t>(a.numel(), 1));
  return scale(tp, sum(tp, a), T(1) / n);
}

#define IPAT_INSTANTIATE(T)                                                                      \
  template class Tensor<T>;                                                                      \
  template class Tape<T>;                                                                        \
  template Tensor<T> add(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> sub(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> mul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> scale(Tape<T>&, const Tensor<T>&, T);                                       \
  template Tensor<T> matmul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> transpose(Tape<T>&, const Tensor<T>&);                                      \
  template Tensor<T> reshape(Tape<T>&, const Tensor<T>&, Shape);                                 \
  template Tensor<T> concat(Tape<T>&, std::span<const Tensor<T>>, int);                          \
  template Tensor<T> slice(Tape<T>&, const Tensor<T>&, int, std::int64_t, std::int64_t);         \
  template Tensor<T> embedding_lookup(Tape<T>&, const Tensor<T>&, std::span<const int>, Shape);  \
  template Tensor<T> conv1d(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, \
                            int);                                                                \
  template Tensor<T> conv1d_depthwise(Tape<T>&, const Tensor<T>&, const Tensor<T>&,              \
                                      const Tensor<T>&);                                         \
  template Tensor<T> relu(Tape<T>&, const Tensor<T>&);                                           \
  template Tensor<T> swish(Tape<T>&, const Tensor<T>&);                                          \
  template Tensor<T> sigmoid(Tape<T>&, const Tensor<T>&);                                        \
  template Tensor<T> tanh(Tape<T>&, const Tensor<T>&);                                           \
  template Tensor<T> softmax(Tape<T>&, const Tensor<T>&, int);                                   \
  template Tensor<T> log_softmax(Tape<T>&, const Tensor<T>&, int);                               \
  template Tensor<T> layer_norm(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                T);                                                              \
  template Tensor<T> glu(Tape<T>&, const Tensor<T>&);                                            \
  template Tensor<T> dropout(Tape<T>&, const Tensor<T>&, double, std::uint64_t, bool);           \
  template Tensor<T> length_mask(Tape<T>&, const Tensor<T>&, std::span<const int>);              \
  template Tensor<T> scaled_dot_attention(Tape<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                          const Tensor<T>&, int, const AttentionMask&,           \
                                          const Tensor<T>&);                                     \
  template Tensor<T> sum(Tape<T>&, const Tensor<T>&);                                            \
  template Tensor<T> mean(Tape<T>&, const Tensor<T>&);

IPAT_INSTANTIATE(float)
IPAT_INSTANTIATE(double)

#undef IPAT_INSTANTIATE

}  // namespace ipat::ad
