#include "ipat/ctc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "ipat/error.hpp"

namespace ipat::ctc {

namespace {

template <typename T>
T log_add(T a, T b) {
  if (a == -std::numeric_limits<T>::infinity()) return b;
  if (b == -std::numeric_limits<T>::infinity()) return a;
  const T m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

}  // namespace

void check_target(int frames, int vocab, std::span<const int> target, int blank) {
  for (int id : target) {
    if (id == blank || id < 0 || id >= vocab) {
      fail(ErrorCode::BadLabel, "CTC label " + std::to_string(id) + " is blank or outside [0," +
                                    std::to_string(vocab) + ")");
    }
  }
  const std::size_t expanded = 2 * target.size() + 1;
  if (expanded > static_cast<std::size_t>(frames)) {
    fail(ErrorCode::TargetTooLong, "expanded target length " + std::to_string(expanded) +
                                       " exceeds " + std::to_string(frames) + " frames");
  }
}

template <typename T>
CtcResult<T> ctc_loss(std::span<const T> log_probs, int frames, int vocab,
                      std::span<const int> target, int blank, bool want_grad) {
  if (frames < 1 || vocab < 1 ||
      log_probs.size() < static_cast<std::size_t>(frames) * static_cast<std::size_t>(vocab)) {
    fail(ErrorCode::ShapeMismatch, "log_probs too small for the stated frames x vocab");
  }
  if (blank < 0 || blank >= vocab) fail(ErrorCode::BadLabel, "blank id outside vocabulary");
  check_target(frames, vocab, target, blank);

  const T ninf = -std::numeric_limits<T>::infinity();
  const int S = 2 * static_cast<int>(target.size()) + 1;
  std::vector<int> ext(S, blank);
  for (std::size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = target[i];
  auto lp = [&](int t, int k) { return log_probs[static_cast<std::size_t>(t) * vocab + k]; };
  // A label may skip the preceding blank unless it repeats the label before.
  auto can_skip = [&](int s) { return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]; };

  std::vector<T> alpha(static_cast<std::size_t>(frames) * S, ninf);
  alpha[0] = lp(0, ext[0]);
  if (S > 1) alpha[1] = lp(0, ext[1]);
  for (int t = 1; t < frames; ++t) {
    for (int s = 0; s < S; ++s) {
      T acc = alpha[(t - 1) * S + s];
      if (s >= 1) acc = log_add(acc, alpha[(t - 1) * S + s - 1]);
      if (can_skip(s)) acc = log_add(acc, alpha[(t - 1) * S + s - 2]);
      alpha[t * S + s] = acc == ninf ? ninf : acc + lp(t, ext[s]);
    }
  }
  T log_p = alpha[(frames - 1) * S + S - 1];
  if (S > 1) log_p = log_add(log_p, alpha[(frames - 1) * S + S - 2]);

  CtcResult<T> result;
  result.loss = -log_p;
  if (!want_grad) return result;

  std::vector<T> beta(static_cast<std::size_t>(frames) * S, ninf);
  beta[(frames - 1) * S + S - 1] = lp(frames - 1, ext[S - 1]);
  if (S > 1) beta[(frames - 1) * S + S - 2] = lp(frames - 1, ext[S - 2]);
  for (int t = frames - 2; t >= 0; --t) {
    for (int s = 0; s < S; ++s) {
      T acc = beta[(t + 1) * S + s];
      if (s + 1 < S) acc = log_add(acc, beta[(t + 1) * S + s + 1]);
      if (s + 2 < S && can_skip(s + 2)) acc = log_add(acc, beta[(t + 1) * S + s + 2]);
      beta[t * S + s] = acc == ninf ? ninf : acc + lp(t, ext[s]);
    }
  }

  // alpha and beta both include the emission at t, so alpha*beta/y counts
  // every path through (t, s) once.
  result.grad.assign(static_cast<std::size_t>(frames) * vocab, T(0));
  std::vector<T> occupancy(vocab);
  for (int t = 0; t < frames; ++t) {
    std::fill(occupancy.begin(), occupancy.end(), ninf);
    for (int s = 0; s < S; ++s) {
      occupancy[ext[s]] = log_add(occupancy[ext[s]], alpha[t * S + s] + beta[t * S + s]);
    }
    for (int k = 0; k < vocab; ++k) {
      if (occupancy[k] == ninf) continue;
      result.grad[static_cast<std::size_t>(t) * vocab + k] =
          -std::exp(occupancy[k] - lp(t, k) - log_p);
    }
  }
  return result;
}

template <typename T>
ad::Tensor<T> ctc_loss_op(ad::Tape<T>& tp, const ad::Tensor<T>& log_probs,
                          std::span<const int> lengths, std::span<const std::vector<int>> targets,
                          int blank) {
  if (log_probs.rank() != 3 || static_cast<std::int64_t>(lengths.size()) != log_probs.dim(0) ||
      lengths.size() != targets.size()) {
    fail(ErrorCode::ShapeMismatch, "ctc_loss_op expects [B, T, V] with B lengths and targets");
  }
  const std::int64_t B = log_probs.dim(0);
  const std::int64_t Tn = log_probs.dim(1);
  const std::int64_t V = log_probs.dim(2);
  const bool grad = tp.grad_enabled() && log_probs.requires_grad();
  T total = 0;
  std::vector<T> dlp;
  if (grad) dlp.assign(static_cast<std::size_t>(log_probs.numel()), T(0));
  for (std::int64_t b = 0; b < B; ++b) {
    if (lengths[b] < 1 || lengths[b] > Tn) {
      fail(ErrorCode::ShapeMismatch, "CTC frame length outside [1, T]");
    }
    std::span<const T> rows(log_probs.data() + b * Tn * V, static_cast<std::size_t>(lengths[b] * V));
    auto r = ctc_loss<T>(rows, lengths[b], static_cast<int>(V), targets[b], blank, grad);
    total += r.loss;
    if (grad) std::copy(r.grad.begin(), r.grad.end(), dlp.begin() + b * Tn * V);
  }
  const T inv_b = T(1) / static_cast<T>(B);
  ad::Tensor<T> y = ad::Tensor<T>::scalar(total * inv_b);
  if (grad) {
    tp.record(y, [log_probs, y, dlp = std::move(dlp), inv_b]() {
      const T g = y.grad()[0] * inv_b;
      T* gx = log_probs.grad_data();
      for (std::size_t i = 0; i < dlp.size(); ++i) gx[i] += g * dlp[i];
    });
  }
  tp.check(y, "ctc_loss");
  return y;
}

template CtcResult<float> ctc_loss<float>(std::span<const float>, int, int, std::span<const int>,
                                          int, bool);
template CtcResult<double> ctc_loss<double>(std::span<const double>, int, int,
                                            std::span<const int>, int, bool);
template ad::Tensor<float> ctc_loss_op<float>(ad::Tape<float>&, const ad::Tensor<float>&,
                                              std::span<const int>,
                                              std::span<const std::vector<int>>, int);
template ad::Tensor<double> ctc_loss_op<double>(ad::Tape<double>&, const ad::Tensor<double>&,
                                                std::span<const int>,
                                                std::span<const std::vector<int>>, int);

}  // namespace ipat::ctc
