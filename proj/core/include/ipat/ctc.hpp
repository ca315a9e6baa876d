#pragma once

#include <span>
#include <vector>

#include "ipat/autodiff.hpp"

namespace ipat::ctc {

template <typename T>
struct CtcResult {
  T loss = 0;          // -log p(target | log_probs)
  std::vector<T> grad;  // d loss / d log_probs, frames x vocab
};

/// Log-space forward-backward over the blank-interleaved target.
/// `log_probs` is frames x vocab, row-major. Requires 2L+1 <= frames
/// (TargetTooLong) and every label in [0, vocab) and != blank (BadLabel).
template <typename T>
CtcResult<T> ctc_loss(std::span<const T> log_probs, int frames, int vocab,
                      std::span<const int> target, int blank = 0, bool want_grad = true);

/// Throws TargetTooLong / BadLabel when ctc_loss would.
void check_target(int frames, int vocab, std::span<const int> target, int blank = 0);

/// Mean CTC loss over a padded batch of log-probabilities [B, T, V]; frames
/// past lengths[b] are ignored.
template <typename T>
ad::Tensor<T> ctc_loss_op(ad::Tape<T>& tp, const ad::Tensor<T>& log_probs,
                          std::span<const int> lengths, std::span<const std::vector<int>> targets,
                          int blank = 0);

}  // namespace ipat::ctc
