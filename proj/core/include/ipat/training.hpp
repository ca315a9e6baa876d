#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ipat/autodiff.hpp"
#include "ipat/checkpoint.hpp"
#include "ipat/frontend.hpp"

namespace ipat::train {

struct TrainConfig {
  double ctc_weight = 0.1;
  double label_smoothing = 0.1;
  double peak_lr = 1e-3;
  std::int64_t warmup_steps = 2000;
  int epochs = 60;
  int average_last = 10;
  /// Upper bound on batch_size * longest utterance (input frames).
  std::int64_t batch_frames = 12000;
  std::uint64_t seed = 1;
  double grad_clip = 5.0;  // global norm; <= 0 disables
  /// When set, replaces the warmup schedule with a constant rate.
  std::optional<double> constant_lr;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  /// Throws BadConfig.
  void validate() const;
};

/// peak * min(step / warmup, sqrt(warmup / step)); BadStep for step < 1.
double lr_at(std::int64_t step, double peak, std::int64_t warmup);

/// Epochs whose checkpoints are averaged: the last `average_last` of
/// `epochs`, 1-based.
std::vector<int> averaged_epochs(int epochs, int average_last);

/// Label-smoothed cross-entropy over logits [B, U, V] against `targets`
/// ([B, U], <pad> positions ignored), averaged over non-pad positions:
///   (1 - eps) * NLL(target) + eps * KL(uniform || softmax).
template <typename T>
ad::Tensor<T> attention_loss(ad::Tape<T>& tp, const ad::Tensor<T>& logits,
                             std::span<const int> targets, double smoothing);

/// lambda * ctc + (1 - lambda) * att.
template <typename T>
ad::Tensor<T> joint_loss(ad::Tape<T>& tp, const ad::Tensor<T>& ctc, const ad::Tensor<T>& att,
                         double lambda);

struct AdamState {
  std::int64_t step = 0;
  std::map<std::string, std::vector<float>> m;
  std::map<std::string, std::vector<float>> v;
};

/// Bias-corrected Adam over every parameter that has a gradient.
void adam_step(model::Params<float>& params, AdamState& state, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8);

/// Rescales gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
double clip_grad_norm(model::Params<float>& params, double max_norm);

/// Elementwise mean per tensor. Values are summed in sorted order so the
/// result does not depend on the order of `checkpoints`.
ckpt::Checkpoint average_checkpoints(std::span<const ckpt::Checkpoint> checkpoints);

struct Example {
  std::string id;
  std::shared_ptr<const frontend::FeatureMatrix> feats;
  std::vector<int> target;  // token ids without <sos/eos>
};

struct MetricRecord {
  std::string stage;
  int epoch = 0;
  std::int64_t step = 0;
  double lr = 0.0;
  double loss_ctc = 0.0;
  double loss_att = 0.0;
  double loss_joint = 0.0;
  std::optional<double> dev_loss;

  std::string to_json() const;
};

using MetricsSink = std::function<void(const MetricRecord&)>;

struct TrainResult {
  ckpt::Checkpoint final;
  std::vector<MetricRecord> metrics;
  std::size_t skipped = 0;
  std::int64_t steps = 0;
};

/// Length-sorted batches under the frame budget, in a deterministic order.
std::vector<std::vector<std::size_t>> make_batches(std::span<const Example> data,
                                                   std::int64_t batch_frames);

/// Joint CTC/attention loss of one batch; returns {ctc, att, joint}.
struct BatchLoss {
  ad::Tensor<float> ctc;
  ad::Tensor<float> att;
  ad::Tensor<float> joint;
};
BatchLoss batch_loss(ad::Tape<float>& tp, const model::Model<float>& model,
                     std::span<const Example* const> batch, const TrainConfig& config,
                     const model::ForwardOptions& opts);

/// Mean joint loss over `data` without dropout or gradient tracking.
double evaluate_loss(const model::Model<float>& model, std::span<const Example> data,
                     const TrainConfig& config);

/// Trains from `init` for config.epochs epochs. Utterances violating the
/// CTC length precondition are skipped (count in TrainResult::skipped and a
/// warning on stderr); NoTrainableData when none remain. With epochs == 0
/// the initial checkpoint is returned unchanged.
TrainResult train_loop(const ckpt::Checkpoint& init, std::span<const Example> train_set,
                       std::span<const Example> dev_set, const TrainConfig& config,
                       const std::string& stage, const MetricsSink& sink = {});

}  // namespace ipat::train
