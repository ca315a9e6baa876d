#include "ipat/training.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include <json.hpp>

#include "ipat/ctc.hpp"
#include "ipat/error.hpp"
#include "ipat/phoneset.hpp"
#include "ipat/rng.hpp"

namespace ipat::train {

using phoneset::Vocabulary;

void TrainConfig::validate() const {
  if (!(ctc_weight >= 0.0 && ctc_weight <= 1.0)) fail(ErrorCode::BadConfig, "ctc_weight must be in [0, 1]");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
    fail(ErrorCode::BadConfig, "label_smoothing must be in [0, 1)");
  }
  if (!(peak_lr > 0.0)) fail(ErrorCode::BadConfig, "peak_lr must be positive");
  if (warmup_steps < 1) fail(ErrorCode::BadConfig, "warmup_steps must be at least 1");
  if (epochs < 0) fail(ErrorCode::BadConfig, "epochs must be non-negative");
  if (average_last < 1) fail(ErrorCode::BadConfig, "average_last must be at least 1");
  if (epochs > 0 && average_last > epochs) fail(ErrorCode::BadConfig, "average_last exceeds epochs");
  if (batch_frames < 1) fail(ErrorCode::BadConfig, "batch_frames must be positive");
  if (constant_lr && !(*constant_lr > 0.0)) fail(ErrorCode::BadConfig, "constant lr must be positive");
}

double lr_at(std::int64_t step, double peak, std::int64_t warmup) {
  if (step < 1) fail(ErrorCode::BadStep, "learning-rate step must be >= 1, got " + std::to_string(step));
  if (warmup < 1) fail(ErrorCode::BadConfig, "warmup must be >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return peak * std::min(s / w, std::sqrt(w / s));
}

std::vector<int> averaged_epochs(int epochs, int average_last) {
  std::vector<int> out;
  for (int e = std::max(1, epochs - average_last + 1); e <= epochs; ++e) out.push_back(e);
  return out;
}

template <typename T>
ad::Tensor<T> attention_loss(ad::Tape<T>& tp, const ad::Tensor<T>& logits,
                             std::span<const int> targets, double smoothing) {
  if (logits.rank() != 3 || static_cast<std::int64_t>(targets.size()) != logits.dim(0) * logits.dim(1)) {
    fail(ErrorCode::ShapeMismatch, "attention_loss expects logits [B, U, V] and B*U targets");
  }
  const std::int64_t rows = logits.dim(0) * logits.dim(1);
  const std::int64_t V = logits.dim(2);
  const double eps = smoothing;
  std::int64_t count = 0;
  for (int t : targets) count += t != Vocabulary::kPad;
  const bool grad = tp.grad_enabled() && logits.requires_grad();
  std::vector<T> dlogits;
  if (grad) dlogits.assign(static_cast<std::size_t>(logits.numel()), T(0));
  double total = 0.0;
  std::vector<double> lp(static_cast<std::size_t>(V));
  const double log_v = std::log(static_cast<double>(V));
  for (std::int64_t r = 0; r < rows; ++r) {
    const int y = targets[r];
    if (y == Vocabulary::kPad) continue;
    if (y < 0 || y >= V) fail(ErrorCode::IdOutOfRange, "attention target outside vocabulary");
    const T* z = logits.data() + r * V;
    double m = -std::numeric_limits<double>::infinity();
    for (std::int64_t k = 0; k < V; ++k) m = std::max(m, static_cast<double>(z[k]));
    double sum = 0.0;
    for (std::int64_t k = 0; k < V; ++k) sum += std::exp(static_cast<double>(z[k]) - m);
    const double lse = m + std::log(sum);
    double lp_sum = 0.0;
    for (std::int64_t k = 0; k < V; ++k) {
      lp[k] = static_cast<double>(z[k]) - lse;
      lp_sum += lp[k];
    }
    total += -(1.0 - eps) * lp[y] - eps * (log_v + lp_sum / static_cast<double>(V));
    if (grad) {
      T* g = dlogits.data() + r * V;
      for (std::int64_t k = 0; k < V; ++k) {
        g[k] = static_cast<T>(std::exp(lp[k]) - eps / static_cast<double>(V) -
                              (k == y ? 1.0 - eps : 0.0));
      }
    }
  }
  const double inv = count > 0 ? 1.0 / static_cast<double>(count) : 0.0;
  ad::Tensor<T> out = ad::Tensor<T>::scalar(static_cast<T>(total * inv));
  if (grad && count > 0) {
    tp.record(out, [logits, out, dlogits = std::move(dlogits), inv]() {
      const T g = out.grad()[0] * static_cast<T>(inv);
      T* gx = logits.grad_data();
      for (std::size_t i = 0; i < dlogits.size(); ++i) gx[i] += g * dlogits[i];
    });
  }
  tp.check(out, "attention_loss");
  return out;
}

template <typename T>
ad::Tensor<T> joint_loss(ad::Tape<T>& tp, const ad::Tensor<T>& ctc, const ad::Tensor<T>& att,
                         double lambda) {
  return ad::add(tp, ad::scale(tp, ctc, static_cast<T>(lambda)),
                 ad::scale(tp, att, static_cast<T>(1.0 - lambda)));
}

void adam_step(model::Params<float>& params, AdamState& state, double lr, double beta1,
               double beta2, double eps) {
  ++state.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (auto& [name, t] : params) {
    if (!t.has_grad()) continue;
    auto& m = state.m[name];
    auto& v = state.v[name];
    const auto n = static_cast<std::size_t>(t.numel());
    if (m.size() != n) m.assign(n, 0.0f);
    if (v.size() != n) v.assign(n, 0.0f);
    float* p = t.data();
    const auto g = t.grad();
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = g[i];
      const double mi = beta1 * m[i] + (1.0 - beta1) * gi;
      const double vi = beta2 * v[i] + (1.0 - beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      p[i] = static_cast<float>(p[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + eps));
    }
  }
}

double clip_grad_norm(model::Params<float>& params, double max_norm) {
  double sq = 0.0;
  for (auto& [name, t] : params) {
    if (!t.has_grad()) continue;
    for (float g : t.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto s = static_cast<float>(max_norm / norm);
    for (auto& [name, t] : params) {
      if (!t.has_grad()) continue;
      for (auto& g : t.grad()) g *= s;
    }
  }
  return norm;
}

ckpt::Checkpoint average_checkpoints(std::span<const ckpt::Checkpoint> checkpoints) {
  if (checkpoints.empty()) fail(ErrorCode::EmptyInput, "no checkpoints to average");
  const auto& first = checkpoints.front();
  for (const auto& c : checkpoints) {
    if (c.fingerprint() != first.fingerprint()) {
      fail(ErrorCode::FingerprintMismatch,
           "cannot average '" + c.fingerprint() + "' with '" + first.fingerprint() + "'");
    }
    if (!c.vocab.same_entries(first.vocab)) {
      fail(ErrorCode::FingerprintMismatch, "cannot average checkpoints with different vocabularies");
    }
  }
  ckpt::Checkpoint out;
  out.arch = first.arch;
  out.vocab = first.vocab;
  out.provenance = first.provenance;
  out.metadata = first.metadata;
  const std::size_t n = checkpoints.size();
  std::vector<double> column(n);
  for (const auto& [name, t] : first.params) {
    std::vector<float> values(static_cast<std::size_t>(t.numel()));
    std::vector<const float*> sources;
    for (const auto& c : checkpoints) {
      auto it = c.params.find(name);
      if (it == c.params.end() || it->second.shape() != t.shape()) {
        fail(ErrorCode::FingerprintMismatch, "tensor " + name + " missing or reshaped");
      }
      sources.push_back(it->second.data());
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
      for (std::size_t k = 0; k < n; ++k) column[k] = sources[k][i];
      std::sort(column.begin(), column.end());
      double s = 0.0;
      for (double x : column) s += x;
      values[i] = static_cast<float>(s / static_cast<double>(n));
    }
    out.params.emplace(name, ad::Tensor<float>(t.shape(), std::move(values)));
  }
  std::vector<int> epochs;
  for (const auto& c : checkpoints) {
    auto it = c.metadata.find("epoch");
    if (it != c.metadata.end()) epochs.push_back(std::stoi(it->second));
  }
  std::sort(epochs.begin(), epochs.end());
  std::string list;
  for (int e : epochs) list += (list.empty() ? "" : ",") + std::to_string(e);
  out.metadata["averaged_epochs"] = list;
  out.metadata.erase("epoch");
  return out;
}

std::string MetricRecord::to_json() const {
  nlohmann::ordered_json j;
  j["stage"] = stage;
  j["epoch"] = epoch;
  j["step"] = step;
  j["lr"] = lr;
  j["loss_ctc"] = loss_ctc;
  j["loss_att"] = loss_att;
  j["loss_joint"] = loss_joint;
  if (dev_loss) j["dev_loss"] = *dev_loss;
  return j.dump();
}

std::vector<std::vector<std::size_t>> make_batches(std::span<const Example> data,
                                                   std::int64_t batch_frames) {
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (data[a].feats->num_frames != data[b].feats->num_frames) {
      return data[a].feats->num_frames < data[b].feats->num_frames;
    }
    return data[a].id < data[b].id;
  });
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> current;
  for (std::size_t idx : order) {
    // Sorted ascending, so the newcomer is the longest in the batch.
    const auto longest = static_cast<std::int64_t>(data[idx].feats->num_frames);
    if (!current.empty() && static_cast<std::int64_t>(current.size() + 1) * longest > batch_frames) {
      batches.push_back(std::move(current));
      current.clear();
    }
    current.push_back(idx);
  }
  if (!current.empty()) batches.push_back(std::move(current));
  return batches;
}

BatchLoss batch_loss(ad::Tape<float>& tp, const model::Model<float>& model,
                     std::span<const Example* const> batch, const TrainConfig& config,
                     const model::ForwardOptions& opts) {
  std::vector<const frontend::FeatureMatrix*> feats;
  std::vector<std::vector<int>> targets;
  std::size_t max_len = 0;
  for (const auto* ex : batch) {
    feats.push_back(ex->feats.get());
    targets.push_back(ex->target);
    max_len = std::max(max_len, ex->target.size());
  }
  std::vector<int> lengths;
  const auto x = model::feature_batch<float>(feats, &lengths);
  const auto enc = model.encode(tp, x, lengths, opts);
  const auto log_probs = model.ctc_head(tp, enc.out);
  BatchLoss out;
  out.ctc = ctc::ctc_loss_op(tp, log_probs, enc.lengths, targets);

  const int U = static_cast<int>(max_len) + 1;
  const std::size_t B = batch.size();
  std::vector<int> inputs(B * U, Vocabulary::kPad);
  std::vector<int> outputs(B * U, Vocabulary::kPad);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& y = targets[b];
    inputs[b * U] = Vocabulary::kSosEos;
    for (std::size_t i = 0; i < y.size(); ++i) {
      inputs[b * U + i + 1] = y[i];
      outputs[b * U + i] = y[i];
    }
    outputs[b * U + y.size()] = Vocabulary::kSosEos;
  }
  const auto logits = model.decode(tp, enc, inputs, U, opts);
  out.att = attention_loss(tp, logits, outputs, config.label_smoothing);
  out.joint = joint_loss(tp, out.ctc, out.att, config.ctc_weight);
  return out;
}

namespace {

// Drops utterances whose targets cannot be aligned after subsampling.
std::vector<const Example*> trainable(std::span<const Example> data, const model::ArchConfig& arch,
                                      std::size_t* skipped) {
  std::vector<const Example*> out;
  for (const auto& ex : data) {
    const int frames = model::subsampled_length(static_cast<int>(ex.feats->num_frames), arch);
    bool ok = static_cast<int>(ex.target.size()) + 1 <= arch.max_decode_len &&
              ex.feats->num_frames >= 1 &&
              static_cast<int>(ex.feats->num_bins) == arch.feat_dim;
    if (ok) {
      try {
        ctc::check_target(frames, arch.vocab_size_ctc, ex.target);
      } catch (const Error&) {
        ok = false;
      }
    }
    if (ok) {
      out.push_back(&ex);
    } else if (skipped) {
      ++*skipped;
    }
  }
  return out;
}

std::vector<Example> copy_examples(const std::vector<const Example*>& ptrs) {
  std::vector<Example> out;
  out.reserve(ptrs.size());
  for (const auto* p : ptrs) out.push_back(*p);
  return out;
}

double mean_joint_loss(const model::Model<float>& model, std::span<const Example> data,
                       const TrainConfig& config) {
  if (data.empty()) return 0.0;
  const auto batches = make_batches(data, config.batch_frames);
  double total = 0.0;
  for (const auto& idx : batches) {
    std::vector<const Example*> batch;
    for (std::size_t i : idx) batch.push_back(&data[i]);
    ad::Tape<float> tp;
    tp.set_grad_enabled(false);
    const auto loss = batch_loss(tp, model, batch, config, {});
    total += static_cast<double>(loss.joint.item()) * static_cast<double>(batch.size());
  }
  return total / static_cast<double>(data.size());
}

}  // namespace

double evaluate_loss(const model::Model<float>& model, std::span<const Example> data,
                     const TrainConfig& config) {
  const auto kept = copy_examples(trainable(data, model.arch(), nullptr));
  return mean_joint_loss(model, kept, config);
}

TrainResult train_loop(const ckpt::Checkpoint& init, std::span<const Example> train_set,
                       std::span<const Example> dev_set, const TrainConfig& config,
                       const std::string& stage, const MetricsSink& sink) {
  config.validate();
  TrainResult result;
  result.final = init;
  result.final.params = model::cast_params<float>(init.params, true);
  if (config.epochs == 0) return result;

  const auto& arch = init.arch;
  const auto train_data = copy_examples(trainable(train_set, arch, &result.skipped));
  if (result.skipped > 0) {
    std::cerr << "warning: " << stage << ": skipped " << result.skipped
              << " utterance(s) violating the CTC length precondition\n";
  }
  if (train_data.empty()) fail(ErrorCode::NoTrainableData, stage + ": no trainable utterances");
  const auto dev_data = copy_examples(trainable(dev_set, arch, nullptr));

  model::Params<float> params = model::cast_params<float>(init.params, true);
  model::Model<float> model(arch, params);
  AdamState adam;
  const auto batches = make_batches(train_data, config.batch_frames);
  const std::uint64_t dropout_seed = derive_seed(config.seed, "dropout");
  const auto keep = averaged_epochs(config.epochs, config.average_last);
  std::vector<ckpt::Checkpoint> snapshots;

  auto emit = [&](const MetricRecord& r) {
    result.metrics.push_back(r);
    if (sink) sink(r);
  };

  std::int64_t step = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<std::size_t> order(batches.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(derive_seed(config.seed, "batch_order"), static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    double sum_ctc = 0.0, sum_att = 0.0, sum_joint = 0.0;
    std::size_t seen = 0;
    double lr = 0.0;
    for (std::size_t bi : order) {
      ++step;
      lr = config.constant_lr ? *config.constant_lr : lr_at(step, config.peak_lr, config.warmup_steps);
      std::vector<const Example*> batch;
      for (std::size_t i : batches[bi]) batch.push_back(&train_data[i]);
      ad::Tape<float> tp;
      model::ForwardOptions opts{true, dropout_seed, step};
      auto loss = batch_loss(tp, model, batch, config, opts);
      for (auto& [name, t] : model.params()) t.zero_grad();
      tp.backward(loss.joint);
      tp.clear();
      clip_grad_norm(model.params(), config.grad_clip);
      adam_step(model.params(), adam, lr, config.adam_beta1, config.adam_beta2, config.adam_eps);

      MetricRecord r;
      r.stage = stage;
      r.epoch = epoch;
      r.step = step;
      r.lr = lr;
      r.loss_ctc = loss.ctc.item();
      r.loss_att = loss.att.item();
      r.loss_joint = loss.joint.item();
      if (!std::isfinite(r.loss_joint)) {
        fail(ErrorCode::NonFinite, stage + ": training loss diverged at step " + std::to_string(step));
      }
      emit(r);
      const double w = static_cast<double>(batch.size());
      sum_ctc += r.loss_ctc * w;
      sum_att += r.loss_att * w;
      sum_joint += r.loss_joint * w;
      seen += batch.size();
    }
    MetricRecord summary;
    summary.stage = stage;
    summary.epoch = epoch;
    summary.step = step;
    summary.lr = lr;
    summary.loss_ctc = sum_ctc / static_cast<double>(seen);
    summary.loss_att = sum_att / static_cast<double>(seen);
    summary.loss_joint = sum_joint / static_cast<double>(seen);
    summary.dev_loss = mean_joint_loss(model, dev_data, config);
    emit(summary);

    if (std::find(keep.begin(), keep.end(), epoch) != keep.end()) {
      ckpt::Checkpoint snap;
      snap.arch = arch;
      snap.vocab = init.vocab;
      snap.provenance = init.provenance;
      snap.metadata = init.metadata;
      snap.metadata["epoch"] = std::to_string(epoch);
      snap.params = model::cast_params<float>(model.params(), false);
      snapshots.push_back(std::move(snap));
    }
  }

  result.steps = step;
  if (snapshots.size() == 1) {
    result.final = std::move(snapshots.front());
    result.final.metadata["averaged_epochs"] = result.final.metadata["epoch"];
    result.final.metadata.erase("epoch");
  } else {
    result.final = average_checkpoints(snapshots);
  }
  result.final.metadata["stage"] = stage;
  result.final.metadata["epochs"] = std::to_string(config.epochs);
  result.final.metadata["steps"] = std::to_string(step);
  result.final.metadata["seed"] = std::to_string(config.seed);
  return result;
}

template ad::Tensor<float> attention_loss<float>(ad::Tape<float>&, const ad::Tensor<float>&,
                                                 std::span<const int>, double);
template ad::Tensor<double> attention_loss<double>(ad::Tape<double>&, const ad::Tensor<double>&,
                                                   std::span<const int>, double);
template ad::Tensor<float> joint_loss<float>(ad::Tape<float>&, const ad::Tensor<float>&,
                                             const ad::Tensor<float>&, double);
template ad::Tensor<double> joint_loss<double>(ad::Tape<double>&, const ad::Tensor<double>&,
                                               const ad::Tensor<double>&, double);

}  // namespace ipat::train
