#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ipat/frontend.hpp"
#include "ipat/model.hpp"
#include "ipat/text.hpp"

namespace ipat::eval {

struct Hypothesis {
  std::vector<int> tokens;  // emitted ids, last one is <sos/eos>
  std::vector<double> token_scores;
  double score = 0.0;  // sum of token_scores
  std::string text;
};

/// Next-token log-probabilities for a set of same-length prefixes.
class StepScorer {
 public:
  virtual ~StepScorer() = default;
  virtual int vocab_size() const = 0;
  /// Longest prefix (including the leading <sos/eos>) the scorer accepts.
  virtual int max_prefix() const { return std::numeric_limits<int>::max(); }
  /// One row of vocab_size() log-probabilities per prefix.
  virtual std::vector<std::vector<double>> step(std::span<const std::vector<int>> prefixes) = 0;
  /// Keeps the state of rows `parents`, in that order.
  virtual void reorder(std::span<const int> parents) = 0;
};

/// Incremental attention decoder over one encoded utterance.
class ModelScorer final : public StepScorer {
 public:
  ModelScorer(const model::Model<float>& model, const model::Encoded<float>& enc);
  int vocab_size() const override;
  int max_prefix() const override;
  std::vector<std::vector<double>> step(std::span<const std::vector<int>> prefixes) override;
  void reorder(std::span<const int> parents) override;

 private:
  const model::Model<float>& model_;
  model::DecoderCache<float> cache_;
};

/// Ids a decoder may emit: <unk>, <sos/eos> and every non-special token.
bool emittable(int id);

/// Length-bounded beam search without external scores. The final step
/// forces <sos/eos>; search stops once no active prefix can beat the best
/// finished hypothesis. Ties break toward the lower beam, then lower id.
Hypothesis beam_search(StepScorer& scorer, int beam_size, int max_len);
/// Argmax decoding; identical to beam_search with beam_size 1.
Hypothesis greedy(StepScorer& scorer, int max_len);

/// Output token budget for an encoding of `frames` subsampled frames.
int max_output_len(int frames, double max_len_ratio);

/// Framewise argmax, collapse repeats, drop blanks. `log_probs` is
/// [frames, vocab] row-major.
template <typename T>
std::vector<int> ctc_greedy(std::span<const T> log_probs, int frames, int vocab, int blank = 0);

enum class DecodeMode { Attention, CtcGreedy };

struct DecodeOptions {
  DecodeMode mode = DecodeMode::Attention;
  int beam = 10;
  double max_len_ratio = 1.0;
};

using Detokenizer = std::function<std::string(std::span<const int>)>;

/// Encodes one utterance and decodes it. Throws EmptyEncoding when the
/// encoder output has no frames.
Hypothesis decode_utterance(const model::Model<float>& model, const frontend::FeatureMatrix& feats,
                            const DecodeOptions& options, const Detokenizer& detok);

enum class Unit { Word, Phone };
std::string_view unit_name(Unit unit);

struct AlignOp {
  enum class Kind : std::uint8_t { Match, Sub, Del, Ins } kind;
  int ref = -1;  // index into the reference, -1 for insertions
  int hyp = -1;  // index into the hypothesis, -1 for deletions
  friend bool operator==(const AlignOp&, const AlignOp&) = default;
};
char align_code(AlignOp::Kind kind);

struct EditCounts {
  std::int64_t sub = 0;
  std::int64_t ins = 0;
  std::int64_t del = 0;
  std::int64_t total() const { return sub + ins + del; }
};

struct Alignment {
  EditCounts counts;
  std::vector<AlignOp> ops;
};

/// Unit-cost Levenshtein alignment. Among equal-cost paths the backtrace
/// prefers substitution (or match), then deletion, then insertion.
Alignment align(std::span<const std::string> ref, std::span<const std::string> hyp);
/// As align; EmptyReference for an empty reference.
Alignment edit_distance_align(std::span<const std::string> ref, std::span<const std::string> hyp);

struct TextRecord {
  std::string id;
  std::string text;
  double score = 0.0;
};

struct UtteranceScore {
  std::string id;
  std::vector<std::string> ref;
  std::vector<std::string> hyp;
  Alignment alignment;
};

struct ScoreReport {
  Unit unit = Unit::Word;
  std::string normalization;
  EditCounts counts;
  std::int64_t ref_tokens = 0;
  double error_rate = 0.0;  // (S + I + D) / ref_tokens, pooled
  std::vector<UtteranceScore> utterances;

  std::string to_json() const;
};

/// Scoring tokens: normalized words, or IPA tokens of the text.
std::vector<std::string> score_tokens(std::string_view text, Unit unit,
                                      const text::Normalizer& normalizer);

/// Pools edit counts over utterances matched by id. IdMismatch when the id
/// sets differ or repeat; EmptyReference when all references are empty.
ScoreReport score_corpus(std::span<const TextRecord> refs, std::span<const TextRecord> hyps,
                         Unit unit, const text::Normalizer& normalizer = {});

/// JSON lines {id, text, score}.
std::string hypotheses_to_jsonl(std::span<const TextRecord> hyps);
std::vector<TextRecord> parse_hypotheses(std::string_view jsonl);
void save_hypotheses(const std::filesystem::path& path, std::span<const TextRecord> hyps);
std::vector<TextRecord> load_hypotheses(const std::filesystem::path& path);

}  // namespace ipat::eval
