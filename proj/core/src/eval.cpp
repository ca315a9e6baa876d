#include "ipat/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include <json.hpp>

#include "ipat/error.hpp"
#include "ipat/io.hpp"
#include "ipat/phoneset.hpp"

namespace ipat::eval {

using phoneset::Vocabulary;
using json = nlohmann::ordered_json;

ModelScorer::ModelScorer(const model::Model<float>& model, const model::Encoded<float>& enc)
    : model_(model), cache_(model.start_decoding(enc, 1)) {}

int ModelScorer::vocab_size() const { return model_.arch().vocab_size_out; }

int ModelScorer::max_prefix() const { return model_.arch().max_decode_len; }

std::vector<std::vector<double>> ModelScorer::step(std::span<const std::vector<int>> prefixes) {
  const auto logits = model_.decode_step(cache_, prefixes);
  const std::int64_t V = logits.dim(1);
  std::vector<std::vector<double>> rows(prefixes.size());
  for (std::size_t b = 0; b < rows.size(); ++b) {
    const float* x = logits.data() + b * V;
    const double mx = *std::max_element(x, x + V);
    double z = 0.0;
    for (std::int64_t v = 0; v < V; ++v) z += std::exp(double(x[v]) - mx);
    const double lse = mx + std::log(z);
    rows[b].resize(V);
    for (std::int64_t v = 0; v < V; ++v) rows[b][v] = double(x[v]) - lse;
  }
  return rows;
}

void ModelScorer::reorder(std::span<const int> parents) { model_.reorder(cache_, parents); }

bool emittable(int id) {
  return id == Vocabulary::kUnk || id == Vocabulary::kSosEos || id >= Vocabulary::kNumSpecials;
}

namespace {

struct Candidate {
  double score;
  int beam;
  int token;
};

bool better(const Candidate& a, const Candidate& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.beam != b.beam) return a.beam < b.beam;
  return a.token < b.token;
}

struct Partial {
  std::vector<int> prefix;  // starts with <sos/eos>
  std::vector<double> scores;
  double score = 0.0;
};

Hypothesis finish(const Partial& p) {
  Hypothesis h;
  h.tokens.assign(p.prefix.begin() + 1, p.prefix.end());
  h.token_scores = p.scores;
  h.score = p.score;
  return h;
}

int clamp_len(const StepScorer& scorer, int max_len) {
  return std::max(1, std::min(max_len, scorer.max_prefix()));
}

}  // namespace

Hypothesis beam_search(StepScorer& scorer, int beam_size, int max_len) {
  if (beam_size < 1) fail(ErrorCode::BadConfig, "beam size must be at least 1");
  max_len = clamp_len(scorer, max_len);
  const int V = scorer.vocab_size();
  std::vector<Partial> active(1);
  active[0].prefix = {Vocabulary::kSosEos};
  std::vector<Partial> finished;
  std::vector<Candidate> cands;
  for (int t = 0; t < max_len; ++t) {
    std::vector<std::vector<int>> prefixes;
    for (const auto& a : active) prefixes.push_back(a.prefix);
    const auto rows = scorer.step(prefixes);
    const bool last = t + 1 == max_len;
    cands.clear();
    for (int b = 0; b < static_cast<int>(active.size()); ++b) {
      for (int v = 0; v < V; ++v) {
        if (!emittable(v) || (last && v != Vocabulary::kSosEos)) continue;
        cands.push_back({active[b].score + rows[b][v], b, v});
      }
    }
    const std::size_t keep = std::min<std::size_t>(beam_size, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + keep, cands.end(), better);
    std::vector<Partial> next;
    std::vector<int> parents;
    for (std::size_t i = 0; i < keep; ++i) {
      const auto& c = cands[i];
      Partial p = active[c.beam];
      p.prefix.push_back(c.token);
      p.scores.push_back(rows[c.beam][c.token]);
      p.score = c.score;
      if (c.token == Vocabulary::kSosEos) {
        finished.push_back(std::move(p));
      } else {
        next.push_back(std::move(p));
        parents.push_back(c.beam);
      }
    }
    if (next.empty()) break;
    if (!finished.empty()) {
      double best_done = -std::numeric_limits<double>::infinity();
      for (const auto& f : finished) best_done = std::max(best_done, f.score);
      // Log-probabilities are <= 0, so active scores can only fall.
      if (best_done >= next.front().score) break;
    }
    scorer.reorder(parents);
    active = std::move(next);
  }
  const auto best = std::max_element(finished.begin(), finished.end(),
                                     [](const Partial& a, const Partial& b) { return a.score < b.score; });
  return finish(*best);
}

Hypothesis greedy(StepScorer& scorer, int max_len) {
  max_len = clamp_len(scorer, max_len);
  Partial p;
  p.prefix = {Vocabulary::kSosEos};
  for (int t = 0; t < max_len; ++t) {
    const std::vector<std::vector<int>> prefixes = {p.prefix};
    const auto row = scorer.step(prefixes)[0];
    int arg = Vocabulary::kSosEos;
    if (t + 1 < max_len) {
      for (int v = 0; v < static_cast<int>(row.size()); ++v) {
        if (emittable(v) && (!emittable(arg) || row[v] > row[arg] || (row[v] == row[arg] && v < arg))) {
          arg = v;
        }
      }
    }
    p.prefix.push_back(arg);
    p.scores.push_back(row[arg]);
    p.score += row[arg];
    if (arg == Vocabulary::kSosEos) break;
  }
  return finish(p);
}

int max_output_len(int frames, double max_len_ratio) {
  return std::max(1, static_cast<int>(std::floor(max_len_ratio * frames)));
}

template <typename T>
std::vector<int> ctc_greedy(std::span<const T> log_probs, int frames, int vocab, int blank) {
  std::vector<int> out;
  int prev = blank;
  for (int t = 0; t < frames; ++t) {
    const T* row = log_probs.data() + static_cast<std::size_t>(t) * vocab;
    const int arg = static_cast<int>(std::max_element(row, row + vocab) - row);
    if (arg != blank && arg != prev) out.push_back(arg);
    prev = arg;
  }
  return out;
}

template std::vector<int> ctc_greedy<float>(std::span<const float>, int, int, int);
template std::vector<int> ctc_greedy<double>(std::span<const double>, int, int, int);

Hypothesis decode_utterance(const model::Model<float>& model, const frontend::FeatureMatrix& feats,
                            const DecodeOptions& options, const Detokenizer& detok) {
  if (model::subsampled_length(static_cast<int>(feats.num_frames), model.arch()) < 1) {
    fail(ErrorCode::EmptyEncoding, "utterance has no frames to encode");
  }
  ad::Tape<float> tp;
  tp.set_grad_enabled(false);
  const frontend::FeatureMatrix* fp = &feats;
  std::vector<int> lengths;
  const auto x = model::feature_batch<float>(std::span<const frontend::FeatureMatrix* const>(&fp, 1),
                                             &lengths);
  const auto enc = model.encode(tp, x, lengths);
  const int frames = enc.lengths[0];
  Hypothesis h;
  if (options.mode == DecodeMode::CtcGreedy) {
    const auto lp = model.ctc_head(tp, enc.out);
    const int V = static_cast<int>(lp.dim(2));
    h.tokens = ctc_greedy<float>(lp.values().subspan(0, static_cast<std::size_t>(frames) * V), frames, V);
    for (int t = 0; t < frames; ++t) {
      const float* row = lp.data() + static_cast<std::size_t>(t) * V;
      h.score += *std::max_element(row, row + V);
    }
    h.text = detok(h.tokens);
    return h;
  }
  ModelScorer scorer(model, enc);
  h = beam_search(scorer, options.beam, max_output_len(frames, options.max_len_ratio));
  h.text = detok(std::span<const int>(h.tokens).first(h.tokens.size() - 1));
  return h;
}

std::string_view unit_name(Unit unit) { return unit == Unit::Word ? "word" : "phone"; }

char align_code(AlignOp::Kind kind) {
  switch (kind) {
    case AlignOp::Kind::Match: return 'C';
    case AlignOp::Kind::Sub: return 'S';
    case AlignOp::Kind::Del: return 'D';
    case AlignOp::Kind::Ins: return 'I';
  }
  return '?';
}

Alignment align(std::span<const std::string> ref, std::span<const std::string> hyp) {
  const std::size_t R = ref.size();
  const std::size_t H = hyp.size();
  std::vector<std::int64_t> d((R + 1) * (H + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::int64_t& { return d[i * (H + 1) + j]; };
  for (std::size_t i = 0; i <= R; ++i) at(i, 0) = static_cast<std::int64_t>(i);
  for (std::size_t j = 0; j <= H; ++j) at(0, j) = static_cast<std::int64_t>(j);
  for (std::size_t i = 1; i <= R; ++i) {
    for (std::size_t j = 1; j <= H; ++j) {
      at(i, j) = std::min({at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1), at(i - 1, j) + 1,
                           at(i, j - 1) + 1});
    }
  }
  Alignment out;
  std::size_t i = R;
  std::size_t j = H;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const bool same = ref[i - 1] == hyp[j - 1];
      if (at(i, j) == at(i - 1, j - 1) + (same ? 0 : 1)) {
        out.ops.push_back({same ? AlignOp::Kind::Match : AlignOp::Kind::Sub, int(i - 1), int(j - 1)});
        if (!same) ++out.counts.sub;
        --i;
        --j;
        continue;
      }
    }
    if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      out.ops.push_back({AlignOp::Kind::Del, int(i - 1), -1});
      ++out.counts.del;
      --i;
      continue;
    }
    out.ops.push_back({AlignOp::Kind::Ins, -1, int(j - 1)});
    ++out.counts.ins;
    --j;
  }
  std::reverse(out.ops.begin(), out.ops.end());
  return out;
}

Alignment edit_distance_align(std::span<const std::string> ref, std::span<const std::string> hyp) {
  if (ref.empty()) fail(ErrorCode::EmptyReference, "reference has no tokens");
  return align(ref, hyp);
}

std::vector<std::string> score_tokens(std::string_view text, Unit unit,
                                      const text::Normalizer& normalizer) {
  if (unit == Unit::Word) return text::split_whitespace(normalizer.apply(text));
  std::vector<std::string> out;
  for (auto& tok : phoneset::parse_ipa(text)) out.push_back(std::move(tok.text));
  return out;
}

ScoreReport score_corpus(std::span<const TextRecord> refs, std::span<const TextRecord> hyps,
                         Unit unit, const text::Normalizer& normalizer) {
  std::map<std::string, const TextRecord*> by_id;
  for (const auto& h : hyps) {
    if (!by_id.emplace(h.id, &h).second) fail(ErrorCode::IdMismatch, "duplicate hypothesis id " + h.id);
  }
  std::set<std::string> seen;
  for (const auto& r : refs) {
    if (!seen.insert(r.id).second) fail(ErrorCode::IdMismatch, "duplicate reference id " + r.id);
    if (!by_id.contains(r.id)) fail(ErrorCode::IdMismatch, "no hypothesis for reference " + r.id);
  }
  for (const auto& h : hyps) {
    if (!seen.contains(h.id)) fail(ErrorCode::IdMismatch, "no reference for hypothesis " + h.id);
  }
  ScoreReport report;
  report.unit = unit;
  report.normalization = unit == Unit::Word ? normalizer.describe() : "ipa-tokens";
  for (const auto& r : refs) {
    UtteranceScore u;
    u.id = r.id;
    u.ref = score_tokens(r.text, unit, normalizer);
    u.hyp = score_tokens(by_id.at(r.id)->text, unit, normalizer);
    u.alignment = align(u.ref, u.hyp);
    report.counts.sub += u.alignment.counts.sub;
    report.counts.ins += u.alignment.counts.ins;
    report.counts.del += u.alignment.counts.del;
    report.ref_tokens += static_cast<std::int64_t>(u.ref.size());
    report.utterances.push_back(std::move(u));
  }
  if (report.ref_tokens == 0) fail(ErrorCode::EmptyReference, "references contain no tokens");
  report.error_rate = double(report.counts.total()) / double(report.ref_tokens);
  return report;
}

namespace {

std::string joined(const std::vector<std::string>& toks) {
  std::string s;
  for (const auto& t : toks) s += (s.empty() ? "" : " ") + t;
  return s;
}

}  // namespace

std::string ScoreReport::to_json() const {
  json j;
  j["unit"] = std::string(unit_name(unit));
  j["normalization"] = normalization;
  j["error_rate"] = error_rate;
  j["ref_tokens"] = ref_tokens;
  j["substitutions"] = counts.sub;
  j["insertions"] = counts.ins;
  j["deletions"] = counts.del;
  json utts = json::array();
  for (const auto& u : utterances) {
    json ju;
    ju["id"] = u.id;
    ju["ref"] = joined(u.ref);
    ju["hyp"] = joined(u.hyp);
    ju["substitutions"] = u.alignment.counts.sub;
    ju["insertions"] = u.alignment.counts.ins;
    ju["deletions"] = u.alignment.counts.del;
    json ops = json::array();
    for (const auto& op : u.alignment.ops) {
      ops.push_back({std::string(1, align_code(op.kind)), op.ref >= 0 ? json(u.ref[op.ref]) : json(),
                     op.hyp >= 0 ? json(u.hyp[op.hyp]) : json()});
    }
    ju["alignment"] = std::move(ops);
    utts.push_back(std::move(ju));
  }
  j["utterances"] = std::move(utts);
  return j.dump(2) + "\n";
}

std::string hypotheses_to_jsonl(std::span<const TextRecord> hyps) {
  std::string out;
  for (const auto& h : hyps) {
    json j;
    j["id"] = h.id;
    j["text"] = h.text;
    j["score"] = h.score;
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<TextRecord> parse_hypotheses(std::string_view jsonl) {
  std::vector<TextRecord> out;
  std::size_t lineno = 0;
  for (const auto& line : io::split_lines(jsonl)) {
    ++lineno;
    if (text::trim(line).empty()) continue;
    try {
      const auto j = json::parse(line);
      TextRecord r;
      r.id = j.at("id").get<std::string>();
      r.text = j.at("text").get<std::string>();
      if (j.contains("score")) r.score = j.at("score").get<double>();
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      fail(ErrorCode::ParseError, "hypothesis line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void save_hypotheses(const std::filesystem::path& path, std::span<const TextRecord> hyps) {
  io::write_file(path, hypotheses_to_jsonl(hyps));
}

std::vector<TextRecord> load_hypotheses(const std::filesystem::path& path) {
  return parse_hypotheses(io::read_file(path));
}

}  // namespace ipat::eval
