#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "hybridlm/corpus.hpp"
#include "hybridlm/error.hpp"
#include "hybridlm/model.hpp"
#include "hybridlm/tokenizer.hpp"

namespace hybridlm {

// How sentences are scored. fused adds causal and masked logits per position.
enum class ScoreAttention { bidirectional, causal, prefix, fused };

inline ScoreAttention parse_score_attention(const std::string& s) {
  if (s == "bidirectional" || s == "masked") return ScoreAttention::bidirectional;
  if (s == "causal") return ScoreAttention::causal;
  if (s == "prefix") return ScoreAttention::prefix;
  if (s == "fused") return ScoreAttention::fused;
  throw ConfigError("unknown scoring mode '" + s + "' (expected bidirectional, causal, prefix or fused)");
}

inline std::string to_string(ScoreAttention a) {
  switch (a) {
    case ScoreAttention::bidirectional: return "bidirectional";
    case ScoreAttention::causal: return "causal";
    case ScoreAttention::prefix: return "prefix";
    case ScoreAttention::fused: return "fused";
  }
  return "?";
}

struct ScoreMode {
  ScoreAttention attention = ScoreAttention::bidirectional;
  double temperature = 1.0;

  void validate() const {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) throw InputError("temperature must be positive");
  }
};

// One scored position: the logit row that predicts `target`.
struct ScoredRow {
  std::vector<double> logits;
  TokenId target = 0;
};

inline double log_softmax_at(std::span<const double> logits, TokenId target, double temperature) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logits) mx = std::max(mx, v / temperature);
  double z = 0.0;
  for (double v : logits) z += std::exp(v / temperature - mx);
  return logits[static_cast<std::size_t>(target)] / temperature - mx - std::log(z);
}

inline double score_rows(const std::vector<ScoredRow>& rows, double temperature) {
  double s = 0.0;
  for (const auto& r : rows) s += log_softmax_at(r.logits, r.target, temperature);
  return s;
}

namespace detail {

template <typename T>
std::vector<double> logit_row(const Tensor<T>& logits, std::size_t r) {
  return std::vector<double>(logits.row(r), logits.row(r) + logits.cols());
}

inline void check_scorable(std::span<const TokenId> ids, std::size_t from) {
  if (ids.size() < 2) throw InputError("need at least BOS plus one token to score");
  if (from < 1 || from >= ids.size()) throw InputError("scored range is empty");
}

}  // namespace detail

// Logit rows for positions k >= from, each predicting ids[k] from row k-1.
template <typename T>
std::vector<ScoredRow> collect_rows(const ModelParameters<T>& params, std::span<const TokenId> ids,
                                    ScoreAttention attention, std::size_t from) {
  detail::check_scorable(ids, from);
  const std::size_t n = ids.size();
  std::vector<ScoredRow> rows;
  auto masked_row = [&](std::size_t k) {
    std::vector<TokenId> masked(ids.begin(), ids.end());
    masked[k] = kMask;
    const Tensor<T> logits = forward(params, std::span<const TokenId>(masked), AttentionMaskSpec::bidirectional(n));
    return detail::logit_row(logits, k - 1);
  };
  switch (attention) {
    case ScoreAttention::causal:
    case ScoreAttention::prefix: {
      const auto spec = attention == ScoreAttention::causal ? AttentionMaskSpec::causal(n)
                                                            : AttentionMaskSpec::prefix(n, from);
      const Tensor<T> logits = forward(params, ids, spec);
      for (std::size_t k = from; k < n; ++k) rows.push_back({detail::logit_row(logits, k - 1), ids[k]});
      break;
    }
    case ScoreAttention::bidirectional:
      // One forward per position, each with only that position masked.
      for (std::size_t k = from; k < n; ++k) rows.push_back({masked_row(k), ids[k]});
      break;
    case ScoreAttention::fused: {
      const Tensor<T> causal = forward(params, ids, AttentionMaskSpec::causal(n));
      for (std::size_t k = from; k < n; ++k) {
        auto row = masked_row(k);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] += static_cast<double>(causal(k - 1, c));
        rows.push_back({std::move(row), ids[k]});
      }
      break;
    }
  }
  return rows;
}

// Sum of log p(ids[k] | ids[<k]) over k >= 1 under the causal mask.
template <typename T>
double causal_logprob(const ModelParameters<T>& params, std::span<const TokenId> ids, double temperature = 1.0) {
  return score_rows(collect_rows(params, ids, ScoreAttention::causal, 1), temperature);
}

// Pseudo-log-likelihood: each position k >= 1 is masked in its own forward and
// read from output k-1 under the bidirectional mask.
template <typename T>
double masked_pll(const ModelParameters<T>& params, std::span<const TokenId> ids, double temperature = 1.0) {
  return score_rows(collect_rows(params, ids, ScoreAttention::bidirectional, 1), temperature);
}

// Log-probability of positions >= prefix_len with the prefix attended bidirectionally.
template <typename T>
double prefix_logprob(const ModelParameters<T>& params, std::span<const TokenId> ids, std::size_t prefix_len,
                      double temperature = 1.0) {
  if (prefix_len < 1 || prefix_len >= ids.size()) throw InputError("prefix_len out of range");
  return score_rows(collect_rows(params, ids, ScoreAttention::prefix, prefix_len), temperature);
}

template <typename T>
double fused_logprob(const ModelParameters<T>& params, std::span<const TokenId> ids, double temperature = 1.0) {
  return score_rows(collect_rows(params, ids, ScoreAttention::fused, 1), temperature);
}

template <typename T>
double sequence_score(const ModelParameters<T>& params, std::span<const TokenId> ids, const ScoreMode& mode,
                      std::size_t from = 1) {
  mode.validate();
  return score_rows(collect_rows(params, ids, mode.attention, from), mode.temperature);
}

enum class ItemKind { pair, choice, ewok, cloze, text };

struct EvalItem {
  ItemKind kind = ItemKind::pair;
  std::string context;
  std::vector<std::string> candidates;  // pair: {good, bad}; choice: options
  std::size_t gold_index = 0;
  std::vector<std::string> contexts;    // ewok: contexts[i] matches candidates[i]
  std::string answer;                   // cloze
  std::string text;                     // text: validation sequence

  bool ranked() const { return kind == ItemKind::pair || kind == ItemKind::choice || kind == ItemKind::ewok; }
};

inline EvalItem parse_eval_item(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("kind") || !j["kind"].is_string()) throw InputError("item needs a string 'kind'");
  const std::string kind = j["kind"].get<std::string>();
  EvalItem it;
  auto str = [&](const char* key) {
    if (!j.contains(key) || !j[key].is_string()) throw InputError(std::string("item needs a string '") + key + "'");
    return j[key].get<std::string>();
  };
  auto strs = [&](const char* key) {
    if (!j.contains(key) || !j[key].is_array()) throw InputError(std::string("item needs an array '") + key + "'");
    std::vector<std::string> out;
    for (const auto& v : j[key]) {
      if (!v.is_string()) throw InputError(std::string("'") + key + "' must contain strings");
      out.push_back(v.get<std::string>());
    }
    return out;
  };
  if (kind == "pair") {
    it.kind = ItemKind::pair;
    it.candidates = {str("good"), str("bad")};
    if (j.contains("context")) it.context = str("context");
  } else if (kind == "choice") {
    it.kind = ItemKind::choice;
    if (j.contains("context")) it.context = str("context");
    it.candidates = strs("candidates");
    if (!j.contains("gold") || !j["gold"].is_number_integer()) throw InputError("choice item needs integer 'gold'");
    const auto g = j["gold"].get<long long>();
    if (it.candidates.size() < 2) throw InputError("choice item needs at least two candidates");
    if (g < 0 || static_cast<std::size_t>(g) >= it.candidates.size()) throw InputError("gold index out of range");
    it.gold_index = static_cast<std::size_t>(g);
  } else if (kind == "ewok") {
    it.kind = ItemKind::ewok;
    it.contexts = strs("contexts");
    it.candidates = strs("targets");
    if (it.contexts.size() != 2 || it.candidates.size() != 2) throw InputError("ewok item needs two contexts and two targets");
  } else if (kind == "cloze") {
    it.kind = ItemKind::cloze;
    it.context = str("context");
    it.answer = str("answer");
  } else if (kind == "text") {
    it.kind = ItemKind::text;
    it.text = str("text");
  } else {
    throw InputError("unknown item kind '" + kind + "'");
  }
  return it;
}

namespace detail {

inline bool is_space(char c) { return c == ' ' || c == '\n' || c == '\t' || c == '\r'; }

// BOS + tokens of context joined with continuation. The continuation starts
// after the longest prefix shared with the context's own encoding, so merges
// across the boundary never leave the scored range empty.
struct JoinedIds {
  std::vector<TokenId> ids;
  std::size_t continuation_start = 1;
};

inline JoinedIds join_context(const Vocab& vocab, const std::string& context, const std::string& continuation) {
  std::string joined = context;
  if (!context.empty() && !continuation.empty() && !is_space(context.back()) && !is_space(continuation.front())) {
    joined += ' ';
  }
  joined += continuation;
  JoinedIds out;
  out.ids.push_back(kBos);
  const auto full = vocab.encode(joined);
  out.ids.insert(out.ids.end(), full.begin(), full.end());
  const auto ctx = vocab.encode(context);
  std::size_t common = 0;
  while (common < ctx.size() && common < full.size() && ctx[common] == full[common]) ++common;
  if (common == full.size() && common > 0) --common;
  out.continuation_start = 1 + common;
  return out;
}

}  // namespace detail

struct RankResult {
  std::optional<std::size_t> chosen;  // empty when skipped
  std::vector<double> scores;
  std::string skip_reason;
};

// Per-candidate scoring traces; temperatures can be re-applied without
// running the model again.
struct RankTrace {
  std::vector<std::vector<ScoredRow>> candidates;
  std::string skip_reason;
};

template <typename T>
RankTrace trace_choices(const ModelParameters<T>& params, const Vocab& vocab, const std::string& context,
                        const std::vector<std::string>& candidates, ScoreAttention attention) {
  RankTrace trace;
  for (const auto& cand : candidates) {
    const auto joined = detail::join_context(vocab, context, cand);
    if (cand.empty() || joined.ids.size() < 2 || joined.continuation_start >= joined.ids.size()) {
      throw InputError("candidate '" + cand + "' tokenizes to nothing");
    }
    if (joined.ids.size() > params.config.max_seq_len) {
      trace.candidates.clear();
      trace.skip_reason = "candidate exceeds max_seq_len";
      return trace;
    }
    trace.candidates.push_back(collect_rows(params, joined.ids, attention, joined.continuation_start));
  }
  return trace;
}

// argmax with ties toward the lower index.
inline std::size_t argmax_first(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

inline RankResult rank_trace(const RankTrace& trace, double temperature) {
  RankResult r;
  if (!trace.skip_reason.empty()) {
    r.skip_reason = trace.skip_reason;
    return r;
  }
  for (const auto& rows : trace.candidates) r.scores.push_back(score_rows(rows, temperature));
  r.chosen = argmax_first(r.scores);
  return r;
}

// Scores each candidate (context-prefixed when a context is present) and
// returns the argmax.
template <typename T>
RankResult rank_choices(const ModelParameters<T>& params, const Vocab& vocab, const EvalItem& item,
                        const ScoreMode& mode) {
  mode.validate();
  if (item.kind != ItemKind::pair && item.kind != ItemKind::choice) throw InputError("item is not a ranked kind");
  if (item.candidates.empty()) throw InputError("item has no candidates");
  return rank_trace(trace_choices(params, vocab, item.context, item.candidates, mode.attention), mode.temperature);
}

// Everything needed to judge one ranked item at any temperature.
struct RankedItemTrace {
  ItemKind kind = ItemKind::pair;
  std::size_t gold = 0;
  std::vector<RankTrace> comparisons;  // one for pair/choice, two for ewok
};

template <typename T>
RankedItemTrace trace_item(const ModelParameters<T>& params, const Vocab& vocab, const EvalItem& item,
                           ScoreAttention attention) {
  RankedItemTrace t;
  t.kind = item.kind;
  t.gold = item.gold_index;
  if (item.kind == ItemKind::ewok) {
    // Each target must score higher after its own context than after the other.
    for (std::size_t target = 0; target < 2; ++target) {
      RankTrace per_target;
      for (std::size_t c = 0; c < 2; ++c) {
        RankTrace one = trace_choices(params, vocab, item.contexts[c], {item.candidates[target]}, attention);
        if (!one.skip_reason.empty()) {
          per_target.skip_reason = one.skip_reason;
          break;
        }
        per_target.candidates.push_back(std::move(one.candidates.front()));
      }
      t.comparisons.push_back(std::move(per_target));
    }
  } else {
    t.comparisons.push_back(trace_choices(params, vocab, item.context, item.candidates, attention));
  }
  return t;
}

struct Judgement {
  bool correct = false;
  bool skipped = false;
  std::string reason;
};

inline Judgement judge(const RankedItemTrace& t, double temperature) {
  Judgement j;
  j.correct = true;
  for (std::size_t i = 0; i < t.comparisons.size(); ++i) {
    const RankResult r = rank_trace(t.comparisons[i], temperature);
    if (!r.chosen) return {false, true, r.skip_reason};
    const std::size_t expected = t.kind == ItemKind::ewok ? i : t.gold;
    if (*r.chosen != expected) j.correct = false;
  }
  return j;
}

inline double accuracy_at(const std::vector<RankedItemTrace>& traces, double temperature) {
  if (traces.empty()) return 0.0;
  std::size_t ok = 0;
  for (const auto& t : traces) ok += judge(t, temperature).correct ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(traces.size());
}

// Best grid temperature by ranked accuracy; ties prefer T = 1, then lower T.
inline double calibrate_from_traces(const std::vector<RankedItemTrace>& traces, std::vector<double> grid) {
  if (grid.empty()) throw InputError("empty temperature grid");
  for (double t : grid) {
    if (!(t > 0.0)) throw InputError("temperatures must be positive");
  }
  std::sort(grid.begin(), grid.end());
  double best_t = grid.front();
  double best_acc = -1.0;
  for (double t : grid) {
    const double acc = accuracy_at(traces, t);
    const bool better = acc > best_acc || (acc == best_acc && t == 1.0 && best_t != 1.0);
    if (better) {
      best_acc = acc;
      best_t = t;
    }
  }
  return best_t;
}

template <typename T>
double calibrate_temperature(const ModelParameters<T>& params, const Vocab& vocab, const std::vector<EvalItem>& items,
                             const std::vector<double>& grid, ScoreAttention attention) {
  if (grid.empty()) throw InputError("empty temperature grid");
  std::vector<RankedItemTrace> traces;
  for (const auto& it : items) {
    if (it.ranked()) traces.push_back(trace_item(params, vocab, it, attention));
  }
  if (traces.empty()) throw InputError("no ranked items to calibrate on");
  return calibrate_from_traces(traces, grid);
}

inline const std::vector<double>& default_temperature_grid() {
  static const std::vector<double> grid = {0.5, 0.75, 1.0, 1.25, 1.5, 2.0};
  return grid;
}

struct ClozeResult {
  std::vector<TokenId> predicted;
  bool exact_match = false;
  double gold_logprob = 0.0;
  bool skipped = false;
  std::string skip_reason;
};

namespace detail {

template <typename T>
TokenId argmax_token(const Tensor<T>& logits, std::size_t row) {
  const T* r = logits.row(row);
  std::size_t best = 0;
  for (std::size_t c = 1; c < logits.cols(); ++c) {
    if (r[c] > r[best]) best = c;
  }
  return static_cast<TokenId>(best);
}

}  // namespace detail

// Cloze over token ids. context starts with BOS.
// bidirectional: append k MASKs and read all k predictions from one forward;
// causal: greedy decoding; prefix: greedy decoding with the context attended
// bidirectionally.
template <typename T>
ClozeResult cloze_ids(const ModelParameters<T>& params, std::span<const TokenId> context, std::span<const TokenId> gold,
                      ScoreAttention attention, double temperature = 1.0) {
  if (gold.empty()) throw InputError("cloze answer tokenizes to nothing");
  if (context.empty()) throw InputError("cloze context must contain at least BOS");
  ClozeResult r;
  const std::size_t c = context.size();
  const std::size_t k = gold.size();
  if (c + k > params.config.max_seq_len) {
    r.skipped = true;
    r.skip_reason = "context plus answer exceeds max_seq_len";
    return r;
  }
  std::vector<TokenId> full(context.begin(), context.end());
  full.insert(full.end(), gold.begin(), gold.end());

  switch (attention) {
    case ScoreAttention::bidirectional: {
      std::vector<TokenId> ids(context.begin(), context.end());
      ids.insert(ids.end(), k, kMask);
      const Tensor<T> logits = forward(params, std::span<const TokenId>(ids), AttentionMaskSpec::bidirectional(ids.size()));
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t row = c + j - 1;
        r.predicted.push_back(detail::argmax_token(logits, row));
        r.gold_logprob += log_softmax_at(detail::logit_row(logits, row), gold[j], temperature);
      }
      break;
    }
    case ScoreAttention::causal:
    case ScoreAttention::prefix: {
      std::vector<TokenId> ids(context.begin(), context.end());
      for (std::size_t j = 0; j < k; ++j) {
        const auto spec = attention == ScoreAttention::causal ? AttentionMaskSpec::causal(ids.size())
                                                              : AttentionMaskSpec::prefix(ids.size(), c);
        const Tensor<T> logits = forward(params, std::span<const TokenId>(ids), spec);
        const TokenId next = detail::argmax_token(logits, ids.size() - 1);
        r.predicted.push_back(next);
        ids.push_back(next);
      }
      r.gold_logprob = score_rows(collect_rows(params, std::span<const TokenId>(full), attention, c), temperature);
      break;
    }
    case ScoreAttention::fused:
      r.skipped = true;
      r.skip_reason = "fused scoring is not defined for cloze decoding";
      return r;
  }
  r.exact_match = std::equal(r.predicted.begin(), r.predicted.end(), gold.begin(), gold.end());
  return r;
}

template <typename T>
ClozeResult lambada_cloze(const ModelParameters<T>& params, const Vocab& vocab, const std::string& context,
                          const std::string& gold, const ScoreMode& mode) {
  mode.validate();
  const auto joined = detail::join_context(vocab, context, gold);
  const std::span<const TokenId> all(joined.ids);
  if (gold.empty() || joined.continuation_start >= joined.ids.size()) throw InputError("cloze answer is empty");
  return cloze_ids(params, all.subspan(0, joined.continuation_start), all.subspan(joined.continuation_start),
                   mode.attention, mode.temperature);
}

struct ValidationResult {
  double nll_sum = 0.0;
  std::size_t tokens = 0;
  bool skipped = false;
};

// Negative log-likelihood of the tokens at positions >= floor(n * fraction)
// (at least 1). With fraction 0.5 this is the second-half protocol; in
// prefix mode the first part is attended bidirectionally.
template <typename T>
ValidationResult validation_nll(const ModelParameters<T>& params, std::span<const TokenId> ids,
                                ScoreAttention attention, double prefix_fraction, double temperature = 1.0) {
  if (!(prefix_fraction >= 0.0 && prefix_fraction < 1.0)) throw InputError("prefix fraction must lie in [0, 1)");
  ValidationResult r;
  if (ids.size() < 2) return r;
  if (ids.size() > params.config.max_seq_len) {
    r.skipped = true;
    return r;
  }
  const auto split = static_cast<std::size_t>(std::floor(static_cast<double>(ids.size()) * prefix_fraction));
  const std::size_t from = std::clamp<std::size_t>(split, 1, ids.size() - 1);
  const auto rows = collect_rows(params, ids, attention, from);
  r.nll_sum = -score_rows(rows, temperature);
  r.tokens = rows.size();
  return r;
}

struct EvalOptions {
  ScoreMode mode;
  bool calibrate = false;
  std::vector<double> grid = default_temperature_grid();
  double prefix_fraction = 0.5;
};

struct LoadedEvalFile {
  std::string name;
  std::vector<EvalItem> items;
};

inline LoadedEvalFile load_eval_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read eval file " + path.string());
  LoadedEvalFile out{path.filename().string(), {}};
  std::string line;
  long lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.items.push_back(parse_eval_item(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error&) {
      throw FormatError(path.string() + ": invalid JSON", lineno);
    } catch (const InputError& e) {
      throw FormatError(path.string() + ": " + e.what(), lineno);
    }
  }
  return out;
}

// A file, or every *.jsonl file of a directory in name order.
inline std::vector<LoadedEvalFile> load_eval_dataset(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  std::vector<fs::path> files;
  if (fs::is_directory(path)) {
    for (const auto& e : fs::directory_iterator(path)) {
      if (e.is_regular_file() && e.path().extension() == ".jsonl") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(path);
  }
  std::vector<LoadedEvalFile> out;
  for (const auto& p : files) out.push_back(load_eval_file(p));
  return out;
}

namespace detail {

struct SuiteCounts {
  std::size_t ranked = 0, ranked_correct = 0, ranked_skipped = 0;
  std::size_t cloze = 0, cloze_exact = 0, cloze_skipped = 0;
  double cloze_logprob_sum = 0.0;
  std::size_t text = 0, text_skipped = 0, text_tokens = 0;
  double text_nll_sum = 0.0;

  void add(const SuiteCounts& o) {
    ranked += o.ranked;
    ranked_correct += o.ranked_correct;
    ranked_skipped += o.ranked_skipped;
    cloze += o.cloze;
    cloze_exact += o.cloze_exact;
    cloze_skipped += o.cloze_skipped;
    cloze_logprob_sum += o.cloze_logprob_sum;
    text += o.text;
    text_skipped += o.text_skipped;
    text_tokens += o.text_tokens;
    text_nll_sum += o.text_nll_sum;
  }

  nlohmann::json to_json() const {
    auto ratio = [](double num, std::size_t den) { return den ? nlohmann::json(num / static_cast<double>(den)) : nlohmann::json(nullptr); };
    const std::size_t scored_cloze = cloze - cloze_skipped;
    return {{"ranked_items", ranked},
            {"ranked_correct", ranked_correct},
            {"ranked_skipped", ranked_skipped},
            {"accuracy", ratio(static_cast<double>(ranked_correct), ranked)},
            {"cloze_items", cloze},
            {"cloze_exact", cloze_exact},
            {"cloze_skipped", cloze_skipped},
            {"exact_match", ratio(static_cast<double>(cloze_exact), cloze)},
            {"cloze_mean_logprob", ratio(cloze_logprob_sum, scored_cloze)},
            {"text_items", text},
            {"text_skipped", text_skipped},
            {"text_tokens", text_tokens},
            {"validation_loss", ratio(text_nll_sum, text_tokens)}};
  }
};

}  // namespace detail

// Scores every item of every file and aggregates per file and overall.
// Skipped ranked items count as incorrect.
template <typename T>
nlohmann::json evaluate_suite(const ModelParameters<T>& params, const Vocab& vocab,
                              const std::vector<LoadedEvalFile>& files, const EvalOptions& opt) {
  opt.mode.validate();
  std::vector<std::vector<RankedItemTrace>> traces(files.size());
  for (std::size_t f = 0; f < files.size(); ++f) {
    for (const auto& it : files[f].items) {
      if (it.ranked()) traces[f].push_back(trace_item(params, vocab, it, opt.mode.attention));
    }
  }
  double temperature = opt.mode.temperature;
  nlohmann::json report;
  if (opt.calibrate) {
    std::vector<RankedItemTrace> all;
    for (const auto& t : traces) all.insert(all.end(), t.begin(), t.end());
    if (!all.empty()) temperature = calibrate_from_traces(all, opt.grid);
    report["calibrated_temperature"] = temperature;
  }
  report["mode"] = to_string(opt.mode.attention);
  report["temperature"] = temperature;
  report["prefix_fraction"] = opt.prefix_fraction;

  detail::SuiteCounts overall;
  nlohmann::json per_file = nlohmann::json::object();
  for (std::size_t f = 0; f < files.size(); ++f) {
    detail::SuiteCounts c;
    for (const auto& t : traces[f]) {
      const Judgement j = judge(t, temperature);
      ++c.ranked;
      c.ranked_correct += j.correct ? 1 : 0;
      c.ranked_skipped += j.skipped ? 1 : 0;
    }
    for (const auto& it : files[f].items) {
      if (it.kind == ItemKind::cloze) {
        ++c.cloze;
        const ClozeResult r = lambada_cloze(params, vocab, it.context, it.answer, {opt.mode.attention, temperature});
        if (r.skipped) {
          ++c.cloze_skipped;
        } else {
          c.cloze_exact += r.exact_match ? 1 : 0;
          c.cloze_logprob_sum += r.gold_logprob;
        }
      } else if (it.kind == ItemKind::text) {
        ++c.text;
        const auto ids = frame_document(vocab, it.text);
        const ValidationResult v = validation_nll(params, std::span<const TokenId>(ids), opt.mode.attention,
                                                  opt.prefix_fraction, temperature);
        if (v.skipped) ++c.text_skipped;
        c.text_tokens += v.tokens;
        c.text_nll_sum += v.nll_sum;
      }
    }
    overall.add(c);
    per_file[files[f].name] = c.to_json();
  }
  report["files"] = per_file;
  report["overall"] = overall.to_json();
  return report;
}

template <typename T>
nlohmann::json evaluate_suite(const ModelParameters<T>& params, const Vocab& vocab,
                              const std::filesystem::path& dataset_path, const EvalOptions& opt) {
  return evaluate_suite(params, vocab, load_eval_dataset(dataset_path), opt);
}

}  // namespace hybridlm
