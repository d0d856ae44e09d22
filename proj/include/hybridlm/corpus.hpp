#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "hybridlm/error.hpp"
#include "hybridlm/mask.hpp"
#include "hybridlm/random.hpp"
#include "hybridlm/tokenizer.hpp"

namespace hybridlm {

// Target value for positions that carry no loss.
inline constexpr TokenId kIgnore = -1;

enum class Objective : std::uint8_t { causal, masked };

struct Ratio {
  int causal = 1;
  int masked = 15;

  static Ratio parse(const std::string& s) {
    const auto colon = s.find(':');
    auto parse_part = [&](const std::string& part) {
      if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos || part.size() > 6) {
        throw ConfigError("invalid ratio '" + s + "', expected \"c:m\" with non-negative integers");
      }
      return std::stoi(part);
    };
    if (colon == std::string::npos) throw ConfigError("invalid ratio '" + s + "', expected \"c:m\"");
    Ratio r{parse_part(s.substr(0, colon)), parse_part(s.substr(colon + 1))};
    if (r.causal + r.masked == 0) throw ConfigError("ratio '" + s + "' has no positive part");
    return r;
  }

  std::string str() const { return std::to_string(causal) + ":" + std::to_string(masked); }

  friend bool operator==(const Ratio&, const Ratio&) = default;
};

// Training-time schedules for batch size, masking rate and sequence length.
// Defaults are the 10M-word recipe.
struct ScheduleConfig {
  std::int64_t total_steps = 7812;
  std::int64_t batch_tokens_start = 1048576;
  std::int64_t batch_tokens_end = 4194304;
  double mask_p_start = 0.30;
  double mask_p_end = 0.15;
  std::int64_t seq_len_start = 128;
  std::int64_t seq_len_end = 512;
  double seq_len_switch_fraction = 0.9;
  Ratio ratio{1, 15};
  std::uint64_t seed = 0;
  // Corruption split for selected positions; the rest keep their token.
  double mask_token_prob = 0.8;
  double random_token_prob = 0.1;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (total_steps < 0) fail("total_steps must be >= 0");
    if (batch_tokens_start <= 0 || batch_tokens_end <= 0) fail("batch token budgets must be positive");
    if (batch_tokens_start > batch_tokens_end) fail("batch_tokens_start must not exceed batch_tokens_end");
    if (seq_len_start <= 0 || seq_len_end <= 0) fail("sequence lengths must be positive");
    if (seq_len_start > seq_len_end) fail("seq_len_start must not exceed seq_len_end");
    if (!(seq_len_switch_fraction >= 0.0 && seq_len_switch_fraction <= 1.0)) {
      fail("seq_len_switch_fraction must lie in [0, 1]");
    }
    for (double p : {mask_p_start, mask_p_end}) {
      if (!(p > 0.0 && p < 1.0)) fail("mask probabilities must lie in (0, 1)");
    }
    if (mask_token_prob < 0 || random_token_prob < 0 || mask_token_prob + random_token_prob > 1.0) {
      fail("mask_token_prob + random_token_prob must lie in [0, 1]");
    }
    if (ratio.causal < 0 || ratio.masked < 0 || ratio.causal + ratio.masked == 0) fail("invalid ratio");
  }
};

inline void to_json(nlohmann::json& j, const ScheduleConfig& c) {
  j = {{"total_steps", c.total_steps},
       {"batch_tokens_start", c.batch_tokens_start},
       {"batch_tokens_end", c.batch_tokens_end},
       {"mask_p_start", c.mask_p_start},
       {"mask_p_end", c.mask_p_end},
       {"seq_len_start", c.seq_len_start},
       {"seq_len_end", c.seq_len_end},
       {"seq_len_switch_fraction", c.seq_len_switch_fraction},
       {"ratio", c.ratio.str()},
       {"seed", c.seed},
       {"mask_token_prob", c.mask_token_prob},
       {"random_token_prob", c.random_token_prob}};
}

// Missing keys keep their defaults.
inline void from_json(const nlohmann::json& j, ScheduleConfig& c) {
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("total_steps", c.total_steps);
    get("batch_tokens_start", c.batch_tokens_start);
    get("batch_tokens_end", c.batch_tokens_end);
    get("mask_p_start", c.mask_p_start);
    get("mask_p_end", c.mask_p_end);
    get("seq_len_start", c.seq_len_start);
    get("seq_len_end", c.seq_len_end);
    get("seq_len_switch_fraction", c.seq_len_switch_fraction);
    get("seed", c.seed);
    get("mask_token_prob", c.mask_token_prob);
    get("random_token_prob", c.random_token_prob);
    if (j.contains("ratio")) c.ratio = Ratio::parse(j.at("ratio").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("schedule config: ") + e.what());
  }
}

namespace detail {

inline void check_step(std::int64_t step, const ScheduleConfig& cfg) {
  if (step < 0 || step > cfg.total_steps) {
    throw InputError("step " + std::to_string(step) + " outside [0, " + std::to_string(cfg.total_steps) + "]");
  }
}

inline double progress(std::int64_t step, const ScheduleConfig& cfg) {
  return cfg.total_steps == 0 ? 0.0 : static_cast<double>(step) / static_cast<double>(cfg.total_steps);
}

}  // namespace detail

// Linear decay of the masking rate; std::lerp keeps both endpoints exact.
inline double mask_probability(std::int64_t step, const ScheduleConfig& cfg) {
  detail::check_step(step, cfg);
  return std::lerp(cfg.mask_p_start, cfg.mask_p_end, detail::progress(step, cfg));
}

// Single switch from the initial to the final length.
inline std::int64_t sequence_length(std::int64_t step, const ScheduleConfig& cfg) {
  detail::check_step(step, cfg);
  const double boundary = cfg.seq_len_switch_fraction * static_cast<double>(cfg.total_steps);
  return static_cast<double>(step) < boundary ? cfg.seq_len_start : cfg.seq_len_end;
}

// Linearly growing token budget, floored to a multiple of the current length.
inline std::int64_t batch_token_budget(std::int64_t step, const ScheduleConfig& cfg) {
  detail::check_step(step, cfg);
  std::int64_t budget = cfg.batch_tokens_start;
  if (cfg.total_steps > 0) {
    budget += (cfg.batch_tokens_end - cfg.batch_tokens_start) * step / cfg.total_steps;
  }
  const std::int64_t len = sequence_length(step, cfg);
  return budget / len * len;
}

// Tokenized documents, each framed BOS ... EOS. Windows are cut per document
// so no window spans two documents.
struct PackedDataset {
  std::vector<std::vector<TokenId>> documents;

  struct Window {
    std::uint32_t document = 0;
    std::uint32_t offset = 0;
  };

  bool empty() const { return documents.empty(); }

  std::size_t num_tokens() const {
    std::size_t n = 0;
    for (const auto& d : documents) n += d.size();
    return n;
  }

  // Window start offsets at a given length. A trailing piece with fewer than
  // two tokens carries no supervision in either objective and is dropped.
  std::vector<Window> windows(std::size_t seq_len) const {
    if (seq_len < 2) throw ConfigError("sequence length must be >= 2");
    std::vector<Window> out;
    for (std::size_t d = 0; d < documents.size(); ++d) {
      for (std::size_t off = 0; off < documents[d].size(); off += seq_len) {
        if (documents[d].size() - off >= 2) {
          out.push_back({static_cast<std::uint32_t>(d), static_cast<std::uint32_t>(off)});
        }
      }
    }
    return out;
  }

  // Materializes a window, PAD-filled to seq_len.
  std::vector<TokenId> window(const Window& w, std::size_t seq_len) const {
    const auto& doc = documents.at(w.document);
    std::vector<TokenId> out(seq_len, kPad);
    const std::size_t n = std::min(seq_len, doc.size() - w.offset);
    std::copy_n(doc.begin() + w.offset, n, out.begin());
    return out;
  }
};

// Reads documents from plain text (blank-line separated) or JSON lines with
// a "text" field (".jsonl" / ".json" extension).
inline std::vector<std::string> read_documents(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read corpus file " + path.string());
  std::vector<std::string> docs;
  std::string line;
  const auto ext = path.extension().string();
  if (ext == ".jsonl" || ext == ".json") {
    long lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error&) {
        throw FormatError(path.string() + ": invalid JSON", lineno);
      }
      if (!j.is_object() || !j.contains("text") || !j["text"].is_string()) {
        throw FormatError(path.string() + ": row has no string 'text' field", lineno);
      }
      docs.push_back(j["text"].get<std::string>());
    }
    return docs;
  }
  std::string current;
  bool have = false;
  auto flush = [&] {
    if (have) docs.push_back(current);
    current.clear();
    have = false;
  };
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) {
      flush();
      continue;
    }
    if (have) current += '\n';
    current += line;
    have = true;
  }
  flush();
  return docs;
}

inline std::vector<TokenId> frame_document(const Vocab& vocab, std::string_view text) {
  std::vector<TokenId> ids{kBos};
  const auto body = vocab.encode(text);
  ids.insert(ids.end(), body.begin(), body.end());
  ids.push_back(kEos);
  return ids;
}

inline PackedDataset ingest(const std::vector<std::filesystem::path>& paths, const Vocab& vocab) {
  PackedDataset ds;
  for (const auto& p : paths) {
    for (const auto& doc : read_documents(p)) ds.documents.push_back(frame_document(vocab, doc));
  }
  return ds;
}

struct MaskingOptions {
  std::size_t vocab_size = 0;
  std::size_t num_specials = 4;
  double mask_token_prob = 0.8;
  double random_token_prob = 0.1;
};

struct MaskedWindow {
  std::vector<TokenId> inputs;
  std::vector<TokenId> targets;
  std::vector<std::uint8_t> loss_positions;
};

inline bool maskable(std::span<const TokenId> window, std::size_t k) {
  return k >= 1 && window[k] != kPad && window[k] != kBos;
}

// Builds inputs/targets from an explicit selection of masked positions. The
// prediction for a token masked at k+1 is read from position k.
inline MaskedWindow mntp_from_selection(std::span<const TokenId> window,
                                        const std::vector<std::size_t>& selected, Rng& rng,
                                        const MaskingOptions& opt) {
  MaskedWindow out{{window.begin(), window.end()},
                   std::vector<TokenId>(window.size(), kIgnore),
                   std::vector<std::uint8_t>(window.size(), 0)};
  for (std::size_t k : selected) {
    if (k >= window.size() || !maskable(window, k)) throw InputError("position not maskable");
    const double u = rng.uniform();
    if (u < opt.mask_token_prob) {
      out.inputs[k] = kMask;
    } else if (u < opt.mask_token_prob + opt.random_token_prob) {
      if (opt.vocab_size <= opt.num_specials) throw ConfigError("no non-special tokens to sample");
      out.inputs[k] = static_cast<TokenId>(opt.num_specials + rng.below(opt.vocab_size - opt.num_specials));
    }
    out.targets[k - 1] = window[k];
    out.loss_positions[k - 1] = 1;
  }
  return out;
}

// Independent per-position selection with probability p; if nothing gets
// selected the last maskable position is forced so every window is supervised.
inline std::vector<std::size_t> select_mask_positions(std::span<const TokenId> window, double p, Rng& rng) {
  std::vector<std::size_t> selected;
  std::size_t last = 0;
  std::size_t real = 0;
  for (std::size_t k = 0; k < window.size(); ++k) {
    if (window[k] != kPad) ++real;
    if (!maskable(window, k)) continue;
    last = k;
    if (rng.uniform() < p) selected.push_back(k);
  }
  if (real < 2 || last == 0) throw InputError("window needs at least two real tokens");
  if (selected.empty()) selected.push_back(last);
  return selected;
}

inline MaskedWindow apply_mntp_masking(std::span<const TokenId> window, double p, Rng& rng,
                                       const MaskingOptions& opt) {
  if (!(p > 0.0 && p < 1.0)) throw InputError("masking probability must lie in (0, 1)");
  const auto selected = select_mask_positions(window, p, rng);
  return mntp_from_selection(window, selected, rng, opt);
}

// Next-token targets; the last real position and PAD positions carry no loss.
inline MaskedWindow causal_targets(std::span<const TokenId> window) {
  MaskedWindow out{{window.begin(), window.end()},
                   std::vector<TokenId>(window.size(), kIgnore),
                   std::vector<std::uint8_t>(window.size(), 0)};
  for (std::size_t k = 0; k + 1 < window.size(); ++k) {
    if (window[k] != kPad && window[k + 1] != kPad) {
      out.targets[k] = window[k + 1];
      out.loss_positions[k] = 1;
    }
  }
  return out;
}

struct TrainingBatch {
  std::size_t n_seq = 0;
  std::size_t seq_len = 0;
  std::vector<TokenId> inputs;   // [n_seq x seq_len]
  std::vector<TokenId> targets;  // [n_seq x seq_len], kIgnore where unsupervised
  std::vector<std::uint8_t> loss_positions;
  std::vector<Objective> modes;
  std::vector<AttentionMaskSpec> masks;

  std::span<const TokenId> input_row(std::size_t i) const {
    return std::span<const TokenId>(inputs).subspan(i * seq_len, seq_len);
  }
  std::span<const TokenId> target_row(std::size_t i) const {
    return std::span<const TokenId>(targets).subspan(i * seq_len, seq_len);
  }
  std::span<const std::uint8_t> loss_row(std::size_t i) const {
    return std::span<const std::uint8_t>(loss_positions).subspan(i * seq_len, seq_len);
  }

  std::size_t num_loss_positions() const {
    return static_cast<std::size_t>(std::count(loss_positions.begin(), loss_positions.end(), 1));
  }

  void append(const MaskedWindow& w, Objective mode) {
    if (n_seq == 0 && seq_len == 0) seq_len = w.inputs.size();
    if (w.inputs.size() != seq_len) throw InputError("window length mismatch");
    inputs.insert(inputs.end(), w.inputs.begin(), w.inputs.end());
    targets.insert(targets.end(), w.targets.begin(), w.targets.end());
    loss_positions.insert(loss_positions.end(), w.loss_positions.begin(), w.loss_positions.end());
    modes.push_back(mode);
    // Causal sequences train under the causal mask, masked ones bidirectionally.
    masks.push_back(mode == Objective::causal ? AttentionMaskSpec::causal(seq_len)
                                              : AttentionMaskSpec::bidirectional(seq_len));
    ++n_seq;
  }
};

// Position of the epoch-shuffled window stream. The permutation itself is a
// function of (seed, seq_len, epoch), so these three integers are the whole state.
struct SamplerState {
  std::int64_t seq_len = 0;
  std::int64_t epoch = 0;
  std::int64_t cursor = 0;

  friend bool operator==(const SamplerState&, const SamplerState&) = default;
};

inline std::size_t causal_count(std::size_t n_seq, const Ratio& r) {
  const auto total = static_cast<std::size_t>(r.causal + r.masked);
  return (n_seq * static_cast<std::size_t>(r.causal) + total - 1) / total;
}

// Draws budget/seq_len windows, tags the first ceil(n*c/(c+m)) as causal and
// the rest as masked, then shuffles the tags within the batch.
inline TrainingBatch build_hybrid_batch(const PackedDataset& dataset, std::int64_t step,
                                        const ScheduleConfig& cfg, std::size_t vocab_size, Rng& rng,
                                        SamplerState& sampler) {
  if (dataset.empty()) throw InputError("empty dataset");
  const std::int64_t seq_len = sequence_length(step, cfg);
  const std::int64_t budget = batch_token_budget(step, cfg);
  if (budget < seq_len) {
    throw ConfigError("batch budget " + std::to_string(budget) + " smaller than sequence length " +
                      std::to_string(seq_len));
  }
  const auto n_seq = static_cast<std::size_t>(budget / seq_len);
  const auto windows = dataset.windows(static_cast<std::size_t>(seq_len));
  if (windows.empty()) throw InputError("dataset has no usable windows");

  if (sampler.seq_len != seq_len) sampler = {seq_len, 0, 0};
  std::vector<std::size_t> order;
  auto reshuffle = [&] {
    order.resize(windows.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng perm(derive_seed(cfg.seed, static_cast<std::uint64_t>(seq_len) * 1000003ULL +
                                       static_cast<std::uint64_t>(sampler.epoch)));
    perm.shuffle(order);
  };
  reshuffle();

  std::vector<Objective> tags(n_seq, Objective::masked);
  std::fill_n(tags.begin(), causal_count(n_seq, cfg.ratio), Objective::causal);
  rng.shuffle(tags);

  const MaskingOptions opt{vocab_size, 4, cfg.mask_token_prob, cfg.random_token_prob};
  const double p = mask_probability(step, cfg);
  TrainingBatch batch;
  batch.seq_len = static_cast<std::size_t>(seq_len);
  for (std::size_t i = 0; i < n_seq; ++i) {
    if (sampler.cursor >= static_cast<std::int64_t>(order.size())) {
      ++sampler.epoch;
      sampler.cursor = 0;
      reshuffle();
    }
    const auto w = dataset.window(windows[order[static_cast<std::size_t>(sampler.cursor++)]],
                                  static_cast<std::size_t>(seq_len));
    if (tags[i] == Objective::causal) {
      batch.append(causal_targets(w), Objective::causal);
    } else {
      batch.append(apply_mntp_masking(w, p, rng, opt), Objective::masked);
    }
  }
  return batch;
}

}  // namespace hybridlm
