#pragma once

#include <cmath>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "hybridlm/error.hpp"
#include "hybridlm/model.hpp"
#include "hybridlm/tokenizer.hpp"

namespace hybridlm {

struct GenerationConfig {
  std::size_t max_new_tokens = 32;
  double repetition_penalty = 1.0;
  bool stop_on_eos = true;

  void validate() const {
    if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be at least 1");
    if (!(repetition_penalty >= 1.0) || !std::isfinite(repetition_penalty)) {
      throw ConfigError("repetition_penalty must be >= 1");
    }
  }
};

// CTRL-style: positive logits are divided by r, the rest multiplied by r.
inline void apply_repetition_penalty(std::span<double> logits, const std::unordered_set<TokenId>& seen, double r) {
  if (r == 1.0) return;
  for (TokenId id : seen) {
    double& v = logits[static_cast<std::size_t>(id)];
    v = v > 0.0 ? v / r : v * r;
  }
}

inline TokenId greedy_pick(std::span<const double> logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

// Greedy decoding under the causal mask, one full forward per step.
template <typename T>
std::vector<TokenId> greedy_generate(const ModelParameters<T>& params, std::span<const TokenId> prompt,
                                     const GenerationConfig& cfg) {
  cfg.validate();
  if (prompt.empty()) throw InputError("prompt must contain at least one token");
  if (prompt.size() + cfg.max_new_tokens > params.config.max_seq_len) {
    throw InputError("prompt length " + std::to_string(prompt.size()) + " plus " +
                     std::to_string(cfg.max_new_tokens) + " new tokens exceeds max_seq_len " +
                     std::to_string(params.config.max_seq_len));
  }
  std::vector<TokenId> ids(prompt.begin(), prompt.end());
  std::unordered_set<TokenId> seen(prompt.begin(), prompt.end());
  std::vector<TokenId> out;
  std::vector<double> row(params.config.vocab_size);
  while (out.size() < cfg.max_new_tokens) {
    const Tensor<T> logits = forward(params, std::span<const TokenId>(ids), AttentionMaskSpec::causal(ids.size()));
    const T* last = logits.row(ids.size() - 1);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = static_cast<double>(last[c]);
    apply_repetition_penalty(row, seen, cfg.repetition_penalty);
    const TokenId next = greedy_pick(row);
    out.push_back(next);
    ids.push_back(next);
    seen.insert(next);
    if (cfg.stop_on_eos && next == kEos) break;
  }
  return out;
}

// Incremental detokenizer that only emits complete UTF-8 characters.
// Bytes that can never complete a character are passed through as they are.
class StreamDecoder {
 public:
  explicit StreamDecoder(const Vocab& vocab) : vocab_(&vocab) {}

  std::string push(TokenId id) {
    if (done_) return {};
    if (id == kEos) {
      done_ = true;
      return flush();
    }
    pending_ += vocab_->token(id);
    const std::size_t keep = incomplete_tail(pending_);
    std::string ready = pending_.substr(0, pending_.size() - keep);
    pending_.erase(0, pending_.size() - keep);
    return ready;
  }

  std::string flush() {
    std::string out;
    out.swap(pending_);
    return out;
  }

  bool done() const { return done_; }

 private:
  // Length of a trailing, still-incomplete multi-byte sequence.
  static std::size_t incomplete_tail(const std::string& s) {
    const std::size_t n = s.size();
    for (std::size_t back = 1; back <= 3 && back <= n; ++back) {
      const auto c = static_cast<unsigned char>(s[n - back]);
      if ((c & 0xC0) == 0x80) continue;
      std::size_t need = 1;
      if ((c & 0xE0) == 0xC0) need = 2;
      else if ((c & 0xF0) == 0xE0) need = 3;
      else if ((c & 0xF8) == 0xF0) need = 4;
      return need > back ? back : 0;
    }
    return 0;
  }

  const Vocab* vocab_;
  std::string pending_;
  bool done_ = false;
};

inline std::string detokenize_stream(const Vocab& vocab, std::span<const TokenId> ids) {
  StreamDecoder dec(vocab);
  std::string out;
  for (TokenId id : ids) {
    out += dec.push(id);
    if (dec.done()) break;
  }
  return out + dec.flush();
}

}  // namespace hybridlm
