#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hybridlm/error.hpp"
#include "hybridlm/tokenizer.hpp"

namespace hybridlm {

enum class MaskKind { bidirectional, causal, prefix };

inline std::string_view to_string(MaskKind k) {
  switch (k) {
    case MaskKind::bidirectional: return "bidirectional";
    case MaskKind::causal: return "causal";
    case MaskKind::prefix: return "prefix";
  }
  return "?";
}

struct AttentionMaskSpec {
  MaskKind kind = MaskKind::causal;
  std::size_t seq_len = 0;
  std::size_t prefix_len = 0;  // prefix only

  static AttentionMaskSpec bidirectional(std::size_t n) { return {MaskKind::bidirectional, n, 0}; }
  static AttentionMaskSpec causal(std::size_t n) { return {MaskKind::causal, n, 0}; }
  static AttentionMaskSpec prefix(std::size_t n, std::size_t p) { return {MaskKind::prefix, n, p}; }

  void validate() const {
    if (kind == MaskKind::prefix && (prefix_len < 1 || prefix_len > seq_len)) {
      throw InputError("prefix_len " + std::to_string(prefix_len) + " outside [1, " +
                       std::to_string(seq_len) + "]");
    }
  }

  // Whether query q may attend to key k, ignoring padding.
  bool visible(std::size_t q, std::size_t k) const {
    switch (kind) {
      case MaskKind::bidirectional: return true;
      case MaskKind::causal: return k <= q;
      case MaskKind::prefix: return (q < prefix_len && k < prefix_len) || (q >= prefix_len && k <= q);
    }
    return false;
  }
};

// Row-major [seq_len x seq_len] visibility matrix, 1 = visible. When ids are
// given, PAD key columns are hidden from every query.
inline std::vector<std::uint8_t> build_attention_mask(const AttentionMaskSpec& spec,
                                                      std::span<const TokenId> ids = {}) {
  spec.validate();
  if (!ids.empty() && ids.size() != spec.seq_len) throw InputError("mask/ids length mismatch");
  const std::size_t n = spec.seq_len;
  std::vector<std::uint8_t> m(n * n, 0);
  for (std::size_t q = 0; q < n; ++q) {
    for (std::size_t k = 0; k < n; ++k) {
      const bool pad = !ids.empty() && ids[k] == kPad;
      m[q * n + k] = spec.visible(q, k) && !pad ? 1 : 0;
    }
  }
  return m;
}

}  // namespace hybridlm
