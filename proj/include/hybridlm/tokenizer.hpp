#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "hybridlm/error.hpp"

namespace hybridlm {

using TokenId = std::int32_t;

// Fixed special ids. Every vocabulary starts with these four, in this order.
inline constexpr TokenId kBos = 0;
inline constexpr TokenId kEos = 1;
inline constexpr TokenId kMask = 2;
inline constexpr TokenId kPad = 3;

inline const std::vector<std::string>& default_specials() {
  static const std::vector<std::string> names = {"BOS", "EOS", "MASK", "PAD"};
  return names;
}

struct Merge {
  TokenId left = 0;
  TokenId right = 0;
  TokenId result = 0;

  friend bool operator==(const Merge&, const Merge&) = default;
};

namespace detail {

inline std::uint64_t pair_key(TokenId a, TokenId b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
         static_cast<std::uint32_t>(b);
}

inline std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t nl = text.find('\n', start);
    if (nl == std::string_view::npos) {
      out.push_back(text.substr(start));
      return out;
    }
    out.push_back(text.substr(start, nl - start));
    start = nl + 1;
  }
}

// Replaces every non-overlapping (left, right) occurrence, scanning left to right.
inline void apply_merge(std::vector<TokenId>& symbols, const Merge& m) {
  std::size_t w = 0;
  for (std::size_t i = 0; i < symbols.size();) {
    if (i + 1 < symbols.size() && symbols[i] == m.left && symbols[i + 1] == m.right) {
      symbols[w++] = m.result;
      i += 2;
    } else {
      symbols[w++] = symbols[i++];
    }
  }
  symbols.resize(w);
}

// Non-overlapping adjacent pair counts: a run of r identical symbols contributes
// floor(r/2) to (x, x), which is exactly how many replacements apply_merge makes.
inline void count_pairs(const std::vector<TokenId>& s,
                        std::unordered_map<std::uint64_t, long>& counts) {
  for (std::size_t i = 0; i + 1 < s.size();) {
    ++counts[pair_key(s[i], s[i + 1])];
    if (s[i] == s[i + 1] && i + 2 < s.size() && s[i + 2] == s[i]) {
      i += 2;
    } else {
      i += 1;
    }
  }
}

}  // namespace detail

// Byte-level BPE vocabulary: specials first, then the 256 byte singletons,
// then one entry per merge that produced a new string.
class Vocab {
 public:
  Vocab() : Vocab(default_specials(), {}) {}

  // Rebuilds token tables from specials and an ordered merge list. Merge
  // results are (re)assigned here; the `result` field of the input is ignored.
  Vocab(std::vector<std::string> specials, const std::vector<std::pair<TokenId, TokenId>>& merges)
      : specials_(std::move(specials)) {
    validate_specials(specials_);
    tokens_.resize(specials_.size());
    for (int b = 0; b < 256; ++b) {
      const std::string s(1, static_cast<char>(b));
      token_to_id_.emplace(s, static_cast<TokenId>(tokens_.size()));
      tokens_.push_back(s);
    }
    for (const auto& [l, r] : merges) add_merge(l, r);
  }

  std::size_t size() const { return tokens_.size(); }
  std::size_t num_specials() const { return specials_.size(); }
  const std::vector<std::string>& specials() const { return specials_; }
  const std::vector<Merge>& merges() const { return merges_; }

  bool is_special(TokenId id) const {
    return id >= 0 && static_cast<std::size_t>(id) < specials_.size();
  }

  TokenId byte_token(unsigned char b) const {
    return static_cast<TokenId>(specials_.size() + b);
  }

  // Token bytes; specials render as the empty string.
  const std::string& token(TokenId id) const {
    check_id(id);
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::optional<TokenId> find(std::string_view s) const {
    auto it = token_to_id_.find(std::string(s));
    if (it == token_to_id_.end()) return std::nullopt;
    return it->second;
  }

  // Adds a merge of two existing tokens. When the concatenation already
  // exists the merge maps onto that id and the vocabulary does not grow.
  TokenId add_merge(TokenId left, TokenId right) {
    check_id(left);
    check_id(right);
    if (is_special(left) || is_special(right)) {
      throw InputError("merges may not involve special tokens");
    }
    const std::uint64_t key = detail::pair_key(left, right);
    if (merge_rank_.contains(key)) throw InputError("duplicate merge");
    std::string merged = tokens_[left] + tokens_[right];
    if (merged.find('\n') != std::string::npos) newline_free_ = false;
    TokenId result;
    if (auto it = token_to_id_.find(merged); it != token_to_id_.end()) {
      result = it->second;
    } else {
      result = static_cast<TokenId>(tokens_.size());
      token_to_id_.emplace(merged, result);
      tokens_.push_back(std::move(merged));
    }
    merge_rank_.emplace(key, merges_.size());
    merges_.push_back({left, right, result});
    return result;
  }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> out;
    if (text.empty()) return out;
    if (newline_free_) {
      // No merge crosses a newline, so lines encode independently.
      const auto lines = detail::split_lines(text);
      const TokenId nl = byte_token('\n');
      for (std::size_t i = 0; i < lines.size(); ++i) {
        if (i > 0) out.push_back(nl);
        encode_segment(lines[i], out);
      }
    } else {
      encode_segment(text, out);
    }
    return out;
  }

  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) out += token(id);
    return out;
  }

  friend bool operator==(const Vocab& a, const Vocab& b) {
    return a.specials_ == b.specials_ && a.merges_ == b.merges_ && a.tokens_ == b.tokens_;
  }

 private:
  static void validate_specials(const std::vector<std::string>& specials) {
    const auto& req = default_specials();
    if (specials.size() < req.size() || !std::equal(req.begin(), req.end(), specials.begin())) {
      throw ConfigError("specials must start with BOS,EOS,MASK,PAD");
    }
    std::set<std::string> seen;
    for (const auto& s : specials) {
      if (s.empty() || !seen.insert(s).second || s.find_first_of(",\n\r\t") != std::string::npos) {
        throw ConfigError("invalid special token name '" + s + "'");
      }
    }
  }

  void check_id(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw InputError("token id " + std::to_string(id) + " out of range [0, " +
                       std::to_string(tokens_.size()) + ")");
    }
  }

  void encode_segment(std::string_view text, std::vector<TokenId>& out) const {
    std::vector<TokenId> s;
    s.reserve(text.size());
    for (char c : text) s.push_back(byte_token(static_cast<unsigned char>(c)));
    // Equivalent to applying the merge list in order, skipping ranks with no
    // occurrence. Ranks below the last applied one are never revisited.
    std::size_t floor = 0;
    for (;;) {
      std::size_t best = merges_.size();
      for (std::size_t i = 0; i + 1 < s.size(); ++i) {
        auto it = merge_rank_.find(detail::pair_key(s[i], s[i + 1]));
        if (it != merge_rank_.end() && it->second >= floor && it->second < best) best = it->second;
      }
      if (best == merges_.size()) break;
      detail::apply_merge(s, merges_[best]);
      floor = best + 1;
    }
    out.insert(out.end(), s.begin(), s.end());
  }

  std::vector<std::string> specials_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> token_to_id_;
  std::vector<Merge> merges_;
  std::unordered_map<std::uint64_t, std::size_t> merge_rank_;
  bool newline_free_ = true;
};

// Greedy BPE training: repeatedly merge the most frequent adjacent pair
// (counted within lines, non-overlapping) until the vocabulary reaches
// vocab_size. Ties go to the lexicographically smallest merged string.
inline Vocab train_bpe(const std::vector<std::string>& corpus_lines, std::size_t vocab_size,
                       const std::vector<std::string>& specials = default_specials()) {
  Vocab vocab(specials, {});
  if (vocab_size < vocab.size()) {
    throw ConfigError("vocab_size " + std::to_string(vocab_size) + " is smaller than the base alphabet plus specials (" +
                      std::to_string(vocab.size()) + ")");
  }
  if (corpus_lines.empty()) throw InputError("empty corpus");
  if (vocab_size == vocab.size()) return vocab;

  std::map<std::string, long> line_freq;
  for (const auto& raw : corpus_lines) {
    for (auto piece : detail::split_lines(raw)) {
      if (piece.size() >= 2) ++line_freq[std::string(piece)];
    }
  }
  struct Word {
    std::vector<TokenId> symbols;
    long freq;
  };
  std::vector<Word> words;
  words.reserve(line_freq.size());
  for (const auto& [line, f] : line_freq) {
    Word w{{}, f};
    for (char c : line) w.symbols.push_back(vocab.byte_token(static_cast<unsigned char>(c)));
    words.push_back(std::move(w));
  }

  // Ranking key: highest count first, then smallest merged string, then ids.
  using Entry = std::tuple<long, std::string, TokenId, TokenId>;
  std::set<Entry> ranking;
  std::unordered_map<std::uint64_t, long> counts;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> where;

  auto entry_for = [&](std::uint64_t key, long c) {
    const auto l = static_cast<TokenId>(key >> 32);
    const auto r = static_cast<TokenId>(key & 0xffffffffu);
    return Entry{-c, vocab.token(l) + vocab.token(r), l, r};
  };
  auto adjust = [&](std::uint64_t key, long delta) {
    long& c = counts[key];
    if (c > 0) ranking.erase(entry_for(key, c));
    c += delta;
    if (c > 0) ranking.insert(entry_for(key, c));
  };

  {
    std::unordered_map<std::uint64_t, long> local;
    for (std::size_t w = 0; w < words.size(); ++w) {
      local.clear();
      detail::count_pairs(words[w].symbols, local);
      for (const auto& [key, c] : local) {
        counts[key] += c * words[w].freq;
        where[key].push_back(w);
      }
    }
    for (const auto& [key, c] : counts) ranking.insert(entry_for(key, c));
  }

  std::vector<std::size_t> visited(words.size(), 0);
  std::size_t stamp = 0;
  std::unordered_map<std::uint64_t, long> before;
  std::unordered_map<std::uint64_t, long> after;
  while (vocab.size() < vocab_size) {
    if (ranking.empty()) {
      throw ConfigError("corpus has too few distinct pairs to reach vocab_size " +
                        std::to_string(vocab_size) + " (stopped at " + std::to_string(vocab.size()) + ")");
    }
    const auto [neg_count, merged, left, right] = *ranking.begin();
    (void)neg_count;
    (void)merged;
    const std::uint64_t key = detail::pair_key(left, right);
    vocab.add_merge(left, right);
    const Merge m = vocab.merges().back();

    ++stamp;
    const std::vector<std::size_t> affected = std::move(where[key]);
    where.erase(key);
    for (std::size_t w : affected) {
      if (visited[w] == stamp) continue;
      visited[w] = stamp;
      Word& word = words[w];
      before.clear();
      after.clear();
      detail::count_pairs(word.symbols, before);
      if (!before.contains(key)) continue;
      detail::apply_merge(word.symbols, m);
      detail::count_pairs(word.symbols, after);
      for (const auto& [k, c] : before) {
        auto it = after.find(k);
        const long delta = (it == after.end() ? 0 : it->second) - c;
        if (delta != 0) adjust(k, delta * word.freq);
      }
      for (const auto& [k, c] : after) {
        if (!before.contains(k)) {
          adjust(k, c * word.freq);
        }
        if (k != key) where[k].push_back(w);
      }
    }
    // The merged pair is gone from every word; drop any residue.
    if (auto it = counts.find(key); it != counts.end() && it->second > 0) adjust(key, -it->second);
  }
  return vocab;
}

inline std::vector<TokenId> encode(const Vocab& vocab, std::string_view text) {
  return vocab.encode(text);
}

inline std::string decode(const Vocab& vocab, std::span<const TokenId> ids) {
  return vocab.decode(ids);
}

namespace detail {

inline std::string escape_token(std::string_view s) {
  static constexpr char hex[] = "0123456789ABCDEF";
  std::string out;
  for (char ch : s) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x20 || c >= 0x7f || c == '\\') {
      out += "\\x";
      out += hex[c >> 4];
      out += hex[c & 0xf];
    } else {
      out += ch;
    }
  }
  return out;
}

inline std::string unescape_token(std::string_view s, long line) {
  auto hexval = [&](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    throw FormatError("bad escape sequence", line);
  };
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out += s[i];
      continue;
    }
    if (i + 3 >= s.size()) throw FormatError("truncated escape sequence", line);
    if (s[i + 1] != 'x') throw FormatError("bad escape sequence", line);
    out += static_cast<char>(hexval(s[i + 2]) * 16 + hexval(s[i + 3]));
    i += 3;
  }
  return out;
}

}  // namespace detail

inline void save_vocab(const Vocab& vocab, const std::filesystem::path& path) {
  std::ostringstream os;
  os << "vocab_size=" << vocab.size() << '\n';
  os << "specials=";
  for (std::size_t i = 0; i < vocab.specials().size(); ++i) {
    os << (i ? "," : "") << vocab.specials()[i];
  }
  os << '\n';
  for (const Merge& m : vocab.merges()) {
    os << detail::escape_token(vocab.token(m.left)) << '\t' << detail::escape_token(vocab.token(m.right))
       << '\n';
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write vocab file " + path.string());
  f << os.str();
  if (!f) throw IoError("failed writing vocab file " + path.string());
}

inline Vocab load_vocab(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open vocab file " + path.string());
  std::string line;
  long lineno = 0;

  auto header = [&](std::string_view key) {
    if (!std::getline(f, line)) throw FormatError("missing '" + std::string(key) + "' header", lineno + 1);
    ++lineno;
    const std::string prefix = std::string(key) + "=";
    if (!line.starts_with(prefix)) throw FormatError("expected '" + prefix + "...'", lineno);
    return line.substr(prefix.size());
  };

  const std::string size_str = header("vocab_size");
  std::size_t declared = 0;
  try {
    std::size_t pos = 0;
    declared = std::stoul(size_str, &pos);
    if (pos != size_str.size()) throw std::invalid_argument("trailing");
  } catch (const std::exception&) {
    throw FormatError("invalid vocab_size '" + size_str + "'", lineno);
  }

  std::vector<std::string> specials;
  {
    const std::string list = header("specials");
    std::stringstream ss(list);
    std::string name;
    while (std::getline(ss, name, ',')) specials.push_back(name);
  }
  Vocab vocab = [&] {
    try {
      return Vocab(specials, {});
    } catch (const ConfigError& e) {
      throw FormatError(e.what(), lineno);
    }
  }();

  while (std::getline(f, line)) {
    ++lineno;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      throw FormatError("merge line must be '<left>\\t<right>'", lineno);
    }
    const std::string left = detail::unescape_token(std::string_view(line).substr(0, tab), lineno);
    const std::string right = detail::unescape_token(std::string_view(line).substr(tab + 1), lineno);
    const auto l = vocab.find(left);
    const auto r = vocab.find(right);
    if (!l || !r) throw FormatError("merge refers to unknown token", lineno);
    try {
      vocab.add_merge(*l, *r);
    } catch (const InputError& e) {
      throw FormatError(e.what(), lineno);
    }
  }
  if (vocab.size() != declared) {
    throw FormatError("vocab_size=" + std::to_string(declared) + " but merges produce " +
                          std::to_string(vocab.size()) + " tokens (truncated file?)",
                      lineno);
  }
  return vocab;
}

}  // namespace hybridlm
