// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.
// Usage: acceptance [criterion numbers...]   (default: all)

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "test_util.hpp"

using namespace hybridlm;
using hybridlm::testing::random_ids;
using hybridlm::testing::random_params;
using hybridlm::testing::TempDir;
using hybridlm::testing::tiny_config;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(3);
  ss << v;
  return ss.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------- 1

double batch_loss(const ModelParameters<double>& p, const TrainingBatch& batch) {
  std::vector<Tensor<double>> logits;
  for (std::size_t i = 0; i < batch.n_seq; ++i) logits.push_back(forward(p, batch.input_row(i), batch.masks[i]));
  return hybrid_loss(logits, batch).total;
}

Outcome gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto cfg = tiny_config(32, 16, 2);
  auto p = random_params<double>(cfg, 101);
  Rng rng(102);
  TrainingBatch batch;
  batch.append(causal_targets(random_ids(rng, 10, cfg.vocab_size)), Objective::causal);
  const auto masked_src = random_ids(rng, 10, cfg.vocab_size);
  batch.append(mntp_from_selection(masked_src, {2, 5, 9}, rng, {cfg.vocab_size, 4, 0.8, 0.1}), Objective::masked);

  auto grads = ModelParameters<double>::zeros(cfg);
  loss_and_gradients(p, batch, grads);
  std::vector<const Tensor<double>*> gp;
  grads.for_each([&](const std::string&, Tensor<double>& t) { gp.push_back(&t); });

  const double h = 1e-5;
  double worst = 0.0;
  std::string worst_name;
  std::size_t groups = 0;
  std::size_t idx = 0;
  p.for_each([&](const std::string& name, Tensor<double>& t) {
    const Tensor<double>& g = *gp[idx++];
    double diff = 0.0, norm = 0.0;
    for (std::size_t e = 0; e < t.size(); ++e) {
      const double keep = t.data[e];
      t.data[e] = keep + h;
      const double up = batch_loss(p, batch);
      t.data[e] = keep - h;
      const double down = batch_loss(p, batch);
      t.data[e] = keep;
      const double numeric = (up - down) / (2 * h);
      diff += (numeric - g.data[e]) * (numeric - g.data[e]);
      norm += std::max(numeric * numeric, g.data[e] * g.data[e]);
    }
    const double rel = std::sqrt(diff / std::max(norm, 1e-30));
    ++groups;
    if (rel > worst) {
      worst = rel;
      worst_name = name;
    }
  });
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 60.0, std::to_string(groups) + " groups, worst relative error " + fmt(worst) + " (" +
                                            worst_name + "), " + fmt(secs) + " s"};
}

// ---------------------------------------------------------------- 2

Outcome mntp_shift() {
  Rng rng(202);
  const std::size_t vocab = 50;
  std::size_t supervised = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t len = 2 + rng.below(40);
    auto window = random_ids(rng, len, vocab);
    const std::size_t pads = rng.below(len - 1);
    for (std::size_t k = len - pads; k < len; ++k) window[k] = kPad;
    const double p = 0.05 + 0.9 * rng.uniform();
    const auto m = apply_mntp_masking(window, p, rng, {vocab, 4, 0.8, 0.1});
    bool any = false;
    for (std::size_t k = 0; k < len; ++k) {
      if (m.loss_positions[k]) {
        any = true;
        ++supervised;
        if (k + 1 >= len || m.targets[k] != window[k + 1]) {
          return {false, "trial " + std::to_string(trial) + ": target at " + std::to_string(k) + " is not token k+1"};
        }
      } else if (m.targets[k] != kIgnore) {
        return {false, "trial " + std::to_string(trial) + ": unsupervised position has a target"};
      }
      // Any corrupted input must be predicted from the position before it.
      if (m.inputs[k] != window[k] && (k == 0 || !m.loss_positions[k - 1])) {
        return {false, "trial " + std::to_string(trial) + ": corrupted position " + std::to_string(k) + " unsupervised"};
      }
    }
    if (!any) return {false, "trial " + std::to_string(trial) + ": no supervised position"};
  }
  return {true, "1000 windows, " + std::to_string(supervised) + " supervised targets all equal token k+1"};
}

// ---------------------------------------------------------------- 3

template <typename T>
bool rows_equal(const Tensor<T>& a, const Tensor<T>& b, std::size_t rows) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < a.cols(); ++c) {
      if (a(r, c) != b(r, c)) return false;
    }
  }
  return true;
}

template <typename T>
std::string mask_trial(Rng& rng, int trial) {
  const std::size_t heads = 1 + rng.below(3);
  const std::size_t hidden = heads * 2 * (1 + rng.below(4));
  auto cfg = tiny_config(8 + rng.below(40), hidden, 1 + rng.below(3));
  cfg.n_heads = heads;
  cfg.ff_intermediate_size = 4 + rng.below(20);
  cfg.tie_embeddings = rng.uniform() < 0.5;
  const auto p = random_params<T>(cfg, 3000 + static_cast<std::uint64_t>(trial), 0.5);
  const std::size_t n = 2 + rng.below(20);
  auto ids = random_ids(rng, n, cfg.vocab_size);
  const std::span<const TokenId> s(ids);
  auto redraw = [&](std::vector<TokenId> v, std::size_t from) {
    for (std::size_t k = from; k < v.size(); ++k) v[k] = static_cast<TokenId>(4 + rng.below(cfg.vocab_size - 4));
    return v;
  };

  const auto causal = forward(p, s, AttentionMaskSpec::causal(n));
  const std::size_t t = rng.below(n);
  const auto changed = redraw(ids, t + 1);
  if (!rows_equal(causal, forward(p, std::span<const TokenId>(changed), AttentionMaskSpec::causal(n)), t + 1)) {
    return "causal perturbation leaked";
  }
  const std::size_t prefix = 1 + rng.below(n);
  const auto spec = AttentionMaskSpec::prefix(n, prefix);
  const auto base = forward(p, s, spec);
  const auto tail = redraw(ids, prefix);
  if (!rows_equal(base, forward(p, std::span<const TokenId>(tail), spec), prefix)) return "prefix locality failed";
  if (!(forward(p, s, AttentionMaskSpec::prefix(n, n)) == forward(p, s, AttentionMaskSpec::bidirectional(n)))) {
    return "prefix(len) differs from bidirectional";
  }
  if (!(forward(p, s, AttentionMaskSpec::prefix(n, 1)) == causal)) return "prefix(1) differs from causal";
  return "";
}

Outcome mask_modes() {
  Rng rng(303);
  for (int trial = 0; trial < 100; ++trial) {
    const std::string err = trial % 2 ? mask_trial<float>(rng, trial) : mask_trial<double>(rng, trial);
    if (!err.empty()) return {false, "configuration " + std::to_string(trial) + ": " + err};
  }
  return {true, "100 random configurations, all comparisons bit-exact"};
}

// ---------------------------------------------------------------- 4

Outcome schedule_endpoints() {
  ScheduleConfig s;  // 1M -> 4M tokens, 0.30 -> 0.15
  const OptimizerConfig opt;
  const std::int64_t T = s.total_steps;
  std::vector<std::string> bad;
  if (mask_probability(0, s) != 0.30) bad.push_back("mask_p(0)");
  if (mask_probability(T, s) != 0.15) bad.push_back("mask_p(T)");
  if (batch_token_budget(0, s) != 1048576 || batch_token_budget(0, s) * 4 != batch_token_budget(T, s)) {
    bad.push_back("batch budget quarter");
  }
  if (batch_token_budget(T, s) != 4194304) bad.push_back("batch budget max");
  const std::int64_t w = warmup_steps(T, opt);
  const double peak = learning_rate(w, T, opt);
  const double last = learning_rate(T, T, opt);
  if (std::abs(peak - 0.0141) > 1e-12) bad.push_back("lr at warmup end");
  if (std::abs(last - 0.00141) > 1e-12) bad.push_back("lr at final step");
  if (!bad.empty()) {
    std::string d;
    for (const auto& b : bad) d += b + " ";
    return {false, "wrong: " + d};
  }
  return {true, "mask_p 0.3 -> 0.15, budget 1048576 -> 4194304, lr(" + std::to_string(w) + ") = " + fmt(peak) +
                    ", lr(" + std::to_string(T) + ") = " + fmt(last)};
}

// ---------------------------------------------------------------- 5

Outcome lamb_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(505);
  double worst = 0.0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t n = 1 + rng.below(64);
    std::vector<double> p(n), g(n), m(n), v(n);
    const double pscale = std::exp(3.0 * rng.normal());
    const double gscale = std::exp(3.0 * rng.normal());
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = pscale * rng.normal();
      g[i] = gscale * rng.normal();
      m[i] = gscale * 0.5 * rng.normal();
      v[i] = gscale * gscale * rng.uniform();
    }
    const double lr = 1e-4 + 0.1 * rng.uniform();
    const double b1 = 0.5 + 0.49 * rng.uniform();
    const double b2 = 0.9 + 0.0999 * rng.uniform();
    const double eps = std::pow(10.0, -4.0 - 6.0 * rng.uniform());
    const double wd = rng.uniform() < 0.3 ? 0.0 : 0.2 * rng.uniform();
    const int t = 1 + static_cast<int>(rng.below(1000));
    auto rp = p, rm = m, rv = v;
    const auto p0 = p;
    lamb_update_tensor<double>(p, g, m, v, t, {lr, b1, b2, eps, wd});
    oracle::lamb(rp, g, rm, rv, t, {lr, b1, b2, eps, wd});
    for (std::size_t i = 0; i < n; ++i) {
      const double scale = std::max(std::abs(rp[i]), std::abs(rp[i] - p0[i]));
      if (scale > 0) worst = std::max(worst, std::abs(p[i] - rp[i]) / scale);
      if (rm[i] != 0) worst = std::max(worst, std::abs(m[i] - rm[i]) / std::abs(rm[i]));
      if (rv[i] != 0) worst = std::max(worst, std::abs(v[i] - rv[i]) / std::abs(rv[i]));
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-10, "10000 steps, worst relative difference " + fmt(worst) + ", " + fmt(secs) + " s"};
}

// ---------------------------------------------------------------- 6

Outcome identity_alpha() {
  Rng rng(606);
  double worst = 0.0;
  for (int trial = 0; trial < 12; ++trial) {
    auto cfg = tiny_config(20 + rng.below(30), 8 * (1 + rng.below(3)), 1 + rng.below(3));
    cfg.tie_embeddings = trial % 2 == 0;
    auto p = random_params<double>(cfg, 6000 + static_cast<std::uint64_t>(trial));
    for (std::size_t i = 1; i <= cfg.num_sublayers(); ++i) {
      for (std::size_t j = 1; j <= i; ++j) p.alpha[alpha_index(i, j)] = i == j ? 1.0 : 0.0;
    }
    const std::size_t n = 2 + rng.below(15);
    const auto ids = random_ids(rng, n, cfg.vocab_size);
    const MaskKind kind = trial % 3 == 0 ? MaskKind::causal : trial % 3 == 1 ? MaskKind::bidirectional : MaskKind::prefix;
    const AttentionMaskSpec spec{kind, n, kind == MaskKind::prefix ? 1 + rng.below(n) : 0};
    const auto got = forward(p, std::span<const TokenId>(ids), spec);
    const auto ref = oracle::sequential_logits(p, ids, build_attention_mask(spec, ids));
    double diff = 0.0, mag = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < cfg.vocab_size; ++c) {
        diff = std::max(diff, std::abs(got(r, c) - ref[r][c]));
        mag = std::max(mag, std::abs(ref[r][c]));
      }
    }
    worst = std::max(worst, diff / mag);
  }
  return {worst <= 1e-6, "12 configurations, worst relative difference " + fmt(worst)};
}

// ---------------------------------------------------------------- 7

// Eight 62-byte sentences: with BOS/EOS each document is 64 byte tokens and
// the corpus is exactly 512 tokens.
const std::vector<std::string>& memorization_docs() {
  static const std::vector<std::string> docs = {
      "the quick brown fox jumps over the lazy dog near the river bed",
      "a small red hen found seven grains of wheat in the dusty yard.",
      "each winter the old lighthouse keeper painted the stairs blue.",
      "two sleepy owls argued about the moon until the sun came back.",
      "my neighbour grows giant pumpkins and sells them at the fairs.",
      "the train to the coast leaves at nine and returns at midnight.",
      "she folded the letter twice and hid it inside a book of poems.",
      "green frogs sing loudly in the pond after a long summer storm.",
  };
  return docs;
}

std::string shuffle_words(const std::string& s, Rng& rng) {
  std::vector<std::string> words;
  std::istringstream in(s);
  for (std::string w; in >> w;) words.push_back(w);
  for (std::size_t i = words.size() - 1; i > 0; --i) std::swap(words[i], words[rng.below(i + 1)]);
  std::string out;
  for (const auto& w : words) out += (out.empty() ? "" : " ") + w;
  return out;
}

Outcome memorization() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& docs = memorization_docs();
  const Vocab vocab = train_bpe(docs, 260, default_specials());  // byte level
  PackedDataset ds;
  for (const auto& d : docs) ds.documents.push_back(frame_document(vocab, d));
  if (ds.num_tokens() != 512) return {false, "corpus is " + std::to_string(ds.num_tokens()) + " tokens"};

  TrainConfig cfg;
  cfg.model.n_layers = 2;
  cfg.model.hidden_size = 64;
  cfg.model.ff_intermediate_size = 128;
  cfg.model.n_heads = 4;
  cfg.model.vocab_size = vocab.size();
  cfg.model.max_seq_len = 128;
  cfg.model.dropout_p = 0.0;
  cfg.model.attention_dropout_p = 0.0;
  auto& s = cfg.schedule;
  s.total_steps = 300;
  s.batch_tokens_start = 4096;
  s.batch_tokens_end = 4096;
  s.seq_len_start = 64;
  s.seq_len_end = 64;
  s.ratio = Ratio{1, 3};
  s.seed = 7;
  cfg.optimizer.initial_learning_rate = 0.02;
  cfg.optimizer.final_learning_rate = 0.002;
  cfg.optimizer.warmup_ratio = 0.05;
  cfg.checkpoint_every = 1000;

  auto state = TrainState::fresh(cfg);
  std::vector<double> losses;
  bool finite = true;
  TrainHooks hooks;
  hooks.on_step = [&](const StepMetrics& m) {
    losses.push_back(m.loss.total);
    finite = finite && std::isfinite(m.loss.total);
  };
  train(state, ds, cfg, hooks);
  // Mean over the last 10 steps so a single lucky batch cannot pass.
  const double tail = std::accumulate(losses.end() - 10, losses.end(), 0.0) / 10.0;
  const auto& params = state.params;

  std::size_t gen_ok = 0, causal_ok = 0, masked_ok = 0, cloze_ok = 0;
  Rng rng(77);
  for (const auto& d : docs) {
    const auto ids = frame_document(vocab, d);
    const std::size_t half = ids.size() / 2;
    GenerationConfig g;
    g.max_new_tokens = ids.size() - half;
    const auto out = greedy_generate(params, std::span<const TokenId>(ids.data(), half), g);
    if (std::equal(out.begin(), out.end(), ids.begin() + static_cast<long>(half), ids.end())) ++gen_ok;

    EvalItem item;
    item.kind = ItemKind::pair;
    std::string corrupt = shuffle_words(d, rng);
    while (corrupt == d) corrupt = shuffle_words(d, rng);
    item.candidates = {d, corrupt};
    if (rank_choices(params, vocab, item, {ScoreAttention::causal, 1.0}).chosen == 0u) ++causal_ok;
    if (rank_choices(params, vocab, item, {ScoreAttention::bidirectional, 1.0}).chosen == 0u) ++masked_ok;

    // k = 1: the final byte of the sentence, read through one MASK slot.
    const std::vector<TokenId> ctx(ids.begin(), ids.end() - 2);
    const std::vector<TokenId> gold{ids[ids.size() - 2]};
    if (cloze_ids(params, std::span<const TokenId>(ctx), std::span<const TokenId>(gold), ScoreAttention::bidirectional)
            .exact_match) {
      ++cloze_ok;
    }
  }
  const std::size_t n = docs.size();
  const double secs = seconds_since(t0);
  const bool pass = finite && tail < 0.1 && gen_ok == n && causal_ok == n && masked_ok == n && cloze_ok == n &&
                    secs < 300.0;
  return {pass, "final loss " + fmt(tail) + " (mean of last 10 steps), generation " + std::to_string(gen_ok) + "/" +
                    std::to_string(n) + ", ranking causal " + std::to_string(causal_ok) + "/" + std::to_string(n) +
                    " masked " + std::to_string(masked_ok) + "/" + std::to_string(n) + ", cloze " +
                    std::to_string(cloze_ok) + "/" + std::to_string(n) + ", " + fmt(secs) + " s"};
}

// ---------------------------------------------------------------- 8

// Toy English with subject-verb agreement across an attractor phrase.
struct Grammar {
  struct Noun {
    std::string sg, pl;
  };
  struct Verb {
    std::string sg, pl;
  };
  std::vector<Noun> nouns{{"dog", "dogs"},         {"cat", "cats"},         {"bird", "birds"},
                          {"farmer", "farmers"},   {"child", "children"},   {"teacher", "teachers"},
                          {"horse", "horses"},     {"girl", "girls"},       {"boy", "boys"},
                          {"doctor", "doctors"}};
  std::vector<Verb> intrans{{"runs", "run"}, {"sleeps", "sleep"}, {"sings", "sing"}, {"waits", "wait"},
                            {"laughs", "laugh"}};
  std::vector<Verb> trans{{"sees", "see"}, {"likes", "like"}, {"chases", "chase"}, {"helps", "help"},
                          {"finds", "find"}};
  std::vector<std::string> adjs{"small", "old", "happy", "tall", "quiet", "red"};
  std::vector<std::string> preps{"near", "behind", "with"};

  template <typename Pick>
  std::string np(Rng& rng, bool plural, const Pick& pick) const {
    std::string out = "the ";
    if (rng.uniform() < 0.4) out += pick(adjs) + " ";
    const auto& n = nouns[rng.below(nouns.size())];
    return out + (plural ? n.pl : n.sg);
  }

  // Returns the sentence and, when wrong_verb is set, its agreement-violating twin.
  std::pair<std::string, std::string> sentence(Rng& rng) const {
    auto pick = [&](const std::vector<std::string>& v) { return v[rng.below(v.size())]; };
    const bool plural = rng.uniform() < 0.5;
    std::string subj = np(rng, plural, pick);
    if (rng.uniform() < 0.5) subj += " " + pick(preps) + " " + np(rng, rng.uniform() < 0.5, pick);
    std::string good = subj, bad = subj;
    if (rng.uniform() < 0.5) {
      const auto& v = intrans[rng.below(intrans.size())];
      good += " " + (plural ? v.pl : v.sg);
      bad += " " + (plural ? v.sg : v.pl);
    } else {
      const auto& v = trans[rng.below(trans.size())];
      const std::string obj = np(rng, rng.uniform() < 0.5, pick);
      good += " " + (plural ? v.pl : v.sg) + " " + obj;
      bad += " " + (plural ? v.sg : v.pl) + " " + obj;
    }
    return {good + " .", bad + " ."};
  }

  std::string document(Rng& rng) const {
    std::string out;
    const std::size_t n = 2 + rng.below(3);
    for (std::size_t i = 0; i < n; ++i) out += (i ? " " : "") + sentence(rng).first;
    return out;
  }
};

struct TrendModel {
  double pll_accuracy = 0.0;
  double causal_loss = 0.0;
};

TrendModel train_trend_model(const PackedDataset& ds, std::size_t vocab_size, Ratio ratio, std::uint64_t seed,
                             const Vocab& vocab, const std::vector<EvalItem>& pairs,
                             const std::vector<std::vector<TokenId>>& heldout) {
  TrainConfig cfg;
  cfg.model.n_layers = 2;
  cfg.model.hidden_size = 64;
  cfg.model.ff_intermediate_size = 128;
  cfg.model.n_heads = 4;
  cfg.model.vocab_size = vocab_size;
  cfg.model.max_seq_len = 64;
  cfg.model.dropout_p = 0.0;
  cfg.model.attention_dropout_p = 0.0;
  auto& s = cfg.schedule;
  s.total_steps = 500;
  s.batch_tokens_start = 1024;
  s.batch_tokens_end = 2048;
  s.seq_len_start = 32;
  s.seq_len_end = 64;
  s.ratio = ratio;
  s.seed = seed;
  cfg.optimizer.initial_learning_rate = 0.02;
  cfg.optimizer.final_learning_rate = 0.002;
  cfg.optimizer.warmup_ratio = 0.05;
  cfg.checkpoint_every = 1000;
  auto state = TrainState::fresh(cfg);
  train(state, ds, cfg);

  TrendModel out;
  std::size_t correct = 0;
  for (const auto& item : pairs) {
    if (rank_choices(state.params, vocab, item, {ScoreAttention::bidirectional, 1.0}).chosen == 0u) ++correct;
  }
  out.pll_accuracy = static_cast<double>(correct) / static_cast<double>(pairs.size());
  double nll = 0.0;
  std::size_t tokens = 0;
  for (const auto& ids : heldout) {
    const auto v = validation_nll(state.params, std::span<const TokenId>(ids), ScoreAttention::causal, 0.0, 1.0);
    nll += v.nll_sum;
    tokens += v.tokens;
  }
  out.causal_loss = nll / static_cast<double>(tokens);
  return out;
}

Outcome hybrid_trend() {
  const auto t0 = std::chrono::steady_clock::now();
  const Grammar grammar;
  Rng data_rng(808);
  std::vector<std::string> docs;
  std::size_t bytes = 0;
  while (bytes < 400000) {
    docs.push_back(grammar.document(data_rng));
    bytes += docs.back().size();
  }
  const Vocab vocab = train_bpe(docs, 400, default_specials());
  PackedDataset ds;
  for (const auto& d : docs) {
    ds.documents.push_back(frame_document(vocab, d));
    if (ds.num_tokens() >= 50000) break;
  }
  const std::size_t corpus_tokens = ds.num_tokens();

  Rng eval_rng(809);
  std::vector<EvalItem> pairs;
  while (pairs.size() < 200) {
    const auto [good, bad] = grammar.sentence(eval_rng);
    EvalItem it;
    it.kind = ItemKind::pair;
    it.candidates = {good, bad};
    pairs.push_back(it);
  }
  std::vector<std::vector<TokenId>> heldout;
  for (int i = 0; i < 100; ++i) heldout.push_back(frame_document(vocab, grammar.document(eval_rng)));

  struct Avg {
    double acc = 0, loss = 0;
  } causal_only, masked_only, hybrid;
  const std::uint64_t seeds[] = {1, 2, 3};
  for (std::uint64_t seed : seeds) {
    const auto c = train_trend_model(ds, vocab.size(), {1, 0}, seed, vocab, pairs, heldout);
    const auto m = train_trend_model(ds, vocab.size(), {0, 1}, seed, vocab, pairs, heldout);
    const auto h = train_trend_model(ds, vocab.size(), {1, 3}, seed, vocab, pairs, heldout);
    causal_only.acc += c.pll_accuracy / 3;
    causal_only.loss += c.causal_loss / 3;
    masked_only.acc += m.pll_accuracy / 3;
    masked_only.loss += m.causal_loss / 3;
    hybrid.acc += h.pll_accuracy / 3;
    hybrid.loss += h.causal_loss / 3;
  }
  const double secs = seconds_since(t0);
  const bool pass = hybrid.acc >= causal_only.acc && hybrid.loss <= masked_only.loss && secs < 1800.0;
  return {pass, std::to_string(corpus_tokens) + " tokens; PLL accuracy 1:3 " + fmt(hybrid.acc) + " vs causal-only " +
                    fmt(causal_only.acc) + " (masked-only " + fmt(masked_only.acc) + "); causal loss 1:3 " +
                    fmt(hybrid.loss) + " vs masked-only " + fmt(masked_only.loss) + " (causal-only " +
                    fmt(causal_only.loss) + "); " + fmt(secs) + " s"};
}

// ---------------------------------------------------------------- 9

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

int run_cli(const fs::path& dir, const std::string& args) {
  const std::string cmd = "cd '" + dir.string() + "' && '" HYBRIDLM_CLI "' " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome determinism() {
  TempDir tmp("acceptance-determinism");
  {
    const Grammar grammar;
    Rng rng(909);
    std::ofstream f(tmp.path / "corpus.txt");
    for (int i = 0; i < 300; ++i) f << grammar.document(rng) << "\n\n";
  }
  const nlohmann::json cfg = {{"corpus", "corpus.txt"},
                              {"vocab_size", 320},
                              {"total_steps", 12},
                              {"batch_tokens_start", 256},
                              {"batch_tokens_end", 512},
                              {"seq_len_start", 32},
                              {"seq_len_end", 64},
                              {"seq_len_switch_fraction", 0.5},
                              {"ratio", "1:3"},
                              {"seed", 2024},
                              {"checkpoint_every", 4},
                              {"model",
                               {{"n_layers", 1},
                                {"hidden_size", 32},
                                {"ff_intermediate_size", 48},
                                {"n_heads", 2},
                                {"max_seq_len", 64},
                                {"dropout_p", 0.1},
                                {"attention_dropout_p", 0.1}}}};
  std::ofstream(tmp.path / "cfg.json") << cfg.dump();

  for (const char* run : {"a", "b"}) {
    if (run_cli(tmp.path, std::string("tokenize --config cfg.json --out ") + run) != 0 ||
        run_cli(tmp.path, std::string("train --quiet --config cfg.json --out ") + run) != 0) {
      return {false, std::string("run ") + run + " failed"};
    }
  }
  // Resume: stop at step 8's checkpoint, then continue to the end.
  fs::create_directories(tmp.path / "c");
  fs::copy_file(tmp.path / "a" / "vocab.txt", tmp.path / "c" / "vocab.txt");
  if (run_cli(tmp.path, "train --quiet --config cfg.json --out c") != 0) return {false, "run c failed"};
  fs::remove_all(tmp.path / "c" / "checkpoint-12");
  if (run_cli(tmp.path, "train --quiet --config cfg.json --out c --resume c/checkpoint-8") != 0) {
    return {false, "resume failed"};
  }

  auto same = [&](const fs::path& rel, const char* x, const char* y) {
    const auto a = slurp(tmp.path / x / rel);
    return !a.empty() && a == slurp(tmp.path / y / rel);
  };
  std::vector<std::string> diffs;
  for (const auto& rel : {fs::path("vocab.txt"), fs::path("metrics.jsonl"), fs::path("checkpoint-12/tensors.bin"),
                          fs::path("checkpoint-12/manifest.json")}) {
    if (!same(rel, "a", "b")) diffs.push_back("a/b " + rel.string());
    if (!same(rel, "a", "c")) diffs.push_back("a/resumed " + rel.string());
  }
  if (!diffs.empty()) return {false, "differs: " + diffs.front()};
  return {true, "two runs and a resumed run: vocab, metrics log and final checkpoint byte-identical"};
}

// ---------------------------------------------------------------- 10

Outcome tokenizer_properties() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(1010);
  const Grammar grammar;
  std::vector<std::string> lines;
  for (int i = 0; i < 10000; ++i) {
    std::string line;
    const double u = rng.uniform();
    if (u < 0.6) {
      line = grammar.document(rng);
    } else if (u < 0.8) {
      // Multi-byte UTF-8.
      static const char* pieces[] = {"caf\xC3\xA9", " \xE6\x9D\xB1\xE4\xBA\xAC", " na\xC3\xAFve", " \xF0\x9F\x99\x82", " x"};
      for (std::size_t k = 0, n = 1 + rng.below(8); k < n; ++k) line += pieces[rng.below(5)];
    } else {
      // Arbitrary bytes other than newline.
      for (std::size_t k = 0, n = rng.below(40); k < n; ++k) {
        char c = static_cast<char>(rng.below(256));
        line += c == '\n' ? ' ' : c;
      }
    }
    lines.push_back(std::move(line));
  }
  const Vocab vocab = train_bpe(lines, 900, default_specials());
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto ids = vocab.encode(lines[i]);
    if (vocab.decode(ids) != lines[i]) return {false, "round trip failed on line " + std::to_string(i + 1)};
  }

  std::vector<std::string> strings;
  const std::string alphabet = "the dogs cat runs . aeiou";
  for (int i = 0; i < 1000; ++i) {
    std::string s;
    if (i % 2) {
      s = grammar.sentence(rng).first;
    } else {
      for (std::size_t k = 0, n = rng.below(60); k < n; ++k) s += alphabet[rng.below(alphabet.size())];
    }
    strings.push_back(std::move(s));
  }
  std::vector<std::pair<TokenId, TokenId>> merges;
  for (const auto& m : vocab.merges()) merges.emplace_back(m.left, m.right);
  std::vector<std::size_t> prev(strings.size(), std::numeric_limits<std::size_t>::max());
  for (std::size_t k = 0; k <= merges.size(); ++k) {
    const Vocab v(default_specials(), {merges.begin(), merges.begin() + static_cast<long>(k)});
    for (std::size_t i = 0; i < strings.size(); ++i) {
      const std::size_t len = v.encode(strings[i]).size();
      if (len > prev[i]) {
        return {false, "string " + std::to_string(i) + " grew from " + std::to_string(prev[i]) + " to " +
                           std::to_string(len) + " tokens at " + std::to_string(k) + " merges"};
      }
      prev[i] = len;
    }
  }
  return {true, "10000 lines round-trip with " + std::to_string(merges.size()) +
                    " merges; 1000 strings never lengthen across every merge prefix; " +
                    fmt(seconds_since(t0)) + " s"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient correctness", gradient_correctness},
      {"MNTP shift invariant", mntp_shift},
      {"mask-mode invariants", mask_modes},
      {"schedule endpoints", schedule_endpoints},
      {"LAMB oracle equivalence", lamb_oracle},
      {"identity-alpha reduction", identity_alpha},
      {"memorization run", memorization},
      {"hybrid trend", hybrid_trend},
      {"determinism", determinism},
      {"tokenizer", tokenizer_properties},
  };
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(static_cast<std::size_t>(std::atoi(argv[i])));

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.contains(i + 1)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << (i + 1) << " " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
