#pragma once

// Command implementations behind the hybridlm executable.

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <openssl/evp.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hybridlm/hybridlm.hpp"

namespace hybridlm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kVersion = "hybridlm 0.1.0";

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline json read_json_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
}

inline void write_text_atomic(const fs::path& path, const std::string& text) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    f << text;
    if (!f) throw IoError("cannot write " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " into place: " + ec.message());
}

// SHA-256 over the concatenated bytes of the corpus files, in order.
inline std::string corpus_sha256(const std::vector<fs::path>& paths) {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) throw Error("sha256 init failed");
  std::vector<char> buf(1 << 16);
  for (const auto& p : paths) {
    std::ifstream f(p, std::ios::binary);
    if (!f) {
      EVP_MD_CTX_free(ctx);
      throw IoError("cannot read corpus file " + p.string());
    }
    while (f) {
      f.read(buf.data(), static_cast<std::streamsize>(buf.size()));
      EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(f.gcount()));
    }
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xf];
  }
  return out;
}

// Exclusive advisory lock on <dir>/.lock, released when the process exits.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) {
    fs::create_directories(dir);
    const auto path = dir / ".lock";
    fd_ = ::open(path.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw IoError("cannot open lock file " + path.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      fd_ = -1;
      throw ConfigError("run directory " + dir.string() + " is in use by another process");
    }
  }
  ~RunLock() {
    if (fd_ >= 0) ::close(fd_);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  int fd_ = -1;
};

struct RunManifest {
  std::string command;
  json config;
  std::vector<std::string> corpus_files;
  std::string corpus_sha256;
  std::uint64_t seed = 0;
  std::string started_at;
  std::optional<std::string> finished_at;
  json final_metrics = nullptr;

  json to_json() const {
    return {{"command", command},
            {"config", config},
            {"corpus_files", corpus_files},
            {"corpus_sha256", corpus_sha256},
            {"seed", seed},
            {"version", kVersion},
            {"started_at", started_at},
            {"finished_at", finished_at ? json(*finished_at) : json(nullptr)},
            {"final_metrics", final_metrics}};
  }

  void write(const fs::path& dir) const { write_text_atomic(dir / "manifest.json", to_json().dump(2) + "\n"); }
};

inline std::vector<fs::path> corpus_paths(const json& cfg, const std::vector<std::string>& flag_paths) {
  std::vector<fs::path> out;
  if (!flag_paths.empty()) {
    for (const auto& p : flag_paths) out.emplace_back(p);
    return out;
  }
  if (!cfg.contains("corpus")) throw ConfigError("missing required key 'corpus'");
  const auto& c = cfg["corpus"];
  if (c.is_string()) {
    out.emplace_back(c.get<std::string>());
  } else if (c.is_array() && !c.empty()) {
    for (const auto& p : c) {
      if (!p.is_string()) throw ConfigError("'corpus' entries must be paths");
      out.emplace_back(p.get<std::string>());
    }
  } else {
    throw ConfigError("'corpus' must be a path or a non-empty list of paths");
  }
  return out;
}

inline void check_corpus_exists(const std::vector<fs::path>& paths) {
  for (const auto& p : paths) {
    if (!fs::is_regular_file(p)) throw ConfigError("corpus file '" + p.string() + "' (key 'corpus') does not exist");
  }
}

// Config < HYBRIDLM_SEED < --seed.
inline std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("HYBRIDLM_SEED");
  if (!s || !*s) return std::nullopt;
  try {
    std::size_t pos = 0;
    const auto v = std::stoull(s, &pos);
    if (pos != std::string(s).size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(std::string("HYBRIDLM_SEED must be a non-negative integer, got '") + s + "'");
  }
}

struct TokenizeOptions {
  std::string config;
  std::string out;
  std::vector<std::string> corpus;
  std::optional<std::size_t> vocab_size;
};

inline int cmd_tokenize(const TokenizeOptions& o) {
  const json cfg = o.config.empty() ? json::object() : read_json_file(o.config);
  const auto paths = corpus_paths(cfg, o.corpus);
  check_corpus_exists(paths);
  std::size_t vocab_size = 8192;
  if (cfg.contains("vocab_size")) {
    if (!cfg["vocab_size"].is_number_unsigned()) throw ConfigError("'vocab_size' must be a positive integer");
    vocab_size = cfg["vocab_size"].get<std::size_t>();
  }
  if (o.vocab_size) vocab_size = *o.vocab_size;
  std::vector<std::string> specials = default_specials();
  if (cfg.contains("specials")) specials = cfg["specials"].get<std::vector<std::string>>();

  const fs::path out(o.out);
  RunLock lock(out);
  RunManifest m;
  m.command = "tokenize";
  m.config = {{"vocab_size", vocab_size}, {"specials", specials}};
  for (const auto& p : paths) m.corpus_files.push_back(p.string());
  m.corpus_sha256 = corpus_sha256(paths);
  m.started_at = utc_now();

  std::vector<std::string> lines;
  for (const auto& p : paths) {
    for (auto& d : read_documents(p)) lines.push_back(std::move(d));
  }
  const Vocab vocab = train_bpe(lines, vocab_size, specials);
  save_vocab(vocab, out / "vocab.txt");
  m.finished_at = utc_now();
  m.final_metrics = {{"vocab_size", vocab.size()}, {"merges", vocab.merges().size()}};
  m.write(out);
  std::cerr << "wrote " << (out / "vocab.txt").string() << " (" << vocab.size() << " tokens)\n";
  return 0;
}

struct TrainOptions {
  std::string config;
  std::string out;
  std::vector<std::string> corpus;
  std::string vocab;
  std::string resume;
  std::optional<std::int64_t> steps;
  std::optional<std::string> ratio;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> checkpoint_every;
  bool quiet = false;
};

namespace detail {

// Keeps only metric records with step <= last_step.
inline void truncate_metrics(const fs::path& path, std::int64_t last_step) {
  std::ifstream f(path, std::ios::binary);
  if (!f) return;
  std::string kept, line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("step")) continue;
    if (j["step"].get<std::int64_t>() <= last_step) kept += line + "\n";
  }
  f.close();
  write_text_atomic(path, kept);
}

}  // namespace detail

inline int cmd_train(const TrainOptions& o) {
  const fs::path out(o.out);
  json raw = o.config.empty() ? json::object() : read_json_file(o.config);
  if (!raw.is_object()) throw ConfigError("train config must be a JSON object");

  TrainConfig cfg;
  TrainState state;
  std::optional<Checkpoint> resumed;
  if (!o.resume.empty()) {
    resumed = load_checkpoint(o.resume);
    cfg = resumed->config;
  } else {
    cfg = raw.get<TrainConfig>();
  }
  if (o.steps) cfg.schedule.total_steps = *o.steps;
  if (o.ratio) cfg.schedule.ratio = Ratio::parse(*o.ratio);
  if (o.checkpoint_every) cfg.checkpoint_every = *o.checkpoint_every;
  if (!resumed) {
    if (auto s = env_seed()) cfg.schedule.seed = *s;
    if (o.seed) cfg.schedule.seed = *o.seed;
  } else if (o.seed || env_seed()) {
    if (o.seed.value_or(*env_seed()) != cfg.schedule.seed) {
      throw ConfigError("cannot change the seed of a resumed run");
    }
  }

  const auto paths = corpus_paths(raw, o.corpus);
  check_corpus_exists(paths);
  const fs::path vocab_path = !o.vocab.empty() ? fs::path(o.vocab)
                              : raw.contains("vocab") ? fs::path(raw["vocab"].get<std::string>())
                                                      : out / "vocab.txt";
  if (!fs::is_regular_file(vocab_path)) {
    throw ConfigError("vocabulary file '" + vocab_path.string() + "' not found (run tokenize first or set 'vocab')");
  }
  const Vocab vocab = load_vocab(vocab_path);
  if (raw.contains("model") && raw["model"].contains("vocab_size") && cfg.model.vocab_size != vocab.size()) {
    throw ConfigError("model.vocab_size " + std::to_string(cfg.model.vocab_size) + " does not match vocabulary size " +
                      std::to_string(vocab.size()));
  }
  if (cfg.model.vocab_size != vocab.size()) {
    if (resumed) throw ConfigError("checkpoint vocabulary size does not match " + vocab_path.string());
    cfg.model.vocab_size = vocab.size();
  }
  cfg.validate();
  if (resumed) {
    state = std::move(resumed->state);
    if (state.step > cfg.schedule.total_steps) throw ConfigError("checkpoint is past total_steps");
  } else {
    state = TrainState::fresh(cfg);
  }

  RunLock lock(out);
  RunManifest manifest;
  manifest.command = "train";
  manifest.config = cfg;
  for (const auto& p : paths) manifest.corpus_files.push_back(p.string());
  manifest.corpus_sha256 = corpus_sha256(paths);
  manifest.seed = cfg.schedule.seed;
  manifest.started_at = utc_now();
  manifest.write(out);

  const PackedDataset dataset = ingest(paths, vocab);
  if (dataset.empty()) throw InputError("corpus contains no documents");

  const fs::path metrics_path = out / "metrics.jsonl";
  if (resumed) {
    detail::truncate_metrics(metrics_path, state.step);
  } else {
    write_text_atomic(metrics_path, "");
  }
  std::ofstream metrics(metrics_path, std::ios::binary | std::ios::app);
  if (!metrics) throw IoError("cannot open " + metrics_path.string());

  StepMetrics last{};
  bool any = false;
  TrainHooks hooks;
  hooks.on_step = [&](const StepMetrics& m) {
    metrics << to_json(m).dump() << '\n';
    metrics.flush();
    last = m;
    any = true;
    if (!o.quiet) {
      std::cerr << "step " << m.step << "/" << cfg.schedule.total_steps << " loss " << m.loss.total << "\n";
    }
  };
  hooks.on_checkpoint = [&](const TrainState& s) {
    save_checkpoint(out / ("checkpoint-" + std::to_string(s.step)), s, cfg);
  };
  train(state, dataset, cfg, hooks);
  if (cfg.schedule.total_steps == state.step && !fs::exists(out / ("checkpoint-" + std::to_string(state.step)))) {
    save_checkpoint(out / ("checkpoint-" + std::to_string(state.step)), state, cfg);
  }

  manifest.finished_at = utc_now();
  manifest.final_metrics = {{"step", state.step}, {"final_checkpoint", "checkpoint-" + std::to_string(state.step)}};
  if (any) manifest.final_metrics["last"] = to_json(last);
  manifest.write(out);
  return 0;
}

// Finds vocab.txt next to the checkpoint's run directory unless given.
inline fs::path resolve_vocab(const std::string& flag, const fs::path& checkpoint) {
  if (!flag.empty()) return flag;
  return checkpoint.parent_path() / "vocab.txt";
}

struct EvalCliOptions {
  std::string checkpoint;
  std::string data;
  std::string vocab;
  std::string out;
  std::string mode = "bidirectional";
  double temperature = 1.0;
  bool calibrate = false;
  double prefix_fraction = 0.5;
};

inline int cmd_eval(const EvalCliOptions& o) {
  EvalOptions opt;
  opt.mode.attention = parse_score_attention(o.mode);
  opt.mode.temperature = o.temperature;
  if (!(o.temperature > 0.0)) throw ConfigError("--temperature must be positive");
  if (!(o.prefix_fraction >= 0.0 && o.prefix_fraction < 1.0)) throw ConfigError("--prefix-fraction must lie in [0, 1)");
  opt.calibrate = o.calibrate;
  opt.prefix_fraction = o.prefix_fraction;
  if (!fs::exists(o.checkpoint)) throw ConfigError("checkpoint '" + o.checkpoint + "' not found");
  if (!fs::exists(o.data)) throw ConfigError("eval data '" + o.data + "' not found");
  const auto ck = load_checkpoint(o.checkpoint);
  const Vocab vocab = load_vocab(resolve_vocab(o.vocab, fs::path(o.checkpoint)));
  if (vocab.size() != ck.config.model.vocab_size) throw ConfigError("vocabulary does not match checkpoint");
  json report = evaluate_suite(ck.state.params, vocab, fs::path(o.data), opt);
  report["checkpoint"] = fs::path(o.checkpoint).filename().string();
  report["step"] = ck.state.step;
  const std::string text = report.dump(2) + "\n";
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    write_text_atomic(fs::path(o.out) / "report.json", text);
  }
  std::cout << text;
  return 0;
}

struct GenerateCliOptions {
  std::string checkpoint;
  std::string vocab;
  std::string prompt;
  std::size_t max_new_tokens = 32;
  double repetition_penalty = 1.0;
  bool json_output = false;
};

inline int cmd_generate(const GenerateCliOptions& o) {
  GenerationConfig g;
  g.max_new_tokens = o.max_new_tokens;
  g.repetition_penalty = o.repetition_penalty;
  g.validate();
  if (!fs::exists(o.checkpoint)) throw ConfigError("checkpoint '" + o.checkpoint + "' not found");
  std::string prompt = o.prompt;
  if (prompt == "-") {
    std::ostringstream ss;
    ss << std::cin.rdbuf();
    prompt = ss.str();
    while (!prompt.empty() && (prompt.back() == '\n' || prompt.back() == '\r')) prompt.pop_back();
  }
  const auto ck = load_checkpoint(o.checkpoint);
  const Vocab vocab = load_vocab(resolve_vocab(o.vocab, fs::path(o.checkpoint)));
  if (vocab.size() != ck.config.model.vocab_size) throw ConfigError("vocabulary does not match checkpoint");
  std::vector<TokenId> ids{kBos};
  const auto body = vocab.encode(prompt);
  ids.insert(ids.end(), body.begin(), body.end());
  const auto out = greedy_generate(ck.state.params, std::span<const TokenId>(ids), g);
  const std::string text = detokenize_stream(vocab, out);
  if (o.json_output) {
    std::cout << json{{"prompt", prompt}, {"ids", out}, {"text", text}, {"steps", out.size()}}.dump(-1, ' ', false, json::error_handler_t::replace)
              << "\n";
  } else {
    StreamDecoder dec(vocab);
    for (TokenId id : out) std::cout << dec.push(id) << std::flush;
    std::cout << dec.flush() << "\n";
  }
  return 0;
}

}  // namespace hybridlm::cli
