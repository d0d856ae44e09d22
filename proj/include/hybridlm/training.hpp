#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "hybridlm/corpus.hpp"
#include "hybridlm/error.hpp"
#include "hybridlm/model.hpp"
#include "hybridlm/random.hpp"

namespace hybridlm {

struct OptimizerConfig {
  double initial_learning_rate = 0.0141;  // peak, reached at the end of warmup
  double final_learning_rate = 0.00141;
  double warmup_ratio = 0.016;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-8;
  double clip_norm = 2.0;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("optimizer config: " + m); };
    if (!(initial_learning_rate >= 0.0) || !(final_learning_rate >= 0.0)) fail("learning rates must be >= 0");
    if (!(warmup_ratio >= 0.0 && warmup_ratio <= 1.0)) fail("warmup_ratio must lie in [0, 1]");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
    if (!(epsilon > 0.0) || !(weight_decay >= 0.0) || !(clip_norm > 0.0)) {
      fail("epsilon and clip norm must be positive, weight decay non-negative");
    }
  }
};

inline void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = {{"initial_learning_rate", c.initial_learning_rate},
       {"final_learning_rate", c.final_learning_rate},
       {"warmup_ratio", c.warmup_ratio},
       {"weight_decay", c.weight_decay},
       {"lamb_beta1", c.beta1},
       {"lamb_beta2", c.beta2},
       {"lamb_epsilon", c.epsilon},
       {"gradient_clipping", c.clip_norm}};
}

inline void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  try {
    auto get = [&](const char* key, double& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("initial_learning_rate", c.initial_learning_rate);
    get("final_learning_rate", c.final_learning_rate);
    get("warmup_ratio", c.warmup_ratio);
    get("weight_decay", c.weight_decay);
    get("lamb_beta1", c.beta1);
    get("lamb_beta2", c.beta2);
    get("lamb_epsilon", c.epsilon);
    get("gradient_clipping", c.clip_norm);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("optimizer config: ") + e.what());
  }
}

inline std::int64_t warmup_steps(std::int64_t total_steps, const OptimizerConfig& opt) {
  if (total_steps <= 0) return 0;
  const auto w = static_cast<std::int64_t>(std::llround(opt.warmup_ratio * static_cast<double>(total_steps)));
  return std::clamp<std::int64_t>(w, 1, total_steps);
}

// Linear warmup from 0 to the peak, then cosine decay to the final rate.
inline double learning_rate(std::int64_t step, std::int64_t total_steps, const OptimizerConfig& opt) {
  if (step < 0 || step > total_steps) {
    throw InputError("step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
  }
  if (total_steps == 0) return 0.0;
  const std::int64_t w = warmup_steps(total_steps, opt);
  if (step <= w) return opt.initial_learning_rate * static_cast<double>(step) / static_cast<double>(w);
  if (w == total_steps) return opt.final_learning_rate;
  const double progress = static_cast<double>(step - w) / static_cast<double>(total_steps - w);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return opt.final_learning_rate + (opt.initial_learning_rate - opt.final_learning_rate) * cosine;
}

struct LossResult {
  double total = 0.0;
  double causal = std::numeric_limits<double>::quiet_NaN();
  double masked = std::numeric_limits<double>::quiet_NaN();
  std::size_t positions = 0;
  std::size_t causal_positions = 0;
  std::size_t masked_positions = 0;
};

namespace detail {

// Summed cross-entropy over supervised positions of one sequence. When
// dlogits is given it receives scale * d(sum)/d(logits).
template <typename T>
double sequence_cross_entropy(const Tensor<T>& logits, std::span<const TokenId> targets,
                              std::span<const std::uint8_t> loss_row, double scale, Tensor<T>* dlogits,
                              std::size_t& count) {
  const std::size_t v = logits.cols();
  if (dlogits) *dlogits = Tensor<T>(logits.rows(), v);
  double sum = 0.0;
  for (std::size_t k = 0; k < logits.rows(); ++k) {
    if (!loss_row[k]) continue;
    const TokenId t = targets[k];
    if (t < 0 || static_cast<std::size_t>(t) >= v) throw InputError("target id out of range");
    const T* row = logits.row(k);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < v; ++c) mx = std::max(mx, static_cast<double>(row[c]));
    double z = 0.0;
    for (std::size_t c = 0; c < v; ++c) z += std::exp(static_cast<double>(row[c]) - mx);
    const double lse = mx + std::log(z);
    sum += lse - static_cast<double>(row[t]);
    ++count;
    if (dlogits) {
      T* d = dlogits->row(k);
      for (std::size_t c = 0; c < v; ++c) d[c] = static_cast<T>(scale * std::exp(static_cast<double>(row[c]) - lse));
      d[t] -= static_cast<T>(scale);
    }
  }
  return sum;
}

}  // namespace detail

// Mean cross-entropy pooled over every supervised position of the batch,
// with per-objective means reported alongside.
template <typename T>
LossResult hybrid_loss(const std::vector<Tensor<T>>& logits, const TrainingBatch& batch) {
  if (logits.size() != batch.n_seq) throw InputError("logits/batch size mismatch");
  LossResult r;
  double causal_sum = 0.0, masked_sum = 0.0;
  for (std::size_t i = 0; i < batch.n_seq; ++i) {
    std::size_t count = 0;
    const double s = detail::sequence_cross_entropy<T>(logits[i], batch.target_row(i), batch.loss_row(i), 1.0,
                                                       nullptr, count);
    if (batch.modes[i] == Objective::causal) {
      causal_sum += s;
      r.causal_positions += count;
    } else {
      masked_sum += s;
      r.masked_positions += count;
    }
  }
  r.positions = r.causal_positions + r.masked_positions;
  if (r.positions == 0) throw InputError("batch has no loss positions");
  r.total = (causal_sum + masked_sum) / static_cast<double>(r.positions);
  if (r.causal_positions) r.causal = causal_sum / static_cast<double>(r.causal_positions);
  if (r.masked_positions) r.masked = masked_sum / static_cast<double>(r.masked_positions);
  return r;
}

// Forward + backward over a whole batch. Each sequence is routed to the mask
// recorded in the batch (causal for causal sequences, bidirectional for masked).
template <typename T>
LossResult loss_and_gradients(const ModelParameters<T>& params, const TrainingBatch& batch,
                              ModelParameters<T>& grads, DropoutContext* dropout = nullptr) {
  const std::size_t total = batch.num_loss_positions();
  if (total == 0) throw InputError("batch has no loss positions");
  const double scale = 1.0 / static_cast<double>(total);
  LossResult r;
  double causal_sum = 0.0, masked_sum = 0.0;
  for (std::size_t i = 0; i < batch.n_seq; ++i) {
    ForwardCache<T> cache;
    const Tensor<T> logits = forward(params, batch.input_row(i), batch.masks[i], dropout, &cache);
    Tensor<T> dlogits;
    std::size_t count = 0;
    const double s = detail::sequence_cross_entropy(logits, batch.target_row(i), batch.loss_row(i), scale,
                                                    &dlogits, count);
    if (count == 0) continue;
    backward(params, cache, dlogits, grads);
    if (batch.modes[i] == Objective::causal) {
      causal_sum += s;
      r.causal_positions += count;
    } else {
      masked_sum += s;
      r.masked_positions += count;
    }
  }
  r.positions = total;
  r.total = (causal_sum + masked_sum) / static_cast<double>(total);
  if (r.causal_positions) r.causal = causal_sum / static_cast<double>(r.causal_positions);
  if (r.masked_positions) r.masked = masked_sum / static_cast<double>(r.masked_positions);
  return r;
}

// Scales all gradients by max_norm / norm when the global L2 norm exceeds
// max_norm. Returns the norm before clipping.
template <typename T>
double clip_gradients(ModelParameters<T>& grads, double max_norm) {
  double sq = 0.0;
  grads.for_each([&](const std::string&, const Tensor<T>& t) { sq += squared_norm(t); });
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  if (norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    grads.for_each([&](const std::string&, Tensor<T>& t) {
      for (auto& v : t.data) v *= factor;
    });
  }
  return norm;
}

template <typename T>
struct LambState {
  std::vector<Tensor<T>> m;  // first moments, in ModelParameters::for_each order
  std::vector<Tensor<T>> v;  // second moments
  std::int64_t step = 0;

  static LambState zeros_like(const ModelParameters<T>& p) {
    LambState s;
    p.for_each([&](const std::string&, const Tensor<T>& t) {
      s.m.emplace_back(t.shape);
      s.v.emplace_back(t.shape);
    });
    return s;
  }

  friend bool operator==(const LambState&, const LambState&) = default;
};

struct LambHyper {
  double lr = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
};

// One LAMB update of a single tensor at optimizer step t (1-based).
template <typename T>
void lamb_update_tensor(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                        std::int64_t t, const LambHyper& h) {
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
  std::vector<double> update(param.size());
  double p_sq = 0.0, u_sq = 0.0;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = static_cast<double>(grad[i]);
    const double mi = h.beta1 * static_cast<double>(m[i]) + (1.0 - h.beta1) * g;
    const double vi = h.beta2 * static_cast<double>(v[i]) + (1.0 - h.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double m_hat = mi / bc1;
    const double v_hat = vi / bc2;
    const double p = static_cast<double>(param[i]);
    const double u = m_hat / (std::sqrt(v_hat) + h.epsilon) + h.weight_decay * p;
    update[i] = u;
    p_sq += p * p;
    u_sq += u * u;
  }
  const double p_norm = std::sqrt(p_sq);
  const double u_norm = std::sqrt(u_sq);
  const double trust = (p_norm > 0.0 && u_norm > 0.0) ? p_norm / u_norm : 1.0;
  if (!std::isfinite(trust) || !std::isfinite(u_norm)) throw NumericError("non-finite LAMB update");
  for (std::size_t i = 0; i < param.size(); ++i) {
    param[i] = static_cast<T>(static_cast<double>(param[i]) - h.lr * trust * update[i]);
  }
}

// Alpha mixing weights are excluded from weight decay.
inline bool decays(const std::string& name) { return name != "alpha"; }

// Per-tensor LAMB step over the whole model.
template <typename T>
void lamb_step(ModelParameters<T>& params, const ModelParameters<T>& grads, LambState<T>& state,
               const OptimizerConfig& opt, double lr) {
  if (state.m.empty()) state = LambState<T>::zeros_like(params);
  ++state.step;
  std::vector<const Tensor<T>*> gs;
  grads.for_each([&](const std::string&, const Tensor<T>& g) { gs.push_back(&g); });
  std::size_t idx = 0;
  params.for_each([&](const std::string& name, Tensor<T>& p) {
    const Tensor<T>& g = *gs.at(idx);
    if (g.shape != p.shape || state.m.at(idx).shape != p.shape) throw InputError("LAMB shape mismatch: " + name);
    const LambHyper h{lr, opt.beta1, opt.beta2, opt.epsilon, decays(name) ? opt.weight_decay : 0.0};
    lamb_update_tensor<T>(p.data, g.data, state.m[idx].data, state.v[idx].data, state.step, h);
    ++idx;
  });
}

struct TrainConfig {
  ModelConfig model;
  ScheduleConfig schedule;
  OptimizerConfig optimizer;
  std::int64_t checkpoint_every = 500;

  void validate() const {
    model.validate();
    schedule.validate();
    optimizer.validate();
    if (checkpoint_every <= 0) throw ConfigError("checkpoint_every must be positive");
    if (static_cast<std::size_t>(schedule.seq_len_end) > model.max_seq_len) {
      throw ConfigError("seq_len_end exceeds model max_seq_len");
    }
  }
};

// Schedule and optimizer keys sit at the top level, the model under "model".
inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json(c.schedule);
  const nlohmann::json opt = c.optimizer;
  for (const auto& [k, v] : opt.items()) j[k] = v;
  j["model"] = c.model;
  j["checkpoint_every"] = c.checkpoint_every;
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  c.schedule = j.get<ScheduleConfig>();
  c.optimizer = j.get<OptimizerConfig>();
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
  try {
    if (j.contains("checkpoint_every")) j.at("checkpoint_every").get_to(c.checkpoint_every);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(e.what());
  }
}

struct LossStats {
  double causal_sum = 0.0;
  std::int64_t causal_steps = 0;
  double masked_sum = 0.0;
  std::int64_t masked_steps = 0;

  friend bool operator==(const LossStats&, const LossStats&) = default;
};

struct TrainState {
  ModelParameters<float> params;
  LambState<float> optimizer;
  std::int64_t step = 0;
  Rng rng;
  SamplerState sampler;
  LossStats stats;

  static TrainState fresh(const TrainConfig& cfg) {
    cfg.validate();
    TrainState s;
    s.params = ModelParameters<float>::initialize(cfg.model, derive_seed(cfg.schedule.seed, 1));
    s.optimizer = LambState<float>::zeros_like(s.params);
    s.rng = Rng(derive_seed(cfg.schedule.seed, 2));
    return s;
  }
};

struct StepMetrics {
  std::int64_t step = 0;  // completed steps after this update
  double lr = 0.0;
  std::int64_t batch_tokens = 0;
  double mask_p = 0.0;
  std::int64_t seq_len = 0;
  LossResult loss;
  double grad_norm = 0.0;
};

inline nlohmann::json to_json(const StepMetrics& m) {
  auto opt = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
  return {{"step", m.step},           {"lr", m.lr},
          {"batch_tokens", m.batch_tokens}, {"mask_p", m.mask_p},
          {"seq_len", m.seq_len},     {"loss_total", m.loss.total},
          {"loss_causal", opt(m.loss.causal)}, {"loss_masked", opt(m.loss.masked)},
          {"grad_norm", m.grad_norm}};
}

// One hybrid step: scheduled batch, forward/backward, clipping, LAMB.
inline StepMetrics train_step(TrainState& state, const PackedDataset& dataset, const TrainConfig& cfg) {
  const std::int64_t s = state.step;
  if (s >= cfg.schedule.total_steps) throw InputError("training already complete");
  StepMetrics m;
  m.seq_len = sequence_length(s, cfg.schedule);
  m.batch_tokens = batch_token_budget(s, cfg.schedule);
  m.mask_p = mask_probability(s, cfg.schedule);
  const TrainingBatch batch =
      build_hybrid_batch(dataset, s, cfg.schedule, cfg.model.vocab_size, state.rng, state.sampler);

  auto grads = ModelParameters<float>::zeros(cfg.model);
  DropoutContext dropout{&state.rng, cfg.model.dropout_p, cfg.model.attention_dropout_p};
  m.loss = loss_and_gradients(state.params, batch, grads, &dropout);
  if (!std::isfinite(m.loss.total)) throw NumericError("non-finite loss at step " + std::to_string(s));
  m.grad_norm = clip_gradients(grads, cfg.optimizer.clip_norm);
  // Update number s+1 uses the rate scheduled for step s+1, so the first
  // update is not wasted on a zero learning rate.
  m.lr = learning_rate(s + 1, cfg.schedule.total_steps, cfg.optimizer);
  lamb_step(state.params, grads, state.optimizer, cfg.optimizer, m.lr);
  state.step = s + 1;
  m.step = state.step;
  if (m.loss.causal_positions) {
    state.stats.causal_sum += m.loss.causal;
    ++state.stats.causal_steps;
  }
  if (m.loss.masked_positions) {
    state.stats.masked_sum += m.loss.masked;
    ++state.stats.masked_steps;
  }
  return m;
}

struct TrainHooks {
  std::function<void(const StepMetrics&)> on_step;
  std::function<void(const TrainState&)> on_checkpoint;
};

// Runs until total_steps, checkpointing every cfg.checkpoint_every steps and at the end.
inline void train(TrainState& state, const PackedDataset& dataset, const TrainConfig& cfg,
                  const TrainHooks& hooks = {}) {
  cfg.validate();
  if (state.step > cfg.schedule.total_steps) throw InputError("state step exceeds total_steps");
  while (state.step < cfg.schedule.total_steps) {
    const StepMetrics m = train_step(state, dataset, cfg);
    if (hooks.on_step) hooks.on_step(m);
    const bool last = state.step == cfg.schedule.total_steps;
    if (hooks.on_checkpoint && (last || state.step % cfg.checkpoint_every == 0)) hooks.on_checkpoint(state);
  }
}

}  // namespace hybridlm
