#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "hybridlm/error.hpp"
#include "hybridlm/mask.hpp"
#include "hybridlm/random.hpp"
#include "hybridlm/tensor.hpp"
#include "hybridlm/tokenizer.hpp"

namespace hybridlm {

// Shape of the shared transformer. n_layers counts attention+feed-forward
// pairs; the network has 2 * n_layers sublayers.
struct ModelConfig {
  std::size_t n_layers = 12;
  std::size_t hidden_size = 384;
  std::size_t ff_intermediate_size = 1280;
  std::size_t n_heads = 6;
  std::size_t vocab_size = 8192;
  double dropout_p = 0.1;
  double attention_dropout_p = 0.1;
  std::size_t max_seq_len = 512;
  bool tie_embeddings = true;
  double rope_base = 10000.0;
  double norm_eps = 1e-7;

  std::size_t num_sublayers() const { return 2 * n_layers; }
  std::size_t head_dim() const { return hidden_size / n_heads; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (n_layers == 0 || hidden_size == 0 || ff_intermediate_size == 0 || n_heads == 0 || vocab_size == 0 ||
        max_seq_len == 0) {
      fail("all sizes must be positive");
    }
    if (hidden_size % n_heads != 0) fail("hidden_size must be divisible by n_heads");
    if (head_dim() % 2 != 0) fail("head dimension must be even for rotary embeddings");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0) || !(attention_dropout_p >= 0.0 && attention_dropout_p < 1.0)) {
      fail("dropout must lie in [0, 1)");
    }
    if (!(rope_base > 1.0) || !(norm_eps > 0.0)) fail("rope_base and norm_eps must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"n_layers", c.n_layers},
       {"hidden_size", c.hidden_size},
       {"ff_intermediate_size", c.ff_intermediate_size},
       {"n_heads", c.n_heads},
       {"vocab_size", c.vocab_size},
       {"dropout_p", c.dropout_p},
       {"attention_dropout_p", c.attention_dropout_p},
       {"max_seq_len", c.max_seq_len},
       {"tie_embeddings", c.tie_embeddings},
       {"rope_base", c.rope_base},
       {"norm_eps", c.norm_eps}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("n_layers", c.n_layers);
    get("hidden_size", c.hidden_size);
    get("ff_intermediate_size", c.ff_intermediate_size);
    get("n_heads", c.n_heads);
    get("vocab_size", c.vocab_size);
    get("dropout_p", c.dropout_p);
    get("attention_dropout_p", c.attention_dropout_p);
    get("max_seq_len", c.max_seq_len);
    get("tie_embeddings", c.tie_embeddings);
    get("rope_base", c.rope_base);
    get("norm_eps", c.norm_eps);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

template <typename T>
struct SublayerParams {
  bool attention = true;
  Tensor<T> gate;    // [hidden x width]
  Tensor<T> query;   // attention only, [hidden x hidden]
  Tensor<T> key;
  Tensor<T> value;
  Tensor<T> linear;  // feed-forward only, [hidden x ff]
  Tensor<T> output;  // [width x hidden]
};

// Index of alpha(i, j) for 1 <= j <= i in the packed lower triangle.
inline std::size_t alpha_index(std::size_t i, std::size_t j) { return i * (i - 1) / 2 + (j - 1); }

template <typename T>
struct ModelParameters {
  ModelConfig config;
  Tensor<T> embedding;  // [vocab x hidden]
  std::vector<SublayerParams<T>> sublayers;
  Tensor<T> alpha;      // packed lower triangle, S(S+1)/2
  Tensor<T> head;       // [vocab x hidden], empty when tied

  // All-zero parameters of the right shapes (also used for gradients).
  static ModelParameters zeros(const ModelConfig& cfg) {
    cfg.validate();
    ModelParameters p;
    p.config = cfg;
    const std::size_t h = cfg.hidden_size;
    const std::size_t f = cfg.ff_intermediate_size;
    p.embedding = Tensor<T>(cfg.vocab_size, h);
    for (std::size_t i = 1; i <= cfg.num_sublayers(); ++i) {
      SublayerParams<T> s;
      s.attention = i % 2 == 1;
      if (s.attention) {
        s.gate = Tensor<T>(h, h);
        s.query = Tensor<T>(h, h);
        s.key = Tensor<T>(h, h);
        s.value = Tensor<T>(h, h);
        s.output = Tensor<T>(h, h);
      } else {
        s.gate = Tensor<T>(h, f);
        s.linear = Tensor<T>(h, f);
        s.output = Tensor<T>(f, h);
      }
      p.sublayers.push_back(std::move(s));
    }
    const std::size_t s = cfg.num_sublayers();
    p.alpha = Tensor<T>({s * (s + 1) / 2});
    if (!cfg.tie_embeddings) p.head = Tensor<T>(cfg.vocab_size, h);
    return p;
  }

  // Truncated-normal(0.02) projections, output projections additionally
  // scaled by 1/sqrt(2 n_layers); alpha starts as the identity pattern.
  static ModelParameters initialize(const ModelConfig& cfg, std::uint64_t seed) {
    ModelParameters p = zeros(cfg);
    Rng rng(seed);
    const double std = 0.02;
    const double out_std = std / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
    auto fill = [&](Tensor<T>& t, double s) {
      for (auto& v : t.data) v = static_cast<T>(rng.truncated_normal(s));
    };
    fill(p.embedding, std);
    for (auto& sl : p.sublayers) {
      fill(sl.gate, std);
      fill(sl.query, std);
      fill(sl.key, std);
      fill(sl.value, std);
      fill(sl.linear, std);
      fill(sl.output, out_std);
    }
    for (std::size_t i = 1; i <= cfg.num_sublayers(); ++i) p.alpha[alpha_index(i, i)] = T(1);
    fill(p.head, std);
    return p;
  }

  T alpha_at(std::size_t i, std::size_t j) const { return alpha[alpha_index(i, j)]; }

  // Visits every learnable tensor with a stable name, in a fixed order.
  template <typename F>
  void for_each(F&& f) {
    for_each_impl(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    for_each_impl(*this, f);
  }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
    return n;
  }

  template <typename U>
  ModelParameters<U> cast() const {
    ModelParameters<U> out;
    out.config = config;
    out.embedding = embedding.template cast<U>();
    for (const auto& s : sublayers) {
      SublayerParams<U> d;
      d.attention = s.attention;
      d.gate = s.gate.template cast<U>();
      d.query = s.query.template cast<U>();
      d.key = s.key.template cast<U>();
      d.value = s.value.template cast<U>();
      d.linear = s.linear.template cast<U>();
      d.output = s.output.template cast<U>();
      out.sublayers.push_back(std::move(d));
    }
    out.alpha = alpha.template cast<U>();
    out.head = head.template cast<U>();
    return out;
  }

  friend bool operator==(const ModelParameters& a, const ModelParameters& b) {
    if (!(a.config == b.config)) return false;
    std::vector<const Tensor<T>*> ta, tb;
    a.for_each([&](const std::string&, const Tensor<T>& t) { ta.push_back(&t); });
    b.for_each([&](const std::string&, const Tensor<T>& t) { tb.push_back(&t); });
    if (ta.size() != tb.size()) return false;
    for (std::size_t i = 0; i < ta.size(); ++i) {
      if (!(*ta[i] == *tb[i])) return false;
    }
    return true;
  }

 private:
  template <typename Self, typename F>
  static void for_each_impl(Self& self, F& f) {
    f(std::string("embedding"), self.embedding);
    for (std::size_t i = 0; i < self.sublayers.size(); ++i) {
      auto& s = self.sublayers[i];
      const std::string prefix = "sublayers." + std::to_string(i + 1) + ".";
      f(prefix + "gate", s.gate);
      if (s.attention) {
        f(prefix + "query", s.query);
        f(prefix + "key", s.key);
        f(prefix + "value", s.value);
      } else {
        f(prefix + "linear", s.linear);
      }
      f(prefix + "output", s.output);
    }
    f(std::string("alpha"), self.alpha);
    if (!self.head.empty()) f(std::string("head"), self.head);
  }
};

// Exact learnable-scalar count, alpha included.
inline std::size_t count_parameters(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t h = cfg.hidden_size;
  const std::size_t f = cfg.ff_intermediate_size;
  const std::size_t s = cfg.num_sublayers();
  const std::size_t attention = 5 * h * h;
  const std::size_t feed_forward = 3 * h * f;
  std::size_t n = cfg.vocab_size * h + cfg.n_layers * (attention + feed_forward) + s * (s + 1) / 2;
  if (!cfg.tie_embeddings) n += cfg.vocab_size * h;
  return n;
}

// Dropout source for training forwards; pass nullptr to disable dropout.
struct DropoutContext {
  Rng* rng = nullptr;
  double hidden_p = 0.0;
  double attention_p = 0.0;
};

namespace detail {

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

// Row-wise (x - mean) / sqrt(var + eps) with no learned affine.
template <typename T>
Tensor<T> norm_rows(const Tensor<T>& x, double eps, std::vector<T>& inv_std) {
  Tensor<T> y(x.rows(), x.cols());
  inv_std.assign(x.rows(), T(0));
  const std::size_t d = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const T* in = x.row(r);
    T mean = 0;
    for (std::size_t c = 0; c < d; ++c) mean += in[c];
    mean /= T(d);
    T var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (in[c] - mean) * (in[c] - mean);
    var /= T(d);
    const T is = T(1) / std::sqrt(var + T(eps));
    inv_std[r] = is;
    T* out = y.row(r);
    for (std::size_t c = 0; c < d; ++c) out[c] = (in[c] - mean) * is;
  }
  return y;
}

template <typename T>
Tensor<T> norm_rows_backward(const Tensor<T>& y, const std::vector<T>& inv_std, const Tensor<T>& dy) {
  Tensor<T> dx(y.rows(), y.cols());
  const std::size_t d = y.cols();
  for (std::size_t r = 0; r < y.rows(); ++r) {
    const T* yr = y.row(r);
    const T* g = dy.row(r);
    T mean_g = 0, mean_gy = 0;
    for (std::size_t c = 0; c < d; ++c) {
      mean_g += g[c];
      mean_gy += g[c] * yr[c];
    }
    mean_g /= T(d);
    mean_gy /= T(d);
    T* out = dx.row(r);
    for (std::size_t c = 0; c < d; ++c) out[c] = inv_std[r] * (g[c] - mean_g - yr[c] * mean_gy);
  }
  return dx;
}

// cos/sin tables for rotary embeddings over interleaved (2m, 2m+1) pairs.
template <typename T>
struct Rotary {
  std::size_t head_dim = 0;
  std::vector<T> cos, sin;  // [seq_len x head_dim/2]

  Rotary(std::size_t n, std::size_t hd, double base) : head_dim(hd), cos(n * hd / 2), sin(n * hd / 2) {
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t m = 0; m < hd / 2; ++m) {
        const double theta = static_cast<double>(p) *
                             std::pow(base, -2.0 * static_cast<double>(m) / static_cast<double>(hd));
        cos[p * hd / 2 + m] = static_cast<T>(std::cos(theta));
        sin[p * hd / 2 + m] = static_cast<T>(std::sin(theta));
      }
    }
  }

  // Rotates every head of x in place; inverse=true applies the transpose.
  void apply(Tensor<T>& x, bool inverse) const {
    const std::size_t half = head_dim / 2;
    for (std::size_t p = 0; p < x.rows(); ++p) {
      T* row = x.row(p);
      for (std::size_t h0 = 0; h0 < x.cols(); h0 += head_dim) {
        for (std::size_t m = 0; m < half; ++m) {
          const T c = cos[p * half + m];
          const T s = inverse ? -sin[p * half + m] : sin[p * half + m];
          T& a = row[h0 + 2 * m];
          T& b = row[h0 + 2 * m + 1];
          const T a0 = a, b0 = b;
          a = a0 * c - b0 * s;
          b = a0 * s + b0 * c;
        }
      }
    }
  }
};

template <typename T>
void dropout_mask(Tensor<T>& m, std::size_t rows, std::size_t cols, double p, Rng& rng) {
  m = Tensor<T>(rows, cols);
  const T keep = T(1.0 / (1.0 - p));
  for (auto& v : m.data) v = rng.uniform() < p ? T(0) : keep;
}

template <typename T>
struct SublayerCache {
  Tensor<T> normed_in;
  std::vector<T> inv_std_in;
  Tensor<T> gate;       // pre-activation gate projection
  Tensor<T> values;     // attention output or linear projection, after dropout
  Tensor<T> value_drop; // dropout scale on values (empty when off)
  Tensor<T> q, k, v;    // rotated q/k
  std::vector<Tensor<T>> probs;       // per head, [n x n]
  std::vector<Tensor<T>> probs_drop;  // per head dropout scale (empty when off)
  Tensor<T> normed_mid;
  std::vector<T> inv_std_mid;
};

template <typename T>
Tensor<T> head_slice(const Tensor<T>& x, std::size_t h, std::size_t d) {
  Tensor<T> out(x.rows(), d);
  for (std::size_t r = 0; r < x.rows(); ++r) std::copy_n(x.row(r) + h * d, d, out.row(r));
  return out;
}

template <typename T>
void add_head_slice(Tensor<T>& x, const Tensor<T>& part, std::size_t h, std::size_t d) {
  for (std::size_t r = 0; r < x.rows(); ++r) {
    T* dst = x.row(r) + h * d;
    const T* src = part.row(r);
    for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
  }
}

// Masked multi-head scaled dot-product attention over rotated q/k.
template <typename T>
Tensor<T> attention_forward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                            const std::vector<std::uint8_t>& visible, const ModelConfig& cfg,
                            DropoutContext* dropout, SublayerCache<T>* cache) {
  const std::size_t n = q.rows();
  const std::size_t d = cfg.head_dim();
  const T scale = T(1.0 / std::sqrt(static_cast<double>(d)));
  Tensor<T> out(n, cfg.hidden_size);
  if (cache) {
    cache->probs.assign(cfg.n_heads, {});
    cache->probs_drop.assign(cfg.n_heads, {});
  }
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    const Tensor<T> qh = head_slice(q, h, d);
    const Tensor<T> kh = head_slice(k, h, d);
    const Tensor<T> vh = head_slice(v, h, d);
    Tensor<T> p = matmul_bt(qh, kh);
    for (std::size_t r = 0; r < n; ++r) {
      T* row = p.row(r);
      const std::uint8_t* vis = visible.data() + r * n;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t c = 0; c < n; ++c) {
        if (vis[c]) mx = std::max(mx, row[c] * scale);
      }
      T sum = 0;
      for (std::size_t c = 0; c < n; ++c) {
        // Invisible keys get exactly zero weight.
        row[c] = vis[c] ? std::exp(row[c] * scale - mx) : T(0);
        sum += row[c];
      }
      if (sum > T(0)) {
        for (std::size_t c = 0; c < n; ++c) row[c] /= sum;
      }
    }
    Tensor<T> used = p;
    Tensor<T> drop;
    if (dropout && dropout->rng && dropout->attention_p > 0.0) {
      dropout_mask(drop, n, n, dropout->attention_p, *dropout->rng);
      for (std::size_t i = 0; i < used.size(); ++i) used[i] *= drop[i];
    }
    add_head_slice(out, matmul(used, vh), h, d);
    if (cache) {
      cache->probs[h] = std::move(p);
      cache->probs_drop[h] = std::move(drop);
    }
  }
  return out;
}

}  // namespace detail

// Per-sequence activations kept for the backward pass.
template <typename T>
struct ForwardCache {
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> visible;
  std::vector<Tensor<T>> outputs;       // outputs[0] = embeddings, outputs[i] = combined input to i+1
  std::vector<Tensor<T>> layer_out;     // layer_out[j-1] = sublayer j applied to outputs[j-1]
  std::vector<detail::SublayerCache<T>> sub;
  Tensor<T> final_normed;
  std::vector<T> final_inv_std;
};

namespace detail {

template <typename T>
Tensor<T> sublayer_forward(const SublayerParams<T>& sp, const ModelConfig& cfg, const Tensor<T>& x,
                           const std::vector<std::uint8_t>& visible, const Rotary<T>& rope,
                           DropoutContext* dropout, SublayerCache<T>* cache) {
  SublayerCache<T> local;
  SublayerCache<T>& c = cache ? *cache : local;
  c.normed_in = norm_rows(x, cfg.norm_eps, c.inv_std_in);
  c.gate = matmul(c.normed_in, sp.gate);
  if (sp.attention) {
    c.q = matmul(c.normed_in, sp.query);
    c.k = matmul(c.normed_in, sp.key);
    c.v = matmul(c.normed_in, sp.value);
    rope.apply(c.q, false);
    rope.apply(c.k, false);
    c.values = attention_forward(c.q, c.k, c.v, visible, cfg, dropout, cache ? &c : nullptr);
  } else {
    c.values = matmul(c.normed_in, sp.linear);
  }
  c.value_drop = {};
  if (dropout && dropout->rng && dropout->hidden_p > 0.0) {
    dropout_mask(c.value_drop, c.values.rows(), c.values.cols(), dropout->hidden_p, *dropout->rng);
    for (std::size_t i = 0; i < c.values.size(); ++i) c.values[i] *= c.value_drop[i];
  }
  // GEGLU: value path times GELU(gate).
  Tensor<T> mixed(c.values.rows(), c.values.cols());
  for (std::size_t i = 0; i < mixed.size(); ++i) mixed[i] = c.values[i] * gelu(c.gate[i]);
  c.normed_mid = norm_rows(mixed, cfg.norm_eps, c.inv_std_mid);
  Tensor<T> out = matmul(c.normed_mid, sp.output);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += x[i];
  return out;
}

// Returns d(input); accumulates parameter gradients into g.
template <typename T>
Tensor<T> sublayer_backward(const SublayerParams<T>& sp, SublayerParams<T>& g, const ModelConfig& cfg,
                            const SublayerCache<T>& c, const std::vector<std::uint8_t>& visible,
                            const Rotary<T>& rope, const Tensor<T>& dout) {
  accumulate_at_b(g.output, c.normed_mid, dout);
  const Tensor<T> dnormed_mid = matmul_bt(dout, sp.output);
  const Tensor<T> dmixed = norm_rows_backward(c.normed_mid, c.inv_std_mid, dnormed_mid);

  Tensor<T> dvalues(c.values.rows(), c.values.cols());
  Tensor<T> dgate(c.gate.rows(), c.gate.cols());
  for (std::size_t i = 0; i < dmixed.size(); ++i) {
    dvalues[i] = dmixed[i] * gelu(c.gate[i]);
    dgate[i] = dmixed[i] * c.values[i] * gelu_grad(c.gate[i]);
  }
  if (!c.value_drop.empty()) {
    for (std::size_t i = 0; i < dvalues.size(); ++i) dvalues[i] *= c.value_drop[i];
  }

  Tensor<T> dnormed_in;
  if (sp.attention) {
    const std::size_t n = c.q.rows();
    const std::size_t d = cfg.head_dim();
    const T scale = T(1.0 / std::sqrt(static_cast<double>(d)));
    Tensor<T> dq(n, cfg.hidden_size), dk(n, cfg.hidden_size), dv(n, cfg.hidden_size);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const Tensor<T> qh = head_slice(c.q, h, d);
      const Tensor<T> kh = head_slice(c.k, h, d);
      const Tensor<T> vh = head_slice(c.v, h, d);
      const Tensor<T> doh = head_slice(dvalues, h, d);
      const Tensor<T>& p = c.probs[h];
      const Tensor<T>& drop = c.probs_drop[h];
      Tensor<T> used = p;
      if (!drop.empty()) {
        for (std::size_t i = 0; i < used.size(); ++i) used[i] *= drop[i];
      }
      Tensor<T> dvh(n, d);
      accumulate_at_b(dvh, used, doh);
      add_head_slice(dv, dvh, h, d);
      Tensor<T> dp = matmul_bt(doh, vh);
      if (!drop.empty()) {
        for (std::size_t i = 0; i < dp.size(); ++i) dp[i] *= drop[i];
      }
      // Softmax backward; masked entries have p = 0 and stay zero.
      for (std::size_t r = 0; r < n; ++r) {
        T* dr = dp.row(r);
        const T* pr = p.row(r);
        T dot = 0;
        for (std::size_t cidx = 0; cidx < n; ++cidx) dot += dr[cidx] * pr[cidx];
        for (std::size_t cidx = 0; cidx < n; ++cidx) dr[cidx] = pr[cidx] * (dr[cidx] - dot) * scale;
      }
      (void)visible;
      add_head_slice(dq, matmul(dp, kh), h, d);
      Tensor<T> dkh(n, d);
      accumulate_at_b(dkh, dp, qh);
      add_head_slice(dk, dkh, h, d);
    }
    rope.apply(dq, true);
    rope.apply(dk, true);
    accumulate_at_b(g.query, c.normed_in, dq);
    accumulate_at_b(g.key, c.normed_in, dk);
    accumulate_at_b(g.value, c.normed_in, dv);
    dnormed_in = matmul_bt(dq, sp.query);
    mat(dnormed_in).noalias() += mat(dk) * mat(sp.key).transpose();
    mat(dnormed_in).noalias() += mat(dv) * mat(sp.value).transpose();
  } else {
    accumulate_at_b(g.linear, c.normed_in, dvalues);
    dnormed_in = matmul_bt(dvalues, sp.linear);
  }
  accumulate_at_b(g.gate, c.normed_in, dgate);
  mat(dnormed_in).noalias() += mat(dgate) * mat(sp.gate).transpose();

  Tensor<T> dx = norm_rows_backward(c.normed_in, c.inv_std_in, dnormed_in);
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dout[i];
  return dx;
}

template <typename T>
const Tensor<T>& head_weights(const ModelParameters<T>& p) {
  return p.config.tie_embeddings ? p.embedding : p.head;
}

inline void check_ids(std::span<const TokenId> ids, const ModelConfig& cfg) {
  if (ids.empty()) throw InputError("empty input");
  if (ids.size() > cfg.max_seq_len) {
    throw InputError("sequence length " + std::to_string(ids.size()) + " exceeds max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  }
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw InputError("token id " + std::to_string(id) + " out of range");
    }
  }
}

}  // namespace detail

// Applies sublayer `layer_index` (1-based; odd = attention, even = feed-forward)
// to hidden states x of shape [seq_len x hidden].
template <typename T>
Tensor<T> sublayer(const ModelParameters<T>& params, std::size_t layer_index, const Tensor<T>& x,
                   const AttentionMaskSpec& mask, std::span<const TokenId> ids = {}) {
  const auto& cfg = params.config;
  if (layer_index < 1 || layer_index > cfg.num_sublayers()) throw InputError("layer_index out of range");
  if (x.cols() != cfg.hidden_size || x.rows() != mask.seq_len) throw InputError("hidden state shape mismatch");
  const auto visible = build_attention_mask(mask, ids);
  const detail::Rotary<T> rope(x.rows(), cfg.head_dim(), cfg.rope_base);
  return detail::sublayer_forward(params.sublayers[layer_index - 1], cfg, x, visible, rope,
                                  static_cast<DropoutContext*>(nullptr), static_cast<detail::SublayerCache<T>*>(nullptr));
}

template <typename T>
Tensor<T> embed(const ModelParameters<T>& params, std::span<const TokenId> ids) {
  const std::size_t h = params.config.hidden_size;
  Tensor<T> x(ids.size(), h);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    std::copy_n(params.embedding.row(static_cast<std::size_t>(ids[r])), h, x.row(r));
  }
  return x;
}

// Projects the last combined hidden state onto the vocabulary through a
// parameter-free norm.
template <typename T>
Tensor<T> project_to_vocab(const ModelParameters<T>& params, const Tensor<T>& hidden, Tensor<T>* normed_out = nullptr,
                           std::vector<T>* inv_std_out = nullptr) {
  std::vector<T> inv_std;
  Tensor<T> normed = detail::norm_rows(hidden, params.config.norm_eps, inv_std);
  Tensor<T> logits = matmul_bt(normed, detail::head_weights(params));
  if (normed_out) *normed_out = std::move(normed);
  if (inv_std_out) *inv_std_out = std::move(inv_std);
  return logits;
}

// Full forward pass for one sequence: embeddings, the alpha-weighted sublayer
// stack, then vocabulary logits [seq_len x vocab].
template <typename T>
Tensor<T> forward(const ModelParameters<T>& params, std::span<const TokenId> ids, const AttentionMaskSpec& mask,
                  DropoutContext* dropout = nullptr, ForwardCache<T>* cache = nullptr) {
  const auto& cfg = params.config;
  detail::check_ids(ids, cfg);
  if (mask.seq_len != ids.size()) throw InputError("mask length does not match input length");
  const std::size_t s = cfg.num_sublayers();
  ForwardCache<T> local;
  ForwardCache<T>& c = cache ? *cache : local;
  c.ids.assign(ids.begin(), ids.end());
  c.visible = build_attention_mask(mask, ids);
  const detail::Rotary<T> rope(ids.size(), cfg.head_dim(), cfg.rope_base);

  c.outputs.assign(s + 1, {});
  c.layer_out.assign(s, {});
  c.sub.assign(cache ? s : 0, {});
  c.outputs[0] = embed(params, ids);
  for (std::size_t i = 1; i <= s; ++i) {
    c.layer_out[i - 1] = detail::sublayer_forward(params.sublayers[i - 1], cfg, c.outputs[i - 1], c.visible, rope,
                                                  dropout, cache ? &c.sub[i - 1] : nullptr);
    Tensor<T> combined(ids.size(), cfg.hidden_size);
    for (std::size_t j = 1; j <= i; ++j) {
      const T a = params.alpha_at(i, j);
      const Tensor<T>& lj = c.layer_out[j - 1];
      for (std::size_t e = 0; e < combined.size(); ++e) combined[e] += a * lj[e];
    }
    c.outputs[i] = std::move(combined);
    if (!cache && i >= 2) {
      // Without a cache only the sublayer outputs are needed going forward.
      c.outputs[i - 1] = {};
    }
  }
  return project_to_vocab(params, c.outputs[s], &c.final_normed, &c.final_inv_std);
}

// Backpropagates dlogits through a cached forward, accumulating into grads.
template <typename T>
void backward(const ModelParameters<T>& params, const ForwardCache<T>& c, const Tensor<T>& dlogits,
              ModelParameters<T>& grads) {
  const auto& cfg = params.config;
  const std::size_t s = cfg.num_sublayers();
  const std::size_t n = c.ids.size();
  if (c.sub.size() != s) throw InputError("backward needs a forward cache");
  const detail::Rotary<T> rope(n, cfg.head_dim(), cfg.rope_base);

  Tensor<T>& dhead = cfg.tie_embeddings ? grads.embedding : grads.head;
  accumulate_at_b(dhead, dlogits, c.final_normed);
  const Tensor<T> dnormed = matmul(dlogits, detail::head_weights(params));

  std::vector<Tensor<T>> dout(s + 1);
  std::vector<Tensor<T>> dlayer(s, Tensor<T>(n, cfg.hidden_size));
  dout[s] = detail::norm_rows_backward(c.final_normed, c.final_inv_std, dnormed);
  for (std::size_t i = s; i >= 1; --i) {
    // dout[i] is complete: its only consumers are sublayer i+1 and the head.
    const Tensor<T>& d = dout[i];
    for (std::size_t j = 1; j <= i; ++j) {
      const T a = params.alpha_at(i, j);
      const Tensor<T>& lj = c.layer_out[j - 1];
      T dot = 0;
      Tensor<T>& dl = dlayer[j - 1];
      for (std::size_t e = 0; e < d.size(); ++e) {
        dot += d[e] * lj[e];
        dl[e] += a * d[e];
      }
      grads.alpha[alpha_index(i, j)] += dot;
    }
    // dlayer[i-1] is now complete since every output >= i has been visited.
    dout[i - 1] = detail::sublayer_backward(params.sublayers[i - 1], grads.sublayers[i - 1], cfg, c.sub[i - 1],
                                            c.visible, rope, dlayer[i - 1]);
  }
  for (std::size_t r = 0; r < n; ++r) {
    T* dst = grads.embedding.row(static_cast<std::size_t>(c.ids[r]));
    const T* src = dout[0].row(r);
    for (std::size_t e = 0; e < cfg.hidden_size; ++e) dst[e] += src[e];
  }
}

}  // namespace hybridlm
