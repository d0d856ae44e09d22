#pragma once

// Independent straight-line reference implementations used as test oracles.
// Deliberately written with plain loops over nested vectors, sharing no code
// with the library beyond the parameter container.

#include <cmath>
#include <vector>

#include "hybridlm/hybridlm.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat zeros(std::size_t r, std::size_t c) { return Mat(r, std::vector<double>(c, 0.0)); }

template <typename T>
Mat from_tensor(const hybridlm::Tensor<T>& t) {
  Mat m = zeros(t.rows(), t.cols());
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = static_cast<double>(t(r, c));
  }
  return m;
}

inline Mat mul(const Mat& a, const Mat& b) {
  Mat out = zeros(a.size(), b[0].size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t k = 0; k < b.size(); ++k) {
      for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
    }
  }
  return out;
}

inline Mat layer_norm(const Mat& x, double eps) {
  Mat out = x;
  for (auto& row : out) {
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(row.size());
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(row.size());
    for (double& v : row) v = (v - mean) / std::sqrt(var + eps);
  }
  return out;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// Rotates consecutive (even, odd) coordinate pairs of every head by
// position * base^(-2m/head_dim).
inline void rotary(Mat& x, std::size_t heads, double base) {
  const std::size_t d = x[0].size() / heads;
  for (std::size_t p = 0; p < x.size(); ++p) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t m = 0; m < d / 2; ++m) {
        const double theta = static_cast<double>(p) * std::pow(base, -2.0 * m / static_cast<double>(d));
        double& a = x[p][h * d + 2 * m];
        double& b = x[p][h * d + 2 * m + 1];
        const double a0 = a, b0 = b;
        a = a0 * std::cos(theta) - b0 * std::sin(theta);
        b = a0 * std::sin(theta) + b0 * std::cos(theta);
      }
    }
  }
}

template <typename T>
Mat sublayer(const hybridlm::ModelParameters<T>& p, std::size_t index, const Mat& x,
             const std::vector<std::uint8_t>& visible) {
  const auto& cfg = p.config;
  const auto& sp = p.sublayers[index - 1];
  const Mat xn = layer_norm(x, cfg.norm_eps);
  const Mat gate = mul(xn, from_tensor(sp.gate));
  Mat values;
  if (index % 2 == 1) {
    Mat q = mul(xn, from_tensor(sp.query));
    Mat k = mul(xn, from_tensor(sp.key));
    const Mat v = mul(xn, from_tensor(sp.value));
    rotary(q, cfg.n_heads, cfg.rope_base);
    rotary(k, cfg.n_heads, cfg.rope_base);
    const std::size_t n = x.size();
    const std::size_t d = cfg.head_dim();
    values = zeros(n, cfg.hidden_size);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> w(n, 0.0);
        double mx = -1e300;
        for (std::size_t j = 0; j < n; ++j) {
          if (!visible[i * n + j]) continue;
          double s = 0.0;
          for (std::size_t c = 0; c < d; ++c) s += q[i][h * d + c] * k[j][h * d + c];
          w[j] = s / std::sqrt(static_cast<double>(d));
          mx = std::max(mx, w[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          w[j] = visible[i * n + j] ? std::exp(w[j] - mx) : 0.0;
          z += w[j];
        }
        for (std::size_t j = 0; j < n; ++j) {
          for (std::size_t c = 0; c < d; ++c) values[i][h * d + c] += w[j] / z * v[j][h * d + c];
        }
      }
    }
  } else {
    values = mul(xn, from_tensor(sp.linear));
  }
  Mat mixed = values;
  for (std::size_t i = 0; i < mixed.size(); ++i) {
    for (std::size_t j = 0; j < mixed[i].size(); ++j) mixed[i][j] = values[i][j] * gelu(gate[i][j]);
  }
  Mat out = mul(layer_norm(mixed, cfg.norm_eps), from_tensor(sp.output));
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (std::size_t j = 0; j < out[i].size(); ++j) out[i][j] += x[i][j];
  }
  return out;
}

// Plain sequential stack (no layer weighting) followed by the normed head.
template <typename T>
Mat sequential_logits(const hybridlm::ModelParameters<T>& p, const std::vector<hybridlm::TokenId>& ids,
                      const std::vector<std::uint8_t>& visible) {
  const auto& cfg = p.config;
  Mat x = zeros(ids.size(), cfg.hidden_size);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    for (std::size_t c = 0; c < cfg.hidden_size; ++c) x[i][c] = static_cast<double>(p.embedding(ids[i], c));
  }
  for (std::size_t s = 1; s <= cfg.num_sublayers(); ++s) x = sublayer(p, s, x, visible);
  const Mat xn = layer_norm(x, cfg.norm_eps);
  const auto& head = cfg.tie_embeddings ? p.embedding : p.head;
  Mat logits = zeros(ids.size(), cfg.vocab_size);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    for (std::size_t v = 0; v < cfg.vocab_size; ++v) {
      for (std::size_t c = 0; c < cfg.hidden_size; ++c) logits[i][v] += xn[i][c] * static_cast<double>(head(v, c));
    }
  }
  return logits;
}

struct LambRef {
  double lr, beta1, beta2, eps, wd;
};

// One LAMB step written directly from the update equations.
inline void lamb(std::vector<double>& p, const std::vector<double>& g, std::vector<double>& m,
                 std::vector<double>& v, int t, const LambRef& h) {
  std::vector<double> u(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i] = h.beta1 * m[i] + (1 - h.beta1) * g[i];
    v[i] = h.beta2 * v[i] + (1 - h.beta2) * g[i] * g[i];
    const double mh = m[i] / (1 - std::pow(h.beta1, t));
    const double vh = v[i] / (1 - std::pow(h.beta2, t));
    u[i] = mh / (std::sqrt(vh) + h.eps) + h.wd * p[i];
  }
  double pn = 0.0, un = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    pn += p[i] * p[i];
    un += u[i] * u[i];
  }
  pn = std::sqrt(pn);
  un = std::sqrt(un);
  const double r = (pn == 0.0 || un == 0.0) ? 1.0 : pn / un;
  for (std::size_t i = 0; i < p.size(); ++i) p[i] -= h.lr * r * u[i];
}

inline double log_softmax(const std::vector<double>& row, std::size_t target) {
  double mx = row[0];
  for (double v : row) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : row) z += std::exp(v - mx);
  return row[target] - mx - std::log(z);
}

}  // namespace oracle
