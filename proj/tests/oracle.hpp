#pragma once

// Reference implementation of the inference rules as plain loop nests over
// nested vectors. Shares nothing with the kernels: no Eigen, no mixed support
// rows, no segmented class sums, a dense one-hot label matrix, and the
// multimodal affinity evaluated term by term.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "caps/feature_matrix.hpp"
#include "caps/kernels.hpp"

namespace oracle {

using Rows = std::vector<std::vector<double>>;

inline Rows rows_of(const caps::FeatureMatrix& m) {
  Rows out(m.rows(), std::vector<double>(m.dim()));
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.dim(); ++c) out[r][c] = m.at(r, c);
  }
  return out;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

inline Rows dense_onehot(const std::vector<std::size_t>& classes, std::size_t n) {
  Rows out(classes.size(), std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < classes.size(); ++i) out[i][classes[i]] = 1.0;
  return out;
}

inline Rows matmul(const Rows& a, const Rows& b) {
  const std::size_t n = b.empty() ? 0 : b[0].size();
  Rows out(a.size(), std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < b.size(); ++k) s += a[i][k] * b[k][j];
      out[i][j] = s;
    }
  }
  return out;
}

// logits = f W^T, scaled by tau
inline Rows zeroshot(const Rows& f, const Rows& w, double tau) {
  Rows out(f.size(), std::vector<double>(w.size()));
  for (std::size_t i = 0; i < f.size(); ++i) {
    for (std::size_t k = 0; k < w.size(); ++k) out[i][k] = tau * dot(f[i], w[k]);
  }
  return out;
}

// A = exp(-beta (1 - f F_img))
inline Rows affinity(const Rows& f, const Rows& img, double beta) {
  Rows out(f.size(), std::vector<double>(img.size()));
  for (std::size_t i = 0; i < f.size(); ++i) {
    for (std::size_t j = 0; j < img.size(); ++j) out[i][j] = std::exp(-beta * (1.0 - dot(f[i], img[j])));
  }
  return out;
}

// A_M = exp(-beta (1 - delta f F_cap - (1 - delta) f F_img))
inline Rows multimodal(const Rows& f, const Rows& img, const Rows& cap, double beta, double delta) {
  Rows out(f.size(), std::vector<double>(img.size()));
  for (std::size_t i = 0; i < f.size(); ++i) {
    for (std::size_t j = 0; j < img.size(); ++j) {
      out[i][j] = std::exp(-beta * (1.0 - delta * dot(f[i], cap[j]) - (1.0 - delta) * dot(f[i], img[j])));
    }
  }
  return out;
}

inline Rows softmax(const Rows& scores) {
  Rows out = scores;
  for (auto& row : out) {
    double z = 0.0;
    for (double& x : row) {
      x = std::exp(x);
      z += x;
    }
    for (double& x : row) x /= z;
  }
  return out;
}

// S = softmax(F W^T)
inline Rows signatures(const Rows& feats, const Rows& w) { return softmax(zeroshot(feats, w, 1.0)); }

// M_ij = KL(s_i || S_j), smoothed by eps
inline Rows kl(const Rows& s, const Rows& support, double eps = 1e-12) {
  Rows out(s.size(), std::vector<double>(support.size()));
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < support.size(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < s[i].size(); ++k) {
        acc += s[i][k] * std::log((s[i][k] + eps) / (support[j][k] + eps));
      }
      out[i][j] = acc;
    }
  }
  return out;
}

// min-max affine map of x onto the range of target
inline Rows phi(const Rows& x, const Rows& target) {
  double x_lo = x[0][0], x_hi = x[0][0], t_lo = target[0][0], t_hi = target[0][0];
  for (const auto& row : x) for (double v : row) { x_lo = std::min(x_lo, v); x_hi = std::max(x_hi, v); }
  for (const auto& row : target) for (double v : row) { t_lo = std::min(t_lo, v); t_hi = std::max(t_hi, v); }
  Rows out = x;
  for (auto& row : out) {
    for (double& v : row) v = x_hi == x_lo ? t_lo : t_lo + (t_hi - t_lo) * (v - x_lo) / (x_hi - x_lo);
  }
  return out;
}

struct Instance {
  Rows f, w, img, cap;
  std::vector<std::size_t> classes;
  std::size_t n_classes = 0;
};

inline Instance instance_of(const caps::FeatureMatrix& f, const caps::FeatureMatrix& w,
                            const caps::FeatureMatrix& img, const caps::FeatureMatrix& cap,
                            const caps::OneHotLabels& labels) {
  Instance in{rows_of(f), rows_of(w), rows_of(img), rows_of(cap), {}, labels.classes()};
  for (std::size_t r = 0; r < labels.rows(); ++r) in.classes.push_back(labels.class_of(r));
  return in;
}

inline Rows add_terms(const Rows& zs, double alpha, const Rows& al, double gamma, const Rows* ph) {
  Rows out = zs;
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (std::size_t k = 0; k < out[i].size(); ++k) {
      out[i][k] += alpha * al[i][k] + (ph != nullptr ? gamma * (*ph)[i][k] : 0.0);
    }
  }
  return out;
}

inline Rows negated_ml(const Instance& in) {
  Rows ml = matmul(kl(signatures(in.f, in.w), signatures(in.img, in.w)),
                   dense_onehot(in.classes, in.n_classes));
  for (auto& row : ml) for (double& v : row) v = -v;
  return ml;
}

// f W^T + alpha A L + gamma phi(-M L)
inline Rows tipx(const Instance& in, const caps::HyperParams& hp) {
  const Rows L = dense_onehot(in.classes, in.n_classes);
  const Rows al = matmul(affinity(in.f, in.img, hp.beta), L);
  const Rows ph = phi(negated_ml(in), al);
  return add_terms(zeroshot(in.f, in.w, hp.tau), hp.alpha, al, hp.gamma, &ph);
}

// f W^T + alpha A_M L + gamma phi(-M L)
inline Rows m_adapter(const Instance& in, const caps::HyperParams& hp) {
  const Rows L = dense_onehot(in.classes, in.n_classes);
  const Rows al = matmul(multimodal(in.f, in.img, in.cap, hp.beta, hp.delta), L);
  const Rows ph = phi(negated_ml(in), al);
  return add_terms(zeroshot(in.f, in.w, hp.tau), hp.alpha, al, hp.gamma, &ph);
}

// f W^T + alpha A_M L
inline Rows f_variant(const Instance& in, const caps::HyperParams& hp) {
  const Rows L = dense_onehot(in.classes, in.n_classes);
  const Rows al = matmul(multimodal(in.f, in.img, in.cap, hp.beta, hp.delta), L);
  return add_terms(zeroshot(in.f, in.w, hp.tau), hp.alpha, al, hp.gamma, nullptr);
}

inline std::size_t argmax(const std::vector<double>& row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

inline double accuracy(const Rows& logits, const std::vector<std::size_t>& labels) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) correct += argmax(logits[i]) == labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

// Largest |a - b| / max(1, |b|) over all entries.
inline double max_rel_error(const caps::Matrix& a, const Rows& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    for (std::size_t k = 0; k < b[i].size(); ++k) {
      worst = std::max(worst, std::abs(a(i, k) - b[i][k]) / std::max(1.0, std::abs(b[i][k])));
    }
  }
  return worst;
}

}  // namespace oracle
