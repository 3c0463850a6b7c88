#pragma once

// Inference kernels: zero-shot logits, image affinity, multimodal affinity,
// signatures, KL intimacy matrix, range rescaling, and the three cache-based
// logit rules (TIP-X, M-Adapter, and the fast variant without the KL term).
//
// Features are stored as float32; every kernel computes in double.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "caps/error.hpp"
#include "caps/feature_matrix.hpp"
#include "caps/parallel.hpp"

namespace caps {

/// Dense row-major matrix of doubles (logits, affinities, signatures, ...).
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) throw Error(Errc::shape_mismatch, "matrix data length");
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept {
    return std::span<double>(data_).subspan(r * cols_, cols_);
  }
  std::span<const double> row(std::size_t r) const noexcept {
    return std::span<const double>(data_).subspan(r * cols_, cols_);
  }
  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Test-sample x class scores.
using LogitsMatrix = Matrix;

/// Mixing weights of the cache-based logit rules. `tau` scales the zero-shot
/// term (CLIP's logit scale).
struct HyperParams {
  double alpha = 0.0;
  double beta = 1.0;
  double gamma = 0.0;
  double delta = 0.0;
  double tau = 100.0;

  void validate() const {
    if (!(delta >= 0.0 && delta <= 1.0)) {
      throw Error(Errc::delta_out_of_range, "delta = " + std::to_string(delta));
    }
    if (!(alpha >= 0.0) || !(beta >= 0.0) || !(gamma >= 0.0) || !std::isfinite(alpha) ||
        !std::isfinite(beta) || !std::isfinite(gamma)) {
      throw Error(Errc::invalid_hyperparams, "alpha, beta, gamma must be finite and >= 0");
    }
    if (!(tau > 0.0) || !std::isfinite(tau)) {
      throw Error(Errc::invalid_hyperparams, "tau must be finite and > 0");
    }
  }

  friend bool operator==(const HyperParams&, const HyperParams&) = default;
};

enum class Method { zeroshot, tipx, m_adapter, f_variant };

constexpr std::string_view to_string(Method m) {
  switch (m) {
    case Method::zeroshot: return "zeroshot";
    case Method::tipx: return "tipx";
    case Method::m_adapter: return "m_adapter";
    case Method::f_variant: return "f_variant";
  }
  return "unknown";
}

inline Method parse_method(std::string_view name) {
  for (const Method m : {Method::zeroshot, Method::tipx, Method::m_adapter, Method::f_variant}) {
    if (to_string(m) == name) return m;
  }
  throw Error(Errc::invalid_hyperparams, "unknown method '" + std::string(name) + "'");
}

inline constexpr double kKlEpsilon = 1e-12;
inline constexpr double kStochasticTolerance = 1e-6;

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Row-block height of the dot-product kernel; fixed so results do not depend
// on the thread count.
inline constexpr std::size_t kDotRowBlock = 128;
inline constexpr std::size_t kRowBlock = 16;

inline void require_normalized(const FeatureMatrix& m, std::string_view name) {
  if (!m.normalized()) throw Error(Errc::not_normalized, std::string(name));
}

inline void require_same_dim(const FeatureMatrix& a, const FeatureMatrix& b,
                             std::string_view what) {
  if (a.dim() != b.dim()) {
    throw Error(Errc::dim_mismatch, std::string(what) + ": " + std::to_string(a.dim()) +
                                        " vs " + std::to_string(b.dim()));
  }
}

inline RowMatrix to_double(const FeatureMatrix& m) {
  RowMatrix out(m.rows(), m.dim());
  const auto src = m.data();
  std::copy(src.begin(), src.end(), out.data());
  return out;
}

// delta * cap + (1 - delta) * img, elementwise. Exactly img at delta = 0 and
// exactly cap at delta = 1, so the multimodal affinity reduces bit for bit.
inline RowMatrix mix_support(const RowMatrix& img, const RowMatrix& cap, double delta) {
  RowMatrix out(img.rows(), img.cols());
  const double keep = 1.0 - delta;
  for (Eigen::Index i = 0; i < img.size(); ++i) {
    out.data()[i] = delta * cap.data()[i] + keep * img.data()[i];
  }
  return out;
}

// out(i, j) = <a_i, b_j>. Every GEMM call sees exactly kDotRowBlock rows (the
// tail block is zero-padded), so a row's value depends neither on the thread
// count nor on how many other rows share the call.
inline Matrix dot_products(const RowMatrix& a, const RowMatrix& b, unsigned threads) {
  Matrix out(static_cast<std::size_t>(a.rows()), static_cast<std::size_t>(b.rows()));
  if (out.empty()) return out;
  const auto block = static_cast<Eigen::Index>(kDotRowBlock);
  parallel_blocks(out.rows(), kDotRowBlock, threads, [&](std::size_t begin, std::size_t end) {
    const auto rows = static_cast<Eigen::Index>(end - begin);
    RowMatrix lhs = RowMatrix::Zero(block, a.cols());
    lhs.topRows(rows) = a.middleRows(static_cast<Eigen::Index>(begin), rows);
    RowMatrix prod(block, b.rows());
    prod.noalias() = lhs * b.transpose();
    Eigen::Map<RowMatrix>(out.row(begin).data(), rows, b.rows()) = prod.topRows(rows);
  });
  return out;
}

// exp(-beta * (1 - d))
inline Matrix affinity_from_dots(const Matrix& dots, double beta) {
  Matrix out(dots.rows(), dots.cols());
  const auto src = dots.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = std::exp(-beta * (1.0 - src[i]));
  return out;
}

inline Matrix softmax_rows(Matrix scores) {
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    auto row = scores.row(r);
    const double peak = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double& x : row) {
      x = std::exp(x - peak);
      sum += x;
    }
    for (double& x : row) x /= sum;
  }
  return scores;
}

// Per-class segmented sums over the contiguous class blocks: (X L)(i, k).
inline Matrix class_sums(const Matrix& per_sample, const OneHotLabels& labels) {
  if (per_sample.cols() != labels.rows()) {
    throw Error(Errc::shape_mismatch, "support columns " + std::to_string(per_sample.cols()) +
                                          " vs label rows " + std::to_string(labels.rows()));
  }
  Matrix out(per_sample.rows(), labels.classes());
  for (std::size_t i = 0; i < per_sample.rows(); ++i) {
    const auto row = per_sample.row(i);
    for (std::size_t k = 0; k < labels.classes(); ++k) {
      double sum = 0.0;
      for (std::size_t j = labels.class_begin(k); j < labels.class_end(k); ++j) sum += row[j];
      out(i, k) = sum;
    }
  }
  return out;
}

inline void require_stochastic(const Matrix& m, std::string_view name) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double sum = 0.0;
    for (const double x : m.row(r)) {
      if (!(x >= 0.0)) {
        throw Error(Errc::not_stochastic, std::string(name) + " row " + std::to_string(r) +
                                              " has a negative or NaN entry");
      }
      sum += x;
    }
    if (std::abs(sum - 1.0) > kStochasticTolerance) {
      throw Error(Errc::not_stochastic,
                  std::string(name) + " row " + std::to_string(r) + " sums to " +
                      std::to_string(sum));
    }
  }
}

inline Matrix kl_unchecked(const Matrix& s, const Matrix& support, unsigned threads) {
  Matrix out(s.rows(), support.rows());
  const std::size_t n = s.cols();
  parallel_blocks(s.rows(), kRowBlock, threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const double* si = s.row(i).data();
      for (std::size_t j = 0; j < support.rows(); ++j) {
        const double* sj = support.row(j).data();
        double acc = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          acc += si[k] * std::log((si[k] + kKlEpsilon) / (sj[k] + kKlEpsilon));
        }
        out(i, j) = acc;
      }
    }
  });
  return out;
}

// -(M L): the intimacy term before rescaling. `test_class_dots` are the
// zero-shot dot products f_test W^T, reused for the test signatures.
inline Matrix negated_intimacy(const Matrix& test_class_dots, const RowMatrix& img,
                               const RowMatrix& classifier, const OneHotLabels& labels,
                               unsigned threads) {
  const Matrix test_sig = softmax_rows(test_class_dots);
  const Matrix support_sig = softmax_rows(dot_products(img, classifier, threads));
  Matrix ml = class_sums(kl_unchecked(test_sig, support_sig, threads), labels);
  for (double& x : ml.data()) x = -x;
  return ml;
}

inline Matrix rescale_unchecked(const Matrix& x, const Matrix& target) {
  const auto [x_lo, x_hi] = std::minmax_element(x.data().begin(), x.data().end());
  const auto [t_lo, t_hi] = std::minmax_element(target.data().begin(), target.data().end());
  const double lo = *t_lo;
  const double span = *t_hi - *t_lo;
  Matrix out(x.rows(), x.cols(), lo);
  if (*x_hi == *x_lo) return out;
  const double x_min = *x_lo;
  const double x_span = *x_hi - *x_lo;
  const auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = lo + (src[i] - x_min) / x_span * span;
  return out;
}

// tau * zs + alpha * affinity_term [+ gamma * intimacy_term]
inline Matrix combine(const Matrix& zs_dots, double tau, double alpha, const Matrix& affinity_term,
                      double gamma, const Matrix* intimacy_term) {
  Matrix out(zs_dots.rows(), zs_dots.cols());
  const auto zs = zs_dots.data();
  const auto al = affinity_term.data();
  auto dst = out.data();
  if (intimacy_term != nullptr) {
    const auto ph = intimacy_term->data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = tau * zs[i] + alpha * al[i] + gamma * ph[i];
  } else {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = tau * zs[i] + alpha * al[i];
  }
  return out;
}

inline Matrix scale(const Matrix& m, double factor) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] = factor * m.data()[i];
  return out;
}

inline void check_cache_shapes(const FeatureMatrix& f_test, const FeatureMatrix& w,
                               const FeatureMatrix& f_img, const OneHotLabels& labels) {
  require_normalized(f_test, "test features");
  require_normalized(w, "classifier");
  require_normalized(f_img, "support image features");
  require_same_dim(f_test, w, "test vs classifier");
  require_same_dim(f_test, f_img, "test vs support images");
  if (labels.rows() != f_img.rows()) {
    throw Error(Errc::shape_mismatch, "label rows " + std::to_string(labels.rows()) +
                                          " vs support rows " + std::to_string(f_img.rows()));
  }
  if (labels.classes() != w.rows()) {
    throw Error(Errc::shape_mismatch, "label classes " + std::to_string(labels.classes()) +
                                          " vs classifier rows " + std::to_string(w.rows()));
  }
}

inline void check_caption_cache(const FeatureMatrix& f_img, const FeatureMatrix& f_cap) {
  require_normalized(f_cap, "support caption features");
  if (f_img.rows() != f_cap.rows() || f_img.dim() != f_cap.dim()) {
    throw Error(Errc::shape_mismatch, "image cache " + std::to_string(f_img.rows()) + "x" +
                                          std::to_string(f_img.dim()) + " vs caption cache " +
                                          std::to_string(f_cap.rows()) + "x" +
                                          std::to_string(f_cap.dim()));
  }
}

inline void check_delta(double delta) {
  if (!(delta >= 0.0 && delta <= 1.0)) {
    throw Error(Errc::delta_out_of_range, "delta = " + std::to_string(delta));
  }
}

}  // namespace detail

/// tau * f_test W^T
inline LogitsMatrix zeroshot_logits(const FeatureMatrix& f_test, const FeatureMatrix& w, double tau,
                                    unsigned threads = 1) {
  detail::require_normalized(f_test, "test features");
  detail::require_normalized(w, "classifier");
  detail::require_same_dim(f_test, w, "test vs classifier");
  if (!(tau > 0.0)) throw Error(Errc::invalid_hyperparams, "tau must be > 0");
  return detail::scale(
      detail::dot_products(detail::to_double(f_test), detail::to_double(w), threads), tau);
}

/// A(i, j) = exp(-beta (1 - <f_i, img_j>))
inline Matrix affinity(const FeatureMatrix& f_test, const FeatureMatrix& f_img, double beta,
                       unsigned threads = 1) {
  detail::require_normalized(f_test, "test features");
  detail::require_normalized(f_img, "support image features");
  detail::require_same_dim(f_test, f_img, "test vs support images");
  return detail::affinity_from_dots(
      detail::dot_products(detail::to_double(f_test), detail::to_double(f_img), threads), beta);
}

/// A_M(i, j) = exp(-beta (1 - delta <f_i, cap_j> - (1 - delta) <f_i, img_j>)).
/// Evaluated as one product against the delta-mixed support rows.
inline Matrix multimodal_affinity(const FeatureMatrix& f_test, const FeatureMatrix& f_img,
                                  const FeatureMatrix& f_cap, double beta, double delta,
                                  unsigned threads = 1) {
  detail::require_normalized(f_test, "test features");
  detail::require_normalized(f_img, "support image features");
  detail::check_caption_cache(f_img, f_cap);
  detail::require_same_dim(f_test, f_img, "test vs support images");
  detail::check_delta(delta);
  const auto mixed =
      detail::mix_support(detail::to_double(f_img), detail::to_double(f_cap), delta);
  return detail::affinity_from_dots(
      detail::dot_products(detail::to_double(f_test), mixed, threads), beta);
}

/// Row-wise softmax(features W^T).
inline Matrix signatures(const FeatureMatrix& features, const FeatureMatrix& w,
                         unsigned threads = 1) {
  detail::require_same_dim(features, w, "features vs classifier");
  detail::require_normalized(features, "features");
  detail::require_normalized(w, "classifier");
  return detail::softmax_rows(
      detail::dot_products(detail::to_double(features), detail::to_double(w), threads));
}

/// M(i, j) = sum_k s_i[k] ln((s_i[k] + eps) / (S_j[k] + eps)), eps = 1e-12.
inline Matrix kl_matrix(const Matrix& s, const Matrix& support, unsigned threads = 1) {
  if (s.cols() != support.cols()) {
    throw Error(Errc::dim_mismatch, "signature widths " + std::to_string(s.cols()) + " vs " +
                                        std::to_string(support.cols()));
  }
  detail::require_stochastic(s, "test signatures");
  detail::require_stochastic(support, "support signatures");
  return detail::kl_unchecked(s, support, threads);
}

/// Affine min-max map of x onto [min(target), max(target)], taken over all
/// entries. A constant x maps to min(target).
inline Matrix rescale_phi(const Matrix& x, const Matrix& target) {
  if (x.empty() || target.empty()) throw Error(Errc::empty_input, "rescale_phi");
  return detail::rescale_unchecked(x, target);
}

/// (X L) for a test x support matrix X.
inline Matrix affinity_class_sums(const Matrix& per_sample, const OneHotLabels& labels) {
  return detail::class_sums(per_sample, labels);
}

/// tau f W^T + alpha A L + gamma phi(-M L), with phi targeting the range of A L.
inline LogitsMatrix tipx_logits(const FeatureMatrix& f_test, const FeatureMatrix& w,
                                const FeatureMatrix& f_img, const OneHotLabels& labels,
                                const HyperParams& hp, unsigned threads = 1) {
  hp.validate();
  detail::check_cache_shapes(f_test, w, f_img, labels);
  const auto test = detail::to_double(f_test);
  const auto classifier = detail::to_double(w);
  const auto img = detail::to_double(f_img);
  const Matrix zs = detail::dot_products(test, classifier, threads);
  const Matrix al = detail::class_sums(
      detail::affinity_from_dots(detail::dot_products(test, img, threads), hp.beta), labels);
  const Matrix phi = detail::rescale_unchecked(
      detail::negated_intimacy(zs, img, classifier, labels, threads), al);
  return detail::combine(zs, hp.tau, hp.alpha, al, hp.gamma, &phi);
}

/// tau f W^T + alpha A_M L + gamma phi(-M L). M comes from the image
/// signatures exactly as in TIP-X; phi targets the range of A_M L.
inline LogitsMatrix m_adapter_logits(const FeatureMatrix& f_test, const FeatureMatrix& w,
                                     const FeatureMatrix& f_img, const FeatureMatrix& f_cap,
                                     const OneHotLabels& labels, const HyperParams& hp,
                                     unsigned threads = 1) {
  hp.validate();
  detail::check_cache_shapes(f_test, w, f_img, labels);
  detail::check_caption_cache(f_img, f_cap);
  const auto test = detail::to_double(f_test);
  const auto classifier = detail::to_double(w);
  const auto img = detail::to_double(f_img);
  const auto mixed = detail::mix_support(img, detail::to_double(f_cap), hp.delta);
  const Matrix zs = detail::dot_products(test, classifier, threads);
  const Matrix al = detail::class_sums(
      detail::affinity_from_dots(detail::dot_products(test, mixed, threads), hp.beta), labels);
  const Matrix phi = detail::rescale_unchecked(
      detail::negated_intimacy(zs, img, classifier, labels, threads), al);
  return detail::combine(zs, hp.tau, hp.alpha, al, hp.gamma, &phi);
}

/// tau f W^T + alpha A_M L. Never builds M.
inline LogitsMatrix f_variant_logits(const FeatureMatrix& f_test, const FeatureMatrix& w,
                                     const FeatureMatrix& f_img, const FeatureMatrix& f_cap,
                                     const OneHotLabels& labels, const HyperParams& hp,
                                     unsigned threads = 1) {
  hp.validate();
  detail::check_cache_shapes(f_test, w, f_img, labels);
  detail::check_caption_cache(f_img, f_cap);
  const auto test = detail::to_double(f_test);
  const auto mixed =
      detail::mix_support(detail::to_double(f_img), detail::to_double(f_cap), hp.delta);
  const Matrix zs = detail::dot_products(test, detail::to_double(w), threads);
  const Matrix al = detail::class_sums(
      detail::affinity_from_dots(detail::dot_products(test, mixed, threads), hp.beta), labels);
  return detail::combine(zs, hp.tau, hp.alpha, al, hp.gamma, nullptr);
}

/// Everything an inference run reads besides the test features.
struct SupportCache {
  FeatureMatrix classifier;
  FeatureMatrix img;
  FeatureMatrix cap;
  OneHotLabels labels;
};

inline LogitsMatrix method_logits(Method method, const FeatureMatrix& f_test,
                                  const SupportCache& cache, const HyperParams& hp,
                                  unsigned threads = 1) {
  switch (method) {
    case Method::zeroshot:
      hp.validate();
      return zeroshot_logits(f_test, cache.classifier, hp.tau, threads);
    case Method::tipx:
      return tipx_logits(f_test, cache.classifier, cache.img, cache.labels, hp, threads);
    case Method::m_adapter:
      return m_adapter_logits(f_test, cache.classifier, cache.img, cache.cap, cache.labels, hp,
                              threads);
    case Method::f_variant:
      return f_variant_logits(f_test, cache.classifier, cache.img, cache.cap, cache.labels, hp,
                              threads);
  }
  throw Error(Errc::invalid_hyperparams, "unknown method");
}

}  // namespace caps
