#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "caps/error.hpp"

namespace caps {

inline constexpr double kUnitNormTolerance = 1e-5;
inline constexpr double kZeroNormThreshold = 1e-12;

namespace detail {

inline double row_norm(std::span<const float> row) {
  double sum_sq = 0.0;
  for (const float x : row) sum_sq += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(sum_sq);
}

}  // namespace detail

/// Dense row-major matrix of 32-bit embeddings. Rows are samples (image
/// features, prompt features, classifier rows, ...). Immutable once built;
/// construction validates the shape, finiteness and, when the normalized flag
/// is set, that every row has unit norm.
class FeatureMatrix {
 public:
  FeatureMatrix() = default;

  FeatureMatrix(std::size_t rows, std::size_t dim, std::vector<float> data, bool normalized = false)
      : rows_(rows), dim_(dim), data_(std::move(data)), normalized_(normalized) {
    if (data_.size() != rows_ * dim_) {
      throw Error(Errc::shape_mismatch, "data length " + std::to_string(data_.size()) + " != " +
                                            std::to_string(rows_) + " x " + std::to_string(dim_));
    }
    for (std::size_t i = 0; i < data_.size(); ++i) {
      if (!std::isfinite(data_[i])) {
        throw Error(Errc::non_finite, "entry " + std::to_string(i) + " is not finite");
      }
    }
    if (normalized_) {
      for (std::size_t r = 0; r < rows_; ++r) {
        const double norm = detail::row_norm(row(r));
        if (std::abs(norm - 1.0) > kUnitNormTolerance) {
          throw Error(Errc::not_normalized,
                      "row " + std::to_string(r) + " has norm " + std::to_string(norm));
        }
      }
    }
  }

  static FeatureMatrix from_rows(const std::vector<std::vector<float>>& rows,
                                 bool normalized = false) {
    const std::size_t dim = rows.empty() ? 0 : rows.front().size();
    std::vector<float> data;
    data.reserve(rows.size() * dim);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != dim) {
        throw Error(Errc::dim_mismatch, "row " + std::to_string(r) + " has length " +
                                            std::to_string(rows[r].size()) + ", expected " +
                                            std::to_string(dim));
      }
      data.insert(data.end(), rows[r].begin(), rows[r].end());
    }
    return FeatureMatrix(rows.size(), dim, std::move(data), normalized);
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t dim() const noexcept { return dim_; }
  bool normalized() const noexcept { return normalized_; }
  bool empty() const noexcept { return rows_ == 0; }

  std::span<const float> data() const noexcept { return data_; }
  std::span<const float> row(std::size_t r) const noexcept {
    return std::span<const float>(data_).subspan(r * dim_, dim_);
  }
  float at(std::size_t r, std::size_t c) const noexcept { return data_[r * dim_ + c]; }

  friend bool operator==(const FeatureMatrix&, const FeatureMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t dim_ = 0;
  std::vector<float> data_;
  bool normalized_ = false;
};

/// Divides every row by its Euclidean norm. A matrix already flagged as
/// normalized is returned unchanged, so the operation is idempotent bit for bit.
inline FeatureMatrix normalize_rows(const FeatureMatrix& m) {
  if (m.normalized()) return m;
  std::vector<float> out(m.data().begin(), m.data().end());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double norm = detail::row_norm(m.row(r));
    if (norm < kZeroNormThreshold) {
      throw Error(Errc::zero_norm_row, "row " + std::to_string(r));
    }
    for (std::size_t c = 0; c < m.dim(); ++c) {
      auto& x = out[r * m.dim() + c];
      x = static_cast<float>(static_cast<double>(x) / norm);
    }
  }
  return FeatureMatrix(m.rows(), m.dim(), std::move(out), true);
}

/// Support-sample x class indicator matrix. Stored as the class index of each
/// row plus the class block offsets; rows of one class are contiguous and
/// blocks appear in ascending class order.
class OneHotLabels {
 public:
  OneHotLabels() = default;

  std::size_t rows() const noexcept { return class_of_.size(); }
  std::size_t classes() const noexcept { return offsets_.empty() ? 0 : offsets_.size() - 1; }
  std::size_t class_of(std::size_t row) const noexcept { return class_of_[row]; }
  std::span<const std::size_t> sample_classes() const noexcept { return class_of_; }

  // Rows [class_begin(k), class_end(k)) belong to class k.
  std::size_t class_begin(std::size_t k) const noexcept { return offsets_[k]; }
  std::size_t class_end(std::size_t k) const noexcept { return offsets_[k + 1]; }
  std::size_t class_size(std::size_t k) const noexcept { return offsets_[k + 1] - offsets_[k]; }

  float at(std::size_t row, std::size_t k) const noexcept {
    return class_of_[row] == k ? 1.0F : 0.0F;
  }

  std::vector<float> dense() const {
    std::vector<float> out(rows() * classes(), 0.0F);
    for (std::size_t r = 0; r < rows(); ++r) out[r * classes() + class_of_[r]] = 1.0F;
    return out;
  }

  friend bool operator==(const OneHotLabels&, const OneHotLabels&) = default;

 private:
  friend OneHotLabels build_onehot(std::span<const std::size_t>, std::size_t);

  std::vector<std::size_t> class_of_;
  std::vector<std::size_t> offsets_;
};

inline OneHotLabels build_onehot(std::span<const std::size_t> class_of_sample,
                                 std::size_t n_classes) {
  OneHotLabels labels;
  labels.offsets_.assign(n_classes + 1, 0);
  for (std::size_t i = 0; i < class_of_sample.size(); ++i) {
    const std::size_t k = class_of_sample[i];
    if (k >= n_classes) {
      throw Error(Errc::out_of_range_class, "sample " + std::to_string(i) + " has class " +
                                                std::to_string(k) + " >= " +
                                                std::to_string(n_classes));
    }
    if (i > 0 && k < class_of_sample[i - 1]) {
      throw Error(Errc::non_contiguous_classes,
                  "sample " + std::to_string(i) + " breaks ascending class blocks");
    }
    ++labels.offsets_[k + 1];
  }
  for (std::size_t k = 0; k < n_classes; ++k) labels.offsets_[k + 1] += labels.offsets_[k];
  labels.class_of_.assign(class_of_sample.begin(), class_of_sample.end());
  return labels;
}

/// Assembles the zero-shot text classifier: row k is the normalized mean of
/// the normalized prompt embeddings of class k.
inline FeatureMatrix build_classifier(std::span<const FeatureMatrix> per_class_prompt_embeddings,
                                      std::size_t n_classes) {
  if (per_class_prompt_embeddings.size() != n_classes) {
    if (per_class_prompt_embeddings.size() < n_classes) {
      throw Error(Errc::empty_class_prompt_set,
                  "class " + std::to_string(per_class_prompt_embeddings.size()));
    }
    throw Error(Errc::length_mismatch, "got prompt sets for " +
                                           std::to_string(per_class_prompt_embeddings.size()) +
                                           " classes, expected " + std::to_string(n_classes));
  }
  std::size_t dim = 0;
  std::vector<float> out;
  for (std::size_t k = 0; k < n_classes; ++k) {
    const FeatureMatrix& prompts = per_class_prompt_embeddings[k];
    if (prompts.empty()) throw Error(Errc::empty_class_prompt_set, "class " + std::to_string(k));
    if (k == 0) {
      dim = prompts.dim();
      out.reserve(n_classes * dim);
    } else if (prompts.dim() != dim) {
      throw Error(Errc::dim_mismatch, "class " + std::to_string(k) + " has dim " +
                                          std::to_string(prompts.dim()) + ", expected " +
                                          std::to_string(dim));
    }
    std::vector<double> mean(dim, 0.0);
    for (std::size_t r = 0; r < prompts.rows(); ++r) {
      const auto row = prompts.row(r);
      const double norm = detail::row_norm(row);
      if (norm < kZeroNormThreshold) {
        throw Error(Errc::zero_norm_row,
                    "class " + std::to_string(k) + " prompt " + std::to_string(r));
      }
      for (std::size_t c = 0; c < dim; ++c) mean[c] += static_cast<double>(row[c]) / norm;
    }
    double sum_sq = 0.0;
    for (double& x : mean) {
      x /= static_cast<double>(prompts.rows());
      sum_sq += x * x;
    }
    const double norm = std::sqrt(sum_sq);
    if (norm < kZeroNormThreshold) {
      throw Error(Errc::zero_norm_row, "class " + std::to_string(k) + " prompts cancel out");
    }
    for (const double x : mean) out.push_back(static_cast<float>(x / norm));
  }
  return FeatureMatrix(n_classes, dim, std::move(out), true);
}

}  // namespace caps
