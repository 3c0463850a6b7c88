#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "caps/cache_file.hpp"
#include "caps/error.hpp"
#include "caps/evaluator.hpp"
#include "caps/kernels.hpp"
#include "caps/parallel.hpp"

namespace caps {

enum class Spacing { linear, logarithmic };

struct AxisSpec {
  double low = 0.0;
  double high = 0.0;
  std::size_t points = 1;
  Spacing spacing = Spacing::linear;
};

/// Search space over (alpha, beta, gamma, delta). The delta axis is always
/// linear on [0, 1].
struct GridSpec {
  AxisSpec alpha{0.1, 50.0, 7, Spacing::logarithmic};
  AxisSpec beta{1.0, 50.0, 7, Spacing::linear};
  AxisSpec gamma{0.1, 30.0, 7, Spacing::logarithmic};
  std::size_t delta_points = 11;
  double tau = 100.0;
};

inline std::vector<double> axis_values(const AxisSpec& axis, std::string_view name = "axis") {
  if (axis.points == 0) throw Error(Errc::invalid_range, std::string(name) + ": zero points");
  if (!std::isfinite(axis.low) || !std::isfinite(axis.high) || axis.low > axis.high) {
    throw Error(Errc::invalid_range, std::string(name) + ": need low <= high");
  }
  if (axis.spacing == Spacing::logarithmic && axis.low <= 0.0) {
    throw Error(Errc::invalid_range, std::string(name) + ": log spacing needs low > 0");
  }
  std::vector<double> out(axis.points);
  out.front() = axis.low;
  if (axis.points == 1) return out;
  const double last = static_cast<double>(axis.points - 1);
  for (std::size_t i = 1; i + 1 < axis.points; ++i) {
    const double u = static_cast<double>(i) / last;
    out[i] = axis.spacing == Spacing::linear
                 ? axis.low + (axis.high - axis.low) * u
                 : axis.low * std::pow(axis.high / axis.low, u);
  }
  out.back() = axis.high;
  return out;
}

// {0, 1/(n-1), ..., 1}; exactly {0, 0.1, ..., 1.0} for n = 11.
inline std::vector<double> delta_values(std::size_t points) {
  if (points == 0) throw Error(Errc::invalid_range, "delta: zero points");
  std::vector<double> out(points, 0.0);
  for (std::size_t i = 1; i < points; ++i) {
    out[i] = static_cast<double>(i) / static_cast<double>(points - 1);
  }
  return out;
}

/// Cartesian product, alpha-major, then beta, gamma, delta.
inline std::vector<HyperParams> make_grid(const GridSpec& spec) {
  const auto alphas = axis_values(spec.alpha, "alpha");
  const auto betas = axis_values(spec.beta, "beta");
  const auto gammas = axis_values(spec.gamma, "gamma");
  const auto deltas = delta_values(spec.delta_points);
  if (spec.alpha.low < 0.0 || spec.beta.low < 0.0 || spec.gamma.low < 0.0) {
    throw Error(Errc::invalid_range, "alpha, beta, gamma must be >= 0");
  }
  if (!(spec.tau > 0.0)) throw Error(Errc::invalid_range, "tau must be > 0");
  std::vector<HyperParams> grid;
  grid.reserve(alphas.size() * betas.size() * gammas.size() * deltas.size());
  for (const double a : alphas) {
    for (const double b : betas) {
      for (const double g : gammas) {
        for (const double d : deltas) grid.push_back({a, b, g, d, spec.tau});
      }
    }
  }
  return grid;
}

/// alpha, beta, gamma pinned; delta swept over `delta_points` linear values.
inline std::vector<HyperParams> delta_sweep_grid(double alpha = 0.1, double beta = 1.0,
                                                 double gamma = 0.1, std::size_t delta_points = 11,
                                                 double tau = 100.0) {
  GridSpec spec;
  spec.alpha = {alpha, alpha, 1, Spacing::linear};
  spec.beta = {beta, beta, 1, Spacing::linear};
  spec.gamma = {gamma, gamma, 1, Spacing::linear};
  spec.delta_points = delta_points;
  spec.tau = tau;
  return make_grid(spec);
}

struct SearchPoint {
  HyperParams hp;
  double accuracy = 0.0;
};

struct SearchResult {
  HyperParams best;
  double best_accuracy = 0.0;
  std::size_t evaluations = 0;
  std::vector<SearchPoint> log;  // grid order
};

/// Exhaustive grid search maximizing top-1 accuracy on a validation split.
/// The zero-shot dot products and the intimacy term are computed once; the
/// affinity term and its rescaled intimacy companion once per distinct
/// (beta, delta). Ties go to the earliest grid point.
inline SearchResult search(const FeatureMatrix& val_features,
                           std::span<const std::size_t> val_labels, const SupportCache& cache,
                           std::span<const HyperParams> grid, Method method,
                           unsigned threads = 1) {
  if (grid.empty()) throw Error(Errc::empty_grid, "grid has no points");
  if (val_labels.size() != val_features.rows()) {
    throw Error(Errc::length_mismatch, "validation labels vs features");
  }
  for (const std::size_t label : val_labels) {
    if (label >= cache.classifier.rows()) {
      throw Error(Errc::out_of_range_class, "validation label " + std::to_string(label));
    }
  }
  for (const auto& hp : grid) hp.validate();

  detail::require_normalized(val_features, "validation features");
  detail::require_normalized(cache.classifier, "classifier");
  detail::require_same_dim(val_features, cache.classifier, "validation vs classifier");
  const bool uses_cache = method != Method::zeroshot;
  const bool uses_captions = method == Method::m_adapter || method == Method::f_variant;
  const bool uses_intimacy = method == Method::tipx || method == Method::m_adapter;
  if (uses_cache) detail::check_cache_shapes(val_features, cache.classifier, cache.img, cache.labels);
  if (uses_captions) detail::check_caption_cache(cache.img, cache.cap);

  const auto test = detail::to_double(val_features);
  const auto classifier = detail::to_double(cache.classifier);
  const Matrix zs = detail::dot_products(test, classifier, threads);

  std::vector<double> accuracy(grid.size(), 0.0);
  if (!uses_cache) {
    for (std::size_t p = 0; p < grid.size(); ++p) {
      accuracy[p] = top1_accuracy(detail::scale(zs, grid[p].tau), val_labels);
    }
  } else {
    const auto img = detail::to_double(cache.img);
    const auto cap = uses_captions ? detail::to_double(cache.cap) : detail::RowMatrix();
    const Matrix neg_ml = uses_intimacy
                              ? detail::negated_intimacy(zs, img, classifier, cache.labels, threads)
                              : Matrix();

    // Group grid points by the (beta, delta) pair that fixes the affinity term.
    // TIP-X ignores delta.
    std::map<double, std::map<double, std::vector<std::size_t>>> groups;
    for (std::size_t p = 0; p < grid.size(); ++p) {
      groups[uses_captions ? grid[p].delta : 0.0][grid[p].beta].push_back(p);
    }
    for (const auto& [delta, by_beta] : groups) {
      const Matrix dots = detail::dot_products(
          test, uses_captions ? detail::mix_support(img, cap, delta) : img, threads);
      std::vector<const std::vector<std::size_t>*> members;
      std::vector<double> betas;
      for (const auto& [beta, points] : by_beta) {
        betas.push_back(beta);
        members.push_back(&points);
      }
      parallel_blocks(betas.size(), 1, threads, [&](std::size_t begin, std::size_t end) {
        for (std::size_t g = begin; g < end; ++g) {
          const Matrix al =
              detail::class_sums(detail::affinity_from_dots(dots, betas[g]), cache.labels);
          const Matrix phi = uses_intimacy ? detail::rescale_unchecked(neg_ml, al) : Matrix();
          for (const std::size_t p : *members[g]) {
            const auto& hp = grid[p];
            accuracy[p] = top1_accuracy(
                detail::combine(zs, hp.tau, hp.alpha, al, hp.gamma, uses_intimacy ? &phi : nullptr),
                val_labels);
          }
        }
      });
    }
  }

  SearchResult result;
  result.evaluations = grid.size();
  result.log.reserve(grid.size());
  std::size_t best = 0;
  for (std::size_t p = 0; p < grid.size(); ++p) {
    result.log.push_back({grid[p], accuracy[p]});
    if (accuracy[p] > accuracy[best]) best = p;
  }
  result.best = grid[best];
  result.best_accuracy = accuracy[best];
  return result;
}

/// `alpha,beta,gamma,delta,accuracy`, one row per grid point.
inline std::string search_log_csv(const SearchResult& result) {
  std::ostringstream out;
  out << "alpha,beta,gamma,delta,accuracy\n";
  for (const auto& point : result.log) {
    out << format_fixed(point.hp.alpha, 6) << ',' << format_fixed(point.hp.beta, 6) << ','
        << format_fixed(point.hp.gamma, 6) << ',' << format_fixed(point.hp.delta, 6) << ','
        << format_fixed(point.accuracy, 6) << '\n';
  }
  return out.str();
}

inline void write_search_log(const SearchResult& result, const std::filesystem::path& path) {
  detail::write_atomically(path, search_log_csv(result));
}

}  // namespace caps
