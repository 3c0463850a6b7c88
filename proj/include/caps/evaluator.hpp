#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "caps/cache_file.hpp"
#include "caps/error.hpp"
#include "caps/feature_matrix.hpp"
#include "caps/kernels.hpp"

namespace caps {

// Lowest index wins ties.
inline std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < row.size(); ++k) {
    if (row[k] > row[best]) best = k;
  }
  return best;
}

namespace detail {

inline void require_label_count(const Matrix& logits, std::span<const std::size_t> labels) {
  if (labels.size() != logits.rows()) {
    throw Error(Errc::length_mismatch, std::to_string(labels.size()) + " labels for " +
                                           std::to_string(logits.rows()) + " logit rows");
  }
}

}  // namespace detail

inline double top1_accuracy(const LogitsMatrix& logits, std::span<const std::size_t> labels) {
  detail::require_label_count(logits, labels);
  if (labels.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    if (argmax(logits.row(i)) == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

/// Accuracy over the test rows of each class; nullopt for classes that have no
/// test rows.
inline std::vector<std::optional<double>> per_class_accuracy(const LogitsMatrix& logits,
                                                             std::span<const std::size_t> labels,
                                                             std::size_t n_classes) {
  detail::require_label_count(logits, labels);
  std::vector<std::size_t> total(n_classes, 0);
  std::vector<std::size_t> correct(n_classes, 0);
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    if (labels[i] >= n_classes) {
      throw Error(Errc::out_of_range_class, "label " + std::to_string(labels[i]));
    }
    ++total[labels[i]];
    if (argmax(logits.row(i)) == labels[i]) ++correct[labels[i]];
  }
  std::vector<std::optional<double>> out(n_classes);
  for (std::size_t k = 0; k < n_classes; ++k) {
    if (total[k] > 0) out[k] = static_cast<double>(correct[k]) / static_cast<double>(total[k]);
  }
  return out;
}

enum class SimilarityMode {
  per_class,  // mean same-class pair similarity, macro-averaged over shared classes
  global,     // mean over all (support, test) pairs
};

/// Average cosine similarity between support and test features, in percent.
inline double support_similarity(const FeatureMatrix& support,
                                 std::span<const std::size_t> support_classes,
                                 const FeatureMatrix& test,
                                 std::span<const std::size_t> test_classes,
                                 SimilarityMode mode = SimilarityMode::per_class) {
  detail::require_normalized(support, "support features");
  detail::require_normalized(test, "test features");
  detail::require_same_dim(support, test, "support vs test");
  if (support_classes.size() != support.rows() || test_classes.size() != test.rows()) {
    throw Error(Errc::length_mismatch, "class lists must match feature rows");
  }
  const std::size_t dim = support.dim();
  // The mean pairwise dot of two groups is the dot of their feature sums over
  // the pair count.
  auto group_sums = [dim](const FeatureMatrix& m, std::span<const std::size_t> classes,
                          bool by_class) {
    std::map<std::size_t, std::pair<std::vector<double>, std::size_t>> sums;
    for (std::size_t r = 0; r < m.rows(); ++r) {
      auto& [sum, count] = sums[by_class ? classes[r] : 0];
      sum.resize(dim, 0.0);
      const auto row = m.row(r);
      for (std::size_t c = 0; c < dim; ++c) sum[c] += row[c];
      ++count;
    }
    return sums;
  };
  const bool by_class = mode == SimilarityMode::per_class;
  const auto support_sums = group_sums(support, support_classes, by_class);
  const auto test_sums = group_sums(test, test_classes, by_class);
  double total = 0.0;
  std::size_t groups = 0;
  for (const auto& [key, s] : support_sums) {
    const auto it = test_sums.find(key);
    if (it == test_sums.end()) continue;
    const auto& t = it->second;
    double dot = 0.0;
    for (std::size_t c = 0; c < dim; ++c) dot += s.first[c] * t.first[c];
    total += dot / (static_cast<double>(s.second) * static_cast<double>(t.second));
    ++groups;
  }
  if (groups == 0) throw Error(Errc::no_common_classes, "support and test share no class");
  return 100.0 * total / static_cast<double>(groups);
}

/// One row of a results table.
struct EvalReport {
  std::string method;
  std::string backbone;
  std::string dataset;
  std::size_t support_size = 0;  // per class
  double top1 = 0.0;
  std::vector<std::optional<double>> per_class;
  std::optional<double> similarity;  // percent
  double wall_time_s = 0.0;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

enum class ReportFormat { csv, json };

inline std::string format_fixed(double value, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, value);
  return buf;
}

// 0.6494 -> "64.94"
inline std::string format_percent(double fraction) { return format_fixed(100.0 * fraction, 2); }

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (const char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

inline nlohmann::ordered_json report_to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["method"] = r.method;
  j["backbone"] = r.backbone;
  j["dataset"] = r.dataset;
  j["support_size"] = r.support_size;
  j["top1"] = r.top1;
  auto per_class = nlohmann::ordered_json::array();
  for (const auto& acc : r.per_class) per_class.push_back(acc ? nlohmann::ordered_json(*acc) : nlohmann::ordered_json(nullptr));
  j["per_class"] = per_class;
  j["similarity"] = r.similarity ? nlohmann::ordered_json(*r.similarity) : nlohmann::ordered_json(nullptr);
  j["wall_time_s"] = r.wall_time_s;
  return j;
}

inline EvalReport report_from_json(const nlohmann::ordered_json& j) {
  EvalReport r;
  r.method = j.at("method").get<std::string>();
  r.backbone = j.at("backbone").get<std::string>();
  r.dataset = j.at("dataset").get<std::string>();
  r.support_size = j.at("support_size").get<std::size_t>();
  r.top1 = j.at("top1").get<double>();
  for (const auto& acc : j.at("per_class")) {
    r.per_class.push_back(acc.is_null() ? std::nullopt : std::optional<double>(acc.get<double>()));
  }
  if (!j.at("similarity").is_null()) r.similarity = j.at("similarity").get<double>();
  r.wall_time_s = j.at("wall_time_s").get<double>();
  return r;
}

}  // namespace detail

inline std::string render_report(std::span<const EvalReport> reports, ReportFormat format) {
  if (reports.empty()) throw Error(Errc::empty_report, "no reports to emit");
  if (format == ReportFormat::json) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& r : reports) arr.push_back(detail::report_to_json(r));
    return arr.dump(2) + "\n";
  }
  std::ostringstream out;
  out << "method,backbone,dataset,support_size,top1,similarity,wall_time_s\n";
  for (const auto& r : reports) {
    out << detail::csv_field(r.method) << ',' << detail::csv_field(r.backbone) << ','
        << detail::csv_field(r.dataset) << ',' << r.support_size << ',' << format_percent(r.top1)
        << ',' << (r.similarity ? format_fixed(*r.similarity, 2) : std::string()) << ','
        << format_fixed(r.wall_time_s, 3) << '\n';
  }
  return out.str();
}

inline void emit_report(std::span<const EvalReport> reports, const std::filesystem::path& path,
                        ReportFormat format) {
  detail::write_atomically(path, render_report(reports, format));
}

inline std::vector<EvalReport> read_json_report(const std::filesystem::path& path) {
  const auto j = read_json(path);
  std::vector<EvalReport> out;
  try {
    for (const auto& item : j) out.push_back(detail::report_from_json(item));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::format_error, path.string() + ": " + e.what());
  }
  return out;
}

}  // namespace caps
