#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "caps/evaluator.hpp"
#include "fixtures.hpp"

namespace {

using caps::FeatureMatrix;
using caps::Matrix;

Matrix rows(std::vector<std::vector<double>> r) {
  std::vector<double> flat;
  for (const auto& row : r) flat.insert(flat.end(), row.begin(), row.end());
  return Matrix(r.size(), r.empty() ? 0 : r[0].size(), flat);
}

TEST(Top1, Examples) {
  EXPECT_EQ(caps::top1_accuracy(rows({{3, 1}, {0, 2}}), std::vector<std::size_t>{0, 1}), 1.0);
  EXPECT_EQ(caps::top1_accuracy(rows({{3, 1}, {0, 2}, {5, 1}, {1, 5}}), std::vector<std::size_t>{0, 1, 1, 0}), 0.5);
  EXPECT_EQ(caps::top1_accuracy(rows({{1, 1}}), std::vector<std::size_t>{0}), 1.0);
  EXPECT_EQ(caps::top1_accuracy(rows({{1, 1}}), std::vector<std::size_t>{1}), 0.0);
  EXPECT_THROW(caps::top1_accuracy(rows({{1, 1}}), std::vector<std::size_t>{0, 1}), caps::Error);
}

TEST(PerClass, Examples) {
  const auto all = caps::per_class_accuracy(rows({{2, 1}, {3, 0}}), std::vector<std::size_t>{0, 0}, 1);
  ASSERT_EQ(all.size(), 1U);
  EXPECT_EQ(all[0], 1.0);

  const auto absent = caps::per_class_accuracy(rows({{2, 1}, {0, 3}}), std::vector<std::size_t>{0, 0}, 2);
  EXPECT_EQ(absent[0], 0.5);
  EXPECT_FALSE(absent[1].has_value());

  // class 0: rows 0, 2, 3 -> correct 0 and 3; class 1: rows 1, 4 -> correct 1
  const auto mixed = caps::per_class_accuracy(rows({{5, 1}, {0, 1}, {0, 1}, {2, 1}, {3, 1}}),
                                              std::vector<std::size_t>{0, 1, 0, 0, 1}, 2);
  EXPECT_DOUBLE_EQ(*mixed[0], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(*mixed[1], 0.5);
}

TEST(Properties, MonotoneTransformKeepsAccuracy) {
  caps::SplitMix64 rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t t = 1 + rng.below(20), n = 1 + rng.below(6);
    Matrix logits(t, n);
    std::vector<std::size_t> labels(t);
    for (double& v : logits.data()) v = rng.normal();
    for (auto& l : labels) l = rng.below(n);
    Matrix transformed = logits;
    for (double& v : transformed.data()) v = std::exp(3.0 * v) + 7.0;
    EXPECT_EQ(caps::top1_accuracy(logits, labels), caps::top1_accuracy(transformed, labels));
  }
}

TEST(Properties, PerClassWeightedMeanIsTop1) {
  caps::SplitMix64 rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t t = 1 + rng.below(30), n = 1 + rng.below(6);
    Matrix logits(t, n);
    std::vector<std::size_t> labels(t);
    for (double& v : logits.data()) v = static_cast<double>(rng.below(3));  // plenty of ties
    for (auto& l : labels) l = rng.below(n);
    const auto per = caps::per_class_accuracy(logits, labels, n);
    std::vector<double> counts(n, 0.0);
    for (auto l : labels) counts[l] += 1.0;
    double weighted = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      if (per[k]) weighted += *per[k] * counts[k];
    }
    EXPECT_NEAR(weighted / static_cast<double>(t), caps::top1_accuracy(logits, labels), 1e-9);
  }
}

// Exact unit vectors: entries +-0.25 in 16 dimensions.
FeatureMatrix pattern_rows(const std::vector<std::vector<int>>& signs) {
  std::vector<float> data;
  for (const auto& row : signs) {
    for (int s : row) data.push_back(0.25F * static_cast<float>(s));
  }
  return FeatureMatrix(signs.size(), 16, data, true);
}

std::vector<int> hadamard_row(std::size_t i) {
  std::vector<int> out(16);
  for (std::size_t c = 0; c < 16; ++c) out[c] = __builtin_popcount(static_cast<unsigned>(i & c)) % 2 ? -1 : 1;
  return out;
}

TEST(Similarity, IdenticalAndOrthogonal) {
  // two classes, two identical rows each
  const auto feats = pattern_rows({hadamard_row(1), hadamard_row(1), hadamard_row(2), hadamard_row(2)});
  const std::vector<std::size_t> classes{0, 0, 1, 1};
  EXPECT_NEAR(caps::support_similarity(feats, classes, feats, classes), 100.0, 1e-9);
  const auto other = pattern_rows({hadamard_row(3), hadamard_row(3), hadamard_row(4), hadamard_row(4)});
  EXPECT_NEAR(caps::support_similarity(feats, classes, other, classes), 0.0, 1e-9);
}

TEST(Similarity, MatchesPairwiseLoops) {
  caps::SplitMix64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.below(4);
    std::vector<std::size_t> sc, tc;
    for (std::size_t k = 0; k < n; ++k) {
      for (auto j = 1 + rng.below(4); j > 0; --j) sc.push_back(k);
      for (auto j = 1 + rng.below(4); j > 0; --j) tc.push_back(k);
    }
    const auto s = fixtures::random_unit_rows(rng, sc.size(), 8);
    const auto t = fixtures::random_unit_rows(rng, tc.size(), 8);
    std::map<std::size_t, std::pair<double, double>> per;  // sum, pairs
    double global = 0.0;
    for (std::size_t i = 0; i < sc.size(); ++i) {
      for (std::size_t j = 0; j < tc.size(); ++j) {
        double d = 0.0;
        for (std::size_t c = 0; c < 8; ++c) d += static_cast<double>(s.at(i, c)) * t.at(j, c);
        global += d;
        if (sc[i] == tc[j]) {
          per[sc[i]].first += d;
          per[sc[i]].second += 1.0;
        }
      }
    }
    double macro = 0.0;
    for (const auto& [k, v] : per) macro += v.first / v.second;
    macro /= static_cast<double>(per.size());
    EXPECT_NEAR(caps::support_similarity(s, sc, t, tc), 100.0 * macro, 1e-9);
    EXPECT_NEAR(caps::support_similarity(s, sc, t, tc, caps::SimilarityMode::global),
                100.0 * global / static_cast<double>(sc.size() * tc.size()), 1e-9);
    // symmetric under swapping the two sets
    EXPECT_NEAR(caps::support_similarity(s, sc, t, tc), caps::support_similarity(t, tc, s, sc), 1e-9);
  }
}

TEST(Similarity, Errors) {
  const auto a = pattern_rows({hadamard_row(1)});
  EXPECT_THROW(caps::support_similarity(a, std::vector<std::size_t>{0}, a, std::vector<std::size_t>{1}),
               caps::Error);
  const auto raw = FeatureMatrix::from_rows({std::vector<float>(16, 0.25F)});
  EXPECT_THROW(caps::support_similarity(raw, std::vector<std::size_t>{0}, a, std::vector<std::size_t>{0}),
               caps::Error);
}

caps::EvalReport sample_report() {
  return {"m_adapter", "ViT-B/16", "food101", 16, 0.6494, {0.5, std::nullopt, 1.0}, 87.123456, 1.25};
}

TEST(Report, PercentFormatting) {
  EXPECT_EQ(caps::format_percent(0.6494), "64.94");
  EXPECT_EQ(caps::format_percent(0.5966), "59.66");
  EXPECT_EQ(caps::format_percent(1.0), "100.00");
  EXPECT_EQ(caps::format_percent(0.0), "0.00");
}

TEST(Report, CsvShape) {
  const std::vector<caps::EvalReport> reports{sample_report()};
  const auto csv = caps::render_report(reports, caps::ReportFormat::csv);
  EXPECT_EQ(csv,
            "method,backbone,dataset,support_size,top1,similarity,wall_time_s\n"
            "m_adapter,ViT-B/16,food101,16,64.94,87.12,1.250\n");
  EXPECT_THROW(caps::render_report(std::vector<caps::EvalReport>{}, caps::ReportFormat::csv), caps::Error);
}

TEST(Report, JsonRoundTrip) {
  fixtures::TempDir dir("report");
  auto second = sample_report();
  second.method = "zeroshot";
  second.similarity.reset();
  const std::vector<caps::EvalReport> reports{sample_report(), second};
  caps::emit_report(reports, dir / "r.json", caps::ReportFormat::json);
  EXPECT_EQ(caps::read_json_report(dir / "r.json"), reports);
}

}  // namespace
