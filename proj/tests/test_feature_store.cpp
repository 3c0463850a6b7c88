#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <limits>

#include "caps/cache_file.hpp"
#include "caps/feature_matrix.hpp"
#include "fixtures.hpp"

namespace {

using caps::Errc;
using caps::FeatureMatrix;

template <class Fn>
Errc code_of(Fn&& fn) {
  try {
    fn();
  } catch (const caps::Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected caps::Error";
  return Errc::client_error;
}

TEST(FeatureMatrix, RejectsBadShapeAndNonFinite) {
  EXPECT_EQ(code_of([] { FeatureMatrix(2, 2, {1.0F, 2.0F, 3.0F}); }), Errc::shape_mismatch);
  EXPECT_EQ(code_of([] { FeatureMatrix(1, 2, {1.0F, std::numeric_limits<float>::quiet_NaN()}); }),
            Errc::non_finite);
  EXPECT_EQ(code_of([] { FeatureMatrix(1, 2, {1.0F, std::numeric_limits<float>::infinity()}); }),
            Errc::non_finite);
  EXPECT_EQ(code_of([] { FeatureMatrix(1, 2, {1.0F, 1.0F}, true); }), Errc::not_normalized);
  EXPECT_EQ(code_of([] { FeatureMatrix::from_rows({{1.0F, 0.0F}, {1.0F}}); }), Errc::dim_mismatch);
}

TEST(NormalizeRows, Examples) {
  const auto unit = caps::normalize_rows(FeatureMatrix::from_rows({{1.0F, 0.0F}}));
  EXPECT_TRUE(unit.normalized());
  EXPECT_EQ(unit.at(0, 0), 1.0F);
  EXPECT_EQ(unit.at(0, 1), 0.0F);

  const auto m = caps::normalize_rows(FeatureMatrix::from_rows({{3.0F, 4.0F}}));
  EXPECT_FLOAT_EQ(m.at(0, 0), 0.6F);
  EXPECT_FLOAT_EQ(m.at(0, 1), 0.8F);

  try {
    caps::normalize_rows(FeatureMatrix::from_rows({{1.0F, 1.0F}, {0.0F, 0.0F}}));
    FAIL();
  } catch (const caps::Error& e) {
    EXPECT_EQ(e.code(), Errc::zero_norm_row);
    EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos);
  }
}

TEST(NormalizeRows, IdempotentBitForBit) {
  caps::SplitMix64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<float> data(5 * 9);
    for (float& x : data) x = static_cast<float>(rng.normal() * 10.0);
    const auto once = caps::normalize_rows(FeatureMatrix(5, 9, data));
    EXPECT_EQ(caps::normalize_rows(once), once);
  }
}

TEST(BuildOnehot, Examples) {
  const std::vector<std::size_t> classes{0, 0, 1};
  const auto labels = caps::build_onehot(classes, 2);
  EXPECT_EQ(labels.dense(), (std::vector<float>{1, 0, 1, 0, 0, 1}));
  EXPECT_EQ(labels.class_begin(1), 2U);
  EXPECT_EQ(labels.class_end(1), 3U);

  const std::vector<std::size_t> interleaved{0, 1, 0};
  EXPECT_EQ(code_of([&] { caps::build_onehot(interleaved, 2); }), Errc::non_contiguous_classes);
  const std::vector<std::size_t> out_of_range{0, 2};
  EXPECT_EQ(code_of([&] { caps::build_onehot(out_of_range, 2); }), Errc::out_of_range_class);
}

TEST(BuildOnehot, RowSumsAreOne) {
  caps::SplitMix64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(6);
    std::vector<std::size_t> classes;
    for (std::size_t k = 0; k < n; ++k) {
      for (std::uint64_t j = rng.below(4); j > 0; --j) classes.push_back(k);
    }
    const auto labels = caps::build_onehot(classes, n);
    const auto dense = labels.dense();
    for (std::size_t r = 0; r < labels.rows(); ++r) {
      float sum = 0.0F;
      for (std::size_t k = 0; k < n; ++k) sum += dense[r * n + k];
      EXPECT_EQ(sum, 1.0F);
    }
  }
}

TEST(BuildClassifier, Examples) {
  const auto a = FeatureMatrix::from_rows({{3.0F, 4.0F}});
  const auto b = FeatureMatrix::from_rows({{0.0F, 2.0F}});
  std::vector<FeatureMatrix> one{a, b};
  const auto w = caps::build_classifier(one, 2);
  EXPECT_TRUE(w.normalized());
  EXPECT_FLOAT_EQ(w.at(0, 0), 0.6F);
  EXPECT_FLOAT_EQ(w.at(0, 1), 0.8F);
  EXPECT_FLOAT_EQ(w.at(1, 1), 1.0F);

  std::vector<FeatureMatrix> twice{FeatureMatrix::from_rows({{3.0F, 4.0F}, {3.0F, 4.0F}}), b};
  EXPECT_EQ(caps::build_classifier(twice, 2), w);

  std::vector<FeatureMatrix> mixed{FeatureMatrix::from_rows({{1.0F, 0.0F}, {0.0F, 1.0F}})};
  const auto m = caps::build_classifier(mixed, 1);
  EXPECT_NEAR(m.at(0, 0), 0.7071068, 1e-6);
  EXPECT_NEAR(m.at(0, 1), 0.7071068, 1e-6);
}

TEST(BuildClassifier, Errors) {
  std::vector<FeatureMatrix> empty_class{FeatureMatrix::from_rows({{1.0F, 0.0F}}), FeatureMatrix()};
  EXPECT_EQ(code_of([&] { caps::build_classifier(empty_class, 2); }), Errc::empty_class_prompt_set);
  std::vector<FeatureMatrix> dims{FeatureMatrix::from_rows({{1.0F, 0.0F}}),
                                  FeatureMatrix::from_rows({{1.0F, 0.0F, 0.0F}})};
  EXPECT_EQ(code_of([&] { caps::build_classifier(dims, 2); }), Errc::dim_mismatch);
  std::vector<FeatureMatrix> missing{FeatureMatrix::from_rows({{1.0F, 0.0F}})};
  EXPECT_EQ(code_of([&] { caps::build_classifier(missing, 2); }), Errc::empty_class_prompt_set);
}

TEST(BuildClassifier, RowsAreUnitNorm) {
  caps::SplitMix64 rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 1 + rng.below(5);
    std::vector<FeatureMatrix> per_class;
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t prompts = 1 + rng.below(7);
      std::vector<float> data(prompts * 12);
      for (float& x : data) x = static_cast<float>(rng.normal());
      per_class.emplace_back(prompts, 12, std::move(data));
    }
    const auto w = caps::build_classifier(per_class, n);
    for (std::size_t k = 0; k < n; ++k) EXPECT_NEAR(caps::detail::row_norm(w.row(k)), 1.0, 1e-6);
  }
}

TEST(CacheFile, RoundTripIsBitExact) {
  fixtures::TempDir dir("cache");
  caps::SplitMix64 rng(5);
  const std::pair<std::size_t, std::size_t> shapes[] = {{1, 1}, {2, 3}, {7, 33}, {64, 512}};
  for (const auto& [rows, dim] : shapes) {
    std::vector<float> data(rows * dim);
    for (float& x : data) x = static_cast<float>(rng.normal());
    const FeatureMatrix m(rows, dim, std::move(data));
    for (const auto& candidate : {m, caps::normalize_rows(m)}) {
      caps::save_cache(candidate, dir / "m.caps");
      const auto back = caps::load_cache(dir / "m.caps");
      EXPECT_EQ(back, candidate);
      EXPECT_EQ(back.normalized(), candidate.normalized());
    }
  }
  // Random sizes across the 1x1 .. 64x512 box.
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t rows = 1 + rng.below(64);
    const std::size_t dim = 1 + rng.below(512);
    std::vector<float> data(rows * dim);
    for (float& x : data) x = static_cast<float>(rng.normal() * 1e3);
    const FeatureMatrix m(rows, dim, std::move(data));
    EXPECT_EQ(caps::decode_cache(caps::encode_cache(m)), m);
  }
}

TEST(CacheFile, HeaderLayout) {
  const auto bytes = caps::encode_cache(FeatureMatrix::from_rows({{1.0F, -2.0F}}));
  ASSERT_EQ(bytes.size(), 24U + 8U + 4U);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "CAPS");
  EXPECT_EQ(bytes[4], 1);  // version, little-endian
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(bytes[6], 0);  // float32
  EXPECT_EQ(bytes[7], 1);  // rows
  EXPECT_EQ(bytes[15], 2);  // dim
  EXPECT_EQ(bytes[23], 0);  // not normalized
  // 1.0f = 0x3f800000, little-endian
  EXPECT_EQ(bytes[24], 0x00);
  EXPECT_EQ(bytes[27], 0x3f);
  // CRC-32 of the payload, matching the IEEE check value convention.
  const std::uint32_t crc = bytes[32] | (bytes[33] << 8) | (bytes[34] << 16) |
                            (static_cast<std::uint32_t>(bytes[35]) << 24);
  EXPECT_EQ(crc, caps::detail::crc32_ieee(bytes.data() + 24, 8));
  const std::string check = "123456789";
  EXPECT_EQ(caps::detail::crc32_ieee(reinterpret_cast<const unsigned char*>(check.data()), 9),
            0xCBF43926U);
}

TEST(CacheFile, RejectsCorruption) {
  fixtures::TempDir dir("corrupt");
  const auto m = FeatureMatrix::from_rows({{1.0F, 2.0F, 3.0F}, {4.0F, 5.0F, 6.0F}});
  auto bytes = caps::encode_cache(m);

  auto bad_magic = bytes;
  std::copy_n("XXXX", 4, bad_magic.begin());
  EXPECT_EQ(code_of([&] { caps::decode_cache(bad_magic); }), Errc::format_error);

  auto bad_version = bytes;
  bad_version[4] = 2;
  EXPECT_EQ(code_of([&] { caps::decode_cache(bad_version); }), Errc::format_error);

  auto flipped = bytes;
  flipped[24 + 5] ^= 0x01;
  try {
    caps::decode_cache(flipped);
    FAIL();
  } catch (const caps::Error& e) {
    EXPECT_EQ(e.code(), Errc::format_error);
    EXPECT_NE(std::string(e.what()).find("CRC"), std::string::npos);
  }

  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_EQ(code_of([&] { caps::decode_cache(truncated); }), Errc::format_error);

  {
    std::ofstream out(dir / "bad.caps", std::ios::binary);
    out.write(reinterpret_cast<const char*>(bad_magic.data()), static_cast<std::streamsize>(bad_magic.size()));
  }
  EXPECT_EQ(code_of([&] { caps::load_cache(dir / "bad.caps"); }), Errc::format_error);
  EXPECT_EQ(code_of([&] { caps::load_cache(dir / "missing.caps"); }), Errc::io_error);
  EXPECT_EQ(code_of([&] { caps::save_cache(m, dir / "no" / "such" / "dir.caps"); }), Errc::io_error);
}

TEST(CacheFile, SaveLeavesNoTemporary) {
  fixtures::TempDir dir("atomic");
  caps::save_cache(FeatureMatrix::from_rows({{1.0F}}), dir / "a.caps");
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir.path())) ++files;
  EXPECT_EQ(files, 1U);
}

TEST(CacheMeta, SidecarRoundTrip) {
  fixtures::TempDir dir("meta");
  caps::CacheMeta meta{"food101", "ViT-B/16", {"apple_pie", "baklava"}, {0, 0, 1}, {}};
  meta.extra["method"] = "m_adapter";
  caps::save_meta(meta, dir / "img.caps");
  EXPECT_TRUE(std::filesystem::exists(dir / "img.meta.json"));
  EXPECT_EQ(caps::load_meta(dir / "img.caps"), meta);
}

TEST(LabelSet, RoundTripAndValidation) {
  fixtures::TempDir dir("labels");
  const caps::LabelSet set{3, {"a", "b", "c"}, {0, 2, 1, 1}};
  caps::save_labels(set, dir / "labels.json");
  EXPECT_EQ(caps::load_labels(dir / "labels.json"), set);
  caps::write_json(dir / "bad.json", nlohmann::ordered_json{{"n_classes", 2}, {"labels", {0, 5}}});
  EXPECT_EQ(code_of([&] { caps::load_labels(dir / "bad.json"); }), Errc::out_of_range_class);
}

}  // namespace
