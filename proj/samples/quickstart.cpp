// Builds a support set with the offline stub models, then classifies a few
// held-out "test" encodings with every inference rule.
#include <filesystem>
#include <iostream>

#include "caps/caps.hpp"

int main(int argc, char** argv) {
  const std::filesystem::path input =
      argc > 1 ? argv[1] : std::filesystem::path(CAPS_SAMPLE_DIR) / "toy_dataset.json";
  const auto inputs = caps::load_support_inputs(input);

  caps::StubClient stub(/*seed=*/0, /*dim=*/32);
  caps::SupportParams params;
  params.k = 2;
  params.m = 5;
  params.base_seed = 7;
  const auto set = caps::build_support_set(inputs, stub, params);

  std::vector<std::string> names;
  for (const auto& c : inputs.classes) names.push_back(c.name);
  const auto w = caps::build_text_classifier(names, inputs.dataset, {"a photo of {}.", "a close-up of {}."},
                                             stub, params.max_tokens);

  // Test rows: the caption-prompt encodings of the first record of each class.
  std::vector<std::vector<float>> rows;
  std::vector<std::size_t> truth;
  for (std::size_t k = 0; k < names.size(); ++k) {
    const auto r = set.labels.class_begin(k);
    rows.emplace_back(set.cap.row(r).begin(), set.cap.row(r).end());
    truth.push_back(k);
  }
  const auto test = caps::normalize_rows(caps::FeatureMatrix::from_rows(rows));

  const caps::SupportCache cache{w, set.img, set.cap, set.labels};
  const caps::HyperParams hp{5.0, 5.0, 1.0, 0.5, 100.0};
  for (auto method : {caps::Method::zeroshot, caps::Method::tipx, caps::Method::m_adapter,
                      caps::Method::f_variant}) {
    const auto logits = caps::method_logits(method, test, cache, hp);
    std::cout << caps::to_string(method) << ": top1 " << caps::format_percent(caps::top1_accuracy(logits, truth))
              << "%\n";
  }
  std::cout << set.manifest.records.size() << " support records, " << set.img.dim() << "-d features\n";
}
