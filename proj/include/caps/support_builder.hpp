#pragma once

// Construction of the caption-based multimodal support set:
//   1. sample K training images per class,
//   2. caption each one and prepend the class text prompt,
//   3. plan M generations per class from those prompts, giving each repeated
//      prompt a fresh seed,
//   4. generate, then encode the generated images and their prompts into the
//      row-aligned image and caption caches.
// Also builds the few-shot cache from real training features.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "caps/cache_file.hpp"
#include "caps/clients.hpp"
#include "caps/error.hpp"
#include "caps/feature_matrix.hpp"
#include "caps/parallel.hpp"
#include "caps/rng.hpp"

namespace caps {

// Stream indices for derive_seed(); kept apart so the image sample and the
// prompt plan of one class never share a stream.
inline constexpr std::uint64_t kImageSampleStream = 0x10000;
inline constexpr std::uint64_t kPromptPlanStream = 0x20000;
inline constexpr std::uint64_t kFewShotStream = 0x30000;

namespace detail {

// k indices into [0, n): without replacement (ascending, i.e. original order)
// when n >= k, uniform with replacement otherwise.
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, SplitMix64& rng) {
  std::vector<std::size_t> out;
  out.reserve(k);
  if (n >= k) {
    std::vector<std::size_t> pool(n);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
      std::swap(pool[i], pool[j]);
    }
    out.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(out.begin(), out.end());
  } else {
    for (std::size_t i = 0; i < k; ++i) out.push_back(static_cast<std::size_t>(rng.below(n)));
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  constexpr std::string_view kSpace = " \t\r\n\f\v";
  const auto first = s.find_first_not_of(kSpace);
  if (first == std::string_view::npos) return {};
  return s.substr(first, s.find_last_not_of(kSpace) - first + 1);
}

}  // namespace detail

/// Seeded sample of k references per class (see detail::sample_indices).
inline std::vector<std::vector<std::string>> sample_training_images(
    std::span<const std::vector<std::string>> per_class_refs, std::size_t k, std::uint64_t seed) {
  std::vector<std::vector<std::string>> out;
  out.reserve(per_class_refs.size());
  for (std::size_t c = 0; c < per_class_refs.size(); ++c) {
    const auto& refs = per_class_refs[c];
    if (refs.empty()) throw Error(Errc::empty_class, "class " + std::to_string(c) + " has no images");
    SplitMix64 rng(derive_seed(seed, kImageSampleStream + c));
    std::vector<std::string> picked;
    for (const std::size_t i : detail::sample_indices(refs.size(), k, rng)) picked.push_back(refs[i]);
    out.push_back(std::move(picked));
  }
  return out;
}

/// "A photo of <classname>." ("In <classname>." for country211), with
/// underscores in the class name read as spaces.
inline std::string build_class_prompt(std::string_view classname, std::string_view dataset) {
  if (classname.empty()) throw Error(Errc::empty_classname, "class name is empty");
  std::string name(classname);
  std::replace(name.begin(), name.end(), '_', ' ');
  if (dataset == "country211") return "In " + name + ".";
  return "A photo of " + name + ".";
}

inline std::string build_caption_prompt(std::string_view class_prompt, std::string_view caption) {
  const auto trimmed = detail::trim(caption);
  if (trimmed.empty()) return std::string(class_prompt);
  std::string out(class_prompt);
  out += ' ';
  out += trimmed;
  return out;
}

struct GenerationJob {
  std::size_t class_index = 0;
  std::size_t prompt_slot = 0;  // index into the class's K prompts
  std::string prompt;
  std::uint64_t seed = 0;
  std::size_t replica = 0;

  friend bool operator==(const GenerationJob&, const GenerationJob&) = default;
};

/// m jobs whose prompts are drawn in seeded passes over the K caption-based
/// prompts: each pass is a random permutation, the last one truncated. Every
/// draw is uniform over the K prompts, and no prompt is used more than
/// ceil(m / K) times. The r-th use of a prompt text gets replica index r-1 and
/// seed base_seed + r - 1, so no (prompt, seed) pair repeats.
inline std::vector<GenerationJob> plan_generation(std::span<const std::string> prompts,
                                                  std::size_t m, std::uint64_t base_seed,
                                                  std::size_t class_index = 0) {
  if (prompts.empty()) throw Error(Errc::no_prompts, "class " + std::to_string(class_index));
  if (m == 0) throw Error(Errc::invalid_count, "m must be >= 1");
  SplitMix64 rng(derive_seed(base_seed, kPromptPlanStream + class_index));
  const std::size_t k = prompts.size();
  std::vector<std::size_t> slots;
  slots.reserve(m);
  std::vector<std::size_t> perm(k);
  while (slots.size() < m) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = k - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    const std::size_t take = std::min(k, m - slots.size());
    slots.insert(slots.end(), perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(take));
  }
  std::map<std::string, std::size_t, std::less<>> uses;
  std::vector<GenerationJob> jobs;
  jobs.reserve(m);
  for (const std::size_t slot : slots) {
    const std::size_t replica = uses[prompts[slot]]++;
    jobs.push_back({class_index, slot, prompts[slot], base_seed + replica, replica});
  }
  return jobs;
}

struct ClassImages {
  std::string name;
  std::vector<std::string> images;
};

/// Raw input of a support-set build: class names in label order and the
/// training image references of each class.
struct SupportInputs {
  std::string dataset;
  std::vector<ClassImages> classes;
};

inline SupportInputs load_support_inputs(const std::filesystem::path& path) {
  const auto j = read_json(path);
  SupportInputs in;
  try {
    in.dataset = j.at("dataset").get<std::string>();
    for (const auto& c : j.at("classes")) {
      in.classes.push_back({c.at("name").get<std::string>(),
                            c.at("images").get<std::vector<std::string>>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::format_error, path.string() + ": " + e.what());
  }
  return in;
}

struct SupportParams {
  std::size_t k = 4;
  std::size_t m = 16;
  std::uint64_t base_seed = 0;
  std::size_t max_tokens = kMaxTextTokens;
  unsigned concurrency = 4;
  std::size_t encode_batch = 64;
  std::string instruction = std::string(kDefaultCaptionInstruction);
};

struct SupportRecord {
  std::size_t class_index = 0;
  std::string source_image;
  std::string caption;
  std::string prompt;
  std::uint64_t seed = 0;
  std::size_t replica = 0;
  std::string generated_image;

  friend bool operator==(const SupportRecord&, const SupportRecord&) = default;
};

struct SupportSetManifest {
  std::string dataset;
  std::vector<std::string> classes;
  std::vector<std::string> class_prompts;
  std::vector<SupportRecord> records;  // grouped by class, ascending
  std::size_t k = 0;
  std::size_t m = 0;
  std::uint64_t base_seed = 0;
  std::size_t max_tokens = kMaxTextTokens;

  friend bool operator==(const SupportSetManifest&, const SupportSetManifest&) = default;
};

inline nlohmann::ordered_json manifest_to_json(const SupportSetManifest& m) {
  nlohmann::ordered_json j;
  j["dataset"] = m.dataset;
  j["classes"] = m.classes;
  j["class_prompts"] = m.class_prompts;
  j["parameters"] = {{"k", m.k}, {"m", m.m}, {"base_seed", m.base_seed}, {"max_tokens", m.max_tokens}};
  auto records = nlohmann::ordered_json::array();
  for (const auto& r : m.records) {
    nlohmann::ordered_json rec;
    rec["class_index"] = r.class_index;
    rec["source_image"] = r.source_image;
    rec["caption"] = r.caption;
    rec["prompt"] = r.prompt;
    rec["seed"] = r.seed;
    rec["replica"] = r.replica;
    rec["generated_image"] = r.generated_image;
    records.push_back(std::move(rec));
  }
  j["records"] = std::move(records);
  return j;
}

inline SupportSetManifest manifest_from_json(const nlohmann::ordered_json& j) {
  SupportSetManifest m;
  try {
    m.dataset = j.at("dataset").get<std::string>();
    m.classes = j.at("classes").get<std::vector<std::string>>();
    m.class_prompts = j.at("class_prompts").get<std::vector<std::string>>();
    const auto& p = j.at("parameters");
    m.k = p.at("k").get<std::size_t>();
    m.m = p.at("m").get<std::size_t>();
    m.base_seed = p.at("base_seed").get<std::uint64_t>();
    m.max_tokens = p.at("max_tokens").get<std::size_t>();
    for (const auto& rec : j.at("records")) {
      m.records.push_back({rec.at("class_index").get<std::size_t>(),
                           rec.at("source_image").get<std::string>(),
                           rec.at("caption").get<std::string>(), rec.at("prompt").get<std::string>(),
                           rec.at("seed").get<std::uint64_t>(), rec.at("replica").get<std::size_t>(),
                           rec.at("generated_image").get<std::string>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::format_error, std::string("manifest: ") + e.what());
  }
  return m;
}

/// Checks the manifest invariants: M records per class in contiguous
/// ascending blocks, every prompt prefixed by its class prompt, and unique
/// (prompt, seed) pairs within a class. Throws FormatError on violation.
inline void check_manifest(const SupportSetManifest& m) {
  if (m.class_prompts.size() != m.classes.size()) {
    throw Error(Errc::format_error, "class_prompts length != classes length");
  }
  if (m.records.size() != m.classes.size() * m.m) {
    throw Error(Errc::format_error, "expected " + std::to_string(m.classes.size() * m.m) +
                                        " records, found " + std::to_string(m.records.size()));
  }
  std::map<std::pair<std::string, std::uint64_t>, std::size_t> seen;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const auto& r = m.records[i];
    if (r.class_index != i / m.m) {
      throw Error(Errc::format_error, "record " + std::to_string(i) + " out of class order");
    }
    if (!r.prompt.starts_with(m.class_prompts[r.class_index])) {
      throw Error(Errc::format_error,
                  "record " + std::to_string(i) + " prompt lacks its class prompt prefix");
    }
    if (!seen.emplace(std::pair{r.prompt, r.seed}, r.class_index).second) {
      throw Error(Errc::format_error, "record " + std::to_string(i) + " repeats (prompt, seed)");
    }
  }
}

struct SupportSet {
  SupportSetManifest manifest;
  FeatureMatrix img;  // row j <-> manifest.records[j]
  FeatureMatrix cap;  // row j <-> manifest.records[j]
  OneHotLabels labels;
};

namespace detail {

inline FeatureMatrix encode_all(ModelClient& client, EncodeKind kind,
                                const std::vector<std::string>& items, std::size_t max_tokens,
                                std::size_t batch, unsigned concurrency) {
  batch = std::max<std::size_t>(batch, 1);
  const std::size_t n_batches = (items.size() + batch - 1) / batch;
  std::vector<EncodeResponse> responses(n_batches);
  bounded_for_each(n_batches, concurrency, [&](std::size_t b) {
    EncodeRequest req;
    req.kind = kind;
    req.max_tokens = max_tokens;
    const auto begin = items.begin() + static_cast<std::ptrdiff_t>(b * batch);
    req.items.assign(begin, begin + static_cast<std::ptrdiff_t>(std::min(batch, items.size() - b * batch)));
    try {
      responses[b] = client.encode(req);
      validate_encode_response(req, responses[b]);
    } catch (const Error& e) {
      throw Error(Errc::client_error, "encoding '" + req.items.front() + "' (batch " +
                                          std::to_string(b) + "): " + e.what());
    }
  });
  std::size_t dim = 0;
  std::vector<float> data;
  for (const auto& res : responses) {
    if (dim == 0) {
      dim = res.dim;
      data.reserve(items.size() * dim);
    } else if (res.dim != dim) {
      throw Error(Errc::client_error, "encoder changed dim between batches");
    }
    for (const auto& row : res.rows) data.insert(data.end(), row.begin(), row.end());
  }
  return normalize_rows(FeatureMatrix(items.size(), dim, std::move(data)));
}

}  // namespace detail

/// Runs the full construction against `client`. Requests go out with at most
/// params.concurrency in flight; results are committed in (class, job) order,
/// so the output does not depend on scheduling.
inline SupportSet build_support_set(const SupportInputs& inputs, ModelClient& client,
                                    const SupportParams& params) {
  if (inputs.classes.empty()) throw Error(Errc::empty_class, "no classes");
  if (params.k == 0) throw Error(Errc::invalid_count, "k must be >= 1");
  if (params.m == 0) throw Error(Errc::invalid_count, "m must be >= 1");
  if (params.max_tokens < 1 || params.max_tokens > kMaxTextTokens) {
    throw Error(Errc::invalid_count, "max_tokens must be in [1, 77]");
  }
  const std::size_t n_classes = inputs.classes.size();

  SupportSetManifest manifest;
  manifest.dataset = inputs.dataset;
  manifest.k = params.k;
  manifest.m = params.m;
  manifest.base_seed = params.base_seed;
  manifest.max_tokens = params.max_tokens;
  std::vector<std::vector<std::string>> refs;
  for (const auto& c : inputs.classes) {
    manifest.classes.push_back(c.name);
    manifest.class_prompts.push_back(build_class_prompt(c.name, inputs.dataset));
    refs.push_back(c.images);
  }
  const auto sampled = sample_training_images(refs, params.k, params.base_seed);

  // Captions, flattened as (class, slot).
  std::vector<std::string> captions(n_classes * params.k);
  bounded_for_each(captions.size(), params.concurrency, [&](std::size_t i) {
    const std::string& ref = sampled[i / params.k][i % params.k];
    try {
      captions[i] = client.caption({ref, params.instruction}).caption;
    } catch (const Error& e) {
      throw Error(Errc::client_error, "captioning image '" + ref + "': " + e.what());
    }
  });

  std::vector<GenerationJob> jobs;
  jobs.reserve(n_classes * params.m);
  for (std::size_t c = 0; c < n_classes; ++c) {
    std::vector<std::string> prompts;
    for (std::size_t s = 0; s < params.k; ++s) {
      prompts.push_back(build_caption_prompt(manifest.class_prompts[c], captions[c * params.k + s]));
    }
    auto class_jobs = plan_generation(prompts, params.m, params.base_seed, c);
    jobs.insert(jobs.end(), class_jobs.begin(), class_jobs.end());
  }

  std::vector<std::string> generated(jobs.size());
  bounded_for_each(jobs.size(), params.concurrency, [&](std::size_t i) {
    try {
      generated[i] = client.generate({jobs[i].prompt, jobs[i].seed}).image_ref;
    } catch (const Error& e) {
      throw Error(Errc::client_error, "generating class " + std::to_string(jobs[i].class_index) +
                                          " prompt '" + jobs[i].prompt + "' seed " +
                                          std::to_string(jobs[i].seed) + ": " + e.what());
    }
  });

  std::vector<std::string> prompt_texts;
  std::vector<std::size_t> sample_classes;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const auto& job = jobs[i];
    manifest.records.push_back({job.class_index, sampled[job.class_index][job.prompt_slot],
                                captions[job.class_index * params.k + job.prompt_slot], job.prompt,
                                job.seed, job.replica, generated[i]});
    prompt_texts.push_back(job.prompt);
    sample_classes.push_back(job.class_index);
  }

  SupportSet out;
  out.img = detail::encode_all(client, EncodeKind::image, generated, kMaxTextTokens,
                               params.encode_batch, params.concurrency);
  out.cap = detail::encode_all(client, EncodeKind::text, prompt_texts, params.max_tokens,
                               params.encode_batch, params.concurrency);
  if (out.img.dim() != out.cap.dim()) {
    throw Error(Errc::client_error, "image and text encoders disagree on dim");
  }
  out.labels = build_onehot(sample_classes, n_classes);
  out.manifest = std::move(manifest);
  return out;
}

/// Zero-shot classifier from encoded prompt templates; each template's "{}" is
/// replaced by the human-readable class name. An empty template list uses the
/// class text prompt alone.
inline FeatureMatrix build_text_classifier(const std::vector<std::string>& class_names,
                                           std::string_view dataset,
                                           const std::vector<std::string>& templates,
                                           ModelClient& client,
                                           std::size_t max_tokens = kMaxTextTokens) {
  std::vector<FeatureMatrix> per_class;
  for (const auto& name : class_names) {
    std::vector<std::string> prompts;
    if (templates.empty()) {
      prompts.push_back(build_class_prompt(name, dataset));
    } else {
      std::string readable = name;
      std::replace(readable.begin(), readable.end(), '_', ' ');
      for (const auto& t : templates) {
        std::string p = t;
        if (const auto at = p.find("{}"); at != std::string::npos) p.replace(at, 2, readable);
        prompts.push_back(std::move(p));
      }
    }
    try {
      per_class.push_back(detail::encode_all(client, EncodeKind::text, prompts, max_tokens,
                                             prompts.size(), 1));
    } catch (const Error& e) {
      throw Error(Errc::client_error, "encoding prompts of class '" + name + "': " + e.what());
    }
  }
  return build_classifier(per_class, class_names.size());
}

/// Writes manifest.json, img.caps, cap.caps (each with a .meta.json sidecar)
/// and labels.json into `dir`.
inline void save_support_set(const SupportSet& set, const std::filesystem::path& dir,
                             const std::string& backbone) {
  std::filesystem::create_directories(dir);
  write_json(dir / "manifest.json", manifest_to_json(set.manifest));
  std::vector<std::size_t> sample_classes(set.labels.sample_classes().begin(),
                                          set.labels.sample_classes().end());
  CacheMeta meta{set.manifest.dataset, backbone, set.manifest.classes, sample_classes, {}};
  save_cache(set.img, dir / "img.caps");
  meta.extra = {{"content", "support image features"}};
  save_meta(meta, dir / "img.caps");
  save_cache(set.cap, dir / "cap.caps");
  meta.extra = {{"content", "support caption-prompt features"}};
  save_meta(meta, dir / "cap.caps");
  save_labels({set.manifest.classes.size(), set.manifest.classes, sample_classes},
              dir / "labels.json");
}

struct FewShotCache {
  FeatureMatrix features;
  OneHotLabels labels;
  std::vector<std::size_t> source_rows;  // row of train_features behind each cache row
};

/// k real training features per class, in contiguous class blocks. Sampling
/// follows sample_training_images (with replacement only when a class has
/// fewer than k rows).
inline FewShotCache build_fewshot_cache(const FeatureMatrix& train_features,
                                        std::span<const std::size_t> train_classes,
                                        std::size_t n_classes, std::size_t k, std::uint64_t seed) {
  if (train_classes.size() != train_features.rows()) {
    throw Error(Errc::length_mismatch, "train classes vs feature rows");
  }
  if (k == 0) throw Error(Errc::invalid_count, "k must be >= 1");
  std::vector<std::vector<std::size_t>> rows_of(n_classes);
  for (std::size_t r = 0; r < train_classes.size(); ++r) {
    if (train_classes[r] >= n_classes) {
      throw Error(Errc::out_of_range_class, "train row " + std::to_string(r));
    }
    rows_of[train_classes[r]].push_back(r);
  }
  FewShotCache out;
  std::vector<float> data;
  std::vector<std::size_t> classes;
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (rows_of[c].empty()) throw Error(Errc::empty_class, "class " + std::to_string(c));
    SplitMix64 rng(derive_seed(seed, kFewShotStream + c));
    for (const std::size_t i : detail::sample_indices(rows_of[c].size(), k, rng)) {
      const std::size_t r = rows_of[c][i];
      const auto row = train_features.row(r);
      data.insert(data.end(), row.begin(), row.end());
      out.source_rows.push_back(r);
      classes.push_back(c);
    }
  }
  out.features = FeatureMatrix(classes.size(), train_features.dim(), std::move(data),
                               train_features.normalized());
  out.labels = build_onehot(classes, n_classes);
  return out;
}

/// Caption-side cache for the few-shot regime: each support row gets its
/// class's classifier row, so delta interpolates toward the text classifier
/// and delta = 0 is exactly TIP-X.
inline FeatureMatrix fewshot_caption_cache(const OneHotLabels& labels,
                                           const FeatureMatrix& classifier) {
  if (labels.classes() != classifier.rows()) {
    throw Error(Errc::shape_mismatch, "label classes vs classifier rows");
  }
  std::vector<float> data;
  data.reserve(labels.rows() * classifier.dim());
  for (std::size_t r = 0; r < labels.rows(); ++r) {
    const auto row = classifier.row(labels.class_of(r));
    data.insert(data.end(), row.begin(), row.end());
  }
  return FeatureMatrix(labels.rows(), classifier.dim(), std::move(data), classifier.normalized());
}

}  // namespace caps
