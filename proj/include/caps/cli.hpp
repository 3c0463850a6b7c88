#pragma once

// `caps` command line: build-support, build-fewshot, infer, search, eval,
// similarity. Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"

#include "caps/cache_file.hpp"
#include "caps/clients.hpp"
#include "caps/error.hpp"
#include "caps/evaluator.hpp"
#include "caps/hparam_search.hpp"
#include "caps/kernels.hpp"
#include "caps/support_builder.hpp"
#include "caps/version.hpp"

namespace caps::cli {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

struct ClientFlags {
  bool stub = false;
  std::uint64_t stub_seed = 0;
  std::string captioner_url;
  std::string generator_url;
  std::string encoder_url;
  double timeout_s = 60.0;
  unsigned retries = 2;
  double backoff_s = 1.0;
  std::string bearer_token;
};

struct BuildSupportArgs {
  std::string input;
  std::string out;
  std::size_t k = 4;
  std::size_t m = 16;
  std::uint64_t seed = 0;
  std::size_t max_tokens = kMaxTextTokens;
  unsigned concurrency = 4;
  std::string backbone;
  std::string templates;
  ClientFlags client;
};

struct BuildFewShotArgs {
  std::string train;
  std::string train_labels;
  std::string classifier;
  std::string out;
  std::size_t k = 1;
  std::uint64_t seed = 0;
  std::string dataset;
  std::string backbone;
};

struct CacheArgs {
  std::string mode;
  std::string classifier;
  std::string img;
  std::string cap;
  std::string labels;
};

struct InferArgs {
  CacheArgs cache;
  std::string test;
  HyperParams hp{0.1, 1.0, 0.1, 0.1, 100.0};
  std::string out;
  std::string dataset;
  std::string backbone;
};

struct SearchArgs {
  CacheArgs cache;
  std::string val;
  std::string val_labels;
  std::string grid = "default";
  GridSpec spec;
  std::vector<double> alpha_range;
  std::vector<double> beta_range;
  std::vector<double> gamma_range;
  std::string alpha_spacing = "log";
  std::string beta_spacing = "linear";
  std::string gamma_spacing = "log";
  double fixed_alpha = 0.1;
  double fixed_beta = 1.0;
  double fixed_gamma = 0.1;
  std::string out;
};

struct EvalArgs {
  std::string logits_dir;
  std::string labels;
  std::string out;
  std::string format;
};

struct SimilarityArgs {
  std::string support;
  std::string support_labels;
  std::string test;
  std::string test_labels;
  bool global = false;
  std::string out;
};

namespace detail {

inline ordered_json run_record(const std::string& subcommand, const std::vector<std::string>& argv,
                               ordered_json config) {
  ordered_json j;
  j["tool"] = "caps";
  j["subcommand"] = subcommand;
  j["argv"] = argv;
  j["config"] = std::move(config);
  j["versions"] = {{"engine", std::string(kVersion)}, {"cache_format", kCacheVersion}};
  return j;
}

// `<dir>/x.caps` -> `<dir>/x.run.json`
inline fs::path run_record_path(const fs::path& output_file) {
  fs::path p = output_file;
  p.replace_extension(".run.json");
  return p;
}

inline std::unique_ptr<ModelClient> make_client(const ClientFlags& flags) {
  if (flags.stub) return std::make_unique<StubClient>(flags.stub_seed);
  ClientConfig base;
  base.timeout_s = flags.timeout_s;
  base.max_retries = flags.retries;
  base.backoff_s = flags.backoff_s;
  base.bearer_token = flags.bearer_token;
  auto client = HttpClient::from_env(base);
  auto pick = [](const std::string& flag, const ClientConfig& env, const char* name) {
    ClientConfig cfg = env;
    if (!flag.empty()) cfg.endpoint = flag;
    if (cfg.endpoint.empty()) {
      throw Error(Errc::client_error, std::string("no endpoint for the ") + name +
                                          " (pass a --*-url flag, set CAPS_*_URL, or use "
                                          "--stub-clients)");
    }
    return cfg;
  };
  return std::make_unique<HttpClient>(pick(flags.captioner_url, client.captioner(), "captioner"),
                                      pick(flags.generator_url, client.generator(), "generator"),
                                      pick(flags.encoder_url, client.encoder(), "encoder"));
}

inline ordered_json client_config(const ClientFlags& f) {
  ordered_json j;
  j["stub_clients"] = f.stub;
  if (f.stub) {
    j["stub_seed"] = f.stub_seed;
  } else {
    j["captioner_url"] = f.captioner_url;
    j["generator_url"] = f.generator_url;
    j["encoder_url"] = f.encoder_url;
    j["timeout_s"] = f.timeout_s;
    j["retries"] = f.retries;
    j["backoff_s"] = f.backoff_s;
  }
  return j;
}

inline ordered_json hp_json(const HyperParams& hp) {
  return {{"alpha", hp.alpha}, {"beta", hp.beta}, {"gamma", hp.gamma}, {"delta", hp.delta},
          {"tau", hp.tau}};
}

inline SupportCache load_support_cache(const CacheArgs& a, Method method) {
  SupportCache cache;
  cache.classifier = normalize_rows(load_cache(a.classifier));
  if (method == Method::zeroshot) return cache;
  if (a.img.empty() || a.labels.empty()) {
    throw Error(Errc::shape_mismatch, std::string(to_string(method)) + " needs --img and --labels");
  }
  cache.img = normalize_rows(load_cache(a.img));
  const LabelSet labels = load_labels(a.labels);
  if (labels.n_classes != cache.classifier.rows()) {
    throw Error(Errc::shape_mismatch, "labels declare " + std::to_string(labels.n_classes) +
                                          " classes, classifier has " +
                                          std::to_string(cache.classifier.rows()));
  }
  cache.labels = build_onehot(labels.labels, labels.n_classes);
  if (method == Method::m_adapter || method == Method::f_variant) {
    if (a.cap.empty()) throw Error(Errc::shape_mismatch, std::string(to_string(method)) + " needs --cap");
    cache.cap = normalize_rows(load_cache(a.cap));
  }
  return cache;
}

inline ordered_json cache_config(const CacheArgs& a) {
  return {{"mode", a.mode}, {"classifier", a.classifier}, {"img", a.img}, {"cap", a.cap},
          {"labels", a.labels}};
}

inline int build_support(const BuildSupportArgs& a, const std::vector<std::string>& argv,
                         std::ostream& out) {
  const SupportInputs inputs = load_support_inputs(a.input);
  auto client = make_client(a.client);
  SupportParams params;
  params.k = a.k;
  params.m = a.m;
  params.base_seed = a.seed;
  params.max_tokens = a.max_tokens;
  params.concurrency = a.concurrency;
  const SupportSet set = build_support_set(inputs, *client, params);
  const std::string backbone = !a.backbone.empty() ? a.backbone : a.client.stub ? "stub" : "unknown";
  const fs::path dir(a.out);
  save_support_set(set, dir, backbone);

  std::vector<std::string> templates;
  if (!a.templates.empty()) {
    try {
      templates = read_json(a.templates).get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::format_error, a.templates + ": " + e.what());
    }
  }
  const FeatureMatrix classifier =
      build_text_classifier(set.manifest.classes, inputs.dataset, templates, *client, a.max_tokens);
  save_cache(classifier, dir / "classifier.caps");
  std::vector<std::size_t> class_rows(set.manifest.classes.size());
  for (std::size_t k = 0; k < class_rows.size(); ++k) class_rows[k] = k;
  save_meta({inputs.dataset, backbone, set.manifest.classes, class_rows,
             {{"content", "zero-shot text classifier"}, {"templates", templates}}},
            dir / "classifier.caps");

  ordered_json config;
  config["input"] = a.input;
  config["out"] = a.out;
  config["k"] = a.k;
  config["m"] = a.m;
  config["max_tokens"] = a.max_tokens;
  config["concurrency"] = a.concurrency;
  config["backbone"] = backbone;
  config["templates"] = a.templates;
  config["client"] = client_config(a.client);
  auto record = run_record("build-support", argv, config);
  record["seeds"] = {{"base_seed", a.seed}};
  write_json(dir / "run-record.json", record);
  out << "support set: " << set.manifest.records.size() << " records, " << set.img.rows() << " x "
      << set.img.dim() << " features -> " << dir.string() << "\n";
  return 0;
}

inline int build_fewshot(const BuildFewShotArgs& a, const std::vector<std::string>& argv,
                         std::ostream& out) {
  const FeatureMatrix train = normalize_rows(load_cache(a.train));
  const LabelSet labels = load_labels(a.train_labels);
  const FeatureMatrix classifier = normalize_rows(load_cache(a.classifier));
  if (labels.n_classes != classifier.rows()) {
    throw Error(Errc::shape_mismatch, "train labels vs classifier rows");
  }
  const FewShotCache cache = build_fewshot_cache(train, labels.labels, labels.n_classes, a.k, a.seed);
  const FeatureMatrix cap = fewshot_caption_cache(cache.labels, classifier);
  const fs::path dir(a.out);
  fs::create_directories(dir);
  std::vector<std::size_t> classes(cache.labels.sample_classes().begin(),
                                   cache.labels.sample_classes().end());
  save_cache(cache.features, dir / "img.caps");
  save_meta({a.dataset, a.backbone, labels.class_names, classes,
             {{"content", "few-shot training features"}, {"source_rows", cache.source_rows}}},
            dir / "img.caps");
  save_cache(cap, dir / "cap.caps");
  save_meta({a.dataset, a.backbone, labels.class_names, classes,
             {{"content", "classifier rows per support sample"}}},
            dir / "cap.caps");
  save_labels({labels.n_classes, labels.class_names, classes}, dir / "labels.json");

  ordered_json config;
  config["train"] = a.train;
  config["train_labels"] = a.train_labels;
  config["classifier"] = a.classifier;
  config["out"] = a.out;
  config["k"] = a.k;
  config["dataset"] = a.dataset;
  config["backbone"] = a.backbone;
  auto record = run_record("build-fewshot", argv, config);
  record["seeds"] = {{"seed", a.seed}};
  write_json(dir / "run-record.json", record);
  out << "few-shot cache: " << cache.features.rows() << " rows -> " << dir.string() << "\n";
  return 0;
}

inline int infer(const InferArgs& a, unsigned threads, const std::vector<std::string>& argv,
                 std::ostream& out) {
  const Method method = parse_method(a.cache.mode);
  a.hp.validate();
  const SupportCache cache = load_support_cache(a.cache, method);
  const FeatureMatrix test = normalize_rows(load_cache(a.test));

  const auto start = std::chrono::steady_clock::now();
  const LogitsMatrix logits = method_logits(method, test, cache, a.hp, threads);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  std::vector<float> data(logits.data().size());
  std::transform(logits.data().begin(), logits.data().end(), data.begin(),
                 [](double x) { return static_cast<float>(x); });
  const fs::path path(a.out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_cache(FeatureMatrix(logits.rows(), logits.cols(), std::move(data)), path);

  std::vector<std::string> class_names;
  if (!a.cache.labels.empty()) class_names = load_labels(a.cache.labels).class_names;
  const std::size_t n_classes = cache.classifier.rows();
  std::size_t support_size = 0;
  if (method != Method::zeroshot && n_classes > 0) {
    for (std::size_t k = 0; k < n_classes; ++k) {
      support_size = std::max(support_size, cache.labels.class_size(k));
    }
  }
  ordered_json extra;
  extra["method"] = a.cache.mode;
  extra["support_size"] = support_size;
  extra["hyperparams"] = hp_json(a.hp);
  save_meta({a.dataset, a.backbone, class_names, {}, extra}, path);

  ordered_json config = cache_config(a.cache);
  config["test"] = a.test;
  config["hyperparams"] = hp_json(a.hp);
  config["out"] = a.out;
  config["dataset"] = a.dataset;
  config["backbone"] = a.backbone;
  config["threads"] = threads;
  auto record = run_record("infer", argv, config);
  record["timing"] = {{"logits_wall_time_s", wall}};
  write_json(run_record_path(path), record);
  out << "logits: " << logits.rows() << " x " << logits.cols() << " -> " << path.string() << "\n";
  return 0;
}

inline Spacing parse_spacing(const std::string& s) {
  return s == "linear" ? Spacing::linear : Spacing::logarithmic;
}

inline int search(SearchArgs a, unsigned threads, const std::vector<std::string>& argv,
                  std::ostream& out) {
  const Method method = parse_method(a.cache.mode);
  std::vector<HyperParams> grid;
  if (a.grid == "default") {
    const double tau = a.spec.tau;
    a.spec = GridSpec{};
    a.spec.tau = tau;
    grid = make_grid(a.spec);
  } else if (a.grid == "delta-sweep") {
    grid = delta_sweep_grid(a.fixed_alpha, a.fixed_beta, a.fixed_gamma, a.spec.delta_points,
                            a.spec.tau);
  } else {
    auto apply_range = [](AxisSpec& axis, const std::vector<double>& range) {
      if (range.size() == 2) {
        axis.low = range[0];
        axis.high = range[1];
      }
    };
    apply_range(a.spec.alpha, a.alpha_range);
    apply_range(a.spec.beta, a.beta_range);
    apply_range(a.spec.gamma, a.gamma_range);
    a.spec.alpha.spacing = parse_spacing(a.alpha_spacing);
    a.spec.beta.spacing = parse_spacing(a.beta_spacing);
    a.spec.gamma.spacing = parse_spacing(a.gamma_spacing);
    grid = make_grid(a.spec);
  }
  const SupportCache cache = load_support_cache(a.cache, method);
  const FeatureMatrix val = normalize_rows(load_cache(a.val));
  const LabelSet val_labels = load_labels(a.val_labels);

  const SearchResult result = caps::search(val, val_labels.labels, cache, grid, method, threads);
  const fs::path path(a.out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_search_log(result, path);

  ordered_json config = cache_config(a.cache);
  config["val"] = a.val;
  config["val_labels"] = a.val_labels;
  config["grid"] = a.grid;
  config["grid_points"] = grid.size();
  config["tau"] = a.spec.tau;
  config["out"] = a.out;
  config["threads"] = threads;
  auto record = run_record("search", argv, config);
  record["result"] = {{"best", hp_json(result.best)},
                      {"best_accuracy", result.best_accuracy},
                      {"evaluations", result.evaluations}};
  write_json(run_record_path(path), record);
  out << "best " << format_percent(result.best_accuracy) << "% at alpha=" << result.best.alpha
      << " beta=" << result.best.beta << " gamma=" << result.best.gamma
      << " delta=" << result.best.delta << " (" << result.evaluations << " points)\n";
  return 0;
}

inline int eval(const EvalArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  const LabelSet labels = load_labels(a.labels);
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(a.logits_dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".caps") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<EvalReport> reports;
  for (const auto& file : files) {
    const FeatureMatrix stored = load_cache(file);
    std::vector<double> values(stored.data().begin(), stored.data().end());
    const LogitsMatrix logits(stored.rows(), stored.dim(), std::move(values));
    EvalReport r;
    r.method = file.stem().string();
    if (fs::exists(meta_path(file))) {
      const CacheMeta meta = load_meta(file);
      r.dataset = meta.dataset;
      r.backbone = meta.backbone;
      r.method = meta.extra.value("method", r.method);
      r.support_size = meta.extra.value("support_size", std::size_t{0});
      if (meta.extra.contains("similarity")) r.similarity = meta.extra["similarity"].get<double>();
    }
    if (const auto rec = run_record_path(file); fs::exists(rec)) {
      const auto j = read_json(rec);
      if (j.contains("timing")) r.wall_time_s = j["timing"].value("logits_wall_time_s", 0.0);
    }
    r.top1 = top1_accuracy(logits, labels.labels);
    r.per_class = per_class_accuracy(logits, labels.labels, std::max(labels.n_classes, logits.cols()));
    reports.push_back(std::move(r));
  }
  const fs::path path(a.out);
  const ReportFormat format =
      a.format == "json" || (a.format.empty() && path.extension() == ".json") ? ReportFormat::json
                                                                              : ReportFormat::csv;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  emit_report(reports, path, format);

  ordered_json config;
  config["logits_dir"] = a.logits_dir;
  config["labels"] = a.labels;
  config["out"] = a.out;
  config["format"] = format == ReportFormat::json ? "json" : "csv";
  config["inputs"] = ordered_json::array();
  for (const auto& f : files) config["inputs"].push_back(f.filename().string());
  write_json(run_record_path(path), run_record("eval", argv, config));
  out << render_report(reports, ReportFormat::csv);
  return 0;
}

inline int similarity(const SimilarityArgs& a, const std::vector<std::string>& argv,
                      std::ostream& out) {
  const FeatureMatrix support = normalize_rows(load_cache(a.support));
  const FeatureMatrix test = normalize_rows(load_cache(a.test));
  const LabelSet support_labels = load_labels(a.support_labels);
  const LabelSet test_labels = load_labels(a.test_labels);
  const SimilarityMode mode = a.global ? SimilarityMode::global : SimilarityMode::per_class;
  const double value =
      support_similarity(support, support_labels.labels, test, test_labels.labels, mode);
  if (!a.out.empty()) {
    const fs::path path(a.out);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    ordered_json j;
    j["similarity_percent"] = value;
    j["mode"] = a.global ? "global" : "per_class";
    write_json(path, j);
    ordered_json config;
    config["support"] = a.support;
    config["support_labels"] = a.support_labels;
    config["test"] = a.test;
    config["test_labels"] = a.test_labels;
    config["mode"] = j["mode"];
    write_json(run_record_path(path), run_record("similarity", argv, config));
  }
  out << format_fixed(value, 2) << "\n";
  return 0;
}

inline void add_cache_options(CLI::App* sub, CacheArgs& a) {
  sub->add_option("--mode", a.mode, "zeroshot | tipx | m_adapter | f_variant")
      ->required()
      ->check(CLI::IsMember({"zeroshot", "tipx", "m_adapter", "f_variant"}));
  sub->add_option("--classifier", a.classifier, "Zero-shot classifier cache (N x C)")
      ->required()
      ->check(CLI::ExistingFile);
  sub->add_option("--img", a.img, "Support image feature cache")->check(CLI::ExistingFile);
  sub->add_option("--cap", a.cap, "Support caption-prompt feature cache")->check(CLI::ExistingFile);
  sub->add_option("--labels", a.labels, "Support labels (labels.json)")->check(CLI::ExistingFile);
}

}  // namespace detail

/// Runs one command. `args` excludes the program name.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"Caption-based support-set adaptation for CLIP-style classifiers", "caps"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", std::string(kVersion));
  unsigned threads = 1;
  app.add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

  BuildSupportArgs bs;
  auto* build_support = app.add_subcommand("build-support", "Build the caption-based support set");
  build_support->add_option("--input", bs.input, "Dataset JSON: {dataset, classes: [{name, images}]}")
      ->required()
      ->check(CLI::ExistingFile);
  build_support->add_option("--out", bs.out, "Output directory")->required();
  build_support->add_option("--k", bs.k, "Training images sampled per class")->capture_default_str()
      ->check(CLI::PositiveNumber);
  build_support->add_option("--m", bs.m, "Generated images per class")->capture_default_str()
      ->check(CLI::PositiveNumber);
  build_support->add_option("--seed", bs.seed, "Base seed")->capture_default_str();
  build_support->add_option("--max-tokens", bs.max_tokens, "Prompt token limit for the text encoder")->capture_default_str()
      ->check(CLI::Range(1, 77));
  build_support->add_option("--concurrency", bs.concurrency, "Requests in flight")->capture_default_str()
      ->check(CLI::PositiveNumber);
  build_support->add_option("--backbone", bs.backbone, "Backbone tag recorded in metadata");
  build_support->add_option("--templates", bs.templates, "JSON list of classifier prompt templates")
      ->check(CLI::ExistingFile);
  build_support->add_flag("--stub-clients", bs.client.stub, "Use deterministic in-process stubs");
  build_support->add_option("--stub-seed", bs.client.stub_seed, "Seed of the stub services")->capture_default_str();
  build_support->add_option("--captioner-url", bs.client.captioner_url, "Captioner endpoint");
  build_support->add_option("--generator-url", bs.client.generator_url, "Generator endpoint");
  build_support->add_option("--encoder-url", bs.client.encoder_url, "Encoder endpoint");
  build_support->add_option("--timeout", bs.client.timeout_s, "Request timeout (s)")->capture_default_str()
      ->check(CLI::PositiveNumber);
  build_support->add_option("--retries", bs.client.retries, "Retries per request")->capture_default_str();
  build_support->add_option("--backoff", bs.client.backoff_s, "Delay between retries (s)")->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  build_support->add_option("--bearer-token", bs.client.bearer_token, "Authorization bearer token");

  BuildFewShotArgs bf;
  auto* build_fewshot = app.add_subcommand("build-fewshot", "Build a few-shot cache from training features");
  build_fewshot->add_option("--train", bf.train, "Training feature cache")->required()->check(CLI::ExistingFile);
  build_fewshot->add_option("--train-labels", bf.train_labels, "Training labels (labels.json)")
      ->required()
      ->check(CLI::ExistingFile);
  build_fewshot->add_option("--classifier", bf.classifier, "Zero-shot classifier cache")
      ->required()
      ->check(CLI::ExistingFile);
  build_fewshot->add_option("--out", bf.out, "Output directory")->required();
  build_fewshot->add_option("--k", bf.k, "Shots per class")->capture_default_str()->check(CLI::PositiveNumber);
  build_fewshot->add_option("--seed", bf.seed, "Sampling seed")->capture_default_str();
  build_fewshot->add_option("--dataset", bf.dataset, "Dataset tag");
  build_fewshot->add_option("--backbone", bf.backbone, "Backbone tag");

  InferArgs in;
  auto* infer = app.add_subcommand("infer", "Compute logits for a test feature cache");
  detail::add_cache_options(infer, in.cache);
  infer->add_option("--test", in.test, "Test feature cache")->required()->check(CLI::ExistingFile);
  infer->add_option("--alpha", in.hp.alpha, "Affinity weight")->capture_default_str()->check(CLI::NonNegativeNumber);
  infer->add_option("--beta", in.hp.beta, "Affinity sharpness")->capture_default_str()->check(CLI::NonNegativeNumber);
  infer->add_option("--gamma", in.hp.gamma, "Intimacy weight")->capture_default_str()->check(CLI::NonNegativeNumber);
  infer->add_option("--delta", in.hp.delta, "Caption/image balance")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  infer->add_option("--tau", in.hp.tau, "Zero-shot logit scale")->capture_default_str()->check(CLI::PositiveNumber);
  infer->add_option("--out", in.out, "Output logits cache")->required();
  infer->add_option("--dataset", in.dataset, "Dataset tag");
  infer->add_option("--backbone", in.backbone, "Backbone tag");

  SearchArgs se;
  auto* search = app.add_subcommand("search", "Grid search hyperparameters on a validation split");
  detail::add_cache_options(search, se.cache);
  search->add_option("--val", se.val, "Validation feature cache")->required()->check(CLI::ExistingFile);
  search->add_option("--val-labels", se.val_labels, "Validation labels (labels.json)")
      ->required()
      ->check(CLI::ExistingFile);
  search->add_option("--grid", se.grid, "default | delta-sweep | custom")->capture_default_str()
      ->check(CLI::IsMember({"default", "delta-sweep", "custom"}));
  search->add_option("--alpha-range", se.alpha_range, "Alpha low high")->expected(2);
  search->add_option("--alpha-points", se.spec.alpha.points, "Alpha points");
  search->add_option("--alpha-spacing", se.alpha_spacing, "linear | log")->check(CLI::IsMember({"linear", "log"}));
  search->add_option("--beta-range", se.beta_range, "Beta low high")->expected(2);
  search->add_option("--beta-points", se.spec.beta.points, "Beta points");
  search->add_option("--beta-spacing", se.beta_spacing, "linear | log")->check(CLI::IsMember({"linear", "log"}));
  search->add_option("--gamma-range", se.gamma_range, "Gamma low high")->expected(2);
  search->add_option("--gamma-points", se.spec.gamma.points, "Gamma points");
  search->add_option("--gamma-spacing", se.gamma_spacing, "linear | log")->check(CLI::IsMember({"linear", "log"}));
  search->add_option("--delta-points", se.spec.delta_points, "Delta points on [0, 1]")->capture_default_str();
  search->add_option("--fixed-alpha", se.fixed_alpha, "Alpha for the delta sweep")->capture_default_str();
  search->add_option("--fixed-beta", se.fixed_beta, "Beta for the delta sweep")->capture_default_str();
  search->add_option("--fixed-gamma", se.fixed_gamma, "Gamma for the delta sweep")->capture_default_str();
  search->add_option("--tau", se.spec.tau, "Zero-shot logit scale")->capture_default_str()->check(CLI::PositiveNumber);
  search->add_option("--out", se.out, "Search log CSV")->required();

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Score a directory of logits caches into one report");
  eval->add_option("--logits-dir", ev.logits_dir, "Directory of *.caps logits")
      ->required()
      ->check(CLI::ExistingDirectory);
  eval->add_option("--labels", ev.labels, "Test labels (labels.json)")->required()->check(CLI::ExistingFile);
  eval->add_option("--out", ev.out, "Report path (.csv or .json)")->required();
  eval->add_option("--format", ev.format, "csv | json (default: from --out extension)")
      ->check(CLI::IsMember({"csv", "json"}));

  SimilarityArgs si;
  auto* sim = app.add_subcommand("similarity", "Average support/test feature similarity (%)");
  sim->add_option("--support", si.support, "Support image feature cache")->required()->check(CLI::ExistingFile);
  sim->add_option("--support-labels", si.support_labels, "Support labels")->required()->check(CLI::ExistingFile);
  sim->add_option("--test", si.test, "Test feature cache")->required()->check(CLI::ExistingFile);
  sim->add_option("--test-labels", si.test_labels, "Test labels")->required()->check(CLI::ExistingFile);
  sim->add_flag("--global", si.global, "Class-agnostic pairwise mean instead of per-class");
  sim->add_option("--out", si.out, "Write the value as JSON");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto* failed = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << failed->help();
    return 1;
  }

  std::vector<std::string> argv{"caps"};
  argv.insert(argv.end(), args.begin(), args.end());
  const std::string name = app.get_subcommands().front()->get_name();
  try {
    if (*build_support) return detail::build_support(bs, argv, out);
    if (*build_fewshot) return detail::build_fewshot(bf, argv, out);
    if (*infer) return detail::infer(in, threads, argv, out);
    if (*search) return detail::search(se, threads, argv, out);
    if (*eval) return detail::eval(ev, argv, out);
    if (*sim) return detail::similarity(si, argv, out);
  } catch (const Error& e) {
    err << "caps " << name << ": " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "caps " << name << ": " << e.what() << "\n";
    return 2;
  }
  return 1;
}

inline int run(int argc, char** argv) {
  return run(std::vector<std::string>(argv + 1, argv + argc));
}

}  // namespace caps::cli
