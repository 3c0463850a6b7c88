#pragma once

// Client contract for the three neural services the support builder depends
// on: an image captioner, a text-to-image generator and a feature encoder.
// Wire format is JSON over HTTP POST to `<endpoint>/caption`, `/generate` and
// `/encode`. StubClient is a deterministic in-process stand-in.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "httplib.h"
// <resolv.h> (pulled in by httplib) defines _res, which collides with Eigen.
#ifdef _res
#undef _res
#endif

#include "caps/error.hpp"
#include "caps/rng.hpp"

namespace caps {

inline constexpr std::string_view kDefaultCaptionInstruction =
    "Generate a concise and accurate description for the following image. "
    "Please ensure to include key elements and any details.";

inline constexpr std::size_t kMaxTextTokens = 77;

struct ClientConfig {
  std::string endpoint;  // e.g. "http://127.0.0.1:8080" or "http://host:8080/v1"
  double timeout_s = 60.0;
  unsigned max_retries = 2;
  double backoff_s = 1.0;
  std::string bearer_token;  // sent as `Authorization: Bearer ...` when set

  void validate() const {
    if (!(timeout_s > 0.0)) throw Error(Errc::client_error, "timeout must be > 0");
    if (!(backoff_s >= 0.0)) throw Error(Errc::client_error, "backoff must be >= 0");
  }
};

struct CaptionRequest {
  std::string image_ref;
  std::string instruction = std::string(kDefaultCaptionInstruction);
};
struct CaptionResponse {
  std::string caption;
};

struct GenerateRequest {
  std::string prompt;
  std::uint64_t seed = 0;
};
struct GenerateResponse {
  std::string image_ref;
};

enum class EncodeKind { image, text };

struct EncodeRequest {
  EncodeKind kind = EncodeKind::text;
  std::vector<std::string> items;  // image refs or texts
  std::size_t max_tokens = kMaxTextTokens;
};
struct EncodeResponse {
  std::size_t dim = 0;
  std::vector<std::vector<float>> rows;
};

inline void to_json(nlohmann::json& j, const CaptionRequest& r) {
  j = {{"image_ref", r.image_ref}, {"instruction", r.instruction}};
}
inline void from_json(const nlohmann::json& j, CaptionRequest& r) {
  r.image_ref = j.at("image_ref").get<std::string>();
  r.instruction = j.value("instruction", std::string(kDefaultCaptionInstruction));
}
inline void to_json(nlohmann::json& j, const CaptionResponse& r) { j = {{"caption", r.caption}}; }
inline void from_json(const nlohmann::json& j, CaptionResponse& r) {
  r.caption = j.at("caption").get<std::string>();
}
inline void to_json(nlohmann::json& j, const GenerateRequest& r) {
  j = {{"prompt", r.prompt}, {"seed", r.seed}};
}
inline void from_json(const nlohmann::json& j, GenerateRequest& r) {
  r.prompt = j.at("prompt").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
}
inline void to_json(nlohmann::json& j, const GenerateResponse& r) {
  j = {{"image_ref", r.image_ref}};
}
inline void from_json(const nlohmann::json& j, GenerateResponse& r) {
  r.image_ref = j.at("image_ref").get<std::string>();
}
inline void to_json(nlohmann::json& j, const EncodeRequest& r) {
  j = {{"kind", r.kind == EncodeKind::image ? "image" : "text"},
       {"items", r.items},
       {"max_tokens", r.max_tokens}};
}
inline void from_json(const nlohmann::json& j, EncodeRequest& r) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind != "image" && kind != "text") throw Error(Errc::bad_response, "kind '" + kind + "'");
  r.kind = kind == "image" ? EncodeKind::image : EncodeKind::text;
  r.items = j.at("items").get<std::vector<std::string>>();
  r.max_tokens = j.value("max_tokens", kMaxTextTokens);
}
inline void to_json(nlohmann::json& j, const EncodeResponse& r) {
  j = {{"dim", r.dim}, {"rows", r.rows}};
}
inline void from_json(const nlohmann::json& j, EncodeResponse& r) {
  r.dim = j.at("dim").get<std::size_t>();
  r.rows = j.at("rows").get<std::vector<std::vector<float>>>();
}

inline void validate_encode_request(const EncodeRequest& req) {
  if (req.items.empty()) throw Error(Errc::invalid_count, "encode request has no items");
  if (req.kind == EncodeKind::text && (req.max_tokens < 1 || req.max_tokens > kMaxTextTokens)) {
    throw Error(Errc::invalid_count, "max_tokens must be in [1, 77]");
  }
}

inline void validate_encode_response(const EncodeRequest& req, const EncodeResponse& res) {
  if (res.dim == 0) throw Error(Errc::dim_zero, "encoder returned dim 0");
  if (res.rows.size() != req.items.size()) {
    throw Error(Errc::bad_response, std::to_string(res.rows.size()) + " rows for " +
                                        std::to_string(req.items.size()) + " items");
  }
  for (const auto& row : res.rows) {
    if (row.size() != res.dim) throw Error(Errc::bad_response, "row length != dim");
  }
}

class ModelClient {
 public:
  virtual ~ModelClient() = default;
  virtual CaptionResponse caption(const CaptionRequest& req) = 0;
  virtual GenerateResponse generate(const GenerateRequest& req) = 0;
  virtual EncodeResponse encode(const EncodeRequest& req) = 0;
};

inline std::string to_hex(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

/// Deterministic stand-in for all three services. Each response is a pure
/// function of the request and the stub seed:
///  - caption: "stub caption for <ref> <w1> <w2>", words drawn from a fixed
///    vocabulary by a SplitMix64 stream seeded from FNV-1a(ref) ^ seed;
///  - generate: "gen:" + hex FNV-1a over the prompt bytes followed by the 8
///    little-endian seed bytes;
///  - encode: per item, SplitMix64 seeded from FNV-1a over kind byte, item
///    bytes, max_tokens, and the stub seed; `dim` Box-Muller normals,
///    unit-normalized.
class StubClient : public ModelClient {
 public:
  static constexpr std::size_t kDefaultDim = 16;

  explicit StubClient(std::uint64_t seed = 0, std::size_t dim = kDefaultDim)
      : seed_(seed), dim_(dim) {}

  CaptionResponse caption(const CaptionRequest& req) override {
    static constexpr std::string_view kWords[] = {
        "token-a", "token-b", "token-c", "token-d", "token-e", "token-f", "token-g", "token-h",
        "token-i", "token-j", "token-k", "token-l", "token-m", "token-n", "token-o", "token-p"};
    SplitMix64 rng(fnv1a(req.image_ref) ^ seed_);
    std::string text = "stub caption for " + req.image_ref;
    for (int w = 0; w < 2; ++w) text += " " + std::string(kWords[rng.below(std::size(kWords))]);
    return {text};
  }

  GenerateResponse generate(const GenerateRequest& req) override {
    return {"gen:" + to_hex(fnv1a_u64(req.seed, fnv1a(req.prompt)))};
  }

  EncodeResponse encode(const EncodeRequest& req) override {
    validate_encode_request(req);
    if (dim_ == 0) throw Error(Errc::dim_zero, "stub dim is 0");
    EncodeResponse res;
    res.dim = dim_;
    res.rows.reserve(req.items.size());
    for (const auto& item : req.items) res.rows.push_back(embed(req.kind, item, req.max_tokens));
    return res;
  }

  std::vector<float> embed(EncodeKind kind, std::string_view item, std::size_t max_tokens) const {
    std::uint64_t h = fnv1a(kind == EncodeKind::image ? "i" : "t");
    h = fnv1a(item, h);
    h = fnv1a_u64(max_tokens, h);
    h = fnv1a_u64(seed_, h);
    SplitMix64 rng(h);
    std::vector<double> v(dim_);
    double sum_sq = 0.0;
    for (double& x : v) {
      x = rng.normal();
      sum_sq += x * x;
    }
    const double norm = std::sqrt(sum_sq);
    std::vector<float> out(dim_);
    for (std::size_t c = 0; c < dim_; ++c) out[c] = static_cast<float>(v[c] / norm);
    return out;
  }

 private:
  std::uint64_t seed_;
  std::size_t dim_;
};

namespace http {

struct Target {
  std::string scheme_host_port;
  std::string base_path;
};

inline Target split_endpoint(const std::string& endpoint) {
  const auto scheme = endpoint.find("://");
  if (scheme == std::string::npos) throw Error(Errc::client_error, "bad endpoint '" + endpoint + "'");
  const auto path = endpoint.find('/', scheme + 3);
  Target t;
  t.scheme_host_port = endpoint.substr(0, path);
  if (path != std::string::npos) t.base_path = endpoint.substr(path);
  while (!t.base_path.empty() && t.base_path.back() == '/') t.base_path.pop_back();
  return t;
}

/// POSTs `body` to `<endpoint><route>` and returns the parsed JSON reply.
/// Transport failures are retried up to cfg.max_retries times with
/// cfg.backoff_s between attempts; a non-200 status or an unparsable body is a
/// BadResponse and is not retried.
inline nlohmann::json post_json(const ClientConfig& cfg, std::string_view route,
                                const nlohmann::json& body) {
  cfg.validate();
  const Target target = split_endpoint(cfg.endpoint);
  httplib::Client client(target.scheme_host_port);
  const auto timeout = std::chrono::duration_cast<std::chrono::microseconds>(
      std::chrono::duration<double>(cfg.timeout_s));
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  client.set_write_timeout(timeout);
  httplib::Headers headers;
  if (!cfg.bearer_token.empty()) headers.emplace("Authorization", "Bearer " + cfg.bearer_token);
  const std::string path = target.base_path + std::string(route);
  const std::string payload = body.dump();

  bool timed_out = false;
  std::string last_error;
  for (unsigned attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    if (attempt > 0 && cfg.backoff_s > 0.0) {
      std::this_thread::sleep_for(std::chrono::duration<double>(cfg.backoff_s));
    }
    auto res = client.Post(path, headers, payload, "application/json");
    if (!res) {
      const auto err = res.error();
      timed_out = timed_out || err == httplib::Error::Read ||
                  err == httplib::Error::ConnectionTimeout;
      last_error = httplib::to_string(err);
      continue;
    }
    if (res->status != 200) {
      throw Error(Errc::bad_response, cfg.endpoint + std::string(route) + " returned status " +
                                          std::to_string(res->status));
    }
    try {
      return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::bad_response, cfg.endpoint + std::string(route) + ": " + e.what());
    }
  }
  const std::string what = cfg.endpoint + std::string(route) + " after " +
                           std::to_string(cfg.max_retries + 1) + " attempts: " + last_error;
  throw Error(timed_out ? Errc::timeout : Errc::exhausted, what);
}

template <class Response>
Response parse_response(const nlohmann::json& j, std::string_view route) {
  try {
    return j.get<Response>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::bad_response, std::string(route) + ": " + e.what());
  }
}

inline CaptionResponse caption(const ClientConfig& cfg, const CaptionRequest& req) {
  auto res = parse_response<CaptionResponse>(post_json(cfg, "/caption", req), "/caption");
  if (res.caption.empty()) throw Error(Errc::bad_response, "/caption: empty caption");
  return res;
}

inline GenerateResponse generate(const ClientConfig& cfg, const GenerateRequest& req) {
  auto res = parse_response<GenerateResponse>(post_json(cfg, "/generate", req), "/generate");
  if (res.image_ref.empty()) throw Error(Errc::bad_response, "/generate: empty image_ref");
  return res;
}

inline EncodeResponse encode(const ClientConfig& cfg, const EncodeRequest& req) {
  validate_encode_request(req);
  auto res = parse_response<EncodeResponse>(post_json(cfg, "/encode", req), "/encode");
  validate_encode_response(req, res);
  return res;
}

}  // namespace http

/// Routes each call to its own service endpoint.
class HttpClient : public ModelClient {
 public:
  HttpClient(ClientConfig captioner, ClientConfig generator, ClientConfig encoder)
      : captioner_(std::move(captioner)),
        generator_(std::move(generator)),
        encoder_(std::move(encoder)) {}

  /// Copies `base` for every service, then applies CAPS_CAPTIONER_URL,
  /// CAPS_GENERATOR_URL and CAPS_ENCODER_URL when set.
  static HttpClient from_env(const ClientConfig& base) {
    auto with_env = [&](const char* var) {
      ClientConfig cfg = base;
      if (const char* url = std::getenv(var); url != nullptr && *url != '\0') cfg.endpoint = url;
      return cfg;
    };
    return HttpClient(with_env("CAPS_CAPTIONER_URL"), with_env("CAPS_GENERATOR_URL"),
                      with_env("CAPS_ENCODER_URL"));
  }

  CaptionResponse caption(const CaptionRequest& req) override {
    return http::caption(captioner_, req);
  }
  GenerateResponse generate(const GenerateRequest& req) override {
    return http::generate(generator_, req);
  }
  EncodeResponse encode(const EncodeRequest& req) override { return http::encode(encoder_, req); }

  const ClientConfig& captioner() const noexcept { return captioner_; }
  const ClientConfig& generator() const noexcept { return generator_; }
  const ClientConfig& encoder() const noexcept { return encoder_; }

 private:
  ClientConfig captioner_;
  ClientConfig generator_;
  ClientConfig encoder_;
};

}  // namespace caps
