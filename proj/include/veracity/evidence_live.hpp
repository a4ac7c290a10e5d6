#pragma once
// HTTP search client for a Custom-Search-style JSON API.
//
// GET <endpoint>?key=<api key>&cx=<engine>&q=<claim>&num=10 returning
// {"items": [{"title", "snippet", "link"}, ...]}. Transient failures
// (connection errors, 429, 5xx) are retried with exponential backoff.
// Results can be cached as evidence fixtures.

#include <chrono>
#include <cstdlib>
#include <mutex>
#include <semaphore>
#include <thread>

#include "httplib.h"
// <resolv.h> defines _res as a macro, which collides with Eigen parameter names.
#ifdef _res
#undef _res
#endif
#include "json.hpp"
#include "veracity/evidence.hpp"

namespace veracity {

struct LiveSearchConfig {
  std::string endpoint = "https://www.googleapis.com/customsearch/v1";
  std::string api_key_env = "VERACITY_SEARCH_API_KEY";
  std::string engine_id;
  int max_retries = 3;
  std::chrono::milliseconds initial_backoff{500};
  std::chrono::milliseconds min_request_interval{100};
  std::chrono::seconds timeout{20};
  int max_concurrent = 4;
  std::optional<std::filesystem::path> cache_dir;
};

class LiveSearchClient final : public SearchClient {
 public:
  explicit LiveSearchClient(LiveSearchConfig config)
      : config_(std::move(config)), slots_(std::clamp(config_.max_concurrent, 1, 64)) {
    const auto scheme_end = config_.endpoint.find("://");
    if (scheme_end == std::string::npos) throw ConfigError("search endpoint needs a scheme");
    const auto path_start = config_.endpoint.find('/', scheme_end + 3);
    base_ = config_.endpoint.substr(0, path_start);
    path_ = path_start == std::string::npos ? "/" : config_.endpoint.substr(path_start);
    const char* key = std::getenv(config_.api_key_env.c_str());
    if (key == nullptr || *key == '\0')
      throw ConfigError("search API key not set in environment variable " + config_.api_key_env);
    api_key_ = key;
  }

  std::vector<SearchResult> search(const std::string& claim_id, const std::string& query,
                                   Diagnostics* diag) override {
    if (config_.cache_dir) {
      if (auto cached = try_load_fixture(*config_.cache_dir, claim_id)) return to_results(*cached);
    }
    slots_.acquire();
    struct Release {
      std::counting_semaphore<64>& s;
      ~Release() { s.release(); }
    } release{slots_};

    std::string last_error;
    auto backoff = config_.initial_backoff;
    for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
      if (attempt > 0) {
        warn(diag, "search retry " + std::to_string(attempt) + " for '" + claim_id + "': " + last_error);
        std::this_thread::sleep_for(backoff);
        backoff *= 2;
      }
      throttle();
      httplib::Client cli(base_);
      cli.set_connection_timeout(config_.timeout);
      cli.set_read_timeout(config_.timeout);
      httplib::Params params{{"key", api_key_}, {"q", query}, {"num", "10"}};
      if (!config_.engine_id.empty()) params.emplace("cx", config_.engine_id);
      auto res = cli.Get(path_, params, httplib::Headers{});
      if (!res) {
        last_error = httplib::to_string(res.error());
        continue;
      }
      if (res->status == 429 || res->status >= 500) {
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200)
        throw Error("search request for '" + claim_id + "' failed with HTTP " +
                    std::to_string(res->status));
      auto results = parse_response(res->body);
      if (config_.cache_dir) {
        EvidenceSet set;
        set.claim_id = claim_id;
        for (std::size_t i = 0; i < results.size() && i < kMaxEvidence; ++i)
          set.snippets.push_back({claim_id, static_cast<int>(i + 1), results[i].title,
                                  results[i].snippet, results[i].url, results[i].last_update});
        store_fixture(set, *config_.cache_dir);
      }
      return results;
    }
    throw RetryableError("search for '" + claim_id + "' failed after " +
                         std::to_string(config_.max_retries) + " retries: " + last_error);
  }

  static std::vector<SearchResult> parse_response(const std::string& body) {
    std::vector<SearchResult> out;
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      throw Error(std::string("malformed search response: ") + e.what());
    }
    if (!doc.contains("items")) return out;
    for (const auto& item : doc.at("items")) {
      SearchResult r;
      r.title = item.value("title", "");
      r.snippet = item.value("snippet", "");
      r.url = item.value("link", "");
      out.push_back(std::move(r));
    }
    return out;
  }

 private:
  static std::vector<SearchResult> to_results(const EvidenceSet& set) {
    std::vector<SearchResult> out;
    for (const auto& s : set.snippets) out.push_back({s.title, s.snippet_text, s.url, s.last_update});
    return out;
  }

  void throttle() {
    std::unique_lock lock(throttle_mutex_);
    const auto now = std::chrono::steady_clock::now();
    if (now < next_allowed_) std::this_thread::sleep_until(next_allowed_);
    next_allowed_ = std::max(now, next_allowed_) + config_.min_request_interval;
  }

  LiveSearchConfig config_;
  std::counting_semaphore<64> slots_;
  std::string base_;
  std::string path_;
  std::string api_key_;
  std::mutex throttle_mutex_;
  std::chrono::steady_clock::time_point next_allowed_{};
};

}  // namespace veracity
