// SPDX-License-Identifier: Apache-2.0
//
// JSON-over-HTTP POST with timeout and bounded exponential-backoff retry.
// Used by the remote judge and the remote embedder.

#pragma once

#include <chrono>
#include <string>
#include <thread>

#include <httplib.h>

// <resolv.h> (pulled in by httplib) defines _res as a macro, which breaks
// Eigen headers included afterwards.
#ifdef _res
#undef _res
#endif

#include "tinyxfer/common.hpp"

namespace tinyxfer {

struct HttpEndpoint {
  std::string base;  // scheme://host[:port]
  std::string path = "/";
};

inline HttpEndpoint parse_endpoint(const std::string& url) {
  if (!url.starts_with("http://")) throw config_error("endpoint '" + url + "' must start with http://");
  const auto slash = url.find('/', 7);
  if (slash == 7) throw config_error("endpoint '" + url + "' has no host");
  if (slash == std::string::npos) return {url, "/"};
  return {url.substr(0, slash), url.substr(slash)};
}

struct RetryPolicy {
  int timeout_ms = 30000;
  int max_attempts = 4;
  int backoff_ms = 200;  // doubled after every failed attempt
};

// Retries on transport failures, 429 and 5xx. Other non-2xx statuses and
// unparseable bodies fail immediately. Exhausted retries raise a runtime
// error whose message says the call can be retried.
inline json post_json(const HttpEndpoint& ep, const json& body, const RetryPolicy& policy) {
  httplib::Client cli(ep.base);
  const auto to = std::chrono::milliseconds(policy.timeout_ms);
  cli.set_connection_timeout(to);
  cli.set_read_timeout(to);
  cli.set_write_timeout(to);
  const std::string payload = body.dump();
  std::string last;
  int delay = policy.backoff_ms;
  for (int attempt = 1; attempt <= std::max(1, policy.max_attempts); ++attempt) {
    auto res = cli.Post(ep.path, payload, "application/json");
    if (!res) {
      last = "transport error: " + httplib::to_string(res.error());
    } else if (res->status == 429 || res->status >= 500) {
      last = "HTTP " + std::to_string(res->status);
    } else if (res->status < 200 || res->status >= 300) {
      throw runtime_error(ep.base + ep.path + " rejected the request: HTTP " + std::to_string(res->status) + " " +
                          res->body.substr(0, 200));
    } else {
      auto j = json::parse(res->body, nullptr, false);
      if (j.is_discarded()) throw runtime_error(ep.base + ep.path + " returned a body that is not JSON");
      return j;
    }
    if (attempt < policy.max_attempts) {
      std::this_thread::sleep_for(std::chrono::milliseconds(delay));
      delay *= 2;
    }
  }
  throw runtime_error(ep.base + ep.path + " unreachable after " + std::to_string(std::max(1, policy.max_attempts)) +
                      " attempts (" + last + "); retriable, rerun to resume");
}

}  // namespace tinyxfer
