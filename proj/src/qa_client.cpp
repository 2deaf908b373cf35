// SPDX-License-Identifier: Apache-2.0
#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include <cstdlib>
#include <stdexcept>

#include <json.hpp>

#include "ssmfuse/qa.hpp"

namespace ssmfuse::qa {

namespace {

/// Chat-completions endpoint: POST {base}/v1/chat/completions with one user
/// message, temperature 0.
class ChatClient : public TextClient {
 public:
  ChatClient(std::string api_key, std::string host, std::string model, double timeout_seconds)
      : api_key_(std::move(api_key)), host_(std::move(host)), model_(std::move(model)), timeout_(timeout_seconds) {}

  std::string complete(const std::string& prompt) override {
    httplib::Client cli(host_);
    const auto secs = static_cast<time_t>(timeout_);
    cli.set_connection_timeout(secs);
    cli.set_read_timeout(secs);
    cli.set_write_timeout(secs);
    const nlohmann::json body = {
        {"model", model_},
        {"temperature", 0},
        {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
    };
    const httplib::Headers headers{{"Authorization", "Bearer " + api_key_}};
    const auto res = cli.Post("/v1/chat/completions", headers, body.dump(), "application/json");
    if (!res) throw std::runtime_error("request failed: " + httplib::to_string(res.error()));
    if (res->status != 200) throw std::runtime_error("HTTP " + std::to_string(res->status) + ": " + res->body);
    const auto reply = nlohmann::json::parse(res->body);
    return reply.at("choices").at(0).at("message").at("content").get<std::string>();
  }

 private:
  std::string api_key_;
  std::string host_;
  std::string model_;
  double timeout_;
};

std::string env_or(const char* name, const char* fallback) {
  const char* v = std::getenv(name);
  return v && *v ? v : fallback;
}

}  // namespace

std::unique_ptr<QuestionSource> source_from_environment(const ClientPolicy& policy) {
  const char* key = std::getenv("SSMFUSE_API_KEY");
  if (!key || !*key) return std::make_unique<StubSource>();
  auto client = std::make_unique<ChatClient>(key, env_or("SSMFUSE_API_BASE", "https://api.openai.com"),
                                             env_or("SSMFUSE_MODEL", "gpt-4o"), policy.timeout_seconds);
  return std::make_unique<LlmSource>(std::move(client), policy);
}

}  // namespace ssmfuse::qa
