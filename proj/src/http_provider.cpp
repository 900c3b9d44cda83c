// SPDX-License-Identifier: Apache-2.0
#include "prefprobe/providers.hpp"

#include <httplib.h>

#include <cstdlib>
#include <json.hpp>

namespace prefprobe {
namespace {

using nlohmann::json;

// Releases the in-flight slot on every exit path.
class SlotGuard {
 public:
  explicit SlotGuard(std::counting_semaphore<1024>& sem) : sem_(sem) { sem_.acquire(); }
  ~SlotGuard() { sem_.release(); }
  SlotGuard(const SlotGuard&) = delete;
  SlotGuard& operator=(const SlotGuard&) = delete;

 private:
  std::counting_semaphore<1024>& sem_;
};

json parse_body(const std::string& body) {
  try {
    return json::parse(body);
  } catch (const json::exception& e) {
    throw Error(Errc::MalformedResponse, std::string("response is not JSON: ") + e.what());
  }
}

const json& first_choice(const json& doc) {
  if (!doc.is_object() || !doc.contains("choices") || !doc["choices"].is_array() ||
      doc["choices"].empty()) {
    throw Error(Errc::MalformedResponse, "response has no choices[0]");
  }
  return doc["choices"][0];
}

}  // namespace

HttpProvider::HttpProvider(HttpProviderConfig config)
    : config_(std::move(config)),
      in_flight_(static_cast<std::ptrdiff_t>(
          std::clamp<std::size_t>(config_.max_in_flight, 1, 1024))) {
  const auto scheme_end = config_.url.find("://");
  if (scheme_end == std::string::npos) {
    throw Error(Errc::InvalidConfig, "provider url needs a scheme: " + config_.url);
  }
  const auto path_start = config_.url.find('/', scheme_end + 3);
  scheme_host_port_ = config_.url.substr(0, path_start);
  path_ = path_start == std::string::npos ? "/" : config_.url.substr(path_start);
  if (config_.top_logprobs == 0) {
    throw Error(Errc::InvalidConfig, "top_logprobs must be >= 1");
  }
}

std::string HttpProvider::logprob_request_body(const std::string& prompt) const {
  json body = {{"prompt", prompt},
               {"max_tokens", 1},
               {"logprobs", config_.top_logprobs},
               {"temperature", 0}};
  if (!config_.model.empty()) body["model"] = config_.model;
  return body.dump();
}

std::string HttpProvider::post(const std::string& body) {
  SlotGuard slot(in_flight_);
  httplib::Client client(scheme_host_port_);
  const auto seconds = static_cast<time_t>(config_.timeout_seconds);
  const auto usec = static_cast<time_t>((config_.timeout_seconds - seconds) * 1e6);
  client.set_connection_timeout(seconds, usec);
  client.set_read_timeout(seconds, usec);
  client.set_write_timeout(seconds, usec);

  httplib::Headers headers;
  if (!config_.api_key_env.empty()) {
    const char* token = std::getenv(config_.api_key_env.c_str());
    if (token == nullptr || *token == '\0') {
      throw Error(Errc::TransportError,
                  "environment variable " + config_.api_key_env + " is not set");
    }
    headers.emplace("Authorization", std::string("Bearer ") + token);
  }
  auto result = client.Post(path_, headers, body, "application/json");
  if (!result) {
    throw Error(Errc::TransportError,
                "POST " + config_.url + " failed: " + httplib::to_string(result.error()));
  }
  if (result->status < 200 || result->status >= 300) {
    throw Error(Errc::TransportError,
                "POST " + config_.url + " returned HTTP " + std::to_string(result->status));
  }
  return result->body;
}

std::map<std::string, double> HttpProvider::parse_top_logprobs(const std::string& body,
                                                               std::size_t* prompt_tokens) {
  const json doc = parse_body(body);
  const json& choice = first_choice(doc);
  if (!choice.contains("logprobs") || !choice["logprobs"].is_object()) {
    throw Error(Errc::MalformedResponse, "choices[0] carries no logprobs");
  }
  const json& logprobs = choice["logprobs"];
  std::map<std::string, double> out;
  try {
    if (logprobs.contains("top_logprobs") && logprobs["top_logprobs"].is_array() &&
        !logprobs["top_logprobs"].empty()) {
      for (const auto& [token, value] : logprobs["top_logprobs"][0].items()) {
        out[token] = value.get<double>();
      }
    } else if (logprobs.contains("content") && logprobs["content"].is_array() &&
               !logprobs["content"].empty()) {
      for (const auto& entry : logprobs["content"][0].at("top_logprobs")) {
        out[entry.at("token").get<std::string>()] = entry.at("logprob").get<double>();
      }
    } else {
      throw Error(Errc::MalformedResponse, "no top logprobs for the first position");
    }
    if (prompt_tokens != nullptr) {
      *prompt_tokens = 0;
      if (doc.contains("usage") && doc["usage"].contains("prompt_tokens")) {
        *prompt_tokens = doc["usage"]["prompt_tokens"].get<std::size_t>();
      }
    }
  } catch (const json::exception& e) {
    throw Error(Errc::MalformedResponse, std::string("bad logprob payload: ") + e.what());
  }
  return out;
}

std::string HttpProvider::parse_generated_text(const std::string& body) {
  const json doc = parse_body(body);
  const json& choice = first_choice(doc);
  if (choice.contains("text") && choice["text"].is_string()) {
    return choice["text"].get<std::string>();
  }
  if (choice.contains("message") && choice["message"].contains("content") &&
      choice["message"]["content"].is_string()) {
    return choice["message"]["content"].get<std::string>();
  }
  throw Error(Errc::MalformedResponse, "choices[0] carries no generated text");
}

LogitResponse HttpProvider::next_token_logits(const ProbeRequest& request) {
  if (request.watch.empty()) throw Error(Errc::InvalidArgument, "watch list is empty");
  const std::string response = post(logprob_request_body(request.prompt));
  std::size_t tokens = 0;
  const auto returned = parse_top_logprobs(response, &tokens);
  if (tokens == 0) tokens = count_words(request.prompt);
  return assemble_logits(returned, request.watch, config_.floor, id(),
                         prompt_hash(request.prompt), tokens);
}

std::string HttpProvider::generate_text(const GenerateRequest& request) {
  if (request.max_tokens < 1) throw Error(Errc::InvalidArgument, "max_tokens must be >= 1");
  json body = {{"prompt", request.prompt},
               {"max_tokens", request.max_tokens},
               {"temperature", 0}};
  if (!config_.model.empty()) body["model"] = config_.model;
  return parse_generated_text(post(body.dump()));
}

}  // namespace prefprobe
