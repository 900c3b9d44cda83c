// SPDX-License-Identifier: Apache-2.0
//
// "Ask the model, read logits." Every provider must be callable from many
// threads at once.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "prefprobe/core.hpp"
#include "prefprobe/prompts.hpp"

namespace prefprobe {

/// Vocabulary tokens read as an affirmative / negative answer.
struct TokenSet {
  std::vector<std::string> affirmative{"Yes", "yes", "Y", "y"};
  std::vector<std::string> negative{"No", "no", "N", "n"};

  /// Throws InvalidArgument when a side is empty, contains an empty string,
  /// or the two sides overlap.
  void validate() const;
  bool is_affirmative(const std::string& token) const;
  bool is_negative(const std::string& token) const;
  std::vector<std::string> all() const;
};

/// Logits for the watched tokens at the first generated position.
struct LogitResponse {
  std::map<std::string, double> logits;
  std::set<std::string> floored;  // tokens the provider did not return
  std::string provider_id;
  std::string prompt_hash;        // SHA-256 of the rendered prompt bytes
  std::size_t token_count = 0;    // prompt length in tokens

  double at(const std::string& token) const;
  bool operator==(const LogitResponse&) const = default;
};

/// Which lattice a probe addresses. Only the synthetic oracle reads this;
/// real models see nothing but the prompt text.
enum class ProbeLevel { Flat, L1, L2Conditional };

struct PromptContext {
  PromptKind kind = PromptKind::LikelihoodProbe;
  ProbeLevel level = ProbeLevel::Flat;
  std::string user_id;
  std::optional<std::size_t> target;   // cluster (or L1 branch) being probed
  std::optional<std::size_t> parent;   // L1 parent of a conditional probe
  std::vector<std::size_t> choices;    // cluster index per letter, in letter order
  std::size_t k = 0;                   // requested list length for direct generation
};

struct ProbeRequest {
  std::string prompt;
  std::vector<std::string> watch;
  PromptContext context;
};

struct GenerateRequest {
  std::string prompt;
  std::size_t max_tokens = 1;
  PromptContext context;
};

class Provider {
 public:
  virtual ~Provider() = default;

  /// Returns a logit for every watched token; tokens the backend did not
  /// return carry the floor value and appear in `floored`.
  virtual LogitResponse next_token_logits(const ProbeRequest& request) = 0;
  virtual std::string generate_text(const GenerateRequest& request) = 0;
  virtual std::string id() const = 0;
};

inline constexpr double kDefaultLogprobFloor = -100.0;

/// Builds a LogitResponse from whatever the backend returned. Missing watched
/// tokens get `floor`; throws AllFloored when nothing was returned for any of
/// them and MalformedResponse when a returned value is non-finite or below
/// the floor.
LogitResponse assemble_logits(const std::map<std::string, double>& returned,
                              const std::vector<std::string>& watch, double floor,
                              std::string provider_id, std::string prompt_hash,
                              std::size_t token_count);

std::string prompt_hash(const std::string& prompt);

// ---------------------------------------------------------------------------
// Synthetic oracle

/// Utilities the oracle answers from. `l1` and `conditional` are only needed
/// for hierarchical probing; `conditional[k]` is the utility of L2 cluster k
/// given its parent branch.
struct OracleUtilities {
  std::vector<double> flat;
  std::vector<double> l1;
  std::vector<double> conditional;
};

struct OracleConfig {
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;
  double negative_baseline = 0.0;
  double p_swap = 0.0;  // exposure-bias swap rate for generated rankings
  TokenSet tokens;
  std::string provider_id = "oracle";
};

/// Reference isotonic estimator: affirmative logit = u + e, negative logit =
/// baseline + e', letter logit = q_j + e. Noise is keyed by (seed, prompt
/// hash, token), so responses do not depend on call order.
class OracleProvider : public Provider {
 public:
  explicit OracleProvider(OracleConfig config);
  OracleProvider(const LatentUtility& utility, OracleConfig config);

  /// Utilities used for requests whose user id has no entry of its own.
  void set_default(OracleUtilities utilities);
  void set_user(const std::string& user_id, OracleUtilities utilities);

  LogitResponse next_token_logits(const ProbeRequest& request) override;
  std::string generate_text(const GenerateRequest& request) override;
  std::string id() const override { return config_.provider_id; }

  const OracleConfig& config() const noexcept { return config_; }

 private:
  const OracleUtilities& utilities_for(const std::string& user_id) const;
  double noise(const std::string& hash, std::string_view key) const;

  OracleConfig config_;
  std::optional<OracleUtilities> default_;
  std::unordered_map<std::string, OracleUtilities> users_;
  mutable std::mutex mutex_;
};

std::size_t count_words(const std::string& text);

// ---------------------------------------------------------------------------
// HTTP completion-style client

struct HttpProviderConfig {
  std::string url;                 // e.g. http://localhost:8000/v1/completions
  std::string model;               // optional "model" field
  std::string api_key_env;         // bearer token variable name; empty = no auth
  std::size_t top_logprobs = 20;
  double floor = kDefaultLogprobFloor;
  double timeout_seconds = 30.0;
  std::size_t max_in_flight = 4;
  std::string provider_id = "http";
};

class HttpProvider : public Provider {
 public:
  explicit HttpProvider(HttpProviderConfig config);

  LogitResponse next_token_logits(const ProbeRequest& request) override;
  std::string generate_text(const GenerateRequest& request) override;
  std::string id() const override { return config_.provider_id; }

  /// Request body for a logit probe; exposed for wire-format tests.
  std::string logprob_request_body(const std::string& prompt) const;

  /// Extracts the top-N map of the first generated position from a
  /// completion response (OpenAI-style `choices[0].logprobs.top_logprobs[0]`
  /// or chat-style `choices[0].logprobs.content[0].top_logprobs`).
  static std::map<std::string, double> parse_top_logprobs(const std::string& body,
                                                          std::size_t* prompt_tokens);
  static std::string parse_generated_text(const std::string& body);

 private:
  std::string post(const std::string& body);

  HttpProviderConfig config_;
  std::string scheme_host_port_;
  std::string path_;
  std::counting_semaphore<1024> in_flight_;
};

// ---------------------------------------------------------------------------
// Record / replay cache

enum class CacheMode { Record, Replay };

/// JSONL cache keyed by prompt hash. Record mode serves hits from the file
/// and appends misses after asking `inner`; replay mode never calls out and
/// throws CacheMiss on an unknown prompt.
class RecordReplayProvider : public Provider {
 public:
  RecordReplayProvider(std::shared_ptr<Provider> inner, std::filesystem::path path,
                       CacheMode mode);

  LogitResponse next_token_logits(const ProbeRequest& request) override;
  std::string generate_text(const GenerateRequest& request) override;
  std::string id() const override;

  std::size_t inner_calls() const;
  std::size_t cached_entries() const;

 private:
  void load();
  void append_line(const std::string& line);

  std::shared_ptr<Provider> inner_;
  std::filesystem::path path_;
  CacheMode mode_;
  mutable std::mutex mutex_;
  std::unordered_map<std::string, LogitResponse> logits_;
  std::unordered_map<std::string, std::string> generations_;
  std::size_t inner_calls_ = 0;
};

}  // namespace prefprobe
