// SPDX-License-Identifier: Apache-2.0
#include "prefprobe/providers.hpp"

#include <algorithm>
#include <random>

#include "prefprobe/hashing.hpp"

namespace prefprobe {
namespace {

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

double pick(const std::vector<double>& values, std::size_t index, const char* what) {
  if (index >= values.size()) {
    throw Error(Errc::ClusterIndexOutOfRange,
                std::string("oracle has no ") + what + " utility for index " +
                    std::to_string(index),
                index);
  }
  return values[index];
}

}  // namespace

OracleProvider::OracleProvider(OracleConfig config) : config_(std::move(config)) {
  if (config_.noise_sigma < 0.0) {
    throw Error(Errc::InvalidArgument, "noise_sigma must be >= 0");
  }
  if (config_.p_swap < 0.0 || config_.p_swap > 1.0) {
    throw Error(Errc::InvalidArgument, "p_swap must lie in [0,1]");
  }
  config_.tokens.validate();
}

OracleProvider::OracleProvider(const LatentUtility& utility, OracleConfig config)
    : OracleProvider(std::move(config)) {
  default_ = OracleUtilities{std::vector<double>(utility.scores().begin(), utility.scores().end()),
                             {}, {}};
}

void OracleProvider::set_default(OracleUtilities utilities) {
  std::lock_guard lock(mutex_);
  default_ = std::move(utilities);
}

void OracleProvider::set_user(const std::string& user_id, OracleUtilities utilities) {
  std::lock_guard lock(mutex_);
  users_[user_id] = std::move(utilities);
}

const OracleUtilities& OracleProvider::utilities_for(const std::string& user_id) const {
  std::lock_guard lock(mutex_);
  if (auto it = users_.find(user_id); it != users_.end()) return it->second;
  if (default_) return *default_;
  throw Error(Errc::InvalidArgument, "oracle has no utilities for user '" + user_id + "'");
}

double OracleProvider::noise(const std::string& hash, std::string_view key) const {
  if (config_.noise_sigma == 0.0) return 0.0;
  std::mt19937_64 rng(mix64(config_.seed ^ digest_prefix64(hash) ^ mix64(fnv1a(key))));
  std::normal_distribution<double> normal(0.0, config_.noise_sigma);
  return normal(rng);
}

LogitResponse OracleProvider::next_token_logits(const ProbeRequest& request) {
  if (request.watch.empty()) throw Error(Errc::InvalidArgument, "watch list is empty");
  const OracleUtilities& u = utilities_for(request.context.user_id);
  const std::string hash = prompt_hash(request.prompt);
  const auto& ctx = request.context;

  std::map<std::string, double> returned;
  if (ctx.kind == PromptKind::LikelihoodProbe ||
      ctx.kind == PromptKind::HierarchicalConditional) {
    if (!ctx.target) throw Error(Errc::InvalidArgument, "oracle probe without a target cluster");
    double utility = 0.0;
    switch (ctx.level) {
      case ProbeLevel::Flat: utility = pick(u.flat, *ctx.target, "flat"); break;
      case ProbeLevel::L1: utility = pick(u.l1, *ctx.target, "L1"); break;
      case ProbeLevel::L2Conditional:
        utility = pick(u.conditional, *ctx.target, "conditional");
        break;
    }
    const double yes = utility + noise(hash, "+");
    const double no = config_.negative_baseline + noise(hash, "-");
    for (const auto& token : request.watch) {
      if (config_.tokens.is_affirmative(token)) {
        returned[token] = yes;
      } else if (config_.tokens.is_negative(token)) {
        returned[token] = no;
      }
    }
  } else if (ctx.kind == PromptKind::GenerativeClassify) {
    for (std::size_t i = 0; i < ctx.choices.size(); ++i) {
      const std::string letter(1, choice_letter(i));
      returned[letter] = pick(u.flat, ctx.choices[i], "flat") + noise(hash, letter);
    }
    std::erase_if(returned, [&](const auto& kv) {
      return std::find(request.watch.begin(), request.watch.end(), kv.first) ==
             request.watch.end();
    });
  } else {
    throw Error(Errc::InvalidArgument, "oracle cannot score a direct-generation prompt");
  }
  // The oracle has no top-N cutoff, so the floor only covers unknown tokens.
  double floor = kDefaultLogprobFloor;
  for (const auto& [token, value] : returned) floor = std::min(floor, value);
  return assemble_logits(returned, request.watch, floor, id(), hash, count_words(request.prompt));
}

std::string OracleProvider::generate_text(const GenerateRequest& request) {
  if (request.max_tokens < 1) throw Error(Errc::InvalidArgument, "max_tokens must be >= 1");
  const OracleUtilities& u = utilities_for(request.context.user_id);
  const auto& choices = request.context.choices;
  if (choices.empty()) throw Error(Errc::InvalidArgument, "generation prompt lists no choices");

  std::vector<double> scores;
  scores.reserve(choices.size());
  for (std::size_t c : choices) scores.push_back(pick(u.flat, c, "flat"));
  std::vector<std::size_t> order = rank_descending(scores).order();

  if (config_.p_swap > 0.0) {
    std::mt19937_64 rng(mix64(config_.seed ^ digest_prefix64(prompt_hash(request.prompt)) ^
                              mix64(fnv1a("generate"))));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t i = 0; i + 1 < order.size(); ++i) {
      if (unit(rng) < config_.p_swap) std::swap(order[i], order[i + 1]);
    }
  }

  std::size_t k = request.context.k == 0 ? 1 : request.context.k;
  k = std::min({k, order.size(), request.max_tokens});
  std::string out;
  for (std::size_t i = 0; i < k; ++i) {
    if (i) out += ", ";
    out.push_back(choice_letter(order[i]));
  }
  return out;
}

}  // namespace prefprobe
