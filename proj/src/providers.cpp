// SPDX-License-Identifier: Apache-2.0
#include "prefprobe/providers.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "prefprobe/hashing.hpp"

namespace prefprobe {

void TokenSet::validate() const {
  if (affirmative.empty() || negative.empty()) {
    throw Error(Errc::InvalidArgument, "token set needs affirmative and negative tokens");
  }
  for (const auto* side : {&affirmative, &negative}) {
    for (const auto& token : *side) {
      if (token.empty()) throw Error(Errc::InvalidArgument, "empty token in token set");
    }
  }
  for (const auto& token : affirmative) {
    if (is_negative(token)) {
      throw Error(Errc::InvalidArgument, "token '" + token + "' is both affirmative and negative");
    }
  }
}

bool TokenSet::is_affirmative(const std::string& token) const {
  return std::find(affirmative.begin(), affirmative.end(), token) != affirmative.end();
}

bool TokenSet::is_negative(const std::string& token) const {
  return std::find(negative.begin(), negative.end(), token) != negative.end();
}

std::vector<std::string> TokenSet::all() const {
  std::vector<std::string> out = affirmative;
  out.insert(out.end(), negative.begin(), negative.end());
  return out;
}

double LogitResponse::at(const std::string& token) const {
  auto it = logits.find(token);
  if (it == logits.end()) {
    throw Error(Errc::MalformedResponse, "response has no logit for '" + token + "'");
  }
  return it->second;
}

std::string prompt_hash(const std::string& prompt) { return sha256_hex(prompt); }

LogitResponse assemble_logits(const std::map<std::string, double>& returned,
                              const std::vector<std::string>& watch, double floor,
                              std::string provider_id, std::string hash,
                              std::size_t token_count) {
  if (watch.empty()) throw Error(Errc::InvalidArgument, "watch list is empty");
  for (const auto& [token, value] : returned) {
    if (!std::isfinite(value)) {
      throw Error(Errc::MalformedResponse, "non-finite logprob for '" + token + "'");
    }
    if (value < floor) {
      throw Error(Errc::MalformedResponse, "returned logprob for '" + token +
                                               "' lies below the floor " + format_number(floor));
    }
  }
  LogitResponse response;
  response.provider_id = std::move(provider_id);
  response.prompt_hash = std::move(hash);
  response.token_count = token_count;
  for (const auto& token : watch) {
    auto it = returned.find(token);
    if (it == returned.end()) {
      response.logits[token] = floor;
      response.floored.insert(token);
    } else {
      response.logits[token] = it->second;
    }
  }
  if (response.floored.size() == response.logits.size()) {
    throw Error(Errc::AllFloored, "none of the watched tokens were returned");
  }
  return response;
}

std::size_t count_words(const std::string& text) {
  std::size_t words = 0;
  bool in_word = false;
  for (unsigned char c : text) {
    const bool space = std::isspace(c);
    if (!space && !in_word) ++words;
    in_word = !space;
  }
  return words;
}

}  // namespace prefprobe
