// SPDX-License-Identifier: Apache-2.0
#include "prefprobe/providers.hpp"

#include <algorithm>
#include <fstream>
#include <json.hpp>

namespace prefprobe {
namespace {

using nlohmann::json;

json to_json(const std::string& prompt, const LogitResponse& r) {
  json logits = json::object();
  for (const auto& [token, value] : r.logits) logits[token] = value;
  json line = {{"prompt_hash", r.prompt_hash},
               {"prompt", prompt},
               {"logits", logits},
               {"provider_id", r.provider_id},
               {"token_count", r.token_count}};
  if (!r.floored.empty()) line["floored"] = r.floored;
  return line;
}

LogitResponse logits_from_json(const json& line) {
  LogitResponse r;
  r.prompt_hash = line.at("prompt_hash").get<std::string>();
  r.provider_id = line.at("provider_id").get<std::string>();
  r.token_count = line.at("token_count").get<std::size_t>();
  for (const auto& [token, value] : line.at("logits").items()) {
    r.logits[token] = value.get<double>();
  }
  if (line.contains("floored")) {
    for (const auto& token : line["floored"]) r.floored.insert(token.get<std::string>());
  }
  if (r.prompt_hash.size() != 64) throw std::invalid_argument("prompt_hash is not 64 hex chars");
  return r;
}

}  // namespace

RecordReplayProvider::RecordReplayProvider(std::shared_ptr<Provider> inner,
                                           std::filesystem::path path, CacheMode mode)
    : inner_(std::move(inner)), path_(std::move(path)), mode_(mode) {
  if (mode_ == CacheMode::Record && !inner_) {
    throw Error(Errc::InvalidArgument, "record mode needs an inner provider");
  }
  if (mode_ == CacheMode::Replay && !std::filesystem::exists(path_)) {
    throw Error(Errc::UnreadableFile, "replay cache not found: " + path_.string());
  }
  load();
}

void RecordReplayProvider::load() {
  if (!std::filesystem::exists(path_)) return;
  std::ifstream in(path_);
  if (!in) throw Error(Errc::UnreadableFile, "cannot open cache " + path_.string());
  std::string text;
  std::size_t line_no = 0;
  while (std::getline(in, text)) {
    ++line_no;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json line = json::parse(text);
      if (line.value("kind", std::string("logits")) == "generate") {
        generations_[line.at("prompt_hash").get<std::string>()] =
            line.at("text").get<std::string>();
      } else {
        LogitResponse r = logits_from_json(line);
        std::string key = r.prompt_hash;
        logits_.insert_or_assign(std::move(key), std::move(r));
      }
    } catch (const std::exception& e) {
      throw Error(Errc::CacheCorrupt,
                  path_.string() + ":" + std::to_string(line_no) + ": " + e.what(), line_no);
    }
  }
}

void RecordReplayProvider::append_line(const std::string& line) {
  std::ofstream out(path_, std::ios::app);
  if (!out) throw Error(Errc::UnreadableFile, "cannot append to cache " + path_.string());
  out << line << '\n';
  out.flush();
}

LogitResponse RecordReplayProvider::next_token_logits(const ProbeRequest& request) {
  const std::string hash = prompt_hash(request.prompt);
  {
    std::lock_guard lock(mutex_);
    if (auto it = logits_.find(hash); it != logits_.end()) {
      const bool covers = std::all_of(request.watch.begin(), request.watch.end(),
                                      [&](const auto& t) { return it->second.logits.count(t); });
      if (covers) return it->second;
      if (mode_ == CacheMode::Replay) {
        throw Error(Errc::CacheMiss, "cached entry " + hash + " lacks a watched token");
      }
    } else if (mode_ == CacheMode::Replay) {
      throw Error(Errc::CacheMiss, "no cached response for prompt " + hash);
    }
  }
  LogitResponse response = inner_->next_token_logits(request);
  std::lock_guard lock(mutex_);
  ++inner_calls_;
  if (auto it = logits_.find(hash); it != logits_.end()) return it->second;  // lost a race
  append_line(to_json(request.prompt, response).dump());
  logits_.insert_or_assign(hash, response);
  return response;
}

std::string RecordReplayProvider::generate_text(const GenerateRequest& request) {
  const std::string hash = prompt_hash(request.prompt);
  {
    std::lock_guard lock(mutex_);
    if (auto it = generations_.find(hash); it != generations_.end()) return it->second;
    if (mode_ == CacheMode::Replay) {
      throw Error(Errc::CacheMiss, "no cached generation for prompt " + hash);
    }
  }
  std::string text = inner_->generate_text(request);
  std::lock_guard lock(mutex_);
  ++inner_calls_;
  json line = {{"kind", "generate"},
               {"prompt_hash", hash},
               {"prompt", request.prompt},
               {"text", text},
               {"provider_id", inner_->id()},
               {"max_tokens", request.max_tokens}};
  append_line(line.dump());
  generations_[hash] = text;
  return text;
}

std::string RecordReplayProvider::id() const {
  return inner_ ? inner_->id() : std::string("replay");
}

std::size_t RecordReplayProvider::inner_calls() const {
  std::lock_guard lock(mutex_);
  return inner_calls_;
}

std::size_t RecordReplayProvider::cached_entries() const {
  std::lock_guard lock(mutex_);
  return logits_.size() + generations_.size();
}

}  // namespace prefprobe
