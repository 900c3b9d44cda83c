// SPDX-License-Identifier: Apache-2.0
#include "prefprobe/prompts.hpp"

#include <charconv>
#include <cmath>

#include "prefprobe/error.hpp"

namespace prefprobe {
namespace {

constexpr std::string_view kLikelihoodBody =
    "User History:\n"
    "{HISTORY}\n"
    "\n"
    "Considering the user's {HORIZON} preferences from their movie rating history, "
    "do they like {GENRE} movies? Answer in \"Yes\" or \"No\".";

constexpr std::string_view kGenerativeBody =
    "User History:\n"
    "{HISTORY}\n"
    "\n"
    "{CHOICES}\n"
    "\n"
    "Considering the user's {HORIZON} preferences from their movie rating history, "
    "which genre do they like MOST? Answer with the letter only (A, B, C, etc.):";

constexpr std::string_view kDirectTop1Body =
    "User History:\n"
    "{HISTORY}\n"
    "\n"
    "{CHOICES}\n"
    "\n"
    "Question: Based on the user's {HORIZON} preferences from their entire history, "
    "tell me the cluster they like the MOST. Answer with the letter only (A, B, C, etc.):";

constexpr std::string_view kDirectTopKBody =
    "User History:\n"
    "{HISTORY}\n"
    "\n"
    "{CHOICES}\n"
    "\n"
    "Question: Based on the user's {HORIZON} preferences from their entire history, "
    "rank the top {K} genres they like the most. Answer with the letter only (A, B, C, etc.):";

constexpr std::string_view kConditionalBody =
    "User History:\n"
    "{HISTORY}\n"
    "\n"
    "Given the user is interested in {L1_PARENT}, considering their {HORIZON} preferences, "
    "do they like {GENRE}? Answer in \"Yes\" or \"No\".";

[[noreturn]] void unresolved(std::string_view name) {
  throw Error(Errc::UnresolvedPlaceholder, "no value for {" + std::string(name) + "}");
}

}  // namespace

std::string_view prompt_kind_name(PromptKind kind) noexcept {
  switch (kind) {
    case PromptKind::LikelihoodProbe: return "likelihood_probe";
    case PromptKind::GenerativeClassify: return "generative_classify";
    case PromptKind::DirectGenerateTop1: return "direct_generate_top1";
    case PromptKind::DirectGenerateTopK: return "direct_generate_topk";
    case PromptKind::HierarchicalConditional: return "hierarchical_conditional";
  }
  return "unknown";
}

std::string_view horizon_name(Horizon horizon) noexcept {
  return horizon == Horizon::LongTerm ? "long_term" : "short_term";
}

std::string_view horizon_phrase(Horizon horizon) noexcept {
  return horizon == Horizon::LongTerm ? "long-term" : "short-term";
}

Horizon parse_horizon(std::string_view text) {
  if (text == "long_term" || text == "long-term") return Horizon::LongTerm;
  if (text == "short_term" || text == "short-term") return Horizon::ShortTerm;
  throw Error(Errc::InvalidArgument, "unknown horizon '" + std::string(text) + "'");
}

std::string_view default_template_body(PromptKind kind) {
  switch (kind) {
    case PromptKind::LikelihoodProbe: return kLikelihoodBody;
    case PromptKind::GenerativeClassify: return kGenerativeBody;
    case PromptKind::DirectGenerateTop1: return kDirectTop1Body;
    case PromptKind::DirectGenerateTopK: return kDirectTopKBody;
    case PromptKind::HierarchicalConditional: return kConditionalBody;
  }
  return kLikelihoodBody;
}

PromptTemplate PromptTemplate::standard(PromptKind kind, Horizon horizon) {
  return PromptTemplate{kind, horizon, std::string(default_template_body(kind))};
}

char choice_letter(std::size_t index) {
  if (index >= kDefaultAlphabetSize) {
    throw Error(Errc::TooManyChoices, "no single-letter index for choice " + std::to_string(index));
  }
  return static_cast<char>('A' + index);
}

std::string render_choices(const std::vector<std::string>& labels, std::size_t alphabet_size) {
  if (labels.size() > alphabet_size || labels.size() > kDefaultAlphabetSize) {
    throw Error(Errc::TooManyChoices, std::to_string(labels.size()) +
                                          " choices exceed the single-token alphabet of " +
                                          std::to_string(alphabet_size));
  }
  std::string out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (i) out.push_back('\n');
    out.push_back(choice_letter(i));
    out += ". ";
    out += labels[i];
  }
  return out;
}

std::string render_prompt(const PromptTemplate& tmpl, const PromptInputs& inputs,
                          std::size_t alphabet_size) {
  std::string out;
  out.reserve(tmpl.body.size() + inputs.history.size() + 64);
  std::size_t pos = 0;
  while (pos < tmpl.body.size()) {
    const std::size_t open = tmpl.body.find('{', pos);
    if (open == std::string::npos) {
      out.append(tmpl.body, pos, std::string::npos);
      break;
    }
    const std::size_t close = tmpl.body.find('}', open);
    if (close == std::string::npos) {
      throw Error(Errc::UnresolvedPlaceholder, "unterminated placeholder in template");
    }
    out.append(tmpl.body, pos, open - pos);
    const std::string_view name(tmpl.body.data() + open + 1, close - open - 1);
    if (name == "HISTORY") {
      if (inputs.history.empty()) unresolved(name);
      out += inputs.history;
    } else if (name == "GENRE") {
      if (inputs.genre.empty()) unresolved(name);
      out += inputs.genre;
    } else if (name == "CHOICES") {
      if (inputs.choices.empty()) unresolved(name);
      out += render_choices(inputs.choices, alphabet_size);
    } else if (name == "K") {
      if (!inputs.k) unresolved(name);
      out += std::to_string(*inputs.k);
    } else if (name == "L1_PARENT") {
      if (inputs.l1_parent.empty()) unresolved(name);
      out += inputs.l1_parent;
    } else if (name == "HORIZON") {
      out += horizon_phrase(tmpl.horizon);
    } else {
      unresolved(name);
    }
    pos = close + 1;
  }
  return out;
}

std::string format_number(double value) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

std::string render_history(const std::vector<HistoryLine>& lines, HistoryStyle style) {
  std::string out;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const HistoryLine& line = lines[i];
    if (i) out += ";\n";
    std::string clusters;
    for (std::size_t c = 0; c < line.clusters.size(); ++c) {
      if (c) clusters += ", ";
      clusters += line.clusters[c];
    }
    out += "Time " + std::to_string(i + 1) + ": ";
    if (style == HistoryStyle::Rating) {
      out += "rated \"" + line.title + "\" " + format_number(line.rating.value_or(0.0)) +
             "/5 (" + clusters + ")";
    } else {
      out += "watched item in (" + clusters + ") for " +
             format_number(line.duration.value_or(0.0)) + "s";
    }
  }
  return out;
}

}  // namespace prefprobe
