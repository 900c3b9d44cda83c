// SPDX-License-Identifier: Apache-2.0
//
// Prompt templates and history rendering. The default template bodies are
// golden-file tested; any byte change to them is a behavior change.
#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace prefprobe {

enum class PromptKind {
  LikelihoodProbe,
  GenerativeClassify,
  DirectGenerateTop1,
  DirectGenerateTopK,
  HierarchicalConditional,
};

enum class Horizon { LongTerm, ShortTerm };

std::string_view prompt_kind_name(PromptKind kind) noexcept;
std::string_view horizon_name(Horizon horizon) noexcept;      // "long_term" / "short_term"
std::string_view horizon_phrase(Horizon horizon) noexcept;    // "long-term" / "short-term"
Horizon parse_horizon(std::string_view text);

/// Template text with {HISTORY}, {GENRE}, {CHOICES}, {K}, {L1_PARENT} and
/// {HORIZON} placeholders.
struct PromptTemplate {
  PromptKind kind = PromptKind::LikelihoodProbe;
  Horizon horizon = Horizon::LongTerm;
  std::string body;

  static PromptTemplate standard(PromptKind kind, Horizon horizon);
};

std::string_view default_template_body(PromptKind kind);

/// Values substituted into a template. Empty strings count as unresolved.
struct PromptInputs {
  std::string history;
  std::string genre;
  std::vector<std::string> choices;
  std::optional<std::size_t> k;
  std::string l1_parent;
};

/// Single-token index letters used for lettered choices (A-Z by default).
inline constexpr std::size_t kDefaultAlphabetSize = 26;
char choice_letter(std::size_t index);

/// "A. <label>\nB. <label>..." in the given order.
std::string render_choices(const std::vector<std::string>& labels,
                           std::size_t alphabet_size = kDefaultAlphabetSize);

/// Throws UnresolvedPlaceholder for a missing or unknown placeholder and
/// TooManyChoices when the choice list exceeds the alphabet.
std::string render_prompt(const PromptTemplate& tmpl, const PromptInputs& inputs,
                          std::size_t alphabet_size = kDefaultAlphabetSize);

/// One stanza of a rendered user history.
struct HistoryLine {
  std::string title;
  std::optional<double> rating;    // rating style when set
  std::optional<double> duration;  // duration style otherwise
  std::vector<std::string> clusters;
};

enum class HistoryStyle { Rating, Duration };

/// `Time {t}: rated "{title}" {r}/5 ({c1, c2})` or
/// `Time {t}: watched item in ({c1, c2}) for {d}s`, joined by ";\n" with
/// t counting from 1.
std::string render_history(const std::vector<HistoryLine>& lines, HistoryStyle style);

/// Shortest round-trippable decimal for a rating or duration ("5", "4.5").
std::string format_number(double value);

}  // namespace prefprobe
