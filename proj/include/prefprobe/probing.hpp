// SPDX-License-Identifier: Apache-2.0
//
// Logit-probing estimators of a user's preference distribution: per-cluster
// yes/no probing, single-pass lettered classification, two-stage
// hierarchical probing, and the direct-generation baseline.
#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "prefprobe/core.hpp"
#include "prefprobe/prompts.hpp"
#include "prefprobe/providers.hpp"
#include "prefprobe/taxonomy.hpp"

namespace prefprobe {

enum class ProbeMethod { Likelihood, Generative, Hierarchical, Direct };

std::string_view probe_method_name(ProbeMethod method) noexcept;
ProbeMethod parse_probe_method(std::string_view text);

/// Per-run accounting: provider calls, prompt tokens and the raw scores.
struct ProbeTrace {
  ProbeMethod method = ProbeMethod::Likelihood;
  std::size_t calls = 0;
  std::size_t prompt_tokens_total = 0;
  std::optional<std::vector<double>> raw_scores;  // absent for direct generation
  std::vector<bool> floored_flags;
  std::optional<std::vector<double>> l1_distribution;
  std::optional<std::vector<std::size_t>> selected_branches;
  std::vector<std::size_t> substituted;  // clusters scored 0.5 after a provider failure
  std::vector<std::string> notes;
};

enum class FailurePolicy { Abort, Substitute };

struct ProbeOptions {
  double temperature = 1.0;
  Horizon horizon = Horizon::LongTerm;
  TokenSet tokens;
  std::size_t max_concurrency = 1;
  FailurePolicy on_error = FailurePolicy::Abort;
  std::string user_id;
  std::size_t alphabet_size = kDefaultAlphabetSize;
  /// Replacement template bodies keyed by kind; defaults otherwise.
  std::map<PromptKind, std::string> template_overrides;

  PromptTemplate prompt_template(PromptKind kind) const;
};

struct DistributionEstimate {
  PreferenceDistribution distribution;
  ProbeTrace trace;
};

struct RankingEstimate {
  Ranking ranking;
  ProbeTrace trace;
};

/// One yes/no probe per cluster; S[j] is the two-way softmax of the mean
/// affirmative and mean negative logits and the estimate is softmax(S/t).
/// Scores are assembled by index, so concurrency does not change the result.
DistributionEstimate likelihood_probe(Provider& provider, const std::string& history,
                                      const SpacePtr& space, const ProbeOptions& options);

/// One lettered multiple-choice prompt; S[j] is the logit of the j-th
/// letter. Throws TooManyChoices when K exceeds the letter alphabet.
DistributionEstimate generative_classify(Provider& provider, const std::string& history,
                                         const SpacePtr& space, const ProbeOptions& options);

struct BranchStrategy {
  enum class Kind { TopB, Threshold, LongTail, All };
  Kind kind = Kind::All;
  std::size_t b = 1;
  double p_min = 0.0;

  static BranchStrategy top_b(std::size_t b) { return {Kind::TopB, b, 0.0}; }
  static BranchStrategy threshold(double p_min) { return {Kind::Threshold, 0, p_min}; }
  static BranchStrategy long_tail(std::size_t b) { return {Kind::LongTail, b, 0.0}; }
  static BranchStrategy all() { return {Kind::All, 0, 0.0}; }

  /// Throws InvalidStrategy when the parameter is missing or out of range.
  void validate(std::size_t k1) const;
};

BranchStrategy parse_branch_strategy(std::string_view kind, std::size_t b, double p_min);

/// top_b: highest b (ties by index); threshold: every p >= p_min, highest
/// first; long_tail: lowest b, lowest first; all: 0..K1-1.
/// Throws EmptySelection when a threshold keeps nothing.
std::vector<std::size_t> select_branches(std::span<const double> p_l1,
                                         const BranchStrategy& strategy);

enum class CombineMode { SumNormalize, MaskedSoftmax };

CombineMode parse_combine_mode(std::string_view text);
std::string_view combine_mode_name(CombineMode mode) noexcept;

/// Scope the L1 branches, probe the children of the selected branches with
/// the conditional prompt, and chain P(L2|L1) * P(L1). Unprobed clusters get
/// exactly zero probability under either combine mode.
DistributionEstimate hierarchical_probe(Provider& provider, const std::string& history,
                                        const Taxonomy& taxonomy, const BranchStrategy& strategy,
                                        CombineMode combine, const ProbeOptions& options);

/// Parses a generated answer into a ranking prefix of at most k clusters:
/// letters separated by commas, spaces or newlines, case-insensitive, first
/// occurrence wins. Throws UnparseableGeneration when no letter is found.
/// `partial` is set when fewer than k letters were recovered.
Ranking parse_generated_ranking(const std::string& text, std::size_t k_clusters, std::size_t k,
                                bool* partial = nullptr);

/// The direct-generation baseline: asks for a top-k list and parses it.
RankingEstimate direct_generate_ranking(Provider& provider, const std::string& history,
                                        const SpacePtr& space, std::size_t k,
                                        const ProbeOptions& options);

}  // namespace prefprobe
