// SPDX-License-Identifier: Apache-2.0
//
// Ranking and divergence metrics. Rankings may be prefixes (direct
// generation); positions past the end of a prefix contribute nothing.
#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "prefprobe/core.hpp"

namespace prefprobe {

/// DCG@k / IDCG@k with graded gains and log2(r+1) discounts; 0 when IDCG is 0.
double ndcg_at_k(std::span<const std::size_t> order, std::span<const double> gains, std::size_t k);
double ndcg_at_k(const Ranking& ranking, std::span<const double> gains, std::size_t k);

double precision_at_k(std::span<const std::size_t> order, const std::vector<bool>& relevant,
                      std::size_t k);
double precision_at_k(const Ranking& ranking, const std::vector<bool>& relevant, std::size_t k);

/// PaperK divides the relevant hit count by K; StandardR by the number of
/// relevant clusters.
enum class RecallDenominator { PaperK, StandardR };
std::string_view recall_denominator_name(RecallDenominator d) noexcept;

double recall_at_k(std::span<const std::size_t> order, const std::vector<bool>& relevant,
                   std::size_t k, RecallDenominator denominator = RecallDenominator::PaperK);
double recall_at_k(const Ranking& ranking, const std::vector<bool>& relevant, std::size_t k,
                   RecallDenominator denominator = RecallDenominator::PaperK);

/// Base-2 Jensen-Shannon divergence, in [0, 1].
double js_divergence(const PreferenceDistribution& p, const PreferenceDistribution& q);
double js_divergence(std::span<const double> p, std::span<const double> q);

enum class RankMetric { Ndcg, Precision, Recall };

struct BruteForceBest {
  double score = 0.0;
  std::vector<std::size_t> order;
};

inline constexpr std::size_t kBruteForceMaxK = 8;

/// Exhaustive maximum of a metric over all K! orderings (K <= 8).
BruteForceBest brute_force_best(std::span<const double> gains, const std::vector<bool>& relevant,
                                std::size_t k, RankMetric metric,
                                RecallDenominator denominator = RecallDenominator::PaperK);

/// relevant[i] = proxy(i) > threshold.
std::vector<bool> relevance_from_proxy(const PreferenceDistribution& proxy, double threshold = 0.0);

/// Mean metrics over a set of samples.
struct MetricsReport {
  std::vector<std::size_t> k_list;
  std::map<std::size_t, double> ndcg;
  std::map<std::size_t, double> precision;
  std::map<std::size_t, double> recall;
  std::optional<double> js_div;
  std::size_t n_samples = 0;
  std::vector<std::string> notes;
};

}  // namespace prefprobe
