// SPDX-License-Identifier: Apache-2.0
#include "prefprobe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace prefprobe {
namespace {

void check_k(std::size_t k, std::size_t n) {
  if (k < 1 || k > n) {
    throw Error(Errc::KOutOfRange,
                "k=" + std::to_string(k) + " outside [1, K=" + std::to_string(n) + "]");
  }
}

std::size_t hits_in_top_k(std::span<const std::size_t> order, const std::vector<bool>& relevant,
                          std::size_t k) {
  std::size_t hits = 0;
  const std::size_t depth = std::min(k, order.size());
  for (std::size_t r = 0; r < depth; ++r) {
    if (order[r] >= relevant.size()) {
      throw Error(Errc::ClusterIndexOutOfRange, "ranking entry", order[r]);
    }
    if (relevant[order[r]]) ++hits;
  }
  return hits;
}

double discount(std::size_t rank0) { return 1.0 / std::log2(static_cast<double>(rank0) + 2.0); }

}  // namespace

double ndcg_at_k(std::span<const std::size_t> order, std::span<const double> gains, std::size_t k) {
  check_k(k, gains.size());
  for (double g : gains) {
    if (!std::isfinite(g) || g < 0.0) {
      throw Error(Errc::InvalidArgument, "gains must be finite and non-negative");
    }
  }
  double dcg = 0.0;
  const std::size_t depth = std::min(k, order.size());
  for (std::size_t r = 0; r < depth; ++r) {
    if (order[r] >= gains.size()) throw Error(Errc::ClusterIndexOutOfRange, "ranking entry", order[r]);
    dcg += gains[order[r]] * discount(r);
  }
  std::vector<double> ideal(gains.begin(), gains.end());
  std::sort(ideal.begin(), ideal.end(), std::greater<>());
  double idcg = 0.0;
  for (std::size_t r = 0; r < k; ++r) idcg += ideal[r] * discount(r);
  if (idcg == 0.0) return 0.0;
  return std::min(1.0, dcg / idcg);
}

double ndcg_at_k(const Ranking& ranking, std::span<const double> gains, std::size_t k) {
  return ndcg_at_k(ranking.order(), gains, k);
}

double precision_at_k(std::span<const std::size_t> order, const std::vector<bool>& relevant,
                      std::size_t k) {
  check_k(k, relevant.size());
  return static_cast<double>(hits_in_top_k(order, relevant, k)) / static_cast<double>(k);
}

double precision_at_k(const Ranking& ranking, const std::vector<bool>& relevant, std::size_t k) {
  return precision_at_k(ranking.order(), relevant, k);
}

std::string_view recall_denominator_name(RecallDenominator d) noexcept {
  return d == RecallDenominator::PaperK ? "paper_K" : "standard_R";
}

double recall_at_k(std::span<const std::size_t> order, const std::vector<bool>& relevant,
                   std::size_t k, RecallDenominator denominator) {
  check_k(k, relevant.size());
  const double hits = static_cast<double>(hits_in_top_k(order, relevant, k));
  if (denominator == RecallDenominator::PaperK) {
    return hits / static_cast<double>(relevant.size());
  }
  const auto r = std::count(relevant.begin(), relevant.end(), true);
  if (r == 0) throw Error(Errc::NoRelevantItems, "standard recall needs a relevant cluster");
  return hits / static_cast<double>(r);
}

double recall_at_k(const Ranking& ranking, const std::vector<bool>& relevant, std::size_t k,
                   RecallDenominator denominator) {
  return recall_at_k(ranking.order(), relevant, k, denominator);
}

double js_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw Error(Errc::SpaceMismatch, "distributions differ in length");
  double js = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0.0) js += 0.5 * p[i] * std::log2(p[i] / m);
    if (q[i] > 0.0) js += 0.5 * q[i] * std::log2(q[i] / m);
  }
  return std::clamp(js, 0.0, 1.0);
}

double js_divergence(const PreferenceDistribution& p, const PreferenceDistribution& q) {
  if (p.space_ptr() != q.space_ptr() && !(p.space() == q.space())) {
    throw Error(Errc::SpaceMismatch, "distributions live on different cluster spaces");
  }
  return js_divergence(p.probs(), q.probs());
}

BruteForceBest brute_force_best(std::span<const double> gains, const std::vector<bool>& relevant,
                                std::size_t k, RankMetric metric, RecallDenominator denominator) {
  const std::size_t n = metric == RankMetric::Ndcg ? gains.size() : relevant.size();
  if (n > kBruteForceMaxK) {
    throw Error(Errc::KTooLargeForBruteForce,
                "K=" + std::to_string(n) + " exceeds the brute-force limit of " +
                    std::to_string(kBruteForceMaxK));
  }
  check_k(k, n);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  BruteForceBest best{-1.0, {}};
  do {
    double score = 0.0;
    switch (metric) {
      case RankMetric::Ndcg: score = ndcg_at_k(perm, gains, k); break;
      case RankMetric::Precision: score = precision_at_k(perm, relevant, k); break;
      case RankMetric::Recall: score = recall_at_k(perm, relevant, k, denominator); break;
    }
    if (score > best.score) best = {score, perm};
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

std::vector<bool> relevance_from_proxy(const PreferenceDistribution& proxy, double threshold) {
  if (!(threshold >= 0.0)) throw Error(Errc::InvalidArgument, "relevance threshold must be >= 0");
  std::vector<bool> out(proxy.size());
  for (std::size_t i = 0; i < proxy.size(); ++i) out[i] = proxy[i] > threshold;
  return out;
}

}  // namespace prefprobe
