// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "prefprobe/metrics.hpp"

using namespace prefprobe;

namespace {

SpacePtr space_of(std::size_t k) {
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < k; ++i) labels.push_back("c" + std::to_string(i));
  return ClusterSpace::make(labels);
}

// Straight from the textbook definitions, no shared code with the library.
double ref_dcg(const std::vector<std::size_t>& order, const std::vector<double>& gains, std::size_t k) {
  double dcg = 0.0;
  for (std::size_t r = 0; r < std::min(k, order.size()); ++r) {
    dcg += gains[order[r]] / std::log2(static_cast<double>(r) + 2.0);
  }
  return dcg;
}

double ref_ndcg(const std::vector<std::size_t>& order, const std::vector<double>& gains, std::size_t k) {
  std::vector<std::size_t> ideal(gains.size());
  std::iota(ideal.begin(), ideal.end(), std::size_t{0});
  double best = 0.0;
  do {
    best = std::max(best, ref_dcg(ideal, gains, k));
  } while (std::next_permutation(ideal.begin(), ideal.end()));
  return best == 0.0 ? 0.0 : ref_dcg(order, gains, k) / best;
}

double ref_hits(const std::vector<std::size_t>& order, const std::vector<bool>& rel, std::size_t k) {
  double hits = 0;
  for (std::size_t r = 0; r < std::min(k, order.size()); ++r) hits += rel[order[r]];
  return hits;
}

std::vector<double> random_simplex(std::mt19937_64& rng, std::size_t k, bool sparse) {
  std::exponential_distribution<double> e(1.0);
  std::bernoulli_distribution zero(0.3);
  std::vector<double> p(k);
  for (double& v : p) v = sparse && zero(rng) ? 0.0 : e(rng);
  if (std::accumulate(p.begin(), p.end(), 0.0) == 0.0) p[0] = 1.0;
  const double total = std::accumulate(p.begin(), p.end(), 0.0);
  for (double& v : p) v /= total;
  return p;
}

}  // namespace

TEST_CASE("ndcg examples") {
  const std::vector<double> gains{3, 2, 1};
  const std::vector<std::size_t> worst{2, 1, 0};
  // tests/oracles/golden_values.py
  CHECK(std::fabs(ndcg_at_k(worst, gains, 3) - 0.78999800424603589818) < 1e-12);
  CHECK(std::fabs(ref_dcg(worst, gains, 3) - 3.7618595071429148742) < 1e-12);
  CHECK(std::fabs(ref_ndcg(worst, gains, 3) - 0.78999800424603589818) < 1e-12);
  const std::vector<std::size_t> ideal{0, 1, 2};
  for (std::size_t k = 1; k <= 3; ++k) CHECK(ndcg_at_k(ideal, gains, k) == 1.0);
  const std::vector<double> zeros{0, 0, 0};
  CHECK(ndcg_at_k(ideal, zeros, 2) == 0.0);
}

TEST_CASE("precision and recall examples") {
  const std::vector<bool> a_only{true, false, false};
  CHECK(precision_at_k(std::vector<std::size_t>{1, 0, 2}, a_only, 2) == 0.5);
  CHECK(precision_at_k(std::vector<std::size_t>{1, 0, 2}, {true, true, true}, 1) == 1.0);
  CHECK(precision_at_k(std::vector<std::size_t>{1, 0, 2}, {false, false, false}, 3) == 0.0);

  const std::vector<bool> ab{true, true, false, false};
  const std::vector<std::size_t> acbd{0, 2, 1, 3};
  CHECK(recall_at_k(acbd, ab, 2, RecallDenominator::PaperK) == 0.25);
  CHECK(recall_at_k(acbd, ab, 2, RecallDenominator::StandardR) == 0.5);
  CHECK(recall_at_k(acbd, ab, 4, RecallDenominator::PaperK) == 0.5);
  CHECK(recall_at_k(std::vector<std::size_t>{3, 2, 1, 0}, ab, 4, RecallDenominator::PaperK) == 0.5);
}

TEST_CASE("prefix rankings score missing positions as zero") {
  const auto r = Ranking::from_generation({1}, 3);
  const std::vector<double> gains{3, 2, 1};
  CHECK(std::fabs(ndcg_at_k(r, gains, 3) - (2.0 / (3 + 2 / std::log2(3.0) + 0.5))) < 1e-12);
  CHECK(precision_at_k(r, {false, true, true}, 2) == 0.5);
}

TEST_CASE("js divergence examples") {
  const std::vector<double> p{0.7, 0.3}, q{0.5, 0.5};
  CHECK(std::fabs(js_divergence(p, q) - 0.030305144839322329886) < 1e-12);
  CHECK(js_divergence(p, p) == 0.0);
  CHECK(js_divergence(std::vector<double>{1, 0}, std::vector<double>{0, 1}) == 1.0);
}

TEST_CASE("relevance from proxy") {
  auto sp = space_of(3);
  PreferenceDistribution p(sp, {0.75, 0.25, 0.0});
  CHECK(relevance_from_proxy(p) == std::vector<bool>{true, true, false});
  CHECK(relevance_from_proxy(p, 0.3) == std::vector<bool>{true, false, false});
  CHECK(relevance_from_proxy(PreferenceDistribution::uniform(sp), 1.0) ==
        std::vector<bool>{false, false, false});
}

TEST_CASE("metrics agree with an independent recomputation") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t k_clusters = 1 + trial % 6;
    const auto gains = random_simplex(rng, k_clusters, true);
    std::vector<bool> rel(k_clusters);
    for (std::size_t i = 0; i < k_clusters; ++i) rel[i] = gains[i] > 0.1;
    std::vector<std::size_t> order(k_clusters);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t k = 1 + rng() % k_clusters;
    const double n_rel = static_cast<double>(std::count(rel.begin(), rel.end(), true));
    CHECK(std::fabs(ndcg_at_k(order, gains, k) - ref_ndcg(order, gains, k)) < 1e-12);
    CHECK(std::fabs(precision_at_k(order, rel, k) - ref_hits(order, rel, k) / k) < 1e-12);
    CHECK(std::fabs(recall_at_k(order, rel, k) - ref_hits(order, rel, k) / k_clusters) < 1e-12);
    if (n_rel > 0) {
      CHECK(std::fabs(recall_at_k(order, rel, k, RecallDenominator::StandardR) -
                      ref_hits(order, rel, k) / n_rel) < 1e-12);
    }
  }
}

TEST_CASE("brute force best is the descending-gain order") {
  const std::vector<double> gains{3, 2, 1};
  const auto best = brute_force_best(gains, {true, true, true}, 3, RankMetric::Ndcg);
  CHECK(best.score == 1.0);
  CHECK(best.order == std::vector<std::size_t>{0, 1, 2});
  CHECK(brute_force_best(gains, {false, true, false}, 1, RankMetric::Precision).score == 1.0);

  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const auto g = random_simplex(rng, 5, false);
    std::vector<bool> rel(5);
    for (std::size_t i = 0; i < 5; ++i) rel[i] = g[i] > 0.2;
    const auto order = rank_descending(g).order();
    for (std::size_t k = 1; k <= 5; ++k) {
      CHECK(std::fabs(brute_force_best(g, rel, k, RankMetric::Ndcg).score - ndcg_at_k(order, g, k)) < 1e-12);
      CHECK(std::fabs(brute_force_best(g, rel, k, RankMetric::Precision).score -
                      precision_at_k(order, rel, k)) < 1e-12);
      CHECK(std::fabs(brute_force_best(g, rel, k, RankMetric::Recall).score -
                      recall_at_k(order, rel, k)) < 1e-12);
    }
  }
  std::vector<double> nine(9, 1.0 / 9);
  try {
    brute_force_best(nine, std::vector<bool>(9, true), 3, RankMetric::Ndcg);
    FAIL("expected an Error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::KTooLargeForBruteForce);
  }
}

TEST_CASE("js divergence is symmetric and bounded") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t k = 2 + trial % 9;
    const auto p = random_simplex(rng, k, trial % 2 == 0);
    const auto q = random_simplex(rng, k, trial % 3 == 0);
    const double pq = js_divergence(p, q);
    CHECK(std::fabs(pq - js_divergence(q, p)) < 1e-12);
    CHECK(pq >= 0.0);
    CHECK(pq <= 1.0);
    CHECK(std::fabs(js_divergence(p, p)) < 1e-12);
  }
}

TEST_CASE("ndcg never drops when an adjacent pair is put in gain order") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t k_clusters = 2 + trial % 7;
    const auto g = random_simplex(rng, k_clusters, true);
    std::vector<std::size_t> order(k_clusters);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t r = rng() % (k_clusters - 1);
    if (g[order[r]] >= g[order[r + 1]]) continue;
    auto better = order;
    std::swap(better[r], better[r + 1]);
    for (std::size_t k = 1; k <= k_clusters; ++k) {
      CHECK(ndcg_at_k(better, g, k) >= ndcg_at_k(order, g, k) - 1e-15);
    }
  }
}
