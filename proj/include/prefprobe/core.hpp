// SPDX-License-Identifier: Apache-2.0
//
// Preference-simplex primitives: the cluster lattice, distributions over it,
// latent utilities, and the descending-sort ranking rule.
#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "prefprobe/error.hpp"

namespace prefprobe {

/// Ordered, fixed set of K preference clusters. The index of a label is its
/// identity for the lifetime of an experiment.
class ClusterSpace {
 public:
  /// Throws InvalidClusterSpace on empty input, empty labels, or labels that
  /// collide after trimming and case-folding.
  explicit ClusterSpace(std::vector<std::string> labels);

  static std::shared_ptr<const ClusterSpace> make(std::vector<std::string> labels);

  std::size_t size() const noexcept { return labels_.size(); }
  const std::string& label(std::size_t index) const;
  const std::vector<std::string>& labels() const noexcept { return labels_; }

  /// Lookup by name using the same trim/case-fold normalization as the
  /// uniqueness check. Returns size() when not found.
  std::size_t find(std::string_view name) const;
  std::size_t index_of(std::string_view name) const;  // throws ClusterIndexOutOfRange

  bool operator==(const ClusterSpace& other) const { return labels_ == other.labels_; }

 private:
  std::vector<std::string> labels_;
  std::vector<std::string> keys_;
};

using SpacePtr = std::shared_ptr<const ClusterSpace>;

std::string normalize_label(std::string_view label);

/// Probability vector on the simplex over a ClusterSpace.
class PreferenceDistribution {
 public:
  static constexpr double kSumTolerance = 1e-9;

  /// Validates non-negativity, length, and sum-to-one (InvalidDistribution).
  PreferenceDistribution(SpacePtr space, std::vector<double> probs);

  static PreferenceDistribution uniform(SpacePtr space);

  const ClusterSpace& space() const noexcept { return *space_; }
  const SpacePtr& space_ptr() const noexcept { return space_; }
  std::span<const double> probs() const noexcept { return probs_; }
  double operator[](std::size_t i) const { return probs_.at(i); }
  std::size_t size() const noexcept { return probs_.size(); }

 private:
  SpacePtr space_;
  std::vector<double> probs_;
};

/// Hidden per-cluster attractiveness scores; finite, unbounded.
class LatentUtility {
 public:
  LatentUtility(SpacePtr space, std::vector<double> scores);

  const ClusterSpace& space() const noexcept { return *space_; }
  const SpacePtr& space_ptr() const noexcept { return space_; }
  std::span<const double> scores() const noexcept { return scores_; }
  double operator[](std::size_t i) const { return scores_.at(i); }
  std::size_t size() const noexcept { return scores_.size(); }

 private:
  SpacePtr space_;
  std::vector<double> scores_;
};

enum class TieRule { AscendingIndex, Generated };

std::string_view tie_rule_name(TieRule rule) noexcept;

/// Cluster indices ordered by preference, highest first. A full permutation
/// when produced by rank_descending; a duplicate-free prefix when parsed from
/// generated text.
class Ranking {
 public:
  const std::vector<std::size_t>& order() const noexcept { return order_; }
  TieRule tie_rule() const noexcept { return tie_rule_; }
  std::size_t size() const noexcept { return order_.size(); }

  /// Prefix recovered from a model's free-text answer. Throws
  /// ClusterIndexOutOfRange / InvalidArgument on out-of-range or repeated
  /// entries.
  static Ranking from_generation(std::vector<std::size_t> prefix, std::size_t k_clusters);

  bool operator==(const Ranking& other) const { return order_ == other.order_; }

 private:
  Ranking(std::vector<std::size_t> order, TieRule rule)
      : order_(std::move(order)), tie_rule_(rule) {}

  friend Ranking rank_descending(std::span<const double> scores);

  std::vector<std::size_t> order_;
  TieRule tie_rule_;
};

/// exp(s_i/t) / sum_j exp(s_j/t), shifted by the maximum before
/// exponentiation. Throws NonFiniteScore / NonPositiveTemperature.
std::vector<double> softmax(std::span<const double> scores, double temperature = 1.0);
PreferenceDistribution softmax(SpacePtr space, std::span<const double> scores,
                               double temperature = 1.0);

/// exp(a) / (exp(a) + exp(b)) computed without overflow.
double two_way_softmax(double a, double b);

/// One interaction in a label window: the clusters it touches and its weight.
struct WeightedInteraction {
  std::vector<std::size_t> clusters;
  double weight = 1.0;
};

/// Normalized (weighted) interaction frequency. A multi-label interaction
/// contributes its full weight to each of its clusters.
PreferenceDistribution empirical_proxy(std::span<const WeightedInteraction> window,
                                       SpacePtr space);

/// Stable descending sort; exact ties go to the lower index.
Ranking rank_descending(std::span<const double> scores);
Ranking rank_descending(const PreferenceDistribution& dist);
Ranking rank_descending(const LatentUtility& utility);

}  // namespace prefprobe
