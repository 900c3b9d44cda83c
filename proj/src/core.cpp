// SPDX-License-Identifier: Apache-2.0
#include "prefprobe/core.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <unordered_set>

namespace prefprobe {

std::string normalize_label(std::string_view label) {
  auto begin = label.begin();
  auto end = label.end();
  while (begin != end && std::isspace(static_cast<unsigned char>(*begin))) ++begin;
  while (end != begin && std::isspace(static_cast<unsigned char>(*(end - 1)))) --end;
  std::string out(begin, end);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

ClusterSpace::ClusterSpace(std::vector<std::string> labels) : labels_(std::move(labels)) {
  if (labels_.empty()) {
    throw Error(Errc::InvalidClusterSpace, "cluster space needs at least one label");
  }
  std::unordered_set<std::string> seen;
  keys_.reserve(labels_.size());
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    std::string key = normalize_label(labels_[i]);
    if (key.empty()) {
      throw Error(Errc::InvalidClusterSpace, "empty cluster label", i);
    }
    if (!seen.insert(key).second) {
      throw Error(Errc::InvalidClusterSpace, "duplicate cluster label '" + labels_[i] + "'", i);
    }
    keys_.push_back(std::move(key));
  }
}

std::shared_ptr<const ClusterSpace> ClusterSpace::make(std::vector<std::string> labels) {
  return std::make_shared<const ClusterSpace>(std::move(labels));
}

const std::string& ClusterSpace::label(std::size_t index) const {
  if (index >= labels_.size()) {
    throw Error(Errc::ClusterIndexOutOfRange,
                "cluster index " + std::to_string(index) + " >= K=" +
                    std::to_string(labels_.size()),
                index);
  }
  return labels_[index];
}

std::size_t ClusterSpace::find(std::string_view name) const {
  const std::string key = normalize_label(name);
  auto it = std::find(keys_.begin(), keys_.end(), key);
  return static_cast<std::size_t>(it - keys_.begin());
}

std::size_t ClusterSpace::index_of(std::string_view name) const {
  std::size_t idx = find(name);
  if (idx == size()) {
    throw Error(Errc::ClusterIndexOutOfRange, "unknown cluster '" + std::string(name) + "'");
  }
  return idx;
}

PreferenceDistribution::PreferenceDistribution(SpacePtr space, std::vector<double> probs)
    : space_(std::move(space)), probs_(std::move(probs)) {
  if (!space_) throw Error(Errc::InvalidDistribution, "distribution without a cluster space");
  if (probs_.size() != space_->size()) {
    throw Error(Errc::InvalidDistribution,
                "length " + std::to_string(probs_.size()) + " != K=" +
                    std::to_string(space_->size()));
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < probs_.size(); ++i) {
    if (!std::isfinite(probs_[i]) || probs_[i] < 0.0 || probs_[i] > 1.0 + kSumTolerance) {
      throw Error(Errc::InvalidDistribution, "entry outside [0,1]", i);
    }
    sum += probs_[i];
  }
  if (std::abs(sum - 1.0) > kSumTolerance) {
    throw Error(Errc::InvalidDistribution, "entries sum to " + std::to_string(sum));
  }
}

PreferenceDistribution PreferenceDistribution::uniform(SpacePtr space) {
  const std::size_t k = space->size();
  return PreferenceDistribution(std::move(space),
                                std::vector<double>(k, 1.0 / static_cast<double>(k)));
}

LatentUtility::LatentUtility(SpacePtr space, std::vector<double> scores)
    : space_(std::move(space)), scores_(std::move(scores)) {
  if (!space_ || scores_.size() != space_->size()) {
    throw Error(Errc::InvalidArgument, "utility length does not match cluster space");
  }
  for (std::size_t i = 0; i < scores_.size(); ++i) {
    if (!std::isfinite(scores_[i])) throw Error(Errc::NonFiniteScore, "utility entry", i);
  }
}

std::string_view tie_rule_name(TieRule rule) noexcept {
  switch (rule) {
    case TieRule::AscendingIndex: return "ascending-index";
    case TieRule::Generated: return "generated";
  }
  return "unknown";
}

Ranking Ranking::from_generation(std::vector<std::size_t> prefix, std::size_t k_clusters) {
  std::vector<bool> seen(k_clusters, false);
  for (std::size_t idx : prefix) {
    if (idx >= k_clusters) {
      throw Error(Errc::ClusterIndexOutOfRange, "ranking entry out of range", idx);
    }
    if (seen[idx]) throw Error(Errc::InvalidArgument, "repeated ranking entry", idx);
    seen[idx] = true;
  }
  return Ranking(std::move(prefix), TieRule::Generated);
}

std::vector<double> softmax(std::span<const double> scores, double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw Error(Errc::NonPositiveTemperature, "temperature must be a positive finite real");
  }
  if (scores.empty()) throw Error(Errc::InvalidArgument, "softmax of an empty vector");
  std::vector<double> out(scores.size());
  double shift = -INFINITY;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) throw Error(Errc::NonFiniteScore, "softmax input", i);
    out[i] = scores[i] / temperature;
    shift = std::max(shift, out[i]);
  }
  double total = 0.0;
  for (double& v : out) {
    v = std::exp(v - shift);
    total += v;
  }
  for (double& v : out) v /= total;
  return out;
}

PreferenceDistribution softmax(SpacePtr space, std::span<const double> scores,
                               double temperature) {
  return PreferenceDistribution(std::move(space), softmax(scores, temperature));
}

double two_way_softmax(double a, double b) {
  if (!std::isfinite(a) || !std::isfinite(b)) {
    throw Error(Errc::NonFiniteScore, "two-way softmax input");
  }
  const double m = std::max(a, b);
  const double ea = std::exp(a - m);
  return ea / (ea + std::exp(b - m));
}

PreferenceDistribution empirical_proxy(std::span<const WeightedInteraction> window,
                                       SpacePtr space) {
  if (window.empty()) throw Error(Errc::EmptyWindow, "label window has no interactions");
  const std::size_t k = space->size();
  std::vector<double> mass(k, 0.0);
  double total = 0.0;
  for (const auto& interaction : window) {
    if (!std::isfinite(interaction.weight) || interaction.weight < 0.0) {
      throw Error(Errc::InvalidArgument, "interaction weight must be finite and >= 0");
    }
    for (std::size_t c : interaction.clusters) {
      if (c >= k) throw Error(Errc::ClusterIndexOutOfRange, "interaction cluster", c);
      mass[c] += interaction.weight;
      total += interaction.weight;
    }
  }
  if (total <= 0.0) throw Error(Errc::AllZeroWeights, "label window carries no weight");
  for (double& m : mass) m /= total;
  return PreferenceDistribution(std::move(space), std::move(mass));
}

Ranking rank_descending(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return Ranking(std::move(order), TieRule::AscendingIndex);
}

Ranking rank_descending(const PreferenceDistribution& dist) {
  return rank_descending(dist.probs());
}

Ranking rank_descending(const LatentUtility& utility) {
  return rank_descending(utility.scores());
}

}  // namespace prefprobe
