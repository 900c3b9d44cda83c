// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "prefprobe/core.hpp"
#include "prefprobe/providers.hpp"

namespace prefprobe {

/// Two-level L1 -> L2 hierarchy. Every L2 cluster belongs to exactly one L1
/// branch and every branch has at least one child.
class Taxonomy {
 public:
  /// `branches` pairs each L1 label with the L2 indices it owns. Throws
  /// InvalidTaxonomy unless the children partition 0..K-1.
  Taxonomy(SpacePtr l2_space,
           std::vector<std::pair<std::string, std::vector<std::size_t>>> branches);

  /// Parses {"L1 name": ["L2 name", ...], ...}, keeping the file's key order
  /// as the L1 index order and resolving L2 names against `l2_space`.
  static Taxonomy from_json(const std::string& text, SpacePtr l2_space);
  static Taxonomy load(const std::filesystem::path& path, SpacePtr l2_space);

  const ClusterSpace& l1_space() const noexcept { return *l1_space_; }
  const SpacePtr& l1_space_ptr() const noexcept { return l1_space_; }
  const ClusterSpace& l2_space() const noexcept { return *l2_space_; }
  const SpacePtr& l2_space_ptr() const noexcept { return l2_space_; }
  std::size_t l1_size() const noexcept { return children_.size(); }
  const std::vector<std::size_t>& children(std::size_t l1) const { return children_.at(l1); }
  std::size_t parent(std::size_t l2) const { return parent_.at(l2); }

 private:
  SpacePtr l1_space_;
  SpacePtr l2_space_;
  std::vector<std::vector<std::size_t>> children_;
  std::vector<std::size_t> parent_;
};

/// Oracle utilities for hierarchical probing derived from flat utilities:
/// a branch scores the log-sum-exp of its children and a child keeps its own
/// utility conditionally. Both stages stay isotonic in the flat utilities.
OracleUtilities derive_hierarchical_utilities(std::vector<double> flat, const Taxonomy& taxonomy);

}  // namespace prefprobe
