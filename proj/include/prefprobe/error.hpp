// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace prefprobe {

enum class Errc {
  // core
  NonFiniteScore,
  NonPositiveTemperature,
  InvalidDistribution,
  InvalidClusterSpace,
  EmptyWindow,
  AllZeroWeights,
  ClusterIndexOutOfRange,
  // providers
  UnresolvedPlaceholder,
  TooManyChoices,
  TransportError,
  MalformedResponse,
  AllFloored,
  CacheMiss,
  CacheCorrupt,
  // probing
  EmptySelection,
  UnparseableGeneration,
  InvalidTaxonomy,
  InvalidStrategy,
  ProbeFailed,
  // metrics
  KOutOfRange,
  NoRelevantItems,
  SpaceMismatch,
  KTooLargeForBruteForce,
  // dataset
  UnreadableFile,
  SchemaMismatch,
  EmptyAfterFiltering,
  InsufficientHistory,
  EmptyCorpus,
  // harness
  InvalidConfig,
  JoinMismatch,
  InvalidArgument,
};

std::string_view errc_name(Errc code) noexcept;

/// Single exception type for the library. `location()` carries a 1-based line
/// number for file errors or a 0-based cluster index for probe errors.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message,
        std::optional<std::size_t> location = std::nullopt);

  Errc code() const noexcept { return code_; }
  std::optional<std::size_t> location() const noexcept { return location_; }

 private:
  Errc code_;
  std::optional<std::size_t> location_;
};

}  // namespace prefprobe
