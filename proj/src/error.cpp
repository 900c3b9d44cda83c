// SPDX-License-Identifier: Apache-2.0
#include "prefprobe/error.hpp"

namespace prefprobe {

std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::NonFiniteScore: return "NonFiniteScore";
    case Errc::NonPositiveTemperature: return "NonPositiveTemperature";
    case Errc::InvalidDistribution: return "InvalidDistribution";
    case Errc::InvalidClusterSpace: return "InvalidClusterSpace";
    case Errc::EmptyWindow: return "EmptyWindow";
    case Errc::AllZeroWeights: return "AllZeroWeights";
    case Errc::ClusterIndexOutOfRange: return "ClusterIndexOutOfRange";
    case Errc::UnresolvedPlaceholder: return "UnresolvedPlaceholder";
    case Errc::TooManyChoices: return "TooManyChoices";
    case Errc::TransportError: return "TransportError";
    case Errc::MalformedResponse: return "MalformedResponse";
    case Errc::AllFloored: return "AllFloored";
    case Errc::CacheMiss: return "CacheMiss";
    case Errc::CacheCorrupt: return "CacheCorrupt";
    case Errc::EmptySelection: return "EmptySelection";
    case Errc::UnparseableGeneration: return "UnparseableGeneration";
    case Errc::InvalidTaxonomy: return "InvalidTaxonomy";
    case Errc::InvalidStrategy: return "InvalidStrategy";
    case Errc::ProbeFailed: return "ProbeFailed";
    case Errc::KOutOfRange: return "KOutOfRange";
    case Errc::NoRelevantItems: return "NoRelevantItems";
    case Errc::SpaceMismatch: return "SpaceMismatch";
    case Errc::KTooLargeForBruteForce: return "KTooLargeForBruteForce";
    case Errc::UnreadableFile: return "UnreadableFile";
    case Errc::SchemaMismatch: return "SchemaMismatch";
    case Errc::EmptyAfterFiltering: return "EmptyAfterFiltering";
    case Errc::InsufficientHistory: return "InsufficientHistory";
    case Errc::EmptyCorpus: return "EmptyCorpus";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::JoinMismatch: return "JoinMismatch";
    case Errc::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

Error::Error(Errc code, const std::string& message,
             std::optional<std::size_t> location)
    : std::runtime_error(std::string(errc_name(code)) + ": " + message),
      code_(code),
      location_(location) {}

}  // namespace prefprobe
