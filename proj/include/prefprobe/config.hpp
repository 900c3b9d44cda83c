// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "prefprobe/dataset.hpp"
#include "prefprobe/metrics.hpp"
#include "prefprobe/probing.hpp"
#include "prefprobe/providers.hpp"

namespace prefprobe {

enum class ProviderKind { Oracle, Http, Replay };

struct ProviderSettings {
  ProviderKind kind = ProviderKind::Oracle;
  std::filesystem::path cache;  // record target or replay source
  // oracle
  std::filesystem::path truth;
  /// "truth": q from the simulated trajectory at the label start;
  /// "label": ln of the sample's own label (zero mass sinks to the bottom).
  std::string utilities = "truth";
  double noise_sigma = 0.0;
  double negative_baseline = 0.0;
  double p_swap = 0.0;
  bool negate = false;  // anti-isotonic control
  // http
  HttpProviderConfig http;
};

struct SimulationSettings {
  std::size_t clusters = 19;
  std::size_t users = 100;
  std::size_t days = 30;
  std::size_t interactions_per_day = 5;
  std::int64_t start_timestamp = 1700006400;  // 2023-11-15T00:00:00Z
  std::string drift = "static";               // static | linear_interpolate | random_walk
  double utility_scale = 1.5;
  double walk_sigma = 0.1;
};

struct EvaluateSettings {
  std::vector<std::size_t> k_list{1, 5, 10, 20};
  double relevance_threshold = 0.0;
  RecallDenominator recall = RecallDenominator::PaperK;
  bool binary_gains = false;
  double head_mass = 0.8;
  std::size_t periods = 4;  // report-evolution
};

struct CertifySettings {
  std::size_t clusters = 5;
  std::size_t trials = 1000;
};

/// Typed view of the TOML experiment file. Keys mirror the tables:
/// [run] [space] [data] [data.schema] [split] [probe] [probe.templates]
/// [provider] [evaluate] [simulate] [certify].
struct ExperimentConfig {
  // [run]
  std::optional<std::uint64_t> seed;
  std::filesystem::path output_dir = "out";
  std::size_t max_concurrency = 1;
  bool continue_on_failure = false;
  std::size_t max_samples = 0;  // 0 = all

  // [space]
  std::filesystem::path vocabulary;
  std::filesystem::path taxonomy;

  // [data]
  std::filesystem::path corpus;
  InputFormat format = InputFormat::Jsonl;
  IngestSchema schema;
  HistoryStyle history_style = HistoryStyle::Rating;
  LabelWeighting label_weighting = LabelWeighting::Unit;
  SessionRule session;

  SplitSpec split;

  // [probe]
  ProbeMethod method = ProbeMethod::Likelihood;
  ProbeOptions probe;
  CombineMode combine = CombineMode::SumNormalize;
  BranchStrategy strategy = BranchStrategy::all();
  std::optional<std::size_t> direct_k;

  ProviderSettings provider;
  EvaluateSettings evaluate;
  SimulationSettings simulate;
  CertifySettings certify;

  /// Canonical JSON of the experiment-defining keys (run.output_dir,
  /// run.max_concurrency and provider.max_in_flight excluded).
  std::string canonical;

  /// Parses TOML text, then applies `key.path=value` overrides whose values
  /// are TOML literals (bare words are taken as strings). Throws
  /// InvalidConfig.
  static ExperimentConfig parse(const std::string& toml_text,
                                const std::vector<std::string>& overrides = {});
  static ExperimentConfig load(const std::filesystem::path& path,
                               const std::vector<std::string>& overrides = {});

  /// SHA-256 of `canonical`; stamps every output row.
  std::string digest() const;

  /// k_list ascending, max k <= K, seed set for oracle runs, referenced
  /// files present.
  void validate_for_run(std::size_t k_clusters) const;
};

}  // namespace prefprobe
