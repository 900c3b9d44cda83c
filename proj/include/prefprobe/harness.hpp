// SPDX-License-Identifier: Apache-2.0
//
// End-to-end runs behind the CLI: simulate -> probe -> evaluate, plus the
// ranking-optimality certification, group evolution and SFT export. Every
// command reads an ExperimentConfig and writes into run.output_dir.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "prefprobe/config.hpp"
#include "prefprobe/dataset.hpp"
#include "prefprobe/metrics.hpp"

namespace prefprobe {

enum ExitCode : int {
  kExitOk = 0,
  kExitError = 1,
  kExitValidation = 2,
  kExitPartial = 3,
  kExitCertification = 4,
};

/// Maps an error code onto the CLI exit code.
int exit_code_for(Errc code) noexcept;

// ---------------------------------------------------------------------------
// simulate

struct SimulationOutput {
  std::filesystem::path corpus;      // corpus.jsonl
  std::filesystem::path truth;       // truth.jsonl, one q trajectory per user
  std::filesystem::path vocabulary;  // clusters.txt
  std::size_t interactions = 0;
};

/// Samples every interaction's cluster from softmax(q_day) of that user's
/// (possibly drifting) latent utility. Same seed, same bytes.
SimulationOutput cmd_simulate(const ExperimentConfig& config);

/// Per-user daily utilities as written by cmd_simulate.
struct TruthTrajectory {
  std::int64_t start_timestamp = 0;
  std::vector<std::vector<double>> daily;  // days x K

  /// Utility in force at `timestamp` (clamped to the simulated range).
  const std::vector<double>& at(std::int64_t timestamp) const;
};

std::map<std::string, TruthTrajectory> read_truth(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// probe

struct ProbeRunSummary {
  std::size_t samples = 0;
  std::size_t completed = 0;  // rows in probe.jsonl
  std::size_t resumed = 0;    // rows taken from an earlier checkpoint
  std::size_t failures = 0;
  std::size_t total_calls = 0;  // calls issued by this invocation
  int exit_code = kExitOk;
};

enum class CacheUse { None, Record, Replay };

/// Builds samples, probes each user (fan-out up to run.max_concurrency) and
/// writes samples.jsonl, probe.jsonl and failures.jsonl. Each finished user
/// is checkpointed to probe.partial.jsonl; a rerun with the same config
/// digest only probes the missing users.
ProbeRunSummary cmd_probe(const ExperimentConfig& config, CacheUse cache = CacheUse::None);

// ---------------------------------------------------------------------------
// evaluate

struct SampleRow {
  std::string user_id;
  std::string method;
  std::string horizon;
  std::size_t context_sessions = 0;
  std::size_t calls = 0;
  std::size_t prompt_tokens = 0;
  std::string skipped_reason;  // non-empty rows carry no metrics
  std::map<std::size_t, double> ndcg, precision, recall;
  std::optional<double> js_div;
  std::map<std::size_t, double> tail_ndcg, tail_precision, tail_recall;
};

struct AggregateRow {
  std::string method;
  std::string horizon;
  std::optional<std::size_t> context_sessions;  // nullopt = all windows
  MetricsReport metrics;
};

struct RunReport {
  std::string digest;
  std::vector<SampleRow> rows;
  std::vector<AggregateRow> aggregates;
  std::vector<std::size_t> head, tail;
  MetricsReport long_tail;
  std::size_t total_calls = 0;
  std::size_t total_prompt_tokens = 0;
};

/// Joins samples.jsonl with probe.jsonl (users listed in failures.jsonl are
/// carried as skipped rows), computes every metric per sample and writes
/// report.json and rows.csv. The aggregates are re-derived from rows.csv
/// before returning. Throws JoinMismatch.
RunReport cmd_evaluate(const ExperimentConfig& config);

/// Unweighted means of the non-skipped rows.
MetricsReport aggregate_rows(const std::vector<const SampleRow*>& rows,
                             const std::vector<std::size_t>& k_list);

/// Reads rows.csv back and returns its overall aggregate.
MetricsReport aggregate_rows_csv(const std::filesystem::path& path,
                                 const std::vector<std::size_t>& k_list);

// ---------------------------------------------------------------------------
// certify-lemma

struct CertifyFailure {
  std::size_t trial = 0;
  std::string metric;
  std::size_t k = 0;
  double achieved = 0.0;
  double best = 0.0;
};

struct CertifyReport {
  std::size_t clusters = 0;
  std::size_t trials = 0;
  std::size_t passed = 0;
  std::vector<CertifyFailure> failures;  // first failing check per trial
};

inline constexpr std::size_t kCertifyMaxK = 6;

/// Random q ~ U(-3, 3) per trial, zero-noise oracle, likelihood probe; every
/// metric at every k must equal the brute-force optimum within 1e-12 with
/// gains softmax(q) and relevance softmax(q) > 1/K. Writes certify.json.
/// Throws KTooLargeForBruteForce when K > 6.
CertifyReport cmd_certify_lemma(const ExperimentConfig& config);

// ---------------------------------------------------------------------------
// report-evolution / export-sft

/// Writes evolution.csv (period, then one column per cluster) and
/// evolution.dat (whitespace separated, '#' header) for external plotting.
EvolutionMatrix cmd_report_evolution(const ExperimentConfig& config);

/// Writes sft.jsonl from the configured corpus and split.
std::filesystem::path cmd_export_sft(const ExperimentConfig& config);

/// Shortest decimal that round-trips to the same double.
std::string format_double(double value);

}  // namespace prefprobe
