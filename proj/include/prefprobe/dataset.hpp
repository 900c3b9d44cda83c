// SPDX-License-Identifier: Apache-2.0
//
// Interaction logs -> sessions -> temporal context/label splits -> labelled
// evaluation samples, plus SFT export and corpus-level summaries.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "prefprobe/core.hpp"
#include "prefprobe/prompts.hpp"

namespace prefprobe {

struct InteractionRecord {
  std::string user_id;
  std::string item_id;
  std::int64_t timestamp = 0;  // epoch seconds
  std::vector<std::size_t> clusters;
  double weight = 1.0;  // rating or play duration
  std::optional<std::string> title;
};

struct Session {
  std::vector<InteractionRecord> records;
  std::int64_t start = 0;
  std::int64_t end = 0;
};

struct UserTimeline {
  std::string user_id;
  std::vector<InteractionRecord> records;  // ascending by timestamp
};

// ---------------------------------------------------------------------------
// Ingestion

enum class InputFormat { Csv, Jsonl };
InputFormat parse_input_format(std::string_view text);

/// Maps column (CSV header) or field (JSONL) names onto record fields.
/// Empty `weight` / `title` / `item` mean "not present".
struct IngestSchema {
  std::string user = "user_id";
  std::string item = "item_id";
  std::string timestamp = "timestamp";
  std::string clusters = "clusters";
  std::string weight;
  std::string title;
  char delimiter = ',';
  char cluster_separator = '|';
};

struct Reject {
  std::size_t row = 0;  // 1-based data row (CSV, header excluded) or line (JSONL)
  std::string reason;
};

struct IngestResult {
  std::vector<InteractionRecord> records;  // sorted by (user_id, timestamp)
  std::vector<Reject> rejects;
};

/// One name per line; line number (from 0) is the cluster index.
SpacePtr load_cluster_vocabulary(const std::filesystem::path& path);
SpacePtr parse_cluster_vocabulary(const std::string& text);

/// Throws UnreadableFile, SchemaMismatch (required column absent) or
/// EmptyAfterFiltering. Bad rows are reported, never dropped silently.
IngestResult ingest(const std::filesystem::path& path, InputFormat format,
                    const IngestSchema& schema, const ClusterSpace& space);
IngestResult ingest_text(const std::string& text, InputFormat format, const IngestSchema& schema,
                         const ClusterSpace& space);

std::vector<UserTimeline> group_by_user(std::span<const InteractionRecord> sorted_records);

// ---------------------------------------------------------------------------
// Sessions and splits

struct SessionRule {
  enum class Kind { CalendarDay, Gap };
  Kind kind = Kind::CalendarDay;
  std::int64_t gap_minutes = 30;

  static SessionRule calendar_day() { return {Kind::CalendarDay, 0}; }
  static SessionRule gap(std::int64_t minutes) { return {Kind::Gap, minutes}; }
};

std::string session_rule_name(const SessionRule& rule);

/// calendar_day groups by UTC day; gap starts a new session when the
/// inter-arrival time exceeds the gap. Input must be sorted by time.
std::vector<Session> sessionize(std::span<const InteractionRecord> records, const SessionRule& rule);

struct SplitSpec {
  enum class Mode { TemporalFraction, FixedRange };
  Mode mode = Mode::TemporalFraction;
  double fraction = 0.8;
  std::int64_t context_days = 30;
  std::int64_t label_days = 14;
  std::size_t context_sessions = 8;
  Horizon horizon = Horizon::LongTerm;
  /// Global cut for fixed_range; per user (label window = final label_days
  /// UTC days of the user's history) when unset.
  std::optional<std::int64_t> cut_timestamp;

  void validate() const;
};

struct SplitResult {
  std::vector<Session> context;            // most recent context_sessions
  std::vector<InteractionRecord> label;    // label window records
};

/// temporal_fraction: the first ceil(fraction * n) sessions form the context
/// pool; the label is the rest (long term) or the first held-out session
/// (short term). Throws InsufficientHistory when either side is empty.
SplitResult split(std::span<const Session> sessions, const SplitSpec& spec);

// ---------------------------------------------------------------------------
// Evaluation samples

enum class LabelWeighting { Unit, Weight };
LabelWeighting parse_label_weighting(std::string_view text);

struct EvalSample {
  std::string user_id;
  std::vector<Session> context;
  PreferenceDistribution label;
  Horizon horizon = Horizon::LongTerm;
  std::size_t context_sessions = 0;
  std::int64_t label_start = 0;  // earliest label-window timestamp
};

struct SampleBuildOptions {
  SessionRule sessions;
  SplitSpec split;
  LabelWeighting weighting = LabelWeighting::Unit;
};

struct SampleSet {
  std::vector<EvalSample> samples;
  std::vector<std::pair<std::string, std::string>> skipped;  // (user, reason)
};

/// One sample per user whose split succeeds; others are listed in `skipped`.
/// Throws InsufficientHistory when no user yields a sample.
SampleSet build_eval_samples(std::span<const UserTimeline> timelines, const SpacePtr& space,
                             const SampleBuildOptions& options);

/// History block for prompts: "User History:" is not included; this is the
/// stanza list substituted for {HISTORY}.
std::string render_sample_history(const EvalSample& sample, const ClusterSpace& space,
                                  HistoryStyle style);
HistoryStyle parse_history_style(std::string_view text);

/// Writes {"prompt": history, "label": {cluster: probability}} per line.
/// Probabilities are rounded to 6 decimals, then divided by their sum.
void export_sft_pairs(std::span<const EvalSample> samples, const ClusterSpace& space,
                      HistoryStyle style, const std::filesystem::path& path);

struct SftPair {
  std::string prompt;
  PreferenceDistribution label;
};

std::vector<SftPair> read_sft_pairs(const std::filesystem::path& path, const SpacePtr& space);

/// Rounded-and-renormalized label values exactly as export writes them.
std::vector<double> sft_label_values(std::span<const double> probs);

// ---------------------------------------------------------------------------
// Corpus summaries

struct TailSegments {
  std::vector<std::size_t> head;  // mass order, largest first
  std::vector<std::size_t> tail;
};

/// Smallest prefix of clusters (by global mass, ties by index) that reaches
/// `head_mass` of the total is the head; the remaining clusters with
/// nonzero mass are the tail. Throws EmptyCorpus.
TailSegments long_tail_segment(std::span<const InteractionRecord> records, std::size_t k_clusters,
                               double head_mass = 0.8,
                               LabelWeighting weighting = LabelWeighting::Unit);
TailSegments long_tail_from_mass(std::span<const double> mass, double head_mass = 0.8);

struct EvolutionMatrix {
  std::vector<std::vector<double>> rows;  // periods x K, each row a distribution
  std::vector<std::size_t> contributors;  // users contributing to each period
  std::vector<std::pair<std::string, std::string>> skipped;
};

/// Splits every user's span into `periods` equal bins, takes the empirical
/// proxy per bin and averages across users with interactions in that bin.
EvolutionMatrix group_evolution(std::span<const UserTimeline> timelines, const SpacePtr& space,
                                std::size_t periods);

}  // namespace prefprobe
