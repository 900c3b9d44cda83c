// SPDX-License-Identifier: Apache-2.0
#include "prefprobe/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <sstream>

namespace prefprobe {
namespace {

using nlohmann::json;

constexpr std::int64_t kSecondsPerDay = 86400;

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::UnreadableFile, "cannot read " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::string line;
  std::istringstream in(text);
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

// RFC 4180-style field splitting: quoted fields may contain the delimiter
// and doubled quotes.
std::vector<std::string> split_csv_row(const std::string& line, char delimiter) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        field.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field.push_back(c);
      }
    } else if (c == '"' && field.empty()) {
      quoted = true;
    } else if (c == delimiter) {
      fields.push_back(std::move(field));
      field.clear();
    } else {
      field.push_back(c);
    }
  }
  fields.push_back(std::move(field));
  return fields;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

std::int64_t parse_timestamp(const std::string& text) {
  const std::string t = trim(text);
  std::int64_t value = 0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), value);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty()) {
    throw std::invalid_argument("bad timestamp '" + text + "'");
  }
  if (value < 0) throw std::invalid_argument("negative timestamp");
  return value;
}

double parse_weight(const std::string& text) {
  const std::string t = trim(text);
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), value);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty()) {
    throw std::invalid_argument("bad weight '" + text + "'");
  }
  if (!std::isfinite(value) || value < 0.0) throw std::invalid_argument("weight must be finite and >= 0");
  return value;
}

std::vector<std::size_t> resolve_clusters(const std::vector<std::string>& names,
                                          const ClusterSpace& space) {
  std::vector<std::size_t> out;
  for (const auto& raw : names) {
    const std::string name = trim(raw);
    if (name.empty()) continue;
    const std::size_t idx = space.find(name);
    if (idx == space.size()) throw std::invalid_argument("unknown cluster '" + name + "'");
    if (std::find(out.begin(), out.end(), idx) == out.end()) out.push_back(idx);
  }
  if (out.empty()) throw std::invalid_argument("record has no clusters");
  return out;
}

std::vector<std::string> split_on(const std::string& text, char sep) {
  std::vector<std::string> parts;
  std::string part;
  std::istringstream in(text);
  while (std::getline(in, part, sep)) parts.push_back(part);
  return parts;
}

void finish(IngestResult& result) {
  std::stable_sort(result.records.begin(), result.records.end(),
                   [](const InteractionRecord& a, const InteractionRecord& b) {
                     if (a.user_id != b.user_id) return a.user_id < b.user_id;
                     return a.timestamp < b.timestamp;
                   });
  if (result.records.empty()) {
    throw Error(Errc::EmptyAfterFiltering,
                "no valid records (" + std::to_string(result.rejects.size()) + " rejected)");
  }
}

IngestResult ingest_csv(const std::string& text, const IngestSchema& schema,
                        const ClusterSpace& space) {
  IngestResult result;
  const auto lines = split_lines(text);
  std::size_t first = 0;
  while (first < lines.size() && trim(lines[first]).empty()) ++first;
  if (first == lines.size()) throw Error(Errc::EmptyAfterFiltering, "input has no rows");

  const auto header = split_csv_row(lines[first], schema.delimiter);
  auto column = [&](const std::string& name, bool required) -> std::optional<std::size_t> {
    if (name.empty()) {
      if (required) throw Error(Errc::SchemaMismatch, "required column not configured");
      return std::nullopt;
    }
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (trim(header[i]) == name) return i;
    }
    throw Error(Errc::SchemaMismatch, "column '" + name + "' not in header");
  };
  const std::size_t user_col = *column(schema.user, true);
  const std::size_t time_col = *column(schema.timestamp, true);
  const std::size_t cluster_col = *column(schema.clusters, true);
  const auto item_col = column(schema.item, false);
  const auto weight_col = column(schema.weight, false);
  const auto title_col = column(schema.title, false);

  std::size_t row = 0;
  for (std::size_t i = first + 1; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    ++row;
    const auto fields = split_csv_row(lines[i], schema.delimiter);
    try {
      if (fields.size() != header.size()) {
        throw std::invalid_argument("expected " + std::to_string(header.size()) + " fields, got " +
                                    std::to_string(fields.size()));
      }
      InteractionRecord r;
      r.user_id = trim(fields[user_col]);
      if (r.user_id.empty()) throw std::invalid_argument("empty user id");
      r.timestamp = parse_timestamp(fields[time_col]);
      r.clusters = resolve_clusters(split_on(fields[cluster_col], schema.cluster_separator), space);
      if (item_col) r.item_id = fields[*item_col];
      if (weight_col) r.weight = parse_weight(fields[*weight_col]);
      if (title_col) r.title = fields[*title_col];
      result.records.push_back(std::move(r));
    } catch (const std::exception& e) {
      result.rejects.push_back({row, e.what()});
    }
  }
  finish(result);
  return result;
}

std::string json_scalar_string(const json& value) {
  if (value.is_string()) return value.get<std::string>();
  if (value.is_number_integer()) return std::to_string(value.get<std::int64_t>());
  if (value.is_number()) return format_number(value.get<double>());
  throw std::invalid_argument("expected a string or number");
}

IngestResult ingest_jsonl(const std::string& text, const IngestSchema& schema,
                          const ClusterSpace& space) {
  if (schema.user.empty() || schema.timestamp.empty() || schema.clusters.empty()) {
    throw Error(Errc::SchemaMismatch, "required field not configured");
  }
  IngestResult result;
  const auto lines = split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    const std::size_t row = i + 1;
    try {
      const json doc = json::parse(lines[i]);
      if (!doc.is_object()) throw std::invalid_argument("line is not a JSON object");
      InteractionRecord r;
      r.user_id = json_scalar_string(doc.at(schema.user));
      if (r.user_id.empty()) throw std::invalid_argument("empty user id");
      const json& ts = doc.at(schema.timestamp);
      if (ts.is_number_integer()) {
        if (ts.get<std::int64_t>() < 0) throw std::invalid_argument("negative timestamp");
        r.timestamp = ts.get<std::int64_t>();
      } else {
        r.timestamp = parse_timestamp(json_scalar_string(ts));
      }
      const json& clusters = doc.at(schema.clusters);
      std::vector<std::string> names;
      if (clusters.is_array()) {
        for (const auto& c : clusters) names.push_back(c.get<std::string>());
      } else {
        names = split_on(clusters.get<std::string>(), schema.cluster_separator);
      }
      r.clusters = resolve_clusters(names, space);
      if (!schema.item.empty() && doc.contains(schema.item)) {
        r.item_id = json_scalar_string(doc[schema.item]);
      }
      if (!schema.weight.empty() && doc.contains(schema.weight)) {
        const json& w = doc[schema.weight];
        r.weight = w.is_number() ? w.get<double>() : parse_weight(w.get<std::string>());
        if (!std::isfinite(r.weight) || r.weight < 0.0) {
          throw std::invalid_argument("weight must be finite and >= 0");
        }
      }
      if (!schema.title.empty() && doc.contains(schema.title)) {
        r.title = json_scalar_string(doc[schema.title]);
      }
      result.records.push_back(std::move(r));
    } catch (const std::exception& e) {
      result.rejects.push_back({row, e.what()});
    }
  }
  finish(result);
  return result;
}

std::vector<WeightedInteraction> to_window(std::span<const InteractionRecord> records,
                                           LabelWeighting weighting) {
  std::vector<WeightedInteraction> window;
  window.reserve(records.size());
  for (const auto& r : records) {
    window.push_back({r.clusters, weighting == LabelWeighting::Weight ? r.weight : 1.0});
  }
  return window;
}

}  // namespace

InputFormat parse_input_format(std::string_view text) {
  if (text == "csv") return InputFormat::Csv;
  if (text == "jsonl") return InputFormat::Jsonl;
  throw Error(Errc::InvalidArgument, "unknown input format '" + std::string(text) + "'");
}

SpacePtr parse_cluster_vocabulary(const std::string& text) {
  std::vector<std::string> labels;
  for (auto& line : split_lines(text)) {
    if (!trim(line).empty()) labels.push_back(trim(line));
  }
  return ClusterSpace::make(std::move(labels));
}

SpacePtr load_cluster_vocabulary(const std::filesystem::path& path) {
  return parse_cluster_vocabulary(read_file(path));
}

IngestResult ingest_text(const std::string& text, InputFormat format, const IngestSchema& schema,
                         const ClusterSpace& space) {
  return format == InputFormat::Csv ? ingest_csv(text, schema, space)
                                    : ingest_jsonl(text, schema, space);
}

IngestResult ingest(const std::filesystem::path& path, InputFormat format,
                    const IngestSchema& schema, const ClusterSpace& space) {
  return ingest_text(read_file(path), format, schema, space);
}

std::vector<UserTimeline> group_by_user(std::span<const InteractionRecord> sorted_records) {
  std::vector<UserTimeline> out;
  for (const auto& r : sorted_records) {
    if (out.empty() || out.back().user_id != r.user_id) out.push_back({r.user_id, {}});
    out.back().records.push_back(r);
  }
  return out;
}

std::string session_rule_name(const SessionRule& rule) {
  return rule.kind == SessionRule::Kind::CalendarDay
             ? std::string("calendar_day")
             : "gap(" + std::to_string(rule.gap_minutes) + "min)";
}

std::vector<Session> sessionize(std::span<const InteractionRecord> records,
                                const SessionRule& rule) {
  std::vector<Session> sessions;
  for (const auto& r : records) {
    bool fresh = sessions.empty();
    if (!fresh) {
      const Session& last = sessions.back();
      if (r.timestamp < last.end) {
        throw Error(Errc::InvalidArgument, "sessionize needs records sorted by time");
      }
      if (rule.kind == SessionRule::Kind::CalendarDay) {
        fresh = r.timestamp / kSecondsPerDay != last.end / kSecondsPerDay;
      } else {
        fresh = r.timestamp - last.end > rule.gap_minutes * 60;
      }
    }
    if (fresh) sessions.push_back({{}, r.timestamp, r.timestamp});
    sessions.back().records.push_back(r);
    sessions.back().end = r.timestamp;
  }
  return sessions;
}

void SplitSpec::validate() const {
  if (mode == Mode::TemporalFraction && !(fraction > 0.0 && fraction < 1.0)) {
    throw Error(Errc::InvalidConfig, "split fraction must lie in (0,1)");
  }
  if (mode == Mode::FixedRange && (context_days < 1 || label_days < 1)) {
    throw Error(Errc::InvalidConfig, "context_days and label_days must be positive");
  }
  if (context_sessions < 1) throw Error(Errc::InvalidConfig, "context_sessions must be >= 1");
}

SplitResult split(std::span<const Session> sessions, const SplitSpec& spec) {
  spec.validate();
  SplitResult out;
  if (spec.mode == SplitSpec::Mode::TemporalFraction) {
    const std::size_t n = sessions.size();
    // 1e-9 absorbs representation error such as 0.8 * 10 = 8.000000000000002.
    const auto pool = static_cast<std::size_t>(std::ceil(spec.fraction * static_cast<double>(n) - 1e-9));
    if (n < 2 || pool < 1 || pool >= n) {
      throw Error(Errc::InsufficientHistory,
                  std::to_string(n) + " sessions cannot form both a context and a label pool");
    }
    const std::size_t from = pool > spec.context_sessions ? pool - spec.context_sessions : 0;
    out.context.assign(sessions.begin() + static_cast<std::ptrdiff_t>(from),
                       sessions.begin() + static_cast<std::ptrdiff_t>(pool));
    const std::size_t label_end = spec.horizon == Horizon::ShortTerm ? pool + 1 : n;
    for (std::size_t s = pool; s < label_end; ++s) {
      out.label.insert(out.label.end(), sessions[s].records.begin(), sessions[s].records.end());
    }
    return out;
  }

  if (sessions.empty()) throw Error(Errc::InsufficientHistory, "user has no sessions");
  std::int64_t cut = 0;
  if (spec.cut_timestamp) {
    cut = *spec.cut_timestamp;
  } else {
    const std::int64_t last_day_end = (sessions.back().end / kSecondsPerDay + 1) * kSecondsPerDay;
    cut = last_day_end - spec.label_days * kSecondsPerDay;
  }
  const std::int64_t context_from = cut - spec.context_days * kSecondsPerDay;
  const std::int64_t label_to = cut + spec.label_days * kSecondsPerDay;
  std::vector<Session> pool;
  for (const auto& s : sessions) {
    if (s.start >= context_from && s.end < cut) pool.push_back(s);
    for (const auto& r : s.records) {
      if (r.timestamp >= cut && r.timestamp < label_to) out.label.push_back(r);
    }
  }
  if (pool.empty() || out.label.empty()) {
    throw Error(Errc::InsufficientHistory, "fixed-range windows leave an empty side");
  }
  const std::size_t from = pool.size() > spec.context_sessions ? pool.size() - spec.context_sessions : 0;
  out.context.assign(pool.begin() + static_cast<std::ptrdiff_t>(from), pool.end());
  return out;
}

LabelWeighting parse_label_weighting(std::string_view text) {
  if (text == "unit") return LabelWeighting::Unit;
  if (text == "weight") return LabelWeighting::Weight;
  throw Error(Errc::InvalidArgument, "unknown label weighting '" + std::string(text) + "'");
}

SampleSet build_eval_samples(std::span<const UserTimeline> timelines, const SpacePtr& space,
                             const SampleBuildOptions& options) {
  options.split.validate();
  SampleSet out;
  for (const auto& timeline : timelines) {
    try {
      const auto sessions = sessionize(timeline.records, options.sessions);
      SplitResult parts = split(sessions, options.split);
      const auto window = to_window(parts.label, options.weighting);
      PreferenceDistribution label = empirical_proxy(window, space);
      std::int64_t label_start = parts.label.front().timestamp;
      out.samples.push_back(EvalSample{timeline.user_id, std::move(parts.context), std::move(label),
                                       options.split.horizon, options.split.context_sessions,
                                       label_start});
    } catch (const Error& e) {
      out.skipped.emplace_back(timeline.user_id, e.what());
    }
  }
  if (out.samples.empty()) {
    throw Error(Errc::InsufficientHistory,
                "no user produced an evaluation sample (" + std::to_string(out.skipped.size()) +
                    " skipped)");
  }
  return out;
}

HistoryStyle parse_history_style(std::string_view text) {
  if (text == "rating") return HistoryStyle::Rating;
  if (text == "duration") return HistoryStyle::Duration;
  throw Error(Errc::InvalidArgument, "unknown history style '" + std::string(text) + "'");
}

std::string render_sample_history(const EvalSample& sample, const ClusterSpace& space,
                                  HistoryStyle style) {
  std::vector<HistoryLine> lines;
  for (const auto& session : sample.context) {
    for (const auto& r : session.records) {
      HistoryLine line;
      line.title = r.title.value_or(r.item_id);
      line.rating = r.weight;
      line.duration = r.weight;
      for (std::size_t c : r.clusters) line.clusters.push_back(space.label(c));
      lines.push_back(std::move(line));
    }
  }
  return render_history(lines, style);
}

std::vector<double> sft_label_values(std::span<const double> probs) {
  std::vector<double> rounded(probs.size());
  double total = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    rounded[i] = std::round(probs[i] * 1e6) / 1e6;
    total += rounded[i];
  }
  for (double& v : rounded) v /= total;
  return rounded;
}

void export_sft_pairs(std::span<const EvalSample> samples, const ClusterSpace& space,
                      HistoryStyle style, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::UnreadableFile, "cannot write " + path.string());
  for (const auto& sample : samples) {
    const auto values = sft_label_values(sample.label.probs());
    json label = json::object();
    for (std::size_t i = 0; i < values.size(); ++i) label[space.label(i)] = values[i];
    json line = {{"prompt", render_sample_history(sample, space, style)}, {"label", label}};
    out << line.dump() << '\n';
  }
  if (!out) throw Error(Errc::UnreadableFile, "failed writing " + path.string());
}

std::vector<SftPair> read_sft_pairs(const std::filesystem::path& path, const SpacePtr& space) {
  std::vector<SftPair> pairs;
  const auto lines = split_lines(read_file(path));
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    try {
      const json doc = json::parse(lines[i]);
      std::vector<double> probs(space->size(), 0.0);
      for (const auto& [name, value] : doc.at("label").items()) {
        probs[space->index_of(name)] = value.get<double>();
      }
      pairs.push_back({doc.at("prompt").get<std::string>(),
                       PreferenceDistribution(space, std::move(probs))});
    } catch (const std::exception& e) {
      throw Error(Errc::SchemaMismatch,
                  path.string() + ":" + std::to_string(i + 1) + ": " + e.what(), i + 1);
    }
  }
  return pairs;
}

TailSegments long_tail_segment(std::span<const InteractionRecord> records, std::size_t k_clusters,
                               double head_mass, LabelWeighting weighting) {
  if (!(head_mass > 0.0 && head_mass < 1.0)) {
    throw Error(Errc::InvalidArgument, "head_mass must lie in (0,1)");
  }
  std::vector<double> mass(k_clusters, 0.0);
  double total = 0.0;
  for (const auto& r : records) {
    const double w = weighting == LabelWeighting::Weight ? r.weight : 1.0;
    for (std::size_t c : r.clusters) {
      if (c >= k_clusters) throw Error(Errc::ClusterIndexOutOfRange, "record cluster", c);
      mass[c] += w;
      total += w;
    }
  }
  if (total <= 0.0) throw Error(Errc::EmptyCorpus, "corpus carries no interaction mass");
  return long_tail_from_mass(mass, head_mass);
}

TailSegments long_tail_from_mass(std::span<const double> mass, double head_mass) {
  double total = 0.0;
  for (double m : mass) total += m;
  if (total <= 0.0) throw Error(Errc::EmptyCorpus, "corpus carries no interaction mass");
  const std::vector<std::size_t> order = rank_descending(mass).order();
  TailSegments out;
  double covered = 0.0;
  const double target = head_mass * total * (1.0 - 1e-12);
  for (std::size_t c : order) {
    if (mass[c] <= 0.0) break;
    if (covered < target) {
      out.head.push_back(c);
      covered += mass[c];
    } else {
      out.tail.push_back(c);
    }
  }
  return out;
}

EvolutionMatrix group_evolution(std::span<const UserTimeline> timelines, const SpacePtr& space,
                                std::size_t periods) {
  if (periods < 1) throw Error(Errc::InvalidArgument, "periods must be >= 1");
  const std::size_t k = space->size();
  EvolutionMatrix out;
  out.rows.assign(periods, std::vector<double>(k, 0.0));
  out.contributors.assign(periods, 0);
  for (const auto& timeline : timelines) {
    const auto& records = timeline.records;
    if (records.size() < periods || records.back().timestamp <= records.front().timestamp) {
      out.skipped.emplace_back(timeline.user_id,
                               "InsufficientHistory: needs >= " + std::to_string(periods) +
                                   " interactions over a positive time span");
      continue;
    }
    const std::int64_t first = records.front().timestamp;
    const std::int64_t span = records.back().timestamp - first;
    std::vector<std::vector<WeightedInteraction>> bins(periods);
    for (const auto& r : records) {
      const auto bin = std::min<std::size_t>(
          periods - 1, static_cast<std::size_t>((r.timestamp - first) *
                                                static_cast<std::int64_t>(periods) / span));
      bins[bin].push_back({r.clusters, 1.0});
    }
    for (std::size_t p = 0; p < periods; ++p) {
      if (bins[p].empty()) continue;
      const PreferenceDistribution d = empirical_proxy(bins[p], space);
      for (std::size_t i = 0; i < k; ++i) out.rows[p][i] += d[i];
      ++out.contributors[p];
    }
  }
  for (std::size_t p = 0; p < periods; ++p) {
    const double total = std::accumulate(out.rows[p].begin(), out.rows[p].end(), 0.0);
    if (total > 0.0) {
      for (double& v : out.rows[p]) v /= total;
    }
  }
  return out;
}

}  // namespace prefprobe
