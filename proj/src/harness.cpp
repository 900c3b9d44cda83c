// SPDX-License-Identifier: Apache-2.0
#include "prefprobe/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <tuple>

#include <json.hpp>

#include "prefprobe/hashing.hpp"
#include "prefprobe/parallel.hpp"
#include "prefprobe/probing.hpp"
#include "prefprobe/taxonomy.hpp"

namespace prefprobe {

using ordered_json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

constexpr std::int64_t kDay = 86400;

void write_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::UnreadableFile, "cannot write " + tmp.string());
    out << content;
    if (!out) throw Error(Errc::UnreadableFile, "write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::UnreadableFile, "cannot read " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

std::vector<ordered_json> read_jsonl(const fs::path& path) {
  std::vector<ordered_json> out;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    try {
      out.push_back(ordered_json::parse(lines[i]));
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::SchemaMismatch, path.string() + ": " + e.what(), i + 1);
    }
  }
  return out;
}

std::string zero_pad(std::size_t value, std::size_t width) {
  std::string s = std::to_string(value);
  if (s.size() < width) s.insert(0, width - s.size(), '0');
  return s;
}

std::size_t digits(std::size_t n) { return std::to_string(n).size(); }

std::uint64_t require_seed(const ExperimentConfig& config) {
  if (!config.seed) throw Error(Errc::InvalidConfig, "run.seed is mandatory for this command");
  return *config.seed;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        fields.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        fields.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back();
    } else {
      fields.back() += c;
    }
  }
  return fields;
}

struct Inputs {
  SpacePtr space;
  std::vector<InteractionRecord> records;
  std::vector<EvalSample> samples;
  std::vector<std::pair<std::string, std::string>> skipped;
};

Inputs load_inputs(const ExperimentConfig& config) {
  Inputs in;
  in.space = load_cluster_vocabulary(config.vocabulary);
  auto ingested = ingest(config.corpus, config.format, config.schema, *in.space);
  in.records = std::move(ingested.records);
  const auto timelines = group_by_user(in.records);
  auto set = build_eval_samples(timelines, in.space,
                                {config.session, config.split, config.label_weighting});
  in.samples = std::move(set.samples);
  in.skipped = std::move(set.skipped);
  if (config.max_samples > 0 && in.samples.size() > config.max_samples) {
    // Seeded subset, kept in corpus order.
    std::vector<std::size_t> idx(in.samples.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::mt19937_64 rng(mix64(config.seed.value_or(0) ^ 0x5a4d504c45ULL));
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(config.max_samples);
    std::sort(idx.begin(), idx.end());
    std::vector<EvalSample> kept;
    kept.reserve(idx.size());
    for (auto i : idx) kept.push_back(std::move(in.samples[i]));
    in.samples = std::move(kept);
  }
  return in;
}

std::vector<double> utilities_from_label(std::span<const double> label) {
  double min_log = 0.0;
  bool any = false;
  for (double p : label) {
    if (p > 0.0) {
      min_log = any ? std::min(min_log, std::log(p)) : std::log(p);
      any = true;
    }
  }
  std::vector<double> u(label.size());
  for (std::size_t i = 0; i < label.size(); ++i) {
    u[i] = label[i] > 0.0 ? std::log(label[i]) : min_log - 10.0;
  }
  return u;
}

std::shared_ptr<Provider> make_provider(const ExperimentConfig& config, const Inputs& in,
                                        const Taxonomy* taxonomy, CacheUse cache) {
  if (cache == CacheUse::Replay) {
    return std::make_shared<RecordReplayProvider>(nullptr, config.provider.cache, CacheMode::Replay);
  }
  std::shared_ptr<Provider> base;
  switch (config.provider.kind) {
    case ProviderKind::Oracle: {
      OracleConfig oc;
      oc.noise_sigma = config.provider.noise_sigma;
      oc.seed = require_seed(config);
      oc.negative_baseline = config.provider.negative_baseline;
      oc.p_swap = config.provider.p_swap;
      oc.tokens = config.probe.tokens;
      auto oracle = std::make_shared<OracleProvider>(oc);
      std::map<std::string, TruthTrajectory> truth;
      if (config.provider.utilities == "truth") truth = read_truth(config.provider.truth);
      for (const auto& s : in.samples) {
        std::vector<double> flat;
        if (config.provider.utilities == "label") {
          flat = utilities_from_label(s.label.probs());
        } else {
          const auto it = truth.find(s.user_id);
          if (it == truth.end()) {
            throw Error(Errc::InvalidConfig, "no truth trajectory for user '" + s.user_id + "'");
          }
          flat = it->second.at(s.label_start);
        }
        if (flat.size() != in.space->size()) {
          throw Error(Errc::SpaceMismatch, "truth for user '" + s.user_id + "' has the wrong length");
        }
        if (config.provider.negate) {
          for (double& v : flat) v = -v;
        }
        if (taxonomy) {
          oracle->set_user(s.user_id, derive_hierarchical_utilities(std::move(flat), *taxonomy));
        } else {
          oracle->set_user(s.user_id, OracleUtilities{std::move(flat), {}, {}});
        }
      }
      base = oracle;
      break;
    }
    case ProviderKind::Http:
      base = std::make_shared<HttpProvider>(config.provider.http);
      break;
    case ProviderKind::Replay:
      return std::make_shared<RecordReplayProvider>(nullptr, config.provider.cache, CacheMode::Replay);
  }
  if (cache == CacheUse::Record) {
    if (config.provider.cache.empty()) throw Error(Errc::InvalidConfig, "provider.cache is not set");
    return std::make_shared<RecordReplayProvider>(base, config.provider.cache, CacheMode::Record);
  }
  return base;
}

std::size_t expected_calls(ProbeMethod method, std::size_t k, const ProbeTrace& trace,
                           const Taxonomy* taxonomy) {
  switch (method) {
    case ProbeMethod::Likelihood: return k;
    case ProbeMethod::Generative:
    case ProbeMethod::Direct: return 1;
    case ProbeMethod::Hierarchical: {
      std::size_t calls = taxonomy->l1_size();
      if (trace.selected_branches) {
        for (auto b : *trace.selected_branches) calls += taxonomy->children(b).size();
      }
      return calls;
    }
  }
  return 0;
}

ordered_json probe_one(Provider& provider, const EvalSample& sample, const Inputs& in,
                       const Taxonomy* taxonomy, const ExperimentConfig& config,
                       const std::string& digest) {
  const std::string history = render_sample_history(sample, *in.space, config.history_style);
  ProbeOptions opts = config.probe;
  opts.user_id = sample.user_id;
  opts.horizon = sample.horizon;

  std::optional<PreferenceDistribution> dist;
  std::vector<std::size_t> order;
  ProbeTrace trace;
  switch (config.method) {
    case ProbeMethod::Likelihood:
    case ProbeMethod::Generative:
    case ProbeMethod::Hierarchical: {
      DistributionEstimate est =
          config.method == ProbeMethod::Likelihood
              ? likelihood_probe(provider, history, in.space, opts)
          : config.method == ProbeMethod::Generative
              ? generative_classify(provider, history, in.space, opts)
              : hierarchical_probe(provider, history, *taxonomy, config.strategy, config.combine, opts);
      order = rank_descending(est.distribution).order();
      dist.emplace(std::move(est.distribution));
      trace = std::move(est.trace);
      break;
    }
    case ProbeMethod::Direct: {
      const std::size_t k = config.direct_k.value_or(config.evaluate.k_list.back());
      RankingEstimate est = direct_generate_ranking(provider, history, in.space, k, opts);
      order = est.ranking.order();
      trace = std::move(est.trace);
      break;
    }
  }

  ordered_json row;
  row["digest"] = digest;
  row["user_id"] = sample.user_id;
  row["method"] = probe_method_name(config.method);
  if (dist) row["distribution"] = std::vector<double>(dist->probs().begin(), dist->probs().end());
  row["ranking"] = order;
  ordered_json t;
  t["calls"] = trace.calls;
  t["expected_calls"] = expected_calls(config.method, in.space->size(), trace, taxonomy);
  t["prompt_tokens"] = trace.prompt_tokens_total;
  t["floored"] = std::count(trace.floored_flags.begin(), trace.floored_flags.end(), true);
  if (trace.selected_branches) t["selected_branches"] = *trace.selected_branches;
  if (!trace.substituted.empty()) t["substituted"] = trace.substituted;
  if (!trace.notes.empty()) t["notes"] = trace.notes;
  row["trace"] = std::move(t);
  return row;
}

ordered_json sample_json(const EvalSample& s) {
  ordered_json j;
  j["user_id"] = s.user_id;
  j["horizon"] = horizon_name(s.horizon);
  j["context_sessions"] = s.context_sessions;
  j["label_start"] = s.label_start;
  j["label"] = std::vector<double>(s.label.probs().begin(), s.label.probs().end());
  return j;
}

std::optional<std::size_t> abort_after_env() {
  const char* v = std::getenv("PREFPROBE_ABORT_AFTER");
  if (!v || !*v) return std::nullopt;
  std::size_t n = 0;
  const auto [p, ec] = std::from_chars(v, v + std::strlen(v), n);
  if (ec != std::errc{}) return std::nullopt;
  return n;
}

// Completed rows from an earlier checkpoint. A torn final line (crash mid
// write) is dropped; damage anywhere else is an error.
std::map<std::string, std::string> read_checkpoint(const fs::path& path, const std::string& digest) {
  std::map<std::string, std::string> done;
  if (!fs::exists(path)) return done;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    ordered_json row;
    try {
      row = ordered_json::parse(lines[i]);
    } catch (const nlohmann::json::exception&) {
      if (i + 1 == lines.size()) break;
      throw Error(Errc::CacheCorrupt, "corrupt checkpoint line in " + path.string(), i + 1);
    }
    if (row.value("digest", "") == digest) done[row.at("user_id").get<std::string>()] = lines[i];
  }
  return done;
}

void add_metric(std::map<std::size_t, std::pair<double, std::size_t>>& acc,
                const std::map<std::size_t, double>& values) {
  for (const auto& [k, v] : values) {
    acc[k].first += v;
    acc[k].second += 1;
  }
}

std::map<std::size_t, double> means(const std::map<std::size_t, std::pair<double, std::size_t>>& acc) {
  std::map<std::size_t, double> out;
  for (const auto& [k, sv] : acc) out[k] = sv.first / static_cast<double>(sv.second);
  return out;
}

ordered_json metrics_json(const MetricsReport& m) {
  ordered_json j;
  j["n_samples"] = m.n_samples;
  auto block = [](const std::map<std::size_t, double>& values) {
    ordered_json b = ordered_json::object();
    for (const auto& [k, v] : values) b[std::to_string(k)] = v;
    return b;
  };
  j["ndcg"] = block(m.ndcg);
  j["precision"] = block(m.precision);
  j["recall"] = block(m.recall);
  if (m.js_div) j["js_div"] = *m.js_div;
  if (!m.notes.empty()) j["notes"] = m.notes;
  return j;
}

std::vector<std::string> labels_of(const ClusterSpace& space, const std::vector<std::size_t>& idx) {
  std::vector<std::string> out;
  for (auto i : idx) out.push_back(space.label(i));
  return out;
}

bool close(double a, double b) { return std::fabs(a - b) <= 1e-12; }

}  // namespace

int exit_code_for(Errc code) noexcept {
  switch (code) {
    case Errc::InvalidConfig:
    case Errc::InvalidArgument:
    case Errc::InvalidStrategy:
    case Errc::InvalidTaxonomy:
    case Errc::InvalidClusterSpace:
    case Errc::KOutOfRange:
    case Errc::KTooLargeForBruteForce:
    case Errc::SchemaMismatch:
    case Errc::UnreadableFile:
    case Errc::EmptyCorpus:
    case Errc::EmptyAfterFiltering:
    case Errc::TooManyChoices:
    case Errc::UnresolvedPlaceholder:
      return kExitValidation;
    default:
      return kExitError;
  }
}

std::string format_double(double value) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, end);
}

// ---------------------------------------------------------------------------

const std::vector<double>& TruthTrajectory::at(std::int64_t timestamp) const {
  if (daily.empty()) throw Error(Errc::InvalidConfig, "empty truth trajectory");
  std::int64_t day = (timestamp - start_timestamp) / kDay;
  day = std::clamp<std::int64_t>(day, 0, static_cast<std::int64_t>(daily.size()) - 1);
  return daily[static_cast<std::size_t>(day)];
}

std::map<std::string, TruthTrajectory> read_truth(const fs::path& path) {
  std::map<std::string, TruthTrajectory> out;
  for (const auto& row : read_jsonl(path)) {
    TruthTrajectory t;
    t.start_timestamp = row.at("start_timestamp").get<std::int64_t>();
    t.daily = row.at("daily").get<std::vector<std::vector<double>>>();
    out[row.at("user_id").get<std::string>()] = std::move(t);
  }
  return out;
}

SimulationOutput cmd_simulate(const ExperimentConfig& config) {
  const auto& sim = config.simulate;
  const std::uint64_t seed = require_seed(config);
  if (sim.clusters < 2) throw Error(Errc::InvalidConfig, "simulate.clusters must be >= 2");
  if (sim.users < 1 || sim.days < 1) throw Error(Errc::InvalidConfig, "simulate.users and simulate.days must be >= 1");
  if (sim.interactions_per_day == 0) throw Error(Errc::EmptyCorpus, "simulate.interactions_per_day is 0");
  if (sim.drift != "static" && sim.drift != "linear_interpolate" && sim.drift != "random_walk") {
    throw Error(Errc::InvalidConfig, "simulate.drift must be static, linear_interpolate or random_walk");
  }
  if (!(sim.utility_scale > 0.0) || sim.walk_sigma < 0.0) {
    throw Error(Errc::InvalidConfig, "simulate.utility_scale must be > 0 and walk_sigma >= 0");
  }

  const std::size_t cw = std::max<std::size_t>(2, digits(sim.clusters - 1));
  const std::size_t uw = std::max<std::size_t>(4, digits(sim.users - 1));
  std::vector<std::string> labels;
  for (std::size_t j = 0; j < sim.clusters; ++j) labels.push_back("c" + zero_pad(j, cw));

  std::string corpus, truth;
  std::size_t interactions = 0;
  for (std::size_t u = 0; u < sim.users; ++u) {
    const std::string user = "u" + zero_pad(u, uw);
    std::mt19937_64 rng(mix64(seed ^ mix64(u + 1)));
    std::normal_distribution<double> init(0.0, sim.utility_scale);
    std::vector<double> q(sim.clusters), q_end;
    for (double& v : q) v = init(rng);
    if (sim.drift == "linear_interpolate") {
      q_end.resize(sim.clusters);
      for (double& v : q_end) v = init(rng);
    }
    std::normal_distribution<double> step(0.0, sim.walk_sigma);
    std::uniform_int_distribution<std::int64_t> second(0, kDay - 1);
    std::uniform_int_distribution<int> rating(1, 5);

    ordered_json daily = ordered_json::array();
    std::size_t item = 0;
    for (std::size_t d = 0; d < sim.days; ++d) {
      std::vector<double> q_day = q;
      if (sim.drift == "linear_interpolate" && sim.days > 1) {
        const double a = static_cast<double>(d) / static_cast<double>(sim.days - 1);
        for (std::size_t j = 0; j < sim.clusters; ++j) q_day[j] = (1.0 - a) * q[j] + a * q_end[j];
      } else if (sim.drift == "random_walk" && d > 0) {
        for (double& v : q) v += step(rng);
        q_day = q;
      }
      daily.push_back(q_day);
      const auto probs = softmax(q_day);
      std::discrete_distribution<std::size_t> pick(probs.begin(), probs.end());
      std::vector<std::int64_t> offsets(sim.interactions_per_day);
      for (auto& o : offsets) o = second(rng);
      std::sort(offsets.begin(), offsets.end());
      for (auto offset : offsets) {
        ordered_json rec;
        rec["user_id"] = user;
        rec["item_id"] = user + "-" + zero_pad(item++, 6);
        rec["timestamp"] = sim.start_timestamp + static_cast<std::int64_t>(d) * kDay + offset;
        rec["clusters"] = {labels[pick(rng)]};
        rec["weight"] = rating(rng);
        corpus += rec.dump() + "\n";
        ++interactions;
      }
    }
    ordered_json t;
    t["user_id"] = user;
    t["start_timestamp"] = sim.start_timestamp;
    t["drift"] = sim.drift;
    t["daily"] = std::move(daily);
    truth += t.dump() + "\n";
  }

  SimulationOutput out;
  out.corpus = config.output_dir / "corpus.jsonl";
  out.truth = config.output_dir / "truth.jsonl";
  out.vocabulary = config.output_dir / "clusters.txt";
  out.interactions = interactions;
  std::string vocab;
  for (const auto& l : labels) vocab += l + "\n";
  write_file(out.vocabulary, vocab);
  write_file(out.truth, truth);
  write_file(out.corpus, corpus);
  return out;
}

// ---------------------------------------------------------------------------

ProbeRunSummary cmd_probe(const ExperimentConfig& config, CacheUse cache) {
  config.validate_for_run(load_cluster_vocabulary(config.vocabulary)->size());
  const Inputs in = load_inputs(config);
  std::optional<Taxonomy> taxonomy;
  if (config.method == ProbeMethod::Hierarchical) {
    taxonomy.emplace(Taxonomy::load(config.taxonomy, in.space));
    config.strategy.validate(taxonomy->l1_size());
  }
  const Taxonomy* tax = taxonomy ? &*taxonomy : nullptr;
  auto provider = make_provider(config, in, tax, cache);
  const std::string digest = config.digest();
  const fs::path dir = config.output_dir;
  fs::create_directories(dir);

  std::string samples_text;
  for (const auto& s : in.samples) samples_text += sample_json(s).dump() + "\n";
  write_file(dir / "samples.jsonl", samples_text);

  const fs::path partial = dir / "probe.partial.jsonl";
  std::map<std::string, std::string> done = read_checkpoint(partial, digest);
  {
    std::string kept;
    for (const auto& s : in.samples) {
      if (auto it = done.find(s.user_id); it != done.end()) kept += it->second + "\n";
    }
    write_file(partial, kept);
  }

  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < in.samples.size(); ++i) {
    if (!done.count(in.samples[i].user_id)) todo.push_back(i);
  }

  std::vector<std::optional<std::string>> rows(in.samples.size());
  std::vector<std::optional<ordered_json>> failures(in.samples.size());
  std::vector<std::size_t> calls(in.samples.size(), 0);
  std::atomic<bool> stop{false};
  std::mutex append_mutex;
  std::ofstream checkpoint(partial, std::ios::binary | std::ios::app);
  const auto abort_after = abort_after_env();
  std::size_t appended = 0;

  parallel_for(todo.size(), config.max_concurrency, [&](std::size_t t) {
    const std::size_t i = todo[t];
    if (stop.load()) return;
    const EvalSample& sample = in.samples[i];
    try {
      ordered_json row = probe_one(*provider, sample, in, tax, config, digest);
      calls[i] = row["trace"]["calls"].get<std::size_t>();
      std::string line = row.dump();
      std::lock_guard lock(append_mutex);
      checkpoint << line << '\n';
      checkpoint.flush();
      rows[i] = std::move(line);
      if (abort_after && ++appended >= *abort_after) std::_Exit(137);
    } catch (const std::exception& e) {
      ordered_json f;
      f["digest"] = digest;
      f["user_id"] = sample.user_id;
      const auto* err = dynamic_cast<const Error*>(&e);
      f["error"] = err ? std::string(errc_name(err->code())) : std::string("Exception");
      f["message"] = e.what();
      failures[i] = std::move(f);
      if (!config.continue_on_failure) stop.store(true);
    }
  });
  checkpoint.close();

  ProbeRunSummary summary;
  summary.samples = in.samples.size();
  summary.resumed = in.samples.size() - todo.size();
  summary.total_calls = std::accumulate(calls.begin(), calls.end(), std::size_t{0});

  for (std::size_t i = 0; i < in.samples.size(); ++i) {
    if (failures[i] && !config.continue_on_failure) {
      throw Error(Errc::ProbeFailed, "user '" + in.samples[i].user_id +
                                         "': " + (*failures[i])["message"].get<std::string>());
    }
  }

  std::string probe_text, failure_text;
  for (std::size_t i = 0; i < in.samples.size(); ++i) {
    const auto& user = in.samples[i].user_id;
    if (auto it = done.find(user); it != done.end()) {
      probe_text += it->second + "\n";
      ++summary.completed;
    } else if (rows[i]) {
      probe_text += *rows[i] + "\n";
      ++summary.completed;
    } else if (failures[i]) {
      failure_text += failures[i]->dump() + "\n";
      ++summary.failures;
    }
  }
  write_file(dir / "probe.jsonl", probe_text);
  write_file(dir / "failures.jsonl", failure_text);
  // Re-emit the checkpoint in sample order so the directory is deterministic.
  write_file(partial, probe_text);
  summary.exit_code = summary.failures > 0 ? kExitPartial : kExitOk;
  return summary;
}

// ---------------------------------------------------------------------------

MetricsReport aggregate_rows(const std::vector<const SampleRow*>& rows,
                             const std::vector<std::size_t>& k_list) {
  MetricsReport m;
  m.k_list = k_list;
  std::map<std::size_t, std::pair<double, std::size_t>> n, p, r;
  double js = 0.0;
  std::size_t js_n = 0;
  for (const SampleRow* row : rows) {
    if (!row->skipped_reason.empty()) continue;
    ++m.n_samples;
    add_metric(n, row->ndcg);
    add_metric(p, row->precision);
    add_metric(r, row->recall);
    if (row->js_div) {
      js += *row->js_div;
      ++js_n;
    }
  }
  m.ndcg = means(n);
  m.precision = means(p);
  m.recall = means(r);
  if (js_n > 0) m.js_div = js / static_cast<double>(js_n);
  return m;
}

MetricsReport aggregate_rows_csv(const fs::path& path, const std::vector<std::size_t>& k_list) {
  const auto lines = read_lines(path);
  if (lines.empty()) throw Error(Errc::SchemaMismatch, "empty " + path.string());
  const auto header = split_csv_line(lines[0]);
  std::vector<SampleRow> rows;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    if (lines[li].empty()) continue;
    const auto fields = split_csv_line(lines[li]);
    if (fields.size() != header.size()) {
      throw Error(Errc::SchemaMismatch, "rows.csv column count mismatch", li + 1);
    }
    SampleRow row;
    for (std::size_t c = 0; c < header.size(); ++c) {
      const std::string& h = header[c];
      const std::string& v = fields[c];
      if (h == "skipped_reason") row.skipped_reason = v;
      if (v.empty()) continue;
      const auto at = h.find('@');
      if (at == std::string::npos) {
        if (h == "js_div") row.js_div = std::stod(v);
        continue;
      }
      const std::string name = h.substr(0, at);
      const std::size_t k = std::stoul(h.substr(at + 1));
      double value = 0.0;
      std::from_chars(v.data(), v.data() + v.size(), value);
      if (name == "ndcg") row.ndcg[k] = value;
      if (name == "precision") row.precision[k] = value;
      if (name == "recall") row.recall[k] = value;
    }
    rows.push_back(std::move(row));
  }
  std::vector<const SampleRow*> ptrs;
  for (const auto& r : rows) ptrs.push_back(&r);
  return aggregate_rows(ptrs, k_list);
}

RunReport cmd_evaluate(const ExperimentConfig& config) {
  const auto t0 = std::chrono::steady_clock::now();
  const SpacePtr space = load_cluster_vocabulary(config.vocabulary);
  const std::size_t K = space->size();
  if (config.evaluate.k_list.back() > K) {
    throw Error(Errc::InvalidConfig, "evaluate.k_list contains k > K=" + std::to_string(K));
  }
  const fs::path dir = config.output_dir;
  const auto& k_list = config.evaluate.k_list;

  std::optional<Taxonomy> taxonomy;
  if (config.method == ProbeMethod::Hierarchical) taxonomy.emplace(Taxonomy::load(config.taxonomy, space));

  const auto samples = read_jsonl(dir / "samples.jsonl");
  std::map<std::string, ordered_json> probes;
  for (auto& row : read_jsonl(dir / "probe.jsonl")) probes[row.at("user_id").get<std::string>()] = row;
  std::map<std::string, std::string> failed;
  if (fs::exists(dir / "failures.jsonl")) {
    for (const auto& row : read_jsonl(dir / "failures.jsonl")) {
      failed[row.at("user_id").get<std::string>()] =
          row.value("error", "") + ": " + row.value("message", "");
    }
  }
  std::set<std::string> sample_users;
  for (const auto& s : samples) sample_users.insert(s.at("user_id").get<std::string>());
  for (const auto& [user, row] : probes) {
    if (!sample_users.count(user)) {
      throw Error(Errc::JoinMismatch, "probe row for user '" + user + "' has no sample");
    }
  }

  const auto ingested = ingest(config.corpus, config.format, config.schema, *space);
  const TailSegments seg =
      long_tail_segment(ingested.records, K, config.evaluate.head_mass, config.label_weighting);
  std::vector<std::size_t> tail_pos(K, K);
  for (std::size_t t = 0; t < seg.tail.size(); ++t) tail_pos[seg.tail[t]] = t;

  RunReport report;
  report.digest = config.digest();
  report.head = seg.head;
  report.tail = seg.tail;
  std::size_t idcg_zero = 0, tail_idcg_zero = 0, budget_mismatch = 0;

  for (const auto& s : samples) {
    SampleRow row;
    row.user_id = s.at("user_id").get<std::string>();
    row.method = std::string(probe_method_name(config.method));
    row.horizon = s.at("horizon").get<std::string>();
    row.context_sessions = s.at("context_sessions").get<std::size_t>();
    const auto pit = probes.find(row.user_id);
    if (pit == probes.end()) {
      const auto fit = failed.find(row.user_id);
      if (fit == failed.end()) {
        throw Error(Errc::JoinMismatch, "sample for user '" + row.user_id + "' has no probe row");
      }
      row.skipped_reason = fit->second;
      report.rows.push_back(std::move(row));
      continue;
    }
    const ordered_json& probe = pit->second;
    row.method = probe.at("method").get<std::string>();
    row.calls = probe.at("trace").at("calls").get<std::size_t>();
    row.prompt_tokens = probe.at("trace").at("prompt_tokens").get<std::size_t>();
    if (row.calls != probe.at("trace").at("expected_calls").get<std::size_t>()) ++budget_mismatch;
    report.total_calls += row.calls;
    report.total_prompt_tokens += row.prompt_tokens;

    const auto label = s.at("label").get<std::vector<double>>();
    if (label.size() != K) throw Error(Errc::SpaceMismatch, "label length differs from K");
    const auto order = probe.at("ranking").get<std::vector<std::size_t>>();
    const PreferenceDistribution proxy(space, label);
    const auto relevant = relevance_from_proxy(proxy, config.evaluate.relevance_threshold);
    std::vector<double> gains = label;
    if (config.evaluate.binary_gains) {
      for (std::size_t i = 0; i < K; ++i) gains[i] = relevant[i] ? 1.0 : 0.0;
    }
    try {
      for (auto k : k_list) {
        row.ndcg[k] = ndcg_at_k(order, gains, k);
        row.precision[k] = precision_at_k(order, relevant, k);
        row.recall[k] = recall_at_k(order, relevant, k, config.evaluate.recall);
      }
    } catch (const Error& e) {
      if (e.code() != Errc::NoRelevantItems) throw;
      row.ndcg.clear();
      row.precision.clear();
      row.recall.clear();
      row.skipped_reason = "NoRelevantItems";
      report.rows.push_back(std::move(row));
      continue;
    }
    if (std::all_of(gains.begin(), gains.end(), [](double g) { return g == 0.0; })) ++idcg_zero;
    if (probe.contains("distribution")) {
      row.js_div = js_divergence(probe.at("distribution").get<std::vector<double>>(), label);
    }

    if (!seg.tail.empty()) {
      std::vector<std::size_t> t_order;
      for (auto c : order) {
        if (tail_pos[c] < K) t_order.push_back(tail_pos[c]);
      }
      std::vector<double> t_gains(seg.tail.size());
      std::vector<bool> t_rel(seg.tail.size());
      for (std::size_t t = 0; t < seg.tail.size(); ++t) {
        t_gains[t] = gains[seg.tail[t]];
        t_rel[t] = relevant[seg.tail[t]];
      }
      const bool has_rel = std::find(t_rel.begin(), t_rel.end(), true) != t_rel.end();
      if (std::all_of(t_gains.begin(), t_gains.end(), [](double g) { return g == 0.0; })) ++tail_idcg_zero;
      for (auto k : k_list) {
        if (k > seg.tail.size()) break;
        row.tail_ndcg[k] = ndcg_at_k(t_order, t_gains, k);
        row.tail_precision[k] = precision_at_k(t_order, t_rel, k);
        if (config.evaluate.recall == RecallDenominator::PaperK || has_rel) {
          row.tail_recall[k] = recall_at_k(t_order, t_rel, k, config.evaluate.recall);
        }
      }
    }
    report.rows.push_back(std::move(row));
  }

  // Aggregates: every (method, horizon, window), then every (method, horizon).
  std::map<std::tuple<std::string, std::string, std::size_t>, std::vector<const SampleRow*>> groups;
  std::map<std::pair<std::string, std::string>, std::vector<const SampleRow*>> overall;
  for (const auto& r : report.rows) {
    groups[{r.method, r.horizon, r.context_sessions}].push_back(&r);
    overall[{r.method, r.horizon}].push_back(&r);
  }
  for (const auto& [key, rows] : overall) {
    report.aggregates.push_back({key.first, key.second, std::nullopt, aggregate_rows(rows, k_list)});
  }
  for (const auto& [key, rows] : groups) {
    report.aggregates.push_back(
        {std::get<0>(key), std::get<1>(key), std::get<2>(key), aggregate_rows(rows, k_list)});
  }
  {
    std::map<std::size_t, std::pair<double, std::size_t>> n, p, r;
    for (const auto& row : report.rows) {
      if (!row.skipped_reason.empty()) continue;
      add_metric(n, row.tail_ndcg);
      add_metric(p, row.tail_precision);
      add_metric(r, row.tail_recall);
      if (!row.tail_ndcg.empty()) ++report.long_tail.n_samples;
    }
    report.long_tail.k_list = k_list;
    report.long_tail.ndcg = means(n);
    report.long_tail.precision = means(p);
    report.long_tail.recall = means(r);
    if (tail_idcg_zero > 0) {
      report.long_tail.notes.push_back(std::to_string(tail_idcg_zero) +
                                       " samples have no label mass on the tail (NDCG counted as 0)");
    }
  }

  // rows.csv
  std::string csv = "digest,user_id,method,horizon,context_sessions,calls,prompt_tokens,skipped_reason";
  for (const char* name : {"ndcg", "precision", "recall"}) {
    for (auto k : k_list) csv += "," + std::string(name) + "@" + std::to_string(k);
  }
  csv += ",js_div";
  for (const char* name : {"tail_ndcg", "tail_precision", "tail_recall"}) {
    for (auto k : k_list) csv += "," + std::string(name) + "@" + std::to_string(k);
  }
  csv += "\n";
  auto cells = [&](const std::map<std::size_t, double>& values) {
    std::string out;
    for (auto k : k_list) {
      out += ",";
      if (auto it = values.find(k); it != values.end()) out += format_double(it->second);
    }
    return out;
  };
  for (const auto& r : report.rows) {
    csv += report.digest + "," + csv_field(r.user_id) + "," + r.method + "," + r.horizon + "," +
           std::to_string(r.context_sessions) + "," + std::to_string(r.calls) + "," +
           std::to_string(r.prompt_tokens) + "," + csv_field(r.skipped_reason);
    csv += cells(r.ndcg) + cells(r.precision) + cells(r.recall);
    csv += "," + (r.js_div ? format_double(*r.js_div) : std::string());
    csv += cells(r.tail_ndcg) + cells(r.tail_precision) + cells(r.tail_recall);
    csv += "\n";
  }
  write_file(dir / "rows.csv", csv);

  // Self-check: the overall aggregate must be re-derivable from rows.csv.
  {
    std::vector<const SampleRow*> all;
    for (const auto& r : report.rows) all.push_back(&r);
    const MetricsReport direct = aggregate_rows(all, k_list);
    const MetricsReport reread = aggregate_rows_csv(dir / "rows.csv", k_list);
    bool ok = direct.n_samples == reread.n_samples && direct.js_div.has_value() == reread.js_div.has_value();
    if (ok && direct.js_div) ok = close(*direct.js_div, *reread.js_div);
    for (auto k : k_list) {
      if (!ok) break;
      ok = direct.ndcg.count(k) == reread.ndcg.count(k) &&
           (!direct.ndcg.count(k) || (close(direct.ndcg.at(k), reread.ndcg.at(k)) &&
                                      close(direct.precision.at(k), reread.precision.at(k)) &&
                                      close(direct.recall.at(k), reread.recall.at(k))));
    }
    if (!ok) throw Error(Errc::InvalidArgument, "report self-check failed: rows.csv disagrees with aggregates");
  }

  std::size_t skipped = 0;
  for (const auto& r : report.rows) skipped += r.skipped_reason.empty() ? 0 : 1;

  ordered_json j;
  j["digest"] = report.digest;
  j["method"] = probe_method_name(config.method);
  j["horizon"] = horizon_name(config.split.horizon);
  j["session_rule"] = session_rule_name(config.session);
  j["gains"] = config.evaluate.binary_gains ? "binary" : "graded";
  j["recall_denominator"] = recall_denominator_name(config.evaluate.recall);
  j["relevance_threshold"] = config.evaluate.relevance_threshold;
  j["js_log_base"] = 2;
  j["k_list"] = k_list;
  j["n_rows"] = report.rows.size();
  j["n_skipped"] = skipped;
  j["total_calls"] = report.total_calls;
  j["total_prompt_tokens"] = report.total_prompt_tokens;
  j["budget_consistent"] = budget_mismatch == 0;
  ordered_json aggs = ordered_json::array();
  for (const auto& a : report.aggregates) {
    ordered_json e;
    e["method"] = a.method;
    e["horizon"] = a.horizon;
    e["context_sessions"] = a.context_sessions ? ordered_json(*a.context_sessions) : ordered_json("all");
    e["metrics"] = metrics_json(a.metrics);
    aggs.push_back(std::move(e));
  }
  j["aggregates"] = std::move(aggs);
  ordered_json lt;
  lt["head_mass"] = config.evaluate.head_mass;
  lt["head"] = labels_of(*space, seg.head);
  lt["tail"] = labels_of(*space, seg.tail);
  lt["metrics"] = metrics_json(report.long_tail);
  j["long_tail"] = std::move(lt);
  if (idcg_zero > 0) j["notes"] = {std::to_string(idcg_zero) + " samples have IDCG 0 (NDCG counted as 0)"};
  write_file(dir / "report.json", j.dump(2) + "\n");

  // Wall clock lives apart from report.json so the report stays reproducible.
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ordered_json timing;
  timing["evaluate_wall_clock_seconds"] = seconds;
  write_file(dir / "timing.json", timing.dump(2) + "\n");
  return report;
}

// ---------------------------------------------------------------------------

CertifyReport cmd_certify_lemma(const ExperimentConfig& config) {
  const std::size_t K = config.certify.clusters;
  if (K > kCertifyMaxK) {
    throw Error(Errc::KTooLargeForBruteForce,
                "certify.clusters=" + std::to_string(K) + " exceeds " + std::to_string(kCertifyMaxK));
  }
  if (K < 2) throw Error(Errc::InvalidConfig, "certify.clusters must be >= 2");
  if (config.certify.trials == 0) throw Error(Errc::InvalidConfig, "certify.trials must be >= 1");
  const std::uint64_t seed = require_seed(config);

  std::vector<std::string> labels;
  for (std::size_t j = 0; j < K; ++j) labels.push_back("c" + std::to_string(j));
  const SpacePtr space = ClusterSpace::make(labels);
  const double threshold = 1.0 / static_cast<double>(K);

  std::vector<std::optional<CertifyFailure>> outcome(config.certify.trials);
  std::vector<std::optional<std::string>> errors(config.certify.trials);
  parallel_for(config.certify.trials, config.max_concurrency, [&](std::size_t t) {
    try {
      std::mt19937_64 rng(mix64(seed ^ mix64(t + 1)));
      std::uniform_real_distribution<double> uni(-3.0, 3.0);
      std::vector<double> q(K);
      for (double& v : q) v = uni(rng);
      std::vector<double> served = q;
      if (config.provider.negate) {
        for (double& v : served) v = -v;
      }
      OracleConfig oc;
      oc.seed = seed;
      oc.tokens = config.probe.tokens;
      OracleProvider oracle(LatentUtility(space, served), oc);
      ProbeOptions opts = config.probe;
      opts.max_concurrency = 1;
      const auto est = likelihood_probe(oracle, "Time 1: synthetic trial " + std::to_string(t), space, opts);
      const auto order = rank_descending(est.distribution).order();
      const auto gains = softmax(q);
      std::vector<bool> relevant(K);
      for (std::size_t i = 0; i < K; ++i) relevant[i] = gains[i] > threshold;
      for (RankMetric metric : {RankMetric::Ndcg, RankMetric::Precision, RankMetric::Recall}) {
        for (std::size_t k = 1; k <= K; ++k) {
          double achieved = 0.0;
          const char* name = "";
          switch (metric) {
            case RankMetric::Ndcg: achieved = ndcg_at_k(order, gains, k); name = "ndcg"; break;
            case RankMetric::Precision: achieved = precision_at_k(order, relevant, k); name = "precision"; break;
            case RankMetric::Recall:
              achieved = recall_at_k(order, relevant, k, config.evaluate.recall);
              name = "recall";
              break;
          }
          const double best = brute_force_best(gains, relevant, k, metric, config.evaluate.recall).score;
          if (!close(achieved, best)) {
            outcome[t] = CertifyFailure{t, name, k, achieved, best};
            return;
          }
        }
      }
    } catch (const std::exception& e) {
      errors[t] = e.what();
    }
  });
  for (std::size_t t = 0; t < errors.size(); ++t) {
    if (errors[t]) throw Error(Errc::ProbeFailed, "trial " + std::to_string(t) + ": " + *errors[t]);
  }

  CertifyReport report;
  report.clusters = K;
  report.trials = config.certify.trials;
  for (const auto& o : outcome) {
    if (o) {
      report.failures.push_back(*o);
    } else {
      ++report.passed;
    }
  }

  ordered_json j;
  j["digest"] = config.digest();
  j["clusters"] = K;
  j["trials"] = report.trials;
  j["passed"] = report.passed;
  j["failed"] = report.failures.size();
  j["tolerance"] = 1e-12;
  j["relevance_threshold"] = threshold;
  j["recall_denominator"] = recall_denominator_name(config.evaluate.recall);
  j["negated_control"] = config.provider.negate;
  ordered_json fails = ordered_json::array();
  for (std::size_t i = 0; i < report.failures.size() && i < 20; ++i) {
    const auto& f = report.failures[i];
    fails.push_back({{"trial", f.trial}, {"metric", f.metric}, {"k", f.k},
                     {"achieved", f.achieved}, {"best", f.best}});
  }
  j["failures"] = std::move(fails);
  write_file(config.output_dir / "certify.json", j.dump(2) + "\n");
  return report;
}

// ---------------------------------------------------------------------------

EvolutionMatrix cmd_report_evolution(const ExperimentConfig& config) {
  const std::size_t periods = config.evaluate.periods;
  if (periods < 2) throw Error(Errc::InvalidConfig, "evaluate.periods must be >= 2");
  const SpacePtr space = load_cluster_vocabulary(config.vocabulary);
  const auto ingested = ingest(config.corpus, config.format, config.schema, *space);
  const auto timelines = group_by_user(ingested.records);
  EvolutionMatrix m = group_evolution(timelines, space, periods);

  std::string csv = "period,contributors";
  std::string dat = "# period contributors";
  for (const auto& l : space->labels()) {
    csv += "," + csv_field(l);
    dat += " " + l;
  }
  csv += "\n";
  dat += "\n";
  for (std::size_t p = 0; p < m.rows.size(); ++p) {
    csv += std::to_string(p + 1) + "," + std::to_string(m.contributors[p]);
    dat += std::to_string(p + 1) + " " + std::to_string(m.contributors[p]);
    for (double v : m.rows[p]) {
      csv += "," + format_double(v);
      dat += " " + format_double(v);
    }
    csv += "\n";
    dat += "\n";
  }
  write_file(config.output_dir / "evolution.csv", csv);
  write_file(config.output_dir / "evolution.dat", dat);
  return m;
}

fs::path cmd_export_sft(const ExperimentConfig& config) {
  const Inputs in = load_inputs(config);
  const fs::path path = config.output_dir / "sft.jsonl";
  fs::create_directories(config.output_dir);
  export_sft_pairs(in.samples, *in.space, config.history_style, path);
  return path;
}

}  // namespace prefprobe
