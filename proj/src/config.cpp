// SPDX-License-Identifier: Apache-2.0
#include "prefprobe/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#define TOML_EXCEPTIONS 1
#include <toml.hpp>

#include "prefprobe/hashing.hpp"

namespace prefprobe {
namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "run.seed", "run.output_dir", "run.max_concurrency", "run.failure_policy", "run.max_samples",
      "space.vocabulary", "space.taxonomy",
      "data.corpus", "data.format", "data.history_style", "data.label_weighting",
      "data.schema.user", "data.schema.item", "data.schema.timestamp", "data.schema.clusters",
      "data.schema.weight", "data.schema.title", "data.schema.delimiter",
      "data.schema.cluster_separator", "data.session.rule", "data.session.gap_minutes",
      "split.mode", "split.fraction", "split.context_days", "split.label_days",
      "split.context_sessions", "split.horizon", "split.cut_timestamp",
      "probe.method", "probe.temperature", "probe.affirmative", "probe.negative",
      "probe.max_concurrency", "probe.on_error", "probe.combine", "probe.strategy",
      "probe.branches", "probe.p_min", "probe.direct_k", "probe.alphabet_size",
      "probe.templates.likelihood_probe", "probe.templates.generative_classify",
      "probe.templates.direct_generate_top1", "probe.templates.direct_generate_topk",
      "probe.templates.hierarchical_conditional",
      "provider.kind", "provider.cache", "provider.truth", "provider.utilities", "provider.noise_sigma",
      "provider.negative_baseline", "provider.p_swap", "provider.negate", "provider.url",
      "provider.model", "provider.api_key_env", "provider.top_logprobs", "provider.floor",
      "provider.timeout_seconds", "provider.max_in_flight", "provider.id",
      "evaluate.k_list", "evaluate.relevance_threshold", "evaluate.recall_denominator",
      "evaluate.gains", "evaluate.head_mass", "evaluate.periods",
      "simulate.clusters", "simulate.users", "simulate.days", "simulate.interactions_per_day",
      "simulate.start_timestamp", "simulate.drift", "simulate.utility_scale",
      "simulate.walk_sigma",
      "certify.clusters", "certify.trials",
  };
  return keys;
}

// Keys that do not change results and so stay out of the digest.
const std::set<std::string>& volatile_keys() {
  static const std::set<std::string> keys = {"run.output_dir", "run.max_concurrency",
                                             "provider.max_in_flight", "probe.max_concurrency"};
  return keys;
}

void check_keys(const toml::table& table, const std::string& prefix) {
  for (const auto& [key, node] : table) {
    const std::string path = prefix.empty() ? std::string(key.str()) : prefix + "." + std::string(key.str());
    if (const auto* sub = node.as_table()) {
      check_keys(*sub, path);
    } else if (!known_keys().count(path)) {
      throw Error(Errc::InvalidConfig, "unknown config key '" + path + "'");
    }
  }
}

void strip_volatile(toml::table& table) {
  for (const auto& path : volatile_keys()) {
    const auto dot = path.find('.');
    const std::string section = path.substr(0, dot);
    if (auto* sub = table[section].as_table()) {
      sub->erase(path.substr(dot + 1));
      // An emptied table would still show up in the canonical text.
      if (sub->empty()) table.erase(section);
    }
  }
}

void apply_override(toml::table& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw Error(Errc::InvalidConfig, "override must look like key.path=value: " + assignment);
  }
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  toml::table parsed;
  try {
    parsed = toml::parse("v = " + raw);
  } catch (const toml::parse_error&) {
    parsed = toml::table{{"v", raw}};
  }
  toml::table* cursor = &root;
  std::size_t start = 0;
  for (;;) {
    const auto dot = path.find('.', start);
    const std::string part = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw Error(Errc::InvalidConfig, "bad override key '" + path + "'");
    if (dot == std::string::npos) {
      cursor->insert_or_assign(part, *parsed["v"].node());
      break;
    }
    if (!(*cursor)[part].is_table()) cursor->insert_or_assign(part, toml::table{});
    cursor = (*cursor)[part].as_table();
    start = dot + 1;
  }
}

template <class T>
T get(const toml::table& root, std::string_view path, T fallback) {
  const auto node = root.at_path(path);
  if (!node) return fallback;
  if constexpr (std::is_same_v<T, double>) {
    if (auto v = node.value<double>()) return *v;
  } else if constexpr (std::is_same_v<T, bool>) {
    if (auto v = node.value<bool>()) return *v;
  } else if constexpr (std::is_integral_v<T>) {
    if (auto v = node.value<std::int64_t>()) {
      if (std::is_unsigned_v<T> && *v < 0) {
        throw Error(Errc::InvalidConfig, "'" + std::string(path) + "' must be non-negative");
      }
      return static_cast<T>(*v);
    }
  } else {
    if (auto v = node.value<std::string>()) return T(*v);
  }
  throw Error(Errc::InvalidConfig, "config key '" + std::string(path) + "' has the wrong type");
}

std::vector<std::string> get_strings(const toml::table& root, std::string_view path,
                                     std::vector<std::string> fallback) {
  const auto node = root.at_path(path);
  if (!node) return fallback;
  const auto* arr = node.as_array();
  if (!arr) throw Error(Errc::InvalidConfig, "'" + std::string(path) + "' must be an array");
  std::vector<std::string> out;
  for (const auto& item : *arr) {
    auto v = item.value<std::string>();
    if (!v) throw Error(Errc::InvalidConfig, "'" + std::string(path) + "' must hold strings");
    out.push_back(*v);
  }
  return out;
}

char get_char(const toml::table& root, std::string_view path, char fallback) {
  const std::string s = get<std::string>(root, path, std::string(1, fallback));
  if (s.size() != 1) throw Error(Errc::InvalidConfig, "'" + std::string(path) + "' must be one character");
  return s[0];
}

template <class F>
auto wrap(std::string_view path, F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    if (e.code() == Errc::InvalidConfig) throw;
    throw Error(Errc::InvalidConfig, std::string(path) + ": " + e.what());
  }
}

}  // namespace

ExperimentConfig ExperimentConfig::parse(const std::string& toml_text,
                                         const std::vector<std::string>& overrides) {
  toml::table root;
  try {
    root = toml::parse(toml_text);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << "TOML parse error: " << e.description() << " at " << e.source().begin;
    throw Error(Errc::InvalidConfig, msg.str());
  }
  for (const auto& o : overrides) apply_override(root, o);
  check_keys(root, "");

  ExperimentConfig c;
  if (root.at_path("run.seed")) c.seed = get<std::uint64_t>(root, "run.seed", 0);
  c.output_dir = get<std::string>(root, "run.output_dir", c.output_dir.string());
  c.max_concurrency = get<std::size_t>(root, "run.max_concurrency", c.max_concurrency);
  {
    const auto policy = get<std::string>(root, "run.failure_policy", "abort");
    if (policy != "abort" && policy != "continue") {
      throw Error(Errc::InvalidConfig, "run.failure_policy must be abort or continue");
    }
    c.continue_on_failure = policy == "continue";
  }
  c.max_samples = get<std::size_t>(root, "run.max_samples", 0);

  c.vocabulary = get<std::string>(root, "space.vocabulary", "");
  c.taxonomy = get<std::string>(root, "space.taxonomy", "");

  c.corpus = get<std::string>(root, "data.corpus", "");
  c.format = wrap("data.format", [&] { return parse_input_format(get<std::string>(root, "data.format", "jsonl")); });
  c.history_style = wrap("data.history_style", [&] {
    return parse_history_style(get<std::string>(root, "data.history_style", "rating"));
  });
  c.label_weighting = wrap("data.label_weighting", [&] {
    return parse_label_weighting(get<std::string>(root, "data.label_weighting", "unit"));
  });
  c.schema.user = get<std::string>(root, "data.schema.user", c.schema.user);
  c.schema.item = get<std::string>(root, "data.schema.item", c.schema.item);
  c.schema.timestamp = get<std::string>(root, "data.schema.timestamp", c.schema.timestamp);
  c.schema.clusters = get<std::string>(root, "data.schema.clusters", c.schema.clusters);
  c.schema.weight = get<std::string>(root, "data.schema.weight", "weight");
  c.schema.title = get<std::string>(root, "data.schema.title", "title");
  c.schema.delimiter = get_char(root, "data.schema.delimiter", ',');
  c.schema.cluster_separator = get_char(root, "data.schema.cluster_separator", '|');
  {
    const auto rule = get<std::string>(root, "data.session.rule", "calendar_day");
    if (rule == "calendar_day") {
      c.session = SessionRule::calendar_day();
    } else if (rule == "gap") {
      c.session = SessionRule::gap(get<std::int64_t>(root, "data.session.gap_minutes", 30));
    } else {
      throw Error(Errc::InvalidConfig, "data.session.rule must be calendar_day or gap");
    }
  }

  {
    const auto mode = get<std::string>(root, "split.mode", "temporal_fraction");
    if (mode == "temporal_fraction") {
      c.split.mode = SplitSpec::Mode::TemporalFraction;
    } else if (mode == "fixed_range") {
      c.split.mode = SplitSpec::Mode::FixedRange;
    } else {
      throw Error(Errc::InvalidConfig, "split.mode must be temporal_fraction or fixed_range");
    }
  }
  c.split.fraction = get<double>(root, "split.fraction", c.split.fraction);
  c.split.context_days = get<std::int64_t>(root, "split.context_days", c.split.context_days);
  c.split.label_days = get<std::int64_t>(root, "split.label_days", c.split.label_days);
  c.split.context_sessions = get<std::size_t>(root, "split.context_sessions", c.split.context_sessions);
  c.split.horizon = wrap("split.horizon", [&] {
    return parse_horizon(get<std::string>(root, "split.horizon", "long_term"));
  });
  if (root.at_path("split.cut_timestamp")) {
    c.split.cut_timestamp = get<std::int64_t>(root, "split.cut_timestamp", 0);
  }
  wrap("split", [&] { c.split.validate(); return 0; });

  c.method = wrap("probe.method", [&] {
    return parse_probe_method(get<std::string>(root, "probe.method", "likelihood"));
  });
  c.probe.temperature = get<double>(root, "probe.temperature", 1.0);
  if (!(c.probe.temperature > 0.0)) throw Error(Errc::InvalidConfig, "probe.temperature must be > 0");
  c.probe.horizon = c.split.horizon;
  c.probe.tokens.affirmative = get_strings(root, "probe.affirmative", c.probe.tokens.affirmative);
  c.probe.tokens.negative = get_strings(root, "probe.negative", c.probe.tokens.negative);
  wrap("probe tokens", [&] { c.probe.tokens.validate(); return 0; });
  c.probe.max_concurrency = get<std::size_t>(root, "probe.max_concurrency", 1);
  {
    const auto on_error = get<std::string>(root, "probe.on_error", "abort");
    if (on_error != "abort" && on_error != "substitute") {
      throw Error(Errc::InvalidConfig, "probe.on_error must be abort or substitute");
    }
    c.probe.on_error = on_error == "abort" ? FailurePolicy::Abort : FailurePolicy::Substitute;
  }
  c.probe.alphabet_size = get<std::size_t>(root, "probe.alphabet_size", kDefaultAlphabetSize);
  for (PromptKind kind : {PromptKind::LikelihoodProbe, PromptKind::GenerativeClassify,
                          PromptKind::DirectGenerateTop1, PromptKind::DirectGenerateTopK,
                          PromptKind::HierarchicalConditional}) {
    const std::string path = "probe.templates." + std::string(prompt_kind_name(kind));
    if (root.at_path(path)) c.probe.template_overrides[kind] = get<std::string>(root, path, "");
  }
  c.combine = wrap("probe.combine", [&] {
    return parse_combine_mode(get<std::string>(root, "probe.combine", "sum_normalize"));
  });
  c.strategy = wrap("probe.strategy", [&] {
    return parse_branch_strategy(get<std::string>(root, "probe.strategy", "all"),
                                 get<std::size_t>(root, "probe.branches", 1),
                                 get<double>(root, "probe.p_min", 0.0));
  });
  if (root.at_path("probe.direct_k")) c.direct_k = get<std::size_t>(root, "probe.direct_k", 1);

  {
    const auto kind = get<std::string>(root, "provider.kind", "oracle");
    if (kind == "oracle") {
      c.provider.kind = ProviderKind::Oracle;
    } else if (kind == "http") {
      c.provider.kind = ProviderKind::Http;
    } else if (kind == "replay") {
      c.provider.kind = ProviderKind::Replay;
    } else {
      throw Error(Errc::InvalidConfig, "provider.kind must be oracle, http or replay");
    }
  }
  c.provider.cache = get<std::string>(root, "provider.cache", "");
  c.provider.truth = get<std::string>(root, "provider.truth", "");
  c.provider.utilities = get<std::string>(root, "provider.utilities", "truth");
  if (c.provider.utilities != "truth" && c.provider.utilities != "label") {
    throw Error(Errc::InvalidConfig, "provider.utilities must be truth or label");
  }
  c.provider.noise_sigma = get<double>(root, "provider.noise_sigma", 0.0);
  c.provider.negative_baseline = get<double>(root, "provider.negative_baseline", 0.0);
  c.provider.p_swap = get<double>(root, "provider.p_swap", 0.0);
  c.provider.negate = get<bool>(root, "provider.negate", false);
  if (c.provider.noise_sigma < 0.0) throw Error(Errc::InvalidConfig, "provider.noise_sigma must be >= 0");
  if (c.provider.p_swap < 0.0 || c.provider.p_swap > 1.0) {
    throw Error(Errc::InvalidConfig, "provider.p_swap must lie in [0,1]");
  }
  c.provider.http.url = get<std::string>(root, "provider.url", "");
  c.provider.http.model = get<std::string>(root, "provider.model", "");
  c.provider.http.api_key_env = get<std::string>(root, "provider.api_key_env", "");
  c.provider.http.top_logprobs = get<std::size_t>(root, "provider.top_logprobs", 20);
  c.provider.http.floor = get<double>(root, "provider.floor", kDefaultLogprobFloor);
  c.provider.http.timeout_seconds = get<double>(root, "provider.timeout_seconds", 30.0);
  c.provider.http.max_in_flight = get<std::size_t>(root, "provider.max_in_flight", 4);
  c.provider.http.provider_id = get<std::string>(root, "provider.id", "http");

  if (const auto node = root.at_path("evaluate.k_list")) {
    const auto* arr = node.as_array();
    if (!arr || arr->empty()) throw Error(Errc::InvalidConfig, "evaluate.k_list must be a non-empty array");
    c.evaluate.k_list.clear();
    for (const auto& item : *arr) {
      auto v = item.value<std::int64_t>();
      if (!v || *v < 1) throw Error(Errc::InvalidConfig, "evaluate.k_list entries must be positive integers");
      c.evaluate.k_list.push_back(static_cast<std::size_t>(*v));
    }
  }
  if (!std::is_sorted(c.evaluate.k_list.begin(), c.evaluate.k_list.end()) ||
      std::adjacent_find(c.evaluate.k_list.begin(), c.evaluate.k_list.end()) != c.evaluate.k_list.end()) {
    throw Error(Errc::InvalidConfig, "evaluate.k_list must be strictly ascending");
  }
  c.evaluate.relevance_threshold = get<double>(root, "evaluate.relevance_threshold", 0.0);
  if (c.evaluate.relevance_threshold < 0.0) {
    throw Error(Errc::InvalidConfig, "evaluate.relevance_threshold must be >= 0");
  }
  {
    const auto d = get<std::string>(root, "evaluate.recall_denominator", "paper_K");
    if (d == "paper_K") {
      c.evaluate.recall = RecallDenominator::PaperK;
    } else if (d == "standard_R") {
      c.evaluate.recall = RecallDenominator::StandardR;
    } else {
      throw Error(Errc::InvalidConfig, "evaluate.recall_denominator must be paper_K or standard_R");
    }
    const auto g = get<std::string>(root, "evaluate.gains", "graded");
    if (g != "graded" && g != "binary") throw Error(Errc::InvalidConfig, "evaluate.gains must be graded or binary");
    c.evaluate.binary_gains = g == "binary";
  }
  c.evaluate.head_mass = get<double>(root, "evaluate.head_mass", 0.8);
  if (!(c.evaluate.head_mass > 0.0 && c.evaluate.head_mass < 1.0)) {
    throw Error(Errc::InvalidConfig, "evaluate.head_mass must lie in (0,1)");
  }

  c.evaluate.periods = get<std::size_t>(root, "evaluate.periods", c.evaluate.periods);

  c.simulate.clusters = get<std::size_t>(root, "simulate.clusters", c.simulate.clusters);
  c.simulate.users = get<std::size_t>(root, "simulate.users", c.simulate.users);
  c.simulate.days = get<std::size_t>(root, "simulate.days", c.simulate.days);
  c.simulate.interactions_per_day =
      get<std::size_t>(root, "simulate.interactions_per_day", c.simulate.interactions_per_day);
  c.simulate.start_timestamp = get<std::int64_t>(root, "simulate.start_timestamp", c.simulate.start_timestamp);
  c.simulate.drift = get<std::string>(root, "simulate.drift", c.simulate.drift);
  c.simulate.utility_scale = get<double>(root, "simulate.utility_scale", c.simulate.utility_scale);
  c.simulate.walk_sigma = get<double>(root, "simulate.walk_sigma", c.simulate.walk_sigma);

  c.certify.clusters = get<std::size_t>(root, "certify.clusters", c.certify.clusters);
  c.certify.trials = get<std::size_t>(root, "certify.trials", c.certify.trials);

  strip_volatile(root);
  std::ostringstream canonical;
  canonical << toml::json_formatter{root};
  c.canonical = canonical.str();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::InvalidConfig, "cannot read config " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse(buffer.str(), overrides);
}

std::string ExperimentConfig::digest() const { return sha256_hex(canonical); }

void ExperimentConfig::validate_for_run(std::size_t k_clusters) const {
  if (evaluate.k_list.back() > k_clusters) {
    throw Error(Errc::InvalidConfig, "evaluate.k_list contains k=" +
                                         std::to_string(evaluate.k_list.back()) + " > K=" +
                                         std::to_string(k_clusters));
  }
  if (direct_k && (*direct_k < 1 || *direct_k > k_clusters)) {
    throw Error(Errc::InvalidConfig, "probe.direct_k must lie in [1, K]");
  }
  if (provider.kind == ProviderKind::Oracle && !seed) {
    throw Error(Errc::InvalidConfig, "run.seed is mandatory for oracle runs");
  }
  auto require = [](const std::filesystem::path& p, const char* key) {
    if (p.empty()) throw Error(Errc::InvalidConfig, std::string(key) + " is not set");
    if (!std::filesystem::exists(p)) {
      throw Error(Errc::InvalidConfig, std::string(key) + " does not exist: " + p.string());
    }
  };
  require(corpus, "data.corpus");
  require(vocabulary, "space.vocabulary");
  if (method == ProbeMethod::Hierarchical) require(taxonomy, "space.taxonomy");
  if (provider.kind == ProviderKind::Oracle && provider.utilities == "truth") {
    require(provider.truth, "provider.truth");
  }
  if (provider.kind == ProviderKind::Replay) require(provider.cache, "provider.cache");
  if (provider.kind == ProviderKind::Http && provider.http.url.empty()) {
    throw Error(Errc::InvalidConfig, "provider.url is not set");
  }
}

}  // namespace prefprobe
