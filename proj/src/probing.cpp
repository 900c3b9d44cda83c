// SPDX-License-Identifier: Apache-2.0
#include "prefprobe/probing.hpp"

#include <algorithm>
#include <cctype>
#include <exception>
#include <numeric>

#include "prefprobe/parallel.hpp"

namespace prefprobe {
namespace {

// One yes/no probe target: the label rendered into the prompt and the
// context the oracle needs to answer it.
struct YesNoProbe {
  std::string label;
  std::size_t target = 0;
  std::optional<std::size_t> parent;
  std::string parent_label;
};

struct YesNoScores {
  std::vector<double> scores;
  std::vector<bool> floored;
  std::vector<std::size_t> substituted;
  std::size_t calls = 0;
  std::size_t tokens = 0;
};

double mean_logit(const LogitResponse& response, const std::vector<std::string>& tokens) {
  double sum = 0.0;
  for (const auto& token : tokens) sum += response.at(token);
  return sum / static_cast<double>(tokens.size());
}

YesNoScores run_yes_no(Provider& provider, const std::string& history,
                       const std::vector<YesNoProbe>& probes, PromptKind kind, ProbeLevel level,
                       const ProbeOptions& options) {
  options.tokens.validate();
  const PromptTemplate tmpl = options.prompt_template(kind);
  const std::vector<std::string> watch = options.tokens.all();

  // Render everything up front so template errors surface before any call.
  std::vector<ProbeRequest> requests(probes.size());
  for (std::size_t i = 0; i < probes.size(); ++i) {
    PromptInputs inputs;
    inputs.history = history;
    inputs.genre = probes[i].label;
    inputs.l1_parent = probes[i].parent_label;
    requests[i].prompt = render_prompt(tmpl, inputs, options.alphabet_size);
    requests[i].watch = watch;
    requests[i].context.kind = kind;
    requests[i].context.level = level;
    requests[i].context.user_id = options.user_id;
    requests[i].context.target = probes[i].target;
    requests[i].context.parent = probes[i].parent;
  }

  std::vector<std::optional<LogitResponse>> responses(probes.size());
  std::vector<std::exception_ptr> errors(probes.size());
  parallel_for(probes.size(), options.max_concurrency, [&](std::size_t i) {
    try {
      responses[i] = provider.next_token_logits(requests[i]);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  });

  YesNoScores out;
  out.scores.assign(probes.size(), 0.5);
  out.floored.assign(probes.size(), false);
  out.calls = probes.size();
  for (std::size_t i = 0; i < probes.size(); ++i) {
    if (errors[i]) {
      if (options.on_error == FailurePolicy::Abort) {
        try {
          std::rethrow_exception(errors[i]);
        } catch (const std::exception& e) {
          throw Error(Errc::ProbeFailed,
                      "probe for cluster " + std::to_string(probes[i].target) + " '" +
                          probes[i].label + "' failed: " + e.what(),
                      probes[i].target);
        }
      }
      out.substituted.push_back(i);
      continue;
    }
    const LogitResponse& r = *responses[i];
    const double yes = mean_logit(r, options.tokens.affirmative);
    const double no = mean_logit(r, options.tokens.negative);
    out.scores[i] = two_way_softmax(yes, no);
    out.floored[i] = !r.floored.empty();
    out.tokens += r.token_count;
  }
  return out;
}

}  // namespace

std::string_view probe_method_name(ProbeMethod method) noexcept {
  switch (method) {
    case ProbeMethod::Likelihood: return "likelihood";
    case ProbeMethod::Generative: return "generative";
    case ProbeMethod::Hierarchical: return "hierarchical";
    case ProbeMethod::Direct: return "direct";
  }
  return "unknown";
}

ProbeMethod parse_probe_method(std::string_view text) {
  if (text == "likelihood") return ProbeMethod::Likelihood;
  if (text == "generative") return ProbeMethod::Generative;
  if (text == "hierarchical") return ProbeMethod::Hierarchical;
  if (text == "direct") return ProbeMethod::Direct;
  throw Error(Errc::InvalidArgument, "unknown probe method '" + std::string(text) + "'");
}

PromptTemplate ProbeOptions::prompt_template(PromptKind kind) const {
  PromptTemplate tmpl = PromptTemplate::standard(kind, horizon);
  if (auto it = template_overrides.find(kind); it != template_overrides.end()) {
    tmpl.body = it->second;
  }
  return tmpl;
}

DistributionEstimate likelihood_probe(Provider& provider, const std::string& history,
                                      const SpacePtr& space, const ProbeOptions& options) {
  std::vector<YesNoProbe> probes(space->size());
  for (std::size_t j = 0; j < space->size(); ++j) {
    probes[j].label = space->label(j);
    probes[j].target = j;
  }
  YesNoScores scored =
      run_yes_no(provider, history, probes, PromptKind::LikelihoodProbe, ProbeLevel::Flat, options);

  ProbeTrace trace;
  trace.method = ProbeMethod::Likelihood;
  trace.calls = scored.calls;
  trace.prompt_tokens_total = scored.tokens;
  trace.floored_flags = scored.floored;
  trace.substituted = scored.substituted;
  for (std::size_t j : scored.substituted) {
    trace.notes.push_back("cluster " + std::to_string(j) + " probe failed; scored 0.5");
  }
  PreferenceDistribution dist = softmax(space, scored.scores, options.temperature);
  trace.raw_scores = std::move(scored.scores);
  return {std::move(dist), std::move(trace)};
}

DistributionEstimate generative_classify(Provider& provider, const std::string& history,
                                         const SpacePtr& space, const ProbeOptions& options) {
  const std::size_t k = space->size();
  const std::size_t alphabet = std::min(options.alphabet_size, kDefaultAlphabetSize);
  if (k > alphabet) {
    throw Error(Errc::TooManyChoices,
                std::to_string(k) + " clusters exceed the " + std::to_string(alphabet) +
                    "-letter index alphabet; use hierarchical probing");
  }
  if (!(options.temperature > 0.0)) {
    throw Error(Errc::NonPositiveTemperature, "temperature must be positive");
  }
  PromptInputs inputs;
  inputs.history = history;
  inputs.choices = space->labels();
  ProbeRequest request;
  request.prompt = render_prompt(options.prompt_template(PromptKind::GenerativeClassify), inputs,
                                 options.alphabet_size);
  request.context.kind = PromptKind::GenerativeClassify;
  request.context.user_id = options.user_id;
  for (std::size_t j = 0; j < k; ++j) {
    request.watch.emplace_back(1, choice_letter(j));
    request.context.choices.push_back(j);
  }

  LogitResponse response = provider.next_token_logits(request);
  ProbeTrace trace;
  trace.method = ProbeMethod::Generative;
  trace.calls = 1;
  trace.prompt_tokens_total = response.token_count;
  std::vector<double> scores(k);
  trace.floored_flags.assign(k, false);
  for (std::size_t j = 0; j < k; ++j) {
    scores[j] = response.at(request.watch[j]);
    if (response.floored.count(request.watch[j])) {
      trace.floored_flags[j] = true;
      trace.notes.push_back("letter " + request.watch[j] + " outside returned top-N; floored");
    }
  }
  PreferenceDistribution dist = softmax(space, scores, options.temperature);
  trace.raw_scores = std::move(scores);
  return {std::move(dist), std::move(trace)};
}

void BranchStrategy::validate(std::size_t k1) const {
  switch (kind) {
    case Kind::TopB:
    case Kind::LongTail:
      if (b < 1 || b > k1) {
        throw Error(Errc::InvalidStrategy,
                    "branch count b=" + std::to_string(b) + " must lie in [1, " +
                        std::to_string(k1) + "]");
      }
      break;
    case Kind::Threshold:
      if (!(p_min > 0.0 && p_min < 1.0)) {
        throw Error(Errc::InvalidStrategy, "threshold p_min must lie in (0,1)");
      }
      break;
    case Kind::All:
      break;
  }
}

BranchStrategy parse_branch_strategy(std::string_view kind, std::size_t b, double p_min) {
  if (kind == "top_b") return BranchStrategy::top_b(b);
  if (kind == "threshold") return BranchStrategy::threshold(p_min);
  if (kind == "long_tail") return BranchStrategy::long_tail(b);
  if (kind == "all") return BranchStrategy::all();
  throw Error(Errc::InvalidStrategy, "unknown branch strategy '" + std::string(kind) + "'");
}

std::vector<std::size_t> select_branches(std::span<const double> p_l1,
                                         const BranchStrategy& strategy) {
  strategy.validate(p_l1.size());
  std::vector<std::size_t> order = rank_descending(p_l1).order();
  std::vector<std::size_t> out;
  switch (strategy.kind) {
    case BranchStrategy::Kind::TopB:
      out.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(strategy.b));
      break;
    case BranchStrategy::Kind::Threshold:
      for (std::size_t j : order) {
        if (p_l1[j] >= strategy.p_min) out.push_back(j);
      }
      if (out.empty()) {
        throw Error(Errc::EmptySelection,
                    "no L1 branch reaches p_min=" + format_number(strategy.p_min));
      }
      break;
    case BranchStrategy::Kind::LongTail: {
      std::vector<std::size_t> ascending(p_l1.size());
      std::iota(ascending.begin(), ascending.end(), std::size_t{0});
      std::stable_sort(ascending.begin(), ascending.end(),
                       [&](std::size_t a, std::size_t b) { return p_l1[a] < p_l1[b]; });
      out.assign(ascending.begin(), ascending.begin() + static_cast<std::ptrdiff_t>(strategy.b));
      break;
    }
    case BranchStrategy::Kind::All:
      out.resize(p_l1.size());
      std::iota(out.begin(), out.end(), std::size_t{0});
      break;
  }
  return out;
}

CombineMode parse_combine_mode(std::string_view text) {
  if (text == "sum_normalize") return CombineMode::SumNormalize;
  if (text == "masked_softmax") return CombineMode::MaskedSoftmax;
  throw Error(Errc::InvalidArgument, "unknown combine mode '" + std::string(text) + "'");
}

std::string_view combine_mode_name(CombineMode mode) noexcept {
  return mode == CombineMode::SumNormalize ? "sum_normalize" : "masked_softmax";
}

DistributionEstimate hierarchical_probe(Provider& provider, const std::string& history,
                                        const Taxonomy& taxonomy, const BranchStrategy& strategy,
                                        CombineMode combine, const ProbeOptions& options) {
  const std::size_t k1 = taxonomy.l1_size();
  const std::size_t k = taxonomy.l2_space().size();
  strategy.validate(k1);
  if (!(options.temperature > 0.0)) {
    throw Error(Errc::NonPositiveTemperature, "temperature must be positive");
  }

  // Stage 1: L1 scoping.
  std::vector<YesNoProbe> l1_probes(k1);
  for (std::size_t j = 0; j < k1; ++j) {
    l1_probes[j].label = taxonomy.l1_space().label(j);
    l1_probes[j].target = j;
  }
  YesNoScores l1 =
      run_yes_no(provider, history, l1_probes, PromptKind::LikelihoodProbe, ProbeLevel::L1, options);
  const std::vector<double> p_l1 = softmax(l1.scores);
  const std::vector<std::size_t> selected = select_branches(p_l1, strategy);

  // Stage 2: conditional probes over the children of every selected branch.
  std::vector<YesNoProbe> l2_probes;
  for (std::size_t j : selected) {
    for (std::size_t child : taxonomy.children(j)) {
      l2_probes.push_back({taxonomy.l2_space().label(child), child, j,
                           taxonomy.l1_space().label(j)});
    }
  }
  YesNoScores l2 = run_yes_no(provider, history, l2_probes, PromptKind::HierarchicalConditional,
                              ProbeLevel::L2Conditional, options);

  std::vector<double> joint(k, 0.0);
  std::vector<bool> probed(k, false);
  std::vector<bool> floored(k, false);
  std::size_t offset = 0;
  for (std::size_t j : selected) {
    const auto& kids = taxonomy.children(j);
    const std::vector<double> conditional(
        softmax(std::span<const double>(l2.scores).subspan(offset, kids.size())));
    for (std::size_t c = 0; c < kids.size(); ++c) {
      joint[kids[c]] = conditional[c] * p_l1[j];
      probed[kids[c]] = true;
      floored[kids[c]] = l2.floored[offset + c];
    }
    offset += kids.size();
  }

  std::vector<double> theta(k, 0.0);
  if (combine == CombineMode::SumNormalize) {
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) total += probed[i] ? joint[i] : 0.0;
    for (std::size_t i = 0; i < k; ++i) theta[i] = probed[i] ? joint[i] / total : 0.0;
  } else {
    std::vector<double> masked;
    for (std::size_t i = 0; i < k; ++i) {
      if (probed[i]) masked.push_back(joint[i]);
    }
    const std::vector<double> p = softmax(masked, options.temperature);
    std::size_t m = 0;
    for (std::size_t i = 0; i < k; ++i) {
      if (probed[i]) theta[i] = p[m++];
    }
  }

  ProbeTrace trace;
  trace.method = ProbeMethod::Hierarchical;
  trace.calls = l1.calls + l2.calls;
  trace.prompt_tokens_total = l1.tokens + l2.tokens;
  trace.raw_scores = joint;
  trace.floored_flags = std::move(floored);
  trace.l1_distribution = p_l1;
  trace.selected_branches = selected;
  for (std::size_t j : l1.substituted) {
    trace.notes.push_back("L1 branch " + std::to_string(j) + " probe failed; scored 0.5");
  }
  for (std::size_t i : l2.substituted) {
    trace.substituted.push_back(l2_probes[i].target);
    trace.notes.push_back("cluster " + std::to_string(l2_probes[i].target) +
                          " probe failed; scored 0.5");
  }
  if (std::count(probed.begin(), probed.end(), false) > 0) {
    trace.notes.push_back("unprobed L2 clusters assigned probability 0");
  }
  return {PreferenceDistribution(taxonomy.l2_space_ptr(), std::move(theta)), std::move(trace)};
}

Ranking parse_generated_ranking(const std::string& text, std::size_t k_clusters, std::size_t k,
                                bool* partial) {
  std::vector<std::size_t> prefix;
  std::vector<bool> seen(k_clusters, false);
  std::size_t pos = 0;
  while (pos < text.size() && prefix.size() < k) {
    while (pos < text.size() &&
           (text[pos] == ',' || std::isspace(static_cast<unsigned char>(text[pos])))) {
      ++pos;
    }
    const std::size_t start = pos;
    while (pos < text.size() && text[pos] != ',' &&
           !std::isspace(static_cast<unsigned char>(text[pos]))) {
      ++pos;
    }
    if (pos - start != 1) continue;
    const char c = static_cast<char>(std::toupper(static_cast<unsigned char>(text[start])));
    if (c < 'A' || c > 'Z') continue;
    const std::size_t idx = static_cast<std::size_t>(c - 'A');
    if (idx >= k_clusters || seen[idx]) continue;
    seen[idx] = true;
    prefix.push_back(idx);
  }
  if (prefix.empty()) {
    throw Error(Errc::UnparseableGeneration, "no cluster letters in generated text '" + text + "'");
  }
  if (partial != nullptr) *partial = prefix.size() < k;
  return Ranking::from_generation(std::move(prefix), k_clusters);
}

RankingEstimate direct_generate_ranking(Provider& provider, const std::string& history,
                                        const SpacePtr& space, std::size_t k,
                                        const ProbeOptions& options) {
  const std::size_t n = space->size();
  if (n > kDefaultAlphabetSize) {
    throw Error(Errc::TooManyChoices, "direct generation needs K <= 26 lettered choices");
  }
  if (k < 1 || k > n) throw Error(Errc::KOutOfRange, "k must lie in [1, K]");

  const PromptKind kind = k == 1 ? PromptKind::DirectGenerateTop1 : PromptKind::DirectGenerateTopK;
  PromptInputs inputs;
  inputs.history = history;
  inputs.choices = space->labels();
  inputs.k = k;
  GenerateRequest request;
  request.prompt = render_prompt(options.prompt_template(kind), inputs, options.alphabet_size);
  request.max_tokens = 4 * k + 8;
  request.context.kind = kind;
  request.context.user_id = options.user_id;
  request.context.k = k;
  request.context.choices.resize(n);
  std::iota(request.context.choices.begin(), request.context.choices.end(), std::size_t{0});

  const std::string text = provider.generate_text(request);
  bool partial = false;
  Ranking ranking = parse_generated_ranking(text, n, k, &partial);

  ProbeTrace trace;
  trace.method = ProbeMethod::Direct;
  trace.calls = 1;
  trace.prompt_tokens_total = count_words(request.prompt);
  if (partial) {
    trace.notes.push_back("PartialParse: recovered " + std::to_string(ranking.size()) + " of " +
                          std::to_string(k) + " letters");
  }
  return {std::move(ranking), std::move(trace)};
}

}  // namespace prefprobe
