// SPDX-License-Identifier: Apache-2.0
//
// prefprobe command line: every subcommand takes a TOML config plus
// `--set key.path=value` overrides and writes into run.output_dir.
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "prefprobe/harness.hpp"

namespace {

using namespace prefprobe;

bool use_color() {
  const char* no_color = std::getenv("NO_COLOR");
  return (no_color == nullptr || *no_color == '\0') && isatty(fileno(stderr));
}

void report_error(const std::string& what) {
  if (use_color()) {
    std::cerr << "\033[31merror:\033[0m " << what << "\n";
  } else {
    std::cerr << "error: " << what << "\n";
  }
}

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "TOML experiment file");
  cmd->add_option("--set", c.overrides, "Override a config key, e.g. --set probe.temperature=0.5")
      ->take_all();
}

ExperimentConfig load(const Common& c, std::vector<std::string> extra = {}) {
  std::vector<std::string> overrides = c.overrides;
  overrides.insert(overrides.end(), extra.begin(), extra.end());
  if (c.config_path.empty()) return ExperimentConfig::parse("", overrides);
  return ExperimentConfig::load(c.config_path, overrides);
}

void print_metrics(const MetricsReport& m) {
  for (auto k : m.k_list) {
    if (!m.ndcg.count(k)) continue;
    std::cout << "  @" << k << "  ndcg=" << format_double(m.ndcg.at(k))
              << "  precision=" << format_double(m.precision.at(k))
              << "  recall=" << format_double(m.recall.at(k)) << "\n";
  }
  if (m.js_div) std::cout << "  js_div=" << format_double(*m.js_div) << "\n";
}

int run_probe(const ExperimentConfig& config, CacheUse cache) {
  const auto s = cmd_probe(config, cache);
  std::cout << "samples " << s.samples << ", completed " << s.completed << " (" << s.resumed
            << " resumed), failures " << s.failures << ", calls " << s.total_calls << "\n";
  return s.exit_code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Preference-distribution probing over a fixed cluster lattice"};
  app.require_subcommand(1);

  Common simulate_opts, probe_opts, record_opts, replay_opts, evaluate_opts, certify_opts,
      evolution_opts, sft_opts;
  auto* simulate = app.add_subcommand("simulate", "Write a synthetic corpus and its latent utilities");
  auto* probe = app.add_subcommand("probe", "Probe every evaluation sample");
  auto* record = app.add_subcommand("record", "Probe and append every response to provider.cache");
  auto* replay = app.add_subcommand("replay", "Probe from provider.cache only");
  auto* evaluate = app.add_subcommand("evaluate", "Score probe output against the labels");
  auto* certify = app.add_subcommand("certify-lemma", "Brute-force check of ranking optimality");
  auto* evolution = app.add_subcommand("report-evolution", "Group-level preference matrix per period");
  auto* sft = app.add_subcommand("export-sft", "Write (history, label) pairs for fine-tuning");
  add_common(simulate, simulate_opts);
  add_common(probe, probe_opts);
  add_common(record, record_opts);
  add_common(replay, replay_opts);
  add_common(evaluate, evaluate_opts);
  add_common(certify, certify_opts);
  add_common(evolution, evolution_opts);
  add_common(sft, sft_opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*simulate) {
      const auto out = cmd_simulate(load(simulate_opts));
      std::cout << "wrote " << out.interactions << " interactions to " << out.corpus.string() << "\n";
      return kExitOk;
    }
    if (*probe) return run_probe(load(probe_opts), CacheUse::None);
    if (*record) return run_probe(load(record_opts), CacheUse::Record);
    if (*replay) return run_probe(load(replay_opts, {"provider.kind=replay"}), CacheUse::Replay);
    if (*evaluate) {
      const auto report = cmd_evaluate(load(evaluate_opts));
      for (const auto& a : report.aggregates) {
        if (a.context_sessions) continue;
        std::cout << a.method << " " << a.horizon << " (n=" << a.metrics.n_samples << ")\n";
        print_metrics(a.metrics);
      }
      std::cout << "total calls " << report.total_calls << "\n";
      return kExitOk;
    }
    if (*certify) {
      const auto r = cmd_certify_lemma(load(certify_opts));
      std::cout << "K=" << r.clusters << ": " << r.passed << "/" << r.trials << " trials optimal\n";
      return r.failures.empty() ? kExitOk : kExitCertification;
    }
    if (*evolution) {
      const auto m = cmd_report_evolution(load(evolution_opts));
      std::cout << m.rows.size() << " periods written\n";
      return kExitOk;
    }
    if (*sft) {
      std::cout << "wrote " << cmd_export_sft(load(sft_opts)).string() << "\n";
      return kExitOk;
    }
  } catch (const Error& e) {
    report_error(e.what());
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    report_error(e.what());
    return kExitError;
  }
  return kExitError;
}
