// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "prefprobe/dataset.hpp"

using namespace prefprobe;
namespace fs = std::filesystem;

namespace {

template <class F>
Errc code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return Errc::InvalidArgument;
}

SpacePtr space_of(std::size_t k) {
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < k; ++i) labels.push_back("c" + std::to_string(i));
  return ClusterSpace::make(labels);
}

SpacePtr movie_genres() {
  return parse_cluster_vocabulary(
      "Action\nAdventure\nAnimation\nChildren\nComedy\nCrime\nDocumentary\nDrama\nFantasy\n"
      "Film-Noir\nHorror\nMusical\nMystery\nRomance\nSci-Fi\nThriller\nWar\nWestern\nIMAX\n");
}

constexpr std::int64_t kDay = 86400;
constexpr std::int64_t kT0 = 1'700'006'400;  // a UTC midnight

InteractionRecord rec(std::int64_t ts, std::size_t cluster, std::string user = "u", double w = 1.0) {
  InteractionRecord r;
  r.user_id = std::move(user);
  r.item_id = "i" + std::to_string(ts);
  r.timestamp = ts;
  r.clusters = {cluster};
  r.weight = w;
  return r;
}

std::vector<Session> daily_sessions(std::size_t n, std::size_t k = 3) {
  std::vector<InteractionRecord> rs;
  for (std::size_t d = 0; d < n; ++d) rs.push_back(rec(kT0 + static_cast<std::int64_t>(d) * kDay + 3600, d % k));
  return sessionize(rs, SessionRule::calendar_day());
}

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "prefprobe_test_dataset";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

// ---------------------------------------------------------------------------
// ingestion

TEST_CASE("bad rows are reported with their row number") {
  auto sp = space_of(3);
  const std::string csv =
      "user_id,item_id,timestamp,clusters\n"
      "u1,a,100,c0\n"
      "u1,b,yesterday,c1\n"
      "u2,c,50,c2|c0\n";
  const auto r = ingest_text(csv, InputFormat::Csv, IngestSchema{}, *sp);
  CHECK(r.records.size() == 2);
  REQUIRE(r.rejects.size() == 1);
  CHECK(r.rejects[0].row == 2);
  CHECK(r.records[0].user_id == "u1");
  CHECK(r.records[1].clusters == std::vector<std::size_t>{2, 0});
}

TEST_CASE("movie-style rows with multiple genres") {
  auto sp = movie_genres();
  REQUIRE(sp->size() == 19);
  IngestSchema schema;
  schema.item = "title";
  schema.weight = "rating";
  schema.title = "title";
  schema.clusters = "genres";
  const auto r = ingest_text("user_id,title,rating,timestamp,genres\nu1,Inception,5,1699999999,Action|Sci-Fi\n",
                             InputFormat::Csv, schema, *sp);
  REQUIRE(r.records.size() == 1);
  CHECK(r.records[0].clusters == std::vector<std::size_t>{sp->find("Action"), sp->find("Sci-Fi")});
  CHECK(r.records[0].weight == 5.0);
  CHECK(r.records[0].timestamp == 1699999999);
  CHECK(*r.records[0].title == "Inception");
}

TEST_CASE("jsonl ingestion and rejects") {
  auto sp = space_of(3);
  IngestSchema schema;
  schema.weight = "weight";
  const std::string text =
      R"({"user_id":"b","item_id":"x","timestamp":20,"clusters":["c1"],"weight":30.5})" "\n"
      R"({"user_id":"a","item_id":"y","timestamp":10,"clusters":["c9"]})" "\n"
      R"(not json)" "\n"
      R"({"user_id":"a","item_id":"z","timestamp":-5,"clusters":["c0"]})" "\n"
      R"({"user_id":"a","item_id":"w","timestamp":5,"clusters":["c2"],"weight":1})" "\n";
  const auto r = ingest_text(text, InputFormat::Jsonl, schema, *sp);
  CHECK(r.records.size() == 2);
  CHECK(r.records[0].user_id == "a");
  CHECK(r.records[1].weight == 30.5);
  std::vector<std::size_t> rows;
  for (const auto& j : r.rejects) rows.push_back(j.row);
  CHECK(rows == std::vector<std::size_t>{2, 3, 4});
}

TEST_CASE("ingestion errors") {
  auto sp = space_of(2);
  CHECK(code_of([&] { ingest_text("", InputFormat::Csv, IngestSchema{}, *sp); }) == Errc::EmptyAfterFiltering);
  CHECK(code_of([&] { ingest_text("", InputFormat::Jsonl, IngestSchema{}, *sp); }) == Errc::EmptyAfterFiltering);
  CHECK(code_of([&] { ingest_text("user_id,item_id,clusters\nu,i,c0\n", InputFormat::Csv, IngestSchema{}, *sp); }) ==
        Errc::SchemaMismatch);
  CHECK(code_of([&] {
          ingest_text("user_id,item_id,timestamp,clusters\nu,i,x,c0\n", InputFormat::Csv, IngestSchema{}, *sp);
        }) == Errc::EmptyAfterFiltering);
  CHECK(code_of([&] { ingest("/nonexistent/corpus.csv", InputFormat::Csv, IngestSchema{}, *sp); }) ==
        Errc::UnreadableFile);
}

// ---------------------------------------------------------------------------
// sessions and splits

TEST_CASE("sessionize examples") {
  std::vector<InteractionRecord> two_days{rec(kT0 + 10, 0), rec(kT0 + kDay - 1, 1), rec(kT0 + kDay, 2)};
  CHECK(sessionize(two_days, SessionRule::calendar_day()).size() == 2);
  std::vector<InteractionRecord> gaps{rec(kT0, 0), rec(kT0 + 600, 1), rec(kT0 + 7200, 2)};
  const auto s = sessionize(gaps, SessionRule::gap(30));
  REQUIRE(s.size() == 2);
  CHECK(s[0].records.size() == 2);
  CHECK(s[1].records.size() == 1);
  CHECK(s[0].start == kT0);
  CHECK(s[0].end == kT0 + 600);
  CHECK(sessionize(std::vector<InteractionRecord>{rec(kT0, 0)}, SessionRule::calendar_day()).size() == 1);
}

TEST_CASE("sessions partition the records") {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<std::int64_t> dt(0, 5 * 3600);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<InteractionRecord> rs;
    std::int64_t t = kT0;
    for (int i = 0; i < 1 + trial % 40; ++i) rs.push_back(rec(t += dt(rng), 0));
    for (const auto& rule : {SessionRule::calendar_day(), SessionRule::gap(45)}) {
      const auto ss = sessionize(rs, rule);
      std::size_t n = 0;
      for (std::size_t i = 0; i < ss.size(); ++i) {
        n += ss[i].records.size();
        CHECK(!ss[i].records.empty());
        if (i > 0) CHECK(ss[i - 1].end < ss[i].start);
        for (const auto& r : ss[i].records) CHECK((r.timestamp >= ss[i].start && r.timestamp <= ss[i].end));
      }
      CHECK(n == rs.size());
    }
  }
}

TEST_CASE("temporal fraction split examples") {
  SplitSpec spec;
  spec.context_sessions = 100;
  const auto five = daily_sessions(5);
  auto r = split(five, spec);
  CHECK(r.context.size() == 4);
  CHECK(r.label.size() == 1);
  CHECK(r.label[0].timestamp == five[4].start);

  const auto ten = daily_sessions(10);
  spec.horizon = Horizon::ShortTerm;
  r = split(ten, spec);
  CHECK(r.context.size() == 8);
  REQUIRE(r.label.size() == 1);
  CHECK(r.label[0].timestamp == ten[8].start);

  spec.horizon = Horizon::LongTerm;
  spec.context_sessions = 3;
  r = split(ten, spec);
  CHECK(r.context.size() == 3);
  CHECK(r.context.front().start == ten[5].start);
  CHECK(r.label.size() == 2);

  CHECK(code_of([&] { split(daily_sessions(1), spec); }) == Errc::InsufficientHistory);
}

TEST_CASE("fraction boundaries use the exact product") {
  // 0.8 * 10 is 8.000000000000002 in binary; the pool must still be 8.
  SplitSpec spec;
  spec.context_sessions = 100;
  for (std::size_t n = 2; n <= 40; ++n) {
    const auto s = daily_sessions(n);
    const auto expected = static_cast<std::size_t>((8 * n + 9) / 10);  // ceil(0.8 n) in integers
    if (expected >= n) {
      CHECK(code_of([&] { split(s, spec); }) == Errc::InsufficientHistory);
      continue;
    }
    CHECK(split(s, spec).context.size() == expected);
  }
}

TEST_CASE("fixed range split") {
  SplitSpec spec;
  spec.mode = SplitSpec::Mode::FixedRange;
  spec.context_days = 30;
  spec.label_days = 14;
  spec.context_sessions = 100;
  const auto s = daily_sessions(60);
  auto r = split(s, spec);
  // Per-user cut: the final 14 UTC days are the label window.
  CHECK(r.label.size() == 14);
  CHECK(r.context.size() == 30);
  CHECK(r.context.back().end < r.label.front().timestamp);

  spec.cut_timestamp = kT0 + 20 * kDay;
  r = split(s, spec);
  CHECK(r.context.size() == 20);
  CHECK(r.label.size() == 14);
  CHECK(r.label.front().timestamp >= *spec.cut_timestamp);

  spec.cut_timestamp = kT0 - kDay;
  CHECK(code_of([&] { split(s, spec); }) == Errc::InsufficientHistory);
}

TEST_CASE("no label record precedes the context") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::int64_t> dt(60, 3 * kDay);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<InteractionRecord> rs;
    std::int64_t t = kT0;
    for (int i = 0; i < 2 + trial % 50; ++i) rs.push_back(rec(t += dt(rng), i % 3));
    const auto ss = sessionize(rs, trial % 2 ? SessionRule::gap(90) : SessionRule::calendar_day());
    SplitSpec spec;
    spec.horizon = trial % 3 ? Horizon::LongTerm : Horizon::ShortTerm;
    spec.context_sessions = 1 + trial % 8;
    spec.fraction = 0.5 + 0.1 * (trial % 5);
    if (trial % 4 == 0) spec.mode = SplitSpec::Mode::FixedRange;
    try {
      const auto r = split(ss, spec);
      std::int64_t ctx_max = 0, lab_min = INT64_MAX;
      for (const auto& s : r.context) ctx_max = std::max(ctx_max, s.end);
      for (const auto& l : r.label) lab_min = std::min(lab_min, l.timestamp);
      CHECK(ctx_max < lab_min);
      CHECK(!r.context.empty());
      CHECK(r.context.size() <= spec.context_sessions);
    } catch (const Error& e) {
      CHECK(e.code() == Errc::InsufficientHistory);
    }
  }
}

TEST_CASE("split spec validation") {
  SplitSpec spec;
  spec.fraction = 1.0;
  CHECK(code_of([&] { spec.validate(); }) == Errc::InvalidConfig);
  spec.fraction = 0.8;
  spec.context_sessions = 0;
  CHECK(code_of([&] { spec.validate(); }) == Errc::InvalidConfig);
}

// ---------------------------------------------------------------------------
// samples and SFT

TEST_CASE("label is the empirical proxy of the label window") {
  auto sp = space_of(4);
  std::vector<InteractionRecord> rs;
  for (int d = 0; d < 8; ++d) rs.push_back(rec(kT0 + d * kDay, 0, "u1"));
  // Two held-out days: Drama x2 (c2), Comedy x2 (c3).
  rs.push_back(rec(kT0 + 8 * kDay, 2, "u1"));
  rs.push_back(rec(kT0 + 8 * kDay + 60, 3, "u1"));
  rs.push_back(rec(kT0 + 9 * kDay, 2, "u1"));
  rs.push_back(rec(kT0 + 9 * kDay + 60, 3, "u1"));
  rs.push_back(rec(kT0, 1, "lonely"));
  std::stable_sort(rs.begin(), rs.end(), [](const auto& a, const auto& b) {
    return std::tie(a.user_id, a.timestamp) < std::tie(b.user_id, b.timestamp);
  });
  const auto timelines = group_by_user(rs);
  const auto set = build_eval_samples(timelines, sp, SampleBuildOptions{});
  REQUIRE(set.samples.size() == 1);
  const auto& label = set.samples[0].label;
  CHECK(label[0] == 0.0);
  CHECK(label[2] == 0.5);
  CHECK(label[3] == 0.5);
  CHECK(set.samples[0].label_start == kT0 + 8 * kDay);
  REQUIRE(set.skipped.size() == 1);
  CHECK(set.skipped[0].first == "lonely");
}

TEST_CASE("weighted labels use the weights") {
  auto sp = space_of(2);
  std::vector<InteractionRecord> rs;
  for (int d = 0; d < 4; ++d) rs.push_back(rec(kT0 + d * kDay, 0, "u", 10));
  rs.push_back(rec(kT0 + 4 * kDay, 0, "u", 30));
  rs.push_back(rec(kT0 + 4 * kDay + 1, 1, "u", 10));
  SampleBuildOptions opt;
  opt.weighting = LabelWeighting::Weight;
  const auto set = build_eval_samples(group_by_user(rs), sp, opt);
  CHECK(set.samples[0].label[0] == 0.75);
  CHECK(code_of([&] {
          build_eval_samples(group_by_user(std::vector<InteractionRecord>{rec(kT0, 0)}), sp, opt);
        }) == Errc::InsufficientHistory);
}

TEST_CASE("SFT export round trip") {
  auto sp = space_of(5);
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<std::size_t> pick(0, 4);
  std::vector<InteractionRecord> rs;
  for (int u = 0; u < 100; ++u) {
    char id[16];
    std::snprintf(id, sizeof id, "u%03d", u);
    for (int d = 0; d < 10 + u % 5; ++d) {
      auto r = rec(kT0 + d * kDay + u * 60, pick(rng), id, 1 + static_cast<double>(d % 5));
      r.title = "Item " + std::to_string(d);
      rs.push_back(r);
    }
  }
  SampleBuildOptions opt;
  opt.split.context_sessions = 8;
  const auto set = build_eval_samples(group_by_user(rs), sp, opt);
  REQUIRE(set.samples.size() == 100);
  const auto path = temp_path("sft.jsonl");
  export_sft_pairs(set.samples, *sp, HistoryStyle::Rating, path);

  std::ifstream in(path);
  std::size_t lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  CHECK(lines == 100);

  const auto pairs = read_sft_pairs(path, sp);
  REQUIRE(pairs.size() == 100);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    CHECK(pairs[i].prompt == render_sample_history(set.samples[i], *sp, HistoryStyle::Rating));
    for (std::size_t c = 0; c < 5; ++c) CHECK(std::fabs(pairs[i].label[c] - set.samples[i].label[c]) <= 5e-7);
    // One interaction per day, so one stanza per context session.
    std::size_t stanzas = 0;
    for (std::size_t pos = 0; (pos = pairs[i].prompt.find("Time ", pos)) != std::string::npos; ++pos) ++stanzas;
    CHECK(stanzas == 8);
  }
}

TEST_CASE("rounded SFT labels still sum to one") {
  const std::vector<double> third{1.0 / 3, 1.0 / 3, 1.0 / 3};
  const auto v = sft_label_values(third);
  CHECK(std::fabs(std::accumulate(v.begin(), v.end(), 0.0) - 1.0) < 1e-12);
  for (double x : v) CHECK(std::fabs(x - 1.0 / 3) <= 5e-7);
}

// ---------------------------------------------------------------------------
// long tail and evolution

TEST_CASE("long tail segmentation examples") {
  auto seg = long_tail_from_mass(std::vector<double>{0.5, 0.3, 0.1, 0.1}, 0.8);
  CHECK(seg.head == std::vector<std::size_t>{0, 1});
  CHECK(seg.tail == std::vector<std::size_t>{2, 3});
  seg = long_tail_from_mass(std::vector<double>{0.002, 0.995, 0.003}, 0.99);
  CHECK(seg.head == std::vector<std::size_t>{1});
  seg = long_tail_from_mass(std::vector<double>{1, 1, 1, 1}, 0.5);
  CHECK(seg.head == std::vector<std::size_t>{0, 1});
  CHECK(seg.tail == std::vector<std::size_t>{2, 3});
  // Clusters nobody touched are in neither segment.
  seg = long_tail_from_mass(std::vector<double>{5, 0, 1}, 0.5);
  CHECK(seg.head == std::vector<std::size_t>{0});
  CHECK(seg.tail == std::vector<std::size_t>{2});

  std::vector<InteractionRecord> rs{rec(1, 0), rec(2, 0), rec(3, 0), rec(4, 1), rec(5, 2)};
  seg = long_tail_segment(rs, 3, 0.6);
  CHECK(seg.head == std::vector<std::size_t>{0});
  CHECK(seg.tail == std::vector<std::size_t>{1, 2});
  CHECK(code_of([] { long_tail_segment(std::vector<InteractionRecord>{}, 3, 0.8); }) == Errc::EmptyCorpus);
}

TEST_CASE("group evolution examples") {
  auto sp = space_of(4);
  std::vector<InteractionRecord> rs;
  for (int i = 0; i < 16; ++i) rs.push_back(rec(kT0 + i * 3600, static_cast<std::size_t>(i % 4), "u1"));
  auto m = group_evolution(group_by_user(rs), sp, 4);
  REQUIRE(m.rows.size() == 4);
  for (const auto& row : m.rows) {
    for (double v : row) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
  }

  auto sp2 = space_of(2);
  std::vector<InteractionRecord> two;
  for (int i = 0; i < 8; ++i) two.push_back(rec(kT0 + i * 3600, 0, "a"));
  for (int i = 0; i < 8; ++i) two.push_back(rec(kT0 + i * 7200, 1, "b"));
  m = group_evolution(group_by_user(two), sp2, 4);
  for (std::size_t p = 0; p < 4; ++p) {
    CHECK(m.rows[p] == std::vector<double>{0.5, 0.5});
    CHECK(m.contributors[p] == 2);
  }

  std::vector<InteractionRecord> shorty{rec(kT0, 0, "s"), rec(kT0 + 5, 1, "s")};
  m = group_evolution(group_by_user(shorty), sp2, 4);
  REQUIRE(m.skipped.size() == 1);
  CHECK(m.skipped[0].first == "s");
  CHECK(m.skipped[0].second.rfind("InsufficientHistory", 0) == 0);
  CHECK(m.contributors == std::vector<std::size_t>{0, 0, 0, 0});
}

TEST_CASE("group evolution follows a drifting population") {
  // Preference for c0 rises linearly from 0.1 to 0.9 over each user's year.
  auto sp = space_of(2);
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u01(0, 1);
  std::vector<InteractionRecord> rs;
  for (int u = 0; u < 60; ++u) {
    const std::string id = "u" + std::to_string(100 + u);
    for (int d = 0; d < 365; ++d) {
      const double p0 = 0.1 + 0.8 * d / 364.0;
      rs.push_back(rec(kT0 + d * kDay, u01(rng) < p0 ? 0 : 1, id));
    }
  }
  const auto m = group_evolution(group_by_user(rs), sp, 4);
  for (std::size_t p = 1; p < 4; ++p) CHECK(m.rows[p][0] > m.rows[p - 1][0]);
  CHECK(m.rows[0][0] < 0.3);
  CHECK(m.rows[3][0] > 0.7);
}
