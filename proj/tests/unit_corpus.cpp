#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>

#include "doctest.h"
#include "userip/corpus.hpp"

using namespace userip;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  auto p = fs::temp_directory_path() / ("uip_corpus_" + std::to_string(::getpid()));
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("binarize threshold and monotonicity") {
  CHECK(binarize(4) == 1);
  CHECK(binarize(3) == 0);
  CHECK(binarize(1) == 0);
  CHECK(binarize(5) == 1);
  int prev = 0;
  for (int r = 1; r <= 5; ++r) {
    CHECK(binarize(r) >= prev);
    prev = binarize(r);
  }
  CHECK_THROWS_AS(binarize(0), Error);
  CHECK_THROWS_AS(binarize(6), Error);
}

TEST_CASE("generate_synthetic is deterministic and rejects degenerate affinity") {
  auto spec = make_planted_spec(2, {4, 3}, 120, 1.0, 7);
  Dataset a = generate_synthetic(spec, 50, 120, 99);
  Dataset b = generate_synthetic(spec, 50, 120, 99);
  REQUIRE(a.records.size() == b.records.size());
  for (size_t i = 0; i < a.records.size(); ++i) CHECK(a.records[i] == b.records[i]);

  PlantedProfileSpec bad = spec;
  auto& dist = bad.affinity[0][0];
  std::fill(dist.begin(), dist.end(), 0.0);
  dist[3] = 1.0;
  CHECK_THROWS_AS(generate_synthetic(bad, 10, 120, 1), Error);
}

TEST_CASE("zero rating boost leaves positive rates identical across planted classes") {
  auto spec = make_planted_spec(2, {4, 3}, 120, 1.0, 5);
  spec.rating_boost = 0.0;
  Dataset d = generate_synthetic(spec, 300, 120, 11);
  const auto& classes = d.planted_classes_for_eval();

  for (int m = 0; m < 2; ++m) {
    std::map<int, std::pair<long, long>> by_class;  // class -> (positives, total)
    for (const auto& r : d.records) {
      int c = classes[r.user_id][static_cast<size_t>(m)];
      by_class[c].first += binarize(r.rating);
      by_class[c].second += 1;
    }
    std::vector<std::pair<double, long>> rates;
    for (auto& [c, pn] : by_class)
      rates.push_back({static_cast<double>(pn.first) / pn.second, pn.second});
    for (size_t i = 0; i < rates.size(); ++i)
      for (size_t j = i + 1; j < rates.size(); ++j) {
        double p = (rates[i].first * rates[i].second + rates[j].first * rates[j].second) /
                   (rates[i].second + rates[j].second);
        double sigma = std::sqrt(p * (1 - p) * (1.0 / rates[i].second + 1.0 / rates[j].second));
        CHECK(std::abs(rates[i].first - rates[j].first) < 3.0 * sigma);
      }
  }
}

TEST_CASE("brute-force Bayes classifier recovers planted classes from items") {
  auto spec = make_planted_spec(2, {4, 3}, 300, 1.0, 21);
  spec.seq_len = 30;
  int n_users = 200;
  Dataset d = generate_synthetic(spec, n_users, 300, 31);
  const auto& classes = d.planted_classes_for_eval();

  // enumerate the posterior over joint classes under the known generative model
  int g1 = spec.class_counts[0], g2 = spec.class_counts[1];
  int hits_m1 = 0, hits_m2 = 0;
  for (int u = 0; u < n_users; ++u) {
    auto items = d.user_item_sequence(static_cast<uint32_t>(u));
    double best = -1e300;
    int best_c1 = 0, best_c2 = 0;
    for (int c1 = 0; c1 < g1; ++c1)
      for (int c2 = 0; c2 < g2; ++c2) {
        double ll = 0.0;
        for (int item : items) {
          double p = 0.5 * spec.mix_own *
                         (spec.affinity[0][static_cast<size_t>(c1)][static_cast<size_t>(item)] +
                          spec.affinity[1][static_cast<size_t>(c2)][static_cast<size_t>(item)]) +
                     (1.0 - spec.mix_own) * spec.background[static_cast<size_t>(item)];
          ll += std::log(p + 1e-300);
        }
        if (ll > best) {
          best = ll;
          best_c1 = c1;
          best_c2 = c2;
        }
      }
    hits_m1 += best_c1 == classes[static_cast<size_t>(u)][0];
    hits_m2 += best_c2 == classes[static_cast<size_t>(u)][1];
  }
  CHECK(static_cast<double>(hits_m1) / n_users > 0.9);
  CHECK(static_cast<double>(hits_m2) / n_users > 0.9);
}

TEST_CASE("filter_cold basics") {
  Dataset d;
  d.n_users = 5;
  d.n_items = 5;
  for (uint32_t u = 0; u < 5; ++u)
    for (uint32_t i = 0; i < 5; ++i) d.records.push_back({u, i, 4, static_cast<int64_t>(i)});
  Dataset f = filter_cold(d, 4);
  CHECK(f.records.size() == d.records.size());

  Dataset single;
  single.n_users = 1;
  single.n_items = 3;
  single.records = {{0, 0, 4, 0}, {0, 1, 4, 1}, {0, 2, 4, 2}};
  CHECK(filter_cold(single, 4).records.empty());
}

TEST_CASE("filter_cold cascades item removal into user removal") {
  // 6 records, min_count 2: item 1 is below threshold; dropping it pushes
  // user 0 below threshold, whose removal keeps everyone else valid
  Dataset d;
  d.n_users = 3;
  d.n_items = 3;
  d.records = {{0, 0, 4, 0}, {0, 1, 4, 1}, {1, 0, 4, 0}, {1, 2, 4, 1}, {2, 0, 4, 0}, {2, 2, 4, 1}};
  Dataset f = filter_cold(d, 2);
  CHECK(f.records.size() == 4);
  for (const auto& r : f.records) {
    CHECK(r.user_id != 0);
    CHECK(r.item_id != 1);
  }
  Dataset g = filter_cold(f, 2);
  CHECK(g.records.size() == f.records.size());
}

TEST_CASE("split apportions 8:1:1 per user and partitions the records") {
  Dataset d;
  d.n_users = 1;
  d.n_items = 10;
  for (uint32_t i = 0; i < 10; ++i) d.records.push_back({0, i, 4, static_cast<int64_t>(i)});
  Dataset s = split_dataset(d, {8, 1, 1}, 3);
  std::map<Fold, int> counts;
  for (Fold f : s.split) ++counts[f];
  CHECK(counts[Fold::train] == 8);
  CHECK(counts[Fold::valid] == 1);
  CHECK(counts[Fold::test] == 1);

  Dataset s2 = split_dataset(d, {8, 1, 1}, 3);
  for (size_t i = 0; i < s.split.size(); ++i) CHECK(s.split[i] == s2.split[i]);

  auto spec = make_planted_spec(2, {4, 3}, 200, 1.0, 2);
  spec.seq_len = 20;
  Dataset big = generate_synthetic(spec, 500, 200, 17);
  Dataset bs = split_dataset(big, {8, 1, 1}, 5);
  std::map<Fold, int> big_counts;
  for (Fold f : bs.split) ++big_counts[f];
  double n = static_cast<double>(bs.records.size());
  CHECK(std::abs(big_counts[Fold::train] / n - 0.8) < 0.01);
  CHECK(std::abs(big_counts[Fold::valid] / n - 0.1) < 0.01);
  CHECK(std::abs(big_counts[Fold::test] / n - 0.1) < 0.01);
  CHECK(big_counts[Fold::none] == 0);

  for (uint32_t u : bs.active_users()) CHECK(!bs.user_records(u, Fold::train).empty());
}

TEST_CASE("split keeps one training record even for tiny users") {
  Dataset d;
  d.n_users = 1;
  d.n_items = 2;
  d.records = {{0, 0, 4, 0}, {0, 1, 4, 1}};
  Dataset s = split_dataset(d, {8, 1, 1}, 1);
  int train = 0;
  for (Fold f : s.split) train += f == Fold::train;
  CHECK(train >= 1);
}

TEST_CASE("ingest handles empty, single-line, and mixed-validity files") {
  auto dir = temp_dir();
  auto p0 = dir / "empty.txt";
  write_text_file_atomic(p0, "");
  auto r0 = ingest_reviews(p0);
  CHECK(r0.dataset.records.empty());
  CHECK(r0.dataset.n_users == 0);

  auto p1 = dir / "one.txt";
  write_text_file_atomic(p1, "alice item_9 5 1000 great product\n");
  auto r1 = ingest_reviews(p1);
  REQUIRE(r1.dataset.records.size() == 1);
  CHECK(r1.dataset.records[0].rating == 5);
  CHECK(r1.user_names[0] == "alice");
  CHECK(r1.item_names[0] == "item_9");

  // 100 lines, 7 deliberately malformed
  std::ostringstream os;
  std::set<size_t> bad_lines{5, 17, 23, 42, 61, 78, 95};
  for (size_t line = 1; line <= 100; ++line) {
    if (bad_lines.count(line)) {
      switch (line % 3) {
        case 0: os << "only two\n"; break;
        case 1: os << "u" << line << " i" << line << " nine 123\n"; break;
        default: os << "u" << line << " i" << line << " 9 123\n"; break;  // rating out of range
      }
    } else {
      os << "u" << line << " i" << (line % 11) << " " << (line % 5 + 1) << " " << line << "\n";
    }
  }
  auto p2 = dir / "mixed.txt";
  write_text_file_atomic(p2, os.str());
  auto r2 = ingest_reviews(p2);
  CHECK(r2.dataset.records.size() == 93);
  REQUIRE(r2.issues.size() == 7);
  std::set<size_t> reported;
  for (const auto& issue : r2.issues) reported.insert(issue.line);
  CHECK(reported == bad_lines);
  fs::remove_all(dir);
}

TEST_CASE("dataset, split, and planted files round-trip with version headers") {
  auto dir = temp_dir();
  auto spec = make_planted_spec(2, {4, 3}, 60, 1.0, 3);
  spec.seq_len = 8;
  Dataset d = generate_synthetic(spec, 20, 60, 9);
  d = split_dataset(d, {8, 1, 1}, 4);

  save_dataset(dir / "data.tsv", d);
  save_split(dir / "split.tsv", d);
  save_planted(dir / "planted.tsv", d);

  Dataset loaded = load_dataset(dir / "data.tsv");
  REQUIRE(loaded.records.size() == d.records.size());
  for (size_t i = 0; i < d.records.size(); ++i) CHECK(loaded.records[i] == d.records[i]);
  CHECK(loaded.n_users == d.n_users);

  load_split(dir / "split.tsv", loaded);
  for (size_t i = 0; i < d.split.size(); ++i) CHECK(loaded.split[i] == d.split[i]);

  load_planted(dir / "planted.tsv", loaded);
  CHECK(loaded.planted_classes_for_eval() == d.planted_classes_for_eval());
  CHECK(loaded.planted_class_counts == d.planted_class_counts);

  write_text_file_atomic(dir / "noheader.tsv", "0\t1\t4\t0\n");
  CHECK_THROWS_AS(load_dataset(dir / "noheader.tsv"), Error);
  fs::remove_all(dir);
}

TEST_CASE("planted truth reads are counted for taint checks") {
  auto spec = make_planted_spec(2, {2, 2}, 40, 1.0, 3);
  spec.seq_len = 6;
  Dataset d = generate_synthetic(spec, 10, 40, 9);
  long before = d.planted_read_count();
  (void)d.planted_classes_for_eval();
  CHECK(d.planted_read_count() == before + 1);
}

TEST_CASE("user sequences come back in timestamp order") {
  Dataset d;
  d.n_users = 1;
  d.n_items = 5;
  d.records = {{0, 3, 4, 30}, {0, 1, 4, 10}, {0, 4, 4, 40}, {0, 2, 4, 20}};
  auto seq = d.user_item_sequence(0);
  CHECK(seq == std::vector<int>{1, 2, 3, 4});
}
