#include <doctest.h>

#include <set>

#include "calib/task.hpp"
#include "support/oracles.hpp"
#include "support/testutil.hpp"

using namespace calib;

TEST_CASE("default task layout is valid and disjoint") {
  const TaskSpec task = default_task(42);
  CHECK(task.combined_vocab_size() == 36);
  std::set<TokenId> primaries(task.substitution_map.begin(), task.substitution_map.end());
  CHECK(primaries.size() == static_cast<std::size_t>(task.source_vocab_size));
  for (TokenId t : primaries) CHECK(t >= 16);  // disjoint from source range [4,16)
  CHECK(task.synonyms.size() == 4);
  for (const auto& [src, alt] : task.synonyms) {
    CHECK(task.is_source_token(src));
    CHECK(primaries.count(alt) == 0);
  }
}

TEST_CASE("gen_dataset rejects bad configurations") {
  TaskSpec task = default_task(1);
  task.source_vocab_size = 1;
  task.substitution_map.resize(1);
  CHECK_THROWS_AS(gen_dataset(task, 1, 1, 1, 0), ValidationError);
  TaskSpec task2 = default_task(1);
  task2.min_len = 5;
  task2.max_len = 4;
  CHECK_THROWS_AS(gen_dataset(task2, 1, 1, 1, 0), ValidationError);
}

TEST_CASE("reversal law with identity substitution") {
  TaskSpec task;
  task.source_vocab_size = 3;
  task.target_vocab_size = 3;
  task.substitution_map = {4, 5, 6};  // identity on the source alphabet
  task.min_len = 1;
  task.max_len = 3;
  task.validate();
  const Pair p = make_pair(task, "x", {6, 4, 5});
  CHECK(p.reference == Tokens{5, 4, 6});
}

TEST_CASE("same task, counts and seed give byte-identical datasets") {
  const TaskSpec task = default_task(7);
  testutil::TempDir dir_a("data-a"), dir_b("data-b");
  save_dataset(gen_dataset(task, 20, 5, 5, 99), dir_a.path());
  save_dataset(gen_dataset(task, 20, 5, 5, 99), dir_b.path());
  for (const char* name : {"task.json", "train.jsonl", "valid.jsonl", "test.jsonl"})
    CHECK(read_file(dir_a.path() / name) == read_file(dir_b.path() / name));
}

TEST_CASE("inverse transform recovers the source for 1000 generated pairs") {
  const TaskSpec task = default_task(3);
  const DatasetSplit split = gen_dataset(task, 1000, 0, 0, 5);
  for (const auto& p : split.train) {
    CHECK(p.reference.size() == p.source.size());
    CHECK(oracles::inverse_transform(task, p.reference) == p.source);
    for (std::size_t j = 0; j < p.reference.size(); ++j) {
      const Tokens& set = p.valid_target_sets[j];
      CHECK(std::binary_search(set.begin(), set.end(), p.reference[j]));
    }
  }
}

TEST_CASE("splits are disjoint by id and sized as requested") {
  const DatasetSplit split = gen_dataset(default_task(11), 50, 20, 10, 1);
  CHECK(split.train.size() == 50);
  CHECK(split.valid.size() == 20);
  CHECK(split.test.size() == 10);
  std::set<std::string> ids;
  for (const auto* pairs : {&split.train, &split.valid, &split.test})
    for (const auto& p : *pairs) CHECK(ids.insert(p.id).second);
}

TEST_CASE("render_prompt wraps the source in BOS/SEP") {
  TaskSpec task = default_task(1);
  Pair p = make_pair(task, "p", {5, 7});
  CHECK(render_prompt(p) == Tokens{kBos, 5, 7, kSep});
  p.source.clear();
  CHECK_THROWS_AS(render_prompt(p), ValidationError);
}

TEST_CASE("render then strip control tokens recovers the source") {
  const DatasetSplit split = gen_dataset(default_task(13), 1000, 0, 0, 8);
  for (const auto& p : split.train) CHECK(strip_control_tokens(render_prompt(p)) == p.source);
}

TEST_CASE("synonym-ambiguous pair fraction matches the analytic rate") {
  const TaskSpec task = default_task(21);
  const int n = 2000;
  const DatasetSplit split = gen_dataset(task, n, 0, 0, 17);
  int ambiguous = 0;
  for (const auto& p : split.train) {
    bool any = false;
    for (const auto& set : p.valid_target_sets) any = any || set.size() > 1;
    ambiguous += any ? 1 : 0;
  }
  // P(pair has >= 1 synonym position) averaged over uniform lengths.
  const double clean_frac =
      static_cast<double>(task.source_vocab_size - static_cast<int>(task.synonyms.size())) /
      task.source_vocab_size;
  double p_amb = 0.0;
  for (int len = task.min_len; len <= task.max_len; ++len)
    p_amb += 1.0 - std::pow(clean_frac, len);
  p_amb /= static_cast<double>(task.max_len - task.min_len + 1);
  const double sigma = std::sqrt(p_amb * (1.0 - p_amb) / n);
  CHECK(std::abs(static_cast<double>(ambiguous) / n - p_amb) < 3.0 * sigma);
}

TEST_CASE("dataset save/load round trip") {
  testutil::TempDir dir("data-rt");
  const DatasetSplit split = gen_dataset(default_task(2), 12, 4, 4, 3);
  save_dataset(split, dir.path());
  const DatasetSplit loaded = load_dataset(dir.path());
  REQUIRE(loaded.train.size() == split.train.size());
  for (std::size_t i = 0; i < split.train.size(); ++i) {
    CHECK(loaded.train[i].id == split.train[i].id);
    CHECK(loaded.train[i].source == split.train[i].source);
    CHECK(loaded.train[i].reference == split.train[i].reference);
    CHECK(loaded.train[i].valid_target_sets == split.train[i].valid_target_sets);
  }
}
