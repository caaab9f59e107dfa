#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "calib/common.hpp"
#include "calib/io.hpp"
#include "calib/rng.hpp"

namespace calib {

/// The synthetic translation task: the target is the reversed source with a
/// per-token substitution applied. A subset of source tokens additionally
/// carries a second acceptable target token ("synonym"), which only the
/// reference-free oracle accepts.
struct TaskSpec {
  int source_vocab_size = 12;
  int target_vocab_size = 20;
  // substitution_map[i] is the primary target token for source token (4 + i).
  std::vector<TokenId> substitution_map;
  // Sorted (source token, alternate target token) pairs.
  std::vector<std::pair<TokenId, TokenId>> synonyms;
  int min_len = 4;
  int max_len = 10;
  std::uint64_t seed = 0;

  TokenId first_source_token() const { return kNumControlTokens; }
  int combined_vocab_size() const {
    return kNumControlTokens + source_vocab_size + target_vocab_size;
  }
  bool is_source_token(TokenId t) const {
    return t >= first_source_token() && t < first_source_token() + source_vocab_size;
  }

  TokenId substitute(TokenId source_token) const {
    return substitution_map.at(static_cast<std::size_t>(source_token - first_source_token()));
  }

  const TokenId* synonym_alternate(TokenId source_token) const {
    auto it = std::lower_bound(synonyms.begin(), synonyms.end(), source_token,
                               [](const auto& p, TokenId t) { return p.first < t; });
    if (it != synonyms.end() && it->first == source_token) return &it->second;
    return nullptr;
  }

  void validate() const {
    require(source_vocab_size >= 2 && target_vocab_size >= 2,
            "task: vocab sizes must be >= 2");
    require(min_len >= 1 && min_len <= max_len, "task: need 1 <= min_len <= max_len");
    require(static_cast<int>(substitution_map.size()) == source_vocab_size,
            "task: substitution_map size must equal source_vocab_size");
    const TokenId hi = static_cast<TokenId>(combined_vocab_size());
    std::vector<TokenId> seen = substitution_map;
    std::sort(seen.begin(), seen.end());
    require(std::adjacent_find(seen.begin(), seen.end()) == seen.end(),
            "task: substitution_map must be a bijection (duplicate target)");
    for (TokenId t : substitution_map)
      require(t >= kNumControlTokens && t < hi, "task: substitution target out of range");
    std::vector<TokenId> alts;
    for (std::size_t i = 0; i < synonyms.size(); ++i) {
      const auto& [src, alt] = synonyms[i];
      require(is_source_token(src), "task: synonym key is not a source token");
      if (i > 0) require(synonyms[i - 1].first < src, "task: synonyms must be sorted, unique");
      require(alt >= kNumControlTokens && alt < hi, "task: synonym alternate out of range");
      require(std::find(substitution_map.begin(), substitution_map.end(), alt) ==
                  substitution_map.end(),
              "task: synonym alternate collides with a primary target");
      alts.push_back(alt);
    }
    std::sort(alts.begin(), alts.end());
    require(std::adjacent_find(alts.begin(), alts.end()) == alts.end(),
            "task: synonym alternates must be distinct");
  }
};

/// One translation instance.
struct Pair {
  std::string id;
  Tokens source;
  Tokens reference;
  std::vector<Tokens> valid_target_sets;  // per position, sorted ascending
};

struct DatasetSplit {
  TaskSpec task;
  std::vector<Pair> train;
  std::vector<Pair> valid;
  std::vector<Pair> test;
};

/// Default desk-scale task: disjoint source/target alphabets, 12+20 content
/// tokens (combined vocab 36 with the 4 control tokens), 4 synonym-bearing
/// source tokens.
inline TaskSpec default_task(std::uint64_t seed = 12345, int n_synonyms = 4) {
  TaskSpec task;
  task.seed = seed;
  require(n_synonyms >= 0 &&
              n_synonyms <= task.target_vocab_size - task.source_vocab_size,
          "default_task: too many synonyms for the target alphabet");
  const TokenId target_base =
      static_cast<TokenId>(kNumControlTokens + task.source_vocab_size);

  Rng rng(derive_seed(seed, "task-structure", 0));
  std::vector<int> target_perm(static_cast<std::size_t>(task.target_vocab_size));
  std::iota(target_perm.begin(), target_perm.end(), 0);
  for (std::size_t i = target_perm.size() - 1; i > 0; --i)
    std::swap(target_perm[i], target_perm[static_cast<std::size_t>(
                                  rng.uniform_int(0, static_cast<std::int64_t>(i)))]);

  task.substitution_map.resize(static_cast<std::size_t>(task.source_vocab_size));
  for (int i = 0; i < task.source_vocab_size; ++i)
    task.substitution_map[static_cast<std::size_t>(i)] =
        target_base + target_perm[static_cast<std::size_t>(i)];

  std::vector<int> source_perm(static_cast<std::size_t>(task.source_vocab_size));
  std::iota(source_perm.begin(), source_perm.end(), 0);
  for (std::size_t i = source_perm.size() - 1; i > 0; --i)
    std::swap(source_perm[i], source_perm[static_cast<std::size_t>(
                                  rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
  for (int s = 0; s < n_synonyms; ++s) {
    const TokenId src = task.first_source_token() + source_perm[static_cast<std::size_t>(s)];
    const TokenId alt =
        target_base + target_perm[static_cast<std::size_t>(task.source_vocab_size + s)];
    task.synonyms.emplace_back(src, alt);
  }
  std::sort(task.synonyms.begin(), task.synonyms.end());
  task.validate();
  return task;
}

/// Applies the transform law to a source sequence.
inline Pair make_pair(const TaskSpec& task, std::string id, Tokens source) {
  Pair p;
  p.id = std::move(id);
  p.source = std::move(source);
  const std::size_t n = p.source.size();
  p.reference.resize(n);
  p.valid_target_sets.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    const TokenId src_tok = p.source[n - 1 - j];
    require(task.is_source_token(src_tok), "make_pair: token outside source alphabet");
    const TokenId primary = task.substitute(src_tok);
    p.reference[j] = primary;
    Tokens set{primary};
    if (const TokenId* alt = task.synonym_alternate(src_tok)) set.push_back(*alt);
    std::sort(set.begin(), set.end());
    p.valid_target_sets[j] = std::move(set);
  }
  return p;
}

namespace detail {
inline std::string pair_id(const std::string& split, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s-%06d", split.c_str(), index);
  return std::string(buf);
}

inline std::vector<Pair> gen_split(const TaskSpec& task, const std::string& name, int count,
                                   std::uint64_t seed) {
  std::vector<Pair> pairs;
  pairs.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, name, static_cast<std::uint64_t>(i)));
    const int len = static_cast<int>(rng.uniform_int(task.min_len, task.max_len));
    Tokens source(static_cast<std::size_t>(len));
    for (auto& t : source)
      t = task.first_source_token() +
          static_cast<TokenId>(rng.uniform_int(0, task.source_vocab_size - 1));
    pairs.push_back(make_pair(task, pair_id(name, i), std::move(source)));
  }
  return pairs;
}
}  // namespace detail

inline DatasetSplit gen_dataset(const TaskSpec& task, int n_train, int n_valid, int n_test,
                                std::uint64_t seed) {
  task.validate();
  require(n_train >= 0 && n_valid >= 0 && n_test >= 0, "gen_dataset: counts must be >= 0");
  DatasetSplit split;
  split.task = task;
  split.train = detail::gen_split(task, "train", n_train, seed);
  split.valid = detail::gen_split(task, "valid", n_valid, seed);
  split.test = detail::gen_split(task, "test", n_test, seed);
  return split;
}

/// [BOS] + source + [SEP]. The model's target segment is everything after
/// SEP, up to and including EOS.
inline Tokens render_prompt(const Pair& pair) {
  require(!pair.source.empty(), "render_prompt: empty source");
  Tokens prompt;
  prompt.reserve(pair.source.size() + 2);
  prompt.push_back(kBos);
  for (TokenId t : pair.source) {
    require(!is_control_token(t), "render_prompt: control token in source");
    prompt.push_back(t);
  }
  prompt.push_back(kSep);
  return prompt;
}

/// The supervised target segment: reference tokens followed by EOS.
inline Tokens training_target(const Pair& pair) {
  Tokens t = pair.reference;
  t.push_back(kEos);
  return t;
}

// ---------------------------------------------------------------------------
// Persistence. Datasets are JSONL (one Pair per line) with a task.json
// sidecar; all integers decimal, arrays in row order.
// ---------------------------------------------------------------------------

inline Json task_to_json(const TaskSpec& t) {
  Json syn = Json::array();
  for (const auto& [src, alt] : t.synonyms) syn.push_back({src, alt});
  return Json{{"source_vocab_size", t.source_vocab_size},
              {"target_vocab_size", t.target_vocab_size},
              {"substitution_map", t.substitution_map},
              {"synonyms", syn},
              {"min_len", t.min_len},
              {"max_len", t.max_len},
              {"seed", t.seed}};
}

inline TaskSpec task_from_json(const Json& j) {
  TaskSpec t;
  t.source_vocab_size = j.at("source_vocab_size").get<int>();
  t.target_vocab_size = j.at("target_vocab_size").get<int>();
  t.substitution_map = j.at("substitution_map").get<std::vector<TokenId>>();
  for (const auto& row : j.at("synonyms"))
    t.synonyms.emplace_back(row.at(0).get<TokenId>(), row.at(1).get<TokenId>());
  t.min_len = j.at("min_len").get<int>();
  t.max_len = j.at("max_len").get<int>();
  t.seed = j.at("seed").get<std::uint64_t>();
  t.validate();
  return t;
}

inline Json pair_to_json(const Pair& p) {
  return Json{{"id", p.id},
              {"source", p.source},
              {"reference", p.reference},
              {"valid_target_sets", p.valid_target_sets}};
}

inline Pair pair_from_json(const Json& j) {
  Pair p;
  p.id = j.at("id").get<std::string>();
  p.source = j.at("source").get<Tokens>();
  p.reference = j.at("reference").get<Tokens>();
  p.valid_target_sets = j.at("valid_target_sets").get<std::vector<Tokens>>();
  return p;
}

inline void save_dataset(const DatasetSplit& split, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_json(dir / "task.json", task_to_json(split.task));
  const auto dump = [&](const std::vector<Pair>& pairs, const char* name) {
    JsonlWriter w(dir / name);
    for (const auto& p : pairs) w.append(pair_to_json(p));
  };
  dump(split.train, "train.jsonl");
  dump(split.valid, "valid.jsonl");
  dump(split.test, "test.jsonl");
}

inline DatasetSplit load_dataset(const std::filesystem::path& dir) {
  DatasetSplit split;
  split.task = task_from_json(read_json(dir / "task.json"));
  const auto load = [&](const char* name) {
    std::vector<Pair> pairs;
    for (const auto& row : read_jsonl(dir / name)) pairs.push_back(pair_from_json(row));
    return pairs;
  };
  split.train = load("train.jsonl");
  split.valid = load("valid.jsonl");
  split.test = load("test.jsonl");
  return split;
}

}  // namespace calib
