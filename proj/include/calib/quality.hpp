#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "calib/decode.hpp"
#include "calib/rng.hpp"
#include "calib/task.hpp"

namespace calib {

struct QualityScore {
  double value = 0.0;
  std::string metric_id;
  std::string source_id;
};

struct OracleConfig {
  enum class Kind { ref_based_F, ref_free_rule, noisy_wrapper };
  Kind kind = Kind::ref_based_F;
  Kind base = Kind::ref_based_F;  // wrapped oracle when kind == noisy_wrapper
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    require(noise_sigma >= 0.0, "oracle: noise_sigma must be >= 0");
    if (kind == Kind::noisy_wrapper)
      require(base != Kind::noisy_wrapper, "oracle: wrapper cannot wrap a wrapper");
  }

  std::string metric_id() const {
    const auto name = [](Kind k) {
      return k == Kind::ref_based_F ? "ref_based_F" : "ref_free_rule";
    };
    if (kind != Kind::noisy_wrapper) return name(kind);
    if (noise_sigma == 0.0) return name(base);
    return std::string(name(base)) + "+noise";
  }
};

inline std::string oracle_kind_name(OracleConfig::Kind k) {
  switch (k) {
    case OracleConfig::Kind::ref_based_F: return "ref_based_F";
    case OracleConfig::Kind::ref_free_rule: return "ref_free_rule";
    default: return "noisy_wrapper";
  }
}

inline OracleConfig::Kind oracle_kind_from_name(const std::string& s) {
  if (s == "ref_based_F") return OracleConfig::Kind::ref_based_F;
  if (s == "ref_free_rule") return OracleConfig::Kind::ref_free_rule;
  if (s == "noisy_wrapper") return OracleConfig::Kind::noisy_wrapper;
  throw ValidationError("oracle: unknown kind " + s);
}

inline Json oracle_config_to_json(const OracleConfig& c) {
  return Json{{"kind", oracle_kind_name(c.kind)},
              {"base", oracle_kind_name(c.base)},
              {"noise_sigma", c.noise_sigma},
              {"seed", c.seed}};
}

inline OracleConfig oracle_config_from_json(const Json& j) {
  OracleConfig c;
  c.kind = oracle_kind_from_name(j.at("kind").get<std::string>());
  if (j.contains("base")) c.base = oracle_kind_from_name(j.at("base").get<std::string>());
  if (j.contains("noise_sigma")) c.noise_sigma = j.at("noise_sigma").get<double>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

namespace detail {

inline std::map<std::uint64_t, int> gram_counts(const Tokens& toks, int order) {
  std::map<std::uint64_t, int> counts;
  if (static_cast<int>(toks.size()) < order) return counts;
  for (std::size_t i = 0; i + static_cast<std::size_t>(order) <= toks.size(); ++i) {
    std::uint64_t key = 0;
    for (int g = 0; g < order; ++g)
      key = key << 20 | static_cast<std::uint64_t>(toks[i + static_cast<std::size_t>(g)]);
    ++counts[key];
  }
  return counts;
}

/// Multiset F1 at one gram order: 2*overlap / (|hyp grams| + |ref grams|).
/// Both sides empty counts as a perfect match so that hyp == ref scores 1.
inline double multiset_f1(const std::map<std::uint64_t, int>& h,
                          const std::map<std::uint64_t, int>& r) {
  std::size_t nh = 0, nr = 0;
  for (const auto& [k, c] : h) nh += static_cast<std::size_t>(c);
  for (const auto& [k, c] : r) nr += static_cast<std::size_t>(c);
  if (nh == 0 && nr == 0) return 1.0;
  if (nh == 0 || nr == 0) return 0.0;
  std::size_t overlap = 0;
  for (const auto& [k, c] : h) {
    auto it = r.find(k);
    if (it != r.end()) overlap += static_cast<std::size_t>(std::min(c, it->second));
  }
  return 2.0 * static_cast<double>(overlap) / static_cast<double>(nh + nr);
}

}  // namespace detail

/// Reference-based oracle: mean of unigram- and bigram-multiset F1 between
/// hypothesis and reference content tokens. Stands in for a reference-based
/// neural metric; penalizes synonym alternates.
inline double ref_based_F(const Tokens& hyp, const Tokens& ref) {
  const Tokens h = strip_control_tokens(hyp);
  const Tokens r = strip_control_tokens(ref);
  require(!r.empty(), "ref_based_F: empty reference");
  if (h.empty()) return 0.0;
  const double f1 = detail::multiset_f1(detail::gram_counts(h, 1), detail::gram_counts(r, 1));
  const double f2 = detail::multiset_f1(detail::gram_counts(h, 2), detail::gram_counts(r, 2));
  return 0.5 * (f1 + f2);
}

/// Reference-free oracle: positional accuracy against the valid-target sets
/// (synonym alternates accepted) times a length-ratio penalty.
inline double ref_free_rule(const Tokens& hyp, const Pair& pair) {
  require(!pair.valid_target_sets.empty(), "ref_free_rule: pair has no target sets");
  const Tokens h = strip_control_tokens(hyp);
  if (h.empty()) return 0.0;
  const std::size_t src_len = pair.valid_target_sets.size();
  const std::size_t m = std::min(h.size(), src_len);
  const std::size_t big = std::max(h.size(), src_len);
  std::size_t matches = 0;
  for (std::size_t j = 0; j < m; ++j) {
    const Tokens& set = pair.valid_target_sets[j];
    if (std::binary_search(set.begin(), set.end(), h[j])) ++matches;
  }
  return (static_cast<double>(matches) / static_cast<double>(m)) *
         (static_cast<double>(m) / static_cast<double>(big));
}

/// Applies the configured oracle to one hypothesis. Noise seeds are derived
/// from the hypothesis content, so scoring is permutation-equivariant even
/// with noise enabled.
inline double apply_oracle(const OracleConfig& oracle, const Tokens& hyp_tokens,
                           const Pair& pair) {
  oracle.validate();
  const OracleConfig::Kind base =
      oracle.kind == OracleConfig::Kind::noisy_wrapper ? oracle.base : oracle.kind;
  double value = base == OracleConfig::Kind::ref_based_F
                     ? ref_based_F(hyp_tokens, pair.reference)
                     : ref_free_rule(hyp_tokens, pair);
  if (oracle.kind == OracleConfig::Kind::noisy_wrapper && oracle.noise_sigma > 0.0) {
    const Tokens content = strip_control_tokens(hyp_tokens);
    const std::uint64_t content_hash =
        fnv1a64(content.data(), content.size() * sizeof(TokenId));
    Rng rng(derive_seed(oracle.seed, pair.id, content_hash));
    value += oracle.noise_sigma * rng.normal();
    value = std::clamp(value, 0.0, 1.0);
  }
  return value;
}

/// Element-wise oracle application over a sampled group; order preserved.
inline std::vector<QualityScore> score_group(const std::vector<Hypothesis>& group,
                                             const Pair& pair, const OracleConfig& oracle) {
  require(!group.empty(), "score_group: empty group");
  std::vector<QualityScore> scores;
  scores.reserve(group.size());
  const std::string id = oracle.metric_id();
  for (const auto& hyp : group)
    scores.push_back({apply_oracle(oracle, hyp.tokens, pair), id, pair.id});
  return scores;
}

/// Metric registry used by select/cross-metric evaluation.
inline double score_with_metric(const std::string& metric_id, const Tokens& hyp_tokens,
                                const Pair& pair) {
  if (metric_id == "ref_based_F") return ref_based_F(hyp_tokens, pair.reference);
  if (metric_id == "ref_free_rule") return ref_free_rule(hyp_tokens, pair);
  throw ValidationError("unknown metric_id: " + metric_id);
}

inline const std::vector<std::string>& registered_metrics() {
  static const std::vector<std::string> metrics{"ref_based_F", "ref_free_rule"};
  return metrics;
}

}  // namespace calib
