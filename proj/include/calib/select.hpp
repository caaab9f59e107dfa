#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "calib/decode.hpp"
#include "calib/quality.hpp"
#include "calib/task.hpp"

namespace calib {

/// Candidates for one source in original sampling order, plus a per-metric
/// score table whose rows align with the candidates.
struct CandidatePool {
  std::string source_id;
  std::vector<Hypothesis> candidates;
  std::map<std::string, std::vector<double>> scores;

  void validate() const {
    require(!candidates.empty(), "pool: empty candidate list");
    for (const auto& [metric, row] : scores)
      require(row.size() == candidates.size(), "pool: score row misaligned for " + metric);
  }
};

inline CandidatePool make_pool(const Pair& pair, std::vector<Hypothesis> candidates,
                               const std::vector<std::string>& metrics) {
  CandidatePool pool;
  pool.source_id = pair.id;
  pool.candidates = std::move(candidates);
  for (const auto& m : metrics) {
    auto& row = pool.scores[m];
    row.reserve(pool.candidates.size());
    for (const auto& h : pool.candidates) row.push_back(score_with_metric(m, h.tokens, pair));
  }
  pool.validate();
  return pool;
}

/// Index of the rerank-metric argmax over the first n candidates (pool order
/// is fixed at sampling time); ties go to the lowest index.
inline std::size_t best_of_n_index(const CandidatePool& pool, std::size_t n,
                                   const std::string& rerank_metric) {
  pool.validate();
  require(n >= 1 && n <= pool.candidates.size(), "best_of_n: n out of range");
  const auto it = pool.scores.find(rerank_metric);
  require(it != pool.scores.end(), "best_of_n: pool has no scores for " + rerank_metric);
  const auto& row = it->second;
  std::size_t best = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (row[i] > row[best]) best = i;
  return best;
}

inline const Hypothesis& best_of_n(const CandidatePool& pool, std::size_t n,
                                   const std::string& rerank_metric) {
  return pool.candidates[best_of_n_index(pool, n, rerank_metric)];
}

using PairwiseUtility = std::function<double(const Tokens&, const Tokens&)>;

/// ref_based_F applied pairwise; the default MBR utility.
inline double default_mbr_utility(const Tokens& candidate, const Tokens& pseudo_reference) {
  return ref_based_F(candidate, pseudo_reference);
}

/// Sampling-based MBR: argmax over candidates of mean utility against every
/// pool member as pseudo-reference (the candidate itself included); ties go
/// to the lowest index.
inline std::size_t mbr_index(const CandidatePool& pool,
                             const PairwiseUtility& utility = default_mbr_utility) {
  pool.validate();
  const std::size_t n = pool.candidates.size();
  std::size_t best = 0;
  double best_value = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    double sum = 0.0;
    for (std::size_t r = 0; r < n; ++r)
      sum += utility(pool.candidates[c].tokens, pool.candidates[r].tokens);
    const double value = sum / static_cast<double>(n);
    if (c == 0 || value > best_value) {
      best_value = value;
      best = c;
    }
  }
  return best;
}

inline const Hypothesis& mbr(const CandidatePool& pool,
                             const PairwiseUtility& utility = default_mbr_utility) {
  return pool.candidates[mbr_index(pool, utility)];
}

/// Mean of `metric` over one system's outputs, aligned with the test pairs.
/// This is the plain evaluation path every report goes through.
inline double mean_metric(const std::vector<Pair>& pairs, const std::vector<Hypothesis>& outputs,
                          const std::string& metric) {
  require(outputs.size() == pairs.size(), "mean_metric: outputs missing for some pairs");
  require(!pairs.empty(), "mean_metric: empty test split");
  double sum = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    require(outputs[i].source_id == pairs[i].id, "mean_metric: output misaligned at " + pairs[i].id);
    sum += score_with_metric(metric, outputs[i].tokens, pairs[i]);
  }
  return sum / static_cast<double>(pairs.size());
}

struct CrossMetricTable {
  std::vector<std::string> train_metrics;  // rows
  std::vector<std::string> eval_metrics;   // columns
  MatX<double> values;
};

/// Mean eval-metric score per (training-objective metric, eval metric) cell
/// over outputs of systems trained against each metric.
inline CrossMetricTable cross_metric_eval(
    const std::vector<Pair>& pairs,
    const std::vector<std::pair<std::string, const std::vector<Hypothesis>*>>& outputs_by_train,
    const std::vector<std::string>& eval_metrics) {
  CrossMetricTable table;
  table.eval_metrics = eval_metrics;
  table.values.resize(static_cast<Eigen::Index>(outputs_by_train.size()),
                      static_cast<Eigen::Index>(eval_metrics.size()));
  for (std::size_t r = 0; r < outputs_by_train.size(); ++r) {
    table.train_metrics.push_back(outputs_by_train[r].first);
    for (std::size_t c = 0; c < eval_metrics.size(); ++c)
      table.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
          mean_metric(pairs, *outputs_by_train[r].second, eval_metrics[c]);
  }
  return table;
}

}  // namespace calib
