#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "calib/checkpoint.hpp"
#include "calib/decode.hpp"
#include "calib/io.hpp"
#include "calib/parallel.hpp"
#include "calib/quality.hpp"
#include "calib/task.hpp"

namespace calib {

/// Pearson correlation with population estimators (matches the loss module's
/// divide-by-k convention). Zero-variance columns are an explicit error, not
/// a silent zero.
template <class DA, class DB>
double pearson(const Eigen::MatrixBase<DA>& a_expr, const Eigen::MatrixBase<DB>& b_expr) {
  const VecX<double> a = a_expr.template cast<double>();
  const VecX<double> b = b_expr.template cast<double>();
  require(a.size() == b.size(), "pearson: length mismatch");
  require(a.size() >= 2, "pearson: need n >= 2");
  const double mu_a = a.mean(), mu_b = b.mean();
  const double var_a = (a.array() - mu_a).square().mean();
  const double var_b = (b.array() - mu_b).square().mean();
  require(var_a > 0.0 && var_b > 0.0, "pearson: degenerate input (zero-variance column)");
  const double cov = ((a.array() - mu_a) * (b.array() - mu_b)).mean();
  return std::clamp(cov / std::sqrt(var_a * var_b), -1.0, 1.0);
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  return pearson(Eigen::Map<const VecX<double>>(a.data(), static_cast<Eigen::Index>(a.size())),
                 Eigen::Map<const VecX<double>>(b.data(), static_cast<Eigen::Index>(b.size())));
}

/// 1-based average ranks; tied values receive the mean of their rank range.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double mean_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (std::size_t t = i; t <= j; ++t) ranks[idx[t]] = mean_rank;
    i = j + 1;
  }
  return ranks;
}

/// Spearman's rho: Pearson applied to average ranks.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size(), "spearman: length mismatch");
  require(a.size() >= 2, "spearman: need n >= 2");
  return pearson(average_ranks(a), average_ranks(b));
}

template <class DA, class DB>
double spearman(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  const VecX<double> av = a.template cast<double>();
  const VecX<double> bv = b.template cast<double>();
  return spearman(std::vector<double>(av.data(), av.data() + av.size()),
                  std::vector<double>(bv.data(), bv.data() + bv.size()));
}

/// Number of tied pairs within one column: sum over tie groups of g*(g-1)/2.
inline std::int64_t tied_pairs(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  std::int64_t ties = 0;
  std::size_t i = 0;
  while (i < v.size()) {
    std::size_t j = i;
    while (j + 1 < v.size() && v[j + 1] == v[i]) ++j;
    const std::int64_t g = static_cast<std::int64_t>(j - i + 1);
    ties += g * (g - 1) / 2;
    i = j + 1;
  }
  return ties;
}

namespace detail {
/// Counts strict inversions (v[i] > v[j] for i < j) by merge sort.
inline std::int64_t count_inversions(std::vector<double>& v, std::vector<double>& scratch,
                                     std::size_t lo, std::size_t hi) {
  if (hi - lo <= 1) return 0;
  const std::size_t mid = lo + (hi - lo) / 2;
  std::int64_t count = count_inversions(v, scratch, lo, mid) +
                       count_inversions(v, scratch, mid, hi);
  std::size_t i = lo, j = mid, out = lo;
  while (i < mid && j < hi) {
    if (v[j] < v[i]) {
      count += static_cast<std::int64_t>(mid - i);
      scratch[out++] = v[j++];
    } else {
      scratch[out++] = v[i++];
    }
  }
  while (i < mid) scratch[out++] = v[i++];
  while (j < hi) scratch[out++] = v[j++];
  std::copy(scratch.begin() + static_cast<std::ptrdiff_t>(lo),
            scratch.begin() + static_cast<std::ptrdiff_t>(hi),
            v.begin() + static_cast<std::ptrdiff_t>(lo));
  return count;
}
}  // namespace detail

/// Kendall's tau-b via Knight's O(n log n) algorithm:
/// (C - D) / sqrt((n0 - n1)(n0 - n2)), pairs tied in both columns counted in
/// neither C nor D.
inline double kendall_tau_b(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size(), "kendall_tau_b: length mismatch");
  require(a.size() >= 2, "kendall_tau_b: need n >= 2");
  const std::size_t n = a.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) {
    if (a[i] != a[j]) return a[i] < a[j];
    return b[i] < b[j];
  });

  std::int64_t n1 = 0, n3 = 0;
  {
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && a[idx[j + 1]] == a[idx[i]]) ++j;
      const std::int64_t g = static_cast<std::int64_t>(j - i + 1);
      n1 += g * (g - 1) / 2;
      std::size_t u = i;
      while (u <= j) {
        std::size_t w = u;
        while (w + 1 <= j && b[idx[w + 1]] == b[idx[u]]) ++w;
        const std::int64_t gb = static_cast<std::int64_t>(w - u + 1);
        n3 += gb * (gb - 1) / 2;
        u = w + 1;
      }
      i = j + 1;
    }
  }

  std::vector<double> b_sorted(n);
  for (std::size_t i = 0; i < n; ++i) b_sorted[i] = b[idx[i]];
  const std::int64_t n2 = tied_pairs(b_sorted);
  std::vector<double> scratch(n);
  const std::int64_t discordant = detail::count_inversions(b_sorted, scratch, 0, n);

  const std::int64_t n0 = static_cast<std::int64_t>(n) * (static_cast<std::int64_t>(n) - 1) / 2;
  const std::int64_t concordant = n0 - n1 - n2 + n3 - discordant;
  require(n0 - n1 > 0 && n0 - n2 > 0, "kendall_tau_b: degenerate input (all-tied column)");
  return static_cast<double>(concordant - discordant) /
         std::sqrt(static_cast<double>(n0 - n1) * static_cast<double>(n0 - n2));
}

template <class DA, class DB>
double kendall_tau_b(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  const VecX<double> av = a.template cast<double>();
  const VecX<double> bv = b.template cast<double>();
  return kendall_tau_b(std::vector<double>(av.data(), av.data() + av.size()),
                       std::vector<double>(bv.data(), bv.data() + bv.size()));
}

struct CorrelationReport {
  double pearson = 0.0;
  double spearman = 0.0;
  double kendall_tau_b = 0.0;
  std::int64_t n = 0;
  std::int64_t ties_a = 0;
  std::int64_t ties_b = 0;
  std::string column_a;  // provenance of the two score columns
  std::string column_b;
};

inline CorrelationReport correlation_report(const std::vector<double>& a,
                                            const std::vector<double>& b, std::string column_a,
                                            std::string column_b) {
  CorrelationReport r;
  r.pearson = pearson(a, b);
  r.spearman = spearman(a, b);
  r.kendall_tau_b = kendall_tau_b(a, b);
  r.n = static_cast<std::int64_t>(a.size());
  r.ties_a = tied_pairs(a);
  r.ties_b = tied_pairs(b);
  r.column_a = std::move(column_a);
  r.column_b = std::move(column_b);
  return r;
}

inline Json correlation_report_to_json(const CorrelationReport& r) {
  return Json{{"pearson", r.pearson},
              {"spearman", r.spearman},
              {"kendall_tau_b", r.kendall_tau_b},
              {"n", r.n},
              {"tie_counts", Json{{"a", r.ties_a}, {"b", r.ties_b}}},
              {"columns", Json{{"a", r.column_a}, {"b", r.column_b}}}};
}

/// Quality estimation by likelihood: correlates the model's avg_logprob with
/// a gold oracle over a fixed hypothesis pool. Column a is always the
/// length-normalized log-likelihood.
template <class S>
CorrelationReport qe_eval(const Checkpoint<S>& model, const std::vector<Pair>& pairs,
                          const std::vector<std::vector<Hypothesis>>& pools,
                          const std::string& gold_metric, int threads = 1) {
  require(pairs.size() == pools.size(), "qe_eval: pairs/pools size mismatch");
  std::vector<std::vector<double>> a_parts(pairs.size()), b_parts(pairs.size());
  parallel_for(pairs.size(), threads, [&](std::size_t i) {
    const Tokens prompt = render_prompt(pairs[i]);
    for (const auto& hyp : pools[i]) {
      a_parts[i].push_back(
          static_cast<double>(score_tokens(model.params, prompt, hyp.tokens).avg));
      b_parts[i].push_back(score_with_metric(gold_metric, hyp.tokens, pairs[i]));
    }
  });
  std::vector<double> a, b;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    a.insert(a.end(), a_parts[i].begin(), a_parts[i].end());
    b.insert(b.end(), b_parts[i].begin(), b_parts[i].end());
  }
  return correlation_report(a, b, "avg_logprob@" + model.provenance.run_id, gold_metric);
}

}  // namespace calib
