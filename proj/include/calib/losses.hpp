#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "calib/decode.hpp"
#include "calib/model.hpp"
#include "calib/quality.hpp"
#include "calib/task.hpp"

namespace calib {

/// Whether the z entering the Pearson objective is the sum or the
/// per-token-mean log-likelihood.
enum class ZMode { sum, mean };

inline std::string z_mode_name(ZMode m) { return m == ZMode::sum ? "sum" : "mean"; }
inline ZMode z_mode_from_name(const std::string& s) {
  if (s == "sum") return ZMode::sum;
  if (s == "mean") return ZMode::mean;
  throw ValidationError("unknown z_mode: " + s);
}

/// Groups with sigma below this are skipped (zero loss, zero gradient); a
/// 1/sigma gradient through a near-constant column would explode.
inline constexpr double kDegenerateSigma = 1e-12;

/// k hypotheses for one source with their log-likelihoods and quality scores
/// plus population (divide-by-k) group statistics.
template <class S>
struct HypothesisGroup {
  std::string source_id;
  VecX<S> z;
  VecX<S> q;
  S mu_z = S(0), sigma_z = S(0), mu_q = S(0), sigma_q = S(0);
  int best_index = 0;

  int k() const { return static_cast<int>(z.size()); }

  static HypothesisGroup build(std::string source_id, VecX<S> z, VecX<S> q) {
    require(z.size() == q.size(), "group: z and q must have equal length");
    require(z.size() >= 2, "group: k must be >= 2");
    HypothesisGroup g;
    g.source_id = std::move(source_id);
    g.z = std::move(z);
    g.q = std::move(q);
    g.mu_z = g.z.mean();
    g.sigma_z = std::sqrt((g.z.array() - g.mu_z).square().mean());
    g.mu_q = g.q.mean();
    g.sigma_q = std::sqrt((g.q.array() - g.mu_q).square().mean());
    g.best_index = 0;
    for (int i = 1; i < g.k(); ++i)
      if (g.q(i) > g.q(g.best_index)) g.best_index = i;
    return g;
  }

  bool degenerate() const {
    return sigma_z < static_cast<S>(kDegenerateSigma) ||
           sigma_q < static_cast<S>(kDegenerateSigma);
  }
};

template <class S>
struct PearsonLoss {
  S loss = S(0);
  VecX<S> dloss_dz;
  bool skipped = false;
};

/// Negative sample Pearson correlation between z and q, with the exact
/// analytic gradient in z (q treated as constant; mu_z and sigma_z
/// differentiated through). Degenerate groups return zero loss and gradient.
template <class S>
PearsonLoss<S> pearson_loss(const HypothesisGroup<S>& group) {
  require(group.k() >= 2, "pearson_loss: k must be >= 2");
  PearsonLoss<S> out;
  out.dloss_dz = VecX<S>::Zero(group.k());
  if (group.degenerate()) {
    out.skipped = true;
    return out;
  }
  const S k = static_cast<S>(group.k());
  const VecX<S> zt = ((group.z.array() - group.mu_z) / group.sigma_z).matrix();
  const VecX<S> qt = ((group.q.array() - group.mu_q) / group.sigma_q).matrix();
  S rho = zt.dot(qt) / k;
  rho = std::min(S(1), std::max(S(-1), rho));
  out.loss = -rho;
  // d(-rho)/dz_j = -(qt_j - rho * zt_j) / (k * sigma_z)
  out.dloss_dz = (-(qt.array() - rho * zt.array()) / (k * group.sigma_z)).matrix();
  return out;
}

/// Pearson as a dot product of mean-centered, l2-normalized vectors. Exists
/// solely as a standing cross-check against pearson_loss; rejects degenerate
/// groups because it divides by centered norms.
template <class S>
S pearson_dot_form(const HypothesisGroup<S>& group) {
  require(group.k() >= 2, "pearson_dot_form: k must be >= 2");
  require(!group.degenerate(), "pearson_dot_form: degenerate group");
  VecX<S> zc = (group.z.array() - group.z.mean()).matrix();
  VecX<S> qc = (group.q.array() - group.q.mean()).matrix();
  zc /= zc.norm();
  qc /= qc.norm();
  return zc.dot(qc);
}

struct LossValue {
  double total = 0.0;
  std::map<std::string, double> components;  // pearson, sft, preference
  int skipped_groups = 0;
};

/// Token-mean negative log-likelihood of a hypothesis's target segment.
template <class S>
S sft_loss(const Parameters<S>& params, const Pair& pair, const Hypothesis& best_hypothesis) {
  require(!best_hypothesis.tokens.empty(), "sft_loss: empty target");
  return -score_tokens(params, render_prompt(pair), best_hypothesis.tokens).avg;
}

namespace detail {
template <class S>
VecX<S> live_z(const Parameters<S>& params, const Tokens& prompt,
               const std::vector<Hypothesis>& hyps, ZMode z_mode) {
  VecX<S> z(static_cast<Eigen::Index>(hyps.size()));
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const SeqScore<S> s = score_tokens(params, prompt, hyps[i].tokens);
    z(static_cast<Eigen::Index>(i)) = z_mode == ZMode::sum ? s.sum : s.avg;
  }
  return z;
}

template <class S>
S softplus(S x) {
  return std::max(x, S(0)) + std::log1p(std::exp(-std::abs(x)));
}
}  // namespace detail

/// Calibration objective for one scored group: negative Pearson between live
/// z (recomputed under `params`) and frozen q, plus sft_weight times the SFT
/// regularizer on the group's best hypothesis. When `grads` is non-null the
/// exact parameter gradient, scaled by grad_scale, is accumulated into it.
template <class S>
LossValue cal_loss(const Parameters<S>& params, const Pair& pair,
                   const std::vector<Hypothesis>& hyps, const VecX<S>& q, S sft_weight,
                   ZMode z_mode = ZMode::sum, S grad_scale = S(1),
                   Parameters<S>* grads = nullptr) {
  require(sft_weight >= S(0), "cal_loss: sft_weight must be >= 0");
  require(hyps.size() >= 2, "cal_loss: k must be >= 2");
  const Tokens prompt = render_prompt(pair);
  const VecX<S> z = detail::live_z(params, prompt, hyps, z_mode);
  const auto group = HypothesisGroup<S>::build(pair.id, z, q);
  const PearsonLoss<S> pl = pearson_loss(group);

  const std::size_t best = static_cast<std::size_t>(group.best_index);
  const S best_len = static_cast<S>(hyps[best].tokens.size());

  // Per-hypothesis coefficients on d(sum_logprob)/dtheta.
  std::vector<S> coeff(hyps.size(), S(0));
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const S dz = pl.dloss_dz(static_cast<Eigen::Index>(i));
    coeff[i] = z_mode == ZMode::sum ? dz : dz / static_cast<S>(hyps[i].tokens.size());
  }
  coeff[best] += -sft_weight / best_len;  // d(-avg)/dsum = -1/len

  S sft_value = S(0);
  if (grads) {
    for (std::size_t i = 0; i < hyps.size(); ++i) {
      const SeqScore<S> s =
          accumulate_loglik_grad(params, prompt, hyps[i].tokens, coeff[i] * grad_scale, *grads);
      if (i == best) sft_value = -s.avg;
    }
  } else {
    sft_value = -score_tokens(params, prompt, hyps[best].tokens).avg;
  }

  LossValue out;
  out.components["pearson"] = static_cast<double>(pl.loss);
  out.components["sft"] = static_cast<double>(sft_value);
  out.components["preference"] = 0.0;
  out.total = static_cast<double>(pl.loss + sft_weight * sft_value);
  out.skipped_groups = pl.skipped ? 1 : 0;
  return out;
}

/// CPO-style baseline: -log sigmoid(beta * (mean-logprob(winner) -
/// mean-logprob(loser))) plus SFT on the winner. Winner/loser are the
/// highest/lowest scoring hypotheses (ties -> lowest index).
template <class S>
LossValue cpo_like_loss(const Parameters<S>& params, const Pair& pair,
                        const std::vector<Hypothesis>& hyps, const VecX<S>& q, S beta,
                        S grad_scale = S(1), Parameters<S>* grads = nullptr) {
  require(hyps.size() >= 2, "cpo_like_loss: k must be >= 2");
  require(q.size() == static_cast<Eigen::Index>(hyps.size()), "cpo_like_loss: q size mismatch");
  int winner = 0, loser = 0;
  for (int i = 1; i < static_cast<int>(hyps.size()); ++i) {
    if (q(i) > q(winner)) winner = i;
    if (q(i) < q(loser)) loser = i;
  }
  const Tokens prompt = render_prompt(pair);

  LossValue out;
  out.components["pearson"] = 0.0;
  if (winner == loser) {
    // All scores tied; no preference signal. Keep the SFT anchor only.
    const S sft_value = grads ? -accumulate_loglik_grad(
                                     params, prompt, hyps[static_cast<std::size_t>(winner)].tokens,
                                     -grad_scale / static_cast<S>(
                                                       hyps[static_cast<std::size_t>(winner)]
                                                           .tokens.size()),
                                     *grads)
                                     .avg
                              : -score_tokens(params, prompt,
                                              hyps[static_cast<std::size_t>(winner)].tokens)
                                     .avg;
    out.components["preference"] = 0.0;
    out.components["sft"] = static_cast<double>(sft_value);
    out.total = static_cast<double>(sft_value);
    out.skipped_groups = 1;
    return out;
  }

  const Tokens& wtoks = hyps[static_cast<std::size_t>(winner)].tokens;
  const Tokens& ltoks = hyps[static_cast<std::size_t>(loser)].tokens;
  const S wlen = static_cast<S>(wtoks.size());
  const S llen = static_cast<S>(ltoks.size());

  const S zw = score_tokens(params, prompt, wtoks).avg;
  const S zl = score_tokens(params, prompt, ltoks).avg;
  const S delta = zw - zl;
  const S pref = detail::softplus(-beta * delta);
  // d pref / d delta = -beta * sigmoid(-beta * delta)
  const S dpref_ddelta = -beta / (S(1) + std::exp(beta * delta));

  S sft_value;
  if (grads) {
    const S coeff_w = (dpref_ddelta / wlen - S(1) / wlen) * grad_scale;
    const S coeff_l = (-dpref_ddelta / llen) * grad_scale;
    sft_value = -accumulate_loglik_grad(params, prompt, wtoks, coeff_w, *grads).avg;
    accumulate_loglik_grad(params, prompt, ltoks, coeff_l, *grads);
  } else {
    sft_value = -zw;
  }

  out.components["preference"] = static_cast<double>(pref);
  out.components["sft"] = static_cast<double>(sft_value);
  out.total = static_cast<double>(pref + sft_value);
  return out;
}

/// Plain SFT on the group's best hypothesis (the "SFT on Best-of-N" baseline).
template <class S>
LossValue sft_bon_loss(const Parameters<S>& params, const Pair& pair,
                       const std::vector<Hypothesis>& hyps, const VecX<S>& q,
                       S grad_scale = S(1), Parameters<S>* grads = nullptr) {
  require(!hyps.empty(), "sft_bon_loss: empty group");
  require(q.size() == static_cast<Eigen::Index>(hyps.size()), "sft_bon_loss: q size mismatch");
  int best = 0;
  for (int i = 1; i < static_cast<int>(hyps.size()); ++i)
    if (q(i) > q(best)) best = i;
  const Tokens prompt = render_prompt(pair);
  const Tokens& toks = hyps[static_cast<std::size_t>(best)].tokens;
  const S len = static_cast<S>(toks.size());
  const S sft_value =
      grads ? -accumulate_loglik_grad(params, prompt, toks, -grad_scale / len, *grads).avg
            : -score_tokens(params, prompt, toks).avg;
  LossValue out;
  out.components["pearson"] = 0.0;
  out.components["preference"] = 0.0;
  out.components["sft"] = static_cast<double>(sft_value);
  out.total = static_cast<double>(sft_value);
  return out;
}

/// Token-mean NLL of the reference target; the MLE pretraining objective.
template <class S>
double mle_pair_loss(const Parameters<S>& params, const Pair& pair, S grad_scale = S(1),
                     Parameters<S>* grads = nullptr) {
  const Tokens prompt = render_prompt(pair);
  const Tokens target = training_target(pair);
  const S len = static_cast<S>(target.size());
  if (grads)
    return static_cast<double>(
        -accumulate_loglik_grad(params, prompt, target, -grad_scale / len, *grads).avg);
  return static_cast<double>(-score_tokens(params, prompt, target).avg);
}

}  // namespace calib
