#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "calib/model.hpp"
#include "calib/parallel.hpp"
#include "calib/rng.hpp"
#include "calib/task.hpp"

namespace calib {

struct SamplerConfig {
  double temperature = 1.0;
  double top_p = 0.98;
  int top_k = 0;  // 0 = unlimited
  int max_new_tokens = 14;
  std::uint64_t seed = 0;

  void validate() const {
    require(temperature > 0.0 && std::isfinite(temperature),
            "sampler: temperature must be > 0");
    require(top_p > 0.0 && top_p <= 1.0, "sampler: top_p must be in (0, 1]");
    require(top_k >= 0, "sampler: top_k must be >= 0 (0 = unlimited)");
    require(max_new_tokens >= 1, "sampler: max_new_tokens must be >= 1");
  }
};

inline Json sampler_config_to_json(const SamplerConfig& c) {
  return Json{{"temperature", c.temperature},
              {"top_p", c.top_p},
              {"top_k", c.top_k},
              {"max_new_tokens", c.max_new_tokens},
              {"seed", c.seed}};
}

inline SamplerConfig sampler_config_from_json(const Json& j) {
  SamplerConfig c;
  c.temperature = j.at("temperature").get<double>();
  c.top_p = j.at("top_p").get<double>();
  c.top_k = j.at("top_k").get<int>();
  c.max_new_tokens = j.at("max_new_tokens").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

/// A decoded or sampled target sequence. `tokens` includes the terminating
/// EOS unless the draw hit max_new_tokens first (then truncated is set).
/// Logprobs are temperature-1 model scores of exactly these tokens.
struct Hypothesis {
  std::string source_id;
  Tokens tokens;
  double sum_logprob = 0.0;
  double avg_logprob = 0.0;
  bool truncated = false;
};

inline Json hypothesis_to_json(const Hypothesis& h) {
  return Json{{"source_id", h.source_id},
              {"tokens", h.tokens},
              {"sum_logprob", h.sum_logprob},
              {"avg_logprob", h.avg_logprob},
              {"truncated", h.truncated}};
}

inline Hypothesis hypothesis_from_json(const Json& j) {
  Hypothesis h;
  h.source_id = j.at("source_id").get<std::string>();
  h.tokens = j.at("tokens").get<Tokens>();
  h.sum_logprob = j.at("sum_logprob").get<double>();
  h.avg_logprob = j.at("avg_logprob").get<double>();
  h.truncated = j.at("truncated").get<bool>();
  return h;
}

namespace detail {
template <class S>
VecX<S> ln_column(const VecX<S>& x, Eigen::Map<const MatX<S>> gain,
                  Eigen::Map<const MatX<S>> bias) {
  const S mu = x.mean();
  const S var = (x.array() - mu).square().mean();
  const S is = S(1) / std::sqrt(var + static_cast<S>(kLnEps));
  return (gain.col(0).array() * ((x.array() - mu) * is) + bias.col(0).array()).matrix();
}
}  // namespace detail

/// Single-position forward pass with per-layer key/value caches. Produces the
/// same values as the full forward up to floating-point reassociation; every
/// generation strategy below is built on it.
template <class S>
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const Parameters<S>& params) : params_(&params) {
    const ModelConfig& cfg = params.config;
    k_.assign(static_cast<std::size_t>(cfg.n_layers),
              MatX<S>(cfg.d_model, cfg.max_seq_len));
    v_ = k_;
    logits_.resize(cfg.vocab_size);
  }

  int position() const { return t_; }

  /// Consumes the token at the current position and returns the logits for
  /// the next position (valid until the next call).
  const VecX<S>& step(TokenId tok) {
    const ModelConfig& cfg = params_->config;
    const Parameters<S>& p = *params_;
    require(t_ < cfg.max_seq_len, "decode: exceeded max_seq_len");
    require(tok >= 0 && tok < cfg.vocab_size, "decode: token outside vocabulary");
    const Eigen::Index d = cfg.d_model;
    const int heads = cfg.n_heads;
    const Eigen::Index dh = d / heads;
    const S inv_sqrt_dh = S(1) / std::sqrt(static_cast<S>(dh));

    VecX<S> x = p.tok_emb().row(tok).transpose() + p.pos_emb().row(t_).transpose();
    for (int l = 0; l < cfg.n_layers; ++l) {
      const VecX<S> a = detail::ln_column<S>(x, p.ln1_g(l), p.ln1_b(l));
      VecX<S> q = p.wq(l) * a;
      k_[static_cast<std::size_t>(l)].col(t_).noalias() = p.wk(l) * a;
      v_[static_cast<std::size_t>(l)].col(t_).noalias() = p.wv(l) * a;
      VecX<S> o(d);
      for (int h = 0; h < heads; ++h) {
        const auto kh = k_[static_cast<std::size_t>(l)].middleRows(h * dh, dh).leftCols(t_ + 1);
        const auto vh = v_[static_cast<std::size_t>(l)].middleRows(h * dh, dh).leftCols(t_ + 1);
        VecX<S> scores = (kh.transpose() * q.segment(h * dh, dh)) * inv_sqrt_dh;
        const S mx = scores.maxCoeff();
        VecX<S> w = (scores.array() - mx).exp().matrix();
        w /= w.sum();
        o.segment(h * dh, dh).noalias() = vh * w;
      }
      VecX<S> x1 = x + p.wo(l) * o;
      const VecX<S> b = detail::ln_column<S>(x1, p.ln2_g(l), p.ln2_b(l));
      VecX<S> f = p.w1(l) * b + p.b1(l).col(0);
      for (Eigen::Index r = 0; r < f.size(); ++r)
        f(r) = detail::act_forward(f(r), cfg.nonlinearity);
      x = x1 + p.w2(l) * f + p.b2(l).col(0);
    }
    const VecX<S> hf = detail::ln_column<S>(x, p.final_ln_g(), p.final_ln_b());
    logits_.noalias() = p.tok_emb() * hf;
    ++t_;
    return logits_;
  }

  const VecX<S>& prime(const Tokens& prompt) {
    require(!prompt.empty(), "decode: empty prompt");
    const VecX<S>* out = nullptr;
    for (TokenId tok : prompt) out = &step(tok);
    return *out;
  }

 private:
  const Parameters<S>* params_;
  std::vector<MatX<S>> k_, v_;
  int t_ = 0;
  VecX<S> logits_;
};

namespace detail {

template <class S>
VecX<S> log_softmax(const VecX<S>& logits) {
  const S mx = logits.maxCoeff();
  const S lse = mx + std::log((logits.array() - mx).exp().sum());
  return (logits.array() - lse).matrix();
}

/// Candidate set for one sampling step: tokens inside the smallest
/// probability-sorted prefix with cumulative mass >= top_p (the crossing token
/// included), additionally capped to the top_k highest, then renormalized.
template <class S>
std::vector<std::pair<double, TokenId>> nucleus_candidates(const VecX<S>& logits,
                                                           const SamplerConfig& cfg) {
  const Eigen::Index v = logits.size();
  VecX<double> scaled = logits.template cast<double>() / cfg.temperature;
  const double mx = scaled.maxCoeff();
  VecX<double> probs = (scaled.array() - mx).exp().matrix();
  probs /= probs.sum();

  std::vector<std::pair<double, TokenId>> order(static_cast<std::size_t>(v));
  for (Eigen::Index i = 0; i < v; ++i)
    order[static_cast<std::size_t>(i)] = {probs(i), static_cast<TokenId>(i)};
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });

  std::size_t keep = order.size();
  double cum = 0.0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    cum += order[i].first;
    if (cum >= cfg.top_p) {
      keep = i + 1;
      break;
    }
  }
  if (cfg.top_k > 0) keep = std::min(keep, static_cast<std::size_t>(cfg.top_k));
  order.resize(keep);
  double mass = 0.0;
  for (const auto& [pr, tok] : order) mass += pr;
  for (auto& [pr, tok] : order) pr /= mass;
  return order;
}

}  // namespace detail

/// One nucleus/top-k draw. Deterministic given (params, prompt, cfg.seed,
/// source_id, draw_index); per-draw seeds are derived, never shared.
template <class S>
Hypothesis sample(const Parameters<S>& params, const Tokens& prompt, const SamplerConfig& cfg,
                  const std::string& source_id, std::uint64_t draw_index) {
  cfg.validate();
  IncrementalDecoder<S> dec(params);
  const VecX<S>* logits = &dec.prime(prompt);
  Rng rng(derive_seed(cfg.seed, source_id, draw_index));

  Hypothesis hyp;
  hyp.source_id = source_id;
  const int cap = std::min(cfg.max_new_tokens,
                           params.config.max_seq_len - static_cast<int>(prompt.size()));
  require(cap >= 1, "sample: prompt leaves no room to generate");

  S sum = S(0);
  bool terminated = false;
  for (int i = 0; i < cap; ++i) {
    const auto candidates = detail::nucleus_candidates(*logits, cfg);
    const double u = rng.uniform01();
    double cum = 0.0;
    TokenId chosen = candidates.back().second;
    for (const auto& [pr, tok] : candidates) {
      cum += pr;
      if (u < cum) {
        chosen = tok;
        break;
      }
    }
    assert(std::any_of(candidates.begin(), candidates.end(),
                       [&](const auto& c) { return c.second == chosen; }));
    sum += detail::log_softmax(*logits)(chosen);
    hyp.tokens.push_back(chosen);
    if (chosen == kEos) {
      terminated = true;
      break;
    }
    if (i + 1 < cap) logits = &dec.step(chosen);
  }
  hyp.truncated = !terminated;
  hyp.sum_logprob = static_cast<double>(sum);
  hyp.avg_logprob = hyp.sum_logprob / static_cast<double>(hyp.tokens.size());
  return hyp;
}

/// k independent draws; no deduplication (duplicates legitimately concentrate
/// probability mass).
template <class S>
std::vector<Hypothesis> sample_group(const Parameters<S>& params, const Tokens& prompt,
                                     const SamplerConfig& cfg, int k,
                                     const std::string& source_id) {
  require(k >= 1, "sample_group: k must be >= 1");
  std::vector<Hypothesis> group;
  group.reserve(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i)
    group.push_back(sample(params, prompt, cfg, source_id, static_cast<std::uint64_t>(i)));
  return group;
}

template <class S>
Hypothesis greedy_decode(const Parameters<S>& params, const Tokens& prompt,
                         const std::string& source_id, int max_new_tokens) {
  IncrementalDecoder<S> dec(params);
  const VecX<S>* logits = &dec.prime(prompt);
  Hypothesis hyp;
  hyp.source_id = source_id;
  const int cap =
      std::min(max_new_tokens, params.config.max_seq_len - static_cast<int>(prompt.size()));
  require(cap >= 1, "greedy_decode: prompt leaves no room to generate");
  S sum = S(0);
  bool terminated = false;
  for (int i = 0; i < cap; ++i) {
    TokenId best = 0;
    for (Eigen::Index v = 1; v < logits->size(); ++v)
      if ((*logits)(v) > (*logits)(best)) best = static_cast<TokenId>(v);
    sum += detail::log_softmax(*logits)(best);
    hyp.tokens.push_back(best);
    if (best == kEos) {
      terminated = true;
      break;
    }
    if (i + 1 < cap) logits = &dec.step(best);
  }
  hyp.truncated = !terminated;
  hyp.sum_logprob = static_cast<double>(sum);
  hyp.avg_logprob = hyp.sum_logprob / static_cast<double>(hyp.tokens.size());
  return hyp;
}

namespace detail {
inline double beam_rank_key(double sum, std::size_t len, double length_penalty) {
  if (length_penalty == 0.0) return sum;
  return sum / std::pow(static_cast<double>(len), length_penalty);
}
}  // namespace detail

/// Standard beam search over EOS-terminated sequences (beams that hit
/// max_new_tokens retire with the truncation flag). Ranking key is
/// sum_logprob / len^length_penalty, ties broken by lexicographically smaller
/// token sequence. With beam >= |V|^max_new_tokens this enumerates the whole
/// space, i.e. exact MAP on tiny spaces.
template <class S>
std::vector<Hypothesis> beam_search(const Parameters<S>& params, const Tokens& prompt,
                                    int beam, double length_penalty,
                                    const std::string& source_id, int max_new_tokens) {
  require(beam >= 1, "beam_search: beam must be >= 1");
  const int vocab = params.config.vocab_size;
  const int cap =
      std::min(max_new_tokens, params.config.max_seq_len - static_cast<int>(prompt.size()));
  require(cap >= 1, "beam_search: prompt leaves no room to generate");

  struct Live {
    Tokens tokens;
    S sum = S(0);
    IncrementalDecoder<S> dec;
    VecX<S> logprobs;
    explicit Live(const Parameters<S>& p) : dec(p) {}
  };
  struct Done {
    Tokens tokens;
    double sum = 0.0;
    bool truncated = false;
  };

  std::vector<Live> live;
  live.emplace_back(params);
  live[0].logprobs = detail::log_softmax(VecX<S>(live[0].dec.prime(prompt)));
  std::vector<Done> done;

  for (int step = 0; step < cap && !live.empty(); ++step) {
    struct Cand {
      std::size_t parent;
      TokenId tok;
      S sum;
    };
    std::vector<Cand> cands;
    cands.reserve(live.size() * static_cast<std::size_t>(vocab));
    for (std::size_t b = 0; b < live.size(); ++b)
      for (TokenId v = 0; v < vocab; ++v)
        cands.push_back({b, v, live[b].sum + live[b].logprobs(v)});
    std::sort(cands.begin(), cands.end(), [&](const Cand& a, const Cand& b) {
      if (a.sum != b.sum) return a.sum > b.sum;
      const Tokens& ta = live[a.parent].tokens;
      const Tokens& tb = live[b.parent].tokens;
      // Compare extended sequences lexicographically without materializing.
      const auto mismatch = std::mismatch(ta.begin(), ta.end(), tb.begin(), tb.end());
      if (mismatch.first != ta.end() && mismatch.second != tb.end())
        return *mismatch.first < *mismatch.second;
      if (mismatch.first == ta.end() && mismatch.second == tb.end()) return a.tok < b.tok;
      // One is a prefix of the other; the shorter one compares against tok.
      if (mismatch.first == ta.end()) return a.tok < *mismatch.second;
      return *mismatch.first < b.tok;
    });

    const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(beam), cands.size());
    std::vector<Live> next;
    next.reserve(take);
    for (std::size_t i = 0; i < take; ++i) {
      const Cand& c = cands[i];
      Tokens toks = live[c.parent].tokens;
      toks.push_back(c.tok);
      if (c.tok == kEos) {
        done.push_back({std::move(toks), static_cast<double>(c.sum), false});
      } else if (step + 1 == cap) {
        done.push_back({std::move(toks), static_cast<double>(c.sum), true});
      } else {
        Live nb(params);
        nb.tokens = std::move(toks);
        nb.sum = c.sum;
        nb.dec = live[c.parent].dec;
        nb.logprobs = detail::log_softmax(VecX<S>(nb.dec.step(c.tok)));
        next.push_back(std::move(nb));
      }
    }
    live = std::move(next);

    if (length_penalty == 0.0 && !done.empty() && !live.empty()) {
      double best_done = done[0].sum;
      for (const auto& d : done) best_done = std::max(best_done, d.sum);
      double best_live = static_cast<double>(live[0].sum);
      for (const auto& b : live) best_live = std::max(best_live, static_cast<double>(b.sum));
      if (best_done > best_live) break;
    }
  }

  std::sort(done.begin(), done.end(), [&](const Done& a, const Done& b) {
    const double ka = detail::beam_rank_key(a.sum, a.tokens.size(), length_penalty);
    const double kb = detail::beam_rank_key(b.sum, b.tokens.size(), length_penalty);
    if (ka != kb) return ka > kb;
    return std::lexicographical_compare(a.tokens.begin(), a.tokens.end(), b.tokens.begin(),
                                        b.tokens.end());
  });

  std::vector<Hypothesis> out;
  out.reserve(done.size());
  for (auto& d : done) {
    Hypothesis h;
    h.source_id = source_id;
    h.sum_logprob = d.sum;
    h.avg_logprob = d.sum / static_cast<double>(d.tokens.size());
    h.tokens = std::move(d.tokens);
    h.truncated = d.truncated;
    out.push_back(std::move(h));
  }
  return out;
}

/// Sampled pools for many sources, parallel across sources with per-source
/// derived seeds; results are identical for any thread count.
template <class S>
std::vector<std::vector<Hypothesis>> sample_pools(const Parameters<S>& params,
                                                  const std::vector<Pair>& pairs,
                                                  const SamplerConfig& cfg, int k, int threads) {
  std::vector<std::vector<Hypothesis>> pools(pairs.size());
  parallel_for(pairs.size(), threads, [&](std::size_t i) {
    pools[i] = sample_group(params, render_prompt(pairs[i]), cfg, k, pairs[i].id);
  });
  return pools;
}

inline void save_pool(const std::vector<std::vector<Hypothesis>>& pools,
                      const SamplerConfig& cfg, const std::filesystem::path& path) {
  JsonlWriter w(path);
  const Json sampler = sampler_config_to_json(cfg);
  for (const auto& group : pools)
    for (const auto& h : group) {
      Json row = hypothesis_to_json(h);
      row["sampler"] = sampler;
      w.append(row);
    }
}

/// Pools keyed by source_id, in file order.
inline std::vector<std::vector<Hypothesis>> load_pool(const std::filesystem::path& path,
                                                      std::vector<std::string>* source_order =
                                                          nullptr) {
  std::vector<std::vector<Hypothesis>> pools;
  std::string last_id;
  for (const auto& row : read_jsonl(path)) {
    Hypothesis h = hypothesis_from_json(row);
    if (pools.empty() || h.source_id != last_id) {
      last_id = h.source_id;
      if (source_order) source_order->push_back(last_id);
      pools.emplace_back();
    }
    pools.back().push_back(std::move(h));
  }
  return pools;
}

}  // namespace calib
