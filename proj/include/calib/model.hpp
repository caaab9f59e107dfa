#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "calib/common.hpp"
#include "calib/io.hpp"
#include "calib/rng.hpp"

namespace calib {

struct ModelConfig {
  int vocab_size = 36;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 128;
  int max_seq_len = 32;
  double init_scale = 0.08;
  enum class Nonlinearity { relu, gelu };
  Nonlinearity nonlinearity = Nonlinearity::gelu;

  void validate() const {
    require(vocab_size >= 1 && d_model >= 1 && n_layers >= 1 && n_heads >= 1 && d_ff >= 1 &&
                max_seq_len >= 1,
            "model: all counts must be >= 1");
    require(d_model % n_heads == 0, "model: d_model must be divisible by n_heads");
    require(init_scale >= 0.0 && std::isfinite(init_scale),
            "model: init_scale must be finite and >= 0");
  }
};

inline Json model_config_to_json(const ModelConfig& c) {
  return Json{{"vocab_size", c.vocab_size},
              {"d_model", c.d_model},
              {"n_layers", c.n_layers},
              {"n_heads", c.n_heads},
              {"d_ff", c.d_ff},
              {"max_seq_len", c.max_seq_len},
              {"init_scale", c.init_scale},
              {"nonlinearity",
               c.nonlinearity == ModelConfig::Nonlinearity::relu ? "relu" : "gelu"}};
}

inline ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.init_scale = j.at("init_scale").get<double>();
  const std::string nl = j.at("nonlinearity").get<std::string>();
  require(nl == "relu" || nl == "gelu", "model: unknown nonlinearity " + nl);
  c.nonlinearity =
      nl == "relu" ? ModelConfig::Nonlinearity::relu : ModelConfig::Nonlinearity::gelu;
  c.validate();
  return c;
}

struct TensorSpec {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index offset = 0;  // element offset into the flat parameter vector
};

/// Flat-vector layout of every parameter tensor, in declared order. The order
/// is also the checkpoint data order.
class ParamLayout {
 public:
  explicit ParamLayout(const ModelConfig& cfg) {
    const auto add = [this](const std::string& name, Eigen::Index r, Eigen::Index c) {
      tensors_.push_back({name, r, c, total_});
      total_ += r * c;
    };
    add("tok_emb", cfg.vocab_size, cfg.d_model);
    add("pos_emb", cfg.max_seq_len, cfg.d_model);
    for (int l = 0; l < cfg.n_layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      add(p + "ln1_g", cfg.d_model, 1);
      add(p + "ln1_b", cfg.d_model, 1);
      add(p + "wq", cfg.d_model, cfg.d_model);
      add(p + "wk", cfg.d_model, cfg.d_model);
      add(p + "wv", cfg.d_model, cfg.d_model);
      add(p + "wo", cfg.d_model, cfg.d_model);
      add(p + "ln2_g", cfg.d_model, 1);
      add(p + "ln2_b", cfg.d_model, 1);
      add(p + "w1", cfg.d_ff, cfg.d_model);
      add(p + "b1", cfg.d_ff, 1);
      add(p + "w2", cfg.d_model, cfg.d_ff);
      add(p + "b2", cfg.d_model, 1);
    }
    add("final_ln_g", cfg.d_model, 1);
    add("final_ln_b", cfg.d_model, 1);
  }

  const std::vector<TensorSpec>& tensors() const { return tensors_; }
  Eigen::Index total_size() const { return total_; }

  // Fixed indices: 0 tok_emb, 1 pos_emb, then 12 tensors per layer.
  static constexpr int kPerLayer = 12;
  int layer_base(int layer) const { return 2 + layer * kPerLayer; }
  int final_ln_g_index() const { return static_cast<int>(tensors_.size()) - 2; }

 private:
  std::vector<TensorSpec> tensors_;
  Eigen::Index total_ = 0;
};

/// Full parameter set as one flat vector plus named matrix views. Tied
/// embeddings: `tok_emb` is both the input embedding table and the output
/// projection.
template <class S>
struct Parameters {
  ModelConfig config;
  ParamLayout layout;
  VecX<S> flat;

  explicit Parameters(const ModelConfig& cfg)
      : config(cfg), layout(cfg), flat(VecX<S>::Zero(ParamLayout(cfg).total_size())) {
    cfg.validate();
  }

  Eigen::Index size() const { return flat.size(); }

  Eigen::Map<MatX<S>> map(int idx) {
    const TensorSpec& t = layout.tensors()[static_cast<std::size_t>(idx)];
    return Eigen::Map<MatX<S>>(flat.data() + t.offset, t.rows, t.cols);
  }
  Eigen::Map<const MatX<S>> map(int idx) const {
    const TensorSpec& t = layout.tensors()[static_cast<std::size_t>(idx)];
    return Eigen::Map<const MatX<S>>(flat.data() + t.offset, t.rows, t.cols);
  }

  Eigen::Map<MatX<S>> tok_emb() { return map(0); }
  Eigen::Map<const MatX<S>> tok_emb() const { return map(0); }
  Eigen::Map<MatX<S>> pos_emb() { return map(1); }
  Eigen::Map<const MatX<S>> pos_emb() const { return map(1); }

  // Per-layer tensor accessors, offsets matching ParamLayout declaration order.
  Eigen::Map<const MatX<S>> ln1_g(int l) const { return map(layout.layer_base(l) + 0); }
  Eigen::Map<const MatX<S>> ln1_b(int l) const { return map(layout.layer_base(l) + 1); }
  Eigen::Map<const MatX<S>> wq(int l) const { return map(layout.layer_base(l) + 2); }
  Eigen::Map<const MatX<S>> wk(int l) const { return map(layout.layer_base(l) + 3); }
  Eigen::Map<const MatX<S>> wv(int l) const { return map(layout.layer_base(l) + 4); }
  Eigen::Map<const MatX<S>> wo(int l) const { return map(layout.layer_base(l) + 5); }
  Eigen::Map<const MatX<S>> ln2_g(int l) const { return map(layout.layer_base(l) + 6); }
  Eigen::Map<const MatX<S>> ln2_b(int l) const { return map(layout.layer_base(l) + 7); }
  Eigen::Map<const MatX<S>> w1(int l) const { return map(layout.layer_base(l) + 8); }
  Eigen::Map<const MatX<S>> b1(int l) const { return map(layout.layer_base(l) + 9); }
  Eigen::Map<const MatX<S>> w2(int l) const { return map(layout.layer_base(l) + 10); }
  Eigen::Map<const MatX<S>> b2(int l) const { return map(layout.layer_base(l) + 11); }
  Eigen::Map<const MatX<S>> final_ln_g() const { return map(layout.final_ln_g_index()); }
  Eigen::Map<const MatX<S>> final_ln_b() const { return map(layout.final_ln_g_index() + 1); }

  Eigen::Map<MatX<S>> ln1_g(int l) { return map(layout.layer_base(l) + 0); }
  Eigen::Map<MatX<S>> ln1_b(int l) { return map(layout.layer_base(l) + 1); }
  Eigen::Map<MatX<S>> wq(int l) { return map(layout.layer_base(l) + 2); }
  Eigen::Map<MatX<S>> wk(int l) { return map(layout.layer_base(l) + 3); }
  Eigen::Map<MatX<S>> wv(int l) { return map(layout.layer_base(l) + 4); }
  Eigen::Map<MatX<S>> wo(int l) { return map(layout.layer_base(l) + 5); }
  Eigen::Map<MatX<S>> ln2_g(int l) { return map(layout.layer_base(l) + 6); }
  Eigen::Map<MatX<S>> ln2_b(int l) { return map(layout.layer_base(l) + 7); }
  Eigen::Map<MatX<S>> w1(int l) { return map(layout.layer_base(l) + 8); }
  Eigen::Map<MatX<S>> b1(int l) { return map(layout.layer_base(l) + 9); }
  Eigen::Map<MatX<S>> w2(int l) { return map(layout.layer_base(l) + 10); }
  Eigen::Map<MatX<S>> b2(int l) { return map(layout.layer_base(l) + 11); }
  Eigen::Map<MatX<S>> final_ln_g() { return map(layout.final_ln_g_index()); }
  Eigen::Map<MatX<S>> final_ln_b() { return map(layout.final_ln_g_index() + 1); }

  /// Name of the first tensor containing a non-finite value, or empty.
  std::string first_non_finite() const {
    for (const auto& t : layout.tensors()) {
      const auto seg = flat.segment(t.offset, t.rows * t.cols);
      if (!seg.allFinite()) return t.name;
    }
    return {};
  }
};

/// Gaussian init with std `init_scale` for embeddings and weight matrices;
/// LayerNorm gains 1, all biases 0. Draw order follows the layout.
template <class S>
Parameters<S> init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  Parameters<S> p(cfg);
  Rng rng(derive_seed(seed, "model-init", 0));
  const S scale = static_cast<S>(cfg.init_scale);
  for (std::size_t i = 0; i < p.layout.tensors().size(); ++i) {
    const std::string& name = p.layout.tensors()[i].name;
    auto m = p.map(static_cast<int>(i));
    const bool is_gain = name.size() >= 2 && name.substr(name.size() - 2) == "_g";
    const bool is_bias = (name.size() >= 2 && name.substr(name.size() - 2) == "_b") ||
                         name.find(".b") != std::string::npos;
    if (is_gain) {
      m.setOnes();
    } else if (is_bias) {
      m.setZero();
    } else {
      for (Eigen::Index c = 0; c < m.cols(); ++c)
        for (Eigen::Index r = 0; r < m.rows(); ++r)
          m(r, c) = scale * static_cast<S>(rng.normal());
    }
  }
  return p;
}

namespace detail {

inline constexpr double kLnEps = 1e-5;

template <class S>
S act_forward(S x, ModelConfig::Nonlinearity nl) {
  if (nl == ModelConfig::Nonlinearity::relu) return x > S(0) ? x : S(0);
  const S inv_sqrt2 = static_cast<S>(0.70710678118654752440);
  return S(0.5) * x * (S(1) + std::erf(x * inv_sqrt2));
}

template <class S>
S act_backward(S x, ModelConfig::Nonlinearity nl) {
  if (nl == ModelConfig::Nonlinearity::relu) return x > S(0) ? S(1) : S(0);
  const S inv_sqrt2 = static_cast<S>(0.70710678118654752440);
  const S inv_sqrt2pi = static_cast<S>(0.39894228040143267794);
  const S phi = S(0.5) * (S(1) + std::erf(x * inv_sqrt2));
  const S pdf = inv_sqrt2pi * std::exp(S(-0.5) * x * x);
  return phi + x * pdf;
}

/// Column-wise LayerNorm. Caches xhat and 1/std for the backward pass.
template <class S>
void layer_norm_forward(const MatX<S>& x, Eigen::Map<const MatX<S>> gain,
                        Eigen::Map<const MatX<S>> bias, MatX<S>& out, MatX<S>& xhat,
                        VecX<S>& inv_std) {
  const Eigen::Index d = x.rows(), n = x.cols();
  out.resize(d, n);
  xhat.resize(d, n);
  inv_std.resize(n);
  for (Eigen::Index t = 0; t < n; ++t) {
    const S mu = x.col(t).mean();
    const S var = (x.col(t).array() - mu).square().mean();
    const S is = S(1) / std::sqrt(var + static_cast<S>(kLnEps));
    inv_std(t) = is;
    xhat.col(t) = (x.col(t).array() - mu).matrix() * is;
    out.col(t) = gain.col(0).cwiseProduct(xhat.col(t)) + bias.col(0);
  }
}

/// Backward of layer_norm_forward. Accumulates into dgain/dbias, returns dx.
template <class S>
MatX<S> layer_norm_backward(const MatX<S>& dy, const MatX<S>& xhat, const VecX<S>& inv_std,
                            Eigen::Map<const MatX<S>> gain, Eigen::Map<MatX<S>> dgain,
                            Eigen::Map<MatX<S>> dbias) {
  const Eigen::Index d = dy.rows(), n = dy.cols();
  MatX<S> dx(d, n);
  for (Eigen::Index t = 0; t < n; ++t) {
    dgain.col(0) += dy.col(t).cwiseProduct(xhat.col(t));
    dbias.col(0) += dy.col(t);
    const VecX<S> dxhat = dy.col(t).cwiseProduct(gain.col(0));
    const S m1 = dxhat.mean();
    const S m2 = dxhat.cwiseProduct(xhat.col(t)).mean();
    dx.col(t) = inv_std(t) * (dxhat.array() - m1 - xhat.col(t).array() * m2).matrix();
  }
  return dx;
}

}  // namespace detail

template <class S>
struct LayerCache {
  MatX<S> ln1_xhat, a, q, k, v, o, x1;
  VecX<S> ln1_inv_std;
  std::vector<MatX<S>> attn;  // per head, row i holds softmax over keys 0..i
  MatX<S> ln2_xhat, b, ff_pre, ff_act, x2;
  VecX<S> ln2_inv_std;
};

template <class S>
struct ForwardCache {
  Tokens tokens;
  MatX<S> x0;
  std::vector<LayerCache<S>> layers;
  MatX<S> lnf_xhat, hf, logits;
  VecX<S> lnf_inv_std;
};

template <class S>
void check_tokens(const Parameters<S>& params, const Tokens& tokens) {
  require(!tokens.empty(), "model: empty token sequence");
  require(static_cast<int>(tokens.size()) <= params.config.max_seq_len,
          "model: sequence longer than max_seq_len");
  for (TokenId t : tokens)
    require(t >= 0 && t < params.config.vocab_size, "model: token outside vocabulary");
}

/// Full forward pass with cached activations. Row t of `logits` depends only
/// on tokens[0..t]; per-position arithmetic is independent of sequence length
/// so prefix invariance is exact.
template <class S>
void forward_cache(const Parameters<S>& params, const Tokens& tokens, ForwardCache<S>& cache) {
  check_tokens(params, tokens);
  const ModelConfig& cfg = params.config;
  const Eigen::Index d = cfg.d_model, n = static_cast<Eigen::Index>(tokens.size());
  const int heads = cfg.n_heads;
  const Eigen::Index dh = d / heads;
  const S inv_sqrt_dh = S(1) / std::sqrt(static_cast<S>(dh));

  cache.tokens = tokens;
  cache.x0.resize(d, n);
  for (Eigen::Index t = 0; t < n; ++t)
    cache.x0.col(t) = params.tok_emb().row(tokens[static_cast<std::size_t>(t)]).transpose() +
                      params.pos_emb().row(t).transpose();

  cache.layers.assign(static_cast<std::size_t>(cfg.n_layers), LayerCache<S>{});
  const MatX<S>* x = &cache.x0;
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerCache<S>& lc = cache.layers[static_cast<std::size_t>(l)];
    detail::layer_norm_forward(*x, params.ln1_g(l), params.ln1_b(l), lc.a, lc.ln1_xhat,
                               lc.ln1_inv_std);
    lc.q.noalias() = params.wq(l) * lc.a;
    lc.k.noalias() = params.wk(l) * lc.a;
    lc.v.noalias() = params.wv(l) * lc.a;
    lc.o.resize(d, n);
    lc.attn.assign(static_cast<std::size_t>(heads), MatX<S>::Zero(n, n));
    for (int h = 0; h < heads; ++h) {
      const auto qh = lc.q.middleRows(h * dh, dh);
      const auto kh = lc.k.middleRows(h * dh, dh);
      const auto vh = lc.v.middleRows(h * dh, dh);
      MatX<S>& p = lc.attn[static_cast<std::size_t>(h)];
      for (Eigen::Index i = 0; i < n; ++i) {
        VecX<S> scores = (kh.leftCols(i + 1).transpose() * qh.col(i)) * inv_sqrt_dh;
        const S mx = scores.maxCoeff();
        VecX<S> ex = (scores.array() - mx).exp().matrix();
        ex /= ex.sum();
        p.row(i).head(i + 1) = ex.transpose();
        lc.o.col(i).segment(h * dh, dh).noalias() = vh.leftCols(i + 1) * ex;
      }
    }
    lc.x1 = *x + params.wo(l) * lc.o;
    detail::layer_norm_forward(lc.x1, params.ln2_g(l), params.ln2_b(l), lc.b, lc.ln2_xhat,
                               lc.ln2_inv_std);
    lc.ff_pre.noalias() = params.w1(l) * lc.b;
    lc.ff_pre.colwise() += params.b1(l).col(0);
    lc.ff_act = lc.ff_pre.unaryExpr(
        [&cfg](S v) { return detail::act_forward(v, cfg.nonlinearity); });
    lc.x2.noalias() = params.w2(l) * lc.ff_act;
    lc.x2.colwise() += params.b2(l).col(0);
    lc.x2 += lc.x1;
    x = &lc.x2;
  }

  detail::layer_norm_forward(*x, params.final_ln_g(), params.final_ln_b(), cache.hf,
                             cache.lnf_xhat, cache.lnf_inv_std);
  cache.logits.noalias() = params.tok_emb() * cache.hf;
}

/// Per-position logit rows (vocab_size x len), column t predicting token t+1.
template <class S>
MatX<S> forward_logits(const Parameters<S>& params, const Tokens& tokens) {
  ForwardCache<S> cache;
  forward_cache(params, tokens, cache);
  return cache.logits;
}

/// Reverse-mode pass from dL/dlogits; accumulates dL/dtheta into `grads`.
template <class S>
void backward(const Parameters<S>& params, const ForwardCache<S>& cache, const MatX<S>& dlogits,
              Parameters<S>& grads) {
  const ModelConfig& cfg = params.config;
  const Eigen::Index d = cfg.d_model, n = static_cast<Eigen::Index>(cache.tokens.size());
  const int heads = cfg.n_heads;
  const Eigen::Index dh = d / heads;
  const S inv_sqrt_dh = S(1) / std::sqrt(static_cast<S>(dh));

  // Output projection (tied embedding) and final norm.
  grads.tok_emb().noalias() += dlogits * cache.hf.transpose();
  MatX<S> dhf = params.tok_emb().transpose() * dlogits;
  MatX<S> dx = detail::layer_norm_backward(dhf, cache.lnf_xhat, cache.lnf_inv_std,
                                           params.final_ln_g(), grads.final_ln_g(),
                                           grads.final_ln_b());

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const LayerCache<S>& lc = cache.layers[static_cast<std::size_t>(l)];
    // Feed-forward block: x2 = x1 + w2 * act(w1 * b + b1) + b2.
    grads.b2(l).col(0) += dx.rowwise().sum();
    grads.w2(l).noalias() += dx * lc.ff_act.transpose();
    MatX<S> dff = params.w2(l).transpose() * dx;
    for (Eigen::Index c = 0; c < n; ++c)
      for (Eigen::Index r = 0; r < cfg.d_ff; ++r)
        dff(r, c) *= detail::act_backward(lc.ff_pre(r, c), cfg.nonlinearity);
    grads.b1(l).col(0) += dff.rowwise().sum();
    grads.w1(l).noalias() += dff * lc.b.transpose();
    MatX<S> db = params.w1(l).transpose() * dff;
    dx += detail::layer_norm_backward(db, lc.ln2_xhat, lc.ln2_inv_std, params.ln2_g(l),
                                      grads.ln2_g(l), grads.ln2_b(l));

    // Attention block: x1 = x + wo * concat_heads(attn).
    grads.wo(l).noalias() += dx * lc.o.transpose();
    MatX<S> do_ = params.wo(l).transpose() * dx;
    MatX<S> dq = MatX<S>::Zero(d, n), dk = MatX<S>::Zero(d, n), dv = MatX<S>::Zero(d, n);
    for (int h = 0; h < heads; ++h) {
      const auto qh = lc.q.middleRows(h * dh, dh);
      const auto kh = lc.k.middleRows(h * dh, dh);
      const auto vh = lc.v.middleRows(h * dh, dh);
      const auto doh = do_.middleRows(h * dh, dh);
      const MatX<S>& p = lc.attn[static_cast<std::size_t>(h)];
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto prow = p.row(i).head(i + 1);
        dv.middleRows(h * dh, dh).leftCols(i + 1).noalias() += doh.col(i) * prow;
        VecX<S> dp = vh.leftCols(i + 1).transpose() * doh.col(i);
        const S inner = dp.dot(prow.transpose());
        VecX<S> ds = (prow.transpose().array() * (dp.array() - inner)).matrix() * inv_sqrt_dh;
        dq.col(i).segment(h * dh, dh).noalias() += kh.leftCols(i + 1) * ds;
        dk.leftCols(i + 1).middleRows(h * dh, dh).noalias() += qh.col(i) * ds.transpose();
      }
    }
    grads.wq(l).noalias() += dq * lc.a.transpose();
    grads.wk(l).noalias() += dk * lc.a.transpose();
    grads.wv(l).noalias() += dv * lc.a.transpose();
    MatX<S> da = params.wq(l).transpose() * dq;
    da.noalias() += params.wk(l).transpose() * dk;
    da.noalias() += params.wv(l).transpose() * dv;
    dx += detail::layer_norm_backward(da, lc.ln1_xhat, lc.ln1_inv_std, params.ln1_g(l),
                                      grads.ln1_g(l), grads.ln1_b(l));
  }

  for (Eigen::Index t = 0; t < n; ++t) {
    grads.tok_emb().row(cache.tokens[static_cast<std::size_t>(t)]) += dx.col(t).transpose();
    grads.pos_emb().row(t) += dx.col(t).transpose();
  }
}

/// Exact reverse-mode gradient of an arbitrary scalar loss over the logits.
/// `loss_fn(logits, dlogits)` must fill dlogits and return the loss value.
template <class S, class LossFn>
S grad(const Parameters<S>& params, const Tokens& tokens, LossFn&& loss_fn,
       Parameters<S>& grads) {
  ForwardCache<S> cache;
  forward_cache(params, tokens, cache);
  MatX<S> dlogits = MatX<S>::Zero(cache.logits.rows(), cache.logits.cols());
  const S loss = loss_fn(static_cast<const MatX<S>&>(cache.logits), dlogits);
  if (!std::isfinite(static_cast<double>(loss)))
    throw NumericError("grad: non-finite loss (tensor: loss)");
  backward(params, cache, dlogits, grads);
  const std::string bad = grads.first_non_finite();
  if (!bad.empty()) throw NumericError("grad: non-finite gradient (tensor: " + bad + ")");
  return loss;
}

template <class S>
struct SeqScore {
  S sum = S(0);
  S avg = S(0);
};

namespace detail {
template <class S>
S log_softmax_at(const MatX<S>& logits, Eigen::Index col, TokenId token) {
  const auto c = logits.col(col);
  const S mx = c.maxCoeff();
  const S lse = mx + std::log((c.array() - mx).exp().sum());
  return c(token) - lse;
}
}  // namespace detail

/// Sum and per-token-mean log-probability of `target` given `prompt`. No
/// EOS requirement; decode re-scoring of truncated hypotheses uses this.
template <class S>
SeqScore<S> score_tokens(const Parameters<S>& params, const Tokens& prompt,
                         const Tokens& target) {
  require(!target.empty(), "score_tokens: empty target");
  require(!prompt.empty(), "score_tokens: empty prompt");
  Tokens all = prompt;
  all.insert(all.end(), target.begin(), target.end());
  ForwardCache<S> cache;
  forward_cache(params, all, cache);
  const Eigen::Index p0 = static_cast<Eigen::Index>(prompt.size());
  S sum = S(0);
  for (std::size_t i = 0; i < target.size(); ++i)
    sum += detail::log_softmax_at(cache.logits, p0 + static_cast<Eigen::Index>(i) - 1,
                                  target[i]);
  return {sum, sum / static_cast<S>(target.size())};
}

/// The z of this project: log p(target | prompt), summed over target tokens
/// including the terminating EOS, plus its length-normalized variant.
template <class S>
SeqScore<S> sequence_logprob(const Parameters<S>& params, const Tokens& prompt,
                             const Tokens& target) {
  require(!target.empty() && target.back() == kEos,
          "sequence_logprob: target must end with EOS");
  return score_tokens(params, prompt, target);
}

/// Adds coeff * d(sum_logprob)/dtheta to `grads` and returns the score.
/// Building block for every sequence-level loss in this project.
template <class S>
SeqScore<S> accumulate_loglik_grad(const Parameters<S>& params, const Tokens& prompt,
                                   const Tokens& target, S coeff, Parameters<S>& grads) {
  require(!target.empty(), "accumulate_loglik_grad: empty target");
  Tokens all = prompt;
  all.insert(all.end(), target.begin(), target.end());
  ForwardCache<S> cache;
  forward_cache(params, all, cache);
  const Eigen::Index p0 = static_cast<Eigen::Index>(prompt.size());
  MatX<S> dlogits = MatX<S>::Zero(cache.logits.rows(), cache.logits.cols());
  S sum = S(0);
  for (std::size_t i = 0; i < target.size(); ++i) {
    const Eigen::Index col = p0 + static_cast<Eigen::Index>(i) - 1;
    const auto c = cache.logits.col(col);
    const S mx = c.maxCoeff();
    VecX<S> probs = (c.array() - mx).exp();
    const S z = probs.sum();
    probs /= z;
    sum += c(target[i]) - (mx + std::log(z));
    dlogits.col(col) = -coeff * probs;
    dlogits(target[i], col) += coeff;
  }
  if (coeff != S(0)) backward(params, cache, dlogits, grads);
  return {sum, sum / static_cast<S>(target.size())};
}

}  // namespace calib
