#include <doctest.h>

#include <cstring>

#include "calib/checkpoint.hpp"
#include "calib/model.hpp"
#include "calib/rng.hpp"
#include "support/oracles.hpp"
#include "support/testutil.hpp"

using namespace calib;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.vocab_size = 10;
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.max_seq_len = 12;
  cfg.init_scale = 0.25;
  return cfg;
}

/// NLL of fixed (position, token) targets; the realistic loss shape.
struct NllLoss {
  std::vector<std::pair<Eigen::Index, TokenId>> targets;

  double operator()(const MatX<double>& logits, MatX<double>& dlogits) const {
    double loss = 0.0;
    for (const auto& [col, tok] : targets) {
      const auto c = logits.col(col);
      const double mx = c.maxCoeff();
      VecX<double> probs = (c.array() - mx).exp().matrix();
      const double z = probs.sum();
      probs /= z;
      loss -= c(tok) - (mx + std::log(z));
      dlogits.col(col) += probs;
      dlogits(tok, col) -= 1.0;
    }
    return loss;
  }

  double value_only(const MatX<double>& logits) const {
    MatX<double> scratch = MatX<double>::Zero(logits.rows(), logits.cols());
    return (*this)(logits, scratch);
  }
};

}  // namespace

TEST_CASE("appending a token never changes earlier logit rows") {
  const ModelConfig cfg = tiny_config();
  const auto params = init_parameters<double>(cfg, 5);
  const Tokens base{1, 4, 7, 2, 9};
  const MatX<double> short_logits = forward_logits(params, base);
  Tokens longer = base;
  longer.push_back(3);
  const MatX<double> long_logits = forward_logits(params, longer);
  for (Eigen::Index t = 0; t < short_logits.cols(); ++t)
    CHECK((short_logits.col(t) - long_logits.col(t)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("zero init gives position-independent, near-uniform logits") {
  ModelConfig cfg;
  cfg.vocab_size = 36;
  cfg.init_scale = 0.0;
  const auto params = init_parameters<double>(cfg, 1);
  const MatX<double> logits = forward_logits(params, {1, 5, 9, 2});
  for (Eigen::Index t = 1; t < logits.cols(); ++t)
    CHECK((logits.col(t) - logits.col(0)).cwiseAbs().maxCoeff() == 0.0);
  const auto c = logits.col(0);
  VecX<double> probs = (c.array() - c.maxCoeff()).exp().matrix();
  probs /= probs.sum();
  CHECK(probs.maxCoeff() <= 1.0 / 36.0 + 1e-3);
}

TEST_CASE("log-softmax rows are normalized") {
  const auto params = init_parameters<double>(tiny_config(), 3);
  const MatX<double> logits = forward_logits(params, {0, 1, 2, 3, 4, 5});
  for (Eigen::Index t = 0; t < logits.cols(); ++t) {
    const auto c = logits.col(t);
    const double mx = c.maxCoeff();
    const double lse = mx + std::log((c.array() - mx).exp().sum());
    CHECK(((c.array() - lse).exp().sum()) == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("zero loss produces a zero gradient") {
  const auto params = init_parameters<double>(tiny_config(), 7);
  Parameters<double> grads(params.config);
  const double loss = grad(
      params, {1, 2, 3}, [](const MatX<double>&, MatX<double>&) { return 0.0; }, grads);
  CHECK(loss == 0.0);
  CHECK(grads.flat.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("non-finite loss aborts with a diagnostic") {
  const auto params = init_parameters<double>(tiny_config(), 7);
  Parameters<double> grads(params.config);
  CHECK_THROWS_AS(grad(
                      params, {1, 2},
                      [](const MatX<double>&, MatX<double>&) {
                        return std::numeric_limits<double>::quiet_NaN();
                      },
                      grads),
                  NumericError);
}

TEST_CASE("gradient matches central finite differences on 200 coordinates") {
  const ModelConfig cfg = tiny_config();
  auto params = init_parameters<double>(cfg, 11);
  const Tokens tokens{1, 4, 7, 2, 9, 3, 5};
  NllLoss loss;
  loss.targets = {{2, 5}, {3, 1}, {4, 8}, {5, 3}};

  Parameters<double> grads(cfg);
  grad(params, tokens, loss, grads);

  Rng rng(1234);
  double max_rel = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    const Eigen::Index idx =
        static_cast<Eigen::Index>(rng.uniform_int(0, static_cast<std::int64_t>(params.size()) - 1));
    const double fd = oracles::central_difference(
        [&] { return loss.value_only(forward_logits(params, tokens)); }, params.flat(idx));
    max_rel = std::max(max_rel, oracles::rel_error(grads.flat(idx), fd));
  }
  CHECK(max_rel < 1e-4);
}

TEST_CASE("gradient check holds for relu and for float32") {
  ModelConfig cfg = tiny_config();
  cfg.nonlinearity = ModelConfig::Nonlinearity::relu;
  auto params = init_parameters<double>(cfg, 21);
  const Tokens tokens{1, 3, 5, 7};
  NllLoss loss;
  loss.targets = {{1, 2}, {2, 6}};
  Parameters<double> grads(cfg);
  grad(params, tokens, loss, grads);
  Rng rng(55);
  for (int rep = 0; rep < 60; ++rep) {
    const Eigen::Index idx =
        static_cast<Eigen::Index>(rng.uniform_int(0, static_cast<std::int64_t>(params.size()) - 1));
    const double fd = oracles::central_difference(
        [&] { return loss.value_only(forward_logits(params, tokens)); }, params.flat(idx));
    CHECK(oracles::rel_error(grads.flat(idx), fd) < 1e-3);  // relu kinks allow slack
  }

  // 32-bit mode: same forward math at float precision.
  const auto params32 = init_parameters<float>(cfg, 21);
  const MatX<float> logits32 = forward_logits(params32, tokens);
  const MatX<double> logits64 = forward_logits(params, tokens);
  CHECK((logits32.cast<double>() - logits64).cwiseAbs().maxCoeff() < 1e-3);
}

TEST_CASE("tied-embedding gradient equals the hand-derived closed form") {
  // Minimal architecture: 1 layer, d = 4. With wo = w2 = 0 the blocks cannot
  // move x, so h = LN_f(tok_emb[t] + pos_emb[0]) and the loss
  // L = sum of all logits = s . h with s the column sums of the embedding.
  // Closed form: dL/dE = 1_V h^T, plus row t receiving J^T s where J is the
  // LayerNorm Jacobian diag(g) (I - 11^T/d - xhat xhat^T/d) / sigma.
  ModelConfig cfg;
  cfg.vocab_size = 6;
  cfg.d_model = 4;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_ff = 8;
  cfg.max_seq_len = 4;
  cfg.init_scale = 0.3;
  auto params = init_parameters<double>(cfg, 31);
  params.wo(0).setZero();
  params.w2(0).setZero();
  params.b2(0).setZero();

  const TokenId tok = 3;
  Parameters<double> grads(cfg);
  grad(
      params, {tok},
      [](const MatX<double>& logits, MatX<double>& dlogits) {
        dlogits.setOnes();
        return logits.sum();
      },
      grads);

  const Eigen::Index d = cfg.d_model;
  const VecX<double> x =
      params.tok_emb().row(tok).transpose() + params.pos_emb().row(0).transpose();
  const double mu = x.mean();
  const double var = (x.array() - mu).square().mean();
  const double sigma = std::sqrt(var + 1e-5);
  const VecX<double> xhat = (x.array() - mu).matrix() / sigma;
  const VecX<double> gf = params.final_ln_g().col(0);
  const VecX<double> h = gf.cwiseProduct(xhat) + params.final_ln_b().col(0);
  const VecX<double> s = params.tok_emb().colwise().sum().transpose();

  const VecX<double> u = gf.cwiseProduct(s);
  const VecX<double> dx =
      (u.array() - u.mean() - xhat.array() * (xhat.dot(u) / static_cast<double>(d))).matrix() /
      sigma;

  MatX<double> expected = VecX<double>::Ones(cfg.vocab_size) * h.transpose();
  expected.row(tok) += dx.transpose();
  CHECK((grads.tok_emb() - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("sequence_logprob: uniform model and definitional identities") {
  ModelConfig cfg;
  cfg.vocab_size = 36;
  cfg.init_scale = 0.0;
  const auto params = init_parameters<double>(cfg, 0);
  const auto s = sequence_logprob(params, {kBos, 5, kSep}, {kEos});
  CHECK(s.sum == doctest::Approx(-std::log(36.0)).epsilon(1e-12));
  CHECK(s.avg == s.sum);

  const auto s2 = sequence_logprob(params, {kBos, 5, kSep}, {20, 21, 22, kEos});
  CHECK(s2.sum == doctest::Approx(-4.0 * std::log(36.0)).epsilon(1e-12));
  CHECK(s2.avg * 4.0 == doctest::Approx(s2.sum).epsilon(1e-12));
  CHECK(s2.sum <= 0.0);

  CHECK_THROWS_AS(sequence_logprob(params, {kBos}, {}), ValidationError);
  CHECK_THROWS_AS(sequence_logprob(params, {kBos}, {20, 21}), ValidationError);
}

TEST_CASE("sequence_logprob equals the forced-decode path oracle") {
  const ModelConfig cfg = tiny_config();
  const auto params = init_parameters<double>(cfg, 17);
  Rng rng(2024);
  for (int rep = 0; rep < 100; ++rep) {
    Tokens prompt{1};
    const int plen = static_cast<int>(rng.uniform_int(1, 3));
    for (int i = 0; i < plen; ++i)
      prompt.push_back(static_cast<TokenId>(rng.uniform_int(4, cfg.vocab_size - 1)));
    Tokens target;
    const int tlen = static_cast<int>(rng.uniform_int(1, 4));
    for (int i = 0; i < tlen; ++i)
      target.push_back(static_cast<TokenId>(rng.uniform_int(4, cfg.vocab_size - 1)));
    target.push_back(kEos);

    // Oracle: re-run a full forward for every prefix and accumulate the step
    // probability of the forced next token.
    double oracle_sum = 0.0;
    Tokens prefix = prompt;
    for (TokenId tok : target) {
      const MatX<double> logits = forward_logits(params, prefix);
      const auto c = logits.col(logits.cols() - 1);
      const double mx = c.maxCoeff();
      oracle_sum += c(tok) - (mx + std::log((c.array() - mx).exp().sum()));
      prefix.push_back(tok);
    }
    const auto s = sequence_logprob(params, prompt, target);
    CHECK(s.sum == doctest::Approx(oracle_sum).epsilon(1e-9));
  }
}

TEST_CASE("checkpoint round trip is bit-exact") {
  const ModelConfig cfg = tiny_config();
  Checkpoint<double> ckpt(cfg, init_parameters<double>(cfg, 77),
                          Provenance{"run-abc:epoch2", 123, 0.912345678901234});
  testutil::TempDir dir("ckpt");
  const auto path = dir.path() / "model.ckpt";
  save_checkpoint(ckpt, path);
  const auto loaded = load_checkpoint<double>(path);
  REQUIRE(loaded.params.flat.size() == ckpt.params.flat.size());
  CHECK(std::memcmp(loaded.params.flat.data(), ckpt.params.flat.data(),
                    sizeof(double) * static_cast<std::size_t>(ckpt.params.flat.size())) == 0);
  CHECK(loaded.provenance.run_id == "run-abc:epoch2");
  CHECK(loaded.provenance.step == 123);
  CHECK(loaded.provenance.validation_score == ckpt.provenance.validation_score);
  CHECK(loaded.config.d_model == cfg.d_model);

  // float mode: the f64 container preserves float params exactly
  Checkpoint<float> ckpt32(cfg, init_parameters<float>(cfg, 78), Provenance{"r", 0, 0.0});
  const auto path32 = dir.path() / "model32.ckpt";
  save_checkpoint(ckpt32, path32);
  const auto loaded32 = load_checkpoint<float>(path32);
  CHECK(std::memcmp(loaded32.params.flat.data(), ckpt32.params.flat.data(),
                    sizeof(float) * static_cast<std::size_t>(ckpt32.params.flat.size())) == 0);
}

TEST_CASE("token and length validation") {
  const auto params = init_parameters<double>(tiny_config(), 1);
  CHECK_THROWS_AS(forward_logits(params, Tokens{}), ValidationError);
  CHECK_THROWS_AS(forward_logits(params, Tokens{99}), ValidationError);
  Tokens too_long(static_cast<std::size_t>(params.config.max_seq_len) + 1, 1);
  CHECK_THROWS_AS(forward_logits(params, too_long), ValidationError);
}
