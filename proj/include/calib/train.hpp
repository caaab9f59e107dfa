#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "calib/checkpoint.hpp"
#include "calib/decode.hpp"
#include "calib/losses.hpp"
#include "calib/model.hpp"
#include "calib/parallel.hpp"
#include "calib/quality.hpp"
#include "calib/select.hpp"
#include "calib/task.hpp"

namespace calib {

enum class Objective { mle, sft_bon, cpo_like, calibration };
enum class Policy { off, on };

inline std::string objective_name(Objective o) {
  switch (o) {
    case Objective::mle: return "mle";
    case Objective::sft_bon: return "sft_bon";
    case Objective::cpo_like: return "cpo_like";
    default: return "calibration";
  }
}

inline Objective objective_from_name(const std::string& s) {
  if (s == "mle") return Objective::mle;
  if (s == "sft_bon") return Objective::sft_bon;
  if (s == "cpo_like") return Objective::cpo_like;
  if (s == "calibration") return Objective::calibration;
  throw ValidationError("unknown objective: " + s);
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline constexpr int kValidationBeam = 5;

struct TrainConfig {
  Objective objective = Objective::mle;
  Policy policy = Policy::off;
  int k = 16;
  SamplerConfig sampler;  // group sampler; harness defaults set temp/top_p
  OracleConfig oracle;
  int batch_size = 8;   // items per micro-batch (pairs for mle, groups otherwise)
  int grad_accum = 2;
  int epochs = 3;
  double learning_rate = 3e-4;
  AdamConfig adam;
  std::uint64_t seed = 7;
  double sft_weight = 1.0;
  ZMode z_mode = ZMode::sum;
  int resample_every = 0;  // on-policy: optimizer steps between resamples (0 = sample once)
  double cpo_beta = 0.1;
  int n_calibration_sources = 256;  // 0 = use the whole train split
  int max_steps = 0;                // 0 = no cap; short-run hook for tests
  ModelConfig model;                // architecture when pretraining from scratch
  std::string precision = "f64";

  void validate() const {
    require(learning_rate > 0.0, "train: learning_rate must be > 0");
    require(batch_size >= 1 && grad_accum >= 1, "train: batch_size and grad_accum must be >= 1");
    require(epochs >= 1, "train: epochs must be >= 1");
    require(resample_every >= 0, "train: resample_every must be >= 0");
    require(n_calibration_sources >= 0, "train: n_calibration_sources must be >= 0");
    require(max_steps >= 0, "train: max_steps must be >= 0");
    require(precision == "f64" || precision == "f32", "train: precision must be f64 or f32");
    if (objective == Objective::calibration || objective == Objective::cpo_like)
      require(k >= 2, "train: k must be >= 2 for calibration/cpo_like");
    else
      require(k >= 1, "train: k must be >= 1");
    sampler.validate();
    oracle.validate();
  }
};

inline Json train_config_to_json(const TrainConfig& c) {
  return Json{{"objective", objective_name(c.objective)},
              {"policy", c.policy == Policy::off ? "off" : "on"},
              {"k", c.k},
              {"sampler", sampler_config_to_json(c.sampler)},
              {"oracle", oracle_config_to_json(c.oracle)},
              {"batch_size", c.batch_size},
              {"grad_accum", c.grad_accum},
              {"epochs", c.epochs},
              {"learning_rate", c.learning_rate},
              {"adam", Json{{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
              {"seed", c.seed},
              {"sft_weight", c.sft_weight},
              {"z_mode", z_mode_name(c.z_mode)},
              {"resample_every", c.resample_every},
              {"cpo_beta", c.cpo_beta},
              {"n_calibration_sources", c.n_calibration_sources},
              {"max_steps", c.max_steps},
              {"model", model_config_to_json(c.model)},
              {"precision", c.precision}};
}

inline TrainConfig train_config_from_json(const Json& j) {
  TrainConfig c;
  c.objective = objective_from_name(j.at("objective").get<std::string>());
  if (j.contains("policy")) {
    const std::string p = j.at("policy").get<std::string>();
    require(p == "off" || p == "on", "train: policy must be off or on");
    c.policy = p == "off" ? Policy::off : Policy::on;
  }
  if (j.contains("k")) c.k = j.at("k").get<int>();
  if (j.contains("sampler")) c.sampler = sampler_config_from_json(j.at("sampler"));
  if (j.contains("oracle")) c.oracle = oracle_config_from_json(j.at("oracle"));
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
  if (j.contains("grad_accum")) c.grad_accum = j.at("grad_accum").get<int>();
  if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
  if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
  if (j.contains("adam")) {
    const auto& a = j.at("adam");
    c.adam.beta1 = a.at("beta1").get<double>();
    c.adam.beta2 = a.at("beta2").get<double>();
    c.adam.eps = a.at("eps").get<double>();
  }
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("sft_weight")) c.sft_weight = j.at("sft_weight").get<double>();
  if (j.contains("z_mode")) c.z_mode = z_mode_from_name(j.at("z_mode").get<std::string>());
  if (j.contains("resample_every")) c.resample_every = j.at("resample_every").get<int>();
  if (j.contains("cpo_beta")) c.cpo_beta = j.at("cpo_beta").get<double>();
  if (j.contains("n_calibration_sources"))
    c.n_calibration_sources = j.at("n_calibration_sources").get<int>();
  if (j.contains("max_steps")) c.max_steps = j.at("max_steps").get<int>();
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  if (j.contains("precision")) c.precision = j.at("precision").get<std::string>();
  c.validate();
  return c;
}

struct EpochValidation {
  int epoch = 0;
  std::int64_t step = 0;
  double score = 0.0;
};

struct RunRecord {
  std::string run_id;
  Json config_echo;
  std::vector<Json> ledger;  // per-step loss components + events
  std::vector<EpochValidation> validations;
  int selected_epoch = 0;
  std::string selected_checkpoint_id;
  double wall_clock_seconds = 0.0;  // persisted separately; not determinism-relevant
};

inline Json run_record_to_json(const RunRecord& r) {
  Json vals = Json::array();
  for (const auto& v : r.validations)
    vals.push_back({{"epoch", v.epoch}, {"step", v.step}, {"score", v.score}});
  return Json{{"run_id", r.run_id},
              {"config", r.config_echo},
              {"validations", vals},
              {"selected_epoch", r.selected_epoch},
              {"selected_checkpoint_id", r.selected_checkpoint_id}};
}

/// One calibration source with its sampled hypotheses and frozen quality
/// scores. z is never stored here: it is recomputed under the live model at
/// every optimization step.
struct CalibrationGroup {
  std::size_t pair_index = 0;
  std::vector<Hypothesis> hyps;
  std::vector<double> q;
  std::string metric_id;
  int duplicates = 0;
};

template <class S>
class Adam {
 public:
  Adam(const AdamConfig& cfg, double lr, Eigen::Index n)
      : cfg_(cfg), lr_(lr), m_(VecX<S>::Zero(n)), v_(VecX<S>::Zero(n)) {}

  void step(VecX<S>& theta, const VecX<S>& grad) {
    ++t_;
    const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
    m_ = b1 * m_ + (S(1) - b1) * grad;
    v_ = (b2 * v_.array() + (S(1) - b2) * grad.array().square()).matrix();
    const S c1 = S(1) - static_cast<S>(std::pow(cfg_.beta1, static_cast<double>(t_)));
    const S c2 = S(1) - static_cast<S>(std::pow(cfg_.beta2, static_cast<double>(t_)));
    theta.array() -=
        static_cast<S>(lr_) * (m_.array() / c1) / ((v_.array() / c2).sqrt() + static_cast<S>(cfg_.eps));
  }

 private:
  AdamConfig cfg_;
  double lr_;
  VecX<S> m_, v_;
  std::int64_t t_ = 0;
};

namespace detail {

inline int count_duplicates(const std::vector<Hypothesis>& hyps) {
  int dup = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (hyps[i].tokens == hyps[j].tokens) {
        ++dup;
        break;
      }
  return dup;
}

template <class S>
std::string params_fingerprint(const Parameters<S>& p) {
  return hash_hex(fnv1a64(p.flat.data(), static_cast<std::size_t>(p.flat.size()) * sizeof(S)));
}

inline std::string data_fingerprint(const DatasetSplit& data) {
  Json j{{"task", task_to_json(data.task)},
         {"n_train", data.train.size()},
         {"n_valid", data.valid.size()},
         {"n_test", data.test.size()}};
  if (!data.train.empty()) j["first_train"] = pair_to_json(data.train.front());
  return json_hash(j);
}

template <class S>
std::vector<Hypothesis> beam_decode_split(const Parameters<S>& params,
                                          const std::vector<Pair>& pairs, int beam,
                                          int max_new_tokens, int threads) {
  std::vector<Hypothesis> out(pairs.size());
  parallel_for(pairs.size(), threads, [&](std::size_t i) {
    out[i] =
        beam_search(params, render_prompt(pairs[i]), beam, 0.0, pairs[i].id, max_new_tokens)
            .front();
  });
  return out;
}

/// Mean training-oracle score of beam-5 decodes over a split.
template <class S>
double validation_score(const Parameters<S>& params, const std::vector<Pair>& pairs,
                        const OracleConfig& oracle, int max_new_tokens, int threads) {
  require(!pairs.empty(), "validation: empty split");
  const auto decodes = beam_decode_split(params, pairs, kValidationBeam, max_new_tokens, threads);
  double sum = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i)
    sum += apply_oracle(oracle, decodes[i].tokens, pairs[i]);
  return sum / static_cast<double>(pairs.size());
}

}  // namespace detail

/// Samples and scores one group per calibration source. Off-policy draws from
/// the frozen external model (q then stays frozen for the whole run);
/// on-policy draws from the current model and is re-invoked every
/// resample_every steps.
template <class S>
std::vector<CalibrationGroup> build_calibration_groups(
    Policy policy, const Parameters<S>& params_current,
    std::type_identity_t<const Parameters<S>*> params_external, const std::vector<Pair>& pairs,
    int k, const SamplerConfig& sampler, const OracleConfig& oracle, int threads) {
  require(k >= 2, "build_calibration_groups: k must be >= 2");
  if (policy == Policy::off)
    require(params_external != nullptr, "build_calibration_groups: off-policy requires an external model");
  const Parameters<S>& sampling_params =
      policy == Policy::off ? *params_external : params_current;
  std::vector<CalibrationGroup> groups(pairs.size());
  parallel_for(pairs.size(), threads, [&](std::size_t i) {
    CalibrationGroup g;
    g.pair_index = i;
    g.hyps = sample_group(sampling_params, render_prompt(pairs[i]), sampler, k, pairs[i].id);
    const auto scores = score_group(g.hyps, pairs[i], oracle);
    require(scores.size() == g.hyps.size(),
            "build_calibration_groups: unscored hypothesis in group " + pairs[i].id);
    g.metric_id = scores.front().metric_id;
    for (const auto& s : scores) g.q.push_back(s.value);
    g.duplicates = detail::count_duplicates(g.hyps);
    groups[i] = std::move(g);
  });
  return groups;
}

inline Json group_to_json(const CalibrationGroup& g, const std::vector<Pair>& pairs) {
  Json hyps = Json::array();
  for (const auto& h : g.hyps) hyps.push_back(hypothesis_to_json(h));
  return Json{{"source_id", pairs[g.pair_index].id},
              {"metric_id", g.metric_id},
              {"q", g.q},
              {"hyps", hyps},
              {"duplicates", g.duplicates}};
}

template <class S>
struct TrainOutput {
  Checkpoint<S> checkpoint;
  RunRecord record;
};

namespace detail {

template <class S>
struct TrainState {
  Parameters<S> params;
  Adam<S> adam;
  Parameters<S> grad_total;
  std::vector<Parameters<S>> item_grads;
  TrainState(const ModelConfig& cfg, const TrainConfig& tc, int max_batch_items)
      : params(cfg),
        adam(tc.adam, tc.learning_rate, Parameters<S>(cfg).size()),
        grad_total(cfg),
        item_grads(static_cast<std::size_t>(max_batch_items), Parameters<S>(cfg)) {}
};

/// Shared epoch/batch/accumulation/validation skeleton. `item_loss` computes
/// one item's loss and writes its (pre-scaled) gradient into the given
/// buffer; items are reduced in item order, so results are independent of
/// the thread count and of how micro-batches split a logical batch.
template <class S, class ItemLoss, class EpochHook>
TrainOutput<S> run_training(const TrainConfig& config, const DatasetSplit& data,
                            Parameters<S> params, std::size_t n_items, ItemLoss&& item_loss,
                            EpochHook&& epoch_hook, const std::string& run_id,
                            const std::filesystem::path& out_dir, int threads) {
  const auto t_start = std::chrono::steady_clock::now();
  const int logical_batch = config.batch_size * config.grad_accum;
  TrainState<S> st(params.config, config, logical_batch);
  st.params = std::move(params);

  RunRecord record;
  record.run_id = run_id;
  record.config_echo = train_config_to_json(config);

  std::optional<JsonlWriter> ledger_file;
  if (!out_dir.empty()) ledger_file.emplace(out_dir / "ledger.jsonl");
  const auto emit = [&](const Json& row) {
    record.ledger.push_back(row);
    if (ledger_file) ledger_file->append(row);
  };

  const int max_new = data.task.max_len + 4;
  std::int64_t step = 0;
  bool stopped = false;

  std::optional<Parameters<S>> best_params;
  double best_score = 0.0;
  int best_epoch = 0;
  std::int64_t best_step = 0;

  std::vector<std::size_t> order(n_items);
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 1; epoch <= config.epochs && !stopped; ++epoch) {
    Rng shuffle_rng(derive_seed(config.seed, "epoch-order", static_cast<std::uint64_t>(epoch)));
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1],
                order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);

    for (std::size_t batch_lo = 0; batch_lo < order.size() && !stopped;
         batch_lo += static_cast<std::size_t>(logical_batch)) {
      const std::size_t batch_hi =
          std::min(order.size(), batch_lo + static_cast<std::size_t>(logical_batch));
      const std::size_t n_batch = batch_hi - batch_lo;
      epoch_hook(step, st.params);  // on-policy resampling checks run here

      std::vector<LossValue> losses(n_batch);
      parallel_for(n_batch, threads, [&](std::size_t bi) {
        st.item_grads[bi].flat.setZero();
        losses[bi] = item_loss(order[batch_lo + bi], st.params,
                               S(1) / static_cast<S>(n_batch), st.item_grads[bi]);
      });

      st.grad_total.flat.setZero();
      double total = 0.0, pearson_c = 0.0, sft_c = 0.0, pref_c = 0.0;
      int skipped = 0;
      for (std::size_t bi = 0; bi < n_batch; ++bi) {
        st.grad_total.flat += st.item_grads[bi].flat;
        total += losses[bi].total;
        pearson_c += losses[bi].components.at("pearson");
        sft_c += losses[bi].components.at("sft");
        pref_c += losses[bi].components.at("preference");
        skipped += losses[bi].skipped_groups;
      }
      const double inv_n = 1.0 / static_cast<double>(n_batch);
      total *= inv_n;
      pearson_c *= inv_n;
      sft_c *= inv_n;
      pref_c *= inv_n;
      if (!std::isfinite(total))
        throw NumericError("training diverged: non-finite loss at step " + std::to_string(step));

      st.adam.step(st.params.flat, st.grad_total.flat);
      emit(Json{{"type", "step"},
                {"step", step},
                {"epoch", epoch},
                {"total", total},
                {"pearson", pearson_c},
                {"sft", sft_c},
                {"preference", pref_c},
                {"skipped_groups", skipped}});
      ++step;
      if (config.max_steps > 0 && step >= config.max_steps) stopped = true;
    }

    const double score =
        detail::validation_score(st.params, data.valid, config.oracle, max_new, threads);
    record.validations.push_back({epoch, step, score});
    emit(Json{{"type", "validation"}, {"epoch", epoch}, {"step", step}, {"score", score}});
    if (!best_params.has_value() || score > best_score) {
      best_params = st.params;
      best_score = score;
      best_epoch = epoch;
      best_step = step;
    }
  }

  record.selected_epoch = best_epoch;
  record.selected_checkpoint_id = run_id + ":epoch" + std::to_string(best_epoch);

  Checkpoint<S> ckpt(st.params.config, std::move(*best_params),
                     Provenance{record.selected_checkpoint_id, best_step, best_score});
  record.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

  if (!out_dir.empty()) {
    if (ledger_file) ledger_file->flush();
    save_checkpoint(ckpt, out_dir / "checkpoint_best.ckpt");
    write_json(out_dir / "run.json", run_record_to_json(record));
    write_json(out_dir / "timing.json", Json{{"wall_clock_seconds", record.wall_clock_seconds}});
  }
  return {std::move(ckpt), std::move(record)};
}

}  // namespace detail

/// MLE pretraining of the base model on the reference targets.
template <class S = double>
TrainOutput<S> pretrain_mle(const TrainConfig& config, const DatasetSplit& data,
                            const std::filesystem::path& out_dir = {}, int threads = 1) {
  config.validate();
  require(config.objective == Objective::mle, "pretrain_mle: objective must be mle");
  require(!data.train.empty(), "pretrain_mle: empty train split");
  ModelConfig mc = config.model;
  mc.vocab_size = data.task.combined_vocab_size();
  mc.validate();
  require(mc.max_seq_len >= data.task.max_len * 2 + 3,
          "pretrain_mle: max_seq_len too small for the task");

  Parameters<S> params = init_parameters<S>(mc, config.seed);
  const std::string run_id =
      "run-" + json_hash(Json{{"config", train_config_to_json(config)},
                              {"data", detail::data_fingerprint(data)},
                              {"init", detail::params_fingerprint(params)}});

  auto item_loss = [&](std::size_t item, const Parameters<S>& p, S scale,
                       Parameters<S>& grad) -> LossValue {
    LossValue lv;
    lv.total = mle_pair_loss(p, data.train[item], scale, &grad);
    lv.components["pearson"] = 0.0;
    lv.components["sft"] = lv.total;
    lv.components["preference"] = 0.0;
    return lv;
  };
  auto no_hook = [](std::int64_t, const Parameters<S>&) {};
  return detail::run_training(config, data, std::move(params), data.train.size(), item_loss,
                              no_hook, run_id, out_dir, threads);
}

/// Calibration-phase training (sft_bon / cpo_like / calibration objectives)
/// starting from a pretrained base checkpoint.
template <class S = double>
TrainOutput<S> calibrate(const TrainConfig& config, const DatasetSplit& data,
                         const Checkpoint<S>& base, const std::filesystem::path& out_dir = {},
                         int threads = 1) {
  config.validate();
  require(config.objective != Objective::mle, "calibrate: use pretrain_mle for the mle objective");
  require(!data.train.empty(), "calibrate: empty train split");

  std::vector<Pair> sources = data.train;
  if (config.n_calibration_sources > 0 &&
      static_cast<std::size_t>(config.n_calibration_sources) < sources.size())
    sources.resize(static_cast<std::size_t>(config.n_calibration_sources));

  const std::string run_id =
      "run-" + json_hash(Json{{"config", train_config_to_json(config)},
                              {"data", detail::data_fingerprint(data)},
                              {"base", detail::params_fingerprint(base.params)}});

  // Off-policy groups are sampled once from the frozen external model (the
  // base checkpoint; the harness raises the sampler temperature) and their q
  // stays frozen for the whole run.
  std::vector<CalibrationGroup> groups;
  const auto persist_groups = [&](std::int64_t step) {
    if (out_dir.empty()) return;
    JsonlWriter w(out_dir / ("groups_" + std::to_string(step) + ".jsonl"));
    for (const auto& g : groups) w.append(group_to_json(g, sources));
  };

  Parameters<S> params = base.params;
  groups = build_calibration_groups(config.policy, params, &base.params, sources, config.k,
                                    config.sampler, config.oracle, threads);
  persist_groups(0);

  auto epoch_hook = [&](std::int64_t step, const Parameters<S>& current) {
    if (config.policy != Policy::on || config.resample_every <= 0 || step == 0) return;
    if (step % config.resample_every != 0) return;
    groups = build_calibration_groups(Policy::on, current, nullptr, sources, config.k,
                                      config.sampler, config.oracle, threads);
    persist_groups(step);
  };

  auto item_loss = [&](std::size_t item, const Parameters<S>& p, S scale,
                       Parameters<S>& grad) -> LossValue {
    const CalibrationGroup& g = groups[item];
    const Pair& pair = sources[g.pair_index];
    VecX<S> q(static_cast<Eigen::Index>(g.q.size()));
    for (std::size_t i = 0; i < g.q.size(); ++i)
      q(static_cast<Eigen::Index>(i)) = static_cast<S>(g.q[i]);
    switch (config.objective) {
      case Objective::sft_bon:
        return sft_bon_loss(p, pair, g.hyps, q, scale, &grad);
      case Objective::cpo_like:
        return cpo_like_loss(p, pair, g.hyps, q, static_cast<S>(config.cpo_beta), scale, &grad);
      default:
        return cal_loss(p, pair, g.hyps, q, static_cast<S>(config.sft_weight), config.z_mode,
                        scale, &grad);
    }
  };

  return detail::run_training(config, data, std::move(params), groups.size(), item_loss,
                              epoch_hook, run_id, out_dir, threads);
}

}  // namespace calib
