#include "calib/experiments.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "calib/checkpoint.hpp"
#include "calib/decode.hpp"
#include "calib/metastats.hpp"
#include "calib/quality.hpp"
#include "calib/select.hpp"
#include "calib/task.hpp"
#include "calib/train.hpp"

namespace calib {

void ExperimentSpec::validate() const {
  require(!seeds.empty(), "experiment: seeds must be non-empty");
  require(!out_root.empty(), "experiment: output directory required");
  require(threads >= 1, "experiment: threads must be >= 1");
  if (name == "all") return;
  const auto& names = experiment_names();
  require(std::find(names.begin(), names.end(), name) != names.end(),
          "experiment: unknown name " + name);
}

Json default_harness_config() {
  ModelConfig model;  // 36-token vocab, d=64, 2 layers, 4 heads, d_ff=128
  return Json{
      {"data",
       {{"task_seed", 12345},
        {"n_synonyms", 4},
        {"gen_seed", 20240601},
        {"n_train", 4096},
        {"n_valid", 256},
        {"n_test", 256}}},
      {"model", model_config_to_json(model)},
      {"pretrain",
       {{"learning_rate", 1e-3}, {"batch_size", 32}, {"grad_accum", 1}, {"epochs", 3}}},
      {"calibration",
       {{"k", 16},
        {"batch_size", 8},
        {"grad_accum", 2},
        {"epochs", 3},
        {"learning_rate", 3e-4},
        {"sft_weight", 1.0},
        {"z_mode", "sum"},
        {"n_sources", 256},
        {"cpo_beta", 0.1},
        {"policy", "off"}}},
      {"off_policy_sampler",
       {{"temperature", 1.3}, {"top_p", 0.98}, {"top_k", 0}, {"max_new_tokens", 14}, {"seed", 0}}},
      {"on_policy_sampler",
       {{"temperature", 1.0}, {"top_p", 1.0}, {"top_k", 5}, {"max_new_tokens", 14}, {"seed", 0}}},
      {"train_metric", "ref_based_F"},
      {"eval",
       {{"beam", 5},
        {"length_penalty", 0.0},
        {"bon_pool", 32},
        {"bon_sizes", {1, 2, 4, 8, 16, 32}},
        {"qe_pool_k", 16},
        {"qe_gold_metric", "ref_based_F"},
        {"k_grid", {4, 8, 16}}}}};
}

namespace {

std::string fmt(double v) { return Json(v).dump(); }

struct Context {
  Json config;
  std::filesystem::path root;
  int threads = 1;
  TaskSpec task;
  DatasetSplit data;
  std::string data_hash;
  ModelConfig model;
  SamplerConfig off_sampler, on_sampler;
  std::string train_metric;
  int eval_beam = 5;
  double eval_length_penalty = 0.0;

  int max_new_tokens() const { return task.max_len + 4; }
};

SamplerConfig sampler_from(const Json& j) {
  SamplerConfig s;
  s.temperature = j.at("temperature").get<double>();
  s.top_p = j.at("top_p").get<double>();
  s.top_k = j.at("top_k").get<int>();
  s.max_new_tokens = j.at("max_new_tokens").get<int>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.validate();
  return s;
}

/// Generates (or reuses) the shared dataset under <root>/data.
void ensure_data(Context& ctx) {
  const Json& d = ctx.config.at("data");
  ctx.task = default_task(d.at("task_seed").get<std::uint64_t>(), d.at("n_synonyms").get<int>());
  const auto dir = ctx.root / "data";
  const Json meta{{"data", d}};
  const auto meta_path = dir / "meta.json";
  if (!std::filesystem::exists(meta_path) || read_json(meta_path) != meta) {
    const DatasetSplit split =
        gen_dataset(ctx.task, d.at("n_train").get<int>(), d.at("n_valid").get<int>(),
                    d.at("n_test").get<int>(), d.at("gen_seed").get<std::uint64_t>());
    save_dataset(split, dir);
    write_json(meta_path, meta);
  }
  ctx.data = load_dataset(dir);
  ctx.data_hash = json_hash(meta) + file_hash(dir / "train.jsonl");
}

Context make_context(const ExperimentSpec& spec) {
  Context ctx;
  ctx.config = default_harness_config();
  ctx.config.merge_patch(spec.overrides);
  ctx.root = spec.out_root;
  ctx.threads = spec.threads;
  ensure_data(ctx);
  ctx.model = model_config_from_json(ctx.config.at("model"));
  ctx.model.vocab_size = ctx.task.combined_vocab_size();
  ctx.off_sampler = sampler_from(ctx.config.at("off_policy_sampler"));
  ctx.on_sampler = sampler_from(ctx.config.at("on_policy_sampler"));
  ctx.train_metric = ctx.config.at("train_metric").get<std::string>();
  ctx.eval_beam = ctx.config.at("eval").at("beam").get<int>();
  ctx.eval_length_penalty = ctx.config.at("eval").at("length_penalty").get<double>();
  return ctx;
}

OracleConfig oracle_for_metric(const std::string& metric) {
  OracleConfig o;
  o.kind = oracle_kind_from_name(metric);
  return o;
}

TrainConfig pretrain_config(const Context& ctx, std::uint64_t seed) {
  TrainConfig tc;
  tc.objective = Objective::mle;
  tc.model = ctx.model;
  const Json& p = ctx.config.at("pretrain");
  tc.learning_rate = p.at("learning_rate").get<double>();
  tc.batch_size = p.at("batch_size").get<int>();
  tc.grad_accum = p.at("grad_accum").get<int>();
  tc.epochs = p.at("epochs").get<int>();
  tc.seed = seed;
  tc.oracle = oracle_for_metric(ctx.train_metric);
  tc.sampler.max_new_tokens = ctx.max_new_tokens();
  return tc;
}

TrainConfig calibration_config(const Context& ctx, std::uint64_t seed, Objective objective,
                               int k, const std::string& metric) {
  TrainConfig tc;
  tc.objective = objective;
  const Json& c = ctx.config.at("calibration");
  tc.policy = c.at("policy").get<std::string>() == "on" ? Policy::on : Policy::off;
  tc.k = k;
  tc.sampler = tc.policy == Policy::off ? ctx.off_sampler : ctx.on_sampler;
  tc.sampler.seed = derive_seed(seed, "cal-groups", 0);
  tc.sampler.max_new_tokens = ctx.max_new_tokens();
  tc.oracle = oracle_for_metric(metric);
  tc.batch_size = c.at("batch_size").get<int>();
  tc.grad_accum = c.at("grad_accum").get<int>();
  tc.epochs = c.at("epochs").get<int>();
  tc.learning_rate = c.at("learning_rate").get<double>();
  tc.sft_weight = c.at("sft_weight").get<double>();
  tc.z_mode = z_mode_from_name(c.at("z_mode").get<std::string>());
  tc.n_calibration_sources = c.at("n_sources").get<int>();
  tc.cpo_beta = c.at("cpo_beta").get<double>();
  tc.seed = seed;
  tc.model = ctx.model;
  return tc;
}

struct SystemHandle {
  std::string name;
  std::string run_id;
  std::filesystem::path ckpt_path;
  std::string ckpt_hash;
  Checkpoint<double> ckpt;
};

/// Content-addressed run cache: a run directory is keyed by everything that
/// determines its outputs, so experiments needing the same system reuse it.
SystemHandle ensure_run(const Context& ctx, const std::string& label, const Json& key,
                        const std::function<TrainOutput<double>(const std::filesystem::path&)>&
                            run) {
  const std::string hash = json_hash(key);
  const auto dir = ctx.root / "cache" / (label + "-" + hash.substr(0, 12));
  const auto ckpt_path = dir / "checkpoint_best.ckpt";
  if (!std::filesystem::exists(ckpt_path)) run(dir);
  Checkpoint<double> ckpt = load_checkpoint<double>(ckpt_path);
  std::string run_id = ckpt.provenance.run_id;
  return SystemHandle{label, std::move(run_id), ckpt_path, file_hash(ckpt_path),
                      std::move(ckpt)};
}

SystemHandle ensure_base(const Context& ctx, std::uint64_t seed) {
  const TrainConfig tc = pretrain_config(ctx, seed);
  const Json key{{"kind", "pretrain"},
                 {"config", train_config_to_json(tc)},
                 {"data", ctx.data_hash}};
  SystemHandle handle = ensure_run(ctx, "base-s" + std::to_string(seed), key,
                                   [&](const std::filesystem::path& dir) {
                                     return pretrain_mle(tc, ctx.data, dir, ctx.threads);
                                   });
  handle.name = "base";
  return handle;
}

SystemHandle ensure_system(const Context& ctx, std::uint64_t seed, const SystemHandle& base,
                           Objective objective, int k, const std::string& metric) {
  const TrainConfig tc = calibration_config(ctx, seed, objective, k, metric);
  const Json key{{"kind", "calibrate"},
                 {"config", train_config_to_json(tc)},
                 {"data", ctx.data_hash},
                 {"base", base.ckpt_hash}};
  const std::string label =
      objective_name(objective) + "-k" + std::to_string(k) + "-" + metric + "-s" +
      std::to_string(seed);
  SystemHandle handle = ensure_run(ctx, label, key, [&](const std::filesystem::path& dir) {
    return calibrate(tc, ctx.data, base.ckpt, dir, ctx.threads);
  });
  handle.name = objective_name(objective);
  return handle;
}

const std::vector<Pair>& split_pairs(const Context& ctx, const std::string& split) {
  if (split == "train") return ctx.data.train;
  if (split == "valid") return ctx.data.valid;
  if (split == "test") return ctx.data.test;
  throw ValidationError("unknown split: " + split);
}

/// Beam-decode cache, keyed by checkpoint content and decode settings.
std::filesystem::path ensure_decodes(const Context& ctx, const SystemHandle& system,
                                     const std::string& split) {
  const Json key{{"ckpt", system.ckpt_hash},
                 {"split", split},
                 {"beam", ctx.eval_beam},
                 {"length_penalty", ctx.eval_length_penalty},
                 {"max_new", ctx.max_new_tokens()}};
  const auto path = ctx.root / "cache" / "decodes" / (json_hash(key) + ".jsonl");
  if (!std::filesystem::exists(path)) {
    const auto& pairs = split_pairs(ctx, split);
    std::vector<Hypothesis> decodes(pairs.size());
    parallel_for(pairs.size(), ctx.threads, [&](std::size_t i) {
      decodes[i] = beam_search(system.ckpt.params, render_prompt(pairs[i]), ctx.eval_beam,
                               ctx.eval_length_penalty, pairs[i].id, ctx.max_new_tokens())
                       .front();
    });
    JsonlWriter w(path);
    for (const auto& h : decodes) w.append(hypothesis_to_json(h));
  }
  return path;
}

std::vector<Hypothesis> load_decodes(const std::filesystem::path& path) {
  std::vector<Hypothesis> out;
  for (const auto& row : read_jsonl(path)) out.push_back(hypothesis_from_json(row));
  return out;
}

std::string rel(const Context& ctx, const std::filesystem::path& p) {
  return std::filesystem::relative(p, ctx.root).generic_string();
}

void write_tsv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  std::ostringstream ss;
  for (std::size_t i = 0; i < header.size(); ++i) ss << (i ? "\t" : "") << header[i];
  ss << "\n";
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) ss << (i ? "\t" : "") << row[i];
    ss << "\n";
  }
  write_file(path, ss.str());
}

Json system_entry(const SystemHandle& s, const Context& ctx) {
  return Json{{"run_id", s.run_id},
              {"checkpoint", rel(ctx, s.ckpt_path)},
              {"checkpoint_hash", s.ckpt_hash}};
}

// ---------------------------------------------------------------------------
// Stage A per experiment: train/reuse systems, persist pools & decodes, and
// record an inputs.json making stage B a pure function of files on disk.
// ---------------------------------------------------------------------------

std::vector<std::string> main_table_systems() { return {"sft_bon", "cpo_like", "calibration"}; }

Objective objective_of(const std::string& name) { return objective_from_name(name); }

void stage_a_main_table(const Context& ctx, std::uint64_t seed,
                        const std::filesystem::path& exp_dir) {
  const int k = ctx.config.at("calibration").at("k").get<int>();
  Json inputs{{"seed", seed}, {"systems", Json::object()}};
  const SystemHandle base = ensure_base(ctx, seed);
  Json base_entry = system_entry(base, ctx);
  base_entry["decodes_test"] = rel(ctx, ensure_decodes(ctx, base, "test"));
  inputs["systems"]["base"] = base_entry;
  for (const auto& name : main_table_systems()) {
    const SystemHandle sys = ensure_system(ctx, seed, base, objective_of(name), k, ctx.train_metric);
    Json entry = system_entry(sys, ctx);
    entry["decodes_test"] = rel(ctx, ensure_decodes(ctx, sys, "test"));
    inputs["systems"][name] = entry;
  }
  write_json(exp_dir / ("seed" + std::to_string(seed)) / "inputs.json", inputs);
}

void stage_a_qe_scatter(const Context& ctx, std::uint64_t seed,
                        const std::filesystem::path& exp_dir) {
  const int k = ctx.config.at("calibration").at("k").get<int>();
  const int pool_k = ctx.config.at("eval").at("qe_pool_k").get<int>();
  const std::string gold_metric = ctx.config.at("eval").at("qe_gold_metric").get<std::string>();
  const auto seed_dir = exp_dir / ("seed" + std::to_string(seed));
  Json inputs{{"seed", seed}, {"systems", Json::object()}, {"gold_metric", gold_metric}};

  const SystemHandle base = ensure_base(ctx, seed);

  // One fixed held-out pool, sampled once from the base model; every system
  // is then evaluated as a QE scorer of the same hypotheses.
  SamplerConfig pool_sampler = ctx.off_sampler;
  pool_sampler.seed = derive_seed(seed, "qe-pool", 0);
  pool_sampler.max_new_tokens = ctx.max_new_tokens();
  const auto pool_path = seed_dir / "pool.jsonl";
  if (!std::filesystem::exists(pool_path)) {
    const auto pools = sample_pools(base.ckpt.params, ctx.data.test, pool_sampler, pool_k,
                                    ctx.threads);
    save_pool(pools, pool_sampler, pool_path);
  }
  inputs["pool"] = rel(ctx, pool_path);

  const auto pools = load_pool(pool_path);
  const auto& pairs = ctx.data.test;
  require(pools.size() == pairs.size(), "qe_scatter: pool/split mismatch");

  {  // frozen gold column
    const auto gold_path = seed_dir / "scores_gold.jsonl";
    if (!std::filesystem::exists(gold_path)) {
      JsonlWriter w(gold_path);
      for (std::size_t i = 0; i < pools.size(); ++i)
        for (std::size_t j = 0; j < pools[i].size(); ++j)
          w.append(Json{{"source_id", pairs[i].id},
                        {"hyp_index", j},
                        {"metric_id", gold_metric},
                        {"value", score_with_metric(gold_metric, pools[i][j].tokens, pairs[i])}});
    }
    inputs["gold_scores"] = rel(ctx, gold_path);
  }

  std::vector<SystemHandle> systems;
  systems.push_back(base);
  for (const auto& name : main_table_systems())
    systems.push_back(ensure_system(ctx, seed, base, objective_of(name), k, ctx.train_metric));

  for (const auto& sys : systems) {
    Json entry = system_entry(sys, ctx);
    entry["decodes_test"] = rel(ctx, ensure_decodes(ctx, sys, "test"));
    const auto score_path = seed_dir / ("scores_avg_logprob_" + sys.name + ".jsonl");
    if (!std::filesystem::exists(score_path)) {
      std::vector<std::vector<double>> cols(pools.size());
      parallel_for(pools.size(), ctx.threads, [&](std::size_t i) {
        const Tokens prompt = render_prompt(pairs[i]);
        for (const auto& h : pools[i])
          cols[i].push_back(
              static_cast<double>(score_tokens(sys.ckpt.params, prompt, h.tokens).avg));
      });
      JsonlWriter w(score_path);
      for (std::size_t i = 0; i < pools.size(); ++i)
        for (std::size_t j = 0; j < pools[i].size(); ++j)
          w.append(Json{{"source_id", pairs[i].id},
                        {"hyp_index", j},
                        {"metric_id", "avg_logprob@" + sys.run_id},
                        {"value", cols[i][j]}});
    }
    entry["logprob_scores"] = rel(ctx, score_path);
    inputs["systems"][sys.name] = entry;
  }
  write_json(seed_dir / "inputs.json", inputs);
}

void stage_a_beam_vs_bon(const Context& ctx, std::uint64_t seed,
                         const std::filesystem::path& exp_dir) {
  const int k = ctx.config.at("calibration").at("k").get<int>();
  const int pool_size = ctx.config.at("eval").at("bon_pool").get<int>();
  const auto seed_dir = exp_dir / ("seed" + std::to_string(seed));
  Json inputs{{"seed", seed}, {"systems", Json::object()}};

  const SystemHandle base = ensure_base(ctx, seed);
  std::vector<SystemHandle> systems{base,
                                    ensure_system(ctx, seed, base, Objective::calibration, k,
                                                  ctx.train_metric)};
  for (const auto& sys : systems) {
    Json entry = system_entry(sys, ctx);
    entry["decodes_test"] = rel(ctx, ensure_decodes(ctx, sys, "test"));
    SamplerConfig pool_sampler = ctx.off_sampler;
    pool_sampler.seed = derive_seed(seed, "bon-pool", fnv1a64(sys.name));
    pool_sampler.max_new_tokens = ctx.max_new_tokens();
    const auto pool_path = seed_dir / ("bon_pool_" + sys.name + ".jsonl");
    if (!std::filesystem::exists(pool_path)) {
      const auto pools =
          sample_pools(sys.ckpt.params, ctx.data.test, pool_sampler, pool_size, ctx.threads);
      save_pool(pools, pool_sampler, pool_path);
    }
    entry["bon_pool"] = rel(ctx, pool_path);
    inputs["systems"][sys.name] = entry;
  }
  write_json(seed_dir / "inputs.json", inputs);
}

void stage_a_k_sensitivity(const Context& ctx, std::uint64_t seed,
                           const std::filesystem::path& exp_dir) {
  Json inputs{{"seed", seed}, {"systems", Json::object()}};
  const SystemHandle base = ensure_base(ctx, seed);
  Json base_entry = system_entry(base, ctx);
  base_entry["decodes_test"] = rel(ctx, ensure_decodes(ctx, base, "test"));
  inputs["systems"]["base"] = base_entry;
  for (const int k : ctx.config.at("eval").at("k_grid").get<std::vector<int>>()) {
    for (const auto& name : main_table_systems()) {
      const SystemHandle sys =
          ensure_system(ctx, seed, base, objective_of(name), k, ctx.train_metric);
      Json entry = system_entry(sys, ctx);
      entry["decodes_test"] = rel(ctx, ensure_decodes(ctx, sys, "test"));
      entry["k"] = k;
      inputs["systems"][name + "@k" + std::to_string(k)] = entry;
    }
  }
  write_json(exp_dir / ("seed" + std::to_string(seed)) / "inputs.json", inputs);
}

void stage_a_cross_metric_grid(const Context& ctx, std::uint64_t seed,
                               const std::filesystem::path& exp_dir) {
  const int k = ctx.config.at("calibration").at("k").get<int>();
  Json inputs{{"seed", seed}, {"systems", Json::object()}};
  const SystemHandle base = ensure_base(ctx, seed);
  Json base_entry = system_entry(base, ctx);
  base_entry["decodes_test"] = rel(ctx, ensure_decodes(ctx, base, "test"));
  inputs["systems"]["base"] = base_entry;
  for (const auto& metric : registered_metrics()) {
    const SystemHandle sys = ensure_system(ctx, seed, base, Objective::calibration, k, metric);
    Json entry = system_entry(sys, ctx);
    entry["decodes_test"] = rel(ctx, ensure_decodes(ctx, sys, "test"));
    entry["train_metric"] = metric;
    inputs["systems"]["calibration@" + metric] = entry;
  }
  write_json(exp_dir / ("seed" + std::to_string(seed)) / "inputs.json", inputs);
}

// ---------------------------------------------------------------------------
// Stage B: pure file aggregation into report TSVs plus the manifest.
// ---------------------------------------------------------------------------

struct ReportContext {
  std::filesystem::path root;
  std::filesystem::path exp_dir;
  Json exp_config;  // {"config": merged harness config, "seeds": [...]}
  std::vector<Pair> test_pairs;
  std::string train_metric;
  Json manifest_outputs = Json::array();
  Json systems_by_seed = Json::object();
  Json failures = Json::array();

  Json seed_inputs(std::uint64_t seed) const {
    return read_json(exp_dir / ("seed" + std::to_string(seed)) / "inputs.json");
  }
  std::filesystem::path abs(const std::string& rel_path) const { return root / rel_path; }

  std::vector<std::uint64_t> completed_seeds() const {
    std::vector<std::uint64_t> out;
    for (const auto& s : exp_config.at("seeds")) {
      const std::uint64_t seed = s.get<std::uint64_t>();
      if (std::filesystem::exists(exp_dir / ("seed" + std::to_string(seed)) / "inputs.json"))
        out.push_back(seed);
    }
    return out;
  }

  void note_systems(std::uint64_t seed, const Json& inputs) {
    systems_by_seed[std::to_string(seed)] = inputs.at("systems");
  }

  void add_output(const std::filesystem::path& path, Json producer) {
    manifest_outputs.push_back(Json{{"path", std::filesystem::relative(path, root).generic_string()},
                                    {"hash", file_hash(path)},
                                    {"producer", std::move(producer)}});
  }

  void write_manifest(const std::string& name) {
    const Json manifest{{"experiment", name},
                        {"config", exp_config},
                        {"systems", systems_by_seed},
                        {"outputs", manifest_outputs},
                        {"failures", failures}};
    write_json(exp_dir / "manifest.json", manifest);
  }
};

ReportContext make_report_context(const std::filesystem::path& root, const std::string& name) {
  ReportContext rc;
  rc.root = root;
  rc.exp_dir = root / name;
  rc.exp_config = read_json(rc.exp_dir / "config.json");
  rc.test_pairs = load_dataset(root / "data").test;
  rc.train_metric = rc.exp_config.at("config").at("train_metric").get<std::string>();
  const auto failures_path = rc.exp_dir / "failures.json";
  if (std::filesystem::exists(failures_path)) rc.failures = read_json(failures_path);
  return rc;
}

void stage_b_main_table(ReportContext& rc) {
  std::vector<std::vector<std::string>> rows;
  Json producer{{"inputs", Json::array()}};
  for (const std::uint64_t seed : rc.completed_seeds()) {
    const Json inputs = rc.seed_inputs(seed);
    rc.note_systems(seed, inputs);
    for (const std::string name : {"base", "sft_bon", "cpo_like", "calibration"}) {
      const auto& entry = inputs.at("systems").at(name);
      const auto decodes = load_decodes(rc.abs(entry.at("decodes_test")));
      const double score = mean_metric(rc.test_pairs, decodes, rc.train_metric);
      rows.push_back({std::to_string(seed), name, rc.train_metric, fmt(score)});
      producer["inputs"].push_back(entry.at("decodes_test"));
    }
  }
  const auto path = rc.exp_dir / "table.tsv";
  write_tsv(path, {"seed", "system", "metric", "score"}, rows);
  rc.add_output(path, producer);
  rc.write_manifest("main_table");
}

/// Reads a scored-pool JSONL column keyed by row order.
std::vector<double> read_score_column(const std::filesystem::path& path) {
  std::vector<double> out;
  for (const auto& row : read_jsonl(path)) out.push_back(row.at("value").get<double>());
  return out;
}

void stage_b_qe_scatter(ReportContext& rc) {
  std::vector<std::vector<std::string>> rows;
  Json producer{{"inputs", Json::array()}};
  for (const std::uint64_t seed : rc.completed_seeds()) {
    const Json inputs = rc.seed_inputs(seed);
    rc.note_systems(seed, inputs);
    const auto gold = read_score_column(rc.abs(inputs.at("gold_scores")));
    producer["inputs"].push_back(inputs.at("gold_scores"));
    for (const std::string name : {"base", "sft_bon", "cpo_like", "calibration"}) {
      const auto& entry = inputs.at("systems").at(name);
      const auto z = read_score_column(rc.abs(entry.at("logprob_scores")));
      require(z.size() == gold.size(), "qe_scatter: column size mismatch");
      const CorrelationReport report = correlation_report(
          z, gold, "avg_logprob@" + entry.at("run_id").get<std::string>(),
          inputs.at("gold_metric").get<std::string>());
      const auto decodes = load_decodes(rc.abs(entry.at("decodes_test")));
      const double quality = mean_metric(rc.test_pairs, decodes, rc.train_metric);
      const auto report_path =
          rc.exp_dir / ("qe_seed" + std::to_string(seed) + "_" + name + ".json");
      write_json(report_path, correlation_report_to_json(report));
      rc.add_output(report_path, Json{{"seed", seed},
                                      {"system", name},
                                      {"inputs", Json::array({inputs.at("gold_scores"),
                                                              entry.at("logprob_scores")})}});
      rows.push_back({std::to_string(seed), name, fmt(report.pearson), fmt(report.spearman),
                      fmt(report.kendall_tau_b), std::to_string(report.n), fmt(quality)});
      producer["inputs"].push_back(entry.at("logprob_scores"));
      producer["inputs"].push_back(entry.at("decodes_test"));
    }
  }
  const auto path = rc.exp_dir / "qe_scatter.tsv";
  write_tsv(path, {"seed", "system", "pearson", "spearman", "kendall_tau_b", "n", "quality"},
            rows);
  rc.add_output(path, producer);
  rc.write_manifest("qe_scatter");
}

void stage_b_beam_vs_bon(ReportContext& rc) {
  const auto bon_sizes = rc.exp_config.at("config").at("eval").at("bon_sizes").get<std::vector<int>>();
  const int beam = rc.exp_config.at("config").at("eval").at("beam").get<int>();
  std::vector<std::vector<std::string>> rows;
  Json producer{{"inputs", Json::array()}};
  for (const std::uint64_t seed : rc.completed_seeds()) {
    const Json inputs = rc.seed_inputs(seed);
    rc.note_systems(seed, inputs);
    for (const std::string name : {"base", "calibration"}) {
      const auto& entry = inputs.at("systems").at(name);
      const auto pools = load_pool(rc.abs(entry.at("bon_pool")));
      require(pools.size() == rc.test_pairs.size(), "beam_vs_bon: pool/split mismatch");
      producer["inputs"].push_back(entry.at("bon_pool"));

      // Cross-metric BoN: rerank with the reference-free oracle, evaluate
      // with the reference-based one.
      for (const int n : bon_sizes) {
        double sum = 0.0;
        for (std::size_t i = 0; i < pools.size(); ++i) {
          const CandidatePool pool =
              make_pool(rc.test_pairs[i], pools[i], {"ref_free_rule"});
          const Hypothesis& chosen = best_of_n(pool, static_cast<std::size_t>(n), "ref_free_rule");
          sum += score_with_metric("ref_based_F", chosen.tokens, rc.test_pairs[i]);
        }
        rows.push_back({std::to_string(seed), name, "bon", std::to_string(n),
                        fmt(sum / static_cast<double>(pools.size()))});
      }
      const auto decodes = load_decodes(rc.abs(entry.at("decodes_test")));
      const double beam_score = mean_metric(rc.test_pairs, decodes, "ref_based_F");
      rows.push_back({std::to_string(seed), name, "beam", std::to_string(beam), fmt(beam_score)});
      producer["inputs"].push_back(entry.at("decodes_test"));
    }
  }
  const auto path = rc.exp_dir / "beam_vs_bon.tsv";
  write_tsv(path, {"seed", "system", "method", "n", "mean_score"}, rows);
  rc.add_output(path, producer);
  rc.write_manifest("beam_vs_bon");
}

void stage_b_k_sensitivity(ReportContext& rc) {
  const auto k_grid = rc.exp_config.at("config").at("eval").at("k_grid").get<std::vector<int>>();
  std::vector<std::vector<std::string>> rows;
  Json producer{{"inputs", Json::array()}};
  for (const std::uint64_t seed : rc.completed_seeds()) {
    const Json inputs = rc.seed_inputs(seed);
    rc.note_systems(seed, inputs);
    {
      const auto& entry = inputs.at("systems").at("base");
      const auto decodes = load_decodes(rc.abs(entry.at("decodes_test")));
      rows.push_back({std::to_string(seed), "0", "base",
                      fmt(mean_metric(rc.test_pairs, decodes, rc.train_metric))});
      producer["inputs"].push_back(entry.at("decodes_test"));
    }
    for (const int k : k_grid)
      for (const std::string name : {"sft_bon", "cpo_like", "calibration"}) {
        const auto& entry = inputs.at("systems").at(name + "@k" + std::to_string(k));
        const auto decodes = load_decodes(rc.abs(entry.at("decodes_test")));
        rows.push_back({std::to_string(seed), std::to_string(k), name,
                        fmt(mean_metric(rc.test_pairs, decodes, rc.train_metric))});
        producer["inputs"].push_back(entry.at("decodes_test"));
      }
  }
  const auto path = rc.exp_dir / "k_sensitivity.tsv";
  write_tsv(path, {"seed", "k", "system", "score"}, rows);
  rc.add_output(path, producer);
  rc.write_manifest("k_sensitivity");
}

void stage_b_cross_metric_grid(ReportContext& rc) {
  std::vector<std::vector<std::string>> rows;
  Json producer{{"inputs", Json::array()}};
  for (const std::uint64_t seed : rc.completed_seeds()) {
    const Json inputs = rc.seed_inputs(seed);
    rc.note_systems(seed, inputs);
    const auto base_decodes =
        load_decodes(rc.abs(inputs.at("systems").at("base").at("decodes_test")));
    producer["inputs"].push_back(inputs.at("systems").at("base").at("decodes_test"));
    for (const auto& train_metric : registered_metrics()) {
      const auto& entry = inputs.at("systems").at("calibration@" + train_metric);
      const auto decodes = load_decodes(rc.abs(entry.at("decodes_test")));
      producer["inputs"].push_back(entry.at("decodes_test"));
      for (const auto& eval_metric : registered_metrics()) {
        const double sys_score = mean_metric(rc.test_pairs, decodes, eval_metric);
        const double base_score = mean_metric(rc.test_pairs, base_decodes, eval_metric);
        rows.push_back({std::to_string(seed), train_metric, eval_metric, fmt(sys_score),
                        fmt(base_score), fmt(sys_score - base_score)});
      }
    }
  }
  const auto path = rc.exp_dir / "cross_metric_grid.tsv";
  write_tsv(path,
            {"seed", "train_metric", "eval_metric", "system_score", "base_score", "improvement"},
            rows);
  rc.add_output(path, producer);
  rc.write_manifest("cross_metric_grid");
}

void run_stage_a(const Context& ctx, const std::string& name, std::uint64_t seed,
                 const std::filesystem::path& exp_dir) {
  if (name == "main_table") return stage_a_main_table(ctx, seed, exp_dir);
  if (name == "qe_scatter") return stage_a_qe_scatter(ctx, seed, exp_dir);
  if (name == "beam_vs_bon") return stage_a_beam_vs_bon(ctx, seed, exp_dir);
  if (name == "k_sensitivity") return stage_a_k_sensitivity(ctx, seed, exp_dir);
  if (name == "cross_metric_grid") return stage_a_cross_metric_grid(ctx, seed, exp_dir);
  throw ValidationError("unknown experiment: " + name);
}

void run_stage_b(const std::filesystem::path& root, const std::string& name) {
  ReportContext rc = make_report_context(root, name);
  if (name == "main_table") return stage_b_main_table(rc);
  if (name == "qe_scatter") return stage_b_qe_scatter(rc);
  if (name == "beam_vs_bon") return stage_b_beam_vs_bon(rc);
  if (name == "k_sensitivity") return stage_b_k_sensitivity(rc);
  if (name == "cross_metric_grid") return stage_b_cross_metric_grid(rc);
  throw ValidationError("unknown experiment: " + name);
}

}  // namespace

int run_experiments(const ExperimentSpec& spec) {
  spec.validate();
  Context ctx = make_context(spec);
  std::vector<std::string> names =
      spec.name == "all" ? experiment_names() : std::vector<std::string>{spec.name};

  int status = 0;
  for (const auto& name : names) {
    const auto exp_dir = ctx.root / name;
    std::filesystem::create_directories(exp_dir);
    Json seeds_json = Json::array();
    for (const auto s : spec.seeds) seeds_json.push_back(s);
    write_json(exp_dir / "config.json", Json{{"config", ctx.config}, {"seeds", seeds_json}});

    Json failures = Json::array();
    for (const std::uint64_t seed : spec.seeds) {
      try {
        run_stage_a(ctx, name, seed, exp_dir);
      } catch (const std::exception& e) {
        failures.push_back(Json{{"seed", seed}, {"error", e.what()}});
        status = 1;
      }
    }
    if (!failures.empty()) write_json(exp_dir / "failures.json", failures);
    run_stage_b(ctx.root, name);
  }
  return status;
}

void regenerate_reports(const std::filesystem::path& out_root, const std::string& name) {
  run_stage_b(out_root, name);
}

}  // namespace calib
