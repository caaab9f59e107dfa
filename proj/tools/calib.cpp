// Command-line interface for the calibration laboratory: data generation,
// training, sampling, scoring, selection, meta-evaluation and the canned
// experiments. Every subcommand reads a JSON config, honors --seed, and
// writes its outputs under --out (default root: $CALIB_SEQ_OUT).

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "calib/checkpoint.hpp"
#include "calib/decode.hpp"
#include "calib/experiments.hpp"
#include "calib/metastats.hpp"
#include "calib/quality.hpp"
#include "calib/select.hpp"
#include "calib/task.hpp"
#include "calib/train.hpp"

namespace {

using namespace calib;

std::filesystem::path resolve_out(const std::string& out_flag, const char* default_leaf) {
  if (!out_flag.empty()) return out_flag;
  if (const char* root = std::getenv("CALIB_SEQ_OUT"))
    return std::filesystem::path(root) / default_leaf;
  throw ValidationError("no --out given and CALIB_SEQ_OUT is not set");
}

Json load_config_or(const std::string& path, Json fallback) {
  if (path.empty()) return fallback;
  return read_json(path);
}

std::map<std::string, const Pair*> pair_index(const DatasetSplit& data) {
  std::map<std::string, const Pair*> index;
  for (const auto* split : {&data.train, &data.valid, &data.test})
    for (const auto& p : *split) index[p.id] = &p;
  return index;
}

const Pair& pair_by_id(const std::map<std::string, const Pair*>& index, const std::string& id) {
  const auto it = index.find(id);
  require(it != index.end(), "unknown source_id in pool: " + id);
  return *it->second;
}

struct CommonFlags {
  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  int threads = 1;
};

void add_common(CLI::App* cmd, CommonFlags& flags, bool with_threads = true) {
  cmd->add_option("--config", flags.config_path, "JSON config file");
  cmd->add_option("--out", flags.out, "output path (default under $CALIB_SEQ_OUT)");
  cmd->add_option("--seed", flags.seed, "seed override");
  if (with_threads) cmd->add_option("--threads", flags.threads, "worker threads (1 = fully serial)");
}

int cmd_gen_data(const CommonFlags& flags) {
  Json cfg = load_config_or(flags.config_path, default_harness_config().at("data"));
  if (flags.seed) cfg["gen_seed"] = *flags.seed;
  const TaskSpec task =
      default_task(cfg.at("task_seed").get<std::uint64_t>(), cfg.at("n_synonyms").get<int>());
  const DatasetSplit split =
      gen_dataset(task, cfg.at("n_train").get<int>(), cfg.at("n_valid").get<int>(),
                  cfg.at("n_test").get<int>(), cfg.at("gen_seed").get<std::uint64_t>());
  const auto dir = resolve_out(flags.out, "data");
  save_dataset(split, dir);
  write_json(dir / "meta.json", Json{{"data", cfg}});
  std::cout << "wrote " << (dir / "train.jsonl").string() << " (" << split.train.size()
            << " pairs)\n";
  return 0;
}

template <class S>
int run_pretrain(TrainConfig tc, const DatasetSplit& data, const std::filesystem::path& out,
                 int threads) {
  const auto result = pretrain_mle<S>(tc, data, out, threads);
  std::cout << "selected " << result.record.selected_checkpoint_id << " validation "
            << result.checkpoint.provenance.validation_score << "\n";
  return 0;
}

template <class S>
int run_calibrate(TrainConfig tc, const DatasetSplit& data, const std::filesystem::path& base,
                  const std::filesystem::path& out, int threads) {
  const auto ckpt = load_checkpoint<S>(base);
  const auto result = calibrate<S>(tc, data, ckpt, out, threads);
  std::cout << "selected " << result.record.selected_checkpoint_id << " validation "
            << result.checkpoint.provenance.validation_score << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Likelihood-quality calibration laboratory"};
  app.require_subcommand(1);

  CommonFlags gen_flags;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic translation dataset");
  add_common(gen, gen_flags, false);

  CommonFlags pre_flags;
  std::string pre_data;
  auto* pre = app.add_subcommand("pretrain", "MLE-pretrain the base model");
  add_common(pre, pre_flags);
  pre->add_option("--data", pre_data, "dataset directory")->required();

  CommonFlags train_flags;
  std::string train_data, train_base;
  auto* train = app.add_subcommand("train", "calibration-phase training from a base checkpoint");
  add_common(train, train_flags);
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_option("--base", train_base, "base checkpoint")->required();

  CommonFlags sample_flags;
  std::string sample_data, sample_ckpt, sample_split = "test";
  int sample_k = 16, sample_limit = 0;
  auto* sample_cmd = app.add_subcommand("sample", "sample hypothesis groups into a pool");
  add_common(sample_cmd, sample_flags);
  sample_cmd->add_option("--data", sample_data, "dataset directory")->required();
  sample_cmd->add_option("--ckpt", sample_ckpt, "model checkpoint")->required();
  sample_cmd->add_option("--split", sample_split, "train|valid|test");
  sample_cmd->add_option("--k", sample_k, "hypotheses per source");
  sample_cmd->add_option("--limit", sample_limit, "use only the first N sources (0 = all)");

  CommonFlags score_flags;
  std::string score_data, score_pool, score_metric;
  auto* score_cmd = app.add_subcommand("score", "score a pool with a quality oracle");
  add_common(score_cmd, score_flags, false);
  score_cmd->add_option("--data", score_data, "dataset directory")->required();
  score_cmd->add_option("--pool", score_pool, "hypothesis pool JSONL")->required();
  score_cmd->add_option("--metric", score_metric, "ref_based_F | ref_free_rule shorthand");

  CommonFlags decode_flags;
  std::string decode_data, decode_ckpt, decode_split = "test";
  int decode_beam = 5;
  double decode_length_penalty = 0.0;
  auto* decode_cmd = app.add_subcommand("decode", "beam-decode a split");
  add_common(decode_cmd, decode_flags);
  decode_cmd->add_option("--data", decode_data, "dataset directory")->required();
  decode_cmd->add_option("--ckpt", decode_ckpt, "model checkpoint")->required();
  decode_cmd->add_option("--split", decode_split, "train|valid|test");
  decode_cmd->add_option("--beam", decode_beam, "beam size");
  decode_cmd->add_option("--length-penalty", decode_length_penalty, "ranking length penalty");

  CommonFlags select_flags;
  std::string select_data, select_pool, select_method = "bon", select_metric = "ref_free_rule";
  int select_n = 0;
  auto* select_cmd = app.add_subcommand("select", "best-of-n or MBR over a pool");
  add_common(select_cmd, select_flags, false);
  select_cmd->add_option("--data", select_data, "dataset directory")->required();
  select_cmd->add_option("--pool", select_pool, "hypothesis pool JSONL")->required();
  select_cmd->add_option("--method", select_method, "bon | mbr");
  select_cmd->add_option("--n", select_n, "BoN prefix size (0 = whole pool)");
  select_cmd->add_option("--metric", select_metric, "rerank metric for bon");

  CommonFlags meta_flags;
  std::string meta_tsv, meta_a, meta_b;
  auto* meta = app.add_subcommand("meta-eval", "correlation statistics over two score columns");
  add_common(meta, meta_flags, false);
  meta->add_option("--tsv", meta_tsv, "two-column TSV file");
  meta->add_option("--scores-a", meta_a, "scored-pool JSONL, column a");
  meta->add_option("--scores-b", meta_b, "scored-pool JSONL, column b");

  CommonFlags exp_flags;
  std::string exp_name;
  std::vector<std::uint64_t> exp_seeds{7, 11, 13};
  auto* exp = app.add_subcommand("experiment", "run a canned experiment end to end");
  add_common(exp, exp_flags);
  exp->add_option("--name", exp_name, "main_table | qe_scatter | beam_vs_bon | k_sensitivity | cross_metric_grid | all")
      ->required();
  exp->add_option("--seeds", exp_seeds, "experiment seeds")->delimiter(',');

  CommonFlags report_flags;
  std::string report_name;
  auto* report = app.add_subcommand("report", "regenerate an experiment's reports from artifacts");
  add_common(report, report_flags, false);
  report->add_option("--name", report_name, "experiment name")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "E_USAGE: " << e.what() << "\n" << app.help() << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_flags);

    if (pre->parsed()) {
      TrainConfig tc = train_config_from_json(load_config_or(
          pre_flags.config_path, Json{{"objective", "mle"},
                                      {"model", default_harness_config().at("model")}}));
      if (pre_flags.seed) tc.seed = *pre_flags.seed;
      const DatasetSplit data = load_dataset(pre_data);
      const auto out = resolve_out(pre_flags.out, "pretrain");
      if (tc.precision == "f32") return run_pretrain<float>(tc, data, out, pre_flags.threads);
      return run_pretrain<double>(tc, data, out, pre_flags.threads);
    }

    if (train->parsed()) {
      require(!train_flags.config_path.empty(), "train: --config is required");
      TrainConfig tc = train_config_from_json(read_json(train_flags.config_path));
      if (train_flags.seed) tc.seed = *train_flags.seed;
      const DatasetSplit data = load_dataset(train_data);
      const auto out = resolve_out(train_flags.out, "train");
      if (tc.precision == "f32")
        return run_calibrate<float>(tc, data, train_base, out, train_flags.threads);
      return run_calibrate<double>(tc, data, train_base, out, train_flags.threads);
    }

    if (sample_cmd->parsed()) {
      const DatasetSplit data = load_dataset(sample_data);
      SamplerConfig sc;
      sc.max_new_tokens = data.task.max_len + 4;
      if (!sample_flags.config_path.empty())
        sc = sampler_config_from_json(read_json(sample_flags.config_path));
      if (sample_flags.seed) sc.seed = *sample_flags.seed;
      const auto ckpt = load_checkpoint<double>(sample_ckpt);
      std::vector<Pair> pairs = sample_split == "train"   ? data.train
                                : sample_split == "valid" ? data.valid
                                                          : data.test;
      require(sample_split == "train" || sample_split == "valid" || sample_split == "test",
              "sample: unknown split " + sample_split);
      if (sample_limit > 0 && static_cast<std::size_t>(sample_limit) < pairs.size())
        pairs.resize(static_cast<std::size_t>(sample_limit));
      const auto pools = sample_pools(ckpt.params, pairs, sc, sample_k, sample_flags.threads);
      const auto out = resolve_out(sample_flags.out, "pool.jsonl");
      save_pool(pools, sc, out);
      std::cout << "wrote " << out.string() << "\n";
      return 0;
    }

    if (score_cmd->parsed()) {
      const DatasetSplit data = load_dataset(score_data);
      const auto index = pair_index(data);
      OracleConfig oracle;
      if (!score_flags.config_path.empty())
        oracle = oracle_config_from_json(read_json(score_flags.config_path));
      if (!score_metric.empty()) oracle.kind = oracle_kind_from_name(score_metric);
      std::vector<std::string> order;
      const auto pools = load_pool(score_pool, &order);
      const auto out = resolve_out(score_flags.out, "scores.jsonl");
      JsonlWriter w(out);
      for (std::size_t i = 0; i < pools.size(); ++i) {
        const Pair& pair = pair_by_id(index, order[i]);
        const auto scores = score_group(pools[i], pair, oracle);
        for (std::size_t j = 0; j < scores.size(); ++j)
          w.append(Json{{"source_id", pair.id},
                        {"hyp_index", j},
                        {"metric_id", scores[j].metric_id},
                        {"value", scores[j].value}});
      }
      std::cout << "wrote " << out.string() << "\n";
      return 0;
    }

    if (decode_cmd->parsed()) {
      const DatasetSplit data = load_dataset(decode_data);
      const auto ckpt = load_checkpoint<double>(decode_ckpt);
      const std::vector<Pair>& pairs = decode_split == "train"   ? data.train
                                       : decode_split == "valid" ? data.valid
                                                                 : data.test;
      require(decode_split == "train" || decode_split == "valid" || decode_split == "test",
              "decode: unknown split " + decode_split);
      std::vector<Hypothesis> decodes(pairs.size());
      parallel_for(pairs.size(), decode_flags.threads, [&](std::size_t i) {
        decodes[i] = beam_search(ckpt.params, render_prompt(pairs[i]), decode_beam,
                                 decode_length_penalty, pairs[i].id, data.task.max_len + 4)
                         .front();
      });
      const auto out = resolve_out(decode_flags.out, "decodes.jsonl");
      JsonlWriter w(out);
      for (const auto& h : decodes) w.append(hypothesis_to_json(h));
      std::cout << "wrote " << out.string() << "\n";
      return 0;
    }

    if (select_cmd->parsed()) {
      const DatasetSplit data = load_dataset(select_data);
      const auto index = pair_index(data);
      std::vector<std::string> order;
      const auto pools = load_pool(select_pool, &order);
      const auto out = resolve_out(select_flags.out, "selected.jsonl");
      JsonlWriter w(out);
      for (std::size_t i = 0; i < pools.size(); ++i) {
        const Pair& pair = pair_by_id(index, order[i]);
        const CandidatePool pool = make_pool(pair, pools[i], {select_metric});
        std::size_t chosen;
        std::size_t n = select_n > 0 ? static_cast<std::size_t>(select_n) : pool.candidates.size();
        if (select_method == "bon") {
          chosen = best_of_n_index(pool, n, select_metric);
        } else if (select_method == "mbr") {
          chosen = mbr_index(pool);
        } else {
          throw ValidationError("select: unknown method " + select_method);
        }
        Json row = hypothesis_to_json(pool.candidates[chosen]);
        row["method"] = select_method;
        row["n"] = n;
        row["metric"] = select_method == "bon" ? select_metric : "ref_based_F";
        w.append(row);
      }
      std::cout << "wrote " << out.string() << "\n";
      return 0;
    }

    if (meta->parsed()) {
      std::vector<double> a, b;
      std::string col_a = "a", col_b = "b";
      if (!meta_tsv.empty()) {
        std::istringstream in(read_file(meta_tsv));
        std::string line;
        while (std::getline(in, line)) {
          if (line.empty() || line[0] == '#') continue;
          std::istringstream ls(line);
          double x, y;
          if (!(ls >> x >> y)) throw ValidationError("meta-eval: bad TSV row: " + line);
          a.push_back(x);
          b.push_back(y);
        }
        col_a = meta_tsv + ":col0";
        col_b = meta_tsv + ":col1";
      } else {
        require(!meta_a.empty() && !meta_b.empty(),
                "meta-eval: need --tsv or both --scores-a and --scores-b");
        const auto rows_a = read_jsonl(meta_a);
        const auto rows_b = read_jsonl(meta_b);
        require(rows_a.size() == rows_b.size(), "meta-eval: column length mismatch");
        for (std::size_t i = 0; i < rows_a.size(); ++i) {
          require(rows_a[i].at("source_id") == rows_b[i].at("source_id") &&
                      rows_a[i].at("hyp_index") == rows_b[i].at("hyp_index"),
                  "meta-eval: misaligned scored pools at row " + std::to_string(i));
          a.push_back(rows_a[i].at("value").get<double>());
          b.push_back(rows_b[i].at("value").get<double>());
        }
        col_a = rows_a.empty() ? "a" : rows_a.front().at("metric_id").get<std::string>();
        col_b = rows_b.empty() ? "b" : rows_b.front().at("metric_id").get<std::string>();
      }
      const CorrelationReport report = correlation_report(a, b, col_a, col_b);
      const Json j = correlation_report_to_json(report);
      std::cout << j.dump(2) << "\n";
      if (!meta_flags.out.empty()) write_json(meta_flags.out, j);
      return 0;
    }

    if (exp->parsed()) {
      ExperimentSpec spec;
      spec.name = exp_name;
      spec.seeds = exp_seeds;
      spec.out_root = resolve_out(exp_flags.out, "experiments");
      spec.threads = exp_flags.threads;
      if (!exp_flags.config_path.empty()) spec.overrides = read_json(exp_flags.config_path);
      return run_experiments(spec);
    }

    if (report->parsed()) {
      regenerate_reports(resolve_out(report_flags.out, "experiments"), report_name);
      return 0;
    }
  } catch (const ValidationError& e) {
    std::cerr << "E_VALIDATION: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "E_NUMERIC: " << e.what() << "\n";
    return 1;
  } catch (const IoError& e) {
    std::cerr << "E_IO: " << e.what() << "\n";
    return 1;
  } catch (const Json::exception& e) {
    std::cerr << "E_VALIDATION: config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "E_INTERNAL: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
