#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "calib/io.hpp"

namespace calib {

/// The five canned experiments. Everything an experiment computes is keyed by
/// (config, seed); reports are regenerable byte-identically from persisted
/// intermediates via regenerate_reports().
inline const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names{"main_table", "qe_scatter", "beam_vs_bon",
                                              "k_sensitivity", "cross_metric_grid"};
  return names;
}

struct ExperimentSpec {
  std::string name;  // one of experiment_names(), or "all"
  std::vector<std::uint64_t> seeds{7, 11, 13};
  Json overrides = Json::object();  // RFC 7386 merge-patch over default_harness_config()
  std::filesystem::path out_root;
  int threads = 1;

  void validate() const;
};

/// Built-in desk-scale recipe (data sizes, model, pretrain and calibration
/// hyperparameters, samplers, metrics).
Json default_harness_config();

/// Runs the named experiment(s): trains or reuses systems, persists pools and
/// decodes, then writes report TSVs plus a provenance manifest. Returns 0 on
/// success, 1 if any seed failed (failures are recorded in the manifest).
int run_experiments(const ExperimentSpec& spec);

/// Stage-B only: recompute every report and manifest of one experiment
/// directory from its persisted intermediates (no training, no sampling).
void regenerate_reports(const std::filesystem::path& out_root, const std::string& name);

}  // namespace calib
