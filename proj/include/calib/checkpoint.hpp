#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include "calib/model.hpp"

namespace calib {

struct Provenance {
  std::string run_id;
  std::int64_t step = 0;
  double validation_score = 0.0;
};

inline Json provenance_to_json(const Provenance& p) {
  return Json{{"run_id", p.run_id}, {"step", p.step}, {"validation_score", p.validation_score}};
}

inline Provenance provenance_from_json(const Json& j) {
  Provenance p;
  p.run_id = j.at("run_id").get<std::string>();
  p.step = j.at("step").get<std::int64_t>();
  p.validation_score = j.at("validation_score").get<double>();
  return p;
}

template <class S>
struct Checkpoint {
  ModelConfig config;
  Parameters<S> params;
  Provenance provenance;
  int format_version = 1;

  explicit Checkpoint(const ModelConfig& cfg) : config(cfg), params(cfg) {}
  Checkpoint(const ModelConfig& cfg, Parameters<S> p, Provenance prov)
      : config(cfg), params(std::move(p)), provenance(std::move(prov)) {}
};

inline constexpr int kCheckpointFormatVersion = 1;

namespace detail {
// Checkpoints are written on little-endian hosts only; the raw tensor data is
// declared little-endian, so refuse to write lies on a big-endian machine.
inline void require_little_endian() {
  const std::uint16_t probe = 0x0102;
  require(*reinterpret_cast<const std::uint8_t*>(&probe) == 0x02,
          "checkpoint: only little-endian hosts are supported");
}
}  // namespace detail

/// File layout: one JSON header line (config, provenance, format_version,
/// per-tensor name/shape/byte-offset), then raw little-endian float64 tensor
/// data in declared order. Round-trips are bit-exact.
template <class S>
void save_checkpoint(const Checkpoint<S>& ckpt, const std::filesystem::path& path) {
  detail::require_little_endian();
  Json tensors = Json::array();
  for (const auto& t : ckpt.params.layout.tensors())
    tensors.push_back({{"name", t.name},
                       {"rows", t.rows},
                       {"cols", t.cols},
                       {"offset", t.offset * static_cast<Eigen::Index>(sizeof(double))}});
  const Json header{{"format_version", ckpt.format_version},
                    {"config", model_config_to_json(ckpt.config)},
                    {"provenance", provenance_to_json(ckpt.provenance)},
                    {"tensors", tensors}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
  out << header.dump() << "\n";
  if constexpr (std::is_same_v<S, double>) {
    out.write(reinterpret_cast<const char*>(ckpt.params.flat.data()),
              static_cast<std::streamsize>(sizeof(double)) * ckpt.params.flat.size());
  } else {
    VecX<double> wide = ckpt.params.flat.template cast<double>();
    out.write(reinterpret_cast<const char*>(wide.data()),
              static_cast<std::streamsize>(sizeof(double)) * wide.size());
  }
  if (!out) throw IoError("checkpoint write failed: " + path.string());
}

template <class S = double>
Checkpoint<S> load_checkpoint(const std::filesystem::path& path) {
  detail::require_little_endian();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  std::string header_line;
  if (!std::getline(in, header_line)) throw IoError("checkpoint missing header: " + path.string());
  Json header;
  try {
    header = Json::parse(header_line);
  } catch (const Json::parse_error& e) {
    throw IoError("checkpoint header is not valid JSON: " + std::string(e.what()));
  }
  const int version = header.at("format_version").get<int>();
  require(version == kCheckpointFormatVersion,
          "checkpoint: unsupported format_version " + std::to_string(version));
  Checkpoint<S> ckpt(model_config_from_json(header.at("config")));
  ckpt.provenance = provenance_from_json(header.at("provenance"));
  ckpt.format_version = version;

  const auto& declared = header.at("tensors");
  const auto& layout = ckpt.params.layout.tensors();
  require(declared.size() == layout.size(), "checkpoint: tensor list does not match config");
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& d = declared[i];
    require(d.at("name").get<std::string>() == layout[i].name &&
                d.at("rows").get<Eigen::Index>() == layout[i].rows &&
                d.at("cols").get<Eigen::Index>() == layout[i].cols,
            "checkpoint: tensor mismatch at " + layout[i].name);
  }

  VecX<double> wide(ckpt.params.flat.size());
  in.read(reinterpret_cast<char*>(wide.data()),
          static_cast<std::streamsize>(sizeof(double)) * wide.size());
  if (in.gcount() != static_cast<std::streamsize>(sizeof(double)) * wide.size())
    throw IoError("checkpoint data truncated: " + path.string());
  if constexpr (std::is_same_v<S, double>) {
    ckpt.params.flat = std::move(wide);
  } else {
    ckpt.params.flat = wide.template cast<S>();
  }
  return ckpt;
}

}  // namespace calib
