#pragma once

// Run configuration: nested JSON with defaults for every key, strict key
// checking and dotted-path overrides.

#include "curvelane/evaluation.hpp"
#include "curvelane/matching.hpp"
#include "curvelane/network.hpp"
#include "curvelane/synthetic.hpp"
#include "curvelane/temporal.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace curvelane {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct OptimizerConfig {
  double lr = 2e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 1.0;  // global L2 norm; 0 disables
  int warmup_steps = 0;
  int decay_step = 0;        // > 0 multiplies lr by decay_factor once this many steps are done
  double decay_factor = 0.1;

  void validate() const {
    if (!(lr > 0) || weight_decay < 0 || !(eps > 0) || grad_clip < 0 || warmup_steps < 0 || decay_step < 0 ||
        !(decay_factor > 0)) {
      throw ConfigError("optimizer: lr and eps must be positive, other values non-negative");
    }
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("optimizer: betas must be in [0, 1)");
  }
};

struct TrainConfig {
  int epochs = 50;
  int batch_size = 2;
  int max_steps = 0;  // > 0 caps the run below the epoch budget
  int log_every = 1;
  int checkpoint_every = 500;
  std::string precision = "float";  // float | double

  void validate() const {
    if (epochs < 1 || batch_size < 1 || max_steps < 0 || log_every < 1 || checkpoint_every < 0) {
      throw ConfigError("train: epochs, batch_size, log_every must be >= 1");
    }
    if (precision != "float" && precision != "double") throw ConfigError("train.precision must be float or double");
  }
};

struct DataConfig {
  std::string dataset;  // directory of a saved dataset; empty means generate in memory
  int sequences = 20;
  int frames = 1;
  SceneConfig scene{};

  void validate() const {
    if (sequences < 1 || frames < 1) throw ConfigError("data: sequences and frames must be >= 1");
  }
};

struct RunConfig {
  ModelConfig model{};
  LossConfig loss{};
  FusionConfig fusion{};
  EvalConfig eval{};
  DataConfig data{};
  OptimizerConfig optimizer{};
  TrainConfig train{};
  std::uint64_t seed = 0;
  std::string out = "runs/default";

  void validate() const {
    model.validate();
    loss.validate();
    fusion.validate();
    eval.validate();
    data.validate();
    optimizer.validate();
    train.validate();
    if (model.image != data.scene.image) throw ConfigError("model.image must equal data.scene.image");
  }
};

// Enums travel as their names; unknown names are rejected.
inline void to_json(nlohmann::json& j, CoeffMode v) { j = to_string(v); }
inline void from_json(const nlohmann::json& j, CoeffMode& v) { v = coeff_mode_from_string(j.get<std::string>()); }
inline void to_json(nlohmann::json& j, FusionVariant v) { j = to_string(v); }
inline void from_json(const nlohmann::json& j, FusionVariant& v) { v = fusion_variant_from_string(j.get<std::string>()); }
inline void to_json(nlohmann::json& j, LaneGeometry v) { j = to_string(v); }
inline void from_json(const nlohmann::json& j, LaneGeometry& v) { v = lane_geometry_from_string(j.get<std::string>()); }
inline void to_json(nlohmann::json& j, PointNormalization v) { j = v == PointNormalization::sum ? "sum" : "mean"; }
inline void from_json(const nlohmann::json& j, PointNormalization& v) {
  const auto s = j.get<std::string>();
  if (s != "mean" && s != "sum") throw ConfigError("unknown point normalization '" + s + "'");
  v = s == "sum" ? PointNormalization::sum : PointNormalization::mean;
}

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(Interval, lo, hi)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(WorldBox, x, y, z)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ImageSize, height, width)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(CameraConfig, focal, height, pitch)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(SceneConfig, min_lanes, max_lanes, geometry, lane_spacing, spacing_jitter,
                                   max_heading, max_curvature, hill_amplitude, hill_wavelength, grade,
                                   min_lane_length, max_lane_length, ego_speed, max_yaw_rate, sample_spacing, image,
                                   camera, stroke_width, noise_amplitude, box, seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ModelConfig, image, stage_channels, levels, seg_channels, dim, layers, queries,
                                   heads, samples, anchors, poly_order, pe_dim, pe_base, ffn_dim, self_attention,
                                   range_restriction, zero_init_refine, detach_anchors, coeff_mode, coeff_scale,
                                   range_softplus_beta, offset_init, init_range_start, init_range_end, anchor_spread, box)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(LossConfig, cls, point, boundary, query_point, query_boundary, seg_weight,
                                   seg_pos_weight, point_normalization, log_eps)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(FusionConfig, variant, top_k, history_len)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(EvalConfig, max_distance, coverage, near_far_split, confidence, grid_points,
                                   y_range, once_iou, once_cd, once_lane_width, once_step)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(OptimizerConfig, lr, weight_decay, beta1, beta2, eps, grad_clip, warmup_steps,
                                   decay_step, decay_factor)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(TrainConfig, epochs, batch_size, max_steps, log_every, checkpoint_every, precision)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(DataConfig, dataset, sequences, frames, scene)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(RunConfig, model, loss, fusion, eval, data, optimizer, train, seed, out)

namespace detail {

inline std::string json_kind(const nlohmann::json& j) {
  if (j.is_number()) return "number";
  return j.type_name();
}

inline bool compatible(const nlohmann::json& def, const nlohmann::json& v) {
  if (def.is_number()) {
    if (!v.is_number()) return false;
    if (def.is_number_integer() || def.is_number_unsigned()) return v.is_number_integer() || v.is_number_unsigned();
    return true;
  }
  return json_kind(def) == json_kind(v);
}

/// Writes `src` into `dst`, refusing keys absent from `dst` and type changes.
inline void strict_merge(nlohmann::json& dst, const nlohmann::json& src, const std::string& path) {
  if (!src.is_object()) throw ConfigError((path.empty() ? "config" : path) + ": expected an object");
  for (auto it = src.begin(); it != src.end(); ++it) {
    const std::string p = path.empty() ? it.key() : path + "." + it.key();
    if (!dst.contains(it.key())) throw ConfigError("unknown config key '" + p + "'");
    auto& d = dst[it.key()];
    if (d.is_object()) {
      strict_merge(d, *it, p);
    } else {
      if (!compatible(d, *it)) {
        throw ConfigError("config key '" + p + "' expects " + json_kind(d) + ", got " + json_kind(*it));
      }
      d = *it;
    }
  }
}

}  // namespace detail

inline nlohmann::json default_config_json() { return nlohmann::json(RunConfig{}); }

/// Builds a config from a (possibly partial) JSON document over the defaults.
inline RunConfig config_from_json(const nlohmann::json& partial) {
  nlohmann::json full = default_config_json();
  detail::strict_merge(full, partial, "");
  RunConfig c;
  try {
    c = full.get<RunConfig>();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("invalid config value: ") + e.what());
  }
  return c;
}

/// Applies `a.b.c=value`. The value is read as JSON when it parses, as a
/// plain string otherwise.
inline void apply_override(nlohmann::json& partial, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value: " + assignment);
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json* node = &partial;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("empty segment in override key '" + key + "'");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    node = &(*node)[part];
    if (!node->is_object()) *node = nlohmann::json::object();
    start = dot + 1;
  }
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

/// File (optional), then overrides, then validation.
inline RunConfig load_config(const std::string& file, const std::vector<std::string>& overrides) {
  nlohmann::json partial = file.empty() ? nlohmann::json::object() : read_json_file(file);
  for (const auto& o : overrides) apply_override(partial, o);
  RunConfig c = config_from_json(partial);
  try {
    c.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return c;
}

/// Dotted keys whose values differ between two JSON documents.
inline std::vector<std::string> diff_keys(const nlohmann::json& a, const nlohmann::json& b, const std::string& path = "") {
  std::vector<std::string> out;
  if (a.is_object() && b.is_object()) {
    for (auto it = a.begin(); it != a.end(); ++it) {
      const std::string p = path.empty() ? it.key() : path + "." + it.key();
      if (!b.contains(it.key())) {
        out.push_back(p);
        continue;
      }
      const auto sub = diff_keys(*it, b[it.key()], p);
      out.insert(out.end(), sub.begin(), sub.end());
    }
    for (auto it = b.begin(); it != b.end(); ++it) {
      if (!a.contains(it.key())) out.push_back(path.empty() ? it.key() : path + "." + it.key());
    }
    return out;
  }
  if (a != b) out.push_back(path);
  return out;
}

}  // namespace curvelane
