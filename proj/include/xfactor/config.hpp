#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xfactor/augment.hpp"
#include "xfactor/simulator.hpp"

namespace xfactor {

using json = nlohmann::json;

namespace detail {

// Unknown config fields are hard errors to prevent silent drift.
inline void check_keys(const json& j, const std::string& section,
                       const std::vector<std::string>& allowed) {
  if (!j.is_object()) throw std::invalid_argument("config section '" + section + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    bool ok = false;
    for (const auto& a : allowed)
      if (key == a) {
        ok = true;
        break;
      }
    if (!ok)
      throw std::invalid_argument("unknown config field '" + section + "." + key + "'");
  }
}

template <typename T>
T get_or(const json& j, const std::string& key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

}  // namespace detail

enum class ModelVariant { Unconstrained, Bottleneck, Se3Plucker };

inline std::string to_string(ModelVariant v) {
  switch (v) {
    case ModelVariant::Unconstrained: return "unconstrained";
    case ModelVariant::Bottleneck: return "bottleneck";
    case ModelVariant::Se3Plucker: return "se3_plucker";
  }
  return "?";
}

inline ModelVariant variant_from_string(const std::string& s) {
  if (s == "unconstrained") return ModelVariant::Unconstrained;
  if (s == "bottleneck") return ModelVariant::Bottleneck;
  if (s == "se3_plucker") return ModelVariant::Se3Plucker;
  throw std::invalid_argument("unknown model variant '" + s + "'");
}

struct ModelConfig {
  int layers = 4;
  int width = 256;
  int heads = 8;
  int patch_size = 8;
  int pose_dim = 256;
  int image_size = 64;
  int mlp_ratio = 4;
  double rope_base = 100.0;
  ModelVariant variant = ModelVariant::Unconstrained;
  int views_encoder = 2;
  int views_decoder = 1;   // context views consumed by the renderer
  bool single_pass = false;  // fused double-partition forward (optimization)

  int grid() const { return image_size / patch_size; }
  int tokens_per_view() const { return grid() * grid(); }
  int head_dim() const { return width / heads; }
  int effective_pose_dim() const {
    return variant == ModelVariant::Bottleneck ? 16 : pose_dim;
  }

  void validate() const {
    if (width % heads != 0) throw std::invalid_argument("model.width must be divisible by heads");
    if (image_size % patch_size != 0)
      throw std::invalid_argument("model.image_size must be divisible by patch_size");
    if (head_dim() % 2 != 0) throw std::invalid_argument("head dimension must be even");
    if (layers < 1 || pose_dim < 1 || views_encoder < 2 || views_decoder < 1)
      throw std::invalid_argument("invalid model configuration");
  }

  static ModelConfig from_json(const json& j) {
    detail::check_keys(j, "model",
                       {"layers", "width", "heads", "patch_size", "pose_dim", "image_size",
                        "mlp_ratio", "rope_base", "variant", "views_encoder", "views_decoder",
                        "single_pass"});
    ModelConfig c;
    c.layers = detail::get_or(j, "layers", c.layers);
    c.width = detail::get_or(j, "width", c.width);
    c.heads = detail::get_or(j, "heads", c.heads);
    c.patch_size = detail::get_or(j, "patch_size", c.patch_size);
    c.pose_dim = detail::get_or(j, "pose_dim", c.pose_dim);
    c.image_size = detail::get_or(j, "image_size", c.image_size);
    c.mlp_ratio = detail::get_or(j, "mlp_ratio", c.mlp_ratio);
    c.rope_base = detail::get_or(j, "rope_base", c.rope_base);
    if (j.contains("variant")) c.variant = variant_from_string(j.at("variant").get<std::string>());
    c.views_encoder = detail::get_or(j, "views_encoder", c.views_encoder);
    c.views_decoder = detail::get_or(j, "views_decoder", c.views_decoder);
    c.single_pass = detail::get_or(j, "single_pass", c.single_pass);
    c.validate();
    return c;
  }

  json to_json() const {
    return json{{"layers", layers},       {"width", width},
                {"heads", heads},         {"patch_size", patch_size},
                {"pose_dim", pose_dim},   {"image_size", image_size},
                {"mlp_ratio", mlp_ratio}, {"rope_base", rope_base},
                {"variant", to_string(variant)},
                {"views_encoder", views_encoder},
                {"views_decoder", views_decoder},
                {"single_pass", single_pass}};
  }
};

struct DataConfig {
  OrbitParams orbit;
  double baseline_max_deg = 12.0;  // frame-pair rotation cap, in orbit degrees
  int sequence_length = 6;         // multi-view sequences
  int dataset_sequences = 64;      // gen-data manifest count

  static DataConfig from_json(const json& j) {
    detail::check_keys(j, "data",
                       {"orbit_radius", "orbit_height", "step_deg", "max_step_deg",
                        "radius_jitter", "height_jitter", "azimuth_jitter_deg",
                        "baseline_max_deg", "sequence_length", "dataset_sequences"});
    DataConfig c;
    c.orbit.radius = detail::get_or(j, "orbit_radius", c.orbit.radius);
    c.orbit.height = detail::get_or(j, "orbit_height", c.orbit.height);
    c.orbit.step_deg = detail::get_or(j, "step_deg", c.orbit.step_deg);
    c.orbit.max_step_deg = detail::get_or(j, "max_step_deg", c.orbit.max_step_deg);
    c.orbit.radius_jitter = detail::get_or(j, "radius_jitter", c.orbit.radius_jitter);
    c.orbit.height_jitter = detail::get_or(j, "height_jitter", c.orbit.height_jitter);
    c.orbit.azimuth_jitter_deg = detail::get_or(j, "azimuth_jitter_deg", c.orbit.azimuth_jitter_deg);
    c.baseline_max_deg = detail::get_or(j, "baseline_max_deg", c.baseline_max_deg);
    c.sequence_length = detail::get_or(j, "sequence_length", c.sequence_length);
    c.dataset_sequences = detail::get_or(j, "dataset_sequences", c.dataset_sequences);
    return c;
  }

  json to_json() const {
    return json{{"orbit_radius", orbit.radius},
                {"orbit_height", orbit.height},
                {"step_deg", orbit.step_deg},
                {"max_step_deg", orbit.max_step_deg},
                {"radius_jitter", orbit.radius_jitter},
                {"height_jitter", orbit.height_jitter},
                {"azimuth_jitter_deg", orbit.azimuth_jitter_deg},
                {"baseline_max_deg", baseline_max_deg},
                {"sequence_length", sequence_length},
                {"dataset_sequences", dataset_sequences}};
  }
};

inline AugmentConfig augment_from_json(const json& j) {
  detail::check_keys(j, "augment",
                     {"p_nomask", "brightness", "contrast", "saturation", "hue_shift",
                      "blur_sigma_max", "per_frame_partition"});
  AugmentConfig c;
  c.p_nomask = detail::get_or(j, "p_nomask", c.p_nomask);
  auto range = [&](const std::string& key, double& lo, double& hi) {
    if (j.contains(key)) {
      const auto& a = j.at(key);
      lo = a.at(0).get<double>();
      hi = a.at(1).get<double>();
    }
  };
  range("brightness", c.jitter.brightness_lo, c.jitter.brightness_hi);
  range("contrast", c.jitter.contrast_lo, c.jitter.contrast_hi);
  range("saturation", c.jitter.saturation_lo, c.jitter.saturation_hi);
  c.jitter.hue_shift = detail::get_or(j, "hue_shift", c.jitter.hue_shift);
  c.jitter.blur_sigma_max = detail::get_or(j, "blur_sigma_max", c.jitter.blur_sigma_max);
  c.per_frame_partition = detail::get_or(j, "per_frame_partition", c.per_frame_partition);
  return c;
}

inline json augment_to_json(const AugmentConfig& c) {
  return json{{"p_nomask", c.p_nomask},
              {"brightness", {c.jitter.brightness_lo, c.jitter.brightness_hi}},
              {"contrast", {c.jitter.contrast_lo, c.jitter.contrast_hi}},
              {"saturation", {c.jitter.saturation_lo, c.jitter.saturation_hi}},
              {"hue_shift", c.jitter.hue_shift},
              {"blur_sigma_max", c.jitter.blur_sigma_max},
              {"per_frame_partition", c.per_frame_partition}};
}

enum class Objective { Transferability, Autoencoding };

inline std::string to_string(Objective o) {
  return o == Objective::Transferability ? "transferability" : "autoencoding";
}
inline Objective objective_from_string(const std::string& s) {
  if (s == "transferability") return Objective::Transferability;
  if (s == "autoencoding") return Objective::Autoencoding;
  throw std::invalid_argument("unknown objective '" + s + "'");
}

struct TrainConfig {
  Objective objective = Objective::Transferability;
  ModelConfig model;
  DataConfig data;
  AugmentConfig augment;
  int batch_size = 32;
  int64_t total_steps = 20000;
  double lr_start = 4.0e-4;
  double lr_end = 1.0e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double perceptual_weight = 0.5;  // lambda on (1 - SSIM)
  double grad_clip = 0.0;          // 0 disables clipping
  uint64_t seed = 1;
  int64_t checkpoint_every = 1000;
  int64_t log_every = 50;

  void validate() const {
    if (total_steps <= 0) throw std::invalid_argument("train.total_steps must be > 0");
    if (perceptual_weight < 0) throw std::invalid_argument("train.perceptual_weight must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("train.batch_size must be >= 1");
    model.validate();
  }

  static TrainConfig from_json(const json& j) {
    detail::check_keys(j, "train",
                       {"objective", "model", "data", "augment", "batch_size", "total_steps",
                        "lr_start", "lr_end", "beta1", "beta2", "adam_eps", "weight_decay",
                        "perceptual_weight", "grad_clip", "seed", "checkpoint_every",
                        "log_every"});
    TrainConfig c;
    if (j.contains("objective"))
      c.objective = objective_from_string(j.at("objective").get<std::string>());
    if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
    if (j.contains("data")) c.data = DataConfig::from_json(j.at("data"));
    if (j.contains("augment")) c.augment = augment_from_json(j.at("augment"));
    c.batch_size = detail::get_or(j, "batch_size", c.batch_size);
    c.total_steps = detail::get_or(j, "total_steps", c.total_steps);
    c.lr_start = detail::get_or(j, "lr_start", c.lr_start);
    c.lr_end = detail::get_or(j, "lr_end", c.lr_end);
    c.beta1 = detail::get_or(j, "beta1", c.beta1);
    c.beta2 = detail::get_or(j, "beta2", c.beta2);
    c.adam_eps = detail::get_or(j, "adam_eps", c.adam_eps);
    c.weight_decay = detail::get_or(j, "weight_decay", c.weight_decay);
    c.perceptual_weight = detail::get_or(j, "perceptual_weight", c.perceptual_weight);
    c.grad_clip = detail::get_or(j, "grad_clip", c.grad_clip);
    c.seed = detail::get_or(j, "seed", c.seed);
    c.checkpoint_every = detail::get_or(j, "checkpoint_every", c.checkpoint_every);
    c.log_every = detail::get_or(j, "log_every", c.log_every);
    c.validate();
    return c;
  }

  json to_json() const {
    return json{{"objective", to_string(objective)},
                {"model", model.to_json()},
                {"data", data.to_json()},
                {"augment", augment_to_json(augment)},
                {"batch_size", batch_size},
                {"total_steps", total_steps},
                {"lr_start", lr_start},
                {"lr_end", lr_end},
                {"beta1", beta1},
                {"beta2", beta2},
                {"adam_eps", adam_eps},
                {"weight_decay", weight_decay},
                {"perceptual_weight", perceptual_weight},
                {"grad_clip", grad_clip},
                {"seed", seed},
                {"checkpoint_every", checkpoint_every},
                {"log_every", log_every}};
  }
};

struct EvalConfig {
  int n_cases = 200;
  int n_targets = 5;
  uint64_t seed = 7;
  double rejection_ceiling = 0.5;  // warn if more frames than this are rejected
  PhotometricOracleParams oracle;
  bool reference_relative = false;  // pair mode for RRA/RTA/AUC
  int64_t probe_iters = 10000;
  int probe_feature_dim = 256;
  int probe_batch_size = 64;

  static EvalConfig from_json(const json& j) {
    detail::check_keys(j, "eval",
                       {"n_cases", "n_targets", "seed", "rejection_ceiling", "oracle_reject_mse",
                        "oracle_rot_range_deg", "oracle_trans_range", "oracle_refine_iters",
                        "reference_relative", "probe_iters", "probe_feature_dim",
                        "probe_batch_size"});
    EvalConfig c;
    c.n_cases = detail::get_or(j, "n_cases", c.n_cases);
    c.n_targets = detail::get_or(j, "n_targets", c.n_targets);
    c.seed = detail::get_or(j, "seed", c.seed);
    c.rejection_ceiling = detail::get_or(j, "rejection_ceiling", c.rejection_ceiling);
    c.oracle.reject_mse = detail::get_or(j, "oracle_reject_mse", c.oracle.reject_mse);
    c.oracle.rot_range_deg = detail::get_or(j, "oracle_rot_range_deg", c.oracle.rot_range_deg);
    c.oracle.trans_range = detail::get_or(j, "oracle_trans_range", c.oracle.trans_range);
    c.oracle.refine_iters = detail::get_or(j, "oracle_refine_iters", c.oracle.refine_iters);
    c.reference_relative = detail::get_or(j, "reference_relative", c.reference_relative);
    c.probe_iters = detail::get_or(j, "probe_iters", c.probe_iters);
    c.probe_feature_dim = detail::get_or(j, "probe_feature_dim", c.probe_feature_dim);
    c.probe_batch_size = detail::get_or(j, "probe_batch_size", c.probe_batch_size);
    return c;
  }

  json to_json() const {
    return json{{"n_cases", n_cases},
                {"n_targets", n_targets},
                {"seed", seed},
                {"rejection_ceiling", rejection_ceiling},
                {"oracle_reject_mse", oracle.reject_mse},
                {"oracle_rot_range_deg", oracle.rot_range_deg},
                {"oracle_trans_range", oracle.trans_range},
                {"oracle_refine_iters", oracle.refine_iters},
                {"reference_relative", reference_relative},
                {"probe_iters", probe_iters},
                {"probe_feature_dim", probe_feature_dim},
                {"probe_batch_size", probe_batch_size}};
  }
};

struct ExperimentConfig {
  TrainConfig train;
  EvalConfig eval;

  static ExperimentConfig from_json(const json& j) {
    detail::check_keys(j, "", {"train", "eval"});
    ExperimentConfig c;
    if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
    if (j.contains("eval")) c.eval = EvalConfig::from_json(j.at("eval"));
    return c;
  }
  json to_json() const { return json{{"train", train.to_json()}, {"eval", eval.to_json()}}; }
};

// FNV-1a 64 over the canonical JSON dump.
inline std::string config_hash(const json& j) {
  const std::string s = j.dump();
  uint64_t h = 0xcbf29ce484222325ull;
  for (const char c : s) {
    h ^= static_cast<uint8_t>(c);
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace xfactor
