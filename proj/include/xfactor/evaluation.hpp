#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "xfactor/geometry.hpp"
#include "xfactor/model.hpp"
#include "xfactor/training.hpp"

namespace xfactor {

// ---------------------------------------------------------------------------
// Pair metrics with per-frame validity (unreliable oracle estimates count as
// metric misses rather than being dropped).

struct CaseMetrics {
  double rra10 = 0, rra20 = 0, rra30 = 0;
  double rta10 = 0, rta20 = 0, rta30 = 0;
  double auc10 = 0, auc20 = 0, auc30 = 0;
  double rejected = 0;   // fraction of estimated frames flagged unreliable
  double l1_transfer = 0;  // rendered vs scene-B ground truth at transferred poses
  double l1_source = 0;    // rendered vs scene-A target frames (leakage guard)
};

inline AccuracyResult masked_accuracy(const Trajectory& gt, const Trajectory& est,
                                      const std::vector<uint8_t>& valid, double tau_deg,
                                      PairMode mode = PairMode::AllPairs, int reference = 0) {
  if (gt.size() != est.size() || gt.size() != valid.size())
    throw std::invalid_argument("masked_accuracy: size mismatch");
  const int n = static_cast<int>(gt.size());
  int64_t total = 0, rra_hits = 0, rta_hits = 0;
  auto consider = [&](int i, int j) {
    ++total;
    if (!valid[static_cast<size_t>(i)] || !valid[static_cast<size_t>(j)]) return;  // miss
    const Pose rg = relative_pose(gt[static_cast<size_t>(i)], gt[static_cast<size_t>(j)]);
    const Pose re = relative_pose(est[static_cast<size_t>(i)], est[static_cast<size_t>(j)]);
    if (rotation_angle_deg(rg.rotation.transposed() * re.rotation) < tau_deg) ++rra_hits;
    if (translation_angle_deg(rg.translation, re.translation) < tau_deg) ++rta_hits;
  };
  if (mode == PairMode::AllPairs) {
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) consider(i, j);
  } else {
    for (int j = 0; j < n; ++j)
      if (j != reference) consider(reference, j);
  }
  if (total == 0) throw std::invalid_argument("masked_accuracy: no pairs");
  return {static_cast<double>(rra_hits) / total, static_cast<double>(rta_hits) / total};
}

inline double masked_auc(const Trajectory& gt, const Trajectory& est,
                         const std::vector<uint8_t>& valid, int tau_max_deg,
                         PairMode mode = PairMode::AllPairs, int reference = 0) {
  double acc = 0;
  for (int tau = 1; tau <= tau_max_deg; ++tau) {
    const auto r = masked_accuracy(gt, est, valid, tau, mode, reference);
    acc += std::min(r.rra, r.rta);
  }
  return acc / tau_max_deg;
}

// ---------------------------------------------------------------------------
// Transfer evaluation cases.

struct TransferEvalCase {
  SequenceSample a, b;
  int ref_idx = 0;
  std::vector<int> target_indices;
  std::vector<Image> rendered;
  Trajectory gt_trajectory;   // reference + targets, scene-A ground truth
  Trajectory est_trajectory;  // reference (known) + oracle estimates
  std::vector<uint8_t> valid;
  std::vector<double> residuals;
  CaseMetrics metrics;
};

// How rendered target frames are produced. The default wraps the model; tests
// substitute cheating implementations to validate the harness itself.
using RenderFn = std::function<Image(const SequenceSample& a, const SequenceSample& b,
                                     int ref_idx, int target_idx)>;

// Renders one target via the model: pose latents from sequence A, context
// frames from sequence B. The frame subset mirrors the training wiring of the
// configured variant (extra encoder/decoder views draw filler frames).
template <typename T>
RenderFn model_render_fn(const XFactorModel<T>& model) {
  return [&model](const SequenceSample& a, const SequenceSample& b, int ref_idx,
                  int target_idx) {
    NoGradGuard ng;
    const ModelConfig& mc = model.cfg;
    const int grid = mc.grid();
    const int m = std::max(mc.views_encoder, mc.views_decoder + 1);
    std::vector<int> idx{ref_idx};
    for (int f = 0; static_cast<int>(idx.size()) < m - 1; ++f) {
      if (f == ref_idx || f == target_idx) continue;
      if (f >= static_cast<int>(a.frames.size()))
        throw std::invalid_argument("sequence too short for variant wiring");
      idx.push_back(f);
    }
    idx.push_back(target_idx);

    std::vector<Image> sub_a;
    for (const int f : idx) sub_a.push_back(a.frames[static_cast<size_t>(f)]);
    std::vector<AugmentedSeq> va{plain_seq(sub_a, grid)};
    auto latents = encode_sequence(model, va, 0);

    std::vector<const Image*> ctx;
    std::vector<int> ctx_latent_index;
    std::vector<uint8_t> vis;
    for (int v = 0; v < mc.views_decoder; ++v) {
      ctx.push_back(&b.frames[static_cast<size_t>(idx[static_cast<size_t>(v)])]);
      ctx_latent_index.push_back(v);
      vis.insert(vis.end(), static_cast<size_t>(mc.tokens_per_view()), 1);
    }
    auto pred = model.renderer.render(detail::stack_frames<T>(ctx), 1, mc.views_decoder, latents,
                                      ctx_latent_index, m - 1, vis);
    return Image::from_tensor(reshape(pred, Shape{pred.dim(1), pred.dim(2), 3}));
  };
}

inline std::vector<int> equally_spaced_targets(int n_frames, int ref_idx, int n_targets) {
  std::vector<int> all;
  for (int i = 0; i < n_frames; ++i)
    if (i != ref_idx) all.push_back(i);
  if (static_cast<int>(all.size()) < n_targets)
    throw std::invalid_argument("sequence too short for target count");
  std::vector<int> out;
  for (int k = 0; k < n_targets; ++k) {
    const double pos = n_targets == 1 ? 0 : static_cast<double>(k) * (all.size() - 1) /
                                                (n_targets - 1);
    out.push_back(all[static_cast<size_t>(std::llround(pos))]);
  }
  return out;
}

inline TransferEvalCase run_transfer_case(const RenderFn& render_fn, uint64_t seed,
                                          const DataConfig& data, const EvalConfig& eval,
                                          int image_size) {
  TransferEvalCase c;
  const int n = std::max(eval.n_targets + 1, data.sequence_length);
  auto [a, b] = make_transfer_pair(seed, n, image_size, data.orbit);
  c.a = std::move(a);
  c.b = std::move(b);
  c.ref_idx = c.a.reference_index;
  c.target_indices = equally_spaced_targets(n, c.ref_idx, eval.n_targets);

  c.gt_trajectory.push_back(c.a.poses[static_cast<size_t>(c.ref_idx)]);
  c.est_trajectory.push_back(c.b.poses[static_cast<size_t>(c.ref_idx)]);
  c.valid.push_back(1);
  c.residuals.push_back(0);

  int rejected = 0;
  double l1t = 0, l1s = 0;
  for (const int t : c.target_indices) {
    Image frame = render_fn(c.a, c.b, c.ref_idx, t);
    l1t += image_l1(frame, c.b.frames[static_cast<size_t>(t)]);
    l1s += image_l1(frame, c.a.frames[static_cast<size_t>(t)]);
    // init: B's context pose advanced by A's relative motion for this target
    const Pose init = se3_compose(c.b.poses[static_cast<size_t>(c.ref_idx)],
                                  relative_pose(c.a.poses[static_cast<size_t>(c.ref_idx)],
                                                c.a.poses[static_cast<size_t>(t)]));
    auto est = oracle_photometric(frame, c.b.scene, init, c.b.intrinsics, eval.oracle);
    c.rendered.push_back(std::move(frame));
    c.gt_trajectory.push_back(c.a.poses[static_cast<size_t>(t)]);
    c.est_trajectory.push_back(est.pose);
    c.valid.push_back(est.reliable ? 1 : 0);
    c.residuals.push_back(est.residual);
    if (!est.reliable) ++rejected;
  }

  const PairMode mode = eval.reference_relative ? PairMode::ReferenceRelative : PairMode::AllPairs;
  auto acc = [&](double tau) { return masked_accuracy(c.gt_trajectory, c.est_trajectory, c.valid,
                                                      tau, mode, 0); };
  CaseMetrics& m = c.metrics;
  auto a10 = acc(10), a20 = acc(20), a30 = acc(30);
  m.rra10 = a10.rra; m.rta10 = a10.rta;
  m.rra20 = a20.rra; m.rta20 = a20.rta;
  m.rra30 = a30.rra; m.rta30 = a30.rta;
  m.auc10 = masked_auc(c.gt_trajectory, c.est_trajectory, c.valid, 10, mode, 0);
  m.auc20 = masked_auc(c.gt_trajectory, c.est_trajectory, c.valid, 20, mode, 0);
  m.auc30 = masked_auc(c.gt_trajectory, c.est_trajectory, c.valid, 30, mode, 0);
  m.rejected = static_cast<double>(rejected) / eval.n_targets;
  m.l1_transfer = l1t / eval.n_targets;
  m.l1_source = l1s / eval.n_targets;
  return c;
}

// ---------------------------------------------------------------------------
// Reports.

struct MetricsReport {
  std::string experiment_id;
  std::string variant = "unconstrained";
  std::string objective = "transferability";
  std::string config_hash;
  // The perceptual term substitutes SSIM for a learned feature metric; noted
  // in every report for honest comparison.
  std::string d_i_note = "perceptual term = 1-SSIM (no pretrained feature network)";
  int n_cases = 0;
  CaseMetrics mean;  // means over cases
  double rejection_rate = 0;
  bool rejection_warning = false;
  double psnr = -1, ssim_score = -1;
  double probe_rra20 = -1, probe_rta20 = -1, probe_auc20 = -1;

  json to_json() const {
    return json{{"experiment_id", experiment_id},
                {"variant", variant},
                {"objective", objective},
                {"config_hash", config_hash},
                {"d_i_note", d_i_note},
                {"n_cases", n_cases},
                {"rra", {{"10", mean.rra10}, {"20", mean.rra20}, {"30", mean.rra30}}},
                {"rta", {{"10", mean.rta10}, {"20", mean.rta20}, {"30", mean.rta30}}},
                {"auc", {{"10", mean.auc10}, {"20", mean.auc20}, {"30", mean.auc30}}},
                {"l1_transfer", mean.l1_transfer},
                {"l1_source", mean.l1_source},
                {"rejection_rate", rejection_rate},
                {"rejection_warning", rejection_warning},
                {"psnr", psnr},
                {"ssim", ssim_score},
                {"probe_rra20", probe_rra20},
                {"probe_rta20", probe_rta20},
                {"probe_auc20", probe_auc20}};
  }

  static MetricsReport from_json(const json& j) {
    MetricsReport r;
    r.experiment_id = j.at("experiment_id").get<std::string>();
    r.variant = j.at("variant").get<std::string>();
    r.objective = j.at("objective").get<std::string>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.d_i_note = j.at("d_i_note").get<std::string>();
    r.n_cases = j.at("n_cases").get<int>();
    r.mean.rra10 = j.at("rra").at("10").get<double>();
    r.mean.rra20 = j.at("rra").at("20").get<double>();
    r.mean.rra30 = j.at("rra").at("30").get<double>();
    r.mean.rta10 = j.at("rta").at("10").get<double>();
    r.mean.rta20 = j.at("rta").at("20").get<double>();
    r.mean.rta30 = j.at("rta").at("30").get<double>();
    r.mean.auc10 = j.at("auc").at("10").get<double>();
    r.mean.auc20 = j.at("auc").at("20").get<double>();
    r.mean.auc30 = j.at("auc").at("30").get<double>();
    r.mean.l1_transfer = j.at("l1_transfer").get<double>();
    r.mean.l1_source = j.at("l1_source").get<double>();
    r.rejection_rate = j.at("rejection_rate").get<double>();
    r.rejection_warning = j.at("rejection_warning").get<bool>();
    r.psnr = j.at("psnr").get<double>();
    r.ssim_score = j.at("ssim").get<double>();
    r.probe_rra20 = j.at("probe_rra20").get<double>();
    r.probe_rta20 = j.at("probe_rta20").get<double>();
    r.probe_auc20 = j.at("probe_auc20").get<double>();
    return r;
  }
};

struct TransferEvalResult {
  MetricsReport report;
  std::vector<CaseMetrics> cases;
};

inline TransferEvalResult eval_transferability(const RenderFn& render_fn, const DataConfig& data,
                                               const EvalConfig& eval, int image_size) {
  TransferEvalResult out;
  CaseMetrics& m = out.report.mean;
  for (int i = 0; i < eval.n_cases; ++i) {
    auto c = run_transfer_case(render_fn, Rng::mix(eval.seed, 0x63617365 + i), data, eval,
                               image_size);
    out.cases.push_back(c.metrics);
    m.rra10 += c.metrics.rra10; m.rra20 += c.metrics.rra20; m.rra30 += c.metrics.rra30;
    m.rta10 += c.metrics.rta10; m.rta20 += c.metrics.rta20; m.rta30 += c.metrics.rta30;
    m.auc10 += c.metrics.auc10; m.auc20 += c.metrics.auc20; m.auc30 += c.metrics.auc30;
    m.rejected += c.metrics.rejected;
    m.l1_transfer += c.metrics.l1_transfer;
    m.l1_source += c.metrics.l1_source;
  }
  const double n = eval.n_cases;
  m.rra10 /= n; m.rra20 /= n; m.rra30 /= n;
  m.rta10 /= n; m.rta20 /= n; m.rta30 /= n;
  m.auc10 /= n; m.auc20 /= n; m.auc30 /= n;
  m.rejected /= n;
  m.l1_transfer /= n;
  m.l1_source /= n;
  out.report.n_cases = eval.n_cases;
  out.report.rejection_rate = m.rejected;
  out.report.rejection_warning = m.rejected > eval.rejection_ceiling;
  return out;
}

// Faithfulness guard: (a) rendered vs scene-B ground truth at the transferred
// poses should be small; (b) rendered vs scene-A source frames should stay
// clearly larger than (a), otherwise content is leaking through the latent.
struct FaithfulnessResult {
  double l1_transfer = 0;
  double l1_source = 0;
  bool flagged_unfaithful = false;
};

inline FaithfulnessResult eval_faithfulness(const RenderFn& render_fn, const DataConfig& data,
                                            const EvalConfig& eval, int image_size) {
  auto res = eval_transferability(render_fn, data, eval, image_size);
  FaithfulnessResult f;
  f.l1_transfer = res.report.mean.l1_transfer;
  f.l1_source = res.report.mean.l1_source;
  f.flagged_unfaithful = f.l1_source < f.l1_transfer;
  return f;
}

// ---------------------------------------------------------------------------
// Autoencoding reconstruction metrics.

inline double psnr_from_mse(double mse) {
  if (mse <= 0) return 99.0;  // documented cap for identical images
  return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

struct ReconstructionResult {
  double psnr = 0;
  double ssim = 0;
};

template <typename T>
ReconstructionResult eval_reconstruction(const XFactorModel<T>& model, const DataConfig& data,
                                         int n_sequences, uint64_t seed) {
  NoGradGuard ng;
  const int grid = model.cfg.grid();
  double psnr_acc = 0, ssim_acc = 0;
  for (int i = 0; i < n_sequences; ++i) {
    const uint64_t s = Rng::mix(seed, 0x7265636f + i);
    OrbitParams op = data.orbit;
    Rng rng(Rng::mix(s, 0x73746570));
    op.step_deg = rng.uniform(2.0, data.baseline_max_deg);
    auto seq = make_sequence(s, model.cfg.views_decoder + 1, model.cfg.image_size, op);
    std::vector<AugmentedSeq> v{plain_seq(seq.frames, grid)};
    const int target = model.cfg.views_decoder;  // last frame
    auto latents = encode_sequence(model, v, 0);
    std::vector<const Image*> ctx;
    std::vector<int> ctx_idx;
    std::vector<uint8_t> vis;
    for (int f = 0; f < target; ++f) {
      ctx.push_back(&seq.frames[static_cast<size_t>(f)]);
      ctx_idx.push_back(f);
      vis.insert(vis.end(), static_cast<size_t>(model.cfg.tokens_per_view()), 1);
    }
    auto pred = model.renderer.render(detail::stack_frames<T>(ctx), 1, target, latents, ctx_idx,
                                      target, vis);
    auto gt = detail::stack_frames<T>({&seq.frames[static_cast<size_t>(target)]});
    const double mse = [&] {
      double acc = 0;
      for (size_t k = 0; k < pred.data().size(); ++k) {
        const double d = static_cast<double>(pred.data()[k]) - static_cast<double>(gt.data()[k]);
        acc += d * d;
      }
      return acc / pred.data().size();
    }();
    psnr_acc += psnr_from_mse(mse);
    ssim_acc += static_cast<double>(ssim(pred, gt).item());
  }
  return {psnr_acc / n_sequences, ssim_acc / n_sequences};
}

// ---------------------------------------------------------------------------
// Pose probing of frozen latents.

enum class ProbeMode { Pair, Trajectory };

// A probe dataset decouples latent extraction from probe training so harness
// ceiling/floor tests can inject synthetic latents.
struct ProbeDataset {
  // Pair mode: one latent per sample, one relative pose. Trajectory mode:
  // n_targets latents per sample, n_targets relative poses (vs the reference).
  std::vector<std::vector<double>> inputs;
  std::vector<Trajectory> gt;  // relative poses, identity-anchored at index 0
  ProbeMode mode = ProbeMode::Pair;
  int latent_dim = 0;
  int poses_per_sample = 1;
};

template <typename T>
ProbeDataset make_probe_dataset(const XFactorModel<T>& model, const DataConfig& data,
                                ProbeMode mode, int n_samples, int n_targets, uint64_t seed) {
  NoGradGuard ng;
  ProbeDataset ds;
  ds.mode = mode;
  const int grid = model.cfg.grid();
  const int k = mode == ProbeMode::Pair ? 1 : n_targets;
  ds.poses_per_sample = k;
  for (int i = 0; i < n_samples; ++i) {
    const uint64_t s = Rng::mix(seed, 0x70726f62 + i);
    OrbitParams op = data.orbit;
    Rng rng(Rng::mix(s, 0x73746570));
    op.step_deg = rng.uniform(2.0, data.baseline_max_deg);
    auto seq = make_sequence(s, k + 1, model.cfg.image_size, op);
    std::vector<AugmentedSeq> v{plain_seq(seq.frames, grid)};
    auto latents = encode_sequence(model, v, 0);  // pair-wise vs frame 0
    std::vector<double> in;
    Trajectory rel;
    const int D = static_cast<int>(latents.values.dim(2));
    for (int t = 1; t <= k; ++t) {
      for (int d = 0; d < D; ++d)
        in.push_back(static_cast<double>(
            latents.values.data()[static_cast<size_t>(t) * D + d]));
      rel.push_back(relative_pose(seq.poses[0], seq.poses[static_cast<size_t>(t)]));
    }
    ds.latent_dim = D;
    ds.inputs.push_back(std::move(in));
    ds.gt.push_back(std::move(rel));
  }
  return ds;
}

struct ProbeConfig {
  int feature_dim = 256;
  int64_t iters = 10000;
  int batch_size = 64;
  double lr = 1e-3;
  double holdout_frac = 0.2;
  uint64_t seed = 17;
};

struct ProbeReport {
  double rra20 = 0, rta20 = 0;
  double auc10 = 0, auc20 = 0, auc30 = 0;
  double final_loss = 0;
};

namespace detail {

// Differentiable geodesic + translation loss between predicted head outputs
// (per pose: 6 rotation values + 3 translation values) and fixed targets.
template <typename T>
Tensor<T> pose_head_loss(const Tensor<T>& head, const std::vector<const Pose*>& targets,
                         bool scale_aligned, int64_t poses_per_sample = 1) {
  const int64_t N = head.dim(0);
  if (N != static_cast<int64_t>(targets.size()))
    throw std::invalid_argument("pose_head_loss: batch mismatch");
  auto rot = rotation_from_6d(slice(head, -1, 0, 6));  // [N,3,3]
  auto trans = slice(head, -1, 6, 3);                  // [N,3]

  std::vector<T> gt_rot(static_cast<size_t>(N) * 9), gt_trans(static_cast<size_t>(N) * 3);
  for (int64_t i = 0; i < N; ++i) {
    for (int j = 0; j < 9; ++j) gt_rot[static_cast<size_t>(i * 9 + j)] =
        static_cast<T>(targets[static_cast<size_t>(i)]->rotation.m[static_cast<size_t>(j)]);
    gt_trans[static_cast<size_t>(i * 3 + 0)] = static_cast<T>(targets[static_cast<size_t>(i)]->translation.x);
    gt_trans[static_cast<size_t>(i * 3 + 1)] = static_cast<T>(targets[static_cast<size_t>(i)]->translation.y);
    gt_trans[static_cast<size_t>(i * 3 + 2)] = static_cast<T>(targets[static_cast<size_t>(i)]->translation.z);
  }
  Tensor<T> R_gt, t_gt;
  {
    NoGradGuard ng;
    R_gt = Tensor<T>(Shape{N, 3, 3}, std::move(gt_rot));
    t_gt = Tensor<T>(Shape{N, 3}, std::move(gt_trans));
  }
  // trace(R_pred^T R_gt) = sum of elementwise products
  auto tr = sum_axis(sum_axis(mul(rot, R_gt), -1, false), -1, false);  // [N]
  auto cosang = clamp(mul_scalar(add_scalar(tr, T(-1)), T(0.5)), T(-1 + 1e-6), T(1 - 1e-6));
  auto geo = mean(acos(cosang));

  Tensor<T> terr;
  if (scale_aligned) {
    // s* = <t_pred, t_gt> / <t_pred, t_pred> per trajectory of k poses
    const int64_t S = N / poses_per_sample;
    auto tp = reshape(trans, Shape{S, poses_per_sample * 3});
    auto tg = reshape(t_gt, Shape{S, poses_per_sample * 3});
    auto num = sum_axis(mul(tp, tg), -1, true);
    auto den = add_scalar(sum_axis(mul(tp, tp), -1, true), static_cast<T>(1e-8));
    auto s = div(num, den);  // [S,1]
    auto diff = sub(mul(broadcast_to(s, Shape{S, poses_per_sample * 3}), tp), tg);
    terr = mean(mul(diff, diff));
  } else {
    auto diff = sub(trans, t_gt);
    terr = mean(mul(diff, diff));
  }
  return add(geo, terr);
}

}  // namespace detail

template <typename T = double>
struct PoseProbe {
  Mlp<T> layer1;  // in -> feat
  Linear<T> layer3;  // feat -> out
  int in_dim = 0, out_dim = 0;

  static PoseProbe init(int in_dim, int feature_dim, int out_dim, Rng& rng) {
    PoseProbe p;
    p.in_dim = in_dim;
    p.out_dim = out_dim;
    p.layer1 = Mlp<T>::init(in_dim, feature_dim, feature_dim, rng);
    p.layer3 = Linear<T>::init(feature_dim, out_dim, rng);
    return p;
  }

  Tensor<T> forward(const Tensor<T>& x) const { return layer3.forward(gelu(layer1.forward(x))); }

  NamedParams<T> named_params() const {
    NamedParams<T> out;
    layer1.collect("probe.l1", out);
    layer3.collect("probe.l3", out);
    return out;
  }
};

template <typename T = double>
ProbeReport train_probe(const ProbeDataset& ds, const ProbeConfig& cfg) {
  if (ds.inputs.empty()) throw std::invalid_argument("train_probe: empty dataset");
  const int N = static_cast<int>(ds.inputs.size());
  const int holdout = std::max(1, static_cast<int>(N * cfg.holdout_frac));
  const int n_train = N - holdout;
  if (n_train < 1) throw std::invalid_argument("train_probe: dataset too small");
  const int k = ds.poses_per_sample;
  const int in_dim = ds.latent_dim * k;
  const int out_dim = 9 * k;

  Rng init_rng(Rng::mix(cfg.seed, 0x696e6974));
  auto probe = PoseProbe<T>::init(in_dim, cfg.feature_dim, out_dim, init_rng);
  AdamW<T> opt(probe.named_params());
  Rng rng(Rng::mix(cfg.seed, 0x6c6f6f70));

  ProbeReport rep;
  for (int64_t it = 0; it < cfg.iters; ++it) {
    const int bs = std::min(cfg.batch_size, n_train);
    std::vector<T> in;
    std::vector<const Pose*> targets;
    in.reserve(static_cast<size_t>(bs) * in_dim);
    for (int b = 0; b < bs; ++b) {
      const int i = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n_train)));
      for (const double v : ds.inputs[static_cast<size_t>(i)]) in.push_back(static_cast<T>(v));
      for (const Pose& p : ds.gt[static_cast<size_t>(i)]) targets.push_back(&p);
    }
    Tensor<T> x;
    {
      NoGradGuard ng;
      x = Tensor<T>(Shape{bs, in_dim}, std::move(in));
    }
    opt.zero_grad();
    auto head = reshape(probe.forward(x), Shape{static_cast<int64_t>(bs) * k, 9});
    auto loss = detail::pose_head_loss(head, targets, ds.mode == ProbeMode::Trajectory, k);
    backward(loss);
    opt.step(cosine_lr(it, cfg.iters, cfg.lr, cfg.lr * 0.1));
    rep.final_loss = static_cast<double>(loss.item());
  }

  // held-out accuracy: per sample, compare trajectories (identity anchor +
  // predicted relative poses) against ground truth
  double rra20 = 0, rta20 = 0, auc10 = 0, auc20 = 0, auc30 = 0;
  NoGradGuard ng;
  for (int i = n_train; i < N; ++i) {
    std::vector<T> in;
    for (const double v : ds.inputs[static_cast<size_t>(i)]) in.push_back(static_cast<T>(v));
    Tensor<T> x(Shape{1, in_dim}, std::move(in));
    auto head = reshape(probe.forward(x), Shape{k, 9});
    auto rot = detail::rotation_from_6d(slice(head, -1, 0, 6));
    auto trans = slice(head, -1, 6, 3);
    Trajectory pred{Pose::identity()}, gt{Pose::identity()};
    for (int t = 0; t < k; ++t) {
      Pose p;
      for (int j = 0; j < 9; ++j)
        p.rotation.m[static_cast<size_t>(j)] =
            static_cast<double>(rot.data()[static_cast<size_t>(t * 9 + j)]);
      p.translation = {static_cast<double>(trans.data()[static_cast<size_t>(t * 3 + 0)]),
                       static_cast<double>(trans.data()[static_cast<size_t>(t * 3 + 1)]),
                       static_cast<double>(trans.data()[static_cast<size_t>(t * 3 + 2)])};
      pred.push_back(p);
      gt.push_back(ds.gt[static_cast<size_t>(i)][static_cast<size_t>(t)]);
    }
    const auto a20 = trajectory_accuracy(gt, pred, 20.0);
    rra20 += a20.rra;
    rta20 += a20.rta;
    auc10 += auc(gt, pred, 10);
    auc20 += auc(gt, pred, 20);
    auc30 += auc(gt, pred, 30);
  }
  rep.rra20 = rra20 / holdout;
  rep.rta20 = rta20 / holdout;
  rep.auc10 = auc10 / holdout;
  rep.auc20 = auc20 / holdout;
  rep.auc30 = auc30 / holdout;
  return rep;
}

// Probe with frozen-encoder isolation check: encoder parameters must be
// bit-identical before and after probe training.
template <typename T>
ProbeReport probe_frozen_encoder(const XFactorModel<T>& model, const DataConfig& data,
                                 ProbeMode mode, int n_samples, int n_targets,
                                 const ProbeConfig& cfg, uint64_t data_seed) {
  std::vector<std::vector<T>> before;
  for (const auto& [name, p] : model.named_params()) {
    (void)name;
    before.push_back(p.data());
  }
  auto ds = make_probe_dataset(model, data, mode, n_samples, n_targets, data_seed);
  auto rep = train_probe<double>(ds, cfg);
  size_t idx = 0;
  for (const auto& [name, p] : model.named_params()) {
    if (p.data() != before[idx++])
      throw std::runtime_error("probe isolation violated: encoder parameter " + name +
                               " changed during probe training");
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Report emission: JSON + per-case CSV + aligned text table.

inline void write_case_csv(const std::string& path, const std::vector<CaseMetrics>& cases) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << "case,rra10,rra20,rra30,rta10,rta20,rta30,auc10,auc20,auc30,rejected,l1_transfer,"
        "l1_source\n";
  for (size_t i = 0; i < cases.size(); ++i) {
    const auto& c = cases[i];
    char line[320];
    std::snprintf(line, sizeof(line),
                  "%zu,%.10f,%.10f,%.10f,%.10f,%.10f,%.10f,%.10f,%.10f,%.10f,%.10f,%.10f,%.10f\n",
                  i, c.rra10, c.rra20, c.rra30, c.rta10, c.rta20, c.rta30, c.auc10, c.auc20,
                  c.auc30, c.rejected, c.l1_transfer, c.l1_source);
    os << line;
  }
  if (!os) throw std::runtime_error("write failed for " + path);
}

inline std::vector<CaseMetrics> read_case_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::string line;
  std::getline(is, line);  // header
  std::vector<CaseMetrics> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    CaseMetrics c;
    size_t idx;
    if (std::sscanf(line.c_str(), "%zu,%lf,%lf,%lf,%lf,%lf,%lf,%lf,%lf,%lf,%lf,%lf,%lf", &idx,
                    &c.rra10, &c.rra20, &c.rra30, &c.rta10, &c.rta20, &c.rta30, &c.auc10,
                    &c.auc20, &c.auc30, &c.rejected, &c.l1_transfer, &c.l1_source) != 13)
      throw std::runtime_error("malformed case CSV line: " + line);
    out.push_back(c);
  }
  return out;
}

inline void emit_report(const std::string& dir, const std::vector<MetricsReport>& reports,
                        const std::vector<std::vector<CaseMetrics>>& per_case) {
  namespace fs = std::filesystem;
  if (reports.empty()) throw std::invalid_argument("emit_report: no reports");
  fs::create_directories(dir);
  json all = json::array();
  for (const auto& r : reports) all.push_back(r.to_json());
  {
    std::ofstream os((fs::path(dir) / "report.json").string());
    os << all.dump(2) << "\n";
    if (!os) throw std::runtime_error("report.json write failed");
  }
  for (size_t i = 0; i < per_case.size() && i < reports.size(); ++i)
    if (!per_case[i].empty())
      write_case_csv((fs::path(dir) / ("cases_" + reports[i].variant + "_" +
                                       reports[i].objective + ".csv"))
                         .string(),
                     per_case[i]);
  {
    std::ofstream os((fs::path(dir) / "report.txt").string());
    char head[256];
    std::snprintf(head, sizeof(head), "%-16s %-16s %8s %8s %8s %8s %8s %8s %8s\n", "variant",
                  "objective", "rra@20", "rta@20", "auc@10", "auc@20", "auc@30", "psnr", "ssim");
    os << head;
    for (const auto& r : reports) {
      char line[256];
      std::snprintf(line, sizeof(line), "%-16s %-16s %8.4f %8.4f %8.4f %8.4f %8.4f %8.2f %8.4f\n",
                    r.variant.c_str(), r.objective.c_str(), r.mean.rra20, r.mean.rta20,
                    r.mean.auc10, r.mean.auc20, r.mean.auc30, r.psnr, r.ssim_score);
      os << line;
    }
    if (!os) throw std::runtime_error("report.txt write failed");
  }
}

}  // namespace xfactor
