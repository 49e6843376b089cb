#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "xfactor/augment.hpp"
#include "xfactor/checkpoint.hpp"
#include "xfactor/config.hpp"
#include "xfactor/model.hpp"
#include "xfactor/optim.hpp"
#include "xfactor/simulator.hpp"

namespace xfactor {

// ---------------------------------------------------------------------------
// d_I: L1 plus a weighted (1 - SSIM) perceptual term, differentiable end to end.

template <typename T>
struct LossBreakdown {
  Tensor<T> total;       // scalar, graph-attached
  double l1 = 0;
  double perceptual = 0;
};

inline std::vector<double> ssim_window(int size = 11, double sigma = 1.5) {
  std::vector<double> k(static_cast<size_t>(size));
  const int r = size / 2;
  double s = 0;
  for (int i = -r; i <= r; ++i) {
    k[static_cast<size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
    s += k[static_cast<size_t>(i + r)];
  }
  for (auto& v : k) v /= s;
  return k;
}

// Mean SSIM over [..., H, W, C] batches, 11x11 Gaussian window, standard
// stabilization constants for a [0,1] dynamic range.
template <typename T>
Tensor<T> ssim(const Tensor<T>& x, const Tensor<T>& y) {
  if (x.shape() != y.shape()) throw std::invalid_argument("ssim: shape mismatch");
  const auto win = ssim_window();
  const T c1 = static_cast<T>(0.01 * 0.01), c2 = static_cast<T>(0.03 * 0.03);
  auto mu_x = separable_blur2d(x, win);
  auto mu_y = separable_blur2d(y, win);
  auto mu_xx = mul(mu_x, mu_x), mu_yy = mul(mu_y, mu_y), mu_xy = mul(mu_x, mu_y);
  auto sig_x = sub(separable_blur2d(mul(x, x), win), mu_xx);
  auto sig_y = sub(separable_blur2d(mul(y, y), win), mu_yy);
  auto sig_xy = sub(separable_blur2d(mul(x, y), win), mu_xy);
  auto num = mul(add_scalar(mul_scalar(mu_xy, T(2)), c1), add_scalar(mul_scalar(sig_xy, T(2)), c2));
  auto den = mul(add_scalar(add(mu_xx, mu_yy), c1), add_scalar(add(sig_x, sig_y), c2));
  return mean(div(num, den));
}

template <typename T>
LossBreakdown<T> image_distance(const Tensor<T>& pred, const Tensor<T>& gt, double lambda) {
  if (pred.shape() != gt.shape()) throw std::invalid_argument("image_distance: shape mismatch");
  LossBreakdown<T> out;
  auto l1 = mean(abs(sub(pred, gt)));
  out.l1 = static_cast<double>(l1.item());
  if (lambda > 0) {
    auto perceptual = add_scalar(mul_scalar(ssim(pred, gt), T(-1)), T(1));  // 1 - SSIM
    out.perceptual = static_cast<double>(perceptual.item());
    out.total = add(l1, mul_scalar(perceptual, static_cast<T>(lambda)));
  } else {
    out.total = l1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmented frame sequences for training batches.

struct AugmentedSeq {
  std::vector<Image> frames;
  std::vector<PartitionMask> masks;  // one per frame
  JitterParams jitter;
};

// Pose-preserving augmented pair over a whole frame sequence. By default one
// partition is shared across the frames of each view; the per-frame switch
// samples an independent partition per frame.
inline std::pair<AugmentedSeq, AugmentedSeq> make_augmented_seq_pair(
    const std::vector<Image>& frames, uint64_t seed, int grid, const AugmentConfig& cfg) {
  AugmentedSeq a, b;
  if (!cfg.per_frame_partition) {
    auto [va, vb] = make_augmented_views(frames, seed, grid, grid, cfg);
    a.frames = std::move(va.frames);
    b.frames = std::move(vb.frames);
    a.masks.assign(frames.size(), va.mask);
    b.masks.assign(frames.size(), vb.mask);
    a.jitter = va.jitter;
    b.jitter = vb.jitter;
    return {std::move(a), std::move(b)};
  }
  Rng rng(Rng::mix(seed, 0x6a697474));
  a.jitter = sample_jitter(rng, cfg.jitter);
  b.jitter = sample_jitter(rng, cfg.jitter);
  for (size_t f = 0; f < frames.size(); ++f) {
    auto [ma, mb] = quadrant_partition(Rng::mix(seed, 0x1000 + f), grid, grid, cfg.p_nomask);
    a.masks.push_back(ma);
    b.masks.push_back(mb);
    a.frames.push_back(apply_photometric(frames[f], a.jitter));
    b.frames.push_back(apply_photometric(frames[f], b.jitter));
  }
  return {std::move(a), std::move(b)};
}

// An unaugmented rendition: identity jitter, all-visible masks.
inline AugmentedSeq plain_seq(const std::vector<Image>& frames, int grid) {
  AugmentedSeq s;
  s.frames = frames;
  s.masks.assign(frames.size(), PartitionMask::all_true(grid, grid));
  return s;
}

// ---------------------------------------------------------------------------
// Batch assembly helpers.

namespace detail {

template <typename T>
Tensor<T> stack_frames(const std::vector<const Image*>& frames) {
  if (frames.empty()) throw std::invalid_argument("stack_frames: empty");
  const int h = frames[0]->height, w = frames[0]->width;
  std::vector<T> d;
  d.reserve(frames.size() * static_cast<size_t>(h) * w * 3);
  for (const Image* f : frames) {
    if (f->height != h || f->width != w) throw std::invalid_argument("frame size mismatch");
    for (const float v : f->data) d.push_back(static_cast<T>(v));
  }
  NoGradGuard ng;
  return Tensor<T>(Shape{static_cast<int64_t>(frames.size()), h, w, 3}, std::move(d));
}

inline void append_mask_vis(std::vector<uint8_t>& vis, const PartitionMask& m) {
  for (uint8_t v : m.grid) vis.push_back(v);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Sequence encoding: a single forward when the encoder is configured for all
// frames, otherwise pair-wise (reference, frame) encodes batched together.

template <typename T>
PoseLatentBatch<T> encode_sequence(const XFactorModel<T>& model,
                                   const std::vector<AugmentedSeq>& views, int ref_idx) {
  const int64_t B = static_cast<int64_t>(views.size());
  const int n = static_cast<int>(views[0].frames.size());
  const ModelConfig& mc = model.cfg;
  const int tpv = mc.tokens_per_view();

  if (n == mc.views_encoder) {
    std::vector<const Image*> frames;
    std::vector<uint8_t> vis;
    for (const auto& v : views)
      for (int f = 0; f < n; ++f) {
        frames.push_back(&v.frames[static_cast<size_t>(f)]);
        detail::append_mask_vis(vis, v.masks[static_cast<size_t>(f)]);
      }
    auto in = detail::stack_frames<T>(frames);
    return model.encoder.encode(in, B, n, ref_idx, vis);
  }

  if (mc.views_encoder != 2)
    throw std::invalid_argument("sequence length " + std::to_string(n) +
                                " incompatible with a " + std::to_string(mc.views_encoder) +
                                "-view encoder");

  // pair-wise: batch all (reference, frame) pairs of all samples
  std::vector<int> others;
  for (int f = 0; f < n; ++f)
    if (f != ref_idx) others.push_back(f);
  const int64_t P = static_cast<int64_t>(others.size());
  std::vector<const Image*> frames;
  std::vector<uint8_t> vis;
  for (const auto& v : views)
    for (const int f : others) {
      frames.push_back(&v.frames[static_cast<size_t>(ref_idx)]);
      frames.push_back(&v.frames[static_cast<size_t>(f)]);
      detail::append_mask_vis(vis, v.masks[static_cast<size_t>(ref_idx)]);
      detail::append_mask_vis(vis, v.masks[static_cast<size_t>(f)]);
    }
  auto in = detail::stack_frames<T>(frames);
  auto pairs = model.encoder.encode(in, B * P, 2, 0, vis);

  // reassemble [B, n, ...] in frame order; the reference slot reuses the exact
  // zero produced by the first pair's reference view
  auto reorder = [&](const Tensor<T>& t) {
    Shape tail(t.shape().begin() + 2, t.shape().end());
    Shape grouped{B, P, 2};
    grouped.insert(grouped.end(), tail.begin(), tail.end());
    auto g = reshape(t, grouped);  // [B, P, 2, ...]
    std::vector<Tensor<T>> parts(static_cast<size_t>(n));
    Shape one{B, 1};
    one.insert(one.end(), tail.begin(), tail.end());
    parts[static_cast<size_t>(ref_idx)] = reshape(slice(slice(g, 1, 0, 1), 2, 0, 1), one);
    for (int64_t p = 0; p < P; ++p)
      parts[static_cast<size_t>(others[static_cast<size_t>(p)])] =
          reshape(slice(slice(g, 1, p, 1), 2, 1, 1), one);
    return concat<T>(parts, 1);
  };

  PoseLatentBatch<T> out;
  out.se3 = pairs.se3;
  out.values = reorder(pairs.values);
  if (pairs.se3) {
    out.rot = reorder(pairs.rot);
    out.trans = reorder(pairs.trans);
    out.focal = reorder(pairs.focal);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Objectives. Latents come from view A; context frames and the reconstruction
// target come from view B. With A == B this is exactly the autoencoding
// objective (shared code path).

template <typename T>
LossBreakdown<T> transferability_loss(const XFactorModel<T>& model,
                                      const std::vector<AugmentedSeq>& view_a,
                                      const std::vector<AugmentedSeq>& view_b, int ref_idx,
                                      int target_idx, double lambda) {
  if (view_a.size() != view_b.size() || view_a.empty())
    throw std::invalid_argument("transferability_loss: batch mismatch");
  const int64_t B = static_cast<int64_t>(view_a.size());
  const int n = static_cast<int>(view_a[0].frames.size());
  const ModelConfig& mc = model.cfg;
  if (n != mc.views_decoder + 1)
    throw std::invalid_argument("expected " + std::to_string(mc.views_decoder + 1) +
                                " frames per sample, got " + std::to_string(n));
  if (ref_idx == target_idx || ref_idx < 0 || target_idx < 0 || ref_idx >= n || target_idx >= n)
    throw std::invalid_argument("bad reference/target indices");

  auto latents = encode_sequence(model, view_a, ref_idx);

  std::vector<const Image*> ctx_frames;
  std::vector<uint8_t> ctx_vis;
  std::vector<int> ctx_latent_index;
  for (int f = 0; f < n; ++f)
    if (f != target_idx) ctx_latent_index.push_back(f);
  for (const auto& v : view_b)
    for (const int f : ctx_latent_index) {
      ctx_frames.push_back(&v.frames[static_cast<size_t>(f)]);
      detail::append_mask_vis(ctx_vis, v.masks[static_cast<size_t>(f)]);
    }
  auto ctx = detail::stack_frames<T>(ctx_frames);
  auto pred = model.renderer.render(ctx, B, mc.views_decoder, latents, ctx_latent_index,
                                    target_idx, ctx_vis);

  std::vector<const Image*> gt_frames;
  for (const auto& v : view_b) gt_frames.push_back(&v.frames[static_cast<size_t>(target_idx)]);
  auto gt = detail::stack_frames<T>(gt_frames);
  return image_distance(pred, gt, lambda);
}

template <typename T>
LossBreakdown<T> autoencoding_loss(const XFactorModel<T>& model,
                                   const std::vector<AugmentedSeq>& view, int ref_idx,
                                   int target_idx, double lambda) {
  return transferability_loss(model, view, view, ref_idx, target_idx, lambda);
}

// ---------------------------------------------------------------------------
// Training batches: deterministic streams derived from (seed, step, sample).

struct TrainSample {
  SequenceSample seq;
  AugmentedSeq view_a, view_b;
  int ref_idx = 0;
  int target_idx = 1;
};

enum class TrainStage { Stereo, Multiview };

inline TrainSample make_train_sample(const TrainConfig& cfg, TrainStage stage, int64_t step,
                                     int sample_idx) {
  const uint64_t s = Rng::mix(Rng::mix(cfg.seed, 0x7472 + static_cast<uint64_t>(step)),
                              static_cast<uint64_t>(sample_idx));
  const int n = cfg.model.views_decoder + 1;
  Rng rng(Rng::mix(s, 0x706169));

  OrbitParams op = cfg.data.orbit;
  TrainSample out;
  if (stage == TrainStage::Stereo) {
    // frame spacing resampled per example, capped by the pair baseline
    op.step_deg = rng.uniform(2.0, cfg.data.baseline_max_deg);
    op.max_step_deg = std::max(op.max_step_deg, cfg.data.baseline_max_deg);
    out.seq = make_sequence(s, n, cfg.model.image_size, op);
    out.ref_idx = 0;
    out.target_idx = n - 1;
  } else {
    out.seq = make_sequence(s, n, cfg.model.image_size, op);
    out.ref_idx = out.seq.reference_index;
    // uniform over non-reference frames
    int t = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n - 1)));
    if (t >= out.ref_idx) ++t;
    out.target_idx = t;
  }
  auto [a, b] = make_augmented_seq_pair(out.seq.frames, Rng::mix(s, 0x617567), cfg.model.grid(),
                                        cfg.augment);
  out.view_a = std::move(a);
  out.view_b = std::move(b);
  return out;
}

template <typename T>
LossBreakdown<T> training_step_loss(const XFactorModel<T>& model, const TrainConfig& cfg,
                                    TrainStage stage, int64_t step) {
  std::vector<AugmentedSeq> va, vb;
  std::vector<int> refs, targets;
  va.reserve(static_cast<size_t>(cfg.batch_size));
  for (int i = 0; i < cfg.batch_size; ++i) {
    auto s = make_train_sample(cfg, stage, step, i);
    refs.push_back(s.ref_idx);
    targets.push_back(s.target_idx);
    if (cfg.objective == Objective::Autoencoding) {
      // intra-sequence objective on unaugmented frames
      va.push_back(plain_seq(s.seq.frames, cfg.model.grid()));
    } else {
      va.push_back(std::move(s.view_a));
      vb.push_back(std::move(s.view_b));
    }
  }
  // reference/target indices must be uniform across the batch forward; group
  // samples sharing them (stereo always does; multiview groups by indices)
  auto run_group = [&](const std::vector<size_t>& idx) {
    std::vector<AugmentedSeq> ga, gb;
    for (size_t i : idx) {
      ga.push_back(va[i]);
      if (!vb.empty()) gb.push_back(vb[i]);
    }
    const int r = refs[idx[0]], t = targets[idx[0]];
    return cfg.objective == Objective::Autoencoding
               ? autoencoding_loss(model, ga, r, t, cfg.perceptual_weight)
               : transferability_loss(model, ga, gb, r, t, cfg.perceptual_weight);
  };
  std::vector<std::vector<size_t>> groups;
  for (size_t i = 0; i < va.size(); ++i) {
    bool placed = false;
    for (auto& g : groups)
      if (refs[g[0]] == refs[i] && targets[g[0]] == targets[i]) {
        g.push_back(i);
        placed = true;
        break;
      }
    if (!placed) groups.push_back({i});
  }
  LossBreakdown<T> acc;
  Tensor<T> total;
  double wsum = 0;
  for (const auto& g : groups) {
    auto lb = run_group(g);
    const double w = static_cast<double>(g.size()) / static_cast<double>(va.size());
    acc.l1 += w * lb.l1;
    acc.perceptual += w * lb.perceptual;
    auto scaled = mul_scalar(lb.total, static_cast<T>(w));
    total = total.defined() ? add(total, scaled) : scaled;
    wsum += w;
  }
  (void)wsum;
  acc.total = total;
  return acc;
}

// ---------------------------------------------------------------------------
// Checkpoint plumbing shared by the training loops and the CLI.

template <typename T>
void save_train_checkpoint(const std::string& path, const XFactorModel<T>& model, AdamW<T>& opt,
                           const TrainConfig& cfg, int64_t step) {
  Checkpoint ck;
  ck.meta = json{{"step", step},
                 {"config", cfg.to_json()},
                 {"config_hash", config_hash(cfg.to_json())},
                 {"opt_step", opt.step_count()}}
                .dump();
  for (const auto& [name, p] : model.named_params()) ck.records.emplace_back(name, to_record(p));
  for (const auto& [name, buf] : opt.named_state())
    ck.records.emplace_back(name, to_record(*buf, Shape{static_cast<int64_t>(buf->size())}));
  save_checkpoint(path, ck);
}

template <typename T>
int64_t load_train_checkpoint(const std::string& path, XFactorModel<T>& model, AdamW<T>* opt) {
  auto ck = load_checkpoint(path);
  const json meta = json::parse(ck.meta);
  NamedParams<T> params;
  std::vector<std::pair<std::string, std::vector<T>>> opt_state;
  for (const auto& [name, rec] : ck.records) {
    if (name.rfind("opt.", 0) == 0)
      opt_state.push_back({name, record_values<T>(rec)});
    else
      params.push_back({name, Tensor<T>(rec.shape, record_values<T>(rec))});
  }
  model.load_params(params);
  if (opt) {
    opt->load_state(opt_state);
    opt->set_step_count(meta.at("opt_step").get<int64_t>());
  }
  return meta.at("step").get<int64_t>();
}

// ---------------------------------------------------------------------------
// Training loop (stereo stage and multi-view fine-tuning share the machinery).

struct TrainResult {
  int64_t final_step = 0;
  std::string final_checkpoint;
  double final_loss = 0;
};

template <typename T = float>
TrainResult train_loop(const TrainConfig& cfg, TrainStage stage, const std::string& out_dir,
                       const std::string& init_checkpoint = "",
                       const std::string& resume_from = "", int64_t stop_after_step = -1) {
  namespace fs = std::filesystem;
  cfg.validate();
  fs::create_directories(fs::path(out_dir) / "checkpoints");
  fs::create_directories(fs::path(out_dir) / "logs");

  auto model = XFactorModel<T>::init(cfg.model, cfg.seed);
  typename AdamW<T>::Hyper hyper;
  hyper.beta1 = cfg.beta1;
  hyper.beta2 = cfg.beta2;
  hyper.eps = cfg.adam_eps;
  hyper.weight_decay = cfg.weight_decay;
  AdamW<T> opt(model.named_params(), hyper);

  int64_t start_step = 0;
  if (!resume_from.empty()) {
    start_step = load_train_checkpoint(resume_from, model, &opt);
  } else if (!init_checkpoint.empty()) {
    load_train_checkpoint(init_checkpoint, model, static_cast<AdamW<T>*>(nullptr));
  }

  const std::string log_path =
      (fs::path(out_dir) / "logs" / (stage == TrainStage::Stereo ? "train_stereo.csv"
                                                                 : "train_multiview.csv"))
          .string();
  std::ofstream log(log_path, start_step > 0 ? std::ios::app : std::ios::trunc);
  if (start_step == 0) log << "step,total,l1,perceptual,lr,wall_ms\n";

  auto ckpt_path = [&](int64_t step) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "step_%08lld.xfck", static_cast<long long>(step));
    return (fs::path(out_dir) / "checkpoints" / buf).string();
  };

  TrainResult result;
  for (int64_t step = start_step; step < cfg.total_steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = cosine_lr(step, cfg.total_steps, cfg.lr_start, cfg.lr_end);
    opt.zero_grad();
    auto lb = training_step_loss(model, cfg, stage, step);
    const double loss_val = static_cast<double>(lb.total.item());
    if (!std::isfinite(loss_val)) {
      save_train_checkpoint(ckpt_path(step) + ".diagnostic", model, opt, cfg, step);
      throw std::runtime_error("non-finite loss at step " + std::to_string(step) +
                               "; diagnostic state dumped");
    }
    backward(lb.total);
    if (cfg.grad_clip > 0) {
      double norm2 = 0;
      for (auto& [name, p] : opt.params()) {
        (void)name;
        if (!p.grad().empty())
          for (const T g : p.grad()) norm2 += static_cast<double>(g) * g;
      }
      const double norm = std::sqrt(norm2);
      if (norm > cfg.grad_clip) {
        const T scale = static_cast<T>(cfg.grad_clip / norm);
        for (auto& [name, p] : opt.params()) {
          (void)name;
          for (T& g : p.grad()) g *= scale;
        }
      }
    }
    opt.step(lr);
    const double wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

    result.final_step = step + 1;
    result.final_loss = loss_val;
    if (step % cfg.log_every == 0 || step + 1 == cfg.total_steps) {
      char line[192];
      std::snprintf(line, sizeof(line), "%lld,%.8f,%.8f,%.8f,%.8e,%.1f\n",
                    static_cast<long long>(step), loss_val, lb.l1, lb.perceptual, lr, wall_ms);
      log << line;
      log.flush();
    }
    const bool last = step + 1 == cfg.total_steps;
    if ((step + 1) % cfg.checkpoint_every == 0 || last) {
      result.final_checkpoint = ckpt_path(step + 1);
      save_train_checkpoint(result.final_checkpoint, model, opt, cfg, step + 1);
    }
    if (stop_after_step >= 0 && step + 1 >= stop_after_step) {
      if (result.final_checkpoint.empty() || result.final_step != step + 1) {
        result.final_checkpoint = ckpt_path(step + 1);
        save_train_checkpoint(result.final_checkpoint, model, opt, cfg, step + 1);
      }
      break;
    }
  }
  if (result.final_checkpoint.empty()) {
    result.final_checkpoint = ckpt_path(result.final_step);
    save_train_checkpoint(result.final_checkpoint, model, opt, cfg, result.final_step);
  }
  return result;
}

template <typename T = float>
TrainResult train_stereo(const TrainConfig& cfg, const std::string& out_dir,
                         const std::string& resume_from = "") {
  return train_loop<T>(cfg, TrainStage::Stereo, out_dir, "", resume_from);
}

// Multi-view fine-tuning: the frame-pair baseline doubles and sequences grow
// to views_decoder + 1 frames with a min-max-baseline reference.
template <typename T = float>
TrainResult train_multiview(const TrainConfig& cfg_in, const std::string& init_checkpoint,
                            const std::string& out_dir, const std::string& resume_from = "") {
  TrainConfig cfg = cfg_in;
  cfg.model.views_decoder = cfg.data.sequence_length - 1;
  cfg.data.baseline_max_deg = cfg_in.data.baseline_max_deg * 2.0;
  return train_loop<T>(cfg, TrainStage::Multiview, out_dir, init_checkpoint, resume_from);
}

// Ablation rows reuse the loop; variant and objective come preconfigured.
template <typename T = float>
TrainResult train_ablation(const TrainConfig& cfg, const std::string& out_dir,
                           const std::string& resume_from = "") {
  return train_loop<T>(cfg, TrainStage::Stereo, out_dir, "", resume_from);
}

}  // namespace xfactor
