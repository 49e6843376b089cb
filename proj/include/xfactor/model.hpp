#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "xfactor/config.hpp"
#include "xfactor/geometry.hpp"
#include "xfactor/rng.hpp"
#include "xfactor/tensor.hpp"

namespace xfactor {

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out], optional

  static Linear init(int in, int out, Rng& rng, bool zero_weight = false, bool with_bias = true) {
    Linear l;
    std::vector<T> w(static_cast<size_t>(in) * out, T(0));
    if (!zero_weight)
      for (auto& v : w) v = static_cast<T>(rng.truncated_normal(0.02));
    l.weight = Tensor<T>(Shape{in, out}, std::move(w), true);
    if (with_bias) l.bias = Tensor<T>::zeros(Shape{out}, true);
    return l;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    auto y = matmul(x, weight);
    return bias.defined() ? add(y, bias) : y;
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
  }
};

template <typename T>
struct Mlp {
  Linear<T> fc1, fc2;

  static Mlp init(int in, int hidden, int out, Rng& rng, bool zero_out = false,
                  bool out_bias = true) {
    return {Linear<T>::init(in, hidden, rng), Linear<T>::init(hidden, out, rng, zero_out, out_bias)};
  }

  Tensor<T> forward(const Tensor<T>& x) const { return fc2.forward(gelu(fc1.forward(x))); }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gain, bias;

  static LayerNorm init(int width) {
    LayerNorm ln;
    ln.gain = Tensor<T>::full(Shape{width}, T(1), true);
    ln.bias = Tensor<T>::zeros(Shape{width}, true);
    return ln;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return layer_norm(x, gain, bias, static_cast<T>(1e-5));
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.push_back({prefix + ".gain", gain});
    out.push_back({prefix + ".bias", bias});
  }
};

// Token coordinates feeding the rotary embedding; one entry per token.
using TokenPositions = std::vector<std::pair<int, int>>;

template <typename T>
struct Attention {
  Linear<T> q, k, v, o;
  int heads = 0;

  static Attention init(int width, int heads, Rng& rng) {
    Attention a;
    a.heads = heads;
    a.q = Linear<T>::init(width, width, rng);
    a.k = Linear<T>::init(width, width, rng);
    a.v = Linear<T>::init(width, width, rng);
    a.o = Linear<T>::init(width, width, rng, /*zero_weight=*/true);  // identity residual at init
    return a;
  }

  Tensor<T> forward(const Tensor<T>& x, const BoolMask& mask, const TokenPositions& pos,
                    double rope_base) const {
    const int64_t B = x.dim(0), t = x.dim(1), w = x.dim(2);
    const int64_t d = w / heads;
    auto split = [&](const Tensor<T>& m) {
      return transpose(reshape(m, Shape{B, t, heads, d}), {0, 2, 1, 3});  // [B,h,t,d]
    };
    auto qh = rope_apply(split(q.forward(x)), pos, rope_base);
    auto kh = rope_apply(split(k.forward(x)), pos, rope_base);
    auto vh = split(v.forward(x));
    auto attn = masked_attention(qh, kh, vh, mask);
    auto merged = reshape(transpose(attn, {0, 2, 1, 3}), Shape{B, t, w});
    return o.forward(merged);
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    q.collect(prefix + ".q", out);
    k.collect(prefix + ".k", out);
    v.collect(prefix + ".v", out);
    o.collect(prefix + ".o", out);
  }
};

// One fused layer: per-view attention, MLP, global attention, MLP; each
// sub-block is pre-layernorm with a residual connection.
template <typename T>
struct FusedBlock {
  LayerNorm<T> ln1, ln2, ln3, ln4;
  Attention<T> local_attn, global_attn;
  Mlp<T> mlp1, mlp2;

  static FusedBlock init(int width, int heads, int mlp_ratio, Rng& rng) {
    FusedBlock b;
    b.ln1 = LayerNorm<T>::init(width);
    b.ln2 = LayerNorm<T>::init(width);
    b.ln3 = LayerNorm<T>::init(width);
    b.ln4 = LayerNorm<T>::init(width);
    b.local_attn = Attention<T>::init(width, heads, rng);
    b.global_attn = Attention<T>::init(width, heads, rng);
    b.mlp1 = Mlp<T>::init(width, width * mlp_ratio, width, rng, /*zero_out=*/true);
    b.mlp2 = Mlp<T>::init(width, width * mlp_ratio, width, rng, /*zero_out=*/true);
    return b;
  }

  Tensor<T> forward(const Tensor<T>& x, const BoolMask& local_mask, const BoolMask& global_mask,
                    const TokenPositions& pos, double rope_base) const {
    auto h = add(x, local_attn.forward(ln1.forward(x), local_mask, pos, rope_base));
    h = add(h, mlp1.forward(ln2.forward(h)));
    h = add(h, global_attn.forward(ln3.forward(h), global_mask, pos, rope_base));
    h = add(h, mlp2.forward(ln4.forward(h)));
    return h;
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    ln1.collect(prefix + ".ln1", out);
    local_attn.collect(prefix + ".local", out);
    ln2.collect(prefix + ".ln2", out);
    mlp1.collect(prefix + ".mlp1", out);
    ln3.collect(prefix + ".ln3", out);
    global_attn.collect(prefix + ".global", out);
    ln4.collect(prefix + ".ln4", out);
    mlp2.collect(prefix + ".mlp2", out);
  }
};

// ---------------------------------------------------------------------------
// Attention-mask assembly. `vis` holds one visibility byte per (batch, token);
// a token may always attend to itself so masked tokens keep a valid row.

inline BoolMask build_attention_mask(const std::vector<uint8_t>& vis, int64_t batch,
                                     int64_t tokens, const std::vector<int>& view_of,
                                     bool local_stage) {
  std::vector<uint8_t> m(static_cast<size_t>(batch) * tokens * tokens, 0);
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t i = 0; i < tokens; ++i)
      for (int64_t j = 0; j < tokens; ++j) {
        if (local_stage && view_of[i] != view_of[j]) continue;
        const bool allowed = vis[b * tokens + j] != 0 || i == j;
        if (allowed) m[(b * tokens + i) * tokens + j] = 1;
      }
  return BoolMask(Shape{batch, 1, tokens, tokens}, std::move(m));
}

// ---------------------------------------------------------------------------
// Latent pose batch: a plain vector per view for the unconstrained and
// bottleneck variants, or explicit SE(3) + intrinsics for the ablation head.

template <typename T>
struct PoseLatentBatch {
  Tensor<T> values;    // [B, V, D]
  bool se3 = false;
  Tensor<T> rot;       // [B, V, 3, 3]
  Tensor<T> trans;     // [B, V, 3]
  Tensor<T> focal;     // [B, V, 2], multiplicative scales on nominal focal

  Tensor<T> view_values(int v) const {
    return reshape(slice(values, 1, v, 1), Shape{values.dim(0), values.dim(2)});
  }
};

namespace detail {

template <typename T>
Tensor<T> l2_normalize_last(const Tensor<T>& x) {
  auto n = sqrt(add_scalar(sum_axis(mul(x, x), -1, true), static_cast<T>(1e-12)));
  return div(x, n);
}

template <typename T>
Tensor<T> cross_last(const Tensor<T>& a, const Tensor<T>& b) {
  auto ax = slice(a, -1, 0, 1), ay = slice(a, -1, 1, 1), az = slice(a, -1, 2, 1);
  auto bx = slice(b, -1, 0, 1), by = slice(b, -1, 1, 1), bz = slice(b, -1, 2, 1);
  return concat<T>({sub(mul(ay, bz), mul(az, by)), sub(mul(az, bx), mul(ax, bz)),
                    sub(mul(ax, by), mul(ay, bx))},
                   -1);
}

// 6-value continuous rotation parameterization, Gram-Schmidt orthonormalized
// and anchored at the identity: zero raw output maps to R = I.
template <typename T>
Tensor<T> rotation_from_6d(const Tensor<T>& raw6) {
  const int64_t B = raw6.dim(0);
  auto e1 = Tensor<T>(Shape{3}, {T(1), T(0), T(0)});
  auto e2 = Tensor<T>(Shape{3}, {T(0), T(1), T(0)});
  auto a1 = add(slice(raw6, -1, 0, 3), e1);
  auto a2 = add(slice(raw6, -1, 3, 3), e2);
  auto r1 = l2_normalize_last(a1);
  auto proj = sum_axis(mul(a2, r1), -1, true);
  auto r2 = l2_normalize_last(sub(a2, mul(proj, r1)));
  auto r3 = cross_last(r1, r2);
  return concat<T>({reshape(r1, Shape{B, 1, 3}), reshape(r2, Shape{B, 1, 3}),
                    reshape(r3, Shape{B, 1, 3})},
                   1);  // rows of R, [B,3,3]
}

}  // namespace detail

// ---------------------------------------------------------------------------
// PoseEnc: multi-view ViT; one learned global token is prepended per view,
// and the pose head breaks swap symmetry by subtracting the reference view.

template <typename T>
struct PoseEncoder {
  ModelConfig cfg;
  Linear<T> patch_embed;
  Tensor<T> global_token;  // [width]
  std::vector<FusedBlock<T>> blocks;
  Mlp<T> pose_head;  // no bias on the final layer: it would cancel in the
                     // reference subtraction and never receive gradient

  static PoseEncoder init(const ModelConfig& cfg, Rng& rng) {
    PoseEncoder e;
    e.cfg = cfg;
    const int pdim = cfg.patch_size * cfg.patch_size * 3;
    e.patch_embed = Linear<T>::init(pdim, cfg.width, rng);
    std::vector<T> g(static_cast<size_t>(cfg.width));
    for (auto& v : g) v = static_cast<T>(rng.truncated_normal(0.02));
    e.global_token = Tensor<T>(Shape{cfg.width}, std::move(g), true);
    for (int i = 0; i < cfg.layers; ++i)
      e.blocks.push_back(FusedBlock<T>::init(cfg.width, cfg.heads, cfg.mlp_ratio, rng));
    const int out_dim = cfg.variant == ModelVariant::Se3Plucker ? 11 : cfg.effective_pose_dim();
    e.pose_head = Mlp<T>::init(cfg.width, cfg.width, out_dim, rng, /*zero_out=*/false,
                               /*out_bias=*/false);
    return e;
  }

  // frames: [B*V, H, W, 3]; vis: per (batch, view, patch) visibility bytes,
  // laid out [B, V * tokens_per_view]. Returns per-view global features [B,V,width].
  Tensor<T> backbone(const Tensor<T>& frames, int64_t batch, int views,
                     const std::vector<uint8_t>& vis) const {
    const int tpv = cfg.tokens_per_view();
    const int g = cfg.grid();
    auto tokens = patch_embed.forward(patchify(frames, cfg.patch_size));  // [B*V, tpv, w]
    tokens = reshape(tokens, Shape{batch, views, tpv, cfg.width});

    auto gtok = broadcast_to(reshape(global_token, Shape{1, 1, 1, cfg.width}),
                             Shape{batch, views, 1, cfg.width});
    tokens = concat<T>({gtok, tokens}, 2);  // [B, V, 1+tpv, w]
    const int per_view = 1 + tpv;
    const int64_t total = static_cast<int64_t>(views) * per_view;
    tokens = reshape(tokens, Shape{batch, total, cfg.width});

    TokenPositions pos;
    std::vector<int> view_of;
    std::vector<uint8_t> tok_vis(static_cast<size_t>(batch) * total, 1);
    for (int v = 0; v < views; ++v) {
      pos.push_back({0, 0});  // global token
      view_of.push_back(v);
      for (int r = 0; r < g; ++r)
        for (int c = 0; c < g; ++c) {
          pos.push_back({r, c});
          view_of.push_back(v);
        }
    }
    for (int64_t b = 0; b < batch; ++b)
      for (int v = 0; v < views; ++v)
        for (int p = 0; p < tpv; ++p)
          tok_vis[b * total + v * per_view + 1 + p] =
              vis[b * (static_cast<int64_t>(views) * tpv) + v * tpv + p];

    const BoolMask local = build_attention_mask(tok_vis, batch, total, view_of, true);
    const BoolMask global = build_attention_mask(tok_vis, batch, total, view_of, false);
    for (const auto& blk : blocks)
      tokens = blk.forward(tokens, local, global, pos, cfg.rope_base);

    // gather per-view global tokens
    tokens = reshape(tokens, Shape{batch, views, per_view, cfg.width});
    return reshape(slice(tokens, 2, 0, 1), Shape{batch, views, cfg.width});
  }

  PoseLatentBatch<T> encode(const Tensor<T>& frames, int64_t batch, int views, int ref_view,
                            const std::vector<uint8_t>& vis) const {
    if (views != cfg.views_encoder)
      throw std::invalid_argument("pose encoder configured for " +
                                  std::to_string(cfg.views_encoder) + " views, got " +
                                  std::to_string(views));
    auto feats = backbone(frames, batch, views, vis);  // [B,V,w]
    auto h = pose_head.forward(feats);                 // [B,V,out]
    auto h_ref = slice(h, 1, ref_view, 1);             // [B,1,out]
    PoseLatentBatch<T> out;
    if (cfg.variant == ModelVariant::Se3Plucker) {
      out.se3 = true;
      const int64_t BV = batch * views;
      auto flat = reshape(h, Shape{BV, 11});
      auto rot = detail::rotation_from_6d(slice(flat, -1, 0, 6));  // [BV,3,3]
      auto trans = slice(flat, -1, 6, 3);
      // focal scales anchored so zero raw output means nominal intrinsics
      auto focal = exp(clamp(slice(flat, -1, 9, 2), T(-3), T(3)));
      // anchor at the reference view: latent pose = g_ref^-1 g_v
      auto rot4 = reshape(rot, Shape{batch, views, 3, 3});
      auto trans4 = reshape(trans, Shape{batch, views, 3});
      auto rot_ref = reshape(slice(rot4, 1, ref_view, 1), Shape{batch, 1, 3, 3});
      auto trans_ref = reshape(slice(trans4, 1, ref_view, 1), Shape{batch, 1, 3});
      auto rot_ref_t = transpose_last2(broadcast_to(rot_ref, Shape{batch, views, 3, 3}));
      out.rot = matmul(rot_ref_t, rot4);
      auto dt = reshape(sub(trans4, trans_ref), Shape{batch, views, 3, 1});
      out.trans = reshape(matmul(rot_ref_t, dt), Shape{batch, views, 3});
      out.focal = reshape(focal, Shape{batch, views, 2});
      // values carries the flattened relative pose for probing
      out.values = concat<T>({reshape(out.rot, Shape{batch, views, 9}), out.trans}, -1);
    } else {
      out.values = sub(h, h_ref);  // reference latent is exactly zero
    }
    return out;
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    patch_embed.collect(prefix + ".patch_embed", out);
    out.push_back({prefix + ".global_token", global_token});
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(prefix + ".block" + std::to_string(i), out);
    pose_head.collect(prefix + ".pose_head", out);
  }
};

// ---------------------------------------------------------------------------
// Render: context patch tokens fused with pose conditioning, plus a synthetic
// target view of broadcast target-latent tokens; the pixel head decodes the
// target positions.

template <typename T>
struct Renderer {
  ModelConfig cfg;
  Linear<T> patch_embed;
  Linear<T> latent_proj;       // shared by context and target latents
  Linear<T> plucker_fuse;      // (width+6) -> width, se3 variant only
  Tensor<T> target_pos_embed;  // [tokens_per_view, width]
  std::vector<FusedBlock<T>> blocks;
  Mlp<T> pixel_head;

  static Renderer init(const ModelConfig& cfg, Rng& rng) {
    Renderer r;
    r.cfg = cfg;
    const int pdim = cfg.patch_size * cfg.patch_size * 3;
    r.patch_embed = Linear<T>::init(pdim, cfg.width, rng);
    if (cfg.variant == ModelVariant::Se3Plucker)
      r.plucker_fuse = Linear<T>::init(cfg.width + 6, cfg.width, rng);
    else
      r.latent_proj = Linear<T>::init(cfg.effective_pose_dim(), cfg.width, rng);
    std::vector<T> pe(static_cast<size_t>(cfg.tokens_per_view()) * cfg.width);
    for (auto& v : pe) v = static_cast<T>(rng.truncated_normal(0.02));
    r.target_pos_embed = Tensor<T>(Shape{cfg.tokens_per_view(), cfg.width}, std::move(pe), true);
    for (int i = 0; i < cfg.layers; ++i)
      r.blocks.push_back(FusedBlock<T>::init(cfg.width, cfg.heads, cfg.mlp_ratio, rng));
    r.pixel_head = Mlp<T>::init(cfg.width, cfg.width, pdim, rng);
    return r;
  }

  // Differentiable per-patch Pluecker rays for a [B,3,3]/[B,3] pose batch and
  // per-sample focal scales [B,2] on the nominal intrinsics.
  Tensor<T> plucker_rays(const Tensor<T>& rot, const Tensor<T>& trans,
                         const Tensor<T>& focal) const {
    const int64_t B = rot.dim(0);
    const int g = cfg.grid();
    const int tpv = cfg.tokens_per_view();
    const double size = cfg.image_size;
    const double f_nom = 0.9 * size, c0 = size / 2.0;
    std::vector<T> us(static_cast<size_t>(tpv)), vs(static_cast<size_t>(tpv));
    for (int r = 0; r < g; ++r)
      for (int c = 0; c < g; ++c) {
        const double u = (c + 0.5) * cfg.patch_size, v = (r + 0.5) * cfg.patch_size;
        us[static_cast<size_t>(r) * g + c] = static_cast<T>((u - c0) / f_nom);
        vs[static_cast<size_t>(r) * g + c] = static_cast<T>((v - c0) / f_nom);
      }
    Tensor<T> ugrid, vgrid, ones;
    {
      NoGradGuard guard;
      ugrid = Tensor<T>(Shape{1, tpv, 1}, std::vector<T>(us.begin(), us.end()));
      vgrid = Tensor<T>(Shape{1, tpv, 1}, std::vector<T>(vs.begin(), vs.end()));
      ones = Tensor<T>::full(Shape{1, tpv, 1}, T(1));
    }
    auto fx = reshape(slice(focal, -1, 0, 1), Shape{B, 1, 1});
    auto fy = reshape(slice(focal, -1, 1, 1), Shape{B, 1, 1});
    auto dx = div(broadcast_to(ugrid, Shape{B, tpv, 1}), broadcast_to(fx, Shape{B, tpv, 1}));
    auto dy = div(broadcast_to(vgrid, Shape{B, tpv, 1}), broadcast_to(fy, Shape{B, tpv, 1}));
    auto d_cam = concat<T>({dx, dy, broadcast_to(ones, Shape{B, tpv, 1})}, -1);  // [B,tpv,3]
    // row-vector form of d_world = R d_cam: d R^T
    auto d_world = detail::l2_normalize_last(matmul(d_cam, transpose_last2(rot)));
    auto origin = broadcast_to(reshape(trans, Shape{B, 1, 3}), Shape{B, tpv, 3});
    auto moment = detail::cross_last(origin, d_world);
    return concat<T>({d_world, moment}, -1);  // [B,tpv,6]
  }

  // context: [B*C, H, W, 3]; ctx_latents/target_latent per variant; vis covers
  // context patches [B, C * tokens_per_view].
  Tensor<T> render(const Tensor<T>& context, int64_t batch, int ctx_views,
                   const PoseLatentBatch<T>& latents, const std::vector<int>& ctx_latent_index,
                   int target_latent_index, const std::vector<uint8_t>& vis) const {
    const int tpv = cfg.tokens_per_view();
    const int g = cfg.grid();
    auto ctx_tokens = patch_embed.forward(patchify(context, cfg.patch_size));  // [B*C,tpv,w]
    ctx_tokens = reshape(ctx_tokens, Shape{batch, ctx_views, tpv, cfg.width});

    Tensor<T> tokens;
    if (cfg.variant == ModelVariant::Se3Plucker) {
      std::vector<Tensor<T>> views;
      for (int v = 0; v < ctx_views; ++v) {
        const int li = ctx_latent_index[v];
        auto rays = plucker_rays(
            reshape(slice(latents.rot, 1, li, 1), Shape{batch, 3, 3}),
            reshape(slice(latents.trans, 1, li, 1), Shape{batch, 3}),
            reshape(slice(latents.focal, 1, li, 1), Shape{batch, 2}));
        auto tok = reshape(slice(ctx_tokens, 1, v, 1), Shape{batch, tpv, cfg.width});
        views.push_back(reshape(plucker_fuse.forward(concat<T>({tok, rays}, -1)),
                                Shape{batch, 1, tpv, cfg.width}));
      }
      auto tgt_rays = plucker_rays(
          reshape(slice(latents.rot, 1, target_latent_index, 1), Shape{batch, 3, 3}),
          reshape(slice(latents.trans, 1, target_latent_index, 1), Shape{batch, 3}),
          reshape(slice(latents.focal, 1, target_latent_index, 1), Shape{batch, 2}));
      auto pos_emb = broadcast_to(reshape(target_pos_embed, Shape{1, tpv, cfg.width}),
                                  Shape{batch, tpv, cfg.width});
      views.push_back(reshape(plucker_fuse.forward(concat<T>({pos_emb, tgt_rays}, -1)),
                              Shape{batch, 1, tpv, cfg.width}));
      tokens = concat<T>(views, 1);
    } else {
      std::vector<Tensor<T>> views;
      for (int v = 0; v < ctx_views; ++v) {
        auto lat = latent_proj.forward(latents.view_values(ctx_latent_index[v]));  // [B,w]
        auto tok = reshape(slice(ctx_tokens, 1, v, 1), Shape{batch, tpv, cfg.width});
        views.push_back(reshape(add(tok, reshape(lat, Shape{batch, 1, cfg.width})),
                                Shape{batch, 1, tpv, cfg.width}));
      }
      auto tgt = latent_proj.forward(latents.view_values(target_latent_index));  // [B,w]
      auto pos_emb = reshape(target_pos_embed, Shape{1, tpv, cfg.width});
      auto tgt_tokens = add(broadcast_to(reshape(tgt, Shape{batch, 1, cfg.width}),
                                         Shape{batch, tpv, cfg.width}),
                            broadcast_to(pos_emb, Shape{batch, tpv, cfg.width}));
      views.push_back(reshape(tgt_tokens, Shape{batch, 1, tpv, cfg.width}));
      tokens = concat<T>(views, 1);
    }

    const int total_views = ctx_views + 1;
    const int64_t total = static_cast<int64_t>(total_views) * tpv;
    tokens = reshape(tokens, Shape{batch, total, cfg.width});

    TokenPositions pos;
    std::vector<int> view_of;
    std::vector<uint8_t> tok_vis(static_cast<size_t>(batch) * total, 1);
    for (int v = 0; v < total_views; ++v)
      for (int r = 0; r < g; ++r)
        for (int c = 0; c < g; ++c) {
          pos.push_back({r, c});
          view_of.push_back(v);
        }
    for (int64_t b = 0; b < batch; ++b)
      for (int v = 0; v < ctx_views; ++v)
        for (int p = 0; p < tpv; ++p)
          tok_vis[b * total + static_cast<int64_t>(v) * tpv + p] =
              vis[b * (static_cast<int64_t>(ctx_views) * tpv) + v * tpv + p];

    const BoolMask local = build_attention_mask(tok_vis, batch, total, view_of, true);
    const BoolMask global = build_attention_mask(tok_vis, batch, total, view_of, false);
    for (const auto& blk : blocks)
      tokens = blk.forward(tokens, local, global, pos, cfg.rope_base);

    auto tgt = slice(tokens, 1, static_cast<int64_t>(ctx_views) * tpv, tpv);  // [B,tpv,w]
    auto pixels = sigmoid(pixel_head.forward(tgt));
    return unpatchify(pixels, cfg.patch_size, cfg.image_size, cfg.image_size, 3);
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    patch_embed.collect(prefix + ".patch_embed", out);
    if (latent_proj.weight.defined()) latent_proj.collect(prefix + ".latent_proj", out);
    if (plucker_fuse.weight.defined()) plucker_fuse.collect(prefix + ".plucker_fuse", out);
    out.push_back({prefix + ".target_pos_embed", target_pos_embed});
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(prefix + ".block" + std::to_string(i), out);
    pixel_head.collect(prefix + ".pixel_head", out);
  }
};

// ---------------------------------------------------------------------------

template <typename T>
struct XFactorModel {
  ModelConfig cfg;
  PoseEncoder<T> encoder;
  Renderer<T> renderer;

  static XFactorModel init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    XFactorModel m;
    m.cfg = cfg;
    Rng enc_rng(Rng::mix(seed, 0x656e63));
    Rng dec_rng(Rng::mix(seed, 0x646563));
    m.encoder = PoseEncoder<T>::init(cfg, enc_rng);
    m.renderer = Renderer<T>::init(cfg, dec_rng);
    return m;
  }

  NamedParams<T> named_params() const {
    NamedParams<T> out;
    encoder.collect("enc", out);
    renderer.collect("dec", out);
    return out;
  }

  void load_params(const NamedParams<T>& src) {
    auto dst = named_params();
    if (src.size() != dst.size()) throw std::runtime_error("parameter count mismatch");
    for (size_t i = 0; i < dst.size(); ++i) {
      if (src[i].first != dst[i].first)
        throw std::runtime_error("parameter name mismatch: " + src[i].first + " vs " +
                                 dst[i].first);
      if (src[i].second.shape() != dst[i].second.shape())
        throw std::runtime_error("parameter shape mismatch for " + src[i].first);
      dst[i].second.data() = src[i].second.data();
    }
  }
};

}  // namespace xfactor
