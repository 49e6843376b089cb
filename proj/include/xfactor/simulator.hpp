#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <tuple>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "xfactor/geometry.hpp"
#include "xfactor/image.hpp"
#include "xfactor/rng.hpp"

namespace xfactor {

struct SphereSpec {
  Vec3 center;
  double radius = 0;
  Vec3 albedo;  // rgb in [0,1]
};

struct SceneSpec {
  uint64_t seed = 0;
  std::vector<SphereSpec> spheres;
  Vec3 checker_a{0.85, 0.85, 0.85};
  Vec3 checker_b{0.25, 0.30, 0.35};
  double checker_cell = 0.5;
  Vec3 light_dir{0, 1, 0};  // unit, toward the light
  double ambient = 0.25;

  Vec3 centroid() const {
    Vec3 c;
    for (const auto& s : spheres) c = c + s.center;
    return c * (1.0 / spheres.size());
  }
};

struct OrbitParams {
  double radius = 2.8;
  double height = 1.2;
  double step_deg = 8.0;
  double max_step_deg = 12.0;
  double radius_jitter = 0.15;
  double height_jitter = 0.15;
  double azimuth_jitter_deg = 1.5;
  Vec3 target{0.0, 0.4, 0.0};
};

struct SequenceSample {
  SceneSpec scene;
  std::vector<Image> frames;
  Trajectory poses;
  Intrinsics intrinsics;
  int reference_index = 0;
};

inline SceneSpec sample_scene(uint64_t seed) {
  Rng rng(Rng::mix(seed, 0xabcdef12));
  SceneSpec scene;
  scene.seed = seed;
  const int count = 3 + static_cast<int>(rng.uniform_int(10));  // 3..12
  int attempts = 0;
  while (static_cast<int>(scene.spheres.size()) < count) {
    if (++attempts > 10000) break;  // dense seeds settle for fewer spheres
    SphereSpec s;
    s.radius = rng.uniform(0.15, 0.45);
    const double ang = rng.uniform(0.0, 6.283185307179586);
    const double r = rng.uniform(0.0, 1.2);
    s.center = {r * std::cos(ang), s.radius + rng.uniform(0.0, 0.8), r * std::sin(ang)};
    s.albedo = {rng.uniform(0.15, 0.95), rng.uniform(0.15, 0.95), rng.uniform(0.15, 0.95)};
    bool ok = true;
    for (const auto& other : scene.spheres)
      if ((s.center - other.center).norm() < s.radius + other.radius + 0.02) {
        ok = false;
        break;
      }
    if (ok) scene.spheres.push_back(s);
  }
  if (scene.spheres.size() < 3) throw std::runtime_error("scene sampling failed");
  // light from above, tilted
  const double la = rng.uniform(0.0, 6.283185307179586);
  const double ly = rng.uniform(0.6, 0.95);
  const double lh = std::sqrt(1.0 - ly * ly);
  scene.light_dir = {lh * std::cos(la), ly, lh * std::sin(la)};
  scene.ambient = rng.uniform(0.2, 0.35);
  scene.checker_a = {rng.uniform(0.6, 0.95), rng.uniform(0.6, 0.95), rng.uniform(0.6, 0.95)};
  scene.checker_b = {rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4)};
  return scene;
}

// Camera-to-world look-at pose; camera looks along its +z axis.
inline Pose look_at(const Vec3& eye, const Vec3& target, const Vec3& up = {0, 1, 0}) {
  const Vec3 z = (target - eye).normalized();
  Vec3 x = up.cross(z);
  if (x.norm() < 1e-9) x = Vec3{1, 0, 0};
  x = x.normalized();
  const Vec3 y = z.cross(x);
  Pose p;
  p.rotation.m = {x.x, y.x, z.x, x.y, y.y, z.y, x.z, y.z, z.z};
  p.translation = eye;
  return p;
}

inline Trajectory sample_trajectory(uint64_t seed, int n, const OrbitParams& op) {
  if (n < 2) throw std::invalid_argument("trajectory needs n >= 2");
  Rng rng(Rng::mix(seed, 0x7261796f));
  Trajectory traj;
  double az = rng.uniform(0.0, 360.0);
  const double step = std::min(op.step_deg, op.max_step_deg);
  for (int i = 0; i < n; ++i) {
    const double jitter_az = op.azimuth_jitter_deg > 0
                                 ? rng.uniform(-op.azimuth_jitter_deg, op.azimuth_jitter_deg)
                                 : 0.0;
    const double a = (az + jitter_az) * 3.14159265358979323846 / 180.0;
    const double radius =
        op.radius + (op.radius_jitter > 0 ? rng.uniform(-op.radius_jitter, op.radius_jitter) : 0.0);
    const double height =
        op.height + (op.height_jitter > 0 ? rng.uniform(-op.height_jitter, op.height_jitter) : 0.0);
    const Vec3 eye{op.target.x + radius * std::cos(a), height, op.target.z + radius * std::sin(a)};
    traj.push_back(look_at(eye, op.target));
    az += step;
  }
  return traj;
}

inline Image render(const SceneSpec& scene, const Pose& pose, const Intrinsics& intr) {
  Image img(intr.height, intr.width);
  const Vec3 sky{0.55, 0.70, 0.90};
  const Vec3 origin = pose.translation;
  for (int py = 0; py < intr.height; ++py)
    for (int px = 0; px < intr.width; ++px) {
      const double u = px + 0.5, v = py + 0.5;
      const Vec3 dir_cam{(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0};
      const Vec3 d = (pose.rotation * dir_cam).normalized();

      double best_t = std::numeric_limits<double>::infinity();
      Vec3 color = sky;
      Vec3 normal, albedo;
      bool hit = false;

      for (const auto& s : scene.spheres) {
        const Vec3 oc = origin - s.center;
        const double b = oc.dot(d);
        const double c = oc.dot(oc) - s.radius * s.radius;
        const double disc = b * b - c;
        if (disc < 0) continue;
        const double sq = std::sqrt(disc);
        double t = -b - sq;
        if (t < 1e-6) t = -b + sq;
        if (t < 1e-6 || t >= best_t) continue;
        best_t = t;
        const Vec3 p = origin + d * t;
        normal = (p - s.center).normalized();
        albedo = s.albedo;
        hit = true;
      }
      if (std::abs(d.y) > 1e-12) {
        const double t = -origin.y / d.y;
        if (t > 1e-6 && t < best_t) {
          best_t = t;
          const Vec3 p = origin + d * t;
          const int64_t ix = static_cast<int64_t>(std::floor(p.x / scene.checker_cell));
          const int64_t iz = static_cast<int64_t>(std::floor(p.z / scene.checker_cell));
          albedo = ((ix + iz) & 1) == 0 ? scene.checker_a : scene.checker_b;
          normal = {0, 1, 0};
          hit = true;
        }
      }
      if (hit) {
        const double diffuse = std::max(0.0, normal.dot(scene.light_dir));
        color = albedo * (scene.ambient + (1.0 - scene.ambient) * diffuse);
      }
      float* dst = img.pixel(py, px);
      dst[0] = static_cast<float>(std::min(color.x, 1.0));
      dst[1] = static_cast<float>(std::min(color.y, 1.0));
      dst[2] = static_cast<float>(std::min(color.z, 1.0));
    }
  return img;
}

inline Intrinsics default_intrinsics(int size) {
  Intrinsics intr;
  intr.width = size;
  intr.height = size;
  intr.fx = intr.fy = 0.9 * size;
  intr.cx = intr.cy = size / 2.0;
  return intr;
}

// Frame minimizing the maximum rotation-angle distance to all other frames;
// ties break toward the lowest index.
inline int reference_index(const Trajectory& traj) {
  int best = 0;
  double best_val = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < traj.size(); ++i) {
    double worst = 0;
    for (size_t j = 0; j < traj.size(); ++j) {
      if (i == j) continue;
      worst = std::max(worst,
                       rotation_angle_deg(relative_pose(traj[i], traj[j]).rotation));
    }
    if (worst < best_val) {
      best_val = worst;
      best = static_cast<int>(i);
    }
  }
  return best;
}

inline SequenceSample make_sequence(uint64_t seed, int n, int image_size,
                                    OrbitParams op = OrbitParams{}) {
  SequenceSample s;
  s.scene = sample_scene(seed);
  op.target = s.scene.centroid();
  s.poses = sample_trajectory(Rng::mix(seed, 1), n, op);
  s.intrinsics = default_intrinsics(image_size);
  for (const Pose& p : s.poses) s.frames.push_back(render(s.scene, p, s.intrinsics));
  s.reference_index = reference_index(s.poses);
  return s;
}

// Two different scenes whose trajectories carry identical relative motion:
// B's trajectory is a global SE(3) re-anchoring of A's.
inline std::pair<SequenceSample, SequenceSample> make_transfer_pair(uint64_t seed, int n,
                                                                    int image_size,
                                                                    OrbitParams op = OrbitParams{}) {
  SequenceSample a = make_sequence(Rng::mix(seed, 11), n, image_size, op);
  SequenceSample b;
  b.scene = sample_scene(Rng::mix(seed, 23));
  b.intrinsics = default_intrinsics(image_size);
  Rng rng(Rng::mix(seed, 37));
  const double yaw = rng.uniform(0.0, 6.283185307179586);
  const Mat3 ry = Mat3::axis_angle({0, 1, 0}, yaw);
  const Vec3 ca = a.scene.centroid(), cb = b.scene.centroid();
  const Pose g{ry, cb - ry * ca};
  for (const Pose& p : a.poses) b.poses.push_back(se3_compose(g, p));
  for (const Pose& p : b.poses) b.frames.push_back(render(b.scene, p, b.intrinsics));
  b.reference_index = a.reference_index;
  return {std::move(a), std::move(b)};
}

inline Trajectory oracle_exact(const SequenceSample& sample) { return sample.poses; }

// ---------------------------------------------------------------------------
// Photometric render-and-compare oracle.

struct PhotometricOracleParams {
  double rot_range_deg = 10.0;   // search half-range per rotation axis
  double trans_range = 0.6;      // search half-range per translation axis
  int coarse_samples = 400;      // random candidates in the search box
  int simplex_iters = 200;       // Nelder-Mead iterations from the best candidate
  int refine_iters = 60;         // coordinate-descent polish iterations
  double reject_mse = 0.01;      // residual above this flags the estimate
};

struct PhotometricEstimate {
  Pose pose;
  double residual = 0;
  bool reliable = false;
};

namespace detail {

// Rotation-vector log map; inverse of Mat3::axis_angle for angles in (0, pi).
inline Vec3 so3_log(const Mat3& r) {
  const double c = std::min(1.0, std::max(-1.0, (r.trace() - 1.0) * 0.5));
  const double ang = std::acos(c);
  if (ang < 1e-9) return {0, 0, 0};
  const Vec3 axis{r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1)};
  return axis.normalized() * ang;
}

inline Pose perturb(const Pose& base, const std::array<double, 6>& delta) {
  const Vec3 w{delta[0], delta[1], delta[2]};
  const double ang = w.norm();
  const Mat3 dr = ang > 1e-15 ? Mat3::axis_angle(w, ang) : Mat3::identity();
  const Vec3 v{delta[3], delta[4], delta[5]};
  return {base.rotation * dr, base.translation + base.rotation * v};
}

}  // namespace detail

namespace detail {

using OracleDelta = std::array<double, 6>;

// Nelder-Mead on a 6-vector; returns the best point found and its value.
template <typename F>
inline std::pair<OracleDelta, double> nelder_mead(const F& eval, const OracleDelta& start,
                                                  const OracleDelta& spread, int iters) {
  constexpr int n = 6;
  std::array<OracleDelta, n + 1> pts;
  std::array<double, n + 1> val;
  pts[0] = start;
  val[0] = eval(start);
  for (int i = 0; i < n; ++i) {
    pts[i + 1] = start;
    pts[i + 1][i] += spread[i];
    val[i + 1] = eval(pts[i + 1]);
  }
  std::array<int, n + 1> ord;
  for (int it = 0; it < iters; ++it) {
    for (int i = 0; i <= n; ++i) ord[i] = i;
    std::sort(ord.begin(), ord.end(), [&](int a, int b) { return val[a] < val[b]; });
    const int lo = ord[0], hi = ord[n], nh = ord[n - 1];
    if (val[lo] < 1e-14) break;
    if (val[hi] - val[lo] <= 1e-9 * std::max(val[lo], 1e-12)) break;  // converged
    OracleDelta centroid{};
    for (int i = 0; i <= n; ++i)
      if (i != hi)
        for (int k = 0; k < 6; ++k) centroid[k] += pts[i][k] / n;
    auto along = [&](double t) {
      OracleDelta p;
      for (int k = 0; k < 6; ++k) p[k] = centroid[k] + t * (centroid[k] - pts[hi][k]);
      return p;
    };
    const OracleDelta refl = along(1.0);
    const double e_refl = eval(refl);
    if (e_refl < val[lo]) {
      const OracleDelta expd = along(2.0);
      const double e_expd = eval(expd);
      pts[hi] = e_expd < e_refl ? expd : refl;
      val[hi] = std::min(e_expd, e_refl);
    } else if (e_refl < val[nh]) {
      pts[hi] = refl;
      val[hi] = e_refl;
    } else {
      const OracleDelta contr = along(e_refl < val[hi] ? 0.5 : -0.5);
      const double e_contr = eval(contr);
      if (e_contr < std::min(e_refl, val[hi])) {
        pts[hi] = contr;
        val[hi] = e_contr;
      } else {
        for (int i = 0; i <= n; ++i) {
          if (i == lo) continue;
          for (int k = 0; k < 6; ++k) pts[i][k] = 0.5 * (pts[i][k] + pts[lo][k]);
          val[i] = eval(pts[i]);
        }
      }
    }
  }
  int lo = 0;
  for (int i = 1; i <= n; ++i)
    if (val[i] < val[lo]) lo = i;
  return {pts[lo], val[lo]};
}

}  // namespace detail

inline PhotometricEstimate oracle_photometric(const Image& image, const SceneSpec& scene,
                                              const Pose& init, const Intrinsics& intr,
                                              const PhotometricOracleParams& params = {}) {
  using detail::OracleDelta;

  const double deg = 3.14159265358979323846 / 180.0;
  const OracleDelta range{params.rot_range_deg * deg, params.rot_range_deg * deg,
                          params.rot_range_deg * deg, params.trans_range,
                          params.trans_range,         params.trans_range};

  // Target pyramid, finest first. Coarse levels have wide photometric basins;
  // the full resolution is only trusted for the final polish and residual.
  // Candidates are always rendered at full resolution and then downsampled so
  // every level shares the exact same global minimum.
  std::vector<Image> targets{image};
  while (targets.back().width > 16 && targets.back().width % 2 == 0 &&
         targets.back().height % 2 == 0)
    targets.push_back(downsample2x(targets.back()));

  auto eval_at = [&](size_t level, const OracleDelta& d) {
    Image r = render(scene, detail::perturb(init, d), intr);
    for (size_t l = 0; l < level; ++l) r = downsample2x(r);
    return image_mse(r, targets[level]);
  };

  // Coarsest level: random candidates in the search box. Orbit-like motion
  // couples rotation and translation, so per-axis sweeps stall at the init;
  // joint sampling does not.
  const size_t coarsest = targets.size() - 1;
  std::vector<std::pair<double, OracleDelta>> pool{{eval_at(coarsest, OracleDelta{}),
                                                    OracleDelta{}}};
  Rng rng(0x6f7263u);
  for (int s = 0; s < params.coarse_samples; ++s) {
    OracleDelta cand;
    for (int i = 0; i < 6; ++i) cand[i] = rng.uniform(-range[i], range[i]);
    pool.emplace_back(eval_at(coarsest, cand), cand);
  }

  // Structured candidates: yaw orbits about the vertical axis through the
  // scene centroid, the dominant family of camera motions around an object.
  {
    const Vec3 pivot = scene.centroid();
    const int n_yaw = 48;
    for (int s = 0; s <= n_yaw; ++s) {
      const double yaw = (-1.0 + 2.0 * s / n_yaw) * 1.5 * params.rot_range_deg * deg;
      const Mat3 ry = Mat3::axis_angle({0, 1, 0}, yaw);
      const Pose target_pose = se3_compose({ry, pivot - ry * pivot}, init);
      const Vec3 w = detail::so3_log(init.rotation.transposed() * target_pose.rotation);
      const Vec3 v = init.rotation.transposed() * (target_pose.translation - init.translation);
      const OracleDelta cand{w.x, w.y, w.z, v.x, v.y, v.z};
      pool.emplace_back(eval_at(coarsest, cand), cand);
      // Noisy variants cover the pitch/height/radius jitter a pure yaw
      // orbit cannot express.
      for (int k = 0; k < 3; ++k) {
        OracleDelta noisy = cand;
        for (int i = 0; i < 3; ++i) noisy[i] += rng.uniform(-2.0 * deg, 2.0 * deg);
        for (int i = 3; i < 6; ++i) noisy[i] += rng.uniform(-0.08, 0.08);
        pool.emplace_back(eval_at(coarsest, noisy), noisy);
      }
    }
  }
  std::sort(pool.begin(), pool.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  // Multi-start Nelder-Mead at the coarsest level: the photometric landscape
  // has nearby local minima, so the single best sample is not always in the
  // right basin. Keep the distinct basin representatives, not just the best.
  std::vector<std::pair<double, OracleDelta>> basins;
  {
    auto eval = [&](const OracleDelta& d) { return eval_at(coarsest, d); };
    OracleDelta spread;
    for (int i = 0; i < 6; ++i) spread[i] = 0.25 * range[i];
    const size_t starts = std::min<size_t>(pool.size(), 12);
    for (size_t s = 0; s < starts; ++s) {
      auto [d, e] = detail::nelder_mead(eval, pool[s].second, spread, params.simplex_iters);
      basins.emplace_back(e, d);
      if (e < 1e-6) break;  // already at the global (zero-residual) basin
    }
    std::sort(basins.begin(), basins.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    // Deduplicate: several starts often collapse into the same minimum, and
    // cascading the same basin twice wastes the budget.
    std::vector<std::pair<double, OracleDelta>> distinct;
    for (const auto& b : basins) {
      bool dup = false;
      for (const auto& d : distinct) {
        double gap = 0;
        for (int i = 0; i < 6; ++i)
          gap = std::max(gap, std::abs(b.second[i] - d.second[i]) / range[i]);
        if (gap < 0.03) {
          dup = true;
          break;
        }
      }
      if (!dup) distinct.push_back(b);
    }
    basins = std::move(distinct);
  }

  // Fine cascade: Nelder-Mead down the pyramid, then full-resolution restarts
  // with a shrinking simplex (a fresh simplex escapes the collapsed one a
  // previous run converged to prematurely). The target was rendered from the
  // true pose, so the right basin bottoms out at essentially zero; anything
  // that does not is a wrong basin and the next coarse candidate is tried.
  OracleDelta delta = basins[0].second;
  double best = eval_at(0, delta);
  const size_t cascades = std::min<size_t>(basins.size(), 6);
  for (size_t c = 0; c < cascades && best > 1e-7; ++c) {
    OracleDelta d = basins[c].second;
    double e = 0;
    for (size_t level = coarsest; level-- > 0;) {
      auto eval = [&](const OracleDelta& q) { return eval_at(level, q); };
      OracleDelta spread;
      for (int i = 0; i < 6; ++i) spread[i] = 0.1 * range[i];
      std::tie(d, e) = detail::nelder_mead(eval, d, spread, params.simplex_iters);
    }
    {
      auto eval = [&](const OracleDelta& q) { return eval_at(0, q); };
      for (const double scale : {0.03, 0.01, 0.003}) {
        if (e < 1e-10) break;
        OracleDelta spread;
        for (int i = 0; i < 6; ++i) spread[i] = scale * range[i];
        std::tie(d, e) = detail::nelder_mead(eval, d, spread, params.simplex_iters);
      }
    }
    if (e < best) {
      best = e;
      delta = d;
    }
  }

  // Pivot-rotation sweeps: the photometric pose error concentrates along a
  // near-ambiguous family, small rotations about the scene pivot expressed on
  // the camera's own axes (rotation compensated by translation). A simplex
  // collapses across this narrow valley; sweeping each axis walks along it,
  // and a local simplex then absorbs the leftover jitter.
  {
    const Vec3 pivot = scene.centroid();
    auto eval0 = [&](const OracleDelta& q) { return eval_at(0, q); };
    for (int round = 0; round < 6 && best > 1e-6; ++round) {
      const double prev = best;
      for (int axis = 0; axis < 3; ++axis) {
        const Pose cur = detail::perturb(init, delta);
        const Vec3 ax{cur.rotation(0, axis), cur.rotation(1, axis), cur.rotation(2, axis)};
        for (int s = 0; s <= 80; ++s) {
          const double phi = (-1.0 + 2.0 * s / 80) * 3.0 * deg;
          const Mat3 r = Mat3::axis_angle(ax, phi);
          const Pose cand_pose = se3_compose({r, pivot - r * pivot}, cur);
          const Vec3 w = detail::so3_log(init.rotation.transposed() * cand_pose.rotation);
          const Vec3 v = init.rotation.transposed() * (cand_pose.translation - init.translation);
          const OracleDelta cand{w.x, w.y, w.z, v.x, v.y, v.z};
          const double e = eval0(cand);
          if (e < best) {
            best = e;
            delta = cand;
          }
        }
      }
      OracleDelta spread;
      for (int i = 0; i < 6; ++i) spread[i] = 0.01 * range[i];
      std::tie(delta, best) = detail::nelder_mead(eval0, delta, spread, params.simplex_iters);
      if (best > 0.999 * prev) break;
    }
  }

  // Local re-seeding: a near-miss basin sits within a few degrees of the
  // truth, whose residual is essentially zero. Resample around the current
  // best and descend again until the residual collapses or the budget is out.
  const size_t mid = std::min<size_t>(1, coarsest);
  for (int attempt = 0; attempt < 4 && best > 1e-3; ++attempt) {
    OracleDelta seed = delta;
    double seed_e = eval_at(mid, seed);
    for (int s = 0; s < 120; ++s) {
      OracleDelta cand = delta;
      for (int i = 0; i < 3; ++i) cand[i] += rng.uniform(-3.0 * deg, 3.0 * deg);
      for (int i = 3; i < 6; ++i) cand[i] += rng.uniform(-0.15, 0.15);
      const double e = eval_at(mid, cand);
      if (e < seed_e) {
        seed_e = e;
        seed = cand;
      }
    }
    OracleDelta d = seed;
    double e = seed_e;
    for (const auto& [level, scale] :
         std::initializer_list<std::pair<size_t, double>>{{mid, 0.1}, {0, 0.03}, {0, 0.01}}) {
      auto eval = [&](const OracleDelta& q) { return eval_at(level, q); };
      OracleDelta spread;
      for (int i = 0; i < 6; ++i) spread[i] = scale * range[i];
      std::tie(d, e) = detail::nelder_mead(eval, d, spread, params.simplex_iters);
    }
    if (e < best) {
      best = e;
      delta = d;
    }
  }

  // Coordinate-descent polish with shrinking steps at full resolution.
  OracleDelta step;
  for (int i = 0; i < 6; ++i) step[i] = 0.02 * range[i];
  for (int it = 0; it < params.refine_iters; ++it) {
    bool improved = false;
    for (int axis = 0; axis < 6; ++axis) {
      for (const double sgn : {1.0, -1.0}) {
        OracleDelta cand = delta;
        cand[axis] += sgn * step[axis];
        const double e = eval_at(0, cand);
        if (e < best) {
          best = e;
          delta = cand;
          improved = true;
        }
      }
    }
    if (!improved)
      for (auto& s : step) s *= 0.5;
    if (step[0] < 1e-6 && step[3] < 1e-7) break;
  }

  PhotometricEstimate out;
  out.pose = detail::perturb(init, delta);
  out.residual = best;
  out.reliable = best <= params.reject_mse;
  return out;
}

// ---------------------------------------------------------------------------
// Dataset manifests: sequences regenerate bit-exactly from (seed, config).

struct DatasetManifest {
  uint64_t scene_seed = 0;
  int n_frames = 0;
  int image_size = 0;
  Trajectory trajectory;
  Intrinsics intrinsics;
  std::string config_hash;
};

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["scene_seed"] = m.scene_seed;
  j["n_frames"] = m.n_frames;
  j["image_size"] = m.image_size;
  j["trajectory"] = trajectory_to_json(m.trajectory);
  j["intrinsics"] = {{"fx", m.intrinsics.fx}, {"fy", m.intrinsics.fy}, {"cx", m.intrinsics.cx},
                     {"cy", m.intrinsics.cy}, {"width", m.intrinsics.width},
                     {"height", m.intrinsics.height}};
  j["config_hash"] = m.config_hash;
  return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.scene_seed = j.at("scene_seed").get<uint64_t>();
  m.n_frames = j.at("n_frames").get<int>();
  m.image_size = j.at("image_size").get<int>();
  m.trajectory = trajectory_from_json(j.at("trajectory"));
  const auto& in = j.at("intrinsics");
  m.intrinsics = {in.at("fx"), in.at("fy"), in.at("cx"), in.at("cy"),
                  in.at("width"), in.at("height")};
  m.config_hash = j.at("config_hash").get<std::string>();
  return m;
}

}  // namespace xfactor
