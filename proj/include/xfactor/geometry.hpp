#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "xfactor/tensor.hpp"

namespace xfactor {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const {
    const double n = norm();
    return n > 0 ? Vec3{x / n, y / n, z / n} : Vec3{0, 0, 0};
  }
};

// Row-major 3x3 rotation matrix.
struct Mat3 {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Mat3 identity() { return {}; }

  double operator()(int r, int c) const { return m[r * 3 + c]; }
  double& operator()(int r, int c) { return m[r * 3 + c]; }

  Mat3 operator*(const Mat3& o) const {
    Mat3 out;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
        out(i, j) = s;
      }
    return out;
  }
  Vec3 operator*(const Vec3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }
  Mat3 transposed() const {
    Mat3 out;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) out(i, j) = (*this)(j, i);
    return out;
  }
  double trace() const { return m[0] + m[4] + m[8]; }
  double det() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  }

  static Mat3 axis_angle(Vec3 axis, double angle_rad) {
    const Vec3 u = axis.normalized();
    const double c = std::cos(angle_rad), s = std::sin(angle_rad), ic = 1.0 - c;
    Mat3 r;
    r.m = {c + u.x * u.x * ic,       u.x * u.y * ic - u.z * s, u.x * u.z * ic + u.y * s,
           u.y * u.x * ic + u.z * s, c + u.y * u.y * ic,       u.y * u.z * ic - u.x * s,
           u.z * u.x * ic - u.y * s, u.z * u.y * ic + u.x * s, c + u.z * u.z * ic};
    return r;
  }
};

// Camera-to-world SE(3) element.
struct Pose {
  Mat3 rotation;
  Vec3 translation;

  static Pose identity() { return {}; }

  bool is_valid(double tol = 1e-6) const {
    const Mat3 rtr = rotation.transposed() * rotation;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        if (std::abs(rtr(i, j) - (i == j ? 1.0 : 0.0)) > tol) return false;
    return std::abs(rotation.det() - 1.0) <= tol;
  }
};

using Trajectory = std::vector<Pose>;

struct Intrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  bool is_valid() const {
    return fx > 0 && fy > 0 && cx >= 0 && cx < width && cy >= 0 && cy < height;
  }
};

inline Pose se3_compose(const Pose& a, const Pose& b) {
  return {a.rotation * b.rotation, a.rotation * b.translation + a.translation};
}

inline Pose se3_inverse(const Pose& a) {
  const Mat3 rt = a.rotation.transposed();
  return {rt, rt * (a.translation * -1.0)};
}

// Pose of j expressed in i's frame: g_i^-1 o g_j.
inline Pose relative_pose(const Pose& g_i, const Pose& g_j) {
  return se3_compose(se3_inverse(g_i), g_j);
}

inline double rotation_angle_deg(const Mat3& r) {
  const double c = std::clamp((r.trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c) * 180.0 / 3.14159265358979323846;
}

// Angle between translation directions, scale-ambiguous. Near-zero vectors:
// both near-zero compares as 0 deg, exactly one as 180 deg.
inline double translation_angle_deg(const Vec3& a, const Vec3& b) {
  const double na = a.norm(), nb = b.norm();
  const bool za = na < 1e-9, zb = nb < 1e-9;
  if (za && zb) return 0.0;
  if (za || zb) return 180.0;
  const double c = std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
  return std::acos(c) * 180.0 / 3.14159265358979323846;
}

enum class PairMode { AllPairs, ReferenceRelative };

struct AccuracyResult {
  double rra = 0, rta = 0;
};

// Fraction of frame pairs whose relative rotation / translation direction
// between the two trajectories agrees within tau degrees.
inline AccuracyResult trajectory_accuracy(const Trajectory& a, const Trajectory& b, double tau_deg,
                                          PairMode mode = PairMode::AllPairs, int reference = 0) {
  if (a.size() != b.size()) throw std::invalid_argument("trajectory length mismatch");
  if (a.size() < 2) throw std::invalid_argument("trajectory needs >= 2 poses");
  int total = 0, rok = 0, tok = 0;
  const int n = static_cast<int>(a.size());
  auto visit = [&](int i, int j) {
    const Pose ra = relative_pose(a[i], a[j]);
    const Pose rb = relative_pose(b[i], b[j]);
    const double rot_err = rotation_angle_deg(ra.rotation.transposed() * rb.rotation);
    const double tr_err = translation_angle_deg(ra.translation, rb.translation);
    ++total;
    if (rot_err < tau_deg) ++rok;
    if (tr_err < tau_deg) ++tok;
  };
  if (mode == PairMode::AllPairs) {
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) visit(i, j);
  } else {
    for (int j = 0; j < n; ++j)
      if (j != reference) visit(reference, j);
  }
  return {static_cast<double>(rok) / total, static_cast<double>(tok) / total};
}

// AUC@T = mean over integer thresholds 1..T of min(RRA@tau, RTA@tau).
inline double auc(const Trajectory& a, const Trajectory& b, int tau_max_deg,
                  PairMode mode = PairMode::AllPairs, int reference = 0) {
  if (tau_max_deg < 1) throw std::invalid_argument("auc: tau_max must be >= 1");
  double acc = 0;
  for (int tau = 1; tau <= tau_max_deg; ++tau) {
    const AccuracyResult r = trajectory_accuracy(a, b, static_cast<double>(tau), mode, reference);
    acc += std::min(r.rra, r.rta);
  }
  return acc / tau_max_deg;
}

enum class MetricKind { RRA, RTA, AUC };

inline double tps(const Trajectory& a, const Trajectory& b, MetricKind kind, double tau,
                  PairMode mode = PairMode::AllPairs, int reference = 0) {
  switch (kind) {
    case MetricKind::RRA: return trajectory_accuracy(a, b, tau, mode, reference).rra;
    case MetricKind::RTA: return trajectory_accuracy(a, b, tau, mode, reference).rta;
    case MetricKind::AUC: return auc(a, b, static_cast<int>(tau), mode, reference);
  }
  return 0;
}

// Per-patch-center camera rays as Pluecker coordinates (d, o x d); d unit.
// Returned as a plain [rows, cols, 6] tensor outside the gradient tape.
template <typename T = double>
Tensor<T> plucker_embedding(const Pose& pose, const Intrinsics& intr, int rows, int cols) {
  std::vector<T> out(static_cast<size_t>(rows) * cols * 6);
  const double ph = static_cast<double>(intr.height) / rows;
  const double pw = static_cast<double>(intr.width) / cols;
  const Vec3 origin = pose.translation;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const double u = (c + 0.5) * pw;
      const double v = (r + 0.5) * ph;
      const Vec3 dir_cam{(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0};
      const Vec3 d = (pose.rotation * dir_cam).normalized();
      const Vec3 moment = origin.cross(d);
      T* dst = out.data() + (static_cast<size_t>(r) * cols + c) * 6;
      dst[0] = static_cast<T>(d.x);
      dst[1] = static_cast<T>(d.y);
      dst[2] = static_cast<T>(d.z);
      dst[3] = static_cast<T>(moment.x);
      dst[4] = static_cast<T>(moment.y);
      dst[5] = static_cast<T>(moment.z);
    }
  NoGradGuard ng;
  return Tensor<T>(Shape{rows, cols, 6}, std::move(out));
}

// Scale-invariant trajectory discrepancy: mean geodesic angle between
// corresponding relative rotations plus translation MSE after a single
// global least-squares scale on the predicted relative translations.
// Relative quantities are taken w.r.t. the first pose.
inline double scale_aligned_trajectory_loss(const Trajectory& pred, const Trajectory& gt) {
  if (pred.size() != gt.size()) throw std::invalid_argument("trajectory length mismatch");
  if (pred.size() < 2) throw std::invalid_argument("trajectory needs >= 2 poses");
  const int n = static_cast<int>(pred.size());
  double rot_sum = 0;
  double dot_sum = 0, sq_sum = 0;
  std::vector<Vec3> tp(n), tg(n);
  for (int i = 1; i < n; ++i) {
    const Pose rp = relative_pose(pred[0], pred[i]);
    const Pose rg = relative_pose(gt[0], gt[i]);
    rot_sum += rotation_angle_deg(rp.rotation.transposed() * rg.rotation) *
               3.14159265358979323846 / 180.0;
    tp[i] = rp.translation;
    tg[i] = rg.translation;
    dot_sum += tp[i].dot(tg[i]);
    sq_sum += tp[i].dot(tp[i]);
  }
  const double s = sq_sum > 1e-12 ? dot_sum / sq_sum : 0.0;
  double tr_sum = 0;
  for (int i = 1; i < n; ++i) {
    const Vec3 diff = tp[i] * s - tg[i];
    tr_sum += diff.dot(diff);
  }
  return rot_sum / (n - 1) + tr_sum / (n - 1);
}

inline double trajectory_scale_lsq(const Trajectory& pred, const Trajectory& gt) {
  double dot_sum = 0, sq_sum = 0;
  for (size_t i = 1; i < pred.size(); ++i) {
    const Vec3 tp = relative_pose(pred[0], pred[i]).translation;
    const Vec3 tg = relative_pose(gt[0], gt[i]).translation;
    dot_sum += tp.dot(tg);
    sq_sum += tp.dot(tp);
  }
  return sq_sum > 1e-12 ? dot_sum / sq_sum : 0.0;
}

// JSON serialization: arrays of {rotation: 9 row-major floats, translation: 3}.
inline nlohmann::json trajectory_to_json(const Trajectory& traj) {
  nlohmann::json arr = nlohmann::json::array();
  for (const Pose& p : traj) {
    nlohmann::json e;
    e["rotation"] = p.rotation.m;
    e["translation"] = {p.translation.x, p.translation.y, p.translation.z};
    arr.push_back(std::move(e));
  }
  return arr;
}

inline Trajectory trajectory_from_json(const nlohmann::json& arr) {
  Trajectory traj;
  for (const auto& e : arr) {
    Pose p;
    const auto& r = e.at("rotation");
    for (int i = 0; i < 9; ++i) p.rotation.m[i] = r.at(i).get<double>();
    const auto& t = e.at("translation");
    p.translation = {t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>()};
    traj.push_back(p);
  }
  return traj;
}

}  // namespace xfactor
