#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "helpers.hpp"
#include "xfactor/geometry.hpp"

using namespace xfactor;

namespace {

constexpr double kPi = 3.14159265358979323846;

Pose random_pose(Rng& rng, double tmax = 2.0) {
  Pose p;
  p.rotation = Mat3::axis_angle({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)},
                                rng.uniform(-kPi, kPi));
  p.translation = {rng.uniform(-tmax, tmax), rng.uniform(-tmax, tmax), rng.uniform(-tmax, tmax)};
  return p;
}

// Brute-force all-pairs accuracy written independently of the library code.
AccuracyResult brute_force_accuracy(const Trajectory& a, const Trajectory& b, double tau) {
  int total = 0, rok = 0, tok = 0;
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t j = i + 1; j < a.size(); ++j) {
      const Mat3 ra = a[i].rotation.transposed() * a[j].rotation;
      const Vec3 ta = a[i].rotation.transposed() * (a[j].translation - a[i].translation);
      const Mat3 rb = b[i].rotation.transposed() * b[j].rotation;
      const Vec3 tb = b[i].rotation.transposed() * (b[j].translation - b[i].translation);
      ++total;
      if (rotation_angle_deg(ra.transposed() * rb) < tau) ++rok;
      if (translation_angle_deg(ta, tb) < tau) ++tok;
    }
  return {static_cast<double>(rok) / total, static_cast<double>(tok) / total};
}

}  // namespace

TEST_CASE("SE(3) compose, inverse and relative round trips") {
  Rng rng(101);
  for (int it = 0; it < 20; ++it) {
    const Pose a = random_pose(rng), b = random_pose(rng);
    REQUIRE(a.is_valid());

    // The acos-based angle loses half the mantissa near zero, so the angle
    // checks get a looser bound than the translation ones.
    const Pose id = se3_compose(a, se3_inverse(a));
    CHECK(rotation_angle_deg(id.rotation) < 1e-5);
    CHECK(id.translation.norm() < 1e-9);

    // relative_pose(a, b) composed back onto a recovers b.
    const Pose rel = relative_pose(a, b);
    const Pose back = se3_compose(a, rel);
    CHECK(rotation_angle_deg(back.rotation.transposed() * b.rotation) < 1e-5);
    CHECK((back.translation - b.translation).norm() < 1e-9);
  }
}

TEST_CASE("rotation angle recovers axis-angle magnitudes") {
  Rng rng(102);
  for (int it = 0; it < 20; ++it) {
    const double ang = rng.uniform(0.01, 179.0);
    const Mat3 r = Mat3::axis_angle({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)},
                                    ang * kPi / 180.0);
    CHECK(rotation_angle_deg(r) == Catch::Approx(ang).margin(1e-6));
  }
  CHECK(rotation_angle_deg(Mat3::identity()) == 0.0);
}

TEST_CASE("translation angle conventions for degenerate vectors") {
  CHECK(translation_angle_deg({0, 0, 0}, {0, 0, 0}) == 0.0);
  CHECK(translation_angle_deg({0, 0, 0}, {1, 0, 0}) == 180.0);
  CHECK(translation_angle_deg({1, 0, 0}, {0, 0, 0}) == 180.0);
  CHECK(translation_angle_deg({1, 0, 0}, {0, 1, 0}) == Catch::Approx(90.0).margin(1e-9));
  CHECK(translation_angle_deg({1, 0, 0}, {2, 0, 0}) == Catch::Approx(0.0).margin(1e-9));
  CHECK(translation_angle_deg({1, 0, 0}, {-3, 0, 0}) == Catch::Approx(180.0).margin(1e-9));
}

TEST_CASE("accuracy thresholds are strict and bracket a known perturbation") {
  // Two poses; b's second pose rotated 15 deg away from a's.
  Trajectory a{Pose::identity(), Pose::identity()};
  a[1].translation = {1, 0, 0};
  Trajectory b = a;
  b[1].rotation = Mat3::axis_angle({0, 1, 0}, 15.0 * kPi / 180.0);
  CHECK(trajectory_accuracy(a, b, 10.0).rra == 0.0);
  CHECK(trajectory_accuracy(a, b, 20.0).rra == 1.0);
  // Strict inequality: an error of exactly tau is a miss.
  CHECK(trajectory_accuracy(a, b, 15.0).rra == 0.0);
}

TEST_CASE("all-pairs accuracy matches brute-force enumeration") {
  Rng rng(103);
  for (int it = 0; it < 10; ++it) {
    Trajectory a, b;
    for (int i = 0; i < 4; ++i) {
      a.push_back(random_pose(rng));
      b.push_back(random_pose(rng));
    }
    for (double tau : {5.0, 30.0, 90.0, 170.0}) {
      const auto lib = trajectory_accuracy(a, b, tau);
      const auto ref = brute_force_accuracy(a, b, tau);
      CHECK(std::abs(lib.rra - ref.rra) < 1e-12);
      CHECK(std::abs(lib.rta - ref.rta) < 1e-12);
    }
  }
}

TEST_CASE("reference-relative mode only visits reference pairs") {
  Rng rng(104);
  Trajectory a, b;
  for (int i = 0; i < 4; ++i) {
    a.push_back(random_pose(rng));
    b.push_back(a.back());
  }
  // Corrupt the relation between non-reference frames 2 and 3 only: from
  // reference 0 each frame individually still matches.
  b[2].rotation = b[2].rotation * Mat3::axis_angle({1, 0, 0}, 0.001);
  const auto ref_rel = trajectory_accuracy(a, b, 1.0, PairMode::ReferenceRelative, 0);
  CHECK(ref_rel.rra == 1.0);
  CHECK(ref_rel.rta == 1.0);
}

TEST_CASE("AUC closed form at one half") {
  // Identical rotations; translation directions differ by exactly 10.5 deg,
  // so rta@tau = 0 for tau <= 10 and 1 for tau >= 11 => AUC@20 = 0.5.
  Trajectory a{Pose::identity(), Pose::identity()};
  a[1].translation = {1, 0, 0};
  Trajectory b = a;
  const double th = 10.5 * kPi / 180.0;
  b[1].translation = {std::cos(th), std::sin(th), 0};
  CHECK(auc(a, b, 20) == Catch::Approx(0.5).margin(1e-12));
  CHECK_THROWS_AS(auc(a, b, 0), std::invalid_argument);
}

TEST_CASE("tps dispatch agrees with the underlying metrics") {
  Rng rng(105);
  Trajectory a, b;
  for (int i = 0; i < 4; ++i) {
    a.push_back(random_pose(rng));
    b.push_back(random_pose(rng));
  }
  CHECK(tps(a, b, MetricKind::RRA, 30.0) == trajectory_accuracy(a, b, 30.0).rra);
  CHECK(tps(a, b, MetricKind::RTA, 30.0) == trajectory_accuracy(a, b, 30.0).rta);
  CHECK(tps(a, b, MetricKind::AUC, 20.0) == auc(a, b, 20));
  CHECK(tps(a, a, MetricKind::AUC, 20.0) == 1.0);
}

TEST_CASE("metrics are gauge and translation-scale invariant") {
  Rng rng(106);
  Trajectory a, b;
  for (int i = 0; i < 5; ++i) {
    a.push_back(random_pose(rng));
    b.push_back(random_pose(rng));
  }
  // Global left-multiplication of b by an arbitrary rigid transform.
  const Pose gauge = random_pose(rng);
  Trajectory b_gauged;
  for (const Pose& p : b) b_gauged.push_back(se3_compose(gauge, p));
  for (double tau : {10.0, 45.0, 120.0}) {
    const auto r0 = trajectory_accuracy(a, b, tau);
    const auto r1 = trajectory_accuracy(a, b_gauged, tau);
    CHECK(r0.rra == Catch::Approx(r1.rra).margin(1e-12));
    CHECK(r0.rta == Catch::Approx(r1.rta).margin(1e-12));
  }
  // Uniform translation rescale of b.
  Trajectory b_scaled = b;
  for (Pose& p : b_scaled) p.translation = p.translation * 7.3;
  const auto r0 = trajectory_accuracy(a, b, 45.0);
  const auto r2 = trajectory_accuracy(a, b_scaled, 45.0);
  CHECK(r0.rta == Catch::Approx(r2.rta).margin(1e-12));
}

TEST_CASE("AUC is monotone in the threshold and symmetric in arguments") {
  Rng rng(107);
  Trajectory a, b;
  for (int i = 0; i < 5; ++i) {
    a.push_back(random_pose(rng));
    b.push_back(random_pose(rng));
  }
  double prev = 0;
  for (int tmax : {5, 10, 20, 40, 90, 180}) {
    // Mean of a nondecreasing function over a growing prefix of thresholds
    // never decreases when the function saturates at 1; check the underlying
    // min(rra, rta) per threshold is nondecreasing instead.
    const double cur = std::min(trajectory_accuracy(a, b, tmax).rra,
                                trajectory_accuracy(a, b, tmax).rta);
    CHECK(cur >= prev);
    prev = cur;
  }
  CHECK(auc(a, b, 30) == Catch::Approx(auc(b, a, 30)).margin(1e-12));
}

TEST_CASE("plucker embedding identities") {
  Intrinsics intr;
  intr.width = intr.height = 64;
  intr.fx = intr.fy = 57.6;
  intr.cx = intr.cy = 32.0;

  // With a 1x1 grid the single patch center is the principal point, so the
  // ray is the optical axis: the camera frame +z, rotated to world.
  Rng rng(108);
  const Pose pose = random_pose(rng);
  auto emb = plucker_embedding<double>(pose, intr, 1, 1);
  REQUIRE(emb.shape() == Shape{1, 1, 6});
  const Vec3 axis = pose.rotation * Vec3{0, 0, 1};
  CHECK(emb.data()[0] == Catch::Approx(axis.x).margin(1e-12));
  CHECK(emb.data()[1] == Catch::Approx(axis.y).margin(1e-12));
  CHECK(emb.data()[2] == Catch::Approx(axis.z).margin(1e-12));

  // Moment = o x d, and any point p on the ray satisfies p x d = o x d.
  auto emb4 = plucker_embedding<double>(pose, intr, 4, 4);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) {
      const double* e = emb4.data().data() + (r * 4 + c) * 6;
      const Vec3 d{e[0], e[1], e[2]};
      CHECK(d.norm() == Catch::Approx(1.0).margin(1e-12));
      const Vec3 m = pose.translation.cross(d);
      CHECK(m.x == Catch::Approx(e[3]).margin(1e-12));
      const Vec3 p = pose.translation + d * 3.7;  // slide along the ray
      const Vec3 m2 = p.cross(d);
      CHECK(m2.y == Catch::Approx(e[4]).margin(1e-10));
      CHECK(m2.z == Catch::Approx(e[5]).margin(1e-10));
    }
}

TEST_CASE("scale-aligned trajectory loss") {
  Rng rng(109);
  Trajectory gt;
  for (int i = 0; i < 5; ++i) gt.push_back(random_pose(rng));

  // The rotation term goes through acos, which bottoms out around 1e-8 even
  // for bit-identical rotations.
  CHECK(scale_aligned_trajectory_loss(gt, gt) == Catch::Approx(0.0).margin(1e-6));

  // Doubling all translations of the prediction is absorbed by the scale fit.
  Trajectory doubled = gt;
  for (Pose& p : doubled) p.translation = p.translation * 2.0;
  CHECK(scale_aligned_trajectory_loss(doubled, gt) == Catch::Approx(0.0).margin(1e-6));
  CHECK(trajectory_scale_lsq(doubled, gt) == Catch::Approx(0.5).margin(1e-10));

  // s* closed form on a hand-built case: pred rel-translations (1,0,0),(0,1,0)
  // vs gt (3,0,0),(0,1,0) => s* = (3+1)/(1+1) = 2.
  Trajectory p3{Pose::identity(), Pose::identity(), Pose::identity()};
  Trajectory g3 = p3;
  p3[1].translation = {1, 0, 0};
  p3[2].translation = {0, 1, 0};
  g3[1].translation = {3, 0, 0};
  g3[2].translation = {0, 1, 0};
  CHECK(trajectory_scale_lsq(p3, g3) == Catch::Approx(2.0).margin(1e-12));
  // Residual at s*=2: |2-3|^2 + |2-1|^2 over 2 pairs = 1.
  CHECK(scale_aligned_trajectory_loss(p3, g3) == Catch::Approx(1.0).margin(1e-12));

  CHECK_THROWS_AS(scale_aligned_trajectory_loss(p3, gt), std::invalid_argument);
}

TEST_CASE("trajectory JSON round trip") {
  Rng rng(110);
  Trajectory t;
  for (int i = 0; i < 4; ++i) t.push_back(random_pose(rng));
  const auto j = trajectory_to_json(t);
  const Trajectory back = trajectory_from_json(j);
  REQUIRE(back.size() == t.size());
  for (size_t i = 0; i < t.size(); ++i) {
    CHECK(back[i].rotation.m == t[i].rotation.m);
    CHECK(back[i].translation.x == t[i].translation.x);
    CHECK(back[i].translation.y == t[i].translation.y);
    CHECK(back[i].translation.z == t[i].translation.z);
  }
}
