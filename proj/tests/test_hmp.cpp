#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "motionparse/hmp.hpp"
#include "motionparse/synth.hpp"

using namespace motionparse;

namespace {

Pose translation(double x, double y, double z) { return make_pose(Mat3<double>::identity(), {x, y, z}); }

double max_norm(const VectorField& m) {
  double r = 0.0;
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x) r = std::max(r, hmp::motion_norm(m, x, y));
  return r;
}

hmp::HmpOutput parse_gt(const synth::SyntheticScene& sc, double alpha_s = 0.01) {
  return hmp::parse({sc.depth_t, sc.depth_s, sc.flow_t_to_s, sc.flow_s_to_t, sc.geometry.pose, sc.geometry.k, alpha_s});
}

double iou(const MaskField& a, const MaskField& b) {
  int i = 0, u = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    i += a.data()[k] && b.data()[k];
    u += a.data()[k] || b.data()[k];
  }
  return u ? double(i) / u : 1.0;
}

// Pixel whose 5x5 neighbourhood carries a single label in `m`.
bool interior(const MaskField& m, int x, int y, std::uint8_t label) {
  for (int dy = -2; dy <= 2; ++dy)
    for (int dx = -2; dx <= 2; ++dx) {
      const int u = x + dx, v = y + dy;
      if (u < 0 || v < 0 || u >= m.width() || v >= m.height()) return false;
      if (m(u, v) != label) return false;
    }
  return true;
}

}  // namespace

TEST(Constants, Defaults) {
  EXPECT_DOUBLE_EQ(hmp::kVisibilityThreshold, 0.25);
  EXPECT_DOUBLE_EQ(hmp::kSegmentationThreshold, 3.0);
}

TEST(Visibility, ZeroFlow) {
  for (const auto v = hmp::visibility_mask(VectorField(9, 8, 2, 0.0)); double x : v.data()) EXPECT_EQ(x, 1.0);
}

TEST(Visibility, EverythingPushedOut) {
  VectorField f(9, 8, 2, 0.0);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 9; ++x) f(x, y, 0) = 9.0;
  for (const auto v = hmp::visibility_mask(f); double x : v.data()) EXPECT_EQ(x, 0.0);
}

TEST(Visibility, MatchesOcclusionOracle) {
  std::mt19937_64 rng(31);
  int agree = 0, total = 0;
  for (int t = 0; t < 8; ++t) {
    const auto sc = synth::random_moving_box_scene(rng);
    const auto v = hmp::visibility_mask(sc.flow_s_to_t);
    const auto occ = synth::occlusion_oracle(sc);
    for (std::size_t i = 0; i < v.size(); ++i) agree += (v.data()[i] == 0.0) == (occ.data()[i] != 0);
    total += static_cast<int>(v.size());
  }
  EXPECT_GE(agree, 0.99 * total);
}

TEST(RigidMotion, IdentityPose) {
  const auto k = synth::default_intrinsics(16, 12);
  for (const auto m = hmp::rigid_motion_map(ScalarField(16, 12, 1, 4.0), Pose{}, k); double x : m.data())
    EXPECT_EQ(x, 0.0);
}

TEST(RigidMotion, PureTranslation) {
  const auto k = synth::default_intrinsics(16, 12);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> d(1.0, 20.0);
  ScalarField depth(16, 12);
  for (auto& x : depth.data()) x = d(rng);
  const auto m = hmp::rigid_motion_map(depth, translation(0.3, -0.2, 0.7), k);
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 16; ++x) {
      EXPECT_NEAR(m(x, y, 0), 0.3, 1e-12);
      EXPECT_NEAR(m(x, y, 1), -0.2, 1e-12);
      EXPECT_NEAR(m(x, y, 2), 0.7, 1e-12);
    }
}

TEST(RigidMotion, PureRotation) {
  const auto k = synth::default_intrinsics(16, 12);
  const Pose p = pose_from_twist(Twist{0, 0, 0, 0.05, -0.1, 0.2});
  ScalarField depth(16, 12);
  for (int i = 0; i < 16 * 12; ++i) depth.data()[i] = 2.0 + 0.1 * i;
  const auto m = hmp::rigid_motion_map(depth, p, k);
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 16; ++x) {
      const double z = depth(x, y);
      const double X = (x - k.cx) / k.fx * z, Y = (y - k.cy) / k.fy * z;
      const auto& R = p.rotation;
      EXPECT_NEAR(m(x, y, 0), (R(0, 0) - 1) * X + R(0, 1) * Y + R(0, 2) * z, 1e-12);
      EXPECT_NEAR(m(x, y, 1), R(1, 0) * X + (R(1, 1) - 1) * Y + R(1, 2) * z, 1e-12);
      EXPECT_NEAR(m(x, y, 2), R(2, 0) * X + R(2, 1) * Y + (R(2, 2) - 1) * z, 1e-12);
    }
}

TEST(RigidMotion, BadDepth) {
  ScalarField d(4, 4, 1, 1.0);
  d(1, 2) = -1.0;
  EXPECT_THROW(hmp::rigid_motion_map(d, Pose{}, synth::default_intrinsics(4, 4)), DomainError);
}

TEST(DynamicMotion, StaticSceneVanishes) {
  // Pure translation keeps D_s exact under bilinear lookup.
  const auto sc = synth::make_static_scene(12.0, 3, translation(0.2, -0.1, 0.3));
  const auto v = hmp::visibility_mask(sc.flow_s_to_t);
  const auto dm = hmp::dynamic_motion_map(sc.depth_t, sc.depth_s, sc.flow_t_to_s, sc.geometry.pose, sc.geometry.k, v);
  EXPECT_LT(max_norm(dm.m_d), 1e-9);
}

TEST(DynamicMotion, RotatingCameraSmall) {
  // With rotation D_s is not affine in the pixel, so bilinear lookup leaves
  // a small residual.
  std::mt19937_64 rng(2);
  const auto sc = synth::random_static_scene(rng);
  const auto v = hmp::visibility_mask(sc.flow_s_to_t);
  const auto dm = hmp::dynamic_motion_map(sc.depth_t, sc.depth_s, sc.flow_t_to_s, sc.geometry.pose, sc.geometry.k, v);
  EXPECT_LT(max_norm(dm.m_d), 1e-6);
}

TEST(DynamicMotion, ZeroVisibility) {
  std::mt19937_64 rng(3);
  const auto sc = synth::random_moving_box_scene(rng);
  const ScalarField v(64, 64, 1, 0.0);
  const auto dm = hmp::dynamic_motion_map(sc.depth_t, sc.depth_s, sc.flow_t_to_s, sc.geometry.pose, sc.geometry.k, v);
  for (double x : dm.m_d.data()) EXPECT_EQ(x, 0.0);
}

TEST(DynamicMotion, TranslatingBox) {
  const auto sc = synth::make_moving_box_scene(100.0, 50.0, {0.5, 0.0, 0.0}, translation(0.8, 0.0, 0.0), 9);
  const auto h = parse_gt(sc);
  int box = 0, bg = 0;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      if (!h.valid(x, y) || h.v(x, y) == 0.0) continue;
      const double n = hmp::motion_norm(h.m_d, x, y);
      if (interior(sc.moving, x, y, 1)) {
        EXPECT_NEAR(n, 0.5, 1e-6);
        ++box;
      } else if (interior(sc.moving, x, y, 0) && !sc.occluded(x, y)) {
        EXPECT_NEAR(n, 0.0, 1e-6);
        ++bg;
      }
    }
  EXPECT_GT(box, 100);
  EXPECT_GT(bg, 1000);
}

TEST(DynamicMotion, OutOfImageFlowInvalid) {
  const auto k = synth::default_intrinsics(8, 8);
  VectorField f(8, 8, 2, 0.0);
  f(3, 3, 0) = 20.0;
  const ScalarField d(8, 8, 1, 5.0);
  const auto dm = hmp::dynamic_motion_map(d, d, f, Pose{}, k, ScalarField(8, 8, 1, 1.0));
  EXPECT_EQ(dm.valid(3, 3), 0);
  EXPECT_EQ(dm.m_d(3, 3, 0), 0.0);
  EXPECT_EQ(dm.valid(4, 4), 1);
}

TEST(DynamicMotion, GridMismatch) {
  const auto k = synth::default_intrinsics(8, 8);
  const ScalarField d(8, 8, 1, 5.0);
  EXPECT_THROW(hmp::dynamic_motion_map(d, ScalarField(8, 7, 1, 5.0), VectorField(8, 8, 2), Pose{}, k,
                                       ScalarField(8, 8, 1, 1.0)),
               DomainError);
}

TEST(MovingMask, Examples) {
  VectorField m(3, 1, 3, 0.0);
  m(1, 0, 0) = 3.0;
  m(2, 0, 0) = 1.0;
  m(2, 0, 1) = 2.0;
  m(2, 0, 2) = 2.0;  // norm 3
  const auto s = hmp::moving_mask(m, 0.01);
  EXPECT_EQ(s(0, 0), 0.0);
  EXPECT_NEAR(s(1, 0), 0.029554466451491823, 1e-15);
  EXPECT_NEAR(s(2, 0), 0.029554466451491823, 1e-15);
  for (const auto z = hmp::moving_mask(m, 0.0); double x : z.data()) EXPECT_EQ(x, 0.0);
  EXPECT_THROW(hmp::moving_mask(m, -0.1), DomainError);
}

TEST(MovingMask, StrictlyBelowOne) {
  VectorField m(1, 1, 3, 0.0);
  m(0, 0, 0) = 1e6;
  EXPECT_LT(hmp::moving_mask(m, 10.0)(0, 0), 1.0);
}

TEST(Property, MaskMonotone) {
  std::mt19937_64 rng(4);
  // alpha * ||M_d|| stays below 20 so that doubles resolve 1 - S.
  std::uniform_real_distribution<double> n(0.0, 10.0), a(1e-2, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const double n1 = n(rng), n2 = n1 + 0.1 + n(rng), alpha = a(rng);
    VectorField m(2, 1, 3, 0.0);
    m(0, 0, 0) = n1;
    m(1, 0, 1) = n2;
    const auto s = hmp::moving_mask(m, alpha);
    EXPECT_LT(s(0, 0), s(1, 0));
    EXPECT_LT(s(1, 0), 1.0);
    EXPECT_GE(s(0, 0), 0.0);
  }
}

TEST(Segmentation, Threshold) {
  VectorField m(3, 1, 3, 0.0);
  m(0, 0, 0) = 2.9;
  m(1, 0, 1) = 3.0;
  m(2, 0, 2) = 3.1;
  const auto b = hmp::binary_segmentation(m);
  EXPECT_EQ(b(0, 0), 0);
  EXPECT_EQ(b(1, 0), 0);
  EXPECT_EQ(b(2, 0), 1);
}

TEST(Parse, StaticSceneNull) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 5; ++t) {
    const auto sc = synth::random_static_scene(rng);
    const auto h = parse_gt(sc);
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        EXPECT_LT(hmp::motion_norm(h.m_d, x, y), 1e-6);
        EXPECT_LT(h.s(x, y), 1e-6);
      }
    // Visible away from the border strip the camera motion pushes out.
    for (int y = 8; y < 56; ++y)
      for (int x = 8; x < 56; ++x) EXPECT_EQ(h.v(x, y), 1.0);
  }
}

TEST(Parse, IdentityInputs) {
  const auto k = synth::default_intrinsics(16, 16);
  const ScalarField d(16, 16, 1, 7.0);
  const VectorField zero(16, 16, 2, 0.0);
  const auto h = hmp::parse({d, d, zero, zero, Pose{}, k, 0.01});
  for (double x : h.m_b.data()) EXPECT_EQ(x, 0.0);
  for (double x : h.m_d.data()) EXPECT_EQ(x, 0.0);
  for (double x : h.v.data()) EXPECT_EQ(x, 1.0);
  for (double x : h.s.data()) EXPECT_EQ(x, 0.0);
}

TEST(Parse, OutputInvariants) {
  std::mt19937_64 rng(6);
  const auto sc = synth::random_moving_box_scene(rng);
  const auto h = parse_gt(sc, 0.05);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      if (h.v(x, y) == 0.0) {
        EXPECT_EQ(hmp::motion_norm(h.m_d, x, y), 0.0);
      }
      EXPECT_NEAR(h.s(x, y), 1.0 - std::exp(-0.05 * hmp::motion_norm(h.m_d, x, y)), 1e-15);
      EXPECT_GE(h.s(x, y), 0.0);
      EXPECT_LT(h.s(x, y), 1.0);
    }
}

TEST(Parse, SegmentationFidelity) {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 5; ++t) {
    const auto sc = synth::random_moving_box_scene(rng);
    const auto h = parse_gt(sc);
    EXPECT_GE(iou(hmp::binary_segmentation(h.m_d), sc.moving), 0.9);
  }
}

TEST(Property, ScaleCovariance) {
  std::mt19937_64 rng(8);
  const auto sc = synth::random_moving_box_scene(rng);
  const auto h = parse_gt(sc);
  for (double c : {0.1, 2.5, 40.0}) {
    ScalarField dt = sc.depth_t, ds = sc.depth_s;
    for (auto& x : dt.data()) x *= c;
    for (auto& x : ds.data()) x *= c;
    Pose p = sc.geometry.pose;
    p.translation = c * p.translation;
    const auto hc = hmp::parse({dt, ds, sc.flow_t_to_s, sc.flow_s_to_t, p, sc.geometry.k, 0.01});
    for (std::size_t i = 0; i < h.m_d.size(); ++i) {
      EXPECT_NEAR(hc.m_d.data()[i], c * h.m_d.data()[i], 1e-9 * c * (1.0 + std::abs(h.m_d.data()[i])));
      EXPECT_NEAR(hc.m_b.data()[i], c * h.m_b.data()[i], 1e-9 * c * (1.0 + std::abs(h.m_b.data()[i])));
    }
    EXPECT_EQ(hmp::binary_segmentation(hc.m_d, 3.0 * c), hmp::binary_segmentation(h.m_d, 3.0));
  }
}

TEST(Property, ConsistencyIdentity) {
  // F = rigid flow and D_s = D^_s. Translation over a fronto-parallel plane
  // keeps D^_s constant, so the bilinear lookup of D_s is exact.
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> d(5.0, 9.0), t(-0.5, 0.5);
  const auto k = synth::default_intrinsics(24, 24);
  for (int trial = 0; trial < 50; ++trial) {
    const Pose pose = translation(t(rng), t(rng), t(rng));
    const ScalarField dt(24, 24, 1, d(rng));
    const auto rf = rigid_flow_field(dt, pose, k);
    const ScalarField ds(24, 24, 1, rf.depth(0, 0));
    const auto dm = hmp::dynamic_motion_map(dt, ds, rf.flow, pose, k, ScalarField(24, 24, 1, 1.0));
    double worst = 0.0;
    for (int y = 0; y < 24; ++y)
      for (int x = 0; x < 24; ++x)
        if (dm.valid(x, y)) worst = std::max(worst, hmp::motion_norm(dm.m_d, x, y));
    EXPECT_LT(worst, 1e-9);
  }
}

TEST(Property, VisibilityIndependentOfTiling) {
  std::mt19937_64 rng(10);
  const auto sc = synth::random_moving_box_scene(rng);
  setenv("MOTIONPARSE_THREADS", "1", 1);
  const auto a = hmp::visibility_mask(sc.flow_s_to_t);
  setenv("MOTIONPARSE_THREADS", "7", 1);
  const auto b = hmp::visibility_mask(sc.flow_s_to_t);
  unsetenv("MOTIONPARSE_THREADS");
  EXPECT_EQ(a, b);
}
