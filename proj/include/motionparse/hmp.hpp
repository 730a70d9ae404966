#pragma once

// Holistic motion parsing: splits per-pixel 3D motion into the part
// explained by camera motion over a rigid scene and the residual dynamic
// part, and derives visibility and moving-object masks. No tunable state.

#include <algorithm>
#include <cmath>

#include "motionparse/geometry.hpp"
#include "motionparse/imaging.hpp"

namespace motionparse::hmp {

/// Minimum splatted weight for a target pixel to count as visible.
inline constexpr double kVisibilityThreshold = 0.25;
/// Default ||M_d|| threshold for binary segmentation, in scene units.
inline constexpr double kSegmentationThreshold = 3.0;

struct HmpOutput {
  VectorField m_b;  // 3 channels, target camera frame displacement
  VectorField m_d;  // 3 channels, source camera frame, zero where v = 0
  ScalarField v;    // {0, 1}
  ScalarField s;    // [0, 1)
  MaskField valid;  // 0 where p_sf left the image or p_st fell behind the camera
};

inline ScalarField visibility_mask(const VectorField& flow_s_to_t, double threshold = kVisibilityThreshold) {
  const ScalarField weights = forward_splat_weights(flow_s_to_t);
  ScalarField v(weights.width(), weights.height());
  for (std::size_t i = 0; i < v.size(); ++i) v.data()[i] = weights.data()[i] > threshold ? 1.0 : 0.0;
  return v;
}

inline void check_depth(const ScalarField& d, const char* what) {
  if (d.channels() != 1) throw DomainError(std::string(what) + ": depth must be single-channel");
  for (double x : d.data())
    if (!(x > 0.0) || !std::isfinite(x)) throw DomainError(std::string(what) + ": depth must be positive and finite");
}

/// M_b(p) = T phi(p|D_t) - phi(p|D_t).
inline VectorField rigid_motion_map(const ScalarField& depth_t, const Pose& pose, const CameraIntrinsics& k) {
  check_depth(depth_t, "rigid_motion_map");
  VectorField m(depth_t.width(), depth_t.height(), 3);
  parallel_rows(depth_t.height(), [&](int y0, int y1) {
    for (int y = y0; y < y1; ++y)
      for (int x = 0; x < depth_t.width(); ++x) {
        const Point3 p = back_project_raw(x, y, depth_t(x, y), k);
        const Point3 d = pose * p - p;
        m(x, y, 0) = d.x;
        m(x, y, 1) = d.y;
        m(x, y, 2) = d.z;
      }
  });
  return m;
}

struct DynamicMotion {
  VectorField m_d;
  MaskField valid;
};

/// M_d(p) = V(p) [phi(p + F(p) | D_s) - T phi(p | D_t)], D_s sampled
/// bilinearly at p_sf. Pixels whose p_sf leaves the image or whose rigid
/// point lands behind the source camera are marked invalid and set to zero.
inline DynamicMotion dynamic_motion_map(const ScalarField& depth_t, const ScalarField& depth_s,
                                        const VectorField& flow_t_to_s, const Pose& pose,
                                        const CameraIntrinsics& k, const ScalarField& v) {
  check_depth(depth_t, "dynamic_motion_map");
  check_depth(depth_s, "dynamic_motion_map");
  require_same_grid(depth_t, depth_s, "dynamic_motion_map");
  require_same_grid(depth_t, flow_t_to_s, "dynamic_motion_map");
  require_same_grid(depth_t, v, "dynamic_motion_map");
  DynamicMotion out{VectorField(depth_t.width(), depth_t.height(), 3, 0.0),
                    MaskField(depth_t.width(), depth_t.height(), 1, 0)};
  parallel_rows(depth_t.height(), [&](int y0, int y1) {
    for (int y = y0; y < y1; ++y)
      for (int x = 0; x < depth_t.width(); ++x) {
        const Point3 rigid = pose * back_project_raw(x, y, depth_t(x, y), k);
        const double usf = x + flow_t_to_s(x, y, 0);
        const double vsf = y + flow_t_to_s(x, y, 1);
        const auto ds = bilinear_sample(depth_s, usf, vsf);
        const bool ok = ds.in_bounds && rigid.z > kMinProjectionDepth;
        out.valid(x, y) = ok ? 1 : 0;
        if (!ok || v(x, y) == 0.0) continue;
        const Point3 tracked = back_project_raw(usf, vsf, ds.value, k);
        const Point3 d = v(x, y) * (tracked - rigid);
        out.m_d(x, y, 0) = d.x;
        out.m_d(x, y, 1) = d.y;
        out.m_d(x, y, 2) = d.z;
      }
  });
  return out;
}

inline double motion_norm(const VectorField& m, int x, int y) {
  return std::sqrt(m(x, y, 0) * m(x, y, 0) + m(x, y, 1) * m(x, y, 1) + m(x, y, 2) * m(x, y, 2));
}

// Largest double below 1; S saturates here instead of rounding to 1.
inline const double kMaskCeiling = std::nextafter(1.0, 0.0);

/// S = 1 - exp(-alpha_s ||M_d||).
inline ScalarField moving_mask(const VectorField& m_d, double alpha_s) {
  if (!(alpha_s >= 0.0)) throw DomainError("moving_mask: alpha_s must be non-negative");
  ScalarField s(m_d.width(), m_d.height());
  for (int y = 0; y < m_d.height(); ++y)
    for (int x = 0; x < m_d.width(); ++x)
      s(x, y) = std::min(-std::expm1(-alpha_s * motion_norm(m_d, x, y)), kMaskCeiling);
  return s;
}

inline MaskField binary_segmentation(const VectorField& m_d, double threshold = kSegmentationThreshold) {
  MaskField out(m_d.width(), m_d.height(), 1, 0);
  for (int y = 0; y < m_d.height(); ++y)
    for (int x = 0; x < m_d.width(); ++x) out(x, y) = motion_norm(m_d, x, y) > threshold ? 1 : 0;
  return out;
}

struct ParseInputs {
  const ScalarField& depth_t;
  const ScalarField& depth_s;
  const VectorField& flow_t_to_s;
  const VectorField& flow_s_to_t;
  const Pose& pose;
  const CameraIntrinsics& k;
  double alpha_s;
};

inline HmpOutput parse(const ParseInputs& in) {
  require_same_grid(in.depth_t, in.flow_s_to_t, "parse");
  HmpOutput out;
  out.v = visibility_mask(in.flow_s_to_t);
  out.m_b = rigid_motion_map(in.depth_t, in.pose, in.k);
  auto dyn = dynamic_motion_map(in.depth_t, in.depth_s, in.flow_t_to_s, in.pose, in.k, out.v);
  out.m_d = std::move(dyn.m_d);
  out.valid = std::move(dyn.valid);
  out.s = moving_mask(out.m_d, in.alpha_s);
  return out;
}

}  // namespace motionparse::hmp
