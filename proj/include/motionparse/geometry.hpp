#pragma once

// Pinhole camera, SE(3) poses and rigid reprojection.
//
// Pixel convention: integer coordinates address pixel centres and the
// homogeneous lift of (u, v) is (u, v, 1). Twists are laid out as
// (t_x, t_y, t_z, r_x, r_y, r_z) and mapped through the SE(3) exponential.

#include <array>
#include <cmath>
#include <string>
#include <utility>

#include "motionparse/field.hpp"

namespace motionparse {

template <class T>
struct Vec3 {
  T x{}, y{}, z{};

  friend Vec3 operator+(const Vec3& a, const Vec3& b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Vec3 operator-(const Vec3& a, const Vec3& b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Vec3 operator*(const T& s, const Vec3& a) { return {s * a.x, s * a.y, s * a.z}; }
  T dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  T squared_norm() const { return x * x + y * y + z * z; }
};

template <class T>
struct Mat3 {
  std::array<T, 9> m{};  // row-major

  static Mat3 identity() {
    Mat3 r;
    r.m = {T(1.0), T(0.0), T(0.0), T(0.0), T(1.0), T(0.0), T(0.0), T(0.0), T(1.0)};
    return r;
  }
  T& operator()(int r, int c) { return m[static_cast<std::size_t>(r * 3 + c)]; }
  const T& operator()(int r, int c) const { return m[static_cast<std::size_t>(r * 3 + c)]; }

  friend Vec3<T> operator*(const Mat3& a, const Vec3<T>& v) {
    return {a(0, 0) * v.x + a(0, 1) * v.y + a(0, 2) * v.z,
            a(1, 0) * v.x + a(1, 1) * v.y + a(1, 2) * v.z,
            a(2, 0) * v.x + a(2, 1) * v.y + a(2, 2) * v.z};
  }
  friend Mat3 operator*(const Mat3& a, const Mat3& b) {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r(i, j) = a(i, 0) * b(0, j) + a(i, 1) * b(1, j) + a(i, 2) * b(2, j);
    return r;
  }
  Mat3 transpose() const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
    return r;
  }
};

using Point3 = Vec3<double>;

struct PixelCoord {
  double u = 0.0;
  double v = 0.0;
};

struct CameraIntrinsics {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  int width = 2, height = 2;

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0) || !std::isfinite(fx) || !std::isfinite(fy) ||
        !std::isfinite(cx) || !std::isfinite(cy))
      throw DomainError("CameraIntrinsics: focal lengths must be positive and finite");
    if (width < 2 || height < 2) throw DomainError("CameraIntrinsics: grid must be at least 2x2");
  }

  /// Intrinsics of pyramid level `level` under 2x2 average pooling: pooled
  /// pixel i covers fine pixels 2i and 2i+1, so its centre sits at 2i+0.5.
  CameraIntrinsics at_level(int level) const {
    CameraIntrinsics k = *this;
    for (int l = 0; l < level; ++l) {
      k.fx *= 0.5;
      k.fy *= 0.5;
      k.cx = (k.cx - 0.5) * 0.5;
      k.cy = (k.cy - 0.5) * 0.5;
      k.width = (k.width + 1) / 2;
      k.height = (k.height + 1) / 2;
    }
    return k;
  }
};

template <class T>
struct BasicPose {
  Mat3<T> rotation = Mat3<T>::identity();
  Vec3<T> translation{T(0.0), T(0.0), T(0.0)};

  Vec3<T> operator*(const Vec3<T>& p) const { return rotation * p + translation; }
};

using Pose = BasicPose<double>;
using Twist = std::array<double, 6>;

inline Pose make_pose(const Mat3<double>& r, const Point3& t) {
  Pose p;
  p.rotation = r;
  p.translation = t;
  return p;
}

inline void validate_pose(const Pose& pose, double tol = 1e-9) {
  const Mat3<double> rtr = pose.rotation.transpose() * pose.rotation;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if (std::abs(rtr(i, j) - (i == j ? 1.0 : 0.0)) > tol)
        throw DomainError("Pose: rotation is not orthonormal");
  const auto& r = pose.rotation;
  const double det = r(0, 0) * (r(1, 1) * r(2, 2) - r(1, 2) * r(2, 1)) -
                     r(0, 1) * (r(1, 0) * r(2, 2) - r(1, 2) * r(2, 0)) +
                     r(0, 2) * (r(1, 0) * r(2, 1) - r(1, 1) * r(2, 0));
  if (std::abs(det - 1.0) > tol) throw DomainError("Pose: rotation determinant is not +1");
  if (!std::isfinite(pose.translation.x) || !std::isfinite(pose.translation.y) ||
      !std::isfinite(pose.translation.z))
    throw DomainError("Pose: non-finite translation");
}

namespace detail {

template <class T>
Mat3<T> skew(const Vec3<T>& w) {
  Mat3<T> s;
  s.m = {T(0.0), -w.z, w.y, w.z, T(0.0), -w.x, -w.y, w.x, T(0.0)};
  return s;
}

template <class T>
Mat3<T> add_scaled(const Mat3<T>& a, const T& sa, const Mat3<T>& b, const T& sb, const Mat3<T>& c) {
  Mat3<T> r;
  for (std::size_t i = 0; i < 9; ++i) r.m[i] = a.m[i] + sa * b.m[i] + sb * c.m[i];
  return r;
}

// sin(t)/t, (1-cos t)/t^2 and (t - sin t)/t^3 as functions of t^2; the
// series branch keeps derivatives finite at the origin.
template <class T>
void so3_coefficients(const T& theta_sq, T& a, T& b, T& c) {
  using std::cos;
  using std::sin;
  using std::sqrt;
  if (value_of(theta_sq) < 1e-8) {
    a = 1.0 - theta_sq / 6.0 + theta_sq * theta_sq / 120.0;
    b = 0.5 - theta_sq / 24.0 + theta_sq * theta_sq / 720.0;
    c = 1.0 / 6.0 - theta_sq / 120.0 + theta_sq * theta_sq / 5040.0;
    return;
  }
  const T theta = sqrt(theta_sq);
  const T s = sin(theta);
  a = s / theta;
  b = (1.0 - cos(theta)) / theta_sq;
  c = (theta - s) / (theta_sq * theta);
}

}  // namespace detail

/// SE(3) exponential of (t_x, t_y, t_z, r_x, r_y, r_z).
template <class T>
BasicPose<T> pose_from_twist(const std::array<T, 6>& xi) {
  if constexpr (std::is_floating_point_v<T>) {
    for (const auto& v : xi)
      if (!std::isfinite(v)) throw DomainError("pose_from_twist: non-finite twist");
  }
  const Vec3<T> rho{xi[0], xi[1], xi[2]};
  const Vec3<T> omega{xi[3], xi[4], xi[5]};
  T a, b, c;
  detail::so3_coefficients(omega.squared_norm(), a, b, c);
  const Mat3<T> w = detail::skew(omega);
  const Mat3<T> w2 = w * w;
  const Mat3<T> id = Mat3<T>::identity();
  BasicPose<T> pose;
  pose.rotation = detail::add_scaled(id, a, w, b, w2);
  const Mat3<T> v = detail::add_scaled(id, b, w, c, w2);
  pose.translation = v * rho;
  return pose;
}

template <class T>
BasicPose<T> pose_inverse(const BasicPose<T>& p) {
  BasicPose<T> r;
  r.rotation = p.rotation.transpose();
  const Vec3<T> rt = r.rotation * p.translation;
  r.translation = {-rt.x, -rt.y, -rt.z};
  return r;
}

/// a ∘ b: applies b first.
template <class T>
BasicPose<T> pose_compose(const BasicPose<T>& a, const BasicPose<T>& b) {
  BasicPose<T> r;
  r.rotation = a.rotation * b.rotation;
  r.translation = a.rotation * b.translation + a.translation;
  return r;
}

/// SE(3) logarithm; valid for rotation angles below pi.
inline Twist pose_log(const Pose& p) {
  const auto& r = p.rotation;
  const double cos_theta = (r(0, 0) + r(1, 1) + r(2, 2) - 1.0) * 0.5;
  const Vec3<double> vee{r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1)};
  const double theta = std::atan2(0.5 * std::sqrt(vee.squared_norm()), cos_theta);
  double scale;
  if (theta < 1e-6) {
    scale = 0.5 + theta * theta / 12.0;
  } else {
    scale = theta / (2.0 * std::sin(theta));
  }
  const Vec3<double> omega = scale * vee;
  double a, b, c;
  detail::so3_coefficients(omega.squared_norm(), a, b, c);
  const Mat3<double> w = detail::skew(omega);
  const Mat3<double> w2 = w * w;
  // V^-1 = I - W/2 + (1/theta^2)(1 - a/(2b)) W^2
  const double theta_sq = omega.squared_norm();
  const double k = theta_sq < 1e-8 ? 1.0 / 12.0 + theta_sq / 720.0 : (1.0 - a / (2.0 * b)) / theta_sq;
  const Mat3<double> vinv = detail::add_scaled(Mat3<double>::identity(), -0.5, w, k, w2);
  const Point3 rho = vinv * p.translation;
  return {rho.x, rho.y, rho.z, omega.x, omega.y, omega.z};
}

// ---------------------------------------------------------------------------
// Projection

/// Unchecked back-projection depth * K^-1 * (u, v, 1).
template <class T>
Vec3<T> back_project_raw(double u, double v, const T& depth, const CameraIntrinsics& k) {
  return {depth * ((u - k.cx) / k.fx), depth * ((v - k.cy) / k.fy), depth};
}

inline Point3 back_project(const PixelCoord& p, double depth, const CameraIntrinsics& k) {
  if (!(depth > 0.0) || !std::isfinite(depth))
    throw DomainError("back_project: depth must be positive and finite, got " + std::to_string(depth));
  return back_project_raw(p.u, p.v, depth, k);
}

struct Projection {
  PixelCoord pixel;
  double depth = 0.0;
};

constexpr double kMinProjectionDepth = 1e-12;

inline Projection project(const Point3& x, const CameraIntrinsics& k) {
  if (std::abs(x.z) < kMinProjectionDepth) throw DomainError("project: point lies on the camera plane");
  return {{k.fx * x.x / x.z + k.cx, k.fy * x.y / x.z + k.cy}, x.z};
}

/// Rigid reprojection of a target pixel into the source view. Returns the
/// source pixel p_st and the projected depth there; out-of-image results are
/// returned unclamped.
inline Projection rigid_reproject(const PixelCoord& p, double depth, const Pose& pose,
                                  const CameraIntrinsics& k) {
  const Point3 moved = pose * back_project(p, depth, k);
  if (!(moved.z > kMinProjectionDepth)) throw DomainError("rigid_reproject: point behind the source camera");
  return project(moved, k);
}

/// Generic per-pixel reprojection used by the losses. `valid` is cleared
/// when the transformed point is behind the camera; coordinates are then
/// left at the target pixel so downstream sampling stays finite.
template <class T>
struct ReprojectedPixel {
  T u, v, depth;
  bool valid;
};

template <class T>
ReprojectedPixel<T> reproject_pixel(double u, double v, const T& depth, const BasicPose<T>& pose,
                                    const CameraIntrinsics& k) {
  const Vec3<T> x = back_project_raw(u, v, depth, k);
  const Vec3<T> m = pose * x;
  if (!(value_of(m.z) > kMinProjectionDepth)) return {T(u), T(v), m.z, false};
  const T inv_z = 1.0 / m.z;
  return {k.fx * m.x * inv_z + k.cx, k.fy * m.y * inv_z + k.cy, m.z, true};
}

struct RigidFlow {
  VectorField flow;   // 2 channels, p_st - p
  ScalarField depth;  // projected depth D^_s at p_st
  MaskField valid;    // 0 where the point lands behind the source camera
};

inline RigidFlow rigid_flow_field(const ScalarField& depth, const Pose& pose, const CameraIntrinsics& k) {
  if (depth.channels() != 1) throw DomainError("rigid_flow_field: depth must be single-channel");
  RigidFlow out{VectorField(depth.width(), depth.height(), 2), ScalarField(depth.width(), depth.height()),
                MaskField(depth.width(), depth.height(), 1, 0)};
  for (double d : depth.data())
    if (!std::isfinite(d) || !(d > 0.0)) throw DomainError("rigid_flow_field: depth must be positive and finite");
  parallel_rows(depth.height(), [&](int y0, int y1) {
    for (int y = y0; y < y1; ++y)
      for (int x = 0; x < depth.width(); ++x) {
        const auto r = reproject_pixel<double>(x, y, depth(x, y), pose, k);
        out.flow(x, y, 0) = r.valid ? r.u - x : 0.0;
        out.flow(x, y, 1) = r.valid ? r.v - y : 0.0;
        out.depth(x, y) = r.depth;
        out.valid(x, y) = r.valid ? 1 : 0;
      }
  });
  return out;
}

}  // namespace motionparse
