#pragma once

// Synthetic two-view scenes with exact ground truth, plus brute-force
// reference computations (ray-cast occlusion, analytic flow, central
// difference gradients).
//
// The projection arithmetic here is written out independently of
// geometry.hpp so that it can serve as a reference for it.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "motionparse/field.hpp"
#include "motionparse/geometry.hpp"
#include "motionparse/imaging.hpp"

namespace motionparse::synth {

inline CameraIntrinsics default_intrinsics(int width = 64, int height = 64) {
  return {60.0 * width / 64.0, 60.0 * width / 64.0, (width - 1) * 0.5, (height - 1) * 0.5, width, height};
}

// ---------------------------------------------------------------------------
// Texture: three octaves of quintic-interpolated lattice value noise.

class ValueNoise {
 public:
  explicit ValueNoise(std::uint64_t seed) : seed_(seed) {}

  double operator()(double x, double y) const {
    return 0.15 + 0.7 * (0.5 * octave(x, y, 0) + 0.3 * octave(2.0 * x + 17.3, 2.0 * y - 5.1, 1) +
                         0.2 * octave(4.0 * x - 3.7, 4.0 * y + 9.2, 2));
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  double lattice(std::int64_t ix, std::int64_t iy, int oct) const {
    const std::uint64_t h = mix(seed_ ^ mix(static_cast<std::uint64_t>(ix) * 0x100000001b3ULL ^
                                            mix(static_cast<std::uint64_t>(iy) + 0x51ULL * static_cast<std::uint64_t>(oct + 1))));
    return static_cast<double>(h >> 11) * (1.0 / 9007199254740992.0);
  }
  static double fade(double t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); }
  double octave(double x, double y, int oct) const {
    const double fx = std::floor(x);
    const double fy = std::floor(y);
    const auto ix = static_cast<std::int64_t>(fx);
    const auto iy = static_cast<std::int64_t>(fy);
    const double sx = fade(x - fx);
    const double sy = fade(y - fy);
    const double a = lattice(ix, iy, oct), b = lattice(ix + 1, iy, oct);
    const double c = lattice(ix, iy + 1, oct), d = lattice(ix + 1, iy + 1, oct);
    const double top = a + sx * (b - a);
    const double bottom = c + sx * (d - c);
    return top + sy * (bottom - top);
  }

  std::uint64_t seed_;
};

// ---------------------------------------------------------------------------
// Scene description

/// Background plane n . X = offset in the target camera frame.
struct Plane {
  Point3 normal{0.0, 0.0, 1.0};
  double offset = 10.0;
};

/// Fronto-parallel rectangle at depth `depth` in the target frame, moving by
/// `motion` (expressed in the source frame) between the two views.
struct Box {
  double depth = 5.0;
  double x0 = -0.5, x1 = 0.5, y0 = -0.5, y1 = 0.5;
  Point3 motion{0.0, 0.0, 0.0};
};

struct SceneGeometry {
  CameraIntrinsics k;
  Pose pose;  // T_{t->s}
  Plane background;
  std::optional<Box> box;
  std::uint64_t texture_seed = 0;
  double texture_cell_px = 12.0;  // lattice spacing in pixels at the reference depth
  std::optional<double> stereo_baseline;
};

struct SyntheticScene {
  SceneGeometry geometry;
  ScalarField image_t, image_s;
  std::optional<ScalarField> image_c;  // stereo partner of the target view
  Pose stereo_pose;                    // T_{t->c}
  ScalarField depth_t, depth_s;
  VectorField flow_t_to_s, flow_s_to_t;
  MaskField occluded;       // target pixels with no visible source correspondence
  MaskField moving;         // target pixels on the moving object
  VectorField object_motion;  // 3 channels, source frame, non-zero on `moving`
};

namespace detail {

enum class Surface : int { kNone = -1, kBackground = 0, kBox = 1 };

struct Hit {
  Surface surface = Surface::kNone;
  double depth = 0.0;   // z in the casting camera
  Point3 target_point;  // the surface point in target-frame (pre-motion) coordinates
};

struct Frame {
  // Maps target-frame scene points into this camera: X_cam = R X + t (+ box motion).
  Mat3<double> r = Mat3<double>::identity();
  Point3 t{0, 0, 0};
  bool applies_box_motion = false;
};

inline Point3 ray(const CameraIntrinsics& k, double u, double v) { return {(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0}; }

inline Point3 to_target(const Frame& f, const Point3& x_cam, const Point3& extra) {
  const Point3 d = x_cam - f.t - extra;
  return f.r.transpose() * d;
}

/// Intersects the ray through (u, v) of camera `f` with every surface.
inline Hit cast(const SceneGeometry& g, const Frame& f, double u, double v) {
  const Point3 dir = ray(g.k, u, v);
  Hit best;
  // Background: n . R^T (X - t) = offset  =>  (R n) . X = offset + (R n) . t
  {
    const Point3 rn = f.r * g.background.normal;
    const double denom = rn.dot(dir);
    if (std::abs(denom) > 1e-15) {
      const double lambda = (g.background.offset + rn.dot(f.t)) / denom;
      if (lambda > 1e-9) {
        best = {Surface::kBackground, lambda, to_target(f, lambda * dir, {0, 0, 0})};
      }
    }
  }
  if (g.box) {
    const Box& b = *g.box;
    const Point3 extra = f.applies_box_motion ? b.motion : Point3{0, 0, 0};
    const Point3 rn = f.r * Point3{0.0, 0.0, 1.0};
    const double denom = rn.dot(dir);
    if (std::abs(denom) > 1e-15) {
      const double lambda = (b.depth + rn.dot(f.t + extra)) / denom;
      if (lambda > 1e-9 && (best.surface == Surface::kNone || lambda < best.depth)) {
        const Point3 xt = to_target(f, lambda * dir, extra);
        if (xt.x >= b.x0 && xt.x <= b.x1 && xt.y >= b.y0 && xt.y <= b.y1) best = {Surface::kBox, lambda, xt};
      }
    }
  }
  return best;
}

inline Frame target_frame() { return {}; }
inline Frame source_frame(const SceneGeometry& g) { return {g.pose.rotation, g.pose.translation, true}; }

inline double texture(const SceneGeometry& g, const ValueNoise& bg, const ValueNoise& fg, const Hit& h) {
  // Lattice spacing chosen so that a cell spans `texture_cell_px` pixels at
  // the surface's reference depth.
  if (h.surface == Surface::kBox) {
    const double cell = g.texture_cell_px * g.box->depth / g.k.fx;
    return fg(h.target_point.x / cell + 101.0, h.target_point.y / cell - 37.0);
  }
  const double cell = g.texture_cell_px * g.background.offset / g.k.fx;
  return bg(h.target_point.x / cell, h.target_point.y / cell);
}

/// Projection of a target-frame surface point into the source camera.
inline Point3 to_source(const SceneGeometry& g, const Hit& h) {
  Point3 xs = g.pose.rotation * h.target_point + g.pose.translation;
  if (h.surface == Surface::kBox) xs = xs + g.box->motion;
  return xs;
}

inline PixelCoord pinhole(const CameraIntrinsics& k, const Point3& x) {
  return {k.fx * x.x / x.z + k.cx, k.fy * x.y / x.z + k.cy};
}

// Same round-off slack as bilinear_sample.
inline bool in_image(const CameraIntrinsics& k, const PixelCoord& p) {
  const double tu = kBoundsSlack * k.width;
  const double tv = kBoundsSlack * k.height;
  return p.u >= -tu && p.u <= k.width - 1.0 + tu && p.v >= -tv && p.v <= k.height - 1.0 + tv;
}

/// True when the source camera sees the same surface point at its projection.
inline bool visible_in_source(const SceneGeometry& g, const Hit& h) {
  const Point3 xs = to_source(g, h);
  if (!(xs.z > 1e-9)) return false;
  const PixelCoord p = pinhole(g.k, xs);
  if (!in_image(g.k, p)) return false;
  const Hit hs = cast(g, source_frame(g), p.u, p.v);
  return hs.surface == h.surface && std::abs(hs.depth - xs.z) <= 1e-7 * xs.z;
}

}  // namespace detail

/// Renders every ground-truth field for a scene description.
inline SyntheticScene render(const SceneGeometry& g) {
  using namespace detail;
  g.k.validate();
  const int w = g.k.width;
  const int h = g.k.height;
  const ValueNoise bg(g.texture_seed * 2 + 1);
  const ValueNoise fg(g.texture_seed * 2 + 2);

  SyntheticScene s;
  s.geometry = g;
  s.image_t = ScalarField(w, h);
  s.image_s = ScalarField(w, h);
  s.depth_t = ScalarField(w, h);
  s.depth_s = ScalarField(w, h);
  s.flow_t_to_s = VectorField(w, h, 2);
  s.flow_s_to_t = VectorField(w, h, 2);
  s.occluded = MaskField(w, h, 1, 0);
  s.moving = MaskField(w, h, 1, 0);
  s.object_motion = VectorField(w, h, 3, 0.0);

  const Frame src = source_frame(g);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const Hit hit = cast(g, src, x, y);
      if (hit.surface == Surface::kNone) throw DomainError("synth: source ray misses the scene");
      s.image_s(x, y) = texture(g, bg, fg, hit);
      s.depth_s(x, y) = hit.depth;
      Point3 xt = hit.target_point;
      if (!(xt.z > 1e-9)) throw DomainError("synth: scene point behind the target camera");
      const PixelCoord p = pinhole(g.k, xt);
      s.flow_s_to_t(x, y, 0) = p.u - x;
      s.flow_s_to_t(x, y, 1) = p.v - y;
    }

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const Hit hit = cast(g, target_frame(), x, y);
      if (hit.surface == Surface::kNone) throw DomainError("synth: target ray misses the scene");
      s.depth_t(x, y) = hit.depth;
      const Point3 xs = to_source(g, hit);
      if (!(xs.z > 1e-9)) throw DomainError("synth: scene point behind the source camera");
      const PixelCoord p = pinhole(g.k, xs);
      s.flow_t_to_s(x, y, 0) = p.u - x;
      s.flow_t_to_s(x, y, 1) = p.v - y;
      const bool vis = visible_in_source(g, hit);
      s.occluded(x, y) = vis ? 0 : 1;
      s.image_t(x, y) = vis ? bilinear_sample(s.image_s, p.u, p.v).value : texture(g, bg, fg, hit);
      if (hit.surface == Surface::kBox) {
        s.moving(x, y) = 1;
        s.object_motion(x, y, 0) = g.box->motion.x;
        s.object_motion(x, y, 1) = g.box->motion.y;
        s.object_motion(x, y, 2) = g.box->motion.z;
      }
    }

  if (g.stereo_baseline) {
    // Right camera displaced by +b along x: X_c = X_t - (b, 0, 0).
    const double b = *g.stereo_baseline;
    s.stereo_pose = make_pose(Mat3<double>::identity(), {-b, 0.0, 0.0});
    const Frame stereo{Mat3<double>::identity(), {-b, 0.0, 0.0}, false};
    ScalarField ic(w, h);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const Hit hit = cast(g, stereo, x, y);
        if (hit.surface == Surface::kNone) throw DomainError("synth: stereo ray misses the scene");
        const PixelCoord p = pinhole(g.k, hit.target_point);
        const Hit back = in_image(g.k, p) ? cast(g, target_frame(), p.u, p.v) : Hit{};
        const bool vis = back.surface == hit.surface && std::abs(back.depth - hit.target_point.z) <= 1e-7 * hit.target_point.z;
        ic(x, y) = vis ? bilinear_sample(s.image_t, p.u, p.v).value : texture(g, bg, fg, hit);
      }
    s.image_c = std::move(ic);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Scene factories

inline SyntheticScene make_static_scene(double plane_depth, std::uint64_t texture_seed, const Pose& pose,
                                        const CameraIntrinsics& k = default_intrinsics(),
                                        std::optional<double> stereo_baseline = std::nullopt) {
  if (!(plane_depth > 0.0)) throw DomainError("make_static_scene: plane must lie in front of the camera");
  SceneGeometry g;
  g.k = k;
  g.pose = pose;
  g.background = {{0.0, 0.0, 1.0}, plane_depth};
  g.texture_seed = texture_seed;
  g.stereo_baseline = stereo_baseline;
  return render(g);
}

struct BoxSceneConfig {
  double bg_depth = 100.0;
  double bg_tilt = 0.0;  // radians; tilts the background normal about the x axis
  double box_depth = 50.0;
  Point3 box_motion{0.0, 0.0, 0.0};
  Pose pose;
  std::uint64_t texture_seed = 0;
  // Box footprint in target pixels [left, right] x [top, bottom].
  double left = 22.0, right = 41.0, top = 22.0, bottom = 41.0;
  CameraIntrinsics k = default_intrinsics();
  std::optional<double> stereo_baseline;
};

inline SyntheticScene make_moving_box_scene(const BoxSceneConfig& c) {
  if (!(c.box_depth > 0.0)) throw DomainError("make_moving_box_scene: box must lie in front of the camera");
  if (!(c.box_depth < c.bg_depth)) throw DomainError("make_moving_box_scene: box must be in front of the background");
  if (!(c.right > c.left) || !(c.bottom > c.top)) throw DomainError("make_moving_box_scene: degenerate box");
  SceneGeometry g;
  g.k = c.k;
  g.pose = c.pose;
  g.background = {{0.0, std::sin(c.bg_tilt), std::cos(c.bg_tilt)}, c.bg_depth * std::cos(c.bg_tilt)};
  // Pixel edges sit half a pixel outside the outermost covered centres.
  Box b;
  b.depth = c.box_depth;
  b.x0 = (c.left - 0.5 - c.k.cx) / c.k.fx * c.box_depth;
  b.x1 = (c.right + 0.5 - c.k.cx) / c.k.fx * c.box_depth;
  b.y0 = (c.top - 0.5 - c.k.cy) / c.k.fy * c.box_depth;
  b.y1 = (c.bottom + 0.5 - c.k.cy) / c.k.fy * c.box_depth;
  b.motion = c.box_motion;
  g.box = b;
  g.texture_seed = c.texture_seed;
  g.stereo_baseline = c.stereo_baseline;
  return render(g);
}

inline SyntheticScene make_moving_box_scene(double bg_depth, double box_depth, const Point3& box_motion,
                                            const Pose& pose, std::uint64_t texture_seed = 0) {
  BoxSceneConfig c;
  c.bg_depth = bg_depth;
  c.box_depth = box_depth;
  c.box_motion = box_motion;
  c.pose = pose;
  c.texture_seed = texture_seed;
  return make_moving_box_scene(c);
}

// ---------------------------------------------------------------------------
// Randomised scene families used by tests and the CLI.

/// Fronto-parallel plane at depth 8-15 with a small random camera motion.
inline SyntheticScene random_static_scene(std::mt19937_64& rng, const CameraIntrinsics& k = default_intrinsics()) {
  std::uniform_real_distribution<double> depth(8.0, 15.0);
  std::uniform_real_distribution<double> trans(-0.2, 0.2);
  std::uniform_real_distribution<double> rot(-0.01, 0.01);
  const double z = depth(rng);
  const Twist xi{trans(rng), trans(rng), trans(rng) * 0.5, rot(rng), rot(rng), rot(rng)};
  return make_static_scene(z, rng(), pose_from_twist(xi), k);
}

/// Box scene whose background flow is an integer number of pixels, so the
/// image-border visibility is unambiguous. The box moves enough for
/// ||M_d|| to exceed the default segmentation threshold.
inline BoxSceneConfig random_box_config(std::mt19937_64& rng, const CameraIntrinsics& k = default_intrinsics()) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> bg_shift(-2, 2);
  BoxSceneConfig c;
  c.k = k;
  c.bg_depth = 80.0 + 40.0 * unit(rng);
  c.box_depth = (0.7 + 0.15 * unit(rng)) * c.bg_depth;
  // Camera translation giving an integer background disparity.
  const double tx = bg_shift(rng) * c.bg_depth / k.fx;
  c.pose = make_pose(Mat3<double>::identity(), {tx, 0.0, 0.0});
  const double speed = 3.5 + 1.0 * unit(rng);
  const double angle = 2.0 * M_PI * unit(rng);
  c.box_motion = {speed * std::cos(angle), speed * std::sin(angle), 0.0};
  const double size_x = 18.0 + 8.0 * unit(rng);
  const double size_y = 18.0 + 8.0 * unit(rng);
  c.left = std::round(12.0 + (k.width - 24.0 - size_x) * unit(rng));
  c.top = std::round(12.0 + (k.height - 24.0 - size_y) * unit(rng));
  c.right = c.left + std::round(size_x) - 1.0;
  c.bottom = c.top + std::round(size_y) - 1.0;
  c.texture_seed = rng();
  return c;
}

inline SyntheticScene random_moving_box_scene(std::mt19937_64& rng, const CameraIntrinsics& k = default_intrinsics()) {
  return make_moving_box_scene(random_box_config(rng, k));
}

// ---------------------------------------------------------------------------
// Oracles

/// Target pixels whose scene point is hidden or out of view in the source,
/// by ray casting the source camera at the exact correspondence.
inline MaskField occlusion_oracle(const SyntheticScene& scene) {
  const auto& g = scene.geometry;
  MaskField out(g.k.width, g.k.height, 1, 0);
  for (int y = 0; y < g.k.height; ++y)
    for (int x = 0; x < g.k.width; ++x) {
      const auto hit = detail::cast(g, detail::target_frame(), x, y);
      out(x, y) = detail::visible_in_source(g, hit) ? 0 : 1;
    }
  return out;
}

/// Target-to-source flow from exact ray/surface intersection.
inline VectorField analytic_flow_oracle(const SyntheticScene& scene) {
  const auto& g = scene.geometry;
  VectorField out(g.k.width, g.k.height, 2);
  for (int y = 0; y < g.k.height; ++y)
    for (int x = 0; x < g.k.width; ++x) {
      const auto hit = detail::cast(g, detail::target_frame(), x, y);
      const PixelCoord p = detail::pinhole(g.k, detail::to_source(g, hit));
      out(x, y, 0) = p.u - x;
      out(x, y, 1) = p.v - y;
    }
  return out;
}

/// Central differences (f(x + eps e_i) - f(x - eps e_i)) / 2 eps for each
/// requested coordinate (all coordinates when `indices` is empty).
inline std::vector<double> numeric_gradient(const std::function<double(std::span<const double>)>& objective,
                                            std::span<const double> x, double eps,
                                            std::span<const std::size_t> indices = {}) {
  if (!(eps > 0.0)) throw DomainError("numeric_gradient: eps must be positive");
  std::vector<double> probe(x.begin(), x.end());
  std::vector<double> grad(x.size(), 0.0);
  auto one = [&](std::size_t i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double fp = objective(probe);
    probe[i] = orig - eps;
    const double fm = objective(probe);
    probe[i] = orig;
    grad[i] = (fp - fm) / (2.0 * eps);
  };
  if (indices.empty()) {
    for (std::size_t i = 0; i < x.size(); ++i) one(i);
  } else {
    for (std::size_t i : indices) one(i);
  }
  return grad;
}

/// Whether the forward and backward differences of coordinate `i` agree to
/// `rel_tol`. False means a kink of a piecewise-smooth objective lies inside
/// the stencil and central differences there say nothing about the gradient.
inline bool locally_smooth(const std::function<double(std::span<const double>)>& objective,
                           std::span<const double> x, std::size_t i, double eps, double rel_tol) {
  std::vector<double> probe(x.begin(), x.end());
  const double f0 = objective(probe);
  probe[i] = x[i] + eps;
  const double fp = objective(probe);
  probe[i] = x[i] - eps;
  const double fm = objective(probe);
  const double fwd = (fp - f0) / eps;
  const double bwd = (f0 - fm) / eps;
  const double scale = std::max(std::abs(fwd), std::abs(bwd));
  return scale == 0.0 || std::abs(fwd - bwd) <= rel_tol * scale;
}

}  // namespace motionparse::synth
