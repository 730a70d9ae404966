#pragma once

// Training objectives: masked structural view synthesis, edge-aware
// second-order smoothness, rigid-region depth/flow consistency, occluded
// region flow consistency, and their multi-scale monocular and stereo sums.
//
// Every term is normalised by its active-pixel count (+ kLossEpsilon) so that
// weights transfer across resolutions. Masks V and S are plain doubles here;
// they never carry derivatives.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string_view>

#include "motionparse/geometry.hpp"
#include "motionparse/hmp.hpp"
#include "motionparse/imaging.hpp"

namespace motionparse::losses {

inline constexpr double kBeta = 0.85;
inline constexpr double kAlphaE = 10.0;
inline constexpr double kLossEpsilon = 1e-7;

/// Charbonnier width applied to every |residual| in the objectives while a
/// ResidualSmoothing guard is alive. Zero (the default) is the exact loss.
inline thread_local double residual_smoothing = 0.0;

class ResidualSmoothing {
 public:
  explicit ResidualSmoothing(double eps) : saved_(residual_smoothing) { residual_smoothing = eps; }
  ~ResidualSmoothing() { residual_smoothing = saved_; }
  ResidualSmoothing(const ResidualSmoothing&) = delete;
  ResidualSmoothing& operator=(const ResidualSmoothing&) = delete;

 private:
  double saved_;
};

template <class T>
T residual_abs(const T& x) {
  using std::abs;
  using std::sqrt;
  const double e = residual_smoothing;
  if (e > 0.0) return sqrt(x * x + e * e) - e;
  return abs(x);
}

struct LossWeights {
  double dvs = 0, fvs = 0, ds = 0, fs = 0, dc = 0, mc = 0, fc = 0;
  double cvs = 0, cs = 0;  // stereo

  static LossWeights from_vector(const std::array<double, 7>& l) {
    return {l[0], l[1], l[2], l[3], l[4], l[5], l[6], 0.0, 0.0};
  }
  std::array<double, 7> monocular_vector() const { return {dvs, fvs, ds, fs, dc, mc, fc}; }

  void validate() const {
    for (double w : {dvs, fvs, ds, fs, dc, mc, fc, cvs, cs})
      if (!(w >= 0.0) || !std::isfinite(w)) throw DomainError("LossWeights: weights must be finite and non-negative");
  }

  LossWeights scaled(double f) const {
    return {dvs * f, fvs * f, ds * f, fs * f, dc * f, mc * f, fc * f, cvs * f, cs * f};
  }
};

enum class Term : int { kDvs, kFvs, kDs, kFs, kDc, kMc, kFc, kCvs, kCs };
inline constexpr int kTermCount = 9;
inline constexpr std::array<std::string_view, kTermCount> kTermNames{"dvs", "fvs", "ds", "fs", "dc",
                                                                     "mc",  "fc",  "cvs", "cs"};

inline double weight_of(const LossWeights& w, Term t) {
  switch (t) {
    case Term::kDvs: return w.dvs;
    case Term::kFvs: return w.fvs;
    case Term::kDs: return w.ds;
    case Term::kFs: return w.fs;
    case Term::kDc: return w.dc;
    case Term::kMc: return w.mc;
    case Term::kFc: return w.fc;
    case Term::kCvs: return w.cvs;
    case Term::kCs: return w.cs;
  }
  return 0.0;
}

/// Smoothness terms of the monocular sum are scaled by 2^level; the stereo
/// terms are not.
inline double level_factor(Term t, int level) {
  return (t == Term::kDs || t == Term::kFs) ? std::ldexp(1.0, level) : 1.0;
}

struct TermRecord {
  std::array<double, kPyramidLevels> value{};
  std::array<double, kPyramidLevels> count{};
  std::array<bool, kPyramidLevels> empty_mask{};
};

struct LossBreakdown {
  LossWeights weights;
  std::array<TermRecord, kTermCount> terms{};
  double total = 0.0;

  const TermRecord& operator[](Term t) const { return terms[static_cast<std::size_t>(t)]; }
  TermRecord& operator[](Term t) { return terms[static_cast<std::size_t>(t)]; }

  /// Weighted sum recomputed from the stored per-level terms.
  double recompute_total() const {
    double acc = 0.0;
    for (int l = 0; l < kPyramidLevels; ++l)
      for (int t = 0; t < kTermCount; ++t) {
        const Term term = static_cast<Term>(t);
        acc += weight_of(weights, term) * level_factor(term, l) * terms[static_cast<std::size_t>(t)].value[static_cast<std::size_t>(l)];
      }
    return acc;
  }

  int nonzero_terms() const {
    int n = 0;
    for (const auto& r : terms) {
      bool nz = false;
      for (double v : r.value) nz = nz || v != 0.0;
      n += nz ? 1 : 0;
    }
    return n;
  }
};

template <class T>
struct LossValue {
  T value;
  double count;  // sum of mask weights
  bool empty;
};

// ---------------------------------------------------------------------------
// Individual terms

/// In-bounds weight of a sample position: 0 outside [0,W-1]x[0,H-1],
/// rising linearly to 1 one pixel inside the border. Samples whose flag is
/// false never contribute, and the weight is continuous in the position.
template <class T>
T border_weight(const T& u, const T& v, int width, int height) {
  T d = u;
  if (value_of(v) < value_of(d)) d = v;
  const T du = (width - 1.0) - u;
  if (value_of(du) < value_of(d)) d = du;
  const T dv = (height - 1.0) - v;
  if (value_of(dv) < value_of(d)) d = dv;
  if (value_of(d) <= 0.0) return T(0.0);
  if (value_of(d) >= 1.0) return T(1.0);
  return d;
}

/// Smallest mask weight in the replicated-border 3x3 window around (x, y).
template <class M>
M window_min(const Field<M>& mask, int x, int y) {
  const int w = mask.width();
  const int h = mask.height();
  M best = mask(x, y);
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) {
      const M& m = mask(std::clamp(x + dx, 0, w - 1), std::clamp(y + dy, 0, h - 1));
      if (value_of(m) < value_of(best)) best = m;
    }
  return best;
}

/// Sum_p [m(p)(1-beta)|I_t - I^| + m_w(p) beta (1 - SSIM)/2] / (Sum m + eps),
/// where m_w(p) is the smallest mask weight in the SSIM window, so masked-out
/// content never reaches the loss. With a full mask this is the plain
/// mask-weighted mean. An empty mask yields 0 and sets `empty`.
template <class T, class M>
LossValue<T> structural_matching_loss(const ScalarField& image_t, const Field<T>& image_hat, const Field<M>& mask,
                                      double beta = kBeta) {
  using std::abs;
  if (!image_t.same_shape(image_hat) || !image_t.same_grid(mask))
    throw DomainError("structural_matching_loss: shape mismatch");
  if (!(beta >= 0.0 && beta <= 1.0)) throw DomainError("structural_matching_loss: beta outside [0, 1]");
  M count(0.0);
  for (const M& m : mask.data()) count = count + m;
  if (value_of(count) < kLossEpsilon) return {T(0.0), value_of(count), true};

  const Field<T> target = cast_field<T>(image_t);
  const Field<T> ssim = ssim_map(target, image_hat);
  T acc(0.0);
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x) {
      const M& m = mask(x, y);
      if (value_of(m) == 0.0) continue;
      acc = acc + m * ((1.0 - beta) * residual_abs(image_hat(x, y) - image_t(x, y)));
      const M mw = window_min(mask, x, y);
      if (value_of(mw) != 0.0) acc = acc + mw * ((beta * 0.5) * (1.0 - ssim(x, y)));
    }
  return {acc / (count + kLossEpsilon), value_of(count), false};
}

/// Sum_p |lap O(p)| exp(-alpha_e |lap I(p)|) over channels of O, divided by
/// the pixel count.
template <class T>
T smoothness_loss(const Field<T>& field, const ScalarField& image, double alpha_e = kAlphaE) {
  using std::abs;
  require_same_grid(field, image, "smoothness_loss");
  const Field<T> lap_o = laplacian(field);
  const ScalarField lap_i = laplacian(image);
  T acc(0.0);
  for (int y = 0; y < field.height(); ++y)
    for (int x = 0; x < field.width(); ++x) {
      double edge = 0.0;
      for (int c = 0; c < image.channels(); ++c) edge += std::abs(lap_i(x, y, c));
      const double w = std::exp(-alpha_e * edge);
      for (int c = 0; c < field.channels(); ++c) acc = acc + w * residual_abs(lap_o(x, y, c));
    }
  return acc / static_cast<double>(field.pixels());
}

/// Per-pixel correspondences of one view pair at one resolution.
template <class T>
struct Correspondences {
  Field<T> rigid_u, rigid_v, rigid_depth;  // p_st and D^_s(p_st)
  MaskField rigid_valid;                   // point in front of source camera
  Field<T> flow_u, flow_v;                 // p_sf
};

template <class T>
Correspondences<T> correspondences(const Field<T>& depth_t, const Field<T>* flow_t_to_s, const BasicPose<T>& pose,
                                   const CameraIntrinsics& k) {
  const int w = depth_t.width();
  const int h = depth_t.height();
  Correspondences<T> c{Field<T>(w, h), Field<T>(w, h), Field<T>(w, h), MaskField(w, h, 1, 0), {}, {}};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto r = reproject_pixel<T>(x, y, depth_t(x, y), pose, k);
      c.rigid_u(x, y) = r.u;
      c.rigid_v(x, y) = r.v;
      c.rigid_depth(x, y) = r.depth;
      c.rigid_valid(x, y) = r.valid ? 1 : 0;
    }
  if (flow_t_to_s != nullptr) {
    require_same_grid(depth_t, *flow_t_to_s, "correspondences");
    c.flow_u = Field<T>(w, h);
    c.flow_v = Field<T>(w, h);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        c.flow_u(x, y) = (*flow_t_to_s)(x, y, 0) + double(x);
        c.flow_v(x, y) = (*flow_t_to_s)(x, y, 1) + double(y);
      }
  }
  return c;
}

/// Samples `source` at (u, v) per pixel; `weight` receives border_weight of
/// each sample position.
template <class T>
Field<T> synthesize(const ScalarField& source, const Field<T>& u, const Field<T>& v, Field<T>& weight) {
  Field<T> out(u.width(), u.height());
  weight = Field<T>(u.width(), u.height());
  for (int y = 0; y < u.height(); ++y)
    for (int x = 0; x < u.width(); ++x) {
      out(x, y) = bilinear_sample(source, u(x, y), v(x, y)).value;
      weight(x, y) = border_weight(u(x, y), v(x, y), source.width(), source.height());
    }
  return out;
}

template <class T>
struct ConsistencyLosses {
  LossValue<T> depth;  // L_dc
  LossValue<T> flow;   // L_mc
};

/// Rigid-region depth and flow consistency weighted by V (1 - S) and the
/// border weight of p_sf.
template <class T>
ConsistencyLosses<T> motion_consistency_losses(const Correspondences<T>& c, const Field<T>& depth_s,
                                               const ScalarField& v, const ScalarField& s, bool want_depth = true,
                                               bool want_flow = true) {
  using std::abs;
  const int w = v.width();
  const int h = v.height();
  T acc_d(0.0), acc_m(0.0), total(0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double mv = v(x, y) * (1.0 - s(x, y));
      if (mv == 0.0 || !c.rigid_valid(x, y)) continue;
      const T& usf = c.flow_u(x, y);
      const T& vsf = c.flow_v(x, y);
      const T m = mv * border_weight(usf, vsf, w, h);
      if (value_of(m) == 0.0) continue;
      total = total + m;
      if (want_depth) {
        const auto ds = bilinear_sample(depth_s, usf, vsf);
        acc_d = acc_d + m * residual_abs(ds.value - c.rigid_depth(x, y));
      }
      if (want_flow) acc_m = acc_m + m * (residual_abs(usf - c.rigid_u(x, y)) + residual_abs(vsf - c.rigid_v(x, y)));
    }
  const double count = value_of(total);
  const bool empty = count < kLossEpsilon;
  const T norm = 1.0 / (total + kLossEpsilon);
  return {{empty ? T(0.0) : acc_d * norm, count, empty}, {empty ? T(0.0) : acc_m * norm, count, empty}};
}

/// Sum (1 - V) |p_sf - p_st| / (Sum (1 - V) + eps).
template <class T>
LossValue<T> occluded_flow_consistency(const Correspondences<T>& c, const ScalarField& v) {
  using std::abs;
  T acc(0.0);
  double count = 0.0;
  for (int y = 0; y < v.height(); ++y)
    for (int x = 0; x < v.width(); ++x) {
      const double m = 1.0 - v(x, y);
      if (m == 0.0 || !c.rigid_valid(x, y)) continue;
      count += m;
      acc = acc + m * (residual_abs(c.flow_u(x, y) - c.rigid_u(x, y)) + residual_abs(c.flow_v(x, y) - c.rigid_v(x, y)));
    }
  if (count < kLossEpsilon) return {T(0.0), count, true};
  return {acc / (count + kLossEpsilon), count, false};
}

// Convenience overloads on plain fields.

inline ConsistencyLosses<double> motion_consistency_losses(const ScalarField& depth_t, const ScalarField& depth_s,
                                                           const VectorField& flow_t_to_s, const Pose& pose,
                                                           const CameraIntrinsics& k, const ScalarField& v,
                                                           const ScalarField& s) {
  const auto c = correspondences<double>(depth_t, &flow_t_to_s, pose, k);
  return motion_consistency_losses(c, depth_s, v, s);
}

inline LossValue<double> occluded_flow_consistency(const VectorField& flow_t_to_s, const ScalarField& depth_t,
                                                   const Pose& pose, const CameraIntrinsics& k,
                                                   const ScalarField& v) {
  const auto c = correspondences<double>(depth_t, &flow_t_to_s, pose, k);
  return occluded_flow_consistency(c, v);
}

// ---------------------------------------------------------------------------
// Multi-scale totals

struct LevelMasks {
  ScalarField v;
  ScalarField s;
};
using MaskPyramid = std::array<LevelMasks, kPyramidLevels>;

/// Runs the motion parser independently at every pyramid level.
inline MaskPyramid compute_masks(const Pyramid<double>& depth_t, const Pyramid<double>& depth_s,
                                 const Pyramid<double>& flow_t_to_s, const Pyramid<double>& flow_s_to_t,
                                 const Pose& pose, const CameraIntrinsics& k, double alpha_s) {
  MaskPyramid out;
  for (int l = 0; l < kPyramidLevels; ++l) {
    const auto L = static_cast<std::size_t>(l);
    const CameraIntrinsics kl = k.at_level(l);
    const auto parsed = hmp::parse({depth_t[L], depth_s[L], flow_t_to_s[L], flow_s_to_t[L], pose, kl, alpha_s});
    out[L] = {parsed.v, parsed.s};
  }
  return out;
}

/// Masks with V = 1 and S = 0 everywhere.
inline MaskPyramid trivial_masks(const CameraIntrinsics& k) {
  MaskPyramid out;
  for (int l = 0; l < kPyramidLevels; ++l) {
    const CameraIntrinsics kl = k.at_level(l);
    out[static_cast<std::size_t>(l)] = {ScalarField(kl.width, kl.height, 1, 1.0), ScalarField(kl.width, kl.height, 1, 0.0)};
  }
  return out;
}

template <class T>
struct MonocularInputs {
  const ImagePyramid* image_t = nullptr;
  const ImagePyramid* image_s = nullptr;
  const Pyramid<T>* depth_t = nullptr;
  const Pyramid<T>* depth_s = nullptr;
  const Pyramid<T>* flow_t_to_s = nullptr;
  BasicPose<T> pose;
  CameraIntrinsics k;  // level 0
  const MaskPyramid* masks = nullptr;
};

struct StereoInputs {
  const ImagePyramid* image_c = nullptr;
  Pose pose;  // T_{t->c}, fixed
};

namespace detail {

inline void record(LossBreakdown* b, Term t, int level, double value, double count, bool empty) {
  if (b == nullptr) return;
  auto& r = (*b)[t];
  r.value[static_cast<std::size_t>(level)] = value;
  r.count[static_cast<std::size_t>(level)] = count;
  r.empty_mask[static_cast<std::size_t>(level)] = empty;
}

/// weight * border * valid, pixel-wise.
template <class T>
Field<T> combine_masks(const ScalarField& weight, const Field<T>& border, const MaskField* valid = nullptr) {
  Field<T> out(weight.width(), weight.height());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const bool ok = weight.data()[i] != 0.0 && (valid == nullptr || valid->data()[i] != 0);
    out.data()[i] = ok ? weight.data()[i] * border.data()[i] : T(0.0);
  }
  return out;
}

template <class T>
BasicPose<T> lift_pose(const Pose& p) {
  BasicPose<T> r;
  for (std::size_t i = 0; i < 9; ++i) r.rotation.m[i] = T(p.rotation.m[i]);
  r.translation = {T(p.translation.x), T(p.translation.y), T(p.translation.z)};
  return r;
}

template <class T>
void check_levels(const Pyramid<T>& p, const CameraIntrinsics& k, const char* what) {
  for (int l = 0; l < kPyramidLevels; ++l) {
    const CameraIntrinsics kl = k.at_level(l);
    const auto& f = p[static_cast<std::size_t>(l)];
    if (f.width() != kl.width || f.height() != kl.height)
      throw DomainError(std::string("total loss: pyramid level mismatch in ") + what + " at level " + std::to_string(l));
  }
}

}  // namespace detail

/// Weighted multi-scale monocular objective for one direction (t -> s).
/// Terms with zero weight are skipped and reported as zero.
template <class T>
T monocular_objective(const MonocularInputs<T>& in, const LossWeights& w, LossBreakdown* breakdown = nullptr,
                      const StereoInputs* stereo = nullptr) {
  w.validate();
  detail::check_levels(*in.image_t, in.k, "image_t");
  detail::check_levels(*in.image_s, in.k, "image_s");
  detail::check_levels(*in.depth_t, in.k, "depth_t");
  detail::check_levels(*in.depth_s, in.k, "depth_s");
  detail::check_levels(*in.flow_t_to_s, in.k, "flow_t_to_s");
  if (stereo != nullptr) detail::check_levels(*stereo->image_c, in.k, "image_c");
  if (breakdown != nullptr) *breakdown = LossBreakdown{w, {}, 0.0};

  const bool need_flow = w.fvs > 0 || w.dc > 0 || w.mc > 0 || w.fc > 0;
  const bool need_rigid = w.dvs > 0 || need_flow;
  T total(0.0);
  for (int l = 0; l < kPyramidLevels; ++l) {
    const auto L = static_cast<std::size_t>(l);
    const CameraIntrinsics kl = in.k.at_level(l);
    const ScalarField& it = (*in.image_t)[L];
    const ScalarField& is = (*in.image_s)[L];
    const Field<T>& dt = (*in.depth_t)[L];
    const Field<T>& flow = (*in.flow_t_to_s)[L];
    const LevelMasks& masks = (*in.masks)[L];
    const double two_l = std::ldexp(1.0, l);

    Correspondences<T> c;
    if (need_rigid) c = correspondences<T>(dt, need_flow ? &flow : nullptr, in.pose, kl);

    if (w.dvs > 0) {
      Field<T> inb;
      const Field<T> synth = synthesize(is, c.rigid_u, c.rigid_v, inb);
      ScalarField vd(it.width(), it.height());
      for (std::size_t i = 0; i < vd.size(); ++i) vd.data()[i] = masks.v.data()[i] * (1.0 - masks.s.data()[i]);
      const auto r = structural_matching_loss(it, synth, detail::combine_masks(vd, inb, &c.rigid_valid));
      detail::record(breakdown, Term::kDvs, l, value_of(r.value), r.count, r.empty);
      total = total + w.dvs * r.value;
    }
    if (w.fvs > 0) {
      Field<T> inb;
      const Field<T> synth = synthesize(is, c.flow_u, c.flow_v, inb);
      const auto r = structural_matching_loss(it, synth, detail::combine_masks(masks.v, inb));
      detail::record(breakdown, Term::kFvs, l, value_of(r.value), r.count, r.empty);
      total = total + w.fvs * r.value;
    }
    if (w.ds > 0) {
      const T r = smoothness_loss(dt, it);
      detail::record(breakdown, Term::kDs, l, value_of(r), static_cast<double>(dt.pixels()), false);
      total = total + (two_l * w.ds) * r;
    }
    if (w.fs > 0) {
      // Level flow (level pixels) over the full-resolution width.
      const T r = smoothness_loss(flow, it) * (1.0 / in.k.width);
      detail::record(breakdown, Term::kFs, l, value_of(r), static_cast<double>(flow.pixels()), false);
      total = total + (two_l * w.fs) * r;
    }
    if (w.dc > 0 || w.mc > 0) {
      const auto r = motion_consistency_losses(c, (*in.depth_s)[L], masks.v, masks.s, w.dc > 0, w.mc > 0);
      if (w.dc > 0) {
        detail::record(breakdown, Term::kDc, l, value_of(r.depth.value), r.depth.count, r.depth.empty);
        total = total + w.dc * r.depth.value;
      }
      if (w.mc > 0) {
        detail::record(breakdown, Term::kMc, l, value_of(r.flow.value), r.flow.count, r.flow.empty);
        total = total + w.mc * r.flow.value;
      }
    }
    if (w.fc > 0) {
      const auto r = occluded_flow_consistency(c, masks.v);
      detail::record(breakdown, Term::kFc, l, value_of(r.value), r.count, r.empty);
      total = total + w.fc * r.value;
    }
    if (stereo != nullptr && w.cvs > 0) {
      const auto cs = correspondences<T>(dt, nullptr, detail::lift_pose<T>(stereo->pose), kl);
      Field<T> inb;
      const Field<T> synth = synthesize((*stereo->image_c)[L], cs.rigid_u, cs.rigid_v, inb);
      const auto r = structural_matching_loss(it, synth,
                                              detail::combine_masks(ScalarField(it.width(), it.height(), 1, 1.0), inb, &cs.rigid_valid));
      detail::record(breakdown, Term::kCvs, l, value_of(r.value), r.count, r.empty);
      total = total + w.cvs * r.value;
    }
    if (stereo != nullptr && w.cs > 0) {
      const T r = smoothness_loss(dt, it);
      detail::record(breakdown, Term::kCs, l, value_of(r), static_cast<double>(dt.pixels()), false);
      total = total + w.cs * r;
    }
  }
  if (breakdown != nullptr) breakdown->total = value_of(total);
  return total;
}

/// Monocular total on plain fields.
inline LossBreakdown total_monocular_loss(const MonocularInputs<double>& in, const LossWeights& w) {
  LossBreakdown b;
  LossWeights mono = w;
  mono.cvs = 0.0;
  mono.cs = 0.0;
  monocular_objective(in, mono, &b);
  return b;
}

/// Monocular total plus stereo view synthesis and smoothness terms driven by
/// depth alone under the known stereo pose.
inline LossBreakdown total_stereo_loss(const MonocularInputs<double>& in, const StereoInputs& stereo,
                                       const LossWeights& w) {
  LossBreakdown b;
  monocular_objective(in, w, &b, &stereo);
  return b;
}

}  // namespace motionparse::losses
