#pragma once

// Evaluation suites for depth, flow, scene flow, odometry and moving-object
// segmentation. All reports are plain aggregates over the valid pixels (or
// poses) and are independent of pixel order.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "motionparse/field.hpp"
#include "motionparse/geometry.hpp"

namespace motionparse::metrics {

struct DepthEvalReport {
  double abs_rel = 0, sq_rel = 0, rmse = 0, rmse_log = 0;
  double delta1 = 0, delta2 = 0, delta3 = 0;
  double scale = 1.0;  // factor applied to pred (1 without median scaling)
  std::size_t count = 0;
};

struct FlowEvalReport {
  double epe = 0;
  double f1_outlier_rate = 0;
  std::size_t count = 0;
};

struct SceneFlowSplit {
  // Mean absolute errors.
  double d1 = 0, d2 = 0, fl = 0;
  // Outlier rates (err > 3 px and err > 5% of the ground truth).
  double d1_outliers = 0, d2_outliers = 0, fl_outliers = 0;
  std::size_t count = 0;
};

struct SceneFlowReport {
  SceneFlowSplit bg, fg, all;
  bool has_split = false;
};

enum class RotationNorm { kPerFramePair, kPer100Units };

struct OdometryReport {
  double ate_5frame = 0;
  double t_err = 0;
  double r_err = 0;
  std::size_t snippets = 0;
  std::size_t pairs = 0;
};

struct SegReport {
  double pixel_acc = 0, mean_acc = 0, mean_iou = 0, fw_iou = 0;
  std::vector<double> class_iou;  // NaN for classes absent from gt and pred
};

inline constexpr double kOutlierPixels = 3.0;
inline constexpr double kOutlierRelative = 0.05;
inline constexpr int kSnippetLength = 5;

inline bool is_outlier(double err, double gt_magnitude) {
  return err > kOutlierPixels && err > kOutlierRelative * gt_magnitude;
}

namespace detail {

inline double median(std::vector<double> v) {
  const std::size_t n = v.size();
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(n / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (n % 2 == 1) return *mid;
  const double hi = *mid;
  const double lo = *std::max_element(v.begin(), mid);
  return 0.5 * (lo + hi);
}

inline bool valid_at(const MaskField* valid, int x, int y) { return valid == nullptr || (*valid)(x, y) != 0; }

inline void check_mask(const MaskField* m, const auto& ref, const char* what) {
  if (m != nullptr) require_same_grid(*m, ref, what);
}

}  // namespace detail

/// Depth errors over valid pixels, optionally after scaling pred to the
/// median of gt.
inline DepthEvalReport eval_depth(const ScalarField& pred, const ScalarField& gt, const MaskField* valid = nullptr,
                                  bool median_scale = true) {
  require_same_grid(pred, gt, "eval_depth");
  detail::check_mask(valid, gt, "eval_depth");
  std::vector<double> p, g;
  for (int y = 0; y < gt.height(); ++y)
    for (int x = 0; x < gt.width(); ++x) {
      if (!detail::valid_at(valid, x, y)) continue;
      const double gv = gt(x, y);
      const double pv = pred(x, y);
      if (!(gv > 0.0) || !std::isfinite(gv)) throw DomainError("eval_depth: ground truth must be positive on valid pixels");
      if (!(pv > 0.0) || !std::isfinite(pv)) throw DomainError("eval_depth: prediction must be positive on valid pixels");
      p.push_back(pv);
      g.push_back(gv);
    }
  if (g.empty()) throw DomainError("eval_depth: no valid pixels");
  DepthEvalReport r;
  r.count = g.size();
  if (median_scale) r.scale = detail::median(g) / detail::median(p);
  double se = 0, sl = 0;
  std::size_t d1 = 0, d2 = 0, d3 = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double d = p[i] * r.scale;
    const double e = g[i] - d;
    r.abs_rel += std::abs(e) / g[i];
    r.sq_rel += e * e / g[i];
    se += e * e;
    const double le = std::log(g[i]) - std::log(d);
    sl += le * le;
    const double ratio = std::max(g[i] / d, d / g[i]);
    d1 += ratio < 1.25;
    d2 += ratio < 1.25 * 1.25;
    d3 += ratio < 1.25 * 1.25 * 1.25;
  }
  const double n = static_cast<double>(g.size());
  r.abs_rel /= n;
  r.sq_rel /= n;
  r.rmse = std::sqrt(se / n);
  r.rmse_log = std::sqrt(sl / n);
  r.delta1 = static_cast<double>(d1) / n;
  r.delta2 = static_cast<double>(d2) / n;
  r.delta3 = static_cast<double>(d3) / n;
  return r;
}

/// Mean endpoint error and outlier rate over valid pixels.
inline FlowEvalReport eval_flow(const VectorField& pred, const VectorField& gt, const MaskField* valid = nullptr) {
  if (!pred.same_shape(gt) || gt.channels() != 2) throw DomainError("eval_flow: expected two matching 2-channel fields");
  detail::check_mask(valid, gt, "eval_flow");
  FlowEvalReport r;
  std::size_t outliers = 0;
  for (int y = 0; y < gt.height(); ++y)
    for (int x = 0; x < gt.width(); ++x) {
      if (!detail::valid_at(valid, x, y)) continue;
      const double err = std::hypot(pred(x, y, 0) - gt(x, y, 0), pred(x, y, 1) - gt(x, y, 1));
      r.epe += err;
      outliers += is_outlier(err, std::hypot(gt(x, y, 0), gt(x, y, 1)));
      ++r.count;
    }
  if (r.count == 0) throw DomainError("eval_flow: no valid pixels");
  r.epe /= static_cast<double>(r.count);
  r.f1_outlier_rate = static_cast<double>(outliers) / static_cast<double>(r.count);
  return r;
}

struct SceneFlowFields {
  ScalarField d1;  // disparity at t
  ScalarField d2;  // disparity at t+1, in the t frame
  VectorField flow;
};

/// D1/D2/FL in both mean-absolute and outlier forms; split by fg_mask when
/// given (nonzero = foreground).
inline SceneFlowReport eval_sceneflow(const SceneFlowFields& pred, const SceneFlowFields& gt,
                                      const MaskField* valid = nullptr, const MaskField* fg_mask = nullptr) {
  for (const auto* f : {&pred, &gt}) {
    require_same_grid(f->d1, gt.d1, "eval_sceneflow");
    require_same_grid(f->d2, gt.d1, "eval_sceneflow");
    require_same_grid(f->flow, gt.d1, "eval_sceneflow");
    if (f->d1.channels() != 1 || f->d2.channels() != 1 || f->flow.channels() != 2)
      throw DomainError("eval_sceneflow: disparities need 1 channel and flow 2");
  }
  detail::check_mask(valid, gt.d1, "eval_sceneflow");
  detail::check_mask(fg_mask, gt.d1, "eval_sceneflow");
  SceneFlowReport r;
  r.has_split = fg_mask != nullptr;
  std::array<std::array<std::size_t, 3>, 3> out{};  // [split][d1, d2, fl]
  auto add = [&](SceneFlowSplit& s, std::array<std::size_t, 3>& o, double e1, double e2, double ef, double g1,
                 double g2, double gf) {
    s.d1 += e1;
    s.d2 += e2;
    s.fl += ef;
    o[0] += is_outlier(e1, std::abs(g1));
    o[1] += is_outlier(e2, std::abs(g2));
    o[2] += is_outlier(ef, gf);
    ++s.count;
  };
  for (int y = 0; y < gt.d1.height(); ++y)
    for (int x = 0; x < gt.d1.width(); ++x) {
      if (!detail::valid_at(valid, x, y)) continue;
      const double e1 = std::abs(pred.d1(x, y) - gt.d1(x, y));
      const double e2 = std::abs(pred.d2(x, y) - gt.d2(x, y));
      const double ef = std::hypot(pred.flow(x, y, 0) - gt.flow(x, y, 0), pred.flow(x, y, 1) - gt.flow(x, y, 1));
      const double gf = std::hypot(gt.flow(x, y, 0), gt.flow(x, y, 1));
      add(r.all, out[2], e1, e2, ef, gt.d1(x, y), gt.d2(x, y), gf);
      if (fg_mask == nullptr) continue;
      if ((*fg_mask)(x, y) != 0)
        add(r.fg, out[1], e1, e2, ef, gt.d1(x, y), gt.d2(x, y), gf);
      else
        add(r.bg, out[0], e1, e2, ef, gt.d1(x, y), gt.d2(x, y), gf);
    }
  if (r.all.count == 0) throw DomainError("eval_sceneflow: no valid pixels");
  auto finish = [](SceneFlowSplit& s, const std::array<std::size_t, 3>& o) {
    if (s.count == 0) return;
    const double n = static_cast<double>(s.count);
    s.d1 /= n;
    s.d2 /= n;
    s.fl /= n;
    s.d1_outliers = static_cast<double>(o[0]) / n;
    s.d2_outliers = static_cast<double>(o[1]) / n;
    s.fl_outliers = static_cast<double>(o[2]) / n;
  };
  finish(r.bg, out[0]);
  finish(r.fg, out[1]);
  finish(r.all, out[2]);
  return r;
}

inline double rotation_angle(const Mat3<double>& r) {
  const double c = std::clamp((r(0, 0) + r(1, 1) + r(2, 2) - 1.0) * 0.5, -1.0, 1.0);
  return std::acos(c);
}

/// Trajectories are camera-to-world poses, one per frame.
///
/// ate_5frame: for every 5-frame window, pred positions are shifted so frame 0
/// coincides with gt, then sqrt(sum |t* - t'|^2) / 5; averaged over windows.
/// t_err, r_err: over consecutive relative motions, t_err in the same
/// root-sum-square form and r_err as the mean |angle(R') - angle(R)|. With
/// kPer100Units, r_err is instead the summed angle error in degrees per 100
/// units of gt path length.
inline OdometryReport eval_odometry(std::span<const Pose> pred, std::span<const Pose> gt,
                                    RotationNorm norm = RotationNorm::kPerFramePair) {
  if (pred.size() != gt.size()) throw DomainError("eval_odometry: trajectories differ in length");
  if (gt.size() < static_cast<std::size_t>(kSnippetLength))
    throw DomainError("eval_odometry: need at least 5 frames for ATE");
  OdometryReport r;
  for (std::size_t s = 0; s + kSnippetLength <= gt.size(); ++s) {
    const Point3 shift = gt[s].translation - pred[s].translation;
    double se = 0.0;
    for (std::size_t j = s; j < s + kSnippetLength; ++j) se += (gt[j].translation - (pred[j].translation + shift)).squared_norm();
    r.ate_5frame += std::sqrt(se) / kSnippetLength;
    ++r.snippets;
  }
  r.ate_5frame /= static_cast<double>(r.snippets);

  double st = 0.0, sr = 0.0, length = 0.0;
  for (std::size_t i = 0; i + 1 < gt.size(); ++i) {
    const Pose rg = pose_compose(pose_inverse(gt[i]), gt[i + 1]);
    const Pose rp = pose_compose(pose_inverse(pred[i]), pred[i + 1]);
    st += (rg.translation - rp.translation).squared_norm();
    sr += std::abs(rotation_angle(rp.rotation) - rotation_angle(rg.rotation));
    length += std::sqrt(rg.translation.squared_norm());
    ++r.pairs;
  }
  const double n = static_cast<double>(r.pairs);
  r.t_err = std::sqrt(st) / n;
  if (norm == RotationNorm::kPerFramePair) {
    r.r_err = sr / n;
  } else {
    if (!(length > 0.0)) throw DomainError("eval_odometry: ground-truth path has zero length");
    r.r_err = sr * (180.0 / M_PI) / length * 100.0;
  }
  return r;
}

/// Confusion-matrix scores over labels 0..num_classes-1. Classes absent from
/// the ground truth are left out of the class means.
inline SegReport eval_segmentation(const MaskField& pred, const MaskField& gt, const MaskField* valid = nullptr,
                                   int num_classes = 2) {
  require_same_grid(pred, gt, "eval_segmentation");
  detail::check_mask(valid, gt, "eval_segmentation");
  if (num_classes < 1) throw DomainError("eval_segmentation: need at least one class");
  const auto c = static_cast<std::size_t>(num_classes);
  std::vector<double> n(c * c, 0.0);  // n[i * c + j]: gt class i predicted as j
  std::size_t total = 0;
  for (int y = 0; y < gt.height(); ++y)
    for (int x = 0; x < gt.width(); ++x) {
      if (!detail::valid_at(valid, x, y)) continue;
      const std::size_t i = gt(x, y) != 0 && num_classes == 2 ? 1 : gt(x, y);
      const std::size_t j = pred(x, y) != 0 && num_classes == 2 ? 1 : pred(x, y);
      if (i >= c || j >= c) throw DomainError("eval_segmentation: label outside the class range");
      n[i * c + j] += 1.0;
      ++total;
    }
  if (total == 0) throw DomainError("eval_segmentation: no valid pixels");
  SegReport r;
  r.class_iou.assign(c, std::nan(""));
  double diag = 0.0, t_sum = 0.0;
  int present = 0;
  for (std::size_t i = 0; i < c; ++i) {
    double t = 0.0, col = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      t += n[i * c + j];
      col += n[j * c + i];
    }
    const double nii = n[i * c + i];
    const double uni = t + col - nii;
    if (uni > 0.0) r.class_iou[i] = nii / uni;
    diag += nii;
    t_sum += t;
    if (t == 0.0) continue;
    ++present;
    r.mean_acc += nii / t;
    r.mean_iou += nii / uni;
    r.fw_iou += t * nii / uni;
  }
  r.pixel_acc = diag / t_sum;
  r.mean_acc /= present;
  r.mean_iou /= present;
  r.fw_iou /= t_sum;
  return r;
}

}  // namespace motionparse::metrics
