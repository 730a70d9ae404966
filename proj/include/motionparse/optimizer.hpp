#pragma once

// Direct first-order optimisation of per-pixel depth, camera pose and
// per-pixel flow under the loss stack, driven by a stage-wise schedule.

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "motionparse/autodiff.hpp"
#include "motionparse/field.hpp"
#include "motionparse/geometry.hpp"
#include "motionparse/hmp.hpp"
#include "motionparse/imaging.hpp"
#include "motionparse/losses.hpp"

namespace motionparse::opt {

inline constexpr double kDisparityCap = 0.3;
inline constexpr double kAlphaSReset = 0.01;
inline constexpr double kDivergenceLimit = 1e6;
inline constexpr double kRelativeTolerance = 1e-6;
inline constexpr int kConvergenceWindow = 10;
inline constexpr int kMaxIterations = 2000;
inline constexpr int kMaxHalvings = 5;

// ---------------------------------------------------------------------------
// Depth parameterisation

namespace detail {
// Keeps exp(-p) finite; the mapping stays total and strictly positive.
inline constexpr double kParamFloor = -600.0;

template <class T>
T clamp_param(const T& p) {
  return value_of(p) < kParamFloor ? T(kParamFloor) : p;
}
}  // namespace detail

/// 1 / (0.3 sigmoid(p)) = (1 + exp(-p)) / 0.3.
template <class T>
T raw_depth(const T& param) {
  using std::exp;
  return (1.0 + exp(-detail::clamp_param(param))) * (1.0 / kDisparityCap);
}

template <class T>
Field<T> raw_depth_field(const Field<T>& params) {
  Field<T> out(params.width(), params.height(), params.channels());
  for (std::size_t i = 0; i < params.size(); ++i) out.data()[i] = raw_depth(params.data()[i]);
  return out;
}

template <class T>
T field_mean(const Field<T>& f) {
  T acc(0.0);
  for (const auto& x : f.data()) acc = acc + x;
  return acc * (1.0 / static_cast<double>(f.size()));
}

/// Disparity 0.3 sigmoid(p), depth = 1 / disparity, divided by its mean and
/// multiplied by `scale`.
template <class T>
Field<T> decode_depth(const Field<T>& params, double scale = 1.0) {
  Field<T> raw = raw_depth_field(params);
  const T f = scale / field_mean(raw);
  for (auto& x : raw.data()) x = x * f;
  return raw;
}

/// Both frames share the target frame's normalisation so their relative
/// scale is preserved.
template <class T>
std::pair<Field<T>, Field<T>> decode_depth_pair(const Field<T>& params_t, const Field<T>& params_s, double scale) {
  Field<T> dt = raw_depth_field(params_t);
  Field<T> ds = raw_depth_field(params_s);
  const T f = scale / field_mean(dt);
  for (auto& x : dt.data()) x = x * f;
  for (auto& x : ds.data()) x = x * f;
  return {std::move(dt), std::move(ds)};
}

inline double logit(double q) { return std::log(q / (1.0 - q)); }

/// Inverse of raw_depth for depths above 1/0.3.
inline double encode_raw_depth(double raw) {
  if (!(raw > 1.0 / kDisparityCap)) throw DomainError("encode_depth: raw depth must exceed 1/0.3");
  return logit(1.0 / (kDisparityCap * raw));
}

struct EncodedDepth {
  ScalarField params_t, params_s;
  double scale = 1.0;
};

/// Parameters whose decoded pair reproduces (D_t, D_s). The raw depths are
/// rescaled so the nearest point sits at disparity 0.2.
inline EncodedDepth encode_depth_pair(const ScalarField& depth_t, const ScalarField& depth_s) {
  hmp::check_depth(depth_t, "encode_depth_pair");
  hmp::check_depth(depth_s, "encode_depth_pair");
  double lo = std::numeric_limits<double>::infinity();
  for (double d : depth_t.data()) lo = std::min(lo, d);
  for (double d : depth_s.data()) lo = std::min(lo, d);
  const double c = 5.0 / lo;
  EncodedDepth e{ScalarField(depth_t.width(), depth_t.height()), ScalarField(depth_s.width(), depth_s.height()),
                 field_mean(depth_t)};
  for (std::size_t i = 0; i < depth_t.size(); ++i) e.params_t.data()[i] = encode_raw_depth(c * depth_t.data()[i]);
  for (std::size_t i = 0; i < depth_s.size(); ++i) e.params_s.data()[i] = encode_raw_depth(c * depth_s.data()[i]);
  return e;
}

// ---------------------------------------------------------------------------
// State

struct SceneState {
  ScalarField depth_t_params, depth_s_params;
  Twist twist{};
  VectorField flow_t_to_s, flow_s_to_t;
  double alpha_s = 0.0;
  double depth_scale = 1.0;  // fixed gauge: mean of decoded D_t

  std::pair<ScalarField, ScalarField> depths() const {
    return decode_depth_pair(depth_t_params, depth_s_params, depth_scale);
  }
  Pose pose() const { return pose_from_twist(twist); }
};

/// Constant depth, identity pose, zero flow.
inline SceneState smooth_init(const CameraIntrinsics& k, double depth_scale = 1.0) {
  k.validate();
  SceneState s;
  s.depth_t_params = ScalarField(k.width, k.height, 1, 0.0);
  s.depth_s_params = ScalarField(k.width, k.height, 1, 0.0);
  s.flow_t_to_s = VectorField(k.width, k.height, 2, 0.0);
  s.flow_s_to_t = VectorField(k.width, k.height, 2, 0.0);
  s.depth_scale = depth_scale;
  return s;
}

inline SceneState state_from_fields(const ScalarField& depth_t, const ScalarField& depth_s, const Pose& pose,
                                    const VectorField& flow_t_to_s, const VectorField& flow_s_to_t) {
  require_same_grid(depth_t, depth_s, "state_from_fields");
  require_same_grid(depth_t, flow_t_to_s, "state_from_fields");
  require_same_grid(depth_t, flow_s_to_t, "state_from_fields");
  auto e = encode_depth_pair(depth_t, depth_s);
  SceneState s;
  s.depth_t_params = std::move(e.params_t);
  s.depth_s_params = std::move(e.params_s);
  s.depth_scale = e.scale;
  s.twist = pose_log(pose);
  s.flow_t_to_s = flow_t_to_s;
  s.flow_s_to_t = flow_s_to_t;
  return s;
}

struct FreeBlocks {
  bool depth = false;
  bool pose = false;
  bool flow = false;

  static FreeBlocks all() { return {true, true, true}; }
};

/// Offsets of each block in the flattened parameter vector
/// [depth_t | depth_s | twist | flow_t_to_s | flow_s_to_t].
struct Layout {
  std::size_t n = 0;  // pixels
  std::size_t depth_t = 0, depth_s = 0, twist = 0, flow_ts = 0, flow_st = 0, size = 0;

  explicit Layout(const SceneState& s) : n(s.depth_t_params.size()) {
    depth_s = n;
    twist = 2 * n;
    flow_ts = twist + 6;
    flow_st = flow_ts + 2 * n;
    size = flow_st + 2 * n;
  }
  bool is_free(std::size_t i, const FreeBlocks& f) const {
    if (i < twist) return f.depth;
    if (i < flow_ts) return f.pose;
    return f.flow;
  }
};

inline std::vector<double> flatten(const SceneState& s) {
  const Layout l(s);
  std::vector<double> x(l.size);
  std::copy(s.depth_t_params.data().begin(), s.depth_t_params.data().end(), x.begin() + static_cast<std::ptrdiff_t>(l.depth_t));
  std::copy(s.depth_s_params.data().begin(), s.depth_s_params.data().end(), x.begin() + static_cast<std::ptrdiff_t>(l.depth_s));
  std::copy(s.twist.begin(), s.twist.end(), x.begin() + static_cast<std::ptrdiff_t>(l.twist));
  std::copy(s.flow_t_to_s.data().begin(), s.flow_t_to_s.data().end(), x.begin() + static_cast<std::ptrdiff_t>(l.flow_ts));
  std::copy(s.flow_s_to_t.data().begin(), s.flow_s_to_t.data().end(), x.begin() + static_cast<std::ptrdiff_t>(l.flow_st));
  return x;
}

inline void unflatten(std::span<const double> x, SceneState& s) {
  const Layout l(s);
  if (x.size() != l.size) throw DomainError("unflatten: parameter vector has the wrong length");
  auto at = [&](std::size_t off) { return x.begin() + static_cast<std::ptrdiff_t>(off); };
  std::copy(at(l.depth_t), at(l.depth_s), s.depth_t_params.data().begin());
  std::copy(at(l.depth_s), at(l.twist), s.depth_s_params.data().begin());
  std::copy(at(l.twist), at(l.flow_ts), s.twist.begin());
  std::copy(at(l.flow_ts), at(l.flow_st), s.flow_t_to_s.data().begin());
  std::copy(at(l.flow_st), x.end(), s.flow_s_to_t.data().begin());
}

// ---------------------------------------------------------------------------
// Differentiation

/// The state lifted onto the tape; frozen blocks are constants.
struct StateVars {
  Field<ad::Var> depth_t_params, depth_s_params;
  std::array<ad::Var, 6> twist;
  Field<ad::Var> flow_t_to_s, flow_s_to_t;
  double depth_scale = 1.0;
};

using VarObjective = std::function<ad::Var(const StateVars&)>;

struct GradientResult {
  double value = 0.0;
  std::vector<double> grad;  // flattened layout; zero on frozen blocks
};

/// Reverse-mode gradient of `objective` with respect to the free blocks.
inline GradientResult gradient(const VarObjective& objective, const SceneState& state,
                               const FreeBlocks& free = FreeBlocks::all()) {
  ad::TapeScope scope;
  std::vector<std::int32_t> leaves;
  auto lift = [&](const Field<double>& f, bool is_free) {
    Field<ad::Var> out(f.width(), f.height(), f.channels());
    for (std::size_t i = 0; i < f.size(); ++i) {
      out.data()[i] = is_free ? ad::Var::make_leaf(f.data()[i]) : ad::Var(f.data()[i]);
      leaves.push_back(out.data()[i].index());
    }
    return out;
  };
  StateVars v;
  v.depth_t_params = lift(state.depth_t_params, free.depth);
  v.depth_s_params = lift(state.depth_s_params, free.depth);
  for (std::size_t i = 0; i < 6; ++i) {
    v.twist[i] = free.pose ? ad::Var::make_leaf(state.twist[i]) : ad::Var(state.twist[i]);
    leaves.push_back(v.twist[i].index());
  }
  v.flow_t_to_s = lift(state.flow_t_to_s, free.flow);
  v.flow_s_to_t = lift(state.flow_s_to_t, free.flow);
  v.depth_scale = state.depth_scale;

  const ad::Var out = objective(v);
  if (!std::isfinite(out.value())) throw DomainError("gradient: objective is not finite");
  GradientResult r{out.value(), std::vector<double>(leaves.size(), 0.0)};
  if (out.is_constant()) return r;
  const auto& adj = scope.tape().adjoints(out.index());
  for (std::size_t i = 0; i < leaves.size(); ++i)
    if (leaves[i] >= 0) r.grad[i] = adj[static_cast<std::size_t>(leaves[i])];
  return r;
}

// ---------------------------------------------------------------------------
// Problem and objective

struct Frames {
  ScalarField image_t, image_s;
  std::optional<ScalarField> image_c;
  Pose stereo_pose;  // T_{t->c}
  CameraIntrinsics k;
};

class Problem {
 public:
  explicit Problem(Frames frames) : frames_(std::move(frames)) {
    frames_.k.validate();
    if (frames_.image_t.width() != frames_.k.width || frames_.image_t.height() != frames_.k.height)
      throw DomainError("Problem: image size does not match the intrinsics");
    require_same_grid(frames_.image_t, frames_.image_s, "Problem");
    pyr_t_ = build_pyramid(frames_.image_t);
    pyr_s_ = build_pyramid(frames_.image_s);
    if (frames_.image_c) {
      require_same_grid(frames_.image_t, *frames_.image_c, "Problem");
      pyr_c_ = build_pyramid(*frames_.image_c);
    }
  }

  const Frames& frames() const { return frames_; }
  const CameraIntrinsics& k() const { return frames_.k; }
  const ImagePyramid& pyramid_t() const { return pyr_t_; }
  const ImagePyramid& pyramid_s() const { return pyr_s_; }
  const ImagePyramid* pyramid_c() const { return frames_.image_c ? &pyr_c_ : nullptr; }

 private:
  Frames frames_;
  ImagePyramid pyr_t_, pyr_s_, pyr_c_;
};

/// Parser masks for both directions (t -> s and s -> t).
struct StageMasks {
  losses::MaskPyramid forward, backward;
};

/// Whether a weight vector touches anything the flow fields influence.
inline bool uses_flow(const losses::LossWeights& w) { return w.fvs > 0 || w.fs > 0 || w.dc > 0 || w.mc > 0 || w.fc > 0; }

/// Runs the parser per level from the current state. Stages with no
/// flow-coupled term use V = 1, S = 0 so that they do not depend on flow.
inline StageMasks compute_stage_masks(const Problem& p, const SceneState& s, const losses::LossWeights& w,
                                      double alpha_s) {
  if (!uses_flow(w)) return {losses::trivial_masks(p.k()), losses::trivial_masks(p.k())};
  const auto [dt, ds] = s.depths();
  const auto pdt = build_pyramid(dt);
  const auto pds = build_pyramid(ds);
  const auto fts = build_flow_pyramid(s.flow_t_to_s);
  const auto fst = build_flow_pyramid(s.flow_s_to_t);
  const Pose pose = s.pose();
  return {losses::compute_masks(pdt, pds, fts, fst, pose, p.k(), alpha_s),
          losses::compute_masks(pds, pdt, fst, fts, pose_inverse(pose), p.k(), alpha_s)};
}

struct ObjectiveParts {
  losses::LossBreakdown forward, backward;
  double total = 0.0;
};

/// Sum of the t -> s objective and the mirrored s -> t objective, evaluated
/// in the mean-normalised gauge (mean D_t = 1, translation / depth_scale) so
/// that loss values do not depend on the scene's unit. Stereo terms pair the
/// target frame with its stereo partner.
template <class T>
T scene_objective(const Problem& p, const StageMasks& masks, const losses::LossWeights& w,
                  const Field<T>& depth_t_params, const Field<T>& depth_s_params, const std::array<T, 6>& twist,
                  const Field<T>& flow_t_to_s, const Field<T>& flow_s_to_t, double depth_scale,
                  ObjectiveParts* parts = nullptr) {
  const bool stereo = w.cvs > 0 || w.cs > 0;
  if (stereo && p.pyramid_c() == nullptr) throw DomainError("objective: stereo weights need a stereo image");
  if (!(depth_scale > 0.0)) throw DomainError("objective: depth_scale must be positive");
  const auto [dt, ds] = decode_depth_pair(depth_t_params, depth_s_params, 1.0);
  const Pyramid<T> pdt = build_pyramid(dt);
  const Pyramid<T> pds = build_pyramid(ds);
  const bool flow = uses_flow(w);
  // Flow pyramids are only built when a term reads them.
  Pyramid<T> fts, fst;
  if (flow) {
    fts = build_flow_pyramid(flow_t_to_s);
    fst = build_flow_pyramid(flow_s_to_t);
  } else {
    for (int l = 0; l < kPyramidLevels; ++l) {
      const auto kl = p.k().at_level(l);
      fts[static_cast<std::size_t>(l)] = Field<T>(kl.width, kl.height, 2, T(0.0));
    }
    fst = fts;
  }
  std::array<T, 6> xi = twist;
  for (std::size_t i = 0; i < 3; ++i) xi[i] = xi[i] * (1.0 / depth_scale);
  const BasicPose<T> pose = pose_from_twist(xi);
  const BasicPose<T> inv = pose_inverse(pose);

  losses::MonocularInputs<T> fwd{&p.pyramid_t(), &p.pyramid_s(), &pdt, &pds, &fts, pose, p.k(), &masks.forward};
  losses::MonocularInputs<T> bwd{&p.pyramid_s(), &p.pyramid_t(), &pds, &pdt, &fst, inv, p.k(), &masks.backward};
  Pose stereo_pose = p.frames().stereo_pose;
  stereo_pose.translation = (1.0 / depth_scale) * stereo_pose.translation;
  losses::StereoInputs st{p.pyramid_c(), stereo_pose};
  losses::LossWeights wb = w;
  wb.cvs = 0.0;
  wb.cs = 0.0;
  const T a = losses::monocular_objective(fwd, w, parts ? &parts->forward : nullptr, stereo ? &st : nullptr);
  const T b = losses::monocular_objective(bwd, wb, parts ? &parts->backward : nullptr);
  const T total = a + b;
  if (parts != nullptr) parts->total = value_of(total);
  return total;
}

inline double evaluate(const Problem& p, const StageMasks& masks, const losses::LossWeights& w, const SceneState& s,
                       ObjectiveParts* parts = nullptr) {
  return scene_objective<double>(p, masks, w, s.depth_t_params, s.depth_s_params, s.twist, s.flow_t_to_s,
                                 s.flow_s_to_t, s.depth_scale, parts);
}

inline VarObjective make_objective(const Problem& p, const StageMasks& masks, const losses::LossWeights& w) {
  return [&p, &masks, w](const StateVars& v) {
    return scene_objective<ad::Var>(p, masks, w, v.depth_t_params, v.depth_s_params, v.twist, v.flow_t_to_s,
                                    v.flow_s_to_t, v.depth_scale);
  };
}

// ---------------------------------------------------------------------------
// Schedule

struct LearningRates {
  double depth = 1e-3;
  double pose = 5e-5;
  double flow = 1.0;
  // Per-pixel gradients go through sum_j B_j B_j, B_j a Gaussian of width
  // smoothing_sigmas[j]. Empty leaves them unsmoothed.
  std::vector<double> smoothing_sigmas = {1.0, 2.0, 4.0, 8.0};
};

struct Stage {
  std::string name;
  losses::LossWeights weights;
  double alpha_s = 0.0;
  FreeBlocks free;
  LearningRates lr;
  int max_iters = kMaxIterations;
  double rel_tol = kRelativeTolerance;
  int window = kConvergenceWindow;
  bool init_flow_from_rigid = false;
  std::vector<double> continuation = {1e-2, 1e-3};  // residual smoothing ladder
};

struct StageSchedule {
  std::string profile;
  std::vector<Stage> stages;
};

inline constexpr std::array<double, 7> kStageDepthPose{1, 0, 1, 0, 0, 0, 0};
inline constexpr std::array<double, 7> kStageFlow{0, 1, 0, 1, 0, 0, 0};
inline constexpr std::array<double, 7> kStageDepthPoseGuided{1, 0, 1, 0, 0.05, 0.25, 0};
inline constexpr std::array<double, 7> kStageFlowGuided{0, 1, 0, 1, 0, 0, 0.005};
inline constexpr int kAlternations = 2;
inline constexpr double kStereoCvs = 4.0;
inline constexpr double kStereoCs = 10.0;
inline constexpr double kStereoFc = 0.02;

/// Depth+pose, flow, then the guided pair alternated twice with alpha_s reset.
inline Stage make_stage(std::string name, const std::array<double, 7>& w, double alpha_s, FreeBlocks free) {
  Stage st;
  st.name = std::move(name);
  st.weights = losses::LossWeights::from_vector(w);
  st.alpha_s = alpha_s;
  st.free = free;
  return st;
}

inline StageSchedule mono_schedule() {
  StageSchedule s{"mono", {}};
  const FreeBlocks dp{true, true, false};
  const FreeBlocks fl{false, false, true};
  s.stages.push_back(make_stage("depth-pose", kStageDepthPose, 0.0, dp));
  Stage flow = make_stage("flow", kStageFlow, 0.0, fl);
  flow.init_flow_from_rigid = true;
  s.stages.push_back(flow);
  for (int i = 0; i < kAlternations; ++i) {
    const std::string n = std::to_string(i + 1);
    s.stages.push_back(make_stage("depth-pose-guided-" + n, kStageDepthPoseGuided, kAlphaSReset, dp));
    s.stages.push_back(make_stage("flow-guided-" + n, kStageFlowGuided, kAlphaSReset, fl));
  }
  return s;
}

/// The mono schedule with the stereo view added to every depth stage and
/// the stereo occluded-flow weight.
inline StageSchedule stereo_schedule() {
  StageSchedule s = mono_schedule();
  s.profile = "stereo";
  for (auto& st : s.stages) {
    if (st.free.depth) {
      st.weights.cvs = kStereoCvs;
      st.weights.cs = kStereoCs;
    }
    if (st.weights.fc > 0) st.weights.fc = kStereoFc;
  }
  return s;
}

inline StageSchedule schedule_by_name(const std::string& name) {
  if (name == "mono") return mono_schedule();
  if (name == "stereo") return stereo_schedule();
  throw DomainError("unknown schedule profile '" + name + "' (expected mono or stereo)");
}

// ---------------------------------------------------------------------------
// Descent

struct StageTrace {
  std::string name;
  losses::LossWeights weights;
  double alpha_s = 0.0;
  std::vector<double> losses;  // entry value followed by each accepted step
  int iterations = 0;
  bool converged_at_entry = false;
  std::string stop_reason;
  double seconds = 0.0;
  std::vector<std::size_t> phase_starts;
};

struct ScheduleResult {
  SceneState state;
  std::vector<StageTrace> trace;
};

class DivergenceError : public DomainError {
 public:
  using DomainError::DomainError;
};

/// Symmetric zero-padded Gaussian blur of every channel, applied in place.
inline void gaussian_blur(std::span<double> data, int w, int h, int channels, double sigma) {
  if (!(sigma > 0.0)) return;
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) sum += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= sum;
  std::vector<double> tmp(data.size(), 0.0);
  auto at = [&](int x, int y, int c) { return (static_cast<std::size_t>(y) * w + x) * channels + c; };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c) {
        double acc = 0.0;
        for (int i = std::max(-r, -x); i <= std::min(r, w - 1 - x); ++i) acc += k[static_cast<std::size_t>(i + r)] * data[at(x + i, y, c)];
        tmp[at(x, y, c)] = acc;
      }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c) {
        double acc = 0.0;
        for (int i = std::max(-r, -y); i <= std::min(r, h - 1 - y); ++i) acc += k[static_cast<std::size_t>(i + r)] * tmp[at(x, y + i, c)];
        data[at(x, y, c)] = acc;
      }
}

/// Block-wise preconditioned step: per-pixel blocks are scaled by the pixel
/// count (the losses are pixel means) and smoothed by B B with B a Gaussian,
/// which keeps the step a descent direction; translation is scaled by
/// depth_scale^2.
inline std::vector<double> descent_direction(const SceneState& s, const std::vector<double>& g, const FreeBlocks& free,
                                             const LearningRates& lr) {
  const Layout l(s);
  std::vector<double> d(g.size(), 0.0);
  const double n = static_cast<double>(l.n);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!l.is_free(i, free)) continue;
    double scale;
    if (i < l.twist) {
      scale = lr.depth * n;
    } else if (i < l.flow_ts) {
      scale = (i - l.twist < 3) ? lr.pose * s.depth_scale * s.depth_scale : lr.pose;
    } else {
      scale = lr.flow * n;
    }
    d[i] = -scale * g[i];
  }
  if (lr.smoothing_sigmas.empty()) return d;
  const int w = s.depth_t_params.width();
  const int h = s.depth_t_params.height();
  auto smooth = [&](std::size_t offset, std::size_t len, int ch) {
    const std::span<double> block(d.data() + offset, len);
    std::vector<double> out(len, 0.0);
    for (double sigma : lr.smoothing_sigmas) {
      std::vector<double> t(block.begin(), block.end());
      gaussian_blur(t, w, h, ch, sigma);
      gaussian_blur(t, w, h, ch, sigma);
      for (std::size_t i = 0; i < len; ++i) out[i] += t[i];
    }
    std::copy(out.begin(), out.end(), block.begin());
  };
  if (free.depth) {
    smooth(l.depth_t, l.n, 1);
    smooth(l.depth_s, l.n, 1);
  }
  if (free.flow) {
    smooth(l.flow_ts, 2 * l.n, 2);
    smooth(l.flow_st, 2 * l.n, 2);
  }
  return d;
}

inline void fill_rigid_flow(const CameraIntrinsics& k, SceneState& s) {
  const auto [dt, ds] = s.depths();
  const Pose pose = s.pose();
  auto rigid = [&](const ScalarField& d, const Pose& p) {
    auto r = rigid_flow_field(d, p, k);
    for (int y = 0; y < d.height(); ++y)
      for (int x = 0; x < d.width(); ++x)
        if (!r.valid(x, y)) r.flow(x, y, 0) = r.flow(x, y, 1) = 0.0;
    return r.flow;
  };
  s.flow_t_to_s = rigid(dt, pose);
  s.flow_s_to_t = rigid(ds, pose_inverse(pose));
}

struct RunOptions {
  int max_iters = -1;         // overrides every stage cap when >= 0
  double lr_scale = 1.0;      // multiplies every stage learning rate
  std::function<void(const StageTrace&)> on_stage_done;
};

inline void check_loss(double loss, const Stage& st, int iter) {
  if (!std::isfinite(loss) || loss > kDivergenceLimit)
    throw DivergenceError("stage '" + st.name + "' diverged at iteration " + std::to_string(iter) +
                          ": loss = " + std::to_string(loss));
}

namespace detail {

struct PhaseResult {
  std::string stop_reason;
  bool stopped_at_entry = false;
};

// Damped descent on the objective as it stands under the active residual
// smoothing. Appends accepted losses to the trace.
inline PhaseResult descend(const Problem& p, const Stage& st, const StageMasks& masks, const VarObjective& f,
                           const LearningRates& lr, int cap, SceneState& s, StageTrace& tr) {
  std::vector<double> x = flatten(s);
  double loss = evaluate(p, masks, st.weights, s);
  check_loss(loss, st, tr.iterations);
  tr.losses.push_back(loss);
  const std::size_t entry = tr.losses.size() - 1;
  SceneState trial = s;
  for (int it = 0; it < cap; ++it) {
    const GradientResult g = gradient(f, s, st.free);
    bool zero = true;
    for (double v : g.grad) zero = zero && v == 0.0;
    if (loss <= 1e-12 || zero) return {"stationary", it == 0};
    const std::vector<double> d = descent_direction(s, g.grad, st.free, lr);
    bool accepted = false;
    double step = 1.0;
    for (int h = 0; h <= kMaxHalvings; ++h, step *= 0.5) {
      std::vector<double> xt = x;
      for (std::size_t i = 0; i < xt.size(); ++i) xt[i] += step * d[i];
      unflatten(xt, trial);
      const double lt = evaluate(p, masks, st.weights, trial);
      check_loss(lt, st, tr.iterations + 1);
      if (lt < loss) {
        x = std::move(xt);
        std::swap(s, trial);
        loss = lt;
        accepted = true;
        break;
      }
    }
    if (!accepted) return {"no-descent", it == 0};
    tr.losses.push_back(loss);
    ++tr.iterations;
    const std::size_t k = tr.losses.size() - 1;
    if (k - entry >= static_cast<std::size_t>(st.window)) {
      const double old = tr.losses[k - static_cast<std::size_t>(st.window)];
      if (old - loss <= st.rel_tol * std::abs(old)) return {"converged", false};
    }
  }
  return {"max-iters", false};
}

}  // namespace detail

/// Runs one stage in place and returns its trace. The stage descends through
/// the residual smoothing ladder of `st.continuation`, ending on the exact
/// loss; `phase_starts` marks where each rung begins in `losses`.
inline StageTrace run_stage(const Problem& p, const Stage& st, SceneState& s, const RunOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  st.weights.validate();
  StageTrace tr{st.name, st.weights, st.alpha_s, {}, 0, false, "", 0.0, {}};
  s.alpha_s = st.alpha_s;
  if (st.init_flow_from_rigid) fill_rigid_flow(p.k(), s);
  const StageMasks masks = compute_stage_masks(p, s, st.weights, st.alpha_s);
  const VarObjective f = make_objective(p, masks, st.weights);
  LearningRates lr = st.lr;
  lr.depth *= opt.lr_scale;
  lr.pose *= opt.lr_scale;
  lr.flow *= opt.lr_scale;
  const int cap = opt.max_iters >= 0 ? opt.max_iters : st.max_iters;

  std::vector<double> ladder = st.continuation;
  if (ladder.empty() || ladder.back() != 0.0) ladder.push_back(0.0);
  bool all_at_entry = true;
  for (double eps : ladder) {
    const losses::ResidualSmoothing guard(eps);
    tr.phase_starts.push_back(tr.losses.size());
    const detail::PhaseResult r = detail::descend(p, st, masks, f, lr, cap - tr.iterations, s, tr);
    all_at_entry = all_at_entry && r.stopped_at_entry;
    tr.stop_reason = r.stop_reason;
  }
  if (tr.stop_reason.empty()) tr.stop_reason = "max-iters";
  tr.converged_at_entry = all_at_entry;
  tr.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return tr;
}

inline ScheduleResult run_schedule(const Frames& frames, const StageSchedule& schedule, SceneState init,
                                   const RunOptions& opt = {}) {
  const Problem p(frames);
  ScheduleResult r{std::move(init), {}};
  if (r.state.depth_t_params.width() != p.k().width || r.state.depth_t_params.height() != p.k().height)
    throw DomainError("run_schedule: state size does not match the frames");
  for (const Stage& st : schedule.stages) {
    r.trace.push_back(run_stage(p, st, r.state, opt));
    if (opt.on_stage_done) opt.on_stage_done(r.trace.back());
  }
  return r;
}

}  // namespace motionparse::opt
