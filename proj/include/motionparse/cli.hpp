#pragma once

// Command-line front end. `run_cli` parses argv, runs one subcommand and
// returns the process exit code: 0 success, 1 domain error, 2 usage error.
// Numbers go to `out` as JSON; diagnostics go to `err`.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "motionparse/hmp.hpp"
#include "motionparse/io.hpp"
#include "motionparse/losses.hpp"
#include "motionparse/metrics.hpp"
#include "motionparse/optimizer.hpp"
#include "motionparse/synth.hpp"

namespace motionparse::cli {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Field files, chosen by extension.

inline std::string ext_of(const fs::path& p) {
  std::string e = p.extension().string();
  for (char& c : e) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return e;
}

inline ScalarField load_depth(const fs::path& p, MaskField* valid = nullptr) {
  const auto bytes = io::read_file(p);
  const std::string e = ext_of(p);
  if (e == ".pfm") {
    ScalarField d = io::decode_pfm(bytes);
    if (d.channels() != 1) throw DomainError(p.string() + ": expected a 1-channel PFM");
    if (valid != nullptr) {
      *valid = MaskField(d.width(), d.height(), 1, 1);
      for (std::size_t i = 0; i < d.size(); ++i) valid->data()[i] = d.data()[i] > 0.0 && std::isfinite(d.data()[i]);
    }
    return d;
  }
  if (e == ".png") {
    auto k = io::decode_kitti_depth(bytes);
    if (valid != nullptr) *valid = std::move(k.valid);
    return k.depth;
  }
  throw DomainError(p.string() + ": depth must be .pfm or .png");
}

inline VectorField load_flow(const fs::path& p, MaskField* valid = nullptr) {
  const auto bytes = io::read_file(p);
  const std::string e = ext_of(p);
  if (e == ".flo") {
    VectorField f = io::decode_flo(bytes);
    if (valid != nullptr) *valid = MaskField(f.width(), f.height(), 1, 1);
    return f;
  }
  if (e == ".png") {
    auto k = io::decode_kitti_flow(bytes);
    if (valid != nullptr) *valid = std::move(k.valid);
    return k.flow;
  }
  throw DomainError(p.string() + ": flow must be .flo or .png");
}

inline MaskField load_mask(const fs::path& p) { return io::decode_mask(io::read_file(p)); }

inline void save(const fs::path& p, const io::Bytes& b) { io::write_file(p, b); }

inline std::string read_text(const fs::path& p) {
  const auto b = io::read_file(p);
  return std::string(b.begin(), b.end());
}

inline void write_text(const fs::path& p, const std::string& s) { io::write_file(p, io::Bytes(s.begin(), s.end())); }

inline Pose load_single_pose(const fs::path& p) {
  const auto poses = io::parse_poses(read_text(p));
  if (poses.size() != 1) throw DomainError(p.string() + ": expected exactly one pose");
  validate_pose(poses.front(), 1e-6);
  return poses.front();
}

/// 16-bit gray PNG of values in [0, 1].
inline io::Bytes encode_image16(const ScalarField& f) {
  io::RawImage img{f.width(), f.height(), 1, 16, {}};
  for (double v : f.data()) img.samples.push_back(static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0)));
  return io::encode_png(img);
}

/// 8-bit PNG of a [0, 1] field scaled by 255.
inline io::Bytes encode_unit8(const ScalarField& f) { return io::encode_image_gray(f); }

// ---------------------------------------------------------------------------
// Manifest

struct Manifest {
  fs::path dir;
  fs::path intrinsics, image_t, image_s;
  std::optional<fs::path> image_c;
  std::optional<double> stereo_baseline;
  std::string profile = "mono";
  // Ground truth, when present.
  std::optional<fs::path> depth_t, depth_s, flow_t_to_s, flow_s_to_t, pose, moving, occluded;

  fs::path resolve(const fs::path& p) const { return p.is_absolute() ? p : dir / p; }
};

inline Manifest load_manifest(const fs::path& path) {
  const fs::path file = fs::is_directory(path) ? path / "manifest.json" : path;
  Json j;
  try {
    j = Json::parse(read_text(file));
  } catch (const Json::parse_error& e) {
    throw io::FormatError(file.string() + ": " + e.what(), e.byte);
  }
  Manifest m;
  m.dir = file.parent_path();
  auto req = [&](const char* key) {
    if (!j.contains(key) || !j[key].is_string()) throw DomainError(file.string() + ": missing string field '" + key + "'");
    return fs::path(j[key].get<std::string>());
  };
  auto opt = [&](const Json& obj, const char* key) -> std::optional<fs::path> {
    if (obj.contains(key) && obj[key].is_string()) return fs::path(obj[key].get<std::string>());
    return std::nullopt;
  };
  m.intrinsics = req("intrinsics");
  m.image_t = req("image_t");
  m.image_s = req("image_s");
  m.image_c = opt(j, "image_c");
  if (j.contains("stereo_baseline") && j["stereo_baseline"].is_number()) m.stereo_baseline = j["stereo_baseline"].get<double>();
  if (j.contains("profile")) m.profile = j["profile"].get<std::string>();
  if (m.profile != "mono" && m.profile != "stereo") throw DomainError(file.string() + ": profile must be mono or stereo");
  if (m.profile == "stereo" && (!m.image_c || !m.stereo_baseline || !(*m.stereo_baseline > 0.0)))
    throw DomainError(file.string() + ": stereo profile needs image_c and a positive stereo_baseline");
  if (j.contains("gt")) {
    const Json& g = j["gt"];
    m.depth_t = opt(g, "depth_t");
    m.depth_s = opt(g, "depth_s");
    m.flow_t_to_s = opt(g, "flow_t_to_s");
    m.flow_s_to_t = opt(g, "flow_s_to_t");
    m.pose = opt(g, "pose");
    m.moving = opt(g, "moving");
    m.occluded = opt(g, "occluded");
  }
  for (const auto* p : {&m.intrinsics, &m.image_t, &m.image_s})
    if (!fs::exists(m.resolve(*p))) throw DomainError(file.string() + ": referenced file " + p->string() + " does not exist");
  return m;
}

inline opt::Frames load_frames(const Manifest& m, bool want_stereo) {
  opt::Frames f;
  f.k = io::parse_intrinsics(read_text(m.resolve(m.intrinsics)));
  f.image_t = io::decode_image_gray(io::read_file(m.resolve(m.image_t)));
  f.image_s = io::decode_image_gray(io::read_file(m.resolve(m.image_s)));
  if (want_stereo) {
    if (!m.image_c || !m.stereo_baseline) throw DomainError("stereo schedule needs image_c and stereo_baseline in the manifest");
    f.image_c = io::decode_image_gray(io::read_file(m.resolve(*m.image_c)));
    f.stereo_pose = make_pose(Mat3<double>::identity(), {-*m.stereo_baseline, 0.0, 0.0});
  }
  return f;
}

// ---------------------------------------------------------------------------
// JSON helpers

inline Json pose_json(const Pose& p) {
  Json r = Json::array();
  for (int i = 0; i < 3; ++i) r.push_back({p.rotation(i, 0), p.rotation(i, 1), p.rotation(i, 2)});
  return {{"rotation", r}, {"translation", {p.translation.x, p.translation.y, p.translation.z}}};
}

inline Json breakdown_json(const losses::LossBreakdown& b) {
  Json terms = Json::object();
  for (int t = 0; t < losses::kTermCount; ++t) {
    const auto term = static_cast<losses::Term>(t);
    if (losses::weight_of(b.weights, term) == 0.0) continue;
    Json levels = Json::object();
    for (int l = 0; l < kPyramidLevels; ++l) levels[std::to_string(l)] = b[term].value[static_cast<std::size_t>(l)];
    terms[std::string(losses::kTermNames[static_cast<std::size_t>(t)])] = levels;
  }
  return {{"terms", terms}, {"total", b.total}};
}

inline Json weights_json(const losses::LossWeights& w) {
  return {{"dvs", w.dvs}, {"fvs", w.fvs}, {"ds", w.ds}, {"fs", w.fs}, {"dc", w.dc},
          {"mc", w.mc},   {"fc", w.fc},   {"cvs", w.cvs}, {"cs", w.cs}};
}

inline losses::LossWeights parse_weights(const std::string& text) {
  std::vector<double> v;
  std::stringstream in(text);
  std::string tok;
  while (std::getline(in, tok, ',')) {
    try {
      v.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw DomainError("weights: '" + tok + "' is not a number");
    }
  }
  if (v.size() != 7 && v.size() != 9) throw DomainError("weights: expected 7 (monocular) or 9 (with cvs, cs) values");
  losses::LossWeights w = losses::LossWeights::from_vector({v[0], v[1], v[2], v[3], v[4], v[5], v[6]});
  if (v.size() == 9) {
    w.cvs = v[7];
    w.cs = v[8];
  }
  w.validate();
  return w;
}

// ---------------------------------------------------------------------------
// Subcommands

struct SynthArgs {
  std::string scene = "moving-box";
  fs::path out;
  std::uint64_t seed = 0;
  bool stereo = false;
};

inline Json write_scene(const synth::SyntheticScene& sc, const fs::path& dir) {
  fs::create_directories(dir);
  const auto& g = sc.geometry;
  write_text(dir / "intrinsics.txt", io::format_intrinsics(g.k));
  save(dir / "image_t.png", encode_image16(sc.image_t));
  save(dir / "image_s.png", encode_image16(sc.image_s));
  save(dir / "depth_t.pfm", io::encode_pfm(sc.depth_t));
  save(dir / "depth_s.pfm", io::encode_pfm(sc.depth_s));
  save(dir / "flow_t_to_s.flo", io::encode_flo(sc.flow_t_to_s));
  save(dir / "flow_s_to_t.flo", io::encode_flo(sc.flow_s_to_t));
  save(dir / "occluded.png", io::encode_mask(sc.occluded));
  save(dir / "moving.png", io::encode_mask(sc.moving));
  save(dir / "object_motion.pfm", io::encode_pfm(sc.object_motion));
  write_text(dir / "pose.txt", io::format_poses({g.pose}));

  Json m;
  m["intrinsics"] = "intrinsics.txt";
  m["image_t"] = "image_t.png";
  m["image_s"] = "image_s.png";
  if (sc.image_c) {
    save(dir / "image_c.png", encode_image16(*sc.image_c));
    m["image_c"] = "image_c.png";
    m["stereo_baseline"] = *g.stereo_baseline;
  }
  m["profile"] = sc.image_c ? "stereo" : "mono";
  m["gt"] = {{"depth_t", "depth_t.pfm"},         {"depth_s", "depth_s.pfm"},
             {"flow_t_to_s", "flow_t_to_s.flo"}, {"flow_s_to_t", "flow_s_to_t.flo"},
             {"pose", "pose.txt"},               {"moving", "moving.png"},
             {"occluded", "occluded.png"},       {"object_motion", "object_motion.pfm"}};
  m["pose"] = pose_json(g.pose);
  m["intrinsics_values"] = {{"fx", g.k.fx}, {"fy", g.k.fy}, {"cx", g.k.cx}, {"cy", g.k.cy}, {"width", g.k.width}, {"height", g.k.height}};
  m["object_motion"] = g.box ? Json{g.box->motion.x, g.box->motion.y, g.box->motion.z} : Json{0.0, 0.0, 0.0};
  write_text(dir / "manifest.json", m.dump(2) + "\n");
  return m;
}

inline constexpr double kDefaultStereoBaseline = 0.5;

inline Json run_synth(const SynthArgs& a) {
  std::mt19937_64 rng(a.seed);
  synth::SyntheticScene sc;
  if (a.scene == "static") {
    synth::SceneGeometry g = synth::random_static_scene(rng).geometry;
    if (a.stereo) g.stereo_baseline = kDefaultStereoBaseline;
    sc = synth::render(g);
  } else if (a.scene == "moving-box") {
    auto c = synth::random_box_config(rng);
    if (a.stereo) c.stereo_baseline = kDefaultStereoBaseline;
    sc = synth::make_moving_box_scene(c);
  } else {
    throw DomainError("synth: unknown scene '" + a.scene + "' (expected static or moving-box)");
  }
  write_scene(sc, a.out);
  return {{"scene", a.scene}, {"seed", a.seed}, {"out", a.out.string()}, {"width", sc.geometry.k.width},
          {"height", sc.geometry.k.height}, {"moving_pixels", std::count(sc.moving.data().begin(), sc.moving.data().end(), 1)},
          {"occluded_pixels", std::count(sc.occluded.data().begin(), sc.occluded.data().end(), 1)}};
}

/// Depth/flow/pose inputs, each defaulting to the manifest's ground truth.
struct StateArgs {
  std::string depth_t, depth_s, flow_t_to_s, flow_s_to_t, pose;
};

struct PlainState {
  ScalarField depth_t, depth_s;
  VectorField flow_t_to_s, flow_s_to_t;
  Pose pose;
};

inline PlainState load_state(const Manifest& m, const StateArgs& a) {
  auto pick = [&](const std::string& flag, const std::optional<fs::path>& gt, const char* name) {
    if (!flag.empty()) return fs::path(flag);
    if (!gt) throw DomainError(std::string("no --") + name + " given and the manifest has no ground truth for it");
    return m.resolve(*gt);
  };
  PlainState s;
  s.depth_t = load_depth(pick(a.depth_t, m.depth_t, "depth-t"));
  s.depth_s = load_depth(pick(a.depth_s, m.depth_s, "depth-s"));
  s.flow_t_to_s = load_flow(pick(a.flow_t_to_s, m.flow_t_to_s, "flow-ts"));
  s.flow_s_to_t = load_flow(pick(a.flow_s_to_t, m.flow_s_to_t, "flow-st"));
  s.pose = load_single_pose(pick(a.pose, m.pose, "pose"));
  return s;
}

struct ParseArgs {
  fs::path manifest;
  StateArgs state;
  double alpha_s = opt::kAlphaSReset;
  double threshold = hmp::kSegmentationThreshold;
  fs::path out;
};

inline Json run_parse(const ParseArgs& a) {
  const Manifest m = load_manifest(a.manifest);
  const CameraIntrinsics k = io::parse_intrinsics(read_text(m.resolve(m.intrinsics)));
  const PlainState s = load_state(m, a.state);
  const auto h = hmp::parse({s.depth_t, s.depth_s, s.flow_t_to_s, s.flow_s_to_t, s.pose, k, a.alpha_s});
  const MaskField seg = hmp::binary_segmentation(h.m_d, a.threshold);
  fs::create_directories(a.out);
  save(a.out / "m_b.pfm", io::encode_pfm(h.m_b));
  save(a.out / "m_d.pfm", io::encode_pfm(h.m_d));
  save(a.out / "v.png", encode_unit8(h.v));
  save(a.out / "s.png", encode_unit8(h.s));
  save(a.out / "mask.png", io::encode_mask(seg));
  double max_md = 0.0, visible = 0.0;
  for (int y = 0; y < k.height; ++y)
    for (int x = 0; x < k.width; ++x) {
      max_md = std::max(max_md, hmp::motion_norm(h.m_d, x, y));
      visible += h.v(x, y);
    }
  const auto moving = std::count(seg.data().begin(), seg.data().end(), 1);
  Json r{{"out", a.out.string()},
         {"alpha_s", a.alpha_s},
         {"threshold", a.threshold},
         {"visible_fraction", visible / static_cast<double>(h.v.pixels())},
         {"moving_fraction", static_cast<double>(moving) / static_cast<double>(seg.pixels())},
         {"max_m_d", max_md}};
  if (m.moving) {
    const MaskField gt = load_mask(m.resolve(*m.moving));
    r["segmentation"] = {{"mean_iou", metrics::eval_segmentation(seg, gt).mean_iou},
                         {"moving_iou", metrics::eval_segmentation(seg, gt).class_iou[1]}};
  }
  return r;
}

struct LossArgs {
  fs::path manifest;
  StateArgs state;
  std::string weights = "1,0,1,0,0.05,0.25,0";
  double alpha_s = opt::kAlphaSReset;
};

inline Json run_loss(const LossArgs& a) {
  const Manifest m = load_manifest(a.manifest);
  const losses::LossWeights w = parse_weights(a.weights);
  const bool stereo = w.cvs > 0.0 || w.cs > 0.0;
  const opt::Frames f = load_frames(m, stereo);
  const PlainState s = load_state(m, a.state);
  const auto pt = build_pyramid(f.image_t), ps = build_pyramid(f.image_s);
  const auto dt = build_pyramid(s.depth_t), ds = build_pyramid(s.depth_s);
  const auto fts = build_flow_pyramid(s.flow_t_to_s), fst = build_flow_pyramid(s.flow_s_to_t);
  const auto masks = opt::uses_flow(w) ? losses::compute_masks(dt, ds, fts, fst, s.pose, f.k, a.alpha_s)
                                       : losses::trivial_masks(f.k);
  const losses::MonocularInputs<double> in{&pt, &ps, &dt, &ds, &fts, s.pose, f.k, &masks};
  losses::LossBreakdown b;
  if (stereo) {
    const auto pc = build_pyramid(*f.image_c);
    b = losses::total_stereo_loss(in, {&pc, f.stereo_pose}, w);
  } else {
    b = losses::total_monocular_loss(in, w);
  }
  Json r = breakdown_json(b);
  r["direction"] = "t->s";
  r["weights"] = weights_json(w);
  return r;
}

struct OptimizeArgs {
  fs::path manifest;
  std::string schedule;  // empty: the manifest's profile
  int max_iters = -1;
  double lr = 1.0;
  std::uint64_t seed = 0;
  double init_noise = 0.0;
  double threshold = hmp::kSegmentationThreshold;
  fs::path out;
};

inline Json trace_json(const opt::StageTrace& t) {
  return {{"name", t.name},
          {"weights", weights_json(t.weights)},
          {"alpha_s", t.alpha_s},
          {"iterations", t.iterations},
          {"stop_reason", t.stop_reason},
          {"converged_at_entry", t.converged_at_entry},
          {"seconds", t.seconds},
          {"phase_starts", t.phase_starts},
          {"losses", t.losses}};
}

inline Json run_optimize(const OptimizeArgs& a, std::ostream& err) {
  const Manifest m = load_manifest(a.manifest);
  opt::StageSchedule schedule = opt::schedule_by_name(a.schedule.empty() ? m.profile : a.schedule);
  const opt::Frames frames = load_frames(m, schedule.profile == "stereo");
  opt::SceneState init = opt::smooth_init(frames.k);
  if (a.init_noise > 0.0) {
    std::mt19937_64 rng(a.seed);
    std::normal_distribution<double> n(0.0, a.init_noise);
    for (double& v : init.depth_t_params.data()) v += n(rng);
    for (double& v : init.depth_s_params.data()) v += n(rng);
  }
  opt::RunOptions ro;
  ro.max_iters = a.max_iters;
  ro.lr_scale = a.lr;
  ro.on_stage_done = [&](const opt::StageTrace& t) {
    err << "stage " << t.name << ": " << t.iterations << " iterations, " << t.stop_reason << ", loss "
        << t.losses.front() << " -> " << t.losses.back() << "\n";
  };
  const opt::ScheduleResult res = opt::run_schedule(frames, schedule, init, ro);
  const auto [dt, ds] = res.state.depths();
  const Pose pose = res.state.pose();

  // Threshold in ground-truth units when a reference depth is available.
  double scale = 1.0;
  if (m.depth_t) scale = metrics::eval_depth(dt, load_depth(m.resolve(*m.depth_t)), nullptr, true).scale;
  const auto h = hmp::parse({dt, ds, res.state.flow_t_to_s, res.state.flow_s_to_t, pose, frames.k, opt::kAlphaSReset});
  const MaskField seg = hmp::binary_segmentation(h.m_d, a.threshold / scale);

  fs::create_directories(a.out);
  save(a.out / "depth_t.pfm", io::encode_pfm(dt));
  save(a.out / "depth_s.pfm", io::encode_pfm(ds));
  save(a.out / "flow_t_to_s.flo", io::encode_flo(res.state.flow_t_to_s));
  save(a.out / "flow_s_to_t.flo", io::encode_flo(res.state.flow_s_to_t));
  write_text(a.out / "pose.txt", io::format_poses({pose}));
  save(a.out / "v.png", encode_unit8(h.v));
  save(a.out / "s.png", encode_unit8(h.s));
  save(a.out / "mask.png", io::encode_mask(seg));
  Json trace = Json::array();
  for (const auto& t : res.trace) trace.push_back(trace_json(t));
  write_text(a.out / "trace.json", Json{{"profile", schedule.profile}, {"stages", trace}}.dump(2) + "\n");

  Json r{{"profile", schedule.profile}, {"out", a.out.string()}, {"seed", a.seed}, {"pose", pose_json(pose)},
         {"depth_scale_to_gt", scale}};
  Json stages = Json::array();
  for (const auto& t : res.trace)
    stages.push_back({{"name", t.name}, {"iterations", t.iterations}, {"stop_reason", t.stop_reason},
                      {"initial_loss", t.losses.front()}, {"final_loss", t.losses.back()}});
  r["stages"] = stages;
  if (m.depth_t) {
    const auto d = metrics::eval_depth(dt, load_depth(m.resolve(*m.depth_t)), nullptr, true);
    r["depth"] = {{"abs_rel", d.abs_rel}, {"rmse", d.rmse}, {"delta1", d.delta1}};
  }
  if (m.moving) {
    const auto sgm = metrics::eval_segmentation(seg, load_mask(m.resolve(*m.moving)));
    r["segmentation"] = {{"mean_iou", sgm.mean_iou}, {"moving_iou", sgm.class_iou[1]}};
  }
  return r;
}

inline Json depth_report_json(const metrics::DepthEvalReport& r) {
  return {{"abs_rel", r.abs_rel}, {"sq_rel", r.sq_rel}, {"rmse", r.rmse},     {"rmse_log", r.rmse_log},
          {"delta1", r.delta1},   {"delta2", r.delta2}, {"delta3", r.delta3}, {"scale", r.scale},
          {"count", r.count}};
}

inline Json split_json(const metrics::SceneFlowSplit& s) {
  return {{"d1", s.d1},
          {"d2", s.d2},
          {"fl", s.fl},
          {"d1_outliers", s.d1_outliers},
          {"d2_outliers", s.d2_outliers},
          {"fl_outliers", s.fl_outliers},
          {"count", s.count}};
}

inline MaskField combine_valid(const std::optional<MaskField>& a, const std::optional<MaskField>& b) {
  if (!a) return *b;
  if (!b) return *a;
  require_same_grid(*a, *b, "valid masks");
  MaskField out = *a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = a->data()[i] && b->data()[i];
  return out;
}

// ---------------------------------------------------------------------------
// Dispatch

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"motionparse: holistic 3D motion parsing by direct optimisation", "motionparse"};
  app.require_subcommand(1);

  SynthArgs synth_args;
  auto* synth_cmd = app.add_subcommand("synth", "Render a synthetic scene directory with ground truth");
  synth_cmd->add_option("--scene", synth_args.scene, "static or moving-box")->check(CLI::IsMember({"static", "moving-box"}));
  synth_cmd->add_option("--out", synth_args.out, "Output directory")->required();
  synth_cmd->add_option("--seed", synth_args.seed, "Random seed");
  synth_cmd->add_flag("--stereo", synth_args.stereo, "Also render a stereo partner view");

  auto add_state = [](CLI::App* c, StateArgs& s) {
    c->add_option("--depth-t", s.depth_t, "Target depth (.pfm or KITTI .png); default: manifest ground truth");
    c->add_option("--depth-s", s.depth_s, "Source depth");
    c->add_option("--flow-ts", s.flow_t_to_s, "Flow target->source (.flo or KITTI .png)");
    c->add_option("--flow-st", s.flow_s_to_t, "Flow source->target");
    c->add_option("--pose", s.pose, "Pose file with a single T_{t->s}");
  };

  ParseArgs parse_args;
  auto* parse_cmd = app.add_subcommand("parse", "Run the motion parser and write masks and motion maps");
  parse_cmd->add_option("--manifest", parse_args.manifest, "Scene manifest or directory")->required();
  add_state(parse_cmd, parse_args.state);
  parse_cmd->add_option("--alpha-s", parse_args.alpha_s, "Moving-mask sharpness");
  parse_cmd->add_option("--threshold", parse_args.threshold, "Segmentation threshold on |M_d|");
  parse_cmd->add_option("--out", parse_args.out, "Output directory")->required();

  LossArgs loss_args;
  auto* loss_cmd = app.add_subcommand("loss", "Evaluate the multi-scale loss breakdown");
  loss_cmd->add_option("--manifest", loss_args.manifest, "Scene manifest or directory")->required();
  add_state(loss_cmd, loss_args.state);
  loss_cmd->add_option("--weights", loss_args.weights, "dvs,fvs,ds,fs,dc,mc,fc[,cvs,cs]");
  loss_cmd->add_option("--alpha-s", loss_args.alpha_s, "Moving-mask sharpness");

  OptimizeArgs opt_args;
  auto* opt_cmd = app.add_subcommand("optimize", "Run the staged optimisation from a smooth initial state");
  opt_cmd->add_option("--manifest", opt_args.manifest, "Scene manifest or directory")->required();
  opt_cmd->add_option("--stage-schedule", opt_args.schedule, "mono or stereo (default: manifest profile)")
      ->check(CLI::IsMember({"mono", "stereo"}));
  opt_cmd->add_option("--max-iters", opt_args.max_iters, "Per-stage iteration cap (default 2000)");
  opt_cmd->add_option("--lr", opt_args.lr, "Learning-rate multiplier")->check(CLI::PositiveNumber);
  opt_cmd->add_option("--seed", opt_args.seed, "Seed for the initial-state noise");
  opt_cmd->add_option("--init-noise", opt_args.init_noise, "Std. dev. of Gaussian noise on the initial depth parameters");
  opt_cmd->add_option("--threshold", opt_args.threshold, "Segmentation threshold on |M_d|");
  opt_cmd->add_option("--out", opt_args.out, "Output directory")->required();

  std::string pred, gt, valid, fg;
  bool median_scale = false;
  auto* ed = app.add_subcommand("eval-depth", "Depth error metrics");
  ed->add_option("--pred", pred, "Predicted depth (.pfm or KITTI .png)")->required();
  ed->add_option("--gt", gt, "Ground-truth depth")->required();
  ed->add_option("--valid", valid, "Optional validity mask PNG");
  ed->add_flag("--median-scale", median_scale, "Scale the prediction to the ground-truth median first");

  auto* ef = app.add_subcommand("eval-flow", "Optical flow EPE and outlier rate");
  ef->add_option("--pred", pred, "Predicted flow (.flo or KITTI .png)")->required();
  ef->add_option("--gt", gt, "Ground-truth flow")->required();
  ef->add_option("--valid", valid, "Optional validity mask PNG");

  int classes = 2;
  auto* es = app.add_subcommand("eval-seg", "Segmentation accuracy and IoU");
  es->add_option("--pred", pred, "Predicted label PNG")->required();
  es->add_option("--gt", gt, "Ground-truth label PNG")->required();
  es->add_option("--valid", valid, "Optional validity mask PNG");
  es->add_option("--classes", classes, "Number of classes (2 treats any nonzero label as foreground)")
      ->check(CLI::PositiveNumber);

  std::string pd1, pd2, pfl, gd1, gd2, gfl;
  auto* esf = app.add_subcommand("eval-sceneflow", "Scene flow D1/D2/FL errors");
  esf->add_option("--pred-d1", pd1, "Predicted disparity at t (.pfm)")->required();
  esf->add_option("--pred-d2", pd2, "Predicted disparity at t+1 in the t frame (.pfm)")->required();
  esf->add_option("--pred-flow", pfl, "Predicted flow")->required();
  esf->add_option("--gt-d1", gd1, "Ground-truth disparity at t")->required();
  esf->add_option("--gt-d2", gd2, "Ground-truth disparity at t+1")->required();
  esf->add_option("--gt-flow", gfl, "Ground-truth flow")->required();
  esf->add_option("--fg-mask", fg, "Foreground mask PNG for the bg/fg split");
  esf->add_option("--valid", valid, "Optional validity mask PNG");

  std::string r_norm = "pair";
  auto* eo = app.add_subcommand("eval-odom", "Trajectory ATE and relative pose errors");
  eo->add_option("--pred", pred, "Predicted camera-to-world poses (KITTI format)")->required();
  eo->add_option("--gt", gt, "Ground-truth poses")->required();
  eo->add_option("--r-err-norm", r_norm, "pair: mean per frame pair; 100: degrees per 100 units of path")
      ->check(CLI::IsMember({"pair", "100"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return 2;
  }

  try {
    Json r;
    auto load_valid = [&]() -> std::optional<MaskField> {
      if (valid.empty()) return std::nullopt;
      return load_mask(valid);
    };
    if (synth_cmd->parsed()) {
      r = run_synth(synth_args);
    } else if (parse_cmd->parsed()) {
      r = run_parse(parse_args);
    } else if (loss_cmd->parsed()) {
      r = run_loss(loss_args);
    } else if (opt_cmd->parsed()) {
      r = run_optimize(opt_args, err);
    } else if (ed->parsed()) {
      MaskField gv;
      const ScalarField p = load_depth(pred);
      const ScalarField g = load_depth(gt, &gv);
      const MaskField v = combine_valid(load_valid(), gv);
      r = depth_report_json(metrics::eval_depth(p, g, &v, median_scale));
    } else if (ef->parsed()) {
      MaskField gv;
      const VectorField p = load_flow(pred);
      const VectorField g = load_flow(gt, &gv);
      const MaskField v = combine_valid(load_valid(), gv);
      const auto f = metrics::eval_flow(p, g, &v);
      r = {{"epe", f.epe}, {"f1_outlier_rate", f.f1_outlier_rate}, {"count", f.count}};
    } else if (es->parsed()) {
      const auto v = load_valid();
      const auto s = metrics::eval_segmentation(load_mask(pred), load_mask(gt), v ? &*v : nullptr, classes);
      Json ious = Json::array();
      for (double x : s.class_iou) ious.push_back(std::isnan(x) ? Json(nullptr) : Json(x));
      r = {{"pixel_acc", s.pixel_acc}, {"mean_acc", s.mean_acc}, {"mean_iou", s.mean_iou}, {"fw_iou", s.fw_iou},
           {"class_iou", ious}};
    } else if (esf->parsed()) {
      MaskField gv;
      metrics::SceneFlowFields p{load_depth(pd1), load_depth(pd2), load_flow(pfl)};
      metrics::SceneFlowFields g{load_depth(gd1), load_depth(gd2), load_flow(gfl, &gv)};
      const MaskField v = combine_valid(load_valid(), gv);
      std::optional<MaskField> fgm;
      if (!fg.empty()) fgm = load_mask(fg);
      const auto s = metrics::eval_sceneflow(p, g, &v, fgm ? &*fgm : nullptr);
      r["all"] = split_json(s.all);
      if (s.has_split) {
        r["bg"] = split_json(s.bg);
        r["fg"] = split_json(s.fg);
      }
    } else if (eo->parsed()) {
      const auto p = io::parse_poses(read_text(pred));
      const auto g = io::parse_poses(read_text(gt));
      const auto o = metrics::eval_odometry(p, g, r_norm == "pair" ? metrics::RotationNorm::kPerFramePair
                                                                   : metrics::RotationNorm::kPer100Units);
      r = {{"ate_5frame", o.ate_5frame}, {"t_err", o.t_err}, {"r_err", o.r_err}, {"snippets", o.snippets},
           {"pairs", o.pairs}};
    }
    out << r.dump(2) << "\n";
    return 0;
  } catch (const DomainError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace motionparse::cli
