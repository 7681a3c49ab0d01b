// Command-line front end: capture, cycle, ablate, eval, render-debug.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pod/cycle.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct ConfigFlags {
  std::string preset = "default";
  std::string config_path;
  std::vector<std::string> sets;
  std::string kind;
  int frames = 0;
  int loops = -1;
  long long seed = -1;
  bool no_degrade = false;
};

void add_config_flags(CLI::App* cmd, ConfigFlags& f) {
  cmd->add_option("-c,--config", f.config_path, "JSON config; missing fields keep defaults")->check(CLI::ExistingFile);
  cmd->add_option("--preset", f.preset, "starting configuration")
      ->check(CLI::IsMember({"default", "depth_ambiguity"}));
  cmd->add_option("--template", f.kind, "object template kind");
  cmd->add_option("--frames", f.frames, "video length");
  cmd->add_option("--loops", f.loops, "cycle loops including loop 0");
  cmd->add_option("--seed", f.seed, "experiment seed");
  cmd->add_flag("--no-degrade", f.no_degrade, "capture without feature noise, depth distortion and occluders");
  cmd->add_option("--set", f.sets, "override any field, e.g. --set schedule.epochs=20")->take_all();
}

// "a.b.c=value" sets j["a"]["b"]["c"]; the value is parsed as JSON when it can be.
void apply_set(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  pod::require(eq != std::string::npos && eq > 0, pod::ErrorKind::kInvalidArgument,
               "--set expects path=value, got '" + assignment + "'");
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  std::string pointer = "/" + path;
  for (auto& ch : pointer)
    if (ch == '.') ch = '/';
  const json::json_pointer ptr(pointer);
  pod::require(j.contains(ptr), pod::ErrorKind::kInvalidArgument, "unknown config field '" + path + "'");
  j[ptr] = value;
}

// Every key given by the user must name a field of the full configuration.
void check_known(const json& defaults, const json& given, const std::string& where) {
  for (const auto& [k, v] : given.items()) {
    pod::require(defaults.contains(k), pod::ErrorKind::kInvalidArgument, "unknown config field '" + where + k + "'");
    if (v.is_object() && defaults.at(k).is_object()) check_known(defaults.at(k), v, where + k + ".");
  }
}

// Motion script fields only exist once a script is spelled out; start from the template's default.
void ensure_script(json& j) {
  if (j.contains("script")) return;
  const auto c = pod::config_from_json(j);
  j["script"] = pod::script_to_json(
      pod::default_script(c.kind, pod::build_template(c.kind, c.points_per_part, c.template_seed)));
}

pod::ExperimentConfig resolve_config(const ConfigFlags& f) {
  json j = pod::config_to_json(f.preset == "depth_ambiguity" ? pod::depth_ambiguity_preset() : pod::ExperimentConfig{});
  if (!f.config_path.empty()) {
    std::ifstream is(f.config_path);
    pod::require(static_cast<bool>(is), pod::ErrorKind::kIo, "cannot read " + f.config_path);
    const json file = json::parse(is, nullptr, false);
    pod::require(!file.is_discarded() && file.is_object(), pod::ErrorKind::kIo, f.config_path + ": not a JSON object");
    // A different template invalidates the preset's motion script.
    if (file.contains("template")) {
      j["template"] = file.at("template");
      j.erase("script");
    }
    if (file.contains("script")) ensure_script(j);
    check_known(j, file, "");
    j.merge_patch(file);
  }
  if (!f.kind.empty()) {
    j["template"] = f.kind;
    j.erase("script");
  }
  if (f.frames > 0) j["frames"] = f.frames;
  if (f.loops >= 0) j["loops"] = f.loops;
  if (f.seed >= 0) j["seed"] = f.seed;
  if (f.no_degrade) j["degrade"] = pod::degrade_to_json(pod::DegradeConfig::off());
  for (const auto& s : f.sets) {
    if (s.rfind("script.", 0) == 0) ensure_script(j);
    apply_set(j, s);
  }
  return pod::config_from_json(j);
}

fs::path make_run_dir(const fs::path& root, const std::string& command) {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream name;
  name << command << "-" << std::put_time(&tm, "%Y%m%d-%H%M%S");
  fs::path dir = root / name.str();
  for (int n = 1; fs::exists(dir); ++n) dir = root / (name.str() + "-" + std::to_string(n));
  fs::create_directories(dir);
  return dir;
}

pod::Logger stderr_logger() {
  const auto t0 = std::chrono::steady_clock::now();
  return [t0](const std::string& msg) {
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::fprintf(stderr, "[%8.1fs] %s\n", s, msg.c_str());
  };
}

std::string pcp_line(const std::map<double, double>& pcp) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  for (auto it = pcp.rbegin(); it != pcp.rend(); ++it) os << " pcp@" << pod::alpha_key(it->first) << "=" << it->second;
  return os.str();
}

void print_records(const std::vector<pod::LoopRecord>& rows) {
  for (const auto& r : rows)
    std::printf("%-22s loop %d  frames %3d  mse %.5f %s\n", r.label.c_str(), r.loop, r.video_frames, r.mse,
                pcp_line(r.pcp).c_str());
}

// Scenario from the config, or with the frames replaced by a saved capture.
pod::Scenario scenario_for(const pod::ExperimentConfig& cfg, const std::string& video_dir) {
  if (video_dir.empty()) return pod::make_scenario(cfg);
  pod::Scenario sc;
  sc.tpl = pod::build_template(cfg.kind, cfg.points_per_part, cfg.template_seed);
  sc.video = pod::load_video(video_dir);
  pod::require(!sc.video.gt_poses.empty(), pod::ErrorKind::kInvalidArgument,
               video_dir + ": capture has no ground truth to evaluate against");
  pod::require(sc.video.observations.front().image.dim == sc.tpl.feature_dim, pod::ErrorKind::kShapeMismatch,
               video_dir + ": capture does not match the configured template");
  sc.points = pod::eval_points(sc.tpl, cfg.eval_points, cfg.eval_seed);
  return sc;
}

int cmd_capture(const pod::ExperimentConfig& cfg, const fs::path& root, bool blind) {
  const fs::path dir = make_run_dir(root, "capture");
  pod::write_json(dir / "config.json", pod::config_to_json(cfg));
  const auto sc = pod::make_scenario(cfg);
  pod::save_video(dir / "video", sc.video, !blind);
  pod::write_manifest(dir);
  std::printf("captured %d frames to %s\n", sc.video.size(), (dir / "video").c_str());
  return 0;
}

int cmd_cycle(const pod::ExperimentConfig& cfg, const fs::path& root, const std::string& video_dir) {
  const fs::path dir = make_run_dir(root, "cycle");
  std::fprintf(stderr, "run directory %s\n", dir.c_str());
  const auto res = pod::run_cycle(cfg, scenario_for(cfg, video_dir), dir, stderr_logger());
  print_records(res.records);
  return 0;
}

int cmd_ablate(const pod::ExperimentConfig& cfg, const fs::path& root, std::vector<std::string> names,
               const std::string& video_dir) {
  if (names.empty()) names = {"none", "no_view_aug", "no_baseline_init", "no_multiview", "baseline_only"};
  std::vector<pod::Ablation> ablations;
  for (const auto& n : names) ablations.push_back(pod::parse_ablation(n));  // reject typos before any work
  const fs::path dir = make_run_dir(root, "ablate");
  std::fprintf(stderr, "run directory %s\n", dir.c_str());
  const auto sc = scenario_for(cfg, video_dir);
  json summary = json::array();
  std::ofstream csv(dir / "ablation.csv");
  csv << "ablation,mse";
  for (double a : pod::kDefaultAlphas) csv << ",pcp_" << pod::alpha_key(a);
  csv << "\n";
  csv.precision(10);
  const auto log = stderr_logger();
  for (auto a : ablations) {
    const std::string name = pod::to_string(a);
    const auto res = pod::run_ablation(cfg, a, sc, dir / name, [&](const std::string& m) { log(name + ": " + m); });
    const auto& m = pod::final_metrics(res);
    auto row = pod::metrics_to_json(m, static_cast<int>(res.loops.size()) - 1, sc.video.size());
    row["ablation"] = name;
    summary.push_back(row);
    csv << name << "," << m.mse;
    for (double al : pod::kDefaultAlphas) csv << "," << m.pcp.at(al);
    csv << "\n";
    std::printf("%-18s mse %.5f %s\n", name.c_str(), m.mse, pcp_line(m.pcp).c_str());
  }
  csv.close();
  pod::write_json(dir / "ablation.json", summary);
  pod::write_manifest(dir);
  return 0;
}

bool pcp_monotone(const json& pcp) {
  std::map<double, double> m;
  for (const auto& [k, v] : pcp.items()) m[std::stod(k)] = v.get<double>();
  double prev = -1.0;
  for (const auto& [a, v] : m) {
    if (v < prev || v < 0.0 || v > 1.0) return false;
    prev = v;
  }
  return true;
}

// Every "pcp" object in a metrics-bearing JSON file must be monotone in alpha.
int check_pcp_files(const fs::path& dir) {
  int bad = 0;
  std::function<void(const json&, const fs::path&)> walk = [&](const json& j, const fs::path& file) {
    if (j.is_object()) {
      for (const auto& [k, v] : j.items()) {
        if (k == "pcp" && v.is_object() && !pcp_monotone(v)) {
          std::printf("non-monotone pcp in %s\n", file.c_str());
          ++bad;
        }
        walk(v, file);
      }
    } else if (j.is_array()) {
      for (const auto& v : j) walk(v, file);
    }
  };
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().extension() != ".json") continue;
    std::ifstream is(e.path());
    const json j = json::parse(is, nullptr, false);
    if (!j.is_discarded()) walk(j, e.path());
  }
  return bad;
}

int cmd_eval(const fs::path& run, const std::string& trajectory, bool as_json) {
  int status = 0;
  if (fs::exists(run / "manifest.json")) {
    const auto bad = pod::verify_manifest(run);
    for (const auto& b : bad) std::printf("hash mismatch: %s\n", b.c_str());
    if (!bad.empty()) status = 1;
    else if (!as_json) std::printf("manifest verified\n");
  } else {
    std::printf("no manifest in %s\n", run.c_str());
    status = 1;
  }
  if (check_pcp_files(run) > 0) status = 1;
  if (!trajectory.empty()) {
    const auto cfg = pod::load_config(run / "config.json");
    const auto sc = pod::make_scenario(cfg);
    const auto est = pod::load_trajectory(trajectory);
    const auto m = pod::evaluate(sc.tpl, est, sc.video.gt_poses, sc.points);
    if (as_json) std::cout << pod::metrics_to_json(m, -1, sc.video.size()).dump(2) << "\n";
    else std::printf("%s: mse %.5f %s\n", trajectory.c_str(), m.mse, pcp_line(m.pcp).c_str());
  } else if (fs::exists(run / "report.json")) {
    const auto rows = pod::load_report(run);
    if (as_json) {
      json arr = json::array();
      for (const auto& r : rows) arr.push_back(pod::record_to_json(r));
      std::cout << arr.dump(2) << "\n";
    } else {
      print_records(rows);
    }
  }
  return status;
}

void write_mask_pgm(const fs::path& path, const pod::Observation& obs) {
  std::ofstream os(path, std::ios::binary);
  pod::require(static_cast<bool>(os), pod::ErrorKind::kIo, "cannot write " + path.string());
  os << "P5\n" << obs.width() << " " << obs.height() << "\n255\n";
  for (auto m : obs.mask) os.put(static_cast<char>(m ? 255 : 0));
}

int cmd_render_debug(const pod::ExperimentConfig& cfg, const fs::path& root, int frame, const std::string& trajectory,
                     const std::string& video_dir) {
  const auto sc = scenario_for(cfg, video_dir);
  pod::require(frame >= 0 && frame < sc.video.size(), pod::ErrorKind::kInvalidArgument,
               "frame " + std::to_string(frame) + " outside the video");
  const fs::path dir = make_run_dir(root, "render-debug");
  pod::write_json(dir / "config.json", pod::config_to_json(cfg));
  const std::string stem = (dir / ("frame_" + std::to_string(frame))).string();
  const auto gt = pod::render(sc.tpl, sc.video.gt_poses[frame], sc.video.camera);
  pod::write_feature_image(stem + "_gt.bin", gt);
  pod::write_preview_ppm(stem + "_gt.ppm", gt);
  const auto& obs = sc.video.observations[frame];
  pod::write_preview_ppm(stem + "_observed.ppm", obs.image);
  write_mask_pgm(stem + "_mask.pgm", obs);
  if (!trajectory.empty()) {
    const auto est = pod::load_trajectory(trajectory);
    pod::require(est.size() == sc.video.size(), pod::ErrorKind::kShapeMismatch, "trajectory length differs from video");
    const auto img = pod::render(sc.tpl, est.poses[frame], sc.video.camera);
    pod::write_feature_image(stem + "_estimate.bin", img);
    pod::write_preview_ppm(stem + "_estimate.ppm", img);
  }
  pod::write_manifest(dir);
  std::printf("wrote %s_*\n", stem.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale articulated pose lab"};
  app.require_subcommand(1);
  std::string out = "runs";
  app.add_option("-o,--out", out, "root for timestamped run directories");

  ConfigFlags cap_flags, cyc_flags, abl_flags, dbg_flags;
  bool blind = false;
  auto* capture = app.add_subcommand("capture", "render a synthetic video and save it");
  add_config_flags(capture, cap_flags);
  capture->add_flag("--blind", blind, "omit ground-truth poses");

  std::string cycle_video;
  auto* cycle = app.add_subcommand("cycle", "run baseline, predictor, optimization and distillation loops");
  add_config_flags(cycle, cyc_flags);
  cycle->add_option("--video", cycle_video, "saved capture to use instead of rendering one")->check(CLI::ExistingDirectory);

  std::vector<std::string> ablations;
  std::string ablate_video;
  auto* ablate = app.add_subcommand("ablate", "run the cycle with stages switched off");
  add_config_flags(ablate, abl_flags);
  ablate->add_option("-a,--ablation", ablations,
                     "none, no_view_aug, no_baseline_init, no_multiview, baseline_only (default: all)")
      ->delimiter(',');
  ablate->add_option("--video", ablate_video, "saved capture to use")->check(CLI::ExistingDirectory);

  std::string eval_run, eval_traj;
  bool eval_json = false;
  auto* eval = app.add_subcommand("eval", "verify a run directory and print its metrics");
  eval->add_option("run", eval_run, "run directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--trajectory", eval_traj, "evaluate this trajectory against the run's ground truth")
      ->check(CLI::ExistingFile);
  eval->add_flag("--json", eval_json, "print JSON");

  int dbg_frame = 0;
  std::string dbg_traj, dbg_video;
  auto* debug = app.add_subcommand("render-debug", "dump renders and observations of one frame");
  add_config_flags(debug, dbg_flags);
  debug->add_option("--frame", dbg_frame, "frame index");
  debug->add_option("--trajectory", dbg_traj, "also render this trajectory")->check(CLI::ExistingFile);
  debug->add_option("--video", dbg_video, "saved capture to use")->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*capture) return cmd_capture(resolve_config(cap_flags), out, blind);
    if (*cycle) return cmd_cycle(resolve_config(cyc_flags), out, cycle_video);
    if (*ablate) return cmd_ablate(resolve_config(abl_flags), out, ablations, ablate_video);
    if (*eval) return cmd_eval(eval_run, eval_traj, eval_json);
    if (*debug) return cmd_render_debug(resolve_config(dbg_flags), out, dbg_frame, dbg_traj, dbg_video);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
