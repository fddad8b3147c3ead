// drn: dataset synthesis, training, evaluation, demo overlays and plots.
//
// Settings resolve as defaults < --config file < environment < flags.
// Environment: DRN_SEED, DRN_ABLATION, and DRN_OUT_ROOT (default parent of
// the output directory when neither --out nor the file names one).
// Failures print one line to stderr:
//   drn: error kind=<usage|config|io|mismatch|nonfinite|runtime> verb=<verb> message="..."

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "drn/config.hpp"
#include "drn/evaluation.hpp"
#include "drn/training.hpp"
#include "svg_plot.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace drn {
namespace {

struct CliError : std::runtime_error {
  std::string kind;
  CliError(std::string k, const std::string& msg) : std::runtime_error(msg), kind(std::move(k)) {}
};

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out += c;
  }
  return out + "\"";
}

// ---------------------------------------------------------------- options

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> ablation;
  std::string out;
  std::vector<std::string> sets;  // section.key=json
};

struct SynthArgs {
  int count = 20;
  std::string angles;
  bool augment = false;
};

struct TrainArgs {
  std::string data;
  std::optional<int> steps;
  std::string resume;
  int stop_after = -1;
};

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  bool no_nms = false;
  bool gt_as_pred = false;
  double score_floor = 0.0;
};

struct DemoArgs {
  std::string checkpoint;
  std::string image;
  double score_floor = 0.3;
};

struct PlotArgs {
  std::string log;
  std::string report;
};

struct Resolved {
  RunConfig config;
  bool out_from_file = false;
};

json parse_set_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return text;  // bare strings such as --set model.train_angle_source=predicted
  }
}

Resolved resolve(const Common& c, const std::string& verb, const std::optional<RunConfig>& base) {
  Resolved r;
  r.config = base.value_or(RunConfig{});
  std::optional<std::string> ablation;
  try {
    if (!c.config_path.empty()) {
      std::ifstream in(c.config_path);
      if (!in) throw CliError("io", "cannot open config " + c.config_path);
      json j;
      try {
        j = json::parse(in);
      } catch (const json::parse_error& e) {
        throw CliError("config", c.config_path + ": " + e.what());
      }
      merge(r.config, j);
      r.out_from_file = j.contains("out_dir");
      if (j.contains("ablation")) ablation = r.config.ablation;
    }
    if (const char* s = std::getenv("DRN_SEED"); s && *s) {
      try {
        r.config.seed = std::stoull(s);
      } catch (const std::exception&) {
        throw CliError("config", std::string("DRN_SEED is not an integer: ") + s);
      }
    }
    if (const char* a = std::getenv("DRN_ABLATION"); a && *a) ablation = a;
    if (c.seed) r.config.seed = *c.seed;
    if (c.ablation) ablation = *c.ablation;
    if (ablation) {
      r.config.ablation = *ablation;
      r.config.model.apply(parse_ablation(*ablation));
    }
    for (const std::string& s : c.sets) {
      const auto eq = s.find('='), dot = s.find('.');
      if (eq == std::string::npos) throw CliError("usage", "--set expects section.key=value, got '" + s + "'");
      const std::string path = s.substr(0, eq);
      json patch;
      if (dot == std::string::npos || dot > eq) {
        patch[path] = parse_set_value(s.substr(eq + 1));
      } else {
        const std::string section = path.substr(0, dot);
        patch[section][path.substr(dot + 1)] = parse_set_value(s.substr(eq + 1));
      }
      merge(r.config, patch);
    }
  } catch (const std::invalid_argument& e) {
    throw CliError("config", e.what());
  }

  if (!c.out.empty()) {
    r.config.out_dir = c.out;
  } else if (!r.out_from_file) {
    const char* root = std::getenv("DRN_OUT_ROOT");
    r.config.out_dir = (fs::path(root && *root ? root : "runs") / verb).string();
  }
  try {
    r.config.validate();
  } catch (const std::invalid_argument& e) {
    throw CliError("config", e.what());
  }
  return r;
}

void prepare_out(const RunConfig& config) {
  std::error_code ec;
  fs::create_directories(config.out_dir, ec);
  if (ec) throw CliError("io", "cannot create " + config.out_dir + ": " + ec.message());
  write_file_atomic(fs::path(config.out_dir) / "config.json", to_json(config).dump(2) + "\n");
  std::cerr << "resolved config: " << to_json(config).dump() << "\n";
}

std::vector<Scene> load_data(const std::string& dir) {
  if (dir.empty()) throw CliError("usage", "--data is required");
  if (!fs::is_directory(dir)) throw CliError("io", "dataset directory not found: " + dir);
  try {
    return load_dataset(dir);
  } catch (const std::exception& e) {
    throw CliError("io", e.what());
  }
}

std::vector<double> parse_angles(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw CliError("usage", "bad angle '" + item + "' in --angles");
    }
  }
  return out;
}

std::string scene_id(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04d.png", i);
  return buf;
}

// ------------------------------------------------------------------ synth

void cmd_synth(const Common& c, const SynthArgs& a) {
  if (a.count <= 0) throw CliError("usage", "--count must be positive");
  const std::vector<double> angles = parse_angles(a.angles);
  if (a.augment && angles.empty()) throw CliError("usage", "--augment needs --angles");
  const Resolved r = resolve(c, "synth", std::nullopt);
  const RunConfig& cfg = r.config;

  std::vector<Scene> scenes;
  json entries = json::array();
  for (int i = 0; i < a.count; ++i) {
    const std::uint64_t seed = step_rng(cfg.seed, i, 7)();
    try {
      scenes.push_back(generate_scene(cfg.scene, seed, scene_id(i)));
    } catch (const std::runtime_error& e) {
      throw CliError("runtime", e.what());
    }
  }
  if (a.augment) scenes = rotate_dataset(scenes, angles, true);
  for (const Scene& s : scenes) {
    entries.push_back({{"image", s.annotation.image_id},
                       {"seed", s.annotation.provenance.seed},
                       {"rotation_deg", s.annotation.provenance.rotation_deg},
                       {"objects", s.annotation.objects.size()}});
  }

  prepare_out(cfg);
  write_dataset(cfg.out_dir, scenes);
  const json manifest = {{"generator_version", kGeneratorVersion},
                         {"base_seed", cfg.seed},
                         {"originals", a.count},
                         {"angles", a.augment ? angles : std::vector<double>{}},
                         {"count", scenes.size()},
                         {"scenes", entries}};
  write_file_atomic(fs::path(cfg.out_dir) / "manifest.json", manifest.dump(2) + "\n");
  std::cout << "wrote " << scenes.size() << " scenes to " << cfg.out_dir << "\n";
}

// ------------------------------------------------------------------ train

json parameter_report(Detector& model) {
  std::map<std::string, std::size_t> groups;
  std::size_t total = 0;
  for (const Parameter* p : model.parameters()) {
    if (!p->trainable) continue;
    std::string g = p->name.substr(0, p->name.find('.'));
    if (p->name.find(".generator.") != std::string::npos ||
        p->name.find(".projection.") != std::string::npos) {
      g = "dynamic";
    } else if (g == "head") {
      g = "heads";
    }
    groups[g] += p->numel();
    total += p->numel();
  }
  json j = {{"total", total}};
  for (const char* g : {"backbone", "fsm", "heads", "dynamic"}) j[g] = groups[g];
  return j;
}

void truncate_log(const fs::path& path, std::int64_t last_step) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::string line, kept;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (json::parse(line).at("step").get<std::int64_t>() <= last_step) kept += line + "\n";
  }
  in.close();
  write_file_atomic(path, kept);
}

void rewrite_csv(const fs::path& jsonl, const fs::path& csv) {
  std::ifstream in(jsonl);
  std::string line, out = "step,lr,total,heatmap,size,offset,angle,grad_norm\n";
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    std::ostringstream o;
    o.precision(10);
    o << j["step"].get<std::int64_t>() << ',' << j["lr"].get<double>() << ',' << j["total"].get<double>()
      << ',' << j["heatmap"].get<double>() << ',' << j["size"].get<double>() << ','
      << j["offset"].get<double>() << ',' << j["angle"].get<double>() << ','
      << j["grad_norm"].get<double>() << "\n";
    out += o.str();
  }
  write_file_atomic(csv, out);
}

void cmd_train(const Common& c, const TrainArgs& a) {
  std::optional<RunConfig> base;
  if (!a.resume.empty()) {
    try {
      base = read_checkpoint_info(a.resume).config;
    } catch (const std::exception& e) {
      throw CliError("io", e.what());
    }
  }
  Resolved r = resolve(c, "train", base);
  if (a.steps) r.config.train.steps = *a.steps;
  r.config.validate();
  const std::vector<Scene> scenes = load_data(a.data);

  Trainer trainer(r.config, scenes);
  if (!a.resume.empty()) {
    try {
      trainer.resume(a.resume);
    } catch (const std::runtime_error& e) {
      throw CliError("mismatch", e.what());
    }
  }
  prepare_out(r.config);
  const fs::path out = r.config.out_dir;
  fs::create_directories(out / "checkpoints");
  const json params = parameter_report(trainer.model());
  write_file_atomic(out / "params.json", params.dump(2) + "\n");
  std::cout << "parameters " << params.dump() << "\n";

  const fs::path log_path = out / "train_log.jsonl";
  if (a.resume.empty()) {
    write_file_atomic(log_path, "");
  } else {
    truncate_log(log_path, trainer.step());
  }
  std::ofstream log(log_path, std::ios::app);
  if (!log) throw CliError("io", "cannot open " + log_path.string());

  const TrainConfig& tc = r.config.train;
  const auto t0 = std::chrono::steady_clock::now();
  bool stopped = false;
  try {
    while (trainer.step() < tc.steps) {
      if (a.stop_after >= 0 && trainer.step() >= a.stop_after) {
        stopped = true;
        break;
      }
      const StepLog s = trainer.train_step();
      log << to_json(s).dump() << "\n";
      log.flush();
      if (s.step % tc.log_every == 0 || s.step == tc.steps) {
        const double el = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("step %lld/%d loss %.5f (hm %.5f size %.5f off %.5f ang %.5f) lr %.2e %.1fs\n",
                    static_cast<long long>(s.step), tc.steps, s.loss.total, s.loss.heatmap,
                    s.loss.size, s.loss.offset, s.loss.angle, s.learning_rate, el);
        std::fflush(stdout);
      }
      if (s.step % tc.checkpoint_every == 0) {
        char name[32];
        std::snprintf(name, sizeof name, "step_%06lld.ckpt", static_cast<long long>(s.step));
        trainer.save(out / "checkpoints" / name);
      }
    }
  } catch (const NonFiniteLoss& e) {
    throw CliError("nonfinite", e.what());
  }
  log.close();
  rewrite_csv(log_path, out / "train_log.csv");
  const fs::path final_path = out / (stopped ? "interrupted.ckpt" : "final.ckpt");
  trainer.save(final_path);
  std::cout << (stopped ? "stopped at step " : "finished at step ") << trainer.step() << ", checkpoint "
            << final_path.string() << "\n";
}

// ------------------------------------------------------------------- eval

std::unique_ptr<Detector> load_model(const Common& c, const std::string& checkpoint, Resolved& r,
                                     const std::string& verb) {
  if (checkpoint.empty()) throw CliError("usage", "--checkpoint is required");
  CheckpointInfo info;
  try {
    info = read_checkpoint_info(checkpoint);
  } catch (const std::exception& e) {
    throw CliError("io", e.what());
  }
  r = resolve(c, verb, info.config);
  auto model = std::make_unique<Detector>(r.config.model);
  try {
    load_checkpoint(checkpoint, *model);
  } catch (const std::runtime_error& e) {
    throw CliError("mismatch", e.what());
  }
  return model;
}

void cmd_eval(const Common& c, const EvalArgs& a) {
  Resolved r;
  std::unique_ptr<Detector> model;
  if (a.gt_as_pred) {
    r = resolve(c, "eval", std::nullopt);
  } else {
    model = load_model(c, a.checkpoint, r, "eval");
  }
  const std::vector<Scene> scenes = load_data(a.data);
  InferenceOptions opts;
  opts.nms = !a.no_nms;
  opts.score_floor = a.score_floor;

  std::vector<SceneAnnotation> gts;
  std::vector<std::vector<Detection>> dets;
  for (const Scene& s : scenes) {
    gts.push_back(s.annotation);
    std::vector<Detection> d;
    if (a.gt_as_pred) {
      for (const ObjectAnnotation& o : s.annotation.objects) d.push_back({o.box, o.class_id, 1.0});
      if (opts.nms) d = angle_soft_nms(std::move(d), opts.nms_iou, opts.nms_floor);
    } else {
      d = detect(*model, s.image, opts);
    }
    dets.push_back(std::move(d));
  }
  const MetricReport report = coco_metrics(gts, dets);
  prepare_out(r.config);
  const fs::path out = r.config.out_dir;
  write_file_atomic(out / "report.json", report_to_json(report));
  write_detections(out / "detections.jsonl", gts, dets);
  std::printf("images %d gt %d detections %d mAP50 %.4f mAP75 %.4f mAP %.4f AR%d %.4f\n",
              report.num_images, report.num_gt, report.num_detections, report.ap50, report.ap75,
              report.map, report.max_detections, report.ar);
}

// ------------------------------------------------------------------- demo

const Rgb kClassColors[] = {{255, 60, 60}, {60, 220, 60}, {70, 130, 255}, {255, 200, 40}, {220, 80, 255}};

void cmd_demo(const Common& c, const DemoArgs& a) {
  Resolved r;
  auto model = load_model(c, a.checkpoint, r, "demo");
  if (a.image.empty()) throw CliError("usage", "--image is required");
  Image image;
  try {
    image = read_png(a.image);
  } catch (const std::exception& e) {
    throw CliError("io", e.what());
  }
  InferenceOptions opts;
  opts.score_floor = a.score_floor;
  const std::vector<Detection> dets = detect(*model, image, opts);

  Image canvas = image;
  for (const Detection& d : dets) {
    const Rgb color = kClassColors[d.class_id % 5];
    draw_polygon(canvas, polygon_from_septet(d.box), color, 1);
    char label[32];
    std::snprintf(label, sizeof label, "c%d %.2f", d.class_id, d.score);
    const Vec2 ctr = d.box.center();
    draw_text(canvas, static_cast<int>(ctr.x) - 8, static_cast<int>(ctr.y) - 2, label, color);
  }
  prepare_out(r.config);
  const fs::path out = r.config.out_dir;
  write_png(out / "demo.png", canvas);
  SceneAnnotation meta;
  meta.image_id = fs::path(a.image).filename().string();
  meta.width = image.width;
  meta.height = image.height;
  write_detections(out / "detections.jsonl", {meta}, {dets});
  std::cout << "drew " << dets.size() << " detections to " << (out / "demo.png").string() << "\n";
}

// ------------------------------------------------------------------- plot

void cmd_plot(const Common& c, const PlotArgs& a) {
  if (a.log.empty() && a.report.empty()) throw CliError("usage", "plot needs --log and/or --report");
  const Resolved r = resolve(c, "plot", std::nullopt);
  const fs::path out = r.config.out_dir;
  std::vector<std::pair<fs::path, std::string>> files;

  if (!a.log.empty()) {
    std::ifstream in(a.log);
    if (!in) throw CliError("io", "cannot open training log " + a.log);
    std::vector<double> steps;
    std::map<std::string, std::vector<double>> terms;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        const json j = json::parse(line);
        steps.push_back(j.at("step").get<double>());
        for (const char* t : {"heatmap", "size", "offset", "angle"}) terms[t].push_back(j.at(t).get<double>());
      } catch (const json::exception& e) {
        throw CliError("io", a.log + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
    if (steps.empty()) throw CliError("io", "training log " + a.log + " is empty");
    for (const char* t : {"heatmap", "size", "offset", "angle"}) {
      plot::Chart chart;
      chart.title = std::string(t) + " loss";
      chart.x_label = "step";
      chart.y_label = "loss";
      chart.log_y = true;
      chart.series.push_back({"raw", steps, terms[t], "#9ecae1", 1.0});
      chart.series.push_back({"mean of 50", steps, plot::moving_average(terms[t], 50), "#08519c", 2.0});
      files.emplace_back(out / (std::string("loss_") + t + ".svg"), plot::render_svg(chart));
    }
  }
  if (!a.report.empty()) {
    std::ifstream in(a.report);
    if (!in) throw CliError("io", "cannot open report " + a.report);
    json j;
    try {
      j = json::parse(in);
      for (const auto& [cls, entry] : j.at("classes").items()) {
        plot::Chart chart;
        chart.title = "precision/recall, class " + cls + ", IoU 0.5";
        chart.x_label = "recall";
        chart.y_label = "precision";
        chart.x_min = chart.y_min = 0.0;
        chart.x_max = chart.y_max = 1.0;
        plot::Series s;
        s.label = "AP " + std::to_string(entry.at("ap").at(0).get<double>()).substr(0, 5);
        s.color = "#d62728";
        for (const auto& pt : entry.at("pr_curve_50")) {
          s.x.push_back(pt.at(0).get<double>());
          s.y.push_back(pt.at(1).get<double>());
        }
        chart.series.push_back(std::move(s));
        files.emplace_back(out / ("pr_class" + cls + ".svg"), plot::render_svg(chart));
      }
    } catch (const json::exception& e) {
      throw CliError("io", a.report + ": " + e.what());
    }
  }
  prepare_out(r.config);
  for (const auto& [path, text] : files) {
    write_file_atomic(path, text);
    std::cout << "wrote " << path.string() << "\n";
  }
}

}  // namespace
}  // namespace drn

int main(int argc, char** argv) {
  using namespace drn;
  CLI::App app{"oriented object detection with dynamic refinement", "drn"};
  app.require_subcommand(1);
  app.fallthrough();

  Common common;
  app.add_option("--config", common.config_path, "JSON run config");
  app.add_option("--seed", common.seed, "random seed");
  app.add_option("--ablation", common.ablation, "baseline | fsm | fsm+drhc | full");
  app.add_option("--out", common.out, "output directory");
  app.add_option("--set", common.sets, "override, e.g. train.steps=200 or model.width=32");

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "write a synthetic dataset");
  s->add_option("--count", synth.count, "number of base scenes");
  s->add_option("--angles", synth.angles, "comma-separated rotation angles in degrees");
  s->add_flag("--augment", synth.augment, "add one rotated copy per angle");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train a detector");
  t->add_option("--data", train.data, "dataset directory")->required();
  t->add_option("--steps", train.steps, "total optimisation steps");
  t->add_option("--resume", train.resume, "checkpoint to resume from");
  t->add_option("--stop-after", train.stop_after, "stop once this step is reached");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  e->add_option("--checkpoint", eval.checkpoint, "model checkpoint");
  e->add_option("--data", eval.data, "dataset directory")->required();
  e->add_flag("--no-nms", eval.no_nms, "skip angle soft-NMS");
  e->add_flag("--gt-as-pred", eval.gt_as_pred, "score the ground truth as detections");
  e->add_option("--score-floor", eval.score_floor, "drop detections below this score");

  DemoArgs demo;
  auto* d = app.add_subcommand("demo", "draw detections on one image");
  d->add_option("--checkpoint", demo.checkpoint, "model checkpoint")->required();
  d->add_option("--image", demo.image, "input PNG")->required();
  d->add_option("--score-floor", demo.score_floor, "minimum score to draw");

  PlotArgs plot_args;
  auto* p = app.add_subcommand("plot", "loss and precision/recall figures");
  p->add_option("--log", plot_args.log, "train_log.jsonl");
  p->add_option("--report", plot_args.report, "report.json from eval");

  std::string verb = "none";
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    if (!app.get_subcommands().empty()) verb = app.get_subcommands().front()->get_name();
    std::cerr << "drn: error kind=usage verb=" << verb << " message=" << quote(ex.what()) << "\n";
    return 2;
  }
  verb = app.get_subcommands().front()->get_name();
  try {
    if (verb == "synth") cmd_synth(common, synth);
    if (verb == "train") cmd_train(common, train);
    if (verb == "eval") cmd_eval(common, eval);
    if (verb == "demo") cmd_demo(common, demo);
    if (verb == "plot") cmd_plot(common, plot_args);
  } catch (const CliError& ex) {
    std::cerr << "drn: error kind=" << ex.kind << " verb=" << verb << " message=" << quote(ex.what()) << "\n";
    return ex.kind == "usage" ? 2 : 1;
  } catch (const std::invalid_argument& ex) {
    std::cerr << "drn: error kind=config verb=" << verb << " message=" << quote(ex.what()) << "\n";
    return 1;
  } catch (const std::exception& ex) {
    std::cerr << "drn: error kind=runtime verb=" << verb << " message=" << quote(ex.what()) << "\n";
    return 1;
  }
  return 0;
}
