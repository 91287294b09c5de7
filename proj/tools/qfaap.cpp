#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "qfaap/aqp.hpp"
#include "qfaap/data.hpp"
#include "qfaap/harness.hpp"
#include "qfaap/io.hpp"
#include "qfaap/model.hpp"
#include "qfaap/policy.hpp"
#include "qfaap/pqgd.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace qfaap;

namespace {

// Flags are collected as JSON overrides; the --config file is merged last.
struct Command {
  std::string name;
  CLI::App* app = nullptr;
  std::map<std::string, std::string> raw;  // key -> flag text
  std::string config_file;
  std::string dataset;
  std::string model;
  std::string patch;
  std::string out;

  void number(const std::string& flag, const std::string& key, const std::string& help) {
    app->add_option(flag, raw[key], help);
  }

  ExperimentConfig resolve() const {
    ExperimentConfig cfg = ExperimentConfig::defaults(name);
    for (const auto& [key, text] : raw) {
      if (text.empty()) continue;
      const json& slot = cfg.params().at(key);
      if (slot.is_string()) {
        cfg.set(key, text);
      } else if (slot.is_boolean()) {
        cfg.set(key, text == "1" || text == "true");
      } else if (slot.is_number_integer()) {
        const double v = parse_number_or_ratio(text);
        if (v != std::floor(v)) throw InvalidInput("flag for '" + key + "' needs an integer");
        cfg.set(key, static_cast<long long>(v));
      } else {
        cfg.set(key, parse_number_or_ratio(text));
      }
    }
    if (!config_file.empty()) cfg.merge(json::parse(read_file(config_file)));
    return cfg;
  }
};

fs::path dataset_root(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("QFAAP_DATA_DIR"); env && *env) return env;
  throw InvalidInput("no dataset: pass --dataset or set QFAAP_DATA_DIR");
}

Dataset load_dataset(const fs::path& root, int limit) {
  if (!fs::exists(root)) throw InvalidInput("dataset not found: " + root.string());
  Dataset d;
  if (fs::exists(root / "scenes") || fs::exists(root / "meta.json") || root.filename() == "scenes") {
    d = load_synthetic(root);
  } else {
    CornellReport rep;
    d = load_cornell(root, 224, &rep);
    std::cerr << "cornell: " << rep.records << " records, " << rep.skipped_records << " skipped, "
              << rep.skipped_rectangles << " rectangles skipped\n";
  }
  if (limit > 0 && static_cast<int>(d.size()) > limit) d.resize(limit);
  return d;
}

Dataset test_split(const Dataset& all, const ExperimentConfig& cfg) {
  if (cfg.params().contains("all") && cfg.get<bool>("all")) return all;
  return split_imagewise(all, cfg.get<double>("split"), cfg.seed()).second;
}

fs::path require_out(const std::string& out) {
  if (out.empty()) throw InvalidInput("--out is required");
  return out;
}

void print_value(double v) { std::cout << std::fixed << std::setprecision(3) << v << std::endl; }

// ---- synth -------------------------------------------------------------------

int run_synth(const Command& c) {
  const ExperimentConfig cfg = c.resolve();
  const fs::path out = require_out(c.out);
  SyntheticSceneSpec spec;
  spec.canvas = cfg.get<int>("canvas");
  spec.min_objects = cfg.get<int>("min_objects");
  spec.max_objects = cfg.get<int>("max_objects");
  spec.adjacency_px = cfg.get<int>("adjacency_px");
  spec.max_hand_overlap = cfg.get<double>("max_hand_overlap");
  spec.seed = cfg.seed();
  const std::string hand = cfg.get<std::string>("hand");
  if (hand == "none") {
    spec.hand = HandPlacement::None;
  } else if (hand == "near") {
    spec.hand = HandPlacement::NearBestObject;
  } else if (hand == "random") {
    spec.hand = HandPlacement::Random;
  } else {
    throw InvalidInput("--hand must be none, near or random");
  }
  const int n = cfg.get<int>("scenes");
  if (n < 1) throw InvalidInput("--scenes must be >= 1");
  const Dataset d = gen_synthetic(spec, n);
  save_synthetic(out, d);
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& r = d[i];
    rows.push_back({static_cast<double>(i), static_cast<double>(r.objects ? r.objects->max_id() : 0),
                    static_cast<double>(r.labels.size()),
                    static_cast<double>(r.hand_mask ? r.hand_mask->count() : 0)});
  }
  write_file_atomic(out / "synth_stats.csv",
                    csv_with_header(cfg.hash(), cfg.seed(), "scene,objects,labels,hand_pixels", rows));
  write_file_atomic(out / "manifest.json",
                    json{{"config_hash", cfg.hash()}, {"seed", cfg.seed()}, {"config", cfg.params()}}.dump(2) + "\n");
  std::cout << "wrote " << n << " scenes to " << (out / "scenes").string() << "\n";
  return 0;
}

// ---- train -------------------------------------------------------------------

int run_train(const Command& c) {
  const ExperimentConfig cfg = c.resolve();
  const fs::path out = require_out(c.out);
  const Dataset all = load_dataset(dataset_root(c.dataset), cfg.get<int>("limit"));
  auto [train_set, test_set] = split_imagewise(all, cfg.get<double>("split"), cfg.seed());
  ModelConfig mc;
  mc.architecture = cfg.get<std::string>("architecture");
  mc.input_size = all.front().rows();
  mc.width_scale = cfg.get<double>("width_scale");
  mc.seed = cfg.seed();
  GraspNet net(mc);
  TrainConfig tc;
  tc.epochs = cfg.get<int>("epochs");
  tc.batch_size = cfg.get<int>("batch");
  tc.learning_rate = cfg.get<double>("lr");
  const std::string opt = cfg.get<std::string>("optimizer");
  if (opt != "sgd" && opt != "adam") throw InvalidInput("optimizer must be sgd or adam");
  tc.optimizer = opt == "adam" ? OptimizerKind::Adam : OptimizerKind::Sgd;
  tc.augmentation = cfg.get<bool>("augmentation");
  tc.seed = cfg.seed();
  tc.selection.smooth_sigma = cfg.get<double>("smooth_sigma");
  std::vector<std::vector<double>> rows;
  train(net, train_set, test_set, tc, [&](const EpochMetrics& m) {
    rows.push_back({static_cast<double>(m.epoch), m.loss, m.lq, m.ltheta, m.lw, m.oacc});
    std::cerr << "epoch " << m.epoch << " loss " << m.loss << " oacc " << m.oacc << "\n";
  });
  save_weights(out / "model.qw", net, cfg.hash());
  write_file_atomic(out / "train_metrics.csv",
                    csv_with_header(cfg.hash(), cfg.seed(), "epoch,loss,lq,ltheta,lw,oacc", rows));
  print_value(rows.back()[5]);
  return 0;
}

// ---- optimize-patch -------------------------------------------------------------

int run_optimize(const Command& c) {
  const ExperimentConfig cfg = c.resolve();
  const fs::path out = require_out(c.out);
  if (c.model.empty()) throw InvalidInput("--model is required");
  const fs::path root = dataset_root(c.dataset);
  const Dataset all = load_dataset(root, cfg.get<int>("limit"));
  auto [train_set, test_set] = split_imagewise(all, cfg.get<double>("split"), cfg.seed());
  const auto model = load_model(c.model);
  AqpConfig ac;
  ac.alpha = cfg.get<double>("alpha");
  ac.beta = cfg.get<double>("beta");
  ac.gamma = cfg.get<double>("gamma");
  ac.learning_rate = cfg.get<double>("lr");
  ac.lr_milestones = cfg.get<std::vector<int>>("milestones");
  ac.lr_decay = cfg.get<double>("lr_decay");
  ac.epochs = cfg.get<int>("epochs");
  ac.batch_size = cfg.get<int>("batch");
  ac.min_scale = cfg.get<double>("min_scale");
  ac.max_scale = cfg.get<double>("max_scale");
  ac.qacc_threshold = cfg.get<double>("threshold");
  ac.seed = cfg.seed();
  Patch init = c.patch.empty() ? init_patch(cfg.get<int>("patch_size"), cfg.seed()) : load_patch(c.patch);
  std::vector<std::vector<double>> rows;
  AqpResult res = optimize_patch(*model, train_set, test_set, ac, init, [&](const AqpEpoch& e) {
    rows.push_back({static_cast<double>(e.epoch), e.qacc, e.l_aqp, e.l_qp, e.l_tv, e.l_d});
    std::cerr << "epoch " << e.epoch << " qacc " << e.qacc << " l_aqp " << e.l_aqp << "\n";
  });
  res.patch.dataset_id = root.string();
  res.patch.config_hash = cfg.hash();
  save_patch(out / "patch.png", res.patch);
  write_file_atomic(out / "patch_metrics.csv",
                    csv_with_header(cfg.hash(), cfg.seed(), "epoch,qacc,l_aqp,l_qp,l_tv,l_d", rows));
  print_value(res.patch.final_qacc);
  return 0;
}

// ---- eval --------------------------------------------------------------------

PqgdConfig pqgd_from(const ExperimentConfig& cfg) {
  PqgdConfig p;
  p.epsilon = cfg.get<double>("eps");
  p.step = cfg.get<double>("pqgd_step");
  p.iterations = cfg.get<int>("pqgd_iters");
  p.validate();
  return p;
}

int run_eval(const Command& c) {
  const ExperimentConfig cfg = c.resolve();
  if (c.model.empty()) throw InvalidInput("--model is required");
  const Dataset all = load_dataset(dataset_root(c.dataset), cfg.get<int>("limit"));
  const Dataset test = test_split(all, cfg);
  const auto model = load_model(c.model);
  const std::string metric = cfg.get<std::string>("metric");
  const PqgdConfig pqgd = pqgd_from(cfg);
  SelectionConfig sel;
  sel.smooth_sigma = cfg.get<double>("smooth_sigma");
  std::string file = "eval_" + metric;
  double value = 0.0;
  std::optional<double> speed;
  if (metric == "oacc") {
    value = evaluate_oacc(*model, test, RectMetricConfig{}, sel);
  } else if (metric == "qacc") {
    const Patch patch = c.patch.empty() ? init_patch(224, cfg.seed()) : load_patch(c.patch);
    RegionRefiner refine;
    if (pqgd.iterations > 0) {
      refine = [&](const Tensor& frame, const Mask& region) { return pqgd_refine(*model, frame, region, pqgd); };
      file += "_pqgd" + std::to_string(pqgd.iterations);
    }
    value = qacc(*model, test, patch, cfg.get<double>("threshold"), cfg.seed(), cfg.get<int>("batch"), refine,
                 cfg.get<double>("min_scale"), cfg.get<double>("max_scale"));
    // timing on the same composites
    std::mt19937_64 rng(cfg.seed());
    std::vector<Tensor> frames;
    std::vector<Mask> masks;
    for (std::size_t i = 0; i < test.size() && i < 100; ++i) {
      const auto pl = sample_placement(patch.size(), test[i].rows(), test[i].cols(), rng, cfg.get<double>("min_scale"),
                                       cfg.get<double>("max_scale"));
      Composite comp = place_patch(test[i].rgb, patch, pl);
      frames.push_back(std::move(comp.frame));
      masks.push_back(std::move(comp.region));
    }
    speed = measure_speed(*model, frames, &masks, pqgd.iterations > 0 ? &pqgd : nullptr);
  } else if (metric == "ndacc") {
    std::optional<Patch> patch;
    if (!c.patch.empty()) patch = load_patch(c.patch);
    PolicyConfig pc;
    pc.pqgd = pqgd;
    pc.selection = sel;
    pc.dilate_px = cfg.get<int>("dilate_px");
    const CalibrationBundle calib;
    std::vector<NdScene> scenes;
    for (const auto& r : test) {
      if (!r.hand_mask || !r.objects) throw InvalidInput("scene " + r.id + " lacks a hand mask or object labels");
      scenes.push_back({&r, adjacent_objects(*r.objects, *r.hand_mask, cfg.get<int>("adjacency_px"))});
    }
    value = eval_ndacc(scenes, [&](const DatasetRecord& r) -> std::optional<GraspCandidate2D> {
      if (!patch) return plain_grasp(r.rgb, *model, sel);
      return run_policy(r.rgb, nullptr, *r.hand_mask, &*patch, *model, pc, calib).grasp;
    });
    if (!patch) file += "_plain";
  } else {
    throw InvalidInput("--metric must be oacc, qacc or ndacc");
  }
  if (!c.out.empty()) {
    const fs::path out = c.out;
    write_file_atomic(out / (file + ".csv"), csv_with_header(cfg.hash(), cfg.seed(), "value", {{value}}));
    if (speed) {
      const std::string name = pqgd.iterations > 0 ? "speed_pqgd" + std::to_string(pqgd.iterations) : "speed";
      write_file_atomic(out / (name + ".json"),
                        json{{"seconds", *speed}, {"config_hash", cfg.hash()}, {"seed", cfg.seed()}}.dump(2) + "\n");
    }
  }
  print_value(value);
  return 0;
}

// ---- policy ------------------------------------------------------------------

int run_policy_cmd(const Command& c, const std::string& frame_path, const std::string& depth_path,
                   const std::string& mask_path) {
  const ExperimentConfig cfg = c.resolve();
  const fs::path out = require_out(c.out);
  if (c.model.empty()) throw InvalidInput("--model is required");
  const auto model = load_model(c.model);
  std::optional<Patch> patch;
  if (!c.patch.empty()) patch = load_patch(c.patch);
  PolicyConfig pc;
  pc.pqgd = pqgd_from(cfg);
  pc.selection.smooth_sigma = cfg.get<double>("smooth_sigma");
  pc.dilate_px = cfg.get<int>("dilate_px");
  pc.safety_height_m = cfg.get<double>("safety_height");
  CalibrationBundle calib;
  if (const auto p = cfg.get<std::string>("intrinsics"); !p.empty()) calib.intrinsics = intrinsics_from_json(json::parse(read_file(p)));
  if (const auto p = cfg.get<std::string>("hand_eye"); !p.empty()) calib.hand_eye = hand_eye_from_json(json::parse(read_file(p)));
  if (const auto p = cfg.get<std::string>("gripper"); !p.empty()) calib.gripper = gripper_from_json(json::parse(read_file(p)));

  struct Frame {
    std::string id;
    Tensor rgb;
    std::optional<Tensor> depth;
    Mask mask;
  };
  std::vector<Frame> frames;
  if (!frame_path.empty()) {
    Frame f{fs::path(frame_path).stem().string(), read_rgb_png(frame_path), std::nullopt, {}};
    if (!depth_path.empty()) f.depth = read_depth_png(depth_path);
    f.mask = mask_path.empty() ? Mask(f.rgb.rows(), f.rgb.cols()) : read_mask_png(mask_path);
    frames.push_back(std::move(f));
  } else {
    for (auto& r : load_dataset(dataset_root(c.dataset), 0)) {
      Mask m = r.hand_mask ? *r.hand_mask : Mask(r.rows(), r.cols());
      frames.push_back({r.id, std::move(r.rgb), std::move(r.depth), std::move(m)});
    }
  }
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const Frame& f = frames[i];
    const PolicyResult res =
        run_policy(f.rgb, f.depth ? &*f.depth : nullptr, f.mask, patch ? &*patch : nullptr, *model, pc, calib);
    json rec{{"id", f.id}, {"config_hash", cfg.hash()}, {"seed", cfg.seed()}};
    if (res.grasp) {
      rec["grasp"] = grasp_to_json(*res.grasp, res.robot ? &*res.robot : nullptr, pc.safety_height_m);
      rows.push_back({static_cast<double>(i), 1.0, res.grasp->j, res.grasp->k, res.grasp->w, res.grasp->theta,
                      res.grasp->quality});
    } else {
      rec["grasp"] = nullptr;
      rec["status"] = "no grasp";
      rows.push_back({static_cast<double>(i), 0.0, -1, -1, 0, 0, 0});
    }
    write_file_atomic(out / (f.id + ".json"), rec.dump(2) + "\n");
    emit_heatmap(res.quality, res.refined, res.grasp, out / (f.id + "_before.png"), cfg.hash(), cfg.seed());
    emit_heatmap(res.quality_zeroed, res.refined, res.grasp, out / (f.id + "_after.png"), cfg.hash(), cfg.seed());
  }
  write_file_atomic(out / "policy_metrics.csv",
                    csv_with_header(cfg.hash(), cfg.seed(), "frame,found,i,j,w_px,theta_rad,quality", rows));
  std::cout << "processed " << frames.size() << " frame(s)\n";
  return 0;
}

// ---- report ------------------------------------------------------------------

int run_report(const Command& c, const std::vector<std::string>& runs) {
  std::vector<fs::path> dirs(runs.begin(), runs.end());
  const std::string table = build_report(dirs);
  if (!c.out.empty()) write_file_atomic(c.out, table);
  std::cout << table;
  return 0;
}

void fail(const std::string& type, const std::string& msg) {
  std::cerr << json{{"error", msg}, {"type", type}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"QFAAP: grasp quality model, adversarial quality patch, PQGD and hand-avoiding grasp policy"};
  app.require_subcommand(1);
  std::map<std::string, Command> cmds;
  auto make = [&](const std::string& name, const std::string& help) -> Command& {
    Command& c = cmds[name];
    c.name = name;
    c.app = app.add_subcommand(name, help);
    c.app->add_option("--config", c.config_file, "JSON file; its keys override flags");
    c.number("--seed", "seed", "root seed");
    c.app->add_option("--out", c.out, "output directory (report: output file)");
    return c;
  };

  Command& synth = make("synth", "generate a synthetic dataset");
  synth.number("--scenes", "scenes", "number of scenes");
  synth.number("--canvas", "canvas", "image size");
  synth.number("--hand", "hand", "none | near | random");
  synth.number("--adjacency-px", "adjacency_px", "hand adjacency threshold");

  Command& tr = make("train", "train a grasp model and log O-ACC");
  tr.app->add_option("--dataset", tr.dataset, "dataset root");
  tr.number("--epochs", "epochs", "");
  tr.number("--batch", "batch", "");
  tr.number("--lr", "lr", "");
  tr.number("--arch", "architecture", "ref-fcn | tiny");
  tr.number("--optimizer", "optimizer", "adam | sgd");
  tr.number("--smooth-sigma", "smooth_sigma", "");
  tr.number("--limit", "limit", "use the first N records");

  Command& op = make("optimize-patch", "optimise an adversarial quality patch");
  op.app->add_option("--dataset", op.dataset, "dataset root");
  op.app->add_option("--model", op.model, "weights file or const:<q>");
  op.app->add_option("--patch", op.patch, "initial patch PNG");
  op.number("--alpha", "alpha", "");
  op.number("--beta", "beta", "");
  op.number("--gamma", "gamma", "");
  op.number("--lr", "lr", "");
  op.number("--epochs", "epochs", "");
  op.number("--batch", "batch", "");
  op.number("--patch-size", "patch_size", "");
  op.number("--limit", "limit", "use the first N records");

  Command& ev = make("eval", "evaluate O-ACC, Q-ACC or ND-ACC");
  ev.app->add_option("--dataset", ev.dataset, "dataset root");
  ev.app->add_option("--model", ev.model, "weights file or const:<q>");
  ev.app->add_option("--patch", ev.patch, "patch PNG");
  ev.number("--metric", "metric", "oacc | qacc | ndacc");
  ev.number("--eps", "eps", "PQGD epsilon, e.g. 8/255");
  ev.number("--pqgd-iters", "pqgd_iters", "");
  ev.number("--smooth-sigma", "smooth_sigma", "");
  ev.number("--dilate-px", "dilate_px", "");
  ev.number("--batch", "batch", "");
  ev.number("--all", "all", "evaluate every record instead of the test split");
  ev.number("--limit", "limit", "use the first N records");

  Command& po = make("policy", "run the grasp policy on a frame or a dataset");
  std::string frame, depth, mask;
  po.app->add_option("--dataset", po.dataset, "dataset root (sweep)");
  po.app->add_option("--model", po.model, "weights file or const:<q>");
  po.app->add_option("--patch", po.patch, "patch PNG");
  po.app->add_option("--frame", frame, "RGB PNG");
  po.app->add_option("--depth", depth, "16-bit depth PNG in mm");
  po.app->add_option("--mask", mask, "hand mask PNG");
  po.number("--eps", "eps", "PQGD epsilon");
  po.number("--pqgd-iters", "pqgd_iters", "");
  po.number("--smooth-sigma", "smooth_sigma", "");
  po.number("--dilate-px", "dilate_px", "");
  po.number("--intrinsics", "intrinsics", "JSON {fx,fy,cx,cy}");
  po.number("--hand-eye", "hand_eye", "JSON 4x4 row-major");
  po.number("--gripper", "gripper", "JSON gripper projection");

  Command& rep = make("report", "markdown table from run directories");
  std::vector<std::string> runs;
  rep.app->add_option("runs", runs, "run directories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fail("usage", e.what());
    return 2;
  }
  try {
    if (synth.app->parsed()) return run_synth(synth);
    if (tr.app->parsed()) return run_train(tr);
    if (op.app->parsed()) return run_optimize(op);
    if (ev.app->parsed()) return run_eval(ev);
    if (po.app->parsed()) return run_policy_cmd(po, frame, depth, mask);
    if (rep.app->parsed()) return run_report(rep, runs);
  } catch (const InvalidInput& e) {
    fail("invalid_input", e.what());
    return 3;
  } catch (const NumericalFailure& e) {
    fail("numerical_failure", e.what());
    return 4;
  } catch (const std::exception& e) {
    fail("error", e.what());
    return 1;
  }
  return 1;
}
