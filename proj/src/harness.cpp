#include "qfaap/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <regex>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "qfaap/io.hpp"
#include "qfaap/png_text.hpp"

namespace qfaap {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- Config ------------------------------------------------------------------

ExperimentConfig ExperimentConfig::defaults(const std::string& command) {
  ExperimentConfig c;
  c.command_ = command;
  const json pqgd{{"eps", 8.0 / 255.0}, {"pqgd_step", 0.008}};
  if (command == "synth") {
    c.params_ = {{"scenes", 500},          {"seed", 0},           {"canvas", 224},
                 {"min_objects", 2},       {"max_objects", 4},    {"hand", "none"},
                 {"adjacency_px", 20},     {"max_hand_overlap", 0.3}};
  } else if (command == "train") {
    c.params_ = {{"architecture", "ref-fcn"}, {"epochs", 50},        {"batch", 8},        {"lr", 0.001},
                 {"optimizer", "sgd"},       {"augmentation", true}, {"split", 0.9},     {"seed", 0},
                 {"smooth_sigma", 2.0},       {"width_scale", 150.0}, {"limit", 0}};
  } else if (command == "optimize-patch") {
    c.params_ = {{"alpha", 0.1},     {"beta", 0.1},     {"gamma", 0.5},       {"lr", 0.03},
                 {"milestones", {30, 40}}, {"lr_decay", 0.1}, {"epochs", 50}, {"batch", 8},
                 {"patch_size", 224}, {"split", 0.9},    {"seed", 0},          {"min_scale", 0.1},
                 {"max_scale", 1.0}, {"threshold", 0.5}, {"limit", 0}};
  } else if (command == "eval") {
    c.params_ = {{"metric", "oacc"},  {"batch", 8},          {"split", 0.9},      {"seed", 0},
                 {"threshold", 0.5},  {"pqgd_iters", 0},     {"smooth_sigma", 2.0}, {"dilate_px", 0},
                 {"adjacency_px", 20}, {"min_scale", 0.1},   {"max_scale", 1.0},  {"all", false},
                 {"limit", 0}};
    c.params_.update(pqgd);
  } else if (command == "policy") {
    c.params_ = {{"pqgd_iters", 5},  {"smooth_sigma", 2.0}, {"dilate_px", 0},    {"safety_height", 0.1},
                 {"intrinsics", ""}, {"hand_eye", ""},      {"gripper", ""},     {"seed", 0}};
    c.params_.update(pqgd);
  } else if (command == "report") {
    c.params_ = {{"seed", 0}};
  } else {
    throw InvalidInput("unknown command '" + command + "'");
  }
  return c;
}

void ExperimentConfig::set(const std::string& key, const json& value) {
  if (!params_.contains(key)) throw InvalidInput("unknown config key '" + key + "' for " + command_);
  json& slot = params_[key];
  const bool numeric_ok = slot.is_number_float() && value.is_number();
  const bool int_ok = slot.is_number_integer() && value.is_number_integer();
  if (!(numeric_ok || int_ok || slot.type() == value.type())) {
    throw InvalidInput("config key '" + key + "' has the wrong type");
  }
  if (key == "seed" && value.get<long long>() < 0) throw InvalidInput("seed must be non-negative");
  slot = numeric_ok ? json(value.get<double>()) : value;
}

void ExperimentConfig::merge(const json& overrides) {
  if (!overrides.is_object()) throw InvalidInput("config file must hold a JSON object");
  for (const auto& [k, v] : overrides.items()) set(k, v);
}

std::string ExperimentConfig::canonical() const {
  // nlohmann::json objects keep keys sorted, so the dump is order independent
  return json{{"command", command_}, {"params", params_}}.dump();
}

std::string ExperimentConfig::hash() const { return hex64(fnv1a64(canonical())); }

double parse_number_or_ratio(const std::string& text) {
  auto num = [&](const std::string& s) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      throw InvalidInput("not a number: '" + text + "'");
    }
    if (used != s.size() || !std::isfinite(v)) throw InvalidInput("not a number: '" + text + "'");
    return v;
  };
  const auto slash = text.find('/');
  if (slash == std::string::npos) return num(text);
  const double d = num(text.substr(slash + 1));
  if (d == 0) throw InvalidInput("zero denominator in '" + text + "'");
  return num(text.substr(0, slash)) / d;
}

// ---- CSV ---------------------------------------------------------------------

std::string format_metric(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string csv_with_header(const std::string& config_hash, std::uint64_t seed, const std::string& columns,
                            const std::vector<std::vector<double>>& rows) {
  std::ostringstream out;
  out << "# config_hash=" << config_hash << " seed=" << seed << "\n" << columns << "\n";
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out << ',';
      const double v = row[i];
      if (v == std::floor(v) && std::abs(v) < 1e15 && i == 0) {
        out << static_cast<long long>(v);
      } else {
        out << format_metric(v);
      }
    }
    out << "\n";
  }
  return out.str();
}

double CsvTable::last(const std::string& column) const {
  const auto it = std::find(columns.begin(), columns.end(), column);
  if (it == columns.end()) throw InvalidInput("CSV has no column '" + column + "'");
  if (rows.empty()) throw InvalidInput("CSV has no rows");
  return rows.back()[it - columns.begin()];
}

CsvTable read_metrics_csv(const fs::path& path) {
  std::istringstream in(read_file(path));
  CsvTable t;
  std::string line;
  static const std::regex header(R"(# config_hash=(\S*) seed=(\d+))");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::smatch m;
      if (std::regex_match(line, m, header)) {
        t.config_hash = m[1];
        t.seed = std::stoull(m[2]);
      }
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (t.columns.empty()) {
      t.columns = cells;
      continue;
    }
    if (cells.size() != t.columns.size()) throw InvalidInput("ragged CSV row in " + path.string());
    std::vector<double> row;
    for (const auto& c : cells) row.push_back(parse_number_or_ratio(c));
    t.rows.push_back(std::move(row));
  }
  if (t.columns.empty()) throw InvalidInput("empty CSV: " + path.string());
  return t;
}

// ---- Heatmaps ----------------------------------------------------------------

std::vector<std::uint8_t> render_heatmap(const Tensor& quality, const Tensor& frame,
                                         const std::optional<GraspCandidate2D>& grasp, const std::string& config_hash,
                                         std::uint64_t seed) {
  if (quality.channels() != 1 || !quality.same_extent(frame) || frame.channels() != 3) {
    throw InvalidInput("heatmap quality/frame shape mismatch");
  }
  const int rows = frame.rows(), cols = frame.cols();
  cv::Mat q8(rows, cols, CV_8UC1), bgr(rows, cols, CV_8UC3), color;
  auto to8 = [](double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); };
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      q8.at<std::uint8_t>(r, c) = to8(quality.at(r, c));
      bgr.at<cv::Vec3b>(r, c) = cv::Vec3b(to8(frame(2, r, c)), to8(frame(1, r, c)), to8(frame(0, r, c)));
    }
  cv::applyColorMap(q8, color, cv::COLORMAP_JET);
  cv::Mat out;
  cv::addWeighted(color, 0.5, bgr, 0.5, 0.0, out);
  if (grasp) {
    const Rectangle box = candidate_to_rectangle(*grasp);
    for (int i = 0; i < 4; ++i) {
      const Point2& a = box[i];
      const Point2& b = box[(i + 1) % 4];
      // corners are continuous coordinates; pixel (c, r) covers [c, c+1)
      cv::line(out, cv::Point(static_cast<int>(std::floor(a.x)), static_cast<int>(std::floor(a.y))),
               cv::Point(static_cast<int>(std::floor(b.x)), static_cast<int>(std::floor(b.y))), cv::Scalar(0, 255, 0),
               1, cv::LINE_8);
    }
    cv::circle(out, cv::Point(static_cast<int>(grasp->j), static_cast<int>(grasp->k)), 2, cv::Scalar(0, 0, 255),
               cv::FILLED, cv::LINE_8);
  }
  std::vector<std::uint8_t> png;
  cv::imencode(".png", out, png);
  return png_add_text(png, "qfaap", "config_hash=" + config_hash + ";seed=" + std::to_string(seed));
}

void emit_heatmap(const Tensor& quality, const Tensor& frame, const std::optional<GraspCandidate2D>& grasp,
                  const fs::path& path, const std::string& config_hash, std::uint64_t seed) {
  write_file_atomic(path, render_heatmap(quality, frame, grasp, config_hash, seed));
}

// ---- Speed -------------------------------------------------------------------

double measure_speed(const GraspModel& model, const std::vector<Tensor>& frames, const std::vector<Mask>* masks,
                     const PqgdConfig* pqgd, int max_frames) {
  if (frames.empty()) throw InvalidInput("speed measurement needs frames");
  if (pqgd && (!masks || masks->size() < frames.size())) throw InvalidInput("PQGD timing needs a mask per frame");
  const std::size_t n = std::min(frames.size(), static_cast<std::size_t>(std::max(1, max_frames)));
  std::vector<double> times;
  for (std::size_t i = 0; i < n; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const Tensor x = pqgd ? pqgd_refine(model, frames[i], (*masks)[i], *pqgd) : frames[i];
    const HeadMaps h = model.infer(x);
    const auto t1 = std::chrono::steady_clock::now();
    if (h.quality.empty()) throw NumericalFailure("empty model output");
    times.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  std::sort(times.begin(), times.end());
  return times.size() % 2 ? times[times.size() / 2] : 0.5 * (times[times.size() / 2 - 1] + times[times.size() / 2]);
}

// ---- Report ------------------------------------------------------------------

namespace {

std::string pct(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", *v * 100.0);
  return buf;
}

std::string seconds(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", *v);
  return buf;
}

std::optional<double> speed_from(const fs::path& p) {
  if (!fs::exists(p)) return std::nullopt;
  return json::parse(read_file(p)).at("seconds").get<double>();
}

}  // namespace

std::string build_report(const std::vector<fs::path>& run_dirs) {
  if (run_dirs.empty()) throw InvalidInput("report needs at least one run directory");
  std::ostringstream out;
  out << "| Methods | O-ACC (%) | Q-ACC (%) | Speed (s) |\n|---|---|---|---|\n";
  for (const auto& dir : run_dirs) {
    if (!fs::is_directory(dir)) throw InvalidInput("not a run directory: " + dir.string());
    const std::string name = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();
    std::optional<double> oacc, qacc;
    if (fs::exists(dir / "eval_oacc.csv")) {
      oacc = read_metrics_csv(dir / "eval_oacc.csv").last("value");
    } else if (fs::exists(dir / "train_metrics.csv")) {
      oacc = read_metrics_csv(dir / "train_metrics.csv").last("oacc");
    }
    if (fs::exists(dir / "eval_qacc.csv")) {
      qacc = read_metrics_csv(dir / "eval_qacc.csv").last("value");
    } else if (fs::exists(dir / "patch_metrics.csv")) {
      qacc = read_metrics_csv(dir / "patch_metrics.csv").last("qacc");
    }
    out << "| " << name << " | " << pct(oacc) << " | " << pct(qacc) << " | " << seconds(speed_from(dir / "speed.json"))
        << " |\n";
    // PQGD variants, in iteration order
    std::map<int, fs::path> variants;
    static const std::regex pat(R"(eval_qacc_pqgd(\d+)\.csv)");
    for (const auto& e : fs::directory_iterator(dir)) {
      std::smatch m;
      const std::string f = e.path().filename().string();
      if (std::regex_match(f, m, pat)) variants[std::stoi(m[1])] = e.path();
    }
    for (const auto& [iters, path] : variants) {
      const double q = read_metrics_csv(path).last("value");
      out << "| " << name << " + PQGD (N=" << iters << ") | " << pct(oacc) << " | " << pct(q) << " | "
          << seconds(speed_from(dir / ("speed_pqgd" + std::to_string(iters) + ".json"))) << " |\n";
    }
  }
  return out.str();
}

}  // namespace qfaap
