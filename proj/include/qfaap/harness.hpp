#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qfaap/grasp.hpp"
#include "qfaap/model.hpp"
#include "qfaap/pqgd.hpp"
#include "qfaap/tensor.hpp"

namespace qfaap {

// Parameters of one CLI command. Every command has a fixed key set with
// defaults; overrides with unknown keys are rejected.
class ExperimentConfig {
 public:
  static ExperimentConfig defaults(const std::string& command);

  const std::string& command() const { return command_; }
  const nlohmann::json& params() const { return params_; }
  // Type-checked override; throws InvalidInput on an unknown key or a type
  // change (integers may override doubles).
  void set(const std::string& key, const nlohmann::json& value);
  void merge(const nlohmann::json& overrides);

  template <class T>
  T get(const std::string& key) const {
    return params_.at(key).get<T>();
  }
  std::uint64_t seed() const { return params_.at("seed").get<std::uint64_t>(); }

  // Canonical JSON (sorted keys, command included) and its FNV-1a hash.
  std::string canonical() const;
  std::string hash() const;

 private:
  std::string command_;
  nlohmann::json params_;
};

// "8/255", "0.03", "1e-3".
double parse_number_or_ratio(const std::string& text);

// Metrics CSV with a `# config_hash=<h> seed=<s>` first line.
std::string csv_with_header(const std::string& config_hash, std::uint64_t seed, const std::string& columns,
                            const std::vector<std::vector<double>>& rows);
std::string format_metric(double v);

struct CsvTable {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;
  std::string config_hash;
  std::uint64_t seed = 0;

  double last(const std::string& column) const;
};
CsvTable read_metrics_csv(const std::filesystem::path& path);

// JET colour map of Q at 50% over the frame, grasp box in green and its
// centre in red. Config hash and seed go into a PNG tEXt chunk.
std::vector<std::uint8_t> render_heatmap(const Tensor& quality, const Tensor& frame,
                                         const std::optional<GraspCandidate2D>& grasp, const std::string& config_hash,
                                         std::uint64_t seed);
void emit_heatmap(const Tensor& quality, const Tensor& frame, const std::optional<GraspCandidate2D>& grasp,
                  const std::filesystem::path& path, const std::string& config_hash, std::uint64_t seed);

// Median wall-clock seconds of forward (+ PQGD over `masks` when `pqgd` is
// given) over the first `max_frames` frames.
double measure_speed(const GraspModel& model, const std::vector<Tensor>& frames, const std::vector<Mask>* masks,
                     const PqgdConfig* pqgd, int max_frames = 100);

// Markdown table over run directories, recomputed from their raw files:
// train_metrics.csv (O-ACC, last epoch), patch_metrics.csv (Q-ACC, last
// epoch), eval_qacc*.csv and speed*.json.
std::string build_report(const std::vector<std::filesystem::path>& run_dirs);

}  // namespace qfaap
