#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "qfaap/data.hpp"
#include "qfaap/model.hpp"
#include "qfaap/tensor.hpp"

namespace qfaap {

struct Patch {
  Tensor pixels;  // 3 x S x S in [0,1]
  std::string model_id;
  std::string dataset_id;
  int epochs = 0;
  double final_qacc = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
  double gamma = 0.0;
  std::uint64_t seed = 0;
  std::string config_hash;

  int size() const { return pixels.rows(); }
};

struct PatchPlacement {
  double scale = 1.0;
  int row = 0;
  int col = 0;
  int side = 0;  // round(scale * S)

  Mask region(int rows, int cols) const;
};

struct AqpConfig {
  double alpha = 0.1;
  double beta = 0.1;
  double gamma = 0.5;
  double learning_rate = 0.03;
  std::vector<int> lr_milestones{30, 40};
  double lr_decay = 0.1;
  int epochs = 50;
  int batch_size = 8;
  double qacc_threshold = 0.5;
  double min_scale = 0.1;
  double max_scale = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
  // Learning rate for a 1-based epoch; decays once each milestone has passed.
  double lr_at(int epoch) const;
};

Patch init_patch(int size, std::uint64_t seed);

int scaled_side(int patch_size, double scale);
// Scale uniform in [min_scale, max_scale], position uniform over valid spots.
PatchPlacement sample_placement(int patch_size, int rows, int cols, std::mt19937_64& rng, double min_scale = 0.1,
                                double max_scale = 1.0);
void validate_placement(const PatchPlacement& p, int patch_size, int rows, int cols);

// Half-pixel-centre bilinear resampling (OpenCV INTER_LINEAR convention) and
// its exact adjoint.
Tensor resize_bilinear(const Tensor& src, int rows, int cols);
Tensor resize_bilinear_adjoint(const Tensor& grad_out, int src_rows, int src_cols);

struct Composite {
  Tensor frame;
  Mask region;
};

// Pastes the resized patch over the placement region (full replacement).
Composite place_patch(const Tensor& sample, const Patch& patch, const PatchPlacement& placement);

// Values of `quality` at the set / unset pixels of `region`.
std::vector<double> gather(const Tensor& quality, const Mask& region, bool inside);

// (1/B) sum_i [-mean(Q_i) + alpha var(Q_i)], population variance.
// `grads`, when non-null, receives dL/dQ per sample value.
double quality_patch_loss(const std::vector<std::vector<double>>& regions, double alpha,
                          std::vector<std::vector<double>>* grads = nullptr);

// Mean over pixels of per-channel sqrt(dx^2 + dy^2) summed over channels,
// with forward differences and zero difference past the last row/column.
double tv_loss(const Tensor& patch, Tensor* grad = nullptr);

// (1/B) sum_i |min(inside_i) - max(outside_i)|; a sample with an empty
// outside region contributes 0.
double difference_loss(const std::vector<std::vector<double>>& inside,
                       const std::vector<std::vector<double>>& outside,
                       std::vector<std::vector<double>>* grad_inside = nullptr,
                       std::vector<std::vector<double>>* grad_outside = nullptr);

struct AqpLoss {
  double total = 0.0;
  double quality = 0.0;
  double tv = 0.0;
  double difference = 0.0;
};

// L_aqp over one batch of samples with their placements; the patch gradient
// is written to `grad` when non-null.
AqpLoss aqp_batch_loss(const GraspModel& model, const std::vector<const Tensor*>& samples,
                       const std::vector<PatchPlacement>& placements, const Patch& patch, const AqpConfig& cfg,
                       Tensor* grad = nullptr);

struct AqpEpoch {
  int epoch = 0;
  double qacc = 0.0;
  double l_aqp = 0.0;
  double l_qp = 0.0;
  double l_tv = 0.0;
  double l_d = 0.0;
};

// Optional per-frame refinement applied inside the patch region before the
// quality map is read (used to evaluate the patch with PQGD).
using RegionRefiner = std::function<Tensor(const Tensor& frame, const Mask& region)>;

struct QaccBatch {
  std::vector<Tensor> quality;
  std::vector<Mask> regions;
};

// Mean over batches of (pixels with Q > threshold) / (patch-region pixels).
double qacc_from_batches(const std::vector<QaccBatch>& batches, double threshold = 0.5);

double qacc(const GraspModel& model, const Dataset& test_set, const Patch& patch, double threshold,
            std::uint64_t seed, int batch_size = 8, const RegionRefiner& refine = {}, double min_scale = 0.1,
            double max_scale = 1.0);

struct AqpResult {
  Patch patch;
  std::vector<AqpEpoch> curve;
};

using AqpEpochCallback = std::function<void(const AqpEpoch&)>;

// Adam on the patch pixels only; the model is never written to.
AqpResult optimize_patch(const GraspModel& model, const Dataset& train_set, const Dataset& test_set,
                         const AqpConfig& cfg, const Patch& initial, const AqpEpochCallback& on_epoch = {});

// 8-bit PNG plus a JSON sidecar next to it (same stem, .json).
void save_patch(const std::filesystem::path& png_path, const Patch& patch);
Patch load_patch(const std::filesystem::path& png_path);

}  // namespace qfaap
