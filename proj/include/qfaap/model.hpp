#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "qfaap/data.hpp"
#include "qfaap/grasp.hpp"
#include "qfaap/nn.hpp"
#include "qfaap/tensor.hpp"

namespace qfaap {

// Dense network outputs before decoding. quality and width_norm are already
// squashed through a sigmoid; sin2/cos2 are the raw angle heads.
struct HeadMaps {
  Tensor quality;
  Tensor sin2;
  Tensor cos2;
  Tensor width_norm;
};

GraspMaps decode(const HeadMaps& heads, double width_scale);

// Maps a quality map to dL/dquality (same shape).
using QualitySeed = std::function<Tensor(const Tensor& quality)>;

// Anything that turns an RGB frame into grasp maps and can push a gradient on
// its quality map back onto the input pixels.
class GraspModel {
 public:
  virtual ~GraspModel() = default;

  virtual std::string id() const = 0;
  virtual HeadMaps infer(const Tensor& frame) const = 0;
  // Runs inference, asks `seed` for dL/dquality and returns dL/dframe. The
  // heads are written to `heads` when non-null.
  virtual Tensor quality_input_gradient(const Tensor& frame, const QualitySeed& seed,
                                        HeadMaps* heads = nullptr) const = 0;
  virtual double width_scale() const { return 150.0; }

  GraspMaps predict(const Tensor& frame) const { return decode(infer(frame), width_scale()); }
};

// Emits a fixed quality everywhere; gradients are zero.
class ConstantQualityModel final : public GraspModel {
 public:
  explicit ConstantQualityModel(double quality) : quality_(quality) {}
  std::string id() const override;
  HeadMaps infer(const Tensor& frame) const override;
  Tensor quality_input_gradient(const Tensor& frame, const QualitySeed& seed, HeadMaps* heads) const override;

 private:
  double quality_;
};

struct ModelConfig {
  int input_size = 224;
  int channels = 3;
  std::string architecture = "ref-fcn";  // or "tiny"
  double width_scale = 150.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ParamGrads {
  std::vector<std::vector<double>> weight;
  std::vector<std::vector<double>> bias;
};

// Per-stage activations kept for backprop.
struct ForwardCache {
  std::vector<Tensor> in;
  std::vector<Tensor> mid;
  std::vector<Tensor> out;
  int decoded_rows = 0;
  int decoded_cols = 0;
  int frame_rows = 0;
  int frame_cols = 0;
};

// Encoder of stride-2 convolutions, dilated residual blocks, transposed-conv
// decoder and four 1x1 heads (quality, sin 2θ, cos 2θ, width). The "tiny"
// architecture is one 3x3 conv followed by the heads.
class GraspNet final : public GraspModel {
 public:
  explicit GraspNet(const ModelConfig& cfg);

  std::string id() const override { return cfg_.architecture; }
  const ModelConfig& config() const { return cfg_; }
  double width_scale() const override { return cfg_.width_scale; }

  HeadMaps infer(const Tensor& frame) const override;
  Tensor quality_input_gradient(const Tensor& frame, const QualitySeed& seed, HeadMaps* heads) const override;

  // Raw 4-channel head logits with intermediates for backprop.
  Tensor forward(const Tensor& frame, ForwardCache* cache) const;
  // Backprop of dL/d(raw heads). Parameter gradients accumulate into `grads`
  // when non-null; returns dL/dframe.
  Tensor backward(const ForwardCache& cache, const Tensor& draw, ParamGrads* grads) const;

  std::vector<nn::Conv2d>& layers() { return layers_; }
  const std::vector<nn::Conv2d>& layers() const { return layers_; }
  std::vector<std::string> parameter_names() const;
  ParamGrads zero_grads() const;
  std::size_t parameter_count() const;
  std::uint64_t checksum() const;

 private:
  struct Stage {
    enum Kind { Conv, Residual, Head } kind;
    int first;  // index into layers_
  };

  ModelConfig cfg_;
  std::vector<nn::Conv2d> layers_;
  std::vector<Stage> stages_;
};

HeadMaps heads_from_raw(const Tensor& raw);

// ---- Losses ------------------------------------------------------------------

// Smooth-L1: 0.5 d^2 if |d| < 1, else |d| - 0.5.
double huber(double d);
double huber_grad(double d);

double quality_loss(const Tensor& pred, const Tensor& target);

struct LossBreakdown {
  double total = 0.0;
  double quality = 0.0;
  double angle = 0.0;
  double width = 0.0;
};

// Targets derived from rasterized labels: quality, (sin 2θ, cos 2θ) and w/scale,
// the latter three zero off the grasp regions.
struct LossTargets {
  Tensor quality;
  Tensor sin2;
  Tensor cos2;
  Tensor width_norm;
};

LossTargets make_targets(const GraspMaps& target, double width_scale);

LossBreakdown total_loss(const HeadMaps& pred, const LossTargets& target);
// Same value, plus dL/d(raw head logits) for backprop through the sigmoids.
LossBreakdown total_loss_with_grad(const HeadMaps& pred, const LossTargets& target, Tensor* draw);

// ---- Training ----------------------------------------------------------------

enum class OptimizerKind { Sgd, Adam };

struct TrainConfig {
  int epochs = 50;
  int batch_size = 8;
  double learning_rate = 0.001;
  OptimizerKind optimizer = OptimizerKind::Sgd;
  bool augmentation = true;
  std::uint64_t seed = 0;
  SelectionConfig selection{};
  RectMetricConfig metric{};
};

struct EpochMetrics {
  int epoch = 0;
  double loss = 0.0;
  double lq = 0.0;
  double ltheta = 0.0;
  double lw = 0.0;
  double oacc = 0.0;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;
using StepCallback = std::function<void(int epoch, int step, const LossBreakdown& batch_loss)>;

std::vector<EpochMetrics> train(GraspNet& net, const Dataset& train_set, const Dataset& test_set,
                                const TrainConfig& cfg, const EpochCallback& on_epoch = {},
                                const StepCallback& on_step = {});

double evaluate_oacc(const GraspModel& model, const Dataset& records, const RectMetricConfig& metric = {},
                     const SelectionConfig& selection = {});

// ---- Weights file --------------------------------------------------------------
// 8-byte magic "QFAAPWT1", u64 LE header length, JSON header, then float32 LE
// arrays in header order.

void save_weights(const std::filesystem::path& path, const GraspNet& net, const std::string& config_hash = "");
GraspNet load_weights(const std::filesystem::path& path);

// Builds a model from a CLI-style spec: a weights path, or "const:<q>".
std::unique_ptr<GraspModel> load_model(const std::string& spec);

}  // namespace qfaap
