#include "qfaap/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "qfaap/io.hpp"
#include "qfaap/optim.hpp"

namespace qfaap {
namespace {

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

void relu_inplace(Tensor& t) {
  for (double& v : t.values()) v = v > 0 ? v : 0.0;
}

// dy masked by the ReLU that produced `out`.
Tensor relu_backward(const Tensor& dy, const Tensor& out) {
  Tensor d = dy;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!(out.values()[i] > 0)) d.values()[i] = 0.0;
  }
  return d;
}

Tensor crop(const Tensor& t, int rows, int cols) {
  if (t.rows() == rows && t.cols() == cols) return t;
  Tensor out(t.channels(), rows, cols);
  for (int c = 0; c < t.channels(); ++c)
    for (int r = 0; r < rows; ++r)
      for (int k = 0; k < cols; ++k) out(c, r, k) = t(c, r, k);
  return out;
}

Tensor uncrop(const Tensor& t, int rows, int cols) {
  if (t.rows() == rows && t.cols() == cols) return t;
  Tensor out(t.channels(), rows, cols);
  for (int c = 0; c < t.channels(); ++c)
    for (int r = 0; r < t.rows(); ++r)
      for (int k = 0; k < t.cols(); ++k) out(c, r, k) = t(c, r, k);
  return out;
}

Tensor plane_copy(const Tensor& t, int c) {
  Tensor out(1, t.rows(), t.cols());
  std::copy(t.plane(c).begin(), t.plane(c).end(), out.data());
  return out;
}

void check_frame(const Tensor& frame, int channels) {
  if (frame.channels() != channels) {
    throw InvalidInput("frame has shape " + frame.shape_string() + ", expected " + std::to_string(channels) +
                       " channels");
  }
  if (frame.rows() <= 0 || frame.cols() <= 0) throw InvalidInput("empty frame");
}

}  // namespace

GraspMaps decode(const HeadMaps& heads, double width_scale) {
  GraspMaps maps(heads.quality.rows(), heads.quality.cols());
  for (std::size_t i = 0; i < heads.quality.size(); ++i) {
    maps.quality.values()[i] = std::clamp(heads.quality.values()[i], 0.0, 1.0);
    maps.angle.values()[i] = wrap_half_pi(0.5 * std::atan2(heads.sin2.values()[i], heads.cos2.values()[i]));
    maps.width.values()[i] = width_scale * heads.width_norm.values()[i];
  }
  return maps;
}

HeadMaps heads_from_raw(const Tensor& raw) {
  if (raw.channels() != 4) throw InvalidInput("expected 4 head channels, got " + raw.shape_string());
  HeadMaps h{plane_copy(raw, 0), plane_copy(raw, 1), plane_copy(raw, 2), plane_copy(raw, 3)};
  for (double& v : h.quality.values()) v = sigmoid(v);
  for (double& v : h.width_norm.values()) v = sigmoid(v);
  return h;
}

// ---- ConstantQualityModel ----------------------------------------------------

std::string ConstantQualityModel::id() const { return "const:" + std::to_string(quality_); }

HeadMaps ConstantQualityModel::infer(const Tensor& frame) const {
  const int r = frame.rows(), c = frame.cols();
  return HeadMaps{Tensor(1, r, c, std::clamp(quality_, 0.0, 1.0)), Tensor(1, r, c), Tensor(1, r, c, 1.0),
                  Tensor(1, r, c, 0.2)};
}

Tensor ConstantQualityModel::quality_input_gradient(const Tensor& frame, const QualitySeed& seed,
                                                    HeadMaps* heads) const {
  HeadMaps h = infer(frame);
  if (seed) seed(h.quality);
  if (heads) *heads = std::move(h);
  return Tensor(frame.channels(), frame.rows(), frame.cols());
}

// ---- GraspNet ------------------------------------------------------------------

void ModelConfig::validate() const {
  if (channels != 3) throw InvalidInput("only RGB (3-channel) input is supported");
  if (!(width_scale > 0)) throw InvalidInput("width scale must be positive");
  if (architecture == "ref-fcn") {
    if (input_size != 224 && input_size != 300) throw InvalidInput("ref-fcn input size must be 224 or 300");
  } else if (architecture == "tiny") {
    if (input_size < 2) throw InvalidInput("tiny input size must be >= 2");
  } else {
    throw InvalidInput("unknown architecture '" + architecture + "'");
  }
}

GraspNet::GraspNet(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  auto add = [&](nn::ConvSpec s) {
    layers_.emplace_back(s);
    return static_cast<int>(layers_.size()) - 1;
  };
  if (cfg_.architecture == "tiny") {
    stages_.push_back({Stage::Conv, add({3, 6, 3, 1, 1, 1, false})});
    stages_.push_back({Stage::Head, add({6, 4, 1, 1, 0, 1, false})});
  } else {
    stages_.push_back({Stage::Conv, add({3, 16, 5, 2, 2, 1, false})});
    stages_.push_back({Stage::Conv, add({16, 24, 3, 2, 1, 1, false})});
    stages_.push_back({Stage::Conv, add({24, 32, 3, 2, 1, 1, false})});
    for (int d : {2, 4, 8}) {
      const int first = add({32, 32, 3, 1, d, d, false});
      add({32, 32, 3, 1, d, d, false});
      stages_.push_back({Stage::Residual, first});
    }
    stages_.push_back({Stage::Conv, add({32, 24, 4, 2, 1, 1, true})});
    stages_.push_back({Stage::Conv, add({24, 16, 4, 2, 1, 1, true})});
    stages_.push_back({Stage::Conv, add({16, 8, 4, 2, 1, 1, true})});
    stages_.push_back({Stage::Head, add({8, 4, 1, 1, 0, 1, false})});
  }
  std::mt19937_64 rng(cfg_.seed);
  for (auto& s : stages_) {
    switch (s.kind) {
      case Stage::Conv:
        layers_[s.first].init_he(rng);
        break;
      case Stage::Residual:
        layers_[s.first].init_he(rng);
        layers_[s.first + 1].init_he(rng, 0.5);
        break;
      case Stage::Head:
        layers_[s.first].init_he(rng, 0.1);
        break;
    }
  }
}

Tensor GraspNet::forward(const Tensor& frame, ForwardCache* cache) const {
  check_frame(frame, cfg_.channels);
  if (cache) {
    cache->in.assign(stages_.size(), {});
    cache->mid.assign(stages_.size(), {});
    cache->out.assign(stages_.size(), {});
    cache->frame_rows = frame.rows();
    cache->frame_cols = frame.cols();
  }
  Tensor x = frame;
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    const Stage& st = stages_[s];
    switch (st.kind) {
      case Stage::Conv: {
        Tensor y = layers_[st.first].forward(x);
        relu_inplace(y);
        if (cache) {
          cache->in[s] = std::move(x);
          cache->out[s] = y;
        }
        x = std::move(y);
        break;
      }
      case Stage::Residual: {
        Tensor h = layers_[st.first].forward(x);
        relu_inplace(h);
        Tensor y = layers_[st.first + 1].forward(h);
        for (std::size_t i = 0; i < y.size(); ++i) y.values()[i] += x.values()[i];
        relu_inplace(y);
        if (cache) {
          cache->in[s] = std::move(x);
          cache->mid[s] = std::move(h);
          cache->out[s] = y;
        }
        x = std::move(y);
        break;
      }
      case Stage::Head: {
        if (cache) {
          cache->decoded_rows = x.rows();
          cache->decoded_cols = x.cols();
        }
        if (x.rows() < frame.rows() || x.cols() < frame.cols()) {
          throw InvalidInput("decoder output " + x.shape_string() + " smaller than frame " + frame.shape_string());
        }
        x = crop(x, frame.rows(), frame.cols());
        Tensor raw = layers_[st.first].forward(x);
        if (cache) cache->in[s] = std::move(x);
        return raw;
      }
    }
  }
  throw InvalidInput("network has no head stage");
}

Tensor GraspNet::backward(const ForwardCache& cache, const Tensor& draw, ParamGrads* grads) const {
  auto wgrad = [&](int layer) -> std::span<double> {
    return grads ? std::span<double>(grads->weight[layer]) : std::span<double>();
  };
  auto bgrad = [&](int layer) -> std::span<double> {
    return grads ? std::span<double>(grads->bias[layer]) : std::span<double>();
  };
  Tensor d = draw;
  for (std::size_t si = stages_.size(); si-- > 0;) {
    const Stage& st = stages_[si];
    switch (st.kind) {
      case Stage::Head:
        d = layers_[st.first].backward(cache.in[si], d, wgrad(st.first), bgrad(st.first));
        d = uncrop(d, cache.decoded_rows, cache.decoded_cols);
        break;
      case Stage::Conv: {
        const Tensor dz = relu_backward(d, cache.out[si]);
        d = layers_[st.first].backward(cache.in[si], dz, wgrad(st.first), bgrad(st.first));
        break;
      }
      case Stage::Residual: {
        const Tensor dz = relu_backward(d, cache.out[si]);
        Tensor dh = layers_[st.first + 1].backward(cache.mid[si], dz, wgrad(st.first + 1), bgrad(st.first + 1));
        dh = relu_backward(dh, cache.mid[si]);
        d = layers_[st.first].backward(cache.in[si], dh, wgrad(st.first), bgrad(st.first));
        for (std::size_t i = 0; i < d.size(); ++i) d.values()[i] += dz.values()[i];
        break;
      }
    }
  }
  return d;
}

HeadMaps GraspNet::infer(const Tensor& frame) const { return heads_from_raw(forward(frame, nullptr)); }

Tensor GraspNet::quality_input_gradient(const Tensor& frame, const QualitySeed& seed, HeadMaps* heads) const {
  ForwardCache cache;
  const Tensor raw = forward(frame, &cache);
  HeadMaps h = heads_from_raw(raw);
  const Tensor dq = seed(h.quality);
  if (!dq.same_shape(h.quality)) throw InvalidInput("quality seed returned " + dq.shape_string());
  Tensor draw(4, raw.rows(), raw.cols());
  for (std::size_t i = 0; i < dq.size(); ++i) {
    const double q = h.quality.values()[i];
    draw.values()[i] = dq.values()[i] * q * (1.0 - q);
  }
  Tensor dx = backward(cache, draw, nullptr);
  if (heads) *heads = std::move(h);
  return dx;
}

std::vector<std::string> GraspNet::parameter_names() const {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    names.push_back("layer" + std::to_string(i) + ".weight");
    names.push_back("layer" + std::to_string(i) + ".bias");
  }
  return names;
}

ParamGrads GraspNet::zero_grads() const {
  ParamGrads g;
  for (const auto& l : layers_) {
    g.weight.emplace_back(l.weight().size(), 0.0);
    g.bias.emplace_back(l.bias().size(), 0.0);
  }
  return g;
}

std::size_t GraspNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.weight().size() + l.bias().size();
  return n;
}

std::uint64_t GraspNet::checksum() const {
  std::uint64_t h = fnv1a64({});
  for (const auto& l : layers_) {
    h = fnv1a64({reinterpret_cast<const char*>(l.weight().data()), l.weight().size() * sizeof(double)}, h);
    h = fnv1a64({reinterpret_cast<const char*>(l.bias().data()), l.bias().size() * sizeof(double)}, h);
  }
  return h;
}

// ---- Losses ------------------------------------------------------------------

double huber(double d) {
  const double a = std::abs(d);
  return a < 1.0 ? 0.5 * d * d : a - 0.5;
}

double huber_grad(double d) {
  if (std::abs(d) < 1.0) return d;
  return d > 0 ? 1.0 : -1.0;
}

double quality_loss(const Tensor& pred, const Tensor& target) {
  if (!pred.same_shape(target)) throw InvalidInput("quality loss shape mismatch");
  if (pred.size() == 0) throw InvalidInput("quality loss on empty map");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += huber(pred.values()[i] - target.values()[i]);
  return s / static_cast<double>(pred.size());
}

LossTargets make_targets(const GraspMaps& target, double width_scale) {
  LossTargets t{target.quality, Tensor(1, target.rows(), target.cols()), Tensor(1, target.rows(), target.cols()),
                Tensor(1, target.rows(), target.cols())};
  for (std::size_t i = 0; i < target.quality.size(); ++i) {
    const double q = target.quality.values()[i];
    const double th = target.angle.values()[i];
    t.sin2.values()[i] = q * std::sin(2.0 * th);
    t.cos2.values()[i] = q * std::cos(2.0 * th);
    t.width_norm.values()[i] = q * target.width.values()[i] / width_scale;
  }
  return t;
}

LossBreakdown total_loss_with_grad(const HeadMaps& pred, const LossTargets& target, Tensor* draw) {
  const Tensor* p[4] = {&pred.quality, &pred.sin2, &pred.cos2, &pred.width_norm};
  const Tensor* t[4] = {&target.quality, &target.sin2, &target.cos2, &target.width_norm};
  for (int i = 0; i < 4; ++i) {
    if (!p[i]->same_shape(*t[i]) || !p[i]->same_shape(pred.quality)) throw InvalidInput("loss shape mismatch");
  }
  const std::size_t n = pred.quality.size();
  if (n == 0) throw InvalidInput("loss on empty maps");
  const double inv_n = 1.0 / static_cast<double>(n);
  if (draw) *draw = Tensor(4, pred.quality.rows(), pred.quality.cols());
  double sums[4] = {0, 0, 0, 0};
  for (int h = 0; h < 4; ++h) {
    const auto& pv = p[h]->values();
    const auto& tv = t[h]->values();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = pv[i] - tv[i];
      s += huber(d);
      if (draw) {
        double g = huber_grad(d) * inv_n;
        if (h == 0 || h == 3) g *= pv[i] * (1.0 - pv[i]);
        draw->values()[h * n + i] = g;
      }
    }
    sums[h] = s * inv_n;
  }
  LossBreakdown b;
  b.quality = sums[0];
  b.angle = sums[1] + sums[2];
  b.width = sums[3];
  b.total = b.quality + b.angle + b.width;
  return b;
}

LossBreakdown total_loss(const HeadMaps& pred, const LossTargets& target) {
  return total_loss_with_grad(pred, target, nullptr);
}

// ---- Training ----------------------------------------------------------------

double evaluate_oacc(const GraspModel& model, const Dataset& records, const RectMetricConfig& metric,
                     const SelectionConfig& selection) {
  if (records.empty()) throw InvalidInput("O-ACC requires a non-empty dataset");
  int hits = 0;
  for (const auto& r : records) {
    const auto g = select_optimal_grasp(model.predict(r.rgb), nullptr, selection);
    if (g && rectangle_match(*g, r.labels, metric)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

std::vector<EpochMetrics> train(GraspNet& net, const Dataset& train_set, const Dataset& test_set,
                                const TrainConfig& cfg, const EpochCallback& on_epoch,
                                const StepCallback& on_step) {
  if (train_set.empty()) throw InvalidInput("training set is empty");
  if (cfg.epochs <= 0 || cfg.batch_size < 1 || cfg.learning_rate < 0) throw InvalidInput("invalid training config");
  std::mt19937_64 rng(cfg.seed);
  auto& layers = net.layers();
  std::vector<Adam> adam_w, adam_b;
  if (cfg.optimizer == OptimizerKind::Adam) {
    for (const auto& l : layers) {
      adam_w.emplace_back(l.weight().size());
      adam_b.emplace_back(l.bias().size());
    }
  }
  std::vector<EpochMetrics> log;
  std::vector<std::size_t> order(train_set.size());
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    EpochMetrics m;
    m.epoch = epoch;
    int step = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++step) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const double inv_b = 1.0 / static_cast<double>(end - start);
      ParamGrads grads = net.zero_grads();
      LossBreakdown batch;
      for (std::size_t i = start; i < end; ++i) {
        const DatasetRecord& base = train_set[order[i]];
        const DatasetRecord sample = cfg.augmentation ? augment(base, rng()) : base;
        const LossTargets targets =
            make_targets(rasterize_targets(sample.labels, sample.rows(), sample.cols()), net.width_scale());
        ForwardCache cache;
        const Tensor raw = net.forward(sample.rgb, &cache);
        Tensor draw;
        const LossBreakdown l = total_loss_with_grad(heads_from_raw(raw), targets, &draw);
        if (!std::isfinite(l.total)) {
          throw NumericalFailure("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                 std::to_string(step) + " (sample " + base.id + ")");
        }
        for (double& v : draw.values()) v *= inv_b;
        net.backward(cache, draw, &grads);
        batch.total += l.total * inv_b;
        batch.quality += l.quality * inv_b;
        batch.angle += l.angle * inv_b;
        batch.width += l.width * inv_b;
        m.loss += l.total;
        m.lq += l.quality;
        m.ltheta += l.angle;
        m.lw += l.width;
      }
      for (std::size_t li = 0; li < layers.size(); ++li) {
        if (cfg.optimizer == OptimizerKind::Adam) {
          adam_w[li].step(layers[li].weight(), grads.weight[li], cfg.learning_rate);
          adam_b[li].step(layers[li].bias(), grads.bias[li], cfg.learning_rate);
        } else {
          auto& w = layers[li].weight();
          auto& b = layers[li].bias();
          for (std::size_t k = 0; k < w.size(); ++k) w[k] -= cfg.learning_rate * grads.weight[li][k];
          for (std::size_t k = 0; k < b.size(); ++k) b[k] -= cfg.learning_rate * grads.bias[li][k];
        }
      }
      if (on_step) on_step(epoch, step, batch);
    }
    const double n = static_cast<double>(train_set.size());
    m.loss /= n;
    m.lq /= n;
    m.ltheta /= n;
    m.lw /= n;
    m.oacc = test_set.empty() ? 0.0 : evaluate_oacc(net, test_set, cfg.metric, cfg.selection);
    log.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return log;
}

// ---- Weights file --------------------------------------------------------------

namespace {
constexpr char kMagic[8] = {'Q', 'F', 'A', 'A', 'P', 'W', 'T', '1'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

void put_f32(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double get_f32(const std::string& in, std::size_t at) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return static_cast<double>(std::bit_cast<float>(bits));
}
}  // namespace

void save_weights(const std::filesystem::path& path, const GraspNet& net, const std::string& config_hash) {
  using nlohmann::json;
  const auto& cfg = net.config();
  json header;
  header["format"] = "qfaap-weights";
  header["version"] = 1;
  header["config"] = {{"input_size", cfg.input_size},
                      {"channels", cfg.channels},
                      {"architecture", cfg.architecture},
                      {"width_scale", cfg.width_scale},
                      {"seed", cfg.seed}};
  header["config_hash"] = config_hash;
  json tensors = json::array();
  const auto names = net.parameter_names();
  std::string payload;
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    const auto& l = net.layers()[i];
    const auto& s = l.spec();
    const int a = s.transposed ? s.in_channels : s.out_channels;
    const int b = s.transposed ? s.out_channels : s.in_channels;
    tensors.push_back({{"name", names[2 * i]}, {"shape", {a, b, s.kernel, s.kernel}}});
    tensors.push_back({{"name", names[2 * i + 1]}, {"shape", {s.out_channels}}});
    for (double v : l.weight()) put_f32(payload, v);
    for (double v : l.bias()) put_f32(payload, v);
  }
  header["tensors"] = tensors;
  const std::string hdr = header.dump();
  std::string out(kMagic, kMagic + 8);
  put_u64(out, hdr.size());
  out += hdr;
  out += payload;
  write_file_atomic(path, out);
}

GraspNet load_weights(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 16 || !std::equal(kMagic, kMagic + 8, bytes.begin())) {
    throw InvalidInput(path.string() + " is not a weights file");
  }
  const std::uint64_t hlen = get_u64(bytes, 8);
  if (16 + hlen > bytes.size()) throw InvalidInput(path.string() + ": truncated header");
  const auto header = nlohmann::json::parse(bytes.substr(16, hlen));
  if (header.value("version", 0) != 1) throw InvalidInput(path.string() + ": unsupported weights version");
  ModelConfig cfg;
  const auto& c = header.at("config");
  cfg.input_size = c.at("input_size");
  cfg.channels = c.at("channels");
  cfg.architecture = c.at("architecture");
  cfg.width_scale = c.at("width_scale");
  cfg.seed = c.at("seed");
  GraspNet net(cfg);
  std::size_t at = 16 + hlen;
  const std::size_t expect = net.parameter_count() * 4;
  if (bytes.size() - at != expect) throw InvalidInput(path.string() + ": payload size does not match architecture");
  const auto& tensors = header.at("tensors");
  if (tensors.size() != 2 * net.layers().size()) throw InvalidInput(path.string() + ": tensor count mismatch");
  for (auto& l : net.layers()) {
    for (double& v : l.weight()) {
      v = get_f32(bytes, at);
      at += 4;
    }
    for (double& v : l.bias()) {
      v = get_f32(bytes, at);
      at += 4;
    }
    for (double v : l.weight())
      if (!std::isfinite(v)) throw InvalidInput(path.string() + ": non-finite weight");
  }
  return net;
}

std::unique_ptr<GraspModel> load_model(const std::string& spec) {
  if (spec.rfind("const:", 0) == 0) return std::make_unique<ConstantQualityModel>(std::stod(spec.substr(6)));
  return std::make_unique<GraspNet>(load_weights(spec));
}

}  // namespace qfaap
