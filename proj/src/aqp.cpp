#include "qfaap/aqp.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>

#include "qfaap/io.hpp"
#include "qfaap/optim.hpp"
#include "qfaap/png_text.hpp"

namespace qfaap {

// ---- Config / placement ------------------------------------------------------

void AqpConfig::validate() const {
  if (alpha < 0 || beta < 0 || gamma < 0) throw InvalidInput("alpha, beta and gamma must be non-negative");
  if (learning_rate < 0) throw InvalidInput("patch learning rate must be non-negative");
  if (!(lr_decay > 0 && lr_decay <= 1)) throw InvalidInput("lr decay must lie in (0, 1]");
  if (!std::is_sorted(lr_milestones.begin(), lr_milestones.end())) throw InvalidInput("lr milestones must be sorted");
  if (epochs < 1 || batch_size < 1) throw InvalidInput("epochs and batch size must be positive");
  if (!(min_scale >= 0.1 && min_scale <= max_scale && max_scale <= 1.0)) {
    throw InvalidInput("patch scale range must lie within [0.1, 1]");
  }
}

double AqpConfig::lr_at(int epoch) const {
  double lr = learning_rate;
  for (int m : lr_milestones)
    if (epoch > m) lr *= lr_decay;
  return lr;
}

Patch init_patch(int size, std::uint64_t seed) {
  if (size < 2) throw InvalidInput("patch size must be at least 2");
  Patch p;
  p.pixels = Tensor(3, size, size);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (double& v : p.pixels.values()) v = u(rng);
  p.seed = seed;
  return p;
}

int scaled_side(int patch_size, double scale) {
  return std::max(1, static_cast<int>(std::lround(scale * patch_size)));
}

Mask PatchPlacement::region(int rows, int cols) const {
  Mask m(rows, cols);
  for (int r = row; r < row + side; ++r)
    for (int c = col; c < col + side; ++c) m.set(r, c, true);
  return m;
}

void validate_placement(const PatchPlacement& p, int patch_size, int rows, int cols) {
  if (!(p.scale >= 0.1 - 1e-12 && p.scale <= 1.0 + 1e-12)) throw InvalidInput("patch scale must lie in [0.1, 1]");
  if (p.side != scaled_side(patch_size, p.scale)) throw InvalidInput("placement side does not match its scale");
  if (p.row < 0 || p.col < 0 || p.row + p.side > rows || p.col + p.side > cols) {
    throw InvalidInput("patch placement exceeds the sample bounds");
  }
}

PatchPlacement sample_placement(int patch_size, int rows, int cols, std::mt19937_64& rng, double min_scale,
                                double max_scale) {
  const double fit = static_cast<double>(std::min(rows, cols)) / patch_size;
  const double hi = std::min(max_scale, fit);
  if (hi < min_scale) throw InvalidInput("sample too small for the minimum patch scale");
  PatchPlacement p;
  p.scale = std::uniform_real_distribution<double>(min_scale, hi)(rng);
  p.side = std::min(scaled_side(patch_size, p.scale), std::min(rows, cols));
  p.row = std::uniform_int_distribution<int>(0, rows - p.side)(rng);
  p.col = std::uniform_int_distribution<int>(0, cols - p.side)(rng);
  return p;
}

// ---- Resampling ----------------------------------------------------------------

namespace {

struct Tap {
  int i0, i1;
  double a;  // weight of i1
};

std::vector<Tap> taps(int src, int dst) {
  std::vector<Tap> out(dst);
  const double scale = static_cast<double>(src) / dst;
  for (int d = 0; d < dst; ++d) {
    double f = std::clamp((d + 0.5) * scale - 0.5, 0.0, src - 1.0);
    const int i0 = static_cast<int>(std::floor(f));
    const int i1 = std::min(i0 + 1, src - 1);
    out[d] = {i0, i1, f - i0};
  }
  return out;
}

}  // namespace

Tensor resize_bilinear(const Tensor& src, int rows, int cols) {
  if (rows <= 0 || cols <= 0) throw InvalidInput("resize target must be non-empty");
  if (src.rows() == rows && src.cols() == cols) return src;
  const auto ty = taps(src.rows(), rows), tx = taps(src.cols(), cols);
  Tensor out(src.channels(), rows, cols);
  for (int c = 0; c < src.channels(); ++c)
    for (int r = 0; r < rows; ++r) {
      const Tap& y = ty[r];
      for (int k = 0; k < cols; ++k) {
        const Tap& x = tx[k];
        out(c, r, k) = (1 - y.a) * ((1 - x.a) * src(c, y.i0, x.i0) + x.a * src(c, y.i0, x.i1)) +
                       y.a * ((1 - x.a) * src(c, y.i1, x.i0) + x.a * src(c, y.i1, x.i1));
      }
    }
  return out;
}

Tensor resize_bilinear_adjoint(const Tensor& g, int src_rows, int src_cols) {
  if (g.rows() == src_rows && g.cols() == src_cols) return g;
  const auto ty = taps(src_rows, g.rows()), tx = taps(src_cols, g.cols());
  Tensor out(g.channels(), src_rows, src_cols);
  for (int c = 0; c < g.channels(); ++c)
    for (int r = 0; r < g.rows(); ++r) {
      const Tap& y = ty[r];
      for (int k = 0; k < g.cols(); ++k) {
        const Tap& x = tx[k];
        const double v = g(c, r, k);
        out(c, y.i0, x.i0) += (1 - y.a) * (1 - x.a) * v;
        out(c, y.i0, x.i1) += (1 - y.a) * x.a * v;
        out(c, y.i1, x.i0) += y.a * (1 - x.a) * v;
        out(c, y.i1, x.i1) += y.a * x.a * v;
      }
    }
  return out;
}

Composite place_patch(const Tensor& sample, const Patch& patch, const PatchPlacement& placement) {
  if (sample.channels() != patch.pixels.channels()) throw InvalidInput("patch/sample channel mismatch");
  validate_placement(placement, patch.size(), sample.rows(), sample.cols());
  const Tensor scaled = resize_bilinear(patch.pixels, placement.side, placement.side);
  Composite out{sample, placement.region(sample.rows(), sample.cols())};
  for (int c = 0; c < sample.channels(); ++c)
    for (int r = 0; r < placement.side; ++r)
      for (int k = 0; k < placement.side; ++k) out.frame(c, placement.row + r, placement.col + k) = scaled(c, r, k);
  return out;
}

// ---- Losses ------------------------------------------------------------------

std::vector<double> gather(const Tensor& quality, const Mask& region, bool inside) {
  if (!region.matches(quality)) throw InvalidInput("region/quality shape mismatch");
  std::vector<double> out;
  for (std::size_t i = 0; i < region.size(); ++i)
    if (region.flat(i) == inside) out.push_back(quality.values()[i]);
  return out;
}

double quality_patch_loss(const std::vector<std::vector<double>>& regions, double alpha,
                          std::vector<std::vector<double>>* grads) {
  if (regions.empty()) throw InvalidInput("quality patch loss needs at least one sample");
  const double inv_b = 1.0 / static_cast<double>(regions.size());
  if (grads) grads->assign(regions.size(), {});
  double loss = 0.0;
  for (std::size_t i = 0; i < regions.size(); ++i) {
    const auto& q = regions[i];
    if (q.empty()) throw InvalidInput("empty patch region in sample " + std::to_string(i));
    const double n = static_cast<double>(q.size());
    const double mean = std::accumulate(q.begin(), q.end(), 0.0) / n;
    double var = 0.0;
    for (double v : q) var += (v - mean) * (v - mean);
    var /= n;
    loss += inv_b * (-mean + alpha * var);
    if (grads) {
      auto& g = (*grads)[i];
      g.resize(q.size());
      for (std::size_t k = 0; k < q.size(); ++k) g[k] = inv_b * (-1.0 / n + alpha * 2.0 * (q[k] - mean) / n);
    }
  }
  return loss;
}

double tv_loss(const Tensor& p, Tensor* grad) {
  if (p.rows() < 2 || p.cols() < 2) throw InvalidInput("total variation needs at least a 2x2 patch");
  const double inv_n = 1.0 / static_cast<double>(p.rows() * p.cols());
  if (grad) *grad = Tensor(p.channels(), p.rows(), p.cols());
  double sum = 0.0;
  for (int c = 0; c < p.channels(); ++c)
    for (int r = 0; r < p.rows(); ++r)
      for (int k = 0; k < p.cols(); ++k) {
        const double dx = k + 1 < p.cols() ? p(c, r, k) - p(c, r, k + 1) : 0.0;
        const double dy = r + 1 < p.rows() ? p(c, r, k) - p(c, r + 1, k) : 0.0;
        const double n = std::sqrt(dx * dx + dy * dy);
        sum += n;
        if (grad && n > 0) {
          (*grad)(c, r, k) += (dx + dy) / n * inv_n;
          if (k + 1 < p.cols()) (*grad)(c, r, k + 1) -= dx / n * inv_n;
          if (r + 1 < p.rows()) (*grad)(c, r + 1, k) -= dy / n * inv_n;
        }
      }
  return sum * inv_n;
}

double difference_loss(const std::vector<std::vector<double>>& inside, const std::vector<std::vector<double>>& outside,
                       std::vector<std::vector<double>>* grad_inside, std::vector<std::vector<double>>* grad_outside) {
  if (inside.empty() || inside.size() != outside.size()) throw InvalidInput("difference loss batch mismatch");
  const double inv_b = 1.0 / static_cast<double>(inside.size());
  if (grad_inside) grad_inside->assign(inside.size(), {});
  if (grad_outside) grad_outside->assign(outside.size(), {});
  double loss = 0.0;
  for (std::size_t i = 0; i < inside.size(); ++i) {
    if (inside[i].empty()) throw InvalidInput("empty patch region in sample " + std::to_string(i));
    if (grad_inside) (*grad_inside)[i].assign(inside[i].size(), 0.0);
    if (grad_outside) (*grad_outside)[i].assign(outside[i].size(), 0.0);
    // patch covering the whole image: no outside pixels, defined as zero
    if (outside[i].empty()) {
      static bool warned = false;
      if (!warned) std::cerr << "warning: patch covers the whole image, L_d taken as 0\n";
      warned = true;
      continue;
    }
    const auto mn = std::min_element(inside[i].begin(), inside[i].end());
    const auto mx = std::max_element(outside[i].begin(), outside[i].end());
    const double d = *mn - *mx;
    loss += inv_b * std::abs(d);
    const double s = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
    if (grad_inside) (*grad_inside)[i][mn - inside[i].begin()] = inv_b * s;
    if (grad_outside) (*grad_outside)[i][mx - outside[i].begin()] = -inv_b * s;
  }
  return loss;
}

AqpLoss aqp_batch_loss(const GraspModel& model, const std::vector<const Tensor*>& samples,
                       const std::vector<PatchPlacement>& placements, const Patch& patch, const AqpConfig& cfg,
                       Tensor* grad) {
  if (samples.empty() || samples.size() != placements.size()) throw InvalidInput("batch/placement mismatch");
  const double inv_b = 1.0 / static_cast<double>(samples.size());
  AqpLoss loss;
  if (grad) *grad = Tensor(patch.pixels.channels(), patch.size(), patch.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const PatchPlacement& pl = placements[i];
    const Composite comp = place_patch(*samples[i], patch, pl);
    double lq = 0.0, ld = 0.0;
    auto seed = [&](const Tensor& q) {
      const auto in = gather(q, comp.region, true);
      const auto out = gather(q, comp.region, false);
      std::vector<std::vector<double>> gq, gin, gout;
      lq = quality_patch_loss({in}, cfg.alpha, &gq);
      ld = difference_loss({in}, {out}, &gin, &gout);
      Tensor dq(1, q.rows(), q.cols());
      std::size_t a = 0, b = 0;
      for (std::size_t p = 0; p < comp.region.size(); ++p) {
        if (comp.region.flat(p)) {
          dq.values()[p] = inv_b * (gq[0][a] + cfg.gamma * gin[0][a]);
          ++a;
        } else {
          dq.values()[p] = inv_b * cfg.gamma * gout[0][b];
          ++b;
        }
      }
      return dq;
    };
    if (grad) {
      const Tensor dframe = model.quality_input_gradient(comp.frame, seed, nullptr);
      Tensor dscaled(dframe.channels(), pl.side, pl.side);
      for (int c = 0; c < dframe.channels(); ++c)
        for (int r = 0; r < pl.side; ++r)
          for (int k = 0; k < pl.side; ++k) dscaled(c, r, k) = dframe(c, pl.row + r, pl.col + k);
      const Tensor dpatch = resize_bilinear_adjoint(dscaled, patch.size(), patch.size());
      for (std::size_t p = 0; p < dpatch.size(); ++p) grad->values()[p] += dpatch.values()[p];
    } else {
      seed(model.infer(comp.frame).quality);
    }
    loss.quality += inv_b * lq;
    loss.difference += inv_b * ld;
  }
  Tensor gtv;
  loss.tv = tv_loss(patch.pixels, grad ? &gtv : nullptr);
  if (grad) {
    for (std::size_t p = 0; p < gtv.size(); ++p) grad->values()[p] += cfg.beta * gtv.values()[p];
  }
  loss.total = loss.quality + cfg.beta * loss.tv + cfg.gamma * loss.difference;
  return loss;
}

// ---- Q-ACC -----------------------------------------------------------------------

namespace {

std::pair<std::size_t, std::size_t> count_batch(const std::vector<Tensor>& quality, const std::vector<Mask>& regions,
                                                double threshold) {
  std::size_t hit = 0, total = 0;
  for (std::size_t i = 0; i < quality.size(); ++i) {
    if (!regions[i].matches(quality[i])) throw InvalidInput("Q-ACC region/quality shape mismatch");
    for (std::size_t p = 0; p < regions[i].size(); ++p) {
      if (!regions[i].flat(p)) continue;
      ++total;
      if (quality[i].values()[p] > threshold) ++hit;
    }
  }
  return {hit, total};
}

}  // namespace

double qacc_from_batches(const std::vector<QaccBatch>& batches, double threshold) {
  if (batches.empty()) throw InvalidInput("Q-ACC needs at least one batch");
  double sum = 0.0;
  for (const auto& b : batches) {
    if (b.quality.size() != b.regions.size()) throw InvalidInput("Q-ACC batch mismatch");
    const auto [hit, total] = count_batch(b.quality, b.regions, threshold);
    if (total == 0) throw InvalidInput("Q-ACC batch without patch pixels");
    sum += static_cast<double>(hit) / static_cast<double>(total);
  }
  return sum / static_cast<double>(batches.size());
}

double qacc(const GraspModel& model, const Dataset& test_set, const Patch& patch, double threshold,
            std::uint64_t seed, int batch_size, const RegionRefiner& refine, double min_scale, double max_scale) {
  if (test_set.empty()) throw InvalidInput("Q-ACC requires a non-empty test set");
  if (batch_size < 1) throw InvalidInput("batch size must be positive");
  std::mt19937_64 rng(seed);
  double sum = 0.0;
  int batches = 0;
  for (std::size_t start = 0; start < test_set.size(); start += batch_size) {
    const std::size_t end = std::min(test_set.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<Tensor> quality;
    std::vector<Mask> regions;
    for (std::size_t i = start; i < end; ++i) {
      const Tensor& sample = test_set[i].rgb;
      const PatchPlacement pl = sample_placement(patch.size(), sample.rows(), sample.cols(), rng, min_scale, max_scale);
      Composite comp = place_patch(sample, patch, pl);
      const Tensor frame = refine ? refine(comp.frame, comp.region) : comp.frame;
      quality.push_back(model.infer(frame).quality);
      regions.push_back(std::move(comp.region));
    }
    const auto [hit, total] = count_batch(quality, regions, threshold);
    sum += static_cast<double>(hit) / static_cast<double>(total);
    ++batches;
  }
  return sum / batches;
}

// ---- Optimisation ----------------------------------------------------------------

AqpResult optimize_patch(const GraspModel& model, const Dataset& train_set, const Dataset& test_set,
                         const AqpConfig& cfg, const Patch& initial, const AqpEpochCallback& on_epoch) {
  cfg.validate();
  if (train_set.empty()) throw InvalidInput("patch optimisation needs training samples");
  if (test_set.empty()) throw InvalidInput("patch optimisation needs a test set for Q-ACC");
  AqpResult res{initial, {}};
  Patch& patch = res.patch;
  patch.alpha = cfg.alpha;
  patch.beta = cfg.beta;
  patch.gamma = cfg.gamma;
  patch.seed = cfg.seed;
  patch.model_id = model.id();
  Adam adam(patch.pixels.size());
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train_set.size());
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    AqpEpoch e;
    e.epoch = epoch;
    int nbatch = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const Tensor*> samples;
      std::vector<PatchPlacement> placements;
      for (std::size_t i = start; i < end; ++i) {
        const Tensor& s = train_set[order[i]].rgb;
        samples.push_back(&s);
        placements.push_back(sample_placement(patch.size(), s.rows(), s.cols(), rng, cfg.min_scale, cfg.max_scale));
      }
      Tensor grad;
      const AqpLoss l = aqp_batch_loss(model, samples, placements, patch, cfg, &grad);
      bool finite = std::isfinite(l.total);
      for (double g : grad.values()) finite = finite && std::isfinite(g);
      if (!finite) {
        throw NumericalFailure("non-finite patch loss at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(nbatch) + " (L_qp=" + std::to_string(l.quality) +
                               ", L_tv=" + std::to_string(l.tv) + ", L_d=" + std::to_string(l.difference) + ")");
      }
      adam.step(patch.pixels.values(), grad.values(), lr);
      for (double& v : patch.pixels.values()) v = std::clamp(v, 0.0, 1.0);
      e.l_aqp += l.total;
      e.l_qp += l.quality;
      e.l_tv += l.tv;
      e.l_d += l.difference;
      ++nbatch;
    }
    e.l_aqp /= nbatch;
    e.l_qp /= nbatch;
    e.l_tv /= nbatch;
    e.l_d /= nbatch;
    e.qacc = qacc(model, test_set, patch, cfg.qacc_threshold, cfg.seed, cfg.batch_size, {}, cfg.min_scale,
                  cfg.max_scale);
    res.curve.push_back(e);
    if (on_epoch) on_epoch(e);
  }
  patch.epochs = cfg.epochs;
  patch.final_qacc = res.curve.empty() ? 0.0 : res.curve.back().qacc;
  return res;
}

// ---- Persistence -----------------------------------------------------------------

void save_patch(const std::filesystem::path& png_path, const Patch& patch) {
  const Tensor& p = patch.pixels;
  cv::Mat m(p.rows(), p.cols(), CV_8UC3);
  for (int r = 0; r < p.rows(); ++r)
    for (int c = 0; c < p.cols(); ++c) {
      auto q = [&](int ch) { return static_cast<std::uint8_t>(std::lround(std::clamp(p(ch, r, c), 0.0, 1.0) * 255.0)); };
      m.at<cv::Vec3b>(r, c) = cv::Vec3b(q(2), q(1), q(0));
    }
  std::vector<std::uint8_t> buf;
  cv::imencode(".png", m, buf);
  buf = png_add_text(buf, "qfaap", "config_hash=" + patch.config_hash + ";seed=" + std::to_string(patch.seed));
  nlohmann::json meta{{"model_id", patch.model_id}, {"dataset_id", patch.dataset_id}, {"alpha", patch.alpha},
                      {"beta", patch.beta},         {"gamma", patch.gamma},           {"epochs", patch.epochs},
                      {"seed", patch.seed},         {"final_qacc", patch.final_qacc}, {"config_hash", patch.config_hash}};
  write_file_atomic(png_path, buf);
  auto side = png_path;
  side.replace_extension(".json");
  write_file_atomic(side, meta.dump(2) + "\n");
}

Patch load_patch(const std::filesystem::path& png_path) {
  Patch patch;
  patch.pixels = read_rgb_png(png_path);
  if (patch.pixels.rows() != patch.pixels.cols()) throw InvalidInput("patch image must be square");
  auto side = png_path;
  side.replace_extension(".json");
  if (std::filesystem::exists(side)) {
    const auto meta = nlohmann::json::parse(read_file(side));
    patch.model_id = meta.value("model_id", "");
    patch.dataset_id = meta.value("dataset_id", "");
    patch.alpha = meta.value("alpha", 0.0);
    patch.beta = meta.value("beta", 0.0);
    patch.gamma = meta.value("gamma", 0.0);
    patch.epochs = meta.value("epochs", 0);
    patch.seed = meta.value("seed", std::uint64_t{0});
    patch.final_qacc = meta.value("final_qacc", 0.0);
    patch.config_hash = meta.value("config_hash", "");
  }
  return patch;
}

}  // namespace qfaap
