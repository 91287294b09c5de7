#include "qfaap/pqgd.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

namespace qfaap {

void PqgdConfig::validate() const {
  if (!(epsilon >= 0) || !std::isfinite(epsilon)) throw InvalidInput("PQGD epsilon must be finite and >= 0");
  if (!(step >= 0) || !std::isfinite(step)) throw InvalidInput("PQGD step must be finite and >= 0");
  if (iterations < 0) throw InvalidInput("PQGD iterations must be >= 0");
}

Tensor compose_hand_patch(const Tensor& frame, const Tensor& patch, const Mask& mask) {
  if (!frame.same_shape(patch)) {
    throw InvalidInput("frame " + frame.shape_string() + " and patch " + patch.shape_string() + " differ");
  }
  if (!mask.matches(frame)) throw InvalidInput("hand mask does not match the frame");
  Tensor out = frame;
  const std::size_t plane = frame.plane_size();
  for (int c = 0; c < frame.channels(); ++c)
    for (std::size_t i = 0; i < plane; ++i)
      if (mask.flat(i)) out.values()[c * plane + i] = patch.values()[c * plane + i];
  return out;
}

Tensor compose_hand_patch(const Tensor& frame, const Patch& patch, const Mask& mask) {
  return compose_hand_patch(frame, resize_bilinear(patch.pixels, frame.rows(), frame.cols()), mask);
}

double mean_mask_quality(const Tensor& quality, const Mask& mask) {
  if (!mask.matches(quality)) throw InvalidInput("mask does not match the quality map");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask.flat(i)) {
      sum += quality.values()[i];
      ++n;
    }
  if (n == 0) throw InvalidInput("mean over an empty mask");
  return sum / static_cast<double>(n);
}

Tensor pqgd_refine(const GraspModel& model, const Tensor& composed, const Mask& mask, const PqgdConfig& cfg) {
  cfg.validate();
  if (!mask.matches(composed)) throw InvalidInput("hand mask does not match the frame");
  const std::size_t n = mask.count();
  if (n == 0) {
    std::cerr << "warning: empty hand mask, PQGD skipped\n";
    return composed;
  }
  const std::size_t plane = composed.plane_size();
  auto seed = [&](const Tensor& q) {
    // d(-mean Q over mask)/dQ
    Tensor g(1, q.rows(), q.cols());
    for (std::size_t i = 0; i < plane; ++i)
      if (mask.flat(i)) g.values()[i] = -1.0 / static_cast<double>(n);
    return g;
  };
  Tensor x = composed;
  for (int it = 0; it < cfg.iterations; ++it) {
    const Tensor grad = model.quality_input_gradient(x, seed, nullptr);
    for (int c = 0; c < x.channels(); ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        if (!mask.flat(i)) continue;
        const std::size_t p = c * plane + i;
        const double g = grad.values()[p];
        if (!std::isfinite(g)) {
          throw NumericalFailure("non-finite PQGD gradient at iteration " + std::to_string(it));
        }
        const double s = g > 0 ? 1.0 : (g < 0 ? -1.0 : 0.0);
        const double base = composed.values()[p];
        double v = x.values()[p] - cfg.step * s;
        v = std::clamp(v, base - cfg.epsilon, base + cfg.epsilon);
        x.values()[p] = std::clamp(v, 0.0, 1.0);
      }
  }
  return x;
}

}  // namespace qfaap
