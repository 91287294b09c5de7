#pragma once

// Independent reference implementations used by the tests. They share no
// code with the library beyond plain data types.

#include <cmath>
#include <random>
#include <vector>

#include "qfaap/grasp.hpp"
#include "qfaap/model.hpp"
#include "qfaap/tensor.hpp"

namespace oracle {

// Point (x=col, y=row) inside the box, optionally only the central
// `fraction` of the width axis.
inline bool inside(const qfaap::GraspCandidate2D& g, double x, double y, double fraction = 1.0) {
  const double dx = x - g.j, dy = y - g.k;
  const double along = dx * std::cos(g.theta) - dy * std::sin(g.theta);
  const double across = dx * std::sin(g.theta) + dy * std::cos(g.theta);
  return std::abs(along) <= g.w * fraction / 2 && std::abs(across) <= g.h / 2;
}

// IoU by sampling an n x n grid over the joint bounding square.
inline double raster_iou(const qfaap::GraspCandidate2D& a, const qfaap::GraspCandidate2D& b, int n = 1000) {
  const double ra = 0.5 * std::hypot(a.w, a.h), rb = 0.5 * std::hypot(b.w, b.h);
  const double x0 = std::min(a.j - ra, b.j - rb), x1 = std::max(a.j + ra, b.j + rb);
  const double y0 = std::min(a.k - ra, b.k - rb), y1 = std::max(a.k + ra, b.k + rb);
  long inter = 0, uni = 0;
  for (int i = 0; i < n; ++i) {
    const double y = y0 + (i + 0.5) * (y1 - y0) / n;
    for (int k = 0; k < n; ++k) {
      const double x = x0 + (k + 0.5) * (x1 - x0) / n;
      const bool ia = inside(a, x, y), ib = inside(b, x, y);
      inter += ia && ib;
      uni += ia || ib;
    }
  }
  return uni ? static_cast<double>(inter) / uni : 0.0;
}

inline qfaap::Tensor random_frame(std::mt19937_64& rng, int rows, int cols, int channels = 3) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  qfaap::Tensor t(channels, rows, cols);
  for (double& v : t.values()) v = u(rng);
  return t;
}

inline qfaap::Mask random_mask(std::mt19937_64& rng, int rows, int cols, double p = 0.3) {
  std::bernoulli_distribution b(p);
  qfaap::Mask m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i) m.set_flat(i, b(rng));
  if (!m.any()) m.set(rows / 2, cols / 2, true);
  return m;
}

inline qfaap::GraspNet tiny_net(std::uint64_t seed, int size = 16) {
  qfaap::ModelConfig mc;
  mc.architecture = "tiny";
  mc.input_size = size;
  mc.seed = seed;
  return qfaap::GraspNet(mc);
}

inline bool rel_close(double analytic, double numeric, double rtol, double atol = 1e-8) {
  return std::abs(analytic - numeric) <= rtol * std::max(std::abs(analytic), std::abs(numeric)) + atol;
}

}  // namespace oracle
