#pragma once

#include "qfaap/aqp.hpp"
#include "qfaap/model.hpp"
#include "qfaap/tensor.hpp"

namespace qfaap {

struct PqgdConfig {
  double epsilon = 8.0 / 255.0;
  double step = 0.008;
  int iterations = 1;

  // epsilon and step may be 0 (degenerate no-op runs); iterations may be 0.
  void validate() const;
};

// x' = x (1 - M) + p M with the patch already at frame size.
Tensor compose_hand_patch(const Tensor& frame, const Tensor& patch, const Mask& mask);
// Bilinear resize of the patch to the frame, then compose.
Tensor compose_hand_patch(const Tensor& frame, const Patch& patch, const Mask& mask);

double mean_mask_quality(const Tensor& quality, const Mask& mask);

// Sign-gradient ascent on the masked mean quality, projected onto the
// l-inf ball of radius epsilon around x' and onto [0,1]. Off-mask pixels are
// copied from x'. An empty mask returns x' unchanged.
Tensor pqgd_refine(const GraspModel& model, const Tensor& composed, const Mask& mask, const PqgdConfig& cfg);

}  // namespace qfaap
