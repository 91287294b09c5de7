#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "qfaap/tensor.hpp"

namespace qfaap::nn {

struct ConvSpec {
  int in_channels = 1;
  int out_channels = 1;
  int kernel = 3;
  int stride = 1;
  int pad = 0;
  int dilation = 1;
  bool transposed = false;
};

// 2-D convolution (or its adjoint, the transposed convolution) lowered to a
// single GEMM through im2col/col2im.
//   regular:    weight is out x in x k x k
//   transposed: weight is in x out x k x k (PyTorch ConvTranspose2d layout)
class Conv2d {
 public:
  Conv2d() = default;
  explicit Conv2d(const ConvSpec& spec);

  const ConvSpec& spec() const { return spec_; }
  int output_rows(int rows) const;
  int output_cols(int cols) const;

  Tensor forward(const Tensor& x) const;
  // Returns dL/dx. When `dweight`/`dbias` are non-empty the parameter
  // gradients are accumulated into them.
  Tensor backward(const Tensor& x, const Tensor& dy, std::span<double> dweight, std::span<double> dbias) const;

  void init_he(std::mt19937_64& rng, double gain = 1.0);

  std::vector<double>& weight() { return weight_; }
  const std::vector<double>& weight() const { return weight_; }
  std::vector<double>& bias() { return bias_; }
  const std::vector<double>& bias() const { return bias_; }

 private:
  ConvSpec spec_;
  std::vector<double> weight_;
  std::vector<double> bias_;
};

// Geometry of a (non-transposed) convolution as seen by im2col.
struct ConvGeometry {
  int channels, rows, cols;
  int kernel, stride, pad, dilation;
  int out_rows, out_cols;
};

void im2col(const double* src, const ConvGeometry& g, double* cols);
void col2im(const double* cols, const ConvGeometry& g, double* dst);

}  // namespace qfaap::nn
