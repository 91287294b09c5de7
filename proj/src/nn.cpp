#include "qfaap/nn.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Core>

namespace qfaap::nn {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

int conv_out(int n, int k, int s, int p, int d) { return (n + 2 * p - d * (k - 1) - 1) / s + 1; }
int tconv_out(int n, int k, int s, int p, int d) { return (n - 1) * s - 2 * p + d * (k - 1) + 1; }

bool is_pointwise(const ConvSpec& s) { return s.kernel == 1 && s.stride == 1 && s.pad == 0; }

}  // namespace

void im2col(const double* src, const ConvGeometry& g, double* cols) {
  const int plane = g.out_rows * g.out_cols;
  for (int c = 0; c < g.channels; ++c) {
    const double* in = src + static_cast<std::size_t>(c) * g.rows * g.cols;
    for (int ki = 0; ki < g.kernel; ++ki) {
      for (int kj = 0; kj < g.kernel; ++kj) {
        double* out = cols + (static_cast<std::size_t>(c) * g.kernel * g.kernel + ki * g.kernel + kj) * plane;
        for (int oh = 0; oh < g.out_rows; ++oh) {
          const int ih = oh * g.stride - g.pad + ki * g.dilation;
          double* row = out + static_cast<std::size_t>(oh) * g.out_cols;
          if (ih < 0 || ih >= g.rows) {
            std::fill(row, row + g.out_cols, 0.0);
            continue;
          }
          const double* irow = in + static_cast<std::size_t>(ih) * g.cols;
          for (int ow = 0; ow < g.out_cols; ++ow) {
            const int iw = ow * g.stride - g.pad + kj * g.dilation;
            row[ow] = (iw >= 0 && iw < g.cols) ? irow[iw] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, const ConvGeometry& g, double* dst) {
  const int plane = g.out_rows * g.out_cols;
  std::fill(dst, dst + static_cast<std::size_t>(g.channels) * g.rows * g.cols, 0.0);
  for (int c = 0; c < g.channels; ++c) {
    double* out = dst + static_cast<std::size_t>(c) * g.rows * g.cols;
    for (int ki = 0; ki < g.kernel; ++ki) {
      for (int kj = 0; kj < g.kernel; ++kj) {
        const double* in = cols + (static_cast<std::size_t>(c) * g.kernel * g.kernel + ki * g.kernel + kj) * plane;
        for (int oh = 0; oh < g.out_rows; ++oh) {
          const int ih = oh * g.stride - g.pad + ki * g.dilation;
          if (ih < 0 || ih >= g.rows) continue;
          double* orow = out + static_cast<std::size_t>(ih) * g.cols;
          const double* row = in + static_cast<std::size_t>(oh) * g.out_cols;
          for (int ow = 0; ow < g.out_cols; ++ow) {
            const int iw = ow * g.stride - g.pad + kj * g.dilation;
            if (iw >= 0 && iw < g.cols) orow[iw] += row[ow];
          }
        }
      }
    }
  }
}

Conv2d::Conv2d(const ConvSpec& spec) : spec_(spec) {
  if (spec.in_channels <= 0 || spec.out_channels <= 0 || spec.kernel <= 0 || spec.stride <= 0 || spec.pad < 0 ||
      spec.dilation <= 0) {
    throw InvalidInput("invalid convolution spec");
  }
  weight_.assign(static_cast<std::size_t>(spec.in_channels) * spec.out_channels * spec.kernel * spec.kernel, 0.0);
  bias_.assign(spec.out_channels, 0.0);
}

int Conv2d::output_rows(int rows) const {
  return spec_.transposed ? tconv_out(rows, spec_.kernel, spec_.stride, spec_.pad, spec_.dilation)
                          : conv_out(rows, spec_.kernel, spec_.stride, spec_.pad, spec_.dilation);
}

int Conv2d::output_cols(int cols) const { return output_rows(cols); }

void Conv2d::init_he(std::mt19937_64& rng, double gain) {
  const int fan_in = spec_.transposed ? spec_.in_channels * spec_.kernel * spec_.kernel / (spec_.stride * spec_.stride)
                                      : spec_.in_channels * spec_.kernel * spec_.kernel;
  std::normal_distribution<double> dist(0.0, gain * std::sqrt(2.0 / std::max(1, fan_in)));
  for (double& w : weight_) w = dist(rng);
  std::fill(bias_.begin(), bias_.end(), 0.0);
}

Tensor Conv2d::forward(const Tensor& x) const {
  if (x.channels() != spec_.in_channels) {
    throw InvalidInput("conv input has " + std::to_string(x.channels()) + " channels, expected " +
                       std::to_string(spec_.in_channels));
  }
  const int kk = spec_.kernel * spec_.kernel;
  if (!spec_.transposed) {
    const int orows = output_rows(x.rows()), ocols = output_cols(x.cols());
    if (orows <= 0 || ocols <= 0) throw InvalidInput("conv input too small: " + x.shape_string());
    Tensor y(spec_.out_channels, orows, ocols);
    const int plane = orows * ocols;
    ConstMapMat w(weight_.data(), spec_.out_channels, spec_.in_channels * kk);
    MapMat out(y.data(), spec_.out_channels, plane);
    if (is_pointwise(spec_)) {
      out.noalias() = w * ConstMapMat(x.data(), spec_.in_channels, plane);
    } else {
      const ConvGeometry g{x.channels(), x.rows(), x.cols(), spec_.kernel, spec_.stride, spec_.pad,
                           spec_.dilation, orows, ocols};
      std::vector<double> cols(static_cast<std::size_t>(spec_.in_channels) * kk * plane);
      im2col(x.data(), g, cols.data());
      out.noalias() = w * ConstMapMat(cols.data(), spec_.in_channels * kk, plane);
    }
    for (int c = 0; c < spec_.out_channels; ++c) out.row(c).array() += bias_[c];
    return y;
  }
  // transposed: y = col2im(W^T x) on the geometry of the adjoint convolution
  const int orows = output_rows(x.rows()), ocols = output_cols(x.cols());
  const int iplane = x.rows() * x.cols();
  ConstMapMat w(weight_.data(), spec_.in_channels, spec_.out_channels * kk);
  RowMat cols = w.transpose() * ConstMapMat(x.data(), spec_.in_channels, iplane);
  Tensor y(spec_.out_channels, orows, ocols);
  const ConvGeometry g{spec_.out_channels, orows, ocols, spec_.kernel, spec_.stride, spec_.pad,
                       spec_.dilation, x.rows(), x.cols()};
  col2im(cols.data(), g, y.data());
  MapMat out(y.data(), spec_.out_channels, orows * ocols);
  for (int c = 0; c < spec_.out_channels; ++c) out.row(c).array() += bias_[c];
  return y;
}

Tensor Conv2d::backward(const Tensor& x, const Tensor& dy, std::span<double> dweight,
                        std::span<double> dbias) const {
  const int kk = spec_.kernel * spec_.kernel;
  const bool want_params = !dweight.empty();
  if (!dbias.empty()) {
    for (int c = 0; c < dy.channels(); ++c) {
      double s = 0.0;
      for (double v : dy.plane(c)) s += v;
      dbias[c] += s;
    }
  }
  if (!spec_.transposed) {
    const int plane = dy.rows() * dy.cols();
    ConstMapMat w(weight_.data(), spec_.out_channels, spec_.in_channels * kk);
    ConstMapMat gy(dy.data(), spec_.out_channels, plane);
    Tensor dx(x.channels(), x.rows(), x.cols());
    if (is_pointwise(spec_)) {
      ConstMapMat xm(x.data(), spec_.in_channels, plane);
      if (want_params) MapMat(dweight.data(), spec_.out_channels, spec_.in_channels).noalias() += gy * xm.transpose();
      MapMat(dx.data(), spec_.in_channels, plane).noalias() = w.transpose() * gy;
      return dx;
    }
    const ConvGeometry g{x.channels(), x.rows(), x.cols(), spec_.kernel, spec_.stride, spec_.pad,
                         spec_.dilation, dy.rows(), dy.cols()};
    if (want_params) {
      std::vector<double> cols(static_cast<std::size_t>(spec_.in_channels) * kk * plane);
      im2col(x.data(), g, cols.data());
      MapMat(dweight.data(), spec_.out_channels, spec_.in_channels * kk).noalias() +=
          gy * ConstMapMat(cols.data(), spec_.in_channels * kk, plane).transpose();
    }
    RowMat dcols = w.transpose() * gy;
    col2im(dcols.data(), g, dx.data());
    return dx;
  }
  // transposed: dx = W im2col(dy); dW = x im2col(dy)^T
  const int iplane = x.rows() * x.cols();
  const ConvGeometry g{spec_.out_channels, dy.rows(), dy.cols(), spec_.kernel, spec_.stride, spec_.pad,
                       spec_.dilation, x.rows(), x.cols()};
  std::vector<double> cols(static_cast<std::size_t>(spec_.out_channels) * kk * iplane);
  im2col(dy.data(), g, cols.data());
  ConstMapMat cm(cols.data(), spec_.out_channels * kk, iplane);
  ConstMapMat w(weight_.data(), spec_.in_channels, spec_.out_channels * kk);
  if (want_params) {
    MapMat(dweight.data(), spec_.in_channels, spec_.out_channels * kk).noalias() +=
        ConstMapMat(x.data(), spec_.in_channels, iplane) * cm.transpose();
  }
  Tensor dx(x.channels(), x.rows(), x.cols());
  MapMat(dx.data(), spec_.in_channels, iplane).noalias() = w * cm;
  return dx;
}

}  // namespace qfaap::nn
