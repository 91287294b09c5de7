#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace qfaap {

class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericalFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Channel-planar (CHW) dense array of doubles. Frames are 3-channel tensors
// with values in [0,1]; quality/angle/width maps are single-channel.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int channels, int rows, int cols, double fill = 0.0)
      : channels_(channels), rows_(rows), cols_(cols),
        data_(static_cast<std::size_t>(channels) * rows * cols, fill) {
    if (channels < 0 || rows < 0 || cols < 0) throw InvalidInput("negative tensor extent");
  }

  int channels() const { return channels_; }
  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  std::size_t plane_size() const { return static_cast<std::size_t>(rows_) * cols_; }
  bool empty() const { return data_.empty(); }

  double& operator()(int c, int r, int k) { return data_[index(c, r, k)]; }
  double operator()(int c, int r, int k) const { return data_[index(c, r, k)]; }
  double& at(int r, int k) { return data_[index(0, r, k)]; }
  double at(int r, int k) const { return data_[index(0, r, k)]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  std::span<double> plane(int c) { return {data_.data() + c * plane_size(), plane_size()}; }
  std::span<const double> plane(int c) const { return {data_.data() + c * plane_size(), plane_size()}; }

  bool same_shape(const Tensor& o) const {
    return channels_ == o.channels_ && rows_ == o.rows_ && cols_ == o.cols_;
  }
  bool same_extent(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  std::string shape_string() const;
  bool operator==(const Tensor& o) const = default;

 private:
  std::size_t index(int c, int r, int k) const {
    return (static_cast<std::size_t>(c) * rows_ + r) * cols_ + k;
  }

  int channels_ = 0;
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> data_;
};

// Binary H×W mask; 1 marks a selected pixel (hand, patch region, object).
class Mask {
 public:
  Mask() = default;
  Mask(int rows, int cols, std::uint8_t fill = 0)
      : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols, fill ? 1 : 0) {}

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  bool operator()(int r, int k) const { return data_[static_cast<std::size_t>(r) * cols_ + k] != 0; }
  void set(int r, int k, bool v) { data_[static_cast<std::size_t>(r) * cols_ + k] = v ? 1 : 0; }
  bool flat(std::size_t i) const { return data_[i] != 0; }
  void set_flat(std::size_t i, bool v) { data_[i] = v ? 1 : 0; }

  std::size_t count() const;
  bool any() const { return count() > 0; }
  bool all() const { return count() == size(); }
  bool matches(const Tensor& t) const { return rows_ == t.rows() && cols_ == t.cols(); }

  // Dilation with a Euclidean disc of `radius` pixels.
  Mask dilated(int radius) const;
  Mask operator|(const Mask& o) const;

  const std::vector<std::uint8_t>& bytes() const { return data_; }
  bool operator==(const Mask& o) const = default;

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<std::uint8_t> data_;
};

}  // namespace qfaap
