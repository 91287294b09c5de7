#include "qfaap/tensor.hpp"

#include <algorithm>
#include <numeric>

namespace qfaap {

std::string Tensor::shape_string() const {
  return std::to_string(channels_) + "x" + std::to_string(rows_) + "x" + std::to_string(cols_);
}

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), std::uint8_t{1}));
}

Mask Mask::dilated(int radius) const {
  if (radius <= 0) return *this;
  Mask out(rows_, cols_);
  const int r2 = radius * radius;
  for (int r = 0; r < rows_; ++r) {
    for (int k = 0; k < cols_; ++k) {
      if (!(*this)(r, k)) continue;
      for (int dr = -radius; dr <= radius; ++dr) {
        const int rr = r + dr;
        if (rr < 0 || rr >= rows_) continue;
        for (int dk = -radius; dk <= radius; ++dk) {
          const int kk = k + dk;
          if (kk < 0 || kk >= cols_ || dr * dr + dk * dk > r2) continue;
          out.set(rr, kk, true);
        }
      }
    }
  }
  return out;
}

Mask Mask::operator|(const Mask& o) const {
  if (rows_ != o.rows_ || cols_ != o.cols_) throw InvalidInput("mask shape mismatch");
  Mask out(rows_, cols_);
  for (std::size_t i = 0; i < data_.size(); ++i) out.data_[i] = (data_[i] | o.data_[i]) ? 1 : 0;
  return out;
}

}  // namespace qfaap
