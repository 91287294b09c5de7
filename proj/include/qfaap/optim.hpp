#pragma once

#include <span>
#include <vector>

namespace qfaap {

// Adam with bias correction; one instance per parameter array.
class Adam {
 public:
  explicit Adam(std::size_t n, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : m_(n, 0.0), v_(n, 0.0), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::span<double> params, std::span<const double> grads, double lr);
  long steps() const { return t_; }

 private:
  std::vector<double> m_;
  std::vector<double> v_;
  double beta1_;
  double beta2_;
  double eps_;
  long t_ = 0;
};

}  // namespace qfaap
