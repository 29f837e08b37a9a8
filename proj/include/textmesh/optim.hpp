#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace textmesh::optim {

// Standard Adam with bias correction. Callers may restrict updates to a
// sub-range mask (e.g. only SDF-trunk segments during sphere pretraining).
class Adam {
 public:
  Adam(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  std::size_t step_count() const { return t_; }

  // mask may be empty (update everything) or size n (update where true).
  void step(std::span<double> params, std::span<const double> grad,
            std::span<const unsigned char> mask = {}) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!mask.empty() && !mask[i]) continue;
      const double g = grad[i];
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
      const double mhat = m_[i] / c1;
      const double vhat = v_[i] / c2;
      params[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<double> m_, v_;
};

}  // namespace textmesh::optim
