#pragma once

#include "cgdetr/nn.hpp"

#include <vector>

namespace cgdetr::optim {

/// Adam with L2 weight decay folded into the gradient.
class Adam {
 public:
  struct Options {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
  };

  Adam(const nn::ParameterStore& params, Options opts);

  /// Applies one update from the gradients currently held by the parameters.
  void step();

  long long steps() const { return t_; }
  const std::vector<ad::Matrix>& first_moments() const { return m_; }
  const std::vector<ad::Matrix>& second_moments() const { return v_; }
  void restore(long long steps, std::vector<ad::Matrix> m, std::vector<ad::Matrix> v);

 private:
  std::vector<ad::Var> params_;
  Options opts_;
  std::vector<ad::Matrix> m_;
  std::vector<ad::Matrix> v_;
  long long t_ = 0;
};

/// Scales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(const nn::ParameterStore& params, double max_norm);

}  // namespace cgdetr::optim
