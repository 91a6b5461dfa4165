#include "cgdetr/optim.hpp"

#include "cgdetr/errors.hpp"

#include <cmath>

namespace cgdetr::optim {

Adam::Adam(const nn::ParameterStore& params, Options opts) : opts_(opts) {
  for (const auto& [_, v] : params.entries()) {
    params_.push_back(v);
    m_.push_back(ad::Matrix::Zero(v.rows(), v.cols()));
    v_.push_back(ad::Matrix::Zero(v.rows(), v.cols()));
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    ad::Matrix g = p.grad();
    if (opts_.weight_decay != 0.0) g += opts_.weight_decay * p.value();
    m_[i] = opts_.beta1 * m_[i] + (1.0 - opts_.beta1) * g;
    v_[i] = opts_.beta2 * v_[i] + (1.0 - opts_.beta2) * g.cwiseProduct(g);
    p.mutable_value().array() -=
        opts_.lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + opts_.eps);
  }
}

void Adam::restore(long long steps, std::vector<ad::Matrix> m, std::vector<ad::Matrix> v) {
  if (m.size() != params_.size() || v.size() != params_.size()) {
    throw ShapeError("optimizer state does not match the parameter layout");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (m[i].rows() != params_[i].rows() || m[i].cols() != params_[i].cols() ||
        v[i].rows() != params_[i].rows() || v[i].cols() != params_[i].cols()) {
      throw ShapeError("optimizer moment shape mismatch");
    }
  }
  t_ = steps;
  m_ = std::move(m);
  v_ = std::move(v);
}

double clip_grad_norm(const nn::ParameterStore& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, v] : params.entries()) {
    if (v.node()->grad.size() != 0) sq += v.node()->grad.squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / (norm + 1e-12);
    for (const auto& [_, v] : params.entries()) {
      if (v.node()->grad.size() != 0) v.node()->grad *= s;
    }
  }
  return norm;
}

}  // namespace cgdetr::optim
