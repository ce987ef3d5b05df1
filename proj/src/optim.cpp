#include "grc/optim.hpp"

#include <cmath>

namespace grc::ad {

Adam::Adam(ParameterStore& params, AdamConfig config) : params_(&params), config_(config) {
  for (const auto& t : params.tensors()) {
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
}

void Adam::step() {
  auto& tensors = params_->tensors();
  double norm_sq = 0.0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (!tensors[i].has_grad()) continue;
    for (double g : tensors[i].mutable_grad()) {
      if (!std::isfinite(g)) throw NumericalFault("Adam: non-finite gradient for " + params_->names()[i]);
      norm_sq += g * g;
    }
  }
  double factor = 1.0;
  if (config_.max_grad_norm > 0.0) {
    const double norm = std::sqrt(norm_sq);
    if (norm > config_.max_grad_norm) factor = config_.max_grad_norm / norm;
  }

  ++step_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto values = tensors[i].mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    const bool has = tensors[i].has_grad();
    auto grads = has ? tensors[i].mutable_grad() : std::span<double>{};
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = has ? grads[j] * factor : 0.0;
      m[j] = b1 * m[j] + (1.0 - b1) * g;
      v[j] = b2 * v[j] + (1.0 - b2) * g * g;
      values[j] -= config_.learning_rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.epsilon);
    }
  }
}

}  // namespace grc::ad
