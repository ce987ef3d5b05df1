#pragma once

#include <cstdint>
#include <vector>

#include "grc/params.hpp"

namespace grc::ad {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double max_grad_norm = 0.0;  // 0 disables global-norm clipping
};

/// Adam with bias correction. Moments mirror the parameter shapes.
class Adam {
 public:
  Adam(ParameterStore& params, AdamConfig config = {});

  /// Applies one update from the accumulated gradients. Throws
  /// NumericalFault, leaving parameters and moments untouched, when any
  /// gradient is non-finite.
  void step();
  void zero_grad() { params_->zero_grad(); }

  std::uint64_t steps() const { return step_; }
  double learning_rate() const { return config_.learning_rate; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }
  const AdamConfig& config() const { return config_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  ParameterStore* params_;
  AdamConfig config_;
  std::uint64_t step_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace grc::ad
