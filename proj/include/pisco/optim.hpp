#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "pisco/autograd.hpp"

namespace pisco {
inline namespace PISCO_ABI {

/// AdamW settings. Betas and epsilon follow the common defaults.
struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double max_grad_norm = 1.0;
};

/// Linear warmup to the peak rate, then linear decay to zero.
class LinearSchedule {
 public:
  LinearSchedule(double peak_lr, std::size_t total_steps, double warmup_ratio);

  double lr_at(std::size_t step) const;
  std::size_t warmup_steps() const noexcept { return warmup_; }
  std::size_t total_steps() const noexcept { return total_; }

 private:
  double peak_;
  std::size_t total_;
  std::size_t warmup_;
};

struct OptimizerState {
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::size_t step = 0;
};

struct StepReport {
  double grad_norm = 0.0;  // before clipping
  double clip_scale = 1.0;
  double lr = 0.0;
};

/// Global L2 norm over all gradients. Returns the norm before clipping.
double clip_grad_norm(std::span<Parameter* const> params, double max_norm);

class AdamW {
 public:
  AdamW(std::vector<Parameter*> params, AdamWConfig config);

  /// Clips, checks finiteness, then applies one update at the given rate.
  /// A non-finite gradient aborts the step before any parameter changes.
  StepReport step(double lr);
  void zero_grad();

  const OptimizerState& state() const noexcept { return state_; }
  const std::vector<Parameter*>& params() const noexcept { return params_; }
  const AdamWConfig& config() const noexcept { return config_; }

 private:
  std::vector<Parameter*> params_;
  AdamWConfig config_;
  OptimizerState state_;
};

}  // namespace PISCO_ABI
}  // namespace pisco
