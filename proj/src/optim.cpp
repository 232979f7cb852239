#include "pisco/optim.hpp"

#include <algorithm>
#include <cmath>

namespace pisco {
inline namespace PISCO_ABI {

LinearSchedule::LinearSchedule(double peak_lr, std::size_t total_steps, double warmup_ratio)
    : peak_(peak_lr),
      total_(std::max<std::size_t>(total_steps, 1)),
      warmup_(static_cast<std::size_t>(std::ceil(warmup_ratio * static_cast<double>(total_steps)))) {
  if (warmup_ratio < 0.0 || warmup_ratio > 1.0) {
    fail(ErrorCode::invalid_argument, "warmup ratio must lie in [0, 1]");
  }
}

double LinearSchedule::lr_at(std::size_t step) const {
  if (step < warmup_) return peak_ * static_cast<double>(step + 1) / static_cast<double>(warmup_);
  if (step >= total_) return 0.0;
  const double remaining = static_cast<double>(total_ - step);
  const double span = static_cast<double>(total_ - warmup_);
  return peak_ * remaining / span;
}

double clip_grad_norm(std::span<Parameter* const> params, double max_norm) {
  double sq = 0.0;
  for (const Parameter* p : params) {
    for (Scalar g : p->grad.values()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto factor = static_cast<Scalar>(max_norm / norm);
    for (Parameter* p : params) {
      for (Scalar& g : p->grad.values()) g *= factor;
    }
  }
  return norm;
}

AdamW::AdamW(std::vector<Parameter*> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
  for (Parameter* p : params_) {
    state_.first_moment.emplace_back(p->value.shape());
    state_.second_moment.emplace_back(p->value.shape());
    p->zero_grad();
  }
}

void AdamW::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

StepReport AdamW::step(double lr) {
  for (Parameter* p : params_) {
    if (p->grad.shape() != p->value.shape()) p->zero_grad();
    if (!p->grad.all_finite()) {
      fail(ErrorCode::non_finite, "adamw: non-finite gradient in parameter " + p->name);
    }
  }
  StepReport report;
  report.lr = lr;
  report.grad_norm = clip_grad_norm(params_, config_.max_grad_norm);
  if (config_.max_grad_norm > 0.0 && report.grad_norm > config_.max_grad_norm) {
    report.clip_scale = config_.max_grad_norm / report.grad_norm;
  }
  ++state_.step;
  const double t = static_cast<double>(state_.step);
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (!p.trainable) continue;
    Scalar* m = state_.first_moment[i].data();
    Scalar* v = state_.second_moment[i].data();
    Scalar* w = p.value.data();
    const Scalar* g = p.grad.data();
    const double decay = p.decay ? config_.weight_decay : 0.0;
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double gj = g[j];
      const double mj = config_.beta1 * m[j] + (1.0 - config_.beta1) * gj;
      const double vj = config_.beta2 * v[j] + (1.0 - config_.beta2) * gj * gj;
      m[j] = static_cast<Scalar>(mj);
      v[j] = static_cast<Scalar>(vj);
      const double mhat = mj / bc1;
      const double vhat = vj / bc2;
      double wj = w[j];
      wj -= lr * decay * wj;
      wj -= lr * mhat / (std::sqrt(vhat) + config_.eps);
      w[j] = static_cast<Scalar>(wj);
    }
  }
  return report;
}

}  // namespace PISCO_ABI
}  // namespace pisco
