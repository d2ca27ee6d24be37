#pragma once

#include <cmath>
#include <vector>

#include "loagen/core/nn.hpp"

namespace loagen::optim {

// AdamW with linear warmup and no decay schedule afterwards.
class AdamW {
public:
  struct Options {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    std::size_t warmup_steps = 0;
  };

  AdamW(nn::ParamStore& ps, Options opt) : ps_(&ps), opt_(opt) {
    m_.resize(ps.size());
    v_.resize(ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) {
      m_[i] = Tensor(ps.entries()[i].var.value().shape());
      v_[i] = Tensor(ps.entries()[i].var.value().shape());
    }
  }

  double current_lr() const {
    if (opt_.warmup_steps && step_ < opt_.warmup_steps)
      return opt_.lr * static_cast<double>(step_ + 1) /
             static_cast<double>(opt_.warmup_steps);
    return opt_.lr;
  }

  void step() {
    const double lr = current_lr();
    ++step_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < ps_->size(); ++i) {
      auto& e = ps_->entries()[i];
      if (!e.var.grad().numel()) continue;
      auto& val = e.var.value_mut();
      const auto& g = e.var.grad();
      for (std::size_t j = 0; j < val.numel(); ++j) {
        m_[i][j] = opt_.beta1 * m_[i][j] + (1.0 - opt_.beta1) * g[j];
        v_[i][j] = opt_.beta2 * v_[i][j] + (1.0 - opt_.beta2) * g[j] * g[j];
        double mh = m_[i][j] / bc1;
        double vh = v_[i][j] / bc2;
        val[j] -= lr * (mh / (std::sqrt(vh) + opt_.eps) +
                        opt_.weight_decay * val[j]);
      }
    }
  }

  void zero_grad() { ps_->zero_grad(); }
  std::size_t steps_taken() const { return step_; }

private:
  nn::ParamStore* ps_;
  Options opt_;
  std::size_t step_ = 0;
  std::vector<Tensor> m_, v_;
};

}  // namespace loagen::optim
