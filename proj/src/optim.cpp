#include "srnet/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

namespace srnet {

void AdamW::add(Tensor& param, bool decay) {
  slots_.push_back({&param, decay, std::vector<float>(param.numel(), 0.0f), std::vector<float>(param.numel(), 0.0f)});
}

void AdamW::step() {
  for (const Slot& s : slots_)
    if (!s.param->has_grad()) throw std::logic_error("AdamW::step: parameter has no gradient");
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double bc1 = 1.0 - std::pow(static_cast<double>(config_.beta1), t);
  const double bc2 = 1.0 - std::pow(static_cast<double>(config_.beta2), t);
  const float b1 = config_.beta1, b2 = config_.beta2;
  for (Slot& s : slots_) {
    auto w = s.param->data();
    auto g = std::as_const(*s.param).grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      s.m[i] = b1 * s.m[i] + (1.0f - b1) * g[i];
      s.v[i] = b2 * s.v[i] + (1.0f - b2) * g[i] * g[i];
      const double mhat = s.m[i] / bc1;
      const double vhat = s.v[i] / bc2;
      double update = mhat / (std::sqrt(vhat) + config_.eps);
      if (s.decay) update += static_cast<double>(config_.weight_decay) * w[i];
      w[i] -= static_cast<float>(config_.lr * update);
    }
  }
}

void AdamW::zero_grad() {
  for (Slot& s : slots_) s.param->zero_grad();
}

}  // namespace srnet
