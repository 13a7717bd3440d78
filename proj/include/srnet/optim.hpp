#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "srnet/tensor.hpp"

namespace srnet {

struct AdamWConfig {
  float lr = 3e-4f;
  float weight_decay = 0.01f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

/// Adam with decoupled weight decay. Moments are held per registered
/// parameter and are shape-congruent with it.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config) : config_(config) {}

  /// `decay` selects whether weight decay applies (matrices yes, biases and
  /// norms no).
  void add(Tensor& param, bool decay = true);

  /// One update using the gradients currently stored on the parameters.
  /// Throws if a registered parameter carries no gradient.
  void step();
  void zero_grad();

  std::uint64_t steps() const { return steps_; }
  const AdamWConfig& config() const { return config_; }
  void set_lr(float lr) { config_.lr = lr; }

  const std::vector<float>& first_moment(std::size_t i) const { return slots_[i].m; }
  const std::vector<float>& second_moment(std::size_t i) const { return slots_[i].v; }

 private:
  struct Slot {
    Tensor* param;
    bool decay;
    std::vector<float> m;
    std::vector<float> v;
  };

  AdamWConfig config_;
  std::vector<Slot> slots_;
  std::uint64_t steps_ = 0;
};

}  // namespace srnet
