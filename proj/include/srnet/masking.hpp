#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "srnet/checkpoint.hpp"
#include "srnet/tensor.hpp"

namespace srnet {

/// Name of the classification matrix inside the prunable set.
inline constexpr const char* kClassifierWeight = "cls.weight";

/// Real-valued mask and its binarized image for one prunable matrix.
/// Invariant: binary[i] == (real[i] >= threshold).
struct MaskPair {
  std::string owner;
  Tensor real;
  Tensor binary;
  float threshold = 0.5f;

  std::size_t kept() const;
  std::size_t pruned() const { return binary.numel() - kept(); }
  /// Re-derives the binary mask from the real mask at the current threshold.
  void rebinarize();
};

struct WeightRef {
  std::string name;
  const Tensor* weight;
};

/// Ordered collection of mask pairs, one per prunable matrix.
class MaskSet {
 public:
  MaskSet() = default;
  /// All-ones masks (real = 1, threshold = 0.5) over the given matrices.
  static MaskSet ones(std::span<const WeightRef> weights);

  MaskPair* find(const std::string& owner);
  const MaskPair* find(const std::string& owner) const;
  MaskPair& at(const std::string& owner);
  const MaskPair& at(const std::string& owner) const;
  void add(MaskPair pair);

  std::vector<MaskPair>& pairs() { return pairs_; }
  const std::vector<MaskPair>& pairs() const { return pairs_; }
  std::size_t size() const { return pairs_.size(); }
  bool empty() const { return pairs_.empty(); }

  void zero_grad();
  /// Binary masks only; real masks and thresholds are dropped.
  MaskSet binary_copy() const;
  bool same_binary(const MaskSet& other) const;

  std::vector<MaskRecord> to_records(bool with_real) const;
  static MaskSet from_records(const std::vector<MaskRecord>& records);

 private:
  std::vector<MaskPair> pairs_;
};

/// floor(s * numel), guarded against binary round-off (0.29 * 100 -> 29).
std::size_t pruned_count(double sparsity, std::size_t numel);

/// m[i] = 1 iff real[i] >= phi.
Tensor binarize(const Tensor& real, float phi);

/// Entries among the floor(s * numel) smallest |W| get 0, the rest alpha*phi.
/// Equal magnitudes: the later flattened index is pruned first.
Tensor init_hard(const Tensor& weight, double sparsity, float alpha, float phi);

/// real = |W|.
Tensor init_soft(const Tensor& weight);

/// Sets the pair's threshold so that exactly numel - floor(s * numel)
/// entries satisfy real >= threshold, then rebinarizes. Entries tied with the
/// threshold that fall on the pruned side (later flattened index) are moved
/// to the next float below it so the binarization stays exact.
float recompute_threshold(MaskPair& pair, double sparsity);
void recompute_thresholds(MaskSet& masks, double sparsity);

/// real <- real - lr * dL/dm using the gradient accumulated on each binary
/// mask, then rebinarizes. Throws if a mask carries no gradient.
void ste_step(MaskSet& masks, float lr);

/// Fraction of pruned entries. The classifier matrix is left out of the
/// denominator unless `count_classifier` is set.
double sparsity_of(const MaskSet& masks, bool count_classifier = false);

enum class ScheduleKind { fixed, cubic };

struct SparsitySchedule {
  ScheduleKind kind = ScheduleKind::fixed;
  double s_start = 0.0;
  double s_final = 0.0;
  long t_begin = 0;
  long t_end = 0;

  static SparsitySchedule fixed(double s) { return {ScheduleKind::fixed, s, s, 0, 0}; }
  static SparsitySchedule cubic(double s_start, double s_final, long t_begin, long t_end) {
    return {ScheduleKind::cubic, s_start, s_final, t_begin, t_end};
  }
};

/// Gradual-pruning cubic ramp; fixed schedules return s_final throughout.
double schedule_eval(const SparsitySchedule& schedule, long t);

enum class MaskInit { hard, soft };

struct MaskConfig {
  float phi = 0.01f;
  float alpha = 2.0f;
  long threshold_interval = 100;
  MaskInit init = MaskInit::hard;
  /// Fixed schedules take their level from the run's target sparsity.
  SparsitySchedule schedule = SparsitySchedule::fixed(0.5);

  void validate() const;
};

const char* to_string(MaskInit init);
MaskInit parse_mask_init(const std::string& s);
const char* to_string(ScheduleKind kind);

}  // namespace srnet
