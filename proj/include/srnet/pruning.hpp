#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "srnet/debias.hpp"
#include "srnet/kv.hpp"
#include "srnet/masking.hpp"
#include "srnet/metrics.hpp"
#include "srnet/model.hpp"
#include "srnet/optim.hpp"
#include "srnet/train.hpp"

namespace srnet {

enum class PruneMethod { imp, imp_rw, mask };
enum class PruneScope { local, global };

const char* to_string(PruneMethod method);
PruneMethod parse_prune_method(const std::string& s);
const char* to_string(PruneScope scope);
PruneScope parse_prune_scope(const std::string& s);

struct PruningRunConfig {
  PruneMethod method = PruneMethod::mask;
  LossKind loss = LossKind::std;
  long t_max = 1600;
  /// IMP pruning interval; 0 means 0.1 * t_max.
  long prune_interval = 0;
  double delta_s = 0.1;
  double sparsity = 0.5;
  MaskConfig mask;
  /// Step size of the straight-through update on the real-valued masks.
  float mask_lr = 0.05f;
  AdamWConfig optim;
  long eval_interval = 100;
  int batch = 32;
  std::uint64_t seed = 1;
  PruneScope scope = PruneScope::local;
  SelectionRule rule = SelectionRule::all_steps;
  /// Keep a copy of the masks after every IMP pruning event.
  bool record_events = false;

  long interval() const { return prune_interval > 0 ? prune_interval : std::max(1L, t_max / 10); }
  /// Number of IMP events k with sparsity = k * delta_s.
  long imp_events() const;
  /// Schedule a mask run follows; fixed schedules take `sparsity`.
  SparsitySchedule effective_schedule() const;
  void validate() const;
};

struct Provenance {
  std::string paradigm;
  std::string method;
  std::string loss;
  double sparsity = 0.0;
  std::uint64_t seed = 0;
  std::string source;  // tag of the snapshot the search started from

  KeyValues to_key_values() const;
  static Provenance from_key_values(const KeyValues& kv);
};

struct Subnetwork {
  MaskSet masks;
  ParameterSnapshot weights;
  Provenance provenance;
  std::vector<TrajectoryPoint> trajectory;
  std::size_t selected = 0;
  /// Masks after each IMP pruning event when requested.
  std::vector<MaskSet> events;

  const TrajectoryPoint& selected_point() const { return trajectory.at(selected); }
};

/// Raises every mask to `sparsity` by zeroing the smallest-|W| survivors.
/// Local: floor(s * numel) pruned per matrix. Global: floor(s * total)
/// pruned over the pooled survivors. Pruned entries stay pruned; equal
/// magnitudes prune the later flattened index (earlier matrix first when
/// pooled) first.
void prune_by_magnitude(std::span<const WeightRef> weights, MaskSet& masks, double sparsity,
                        PruneScope scope = PruneScope::local);

/// Iterative magnitude pruning from the model's current weights theta_0:
/// prunes delta_s of the original count every interval steps while training
/// the survivors with AdamW. imp returns after one further interval at the target sparsity;
/// imp-rw returns the masks over theta_0 as soon as the target is reached.
Subnetwork imp_run(Encoder& model, const TrainData& data, const EvalSets& sets, const PruningRunConfig& config);

/// Learns binary masks over the frozen weights with the
/// straight-through estimator. The threshold is recomputed every
/// threshold_interval steps, at every evaluation and at t_max against the
/// schedule, so every recorded checkpoint meets its sparsity exactly.
Subnetwork mask_train_run(Encoder& model, const TrainData& data, const EvalSets& sets,
                          const PruningRunConfig& config);

Subnetwork search(Encoder& model, const TrainData& data, const EvalSets& sets, const PruningRunConfig& config);

/// Binary masks of a subnetwork, detached from its weights.
MaskSet extract_mask(const Subnetwork& subnetwork);

Checkpoint subnetwork_checkpoint(const Subnetwork& subnetwork, const ModelConfig& config);
Subnetwork subnetwork_from_checkpoint(const Checkpoint& ckpt);

}  // namespace srnet
