#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "srnet/data.hpp"
#include "srnet/debias.hpp"
#include "srnet/masking.hpp"
#include "srnet/metrics.hpp"
#include "srnet/model.hpp"
#include "srnet/optim.hpp"
#include "srnet/rng.hpp"

namespace srnet {

/// Shuffled mini-batch indices over [0, n), reshuffled every epoch. The last
/// batch of an epoch may be short.
class BatchStream {
 public:
  BatchStream(std::size_t n, std::size_t batch, std::uint64_t seed);

  std::vector<std::size_t> next();
  std::size_t steps_per_epoch() const { return (n_ + batch_ - 1) / batch_; }

 private:
  void reshuffle();

  std::size_t n_, batch_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

/// A training split with the per-example side information its loss needs.
struct TrainData {
  const Split* split = nullptr;
  const DebiasAux* aux = nullptr;
};

struct EvalSets {
  const Split* id_dev = nullptr;
  const Split* ood_test = nullptr;
};

/// ID dev and OOD metrics at one step; sparsity is taken from `masks`.
TrajectoryPoint evaluate(Encoder& model, MaskSet* masks, const EvalSets& sets, long step, double loss);

/// Forward + loss + backward on the given rows. Gradients land on the
/// weights (Trainable::weights) or on the binary masks (Trainable::masks).
double forward_backward(Encoder& model, const TrainData& data, std::span<const std::size_t> rows, LossKind loss,
                        MaskSet* masks, Trainable trainable);

/// AdamW over every parameter used by the classification forward.
AdamW make_optimizer(Encoder& model, const AdamWConfig& config);

struct PretrainConfig {
  long steps = 2000;
  int batch = 32;
  int corpus_size = 20000;
  double mask_prob = 0.15;
  AdamWConfig optim{1e-3f, 0.01f, 0.9f, 0.999f, 1e-8f};
};

struct PretrainResult {
  ParameterSnapshot snapshot;
  std::vector<double> losses;  // one per step
};

/// Masked-token reconstruction on a bias-free corpus through a throwaway
/// output head. steps = 0 returns the model's current weights.
PretrainResult pretrain(Encoder& model, const DatasetSpec& spec, const PretrainConfig& config, std::uint64_t seed);

struct FinetuneConfig {
  AdamWConfig optim;
  int epochs = 3;
  int batch = 32;
  long eval_interval = 100;
  /// Steps at which full parameter snapshots are kept (timing study).
  std::vector<long> snapshot_steps;
};

struct FinetuneResult {
  long t_max = 0;
  std::vector<TrajectoryPoint> trajectory;
  std::size_t selected = 0;
  ParameterSnapshot best;
  std::vector<ParameterSnapshot> snapshots;
};

long finetune_steps(std::size_t n_train, const FinetuneConfig& config);

/// Trains the weights for epochs * ceil(n / batch) steps, evaluating every
/// eval_interval steps (and at 0 and t_max). With `fixed_masks` the masked
/// network is trained and the masks stay constant. The model ends restored
/// to the best checkpoint by ID dev accuracy.
FinetuneResult finetune(Encoder& model, const TrainData& data, LossKind loss, MaskSet* fixed_masks,
                        const EvalSets& sets, const FinetuneConfig& config, std::uint64_t seed,
                        SnapshotTag tag = SnapshotTag::finetuned);

}  // namespace srnet
