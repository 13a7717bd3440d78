#include "srnet/train.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "srnet/rng.hpp"

namespace srnet {

BatchStream::BatchStream(std::size_t n, std::size_t batch, std::uint64_t seed)
    : n_(n), batch_(batch), rng_(seed), order_(n) {
  if (n == 0 || batch == 0) throw std::invalid_argument("BatchStream: empty data or batch");
  reshuffle();
}

void BatchStream::reshuffle() {
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  deterministic_shuffle(order_.begin(), order_.end(), rng_);
  pos_ = 0;
}

std::vector<std::size_t> BatchStream::next() {
  if (pos_ >= n_) reshuffle();
  const std::size_t end = std::min(n_, pos_ + batch_);
  std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                               order_.begin() + static_cast<std::ptrdiff_t>(end));
  pos_ = end;
  return out;
}

TrajectoryPoint evaluate(Encoder& model, MaskSet* masks, const EvalSets& sets, long step, double loss) {
  TrajectoryPoint p;
  p.step = step;
  p.loss = loss;
  p.sparsity = masks ? sparsity_of(*masks) : 0.0;
  auto score = [&](const Split& split, double& acc, double& f1) {
    const std::vector<int> pred = predict_labels(model, split, masks);
    std::vector<int> gold;
    gold.reserve(split.size());
    for (const Example& ex : split) gold.push_back(ex.label);
    const MetricReport r = compute_metrics(pred, gold, model.config().classes);
    acc = r.accuracy;
    f1 = r.weighted_f1;
  };
  if (sets.id_dev) score(*sets.id_dev, p.id_acc, p.id_f1);
  if (sets.ood_test) score(*sets.ood_test, p.ood_acc, p.ood_f1);
  return p;
}

double forward_backward(Encoder& model, const TrainData& data, std::span<const std::size_t> rows, LossKind loss,
                        MaskSet* masks, Trainable trainable) {
  std::vector<const Example*> ptrs;
  ptrs.reserve(rows.size());
  for (std::size_t r : rows) ptrs.push_back(&data.split->at(r));
  const Batch batch = make_batch(ptrs, model.config());
  static const DebiasAux kNoAux;
  Tape tape;
  Var logits = model.forward(tape, batch, masks, trainable);
  Var l = training_loss(logits, loss, batch.labels, rows, data.aux ? *data.aux : kNoAux);
  const double value = l.value().item();
  tape.backward(l);
  return value;
}

AdamW make_optimizer(Encoder& model, const AdamWConfig& config) {
  AdamW opt(config);
  for (const NamedParam& p : model.parameters()) opt.add(*p.tensor, p.decay);
  return opt;
}

PretrainResult pretrain(Encoder& model, const DatasetSpec& spec, const PretrainConfig& config, std::uint64_t seed) {
  PretrainResult result;
  if (config.steps > 0) {
    const ModelConfig& mc = model.config();
    const Split corpus = generate_corpus(spec, config.corpus_size, derive_seed(seed, "pretrain/corpus"));
    Rng rng(derive_seed(seed, "pretrain/head"));
    const auto d = static_cast<std::size_t>(mc.d_model), v = static_cast<std::size_t>(mc.vocab_size);
    Tensor head({d, v}), head_bias({v});
    for (float& w : head.data()) w = static_cast<float>(standard_normal(rng) * mc.init_std);

    AdamW opt(config.optim);
    for (const NamedParam& p : model.parameters())
      if (p.name.rfind("cls.", 0) != 0) opt.add(*p.tensor, p.decay);
    opt.add(head, true);
    opt.add(head_bias, false);

    BatchStream stream(corpus.size(), static_cast<std::size_t>(config.batch), derive_seed(seed, "pretrain/batches"));
    Rng mask_rng(derive_seed(seed, "pretrain/mask"));
    for (long step = 0; step < config.steps; ++step) {
      std::vector<const Example*> ptrs;
      for (std::size_t r : stream.next()) ptrs.push_back(&corpus[r]);
      Batch batch = make_batch(ptrs, mc);
      std::vector<std::size_t> positions;
      std::vector<int> targets;
      std::vector<std::size_t> candidates;
      for (std::size_t i = 0; i < batch.tokens.size(); ++i) {
        const int t = batch.tokens[i];
        if (t == token::kPad || t == token::kCls || t == token::kSep) continue;
        candidates.push_back(i);
        if (uniform01(mask_rng) < config.mask_prob) {
          positions.push_back(i);
          targets.push_back(t);
        }
      }
      if (positions.empty() && !candidates.empty()) {
        const std::size_t i = candidates[uniform_index(mask_rng, candidates.size())];
        positions.push_back(i);
        targets.push_back(batch.tokens[i]);
      }
      for (std::size_t i : positions) batch.tokens[i] = token::kMask;

      Tape tape;
      Var hidden = model.encode(tape, batch, nullptr, Trainable::weights);
      Var logits = ops::add_row(ops::matmul(ops::select_rows(hidden, positions), tape.watch(head)), tape.watch(head_bias));
      Var loss = ops::cross_entropy_from_logits(logits, targets);
      result.losses.push_back(loss.value().item());
      tape.backward(loss);
      opt.step();
      opt.zero_grad();
    }
    for (const NamedParam& p : model.parameters()) p.tensor->drop_grad();
  }
  result.snapshot = model.snapshot(SnapshotTag::pretrained, config.steps);
  return result;
}

long finetune_steps(std::size_t n_train, const FinetuneConfig& config) {
  const auto b = static_cast<std::size_t>(config.batch);
  return static_cast<long>(config.epochs) * static_cast<long>((n_train + b - 1) / b);
}

FinetuneResult finetune(Encoder& model, const TrainData& data, LossKind loss, MaskSet* fixed_masks,
                        const EvalSets& sets, const FinetuneConfig& config, std::uint64_t seed, SnapshotTag tag) {
  if (!data.split || data.split->empty()) throw std::invalid_argument("finetune: empty training split");
  if (config.epochs <= 0 || config.batch <= 0 || config.eval_interval <= 0)
    throw std::invalid_argument("finetune: epochs, batch and eval interval must be positive");
  FinetuneResult result;
  result.t_max = finetune_steps(data.split->size(), config);
  for (long s : config.snapshot_steps)
    if (s < 0 || s > result.t_max) throw std::invalid_argument("finetune: snapshot step outside [0, t_max]");

  AdamW opt = make_optimizer(model, config.optim);
  BatchStream stream(data.split->size(), static_cast<std::size_t>(config.batch), derive_seed(seed, "finetune/batches"));

  auto keep_snapshot = [&](long step) {
    if (std::find(config.snapshot_steps.begin(), config.snapshot_steps.end(), step) != config.snapshot_steps.end())
      result.snapshots.push_back(model.snapshot(SnapshotTag::intermediate, step));
  };
  auto record = [&](long step, double l) {
    result.trajectory.push_back(evaluate(model, fixed_masks, sets, step, l));
    const TrajectoryPoint& p = result.trajectory.back();
    if (result.trajectory.size() == 1 || p.id_acc > result.trajectory[result.selected].id_acc) {
      result.selected = result.trajectory.size() - 1;
      result.best = model.snapshot(tag, step);
    }
  };

  keep_snapshot(0);
  record(0, 0.0);
  double running = 0.0;
  long since = 0;
  for (long t = 1; t <= result.t_max; ++t) {
    const std::vector<std::size_t> rows = stream.next();
    running += forward_backward(model, data, rows, loss, fixed_masks, Trainable::weights);
    ++since;
    opt.step();
    opt.zero_grad();
    keep_snapshot(t);
    if (t % config.eval_interval == 0 || t == result.t_max) {
      record(t, running / static_cast<double>(since));
      running = 0.0;
      since = 0;
    }
  }
  for (const NamedParam& p : model.parameters()) p.tensor->drop_grad();
  model.restore(result.best);
  return result;
}

}  // namespace srnet
