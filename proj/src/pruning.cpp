#include "srnet/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "srnet/rng.hpp"

namespace srnet {

const char* to_string(PruneMethod method) {
  switch (method) {
    case PruneMethod::imp: return "imp";
    case PruneMethod::imp_rw: return "imp-rw";
    case PruneMethod::mask: return "mask";
  }
  return "?";
}

PruneMethod parse_prune_method(const std::string& s) {
  if (s == "imp") return PruneMethod::imp;
  if (s == "imp-rw") return PruneMethod::imp_rw;
  if (s == "mask") return PruneMethod::mask;
  throw ConfigError("unknown pruning method `" + s + "` (expected imp|imp-rw|mask)");
}

const char* to_string(PruneScope scope) { return scope == PruneScope::local ? "local" : "global"; }

PruneScope parse_prune_scope(const std::string& s) {
  if (s == "local") return PruneScope::local;
  if (s == "global") return PruneScope::global;
  throw ConfigError("unknown pruning scope `" + s + "` (expected local|global)");
}

long PruningRunConfig::imp_events() const {
  const double k = sparsity / delta_s;
  const long rounded = std::lround(k);
  if (rounded < 1 || std::fabs(k - static_cast<double>(rounded)) > 1e-9)
    throw ConfigError("IMP target sparsity " + format_number(sparsity) + " is not a positive multiple of delta_s " +
                      format_number(delta_s));
  return rounded;
}

SparsitySchedule PruningRunConfig::effective_schedule() const {
  if (mask.schedule.kind == ScheduleKind::fixed) return SparsitySchedule::fixed(sparsity);
  return mask.schedule;
}

void PruningRunConfig::validate() const {
  if (t_max <= 0) throw ConfigError("t_max must be positive");
  if (eval_interval <= 0) throw ConfigError("eval interval must be positive");
  if (batch <= 0) throw ConfigError("batch size must be positive");
  if (sparsity < 0.0 || sparsity >= 1.0) throw ConfigError("target sparsity must lie in [0, 1)");
  mask.validate();
  if (method == PruneMethod::mask) {
    if (mask.schedule.kind == ScheduleKind::cubic && std::fabs(mask.schedule.s_final - sparsity) > 1e-12)
      throw ConfigError("cubic schedule must end at the target sparsity");
    return;
  }
  if (!(delta_s > 0.0 && delta_s < 1.0)) throw ConfigError("delta_s must lie in (0, 1)");
  const long k = imp_events();
  // Events happen at t = 0, dt, ..., (k-1) dt; imp returns at k dt.
  const long needed = method == PruneMethod::imp ? k * interval() : (k - 1) * interval();
  if (needed >= t_max + (method == PruneMethod::imp ? 1 : 0))
    throw ConfigError("t_max = " + std::to_string(t_max) + " is too small to reach sparsity " + format_number(sparsity) +
                      " with interval " + std::to_string(interval()));
}

KeyValues Provenance::to_key_values() const {
  return {{"provenance.paradigm", paradigm}, {"provenance.method", method},
          {"provenance.loss", loss},         {"provenance.sparsity", format_number(sparsity)},
          {"provenance.seed", std::to_string(seed)}, {"provenance.source", source}};
}

Provenance Provenance::from_key_values(const KeyValues& kv) {
  Provenance p;
  auto get = [&](const char* k) -> std::string {
    auto it = kv.find(k);
    return it == kv.end() ? std::string() : it->second;
  };
  p.paradigm = get("provenance.paradigm");
  p.method = get("provenance.method");
  p.loss = get("provenance.loss");
  if (auto s = get("provenance.sparsity"); !s.empty()) p.sparsity = parse_double("provenance.sparsity", s);
  if (auto s = get("provenance.seed"); !s.empty()) p.seed = static_cast<std::uint64_t>(parse_int("provenance.seed", s));
  p.source = get("provenance.source");
  return p;
}

namespace {

struct Candidate {
  float magnitude;
  std::size_t matrix;
  std::size_t index;
};

// Smaller magnitude first; among ties the later position goes first.
bool prune_before(const Candidate& a, const Candidate& b) {
  if (a.magnitude != b.magnitude) return a.magnitude < b.magnitude;
  if (a.matrix != b.matrix) return a.matrix > b.matrix;
  return a.index > b.index;
}

const Tensor& weight_for(std::span<const WeightRef> weights, const std::string& owner) {
  for (const WeightRef& w : weights)
    if (w.name == owner) return *w.weight;
  throw std::out_of_range("no weight named `" + owner + "`");
}

void prune_candidates(std::vector<Candidate>& survivors, std::size_t count, std::vector<MaskPair*>& pairs) {
  if (count > survivors.size()) throw std::invalid_argument("prune_by_magnitude: not enough surviving parameters");
  std::partial_sort(survivors.begin(), survivors.begin() + static_cast<std::ptrdiff_t>(count), survivors.end(),
                    prune_before);
  for (std::size_t i = 0; i < count; ++i) {
    MaskPair& p = *pairs[survivors[i].matrix];
    p.binary[survivors[i].index] = 0.0f;
    p.real[survivors[i].index] = 0.0f;
  }
}

}  // namespace

void prune_by_magnitude(std::span<const WeightRef> weights, MaskSet& masks, double sparsity, PruneScope scope) {
  std::vector<MaskPair*> pairs;
  for (MaskPair& p : masks.pairs()) {
    if (weight_for(weights, p.owner).shape() != p.binary.shape())
      throw ShapeError("mask `" + p.owner + "` does not match its weight");
    pairs.push_back(&p);
  }
  auto survivors_of = [&](std::size_t m, std::vector<Candidate>& out) {
    const Tensor& w = weight_for(weights, pairs[m]->owner);
    for (std::size_t i = 0; i < w.numel(); ++i)
      if (pairs[m]->binary[i] != 0.0f) out.push_back({std::fabs(w[i]), m, i});
  };

  if (scope == PruneScope::local) {
    for (std::size_t m = 0; m < pairs.size(); ++m) {
      const std::size_t target = pruned_count(sparsity, pairs[m]->binary.numel());
      const std::size_t already = pairs[m]->pruned();
      if (target <= already) continue;
      std::vector<Candidate> survivors;
      survivors_of(m, survivors);
      prune_candidates(survivors, target - already, pairs);
    }
    return;
  }
  std::size_t total = 0, already = 0;
  for (MaskPair* p : pairs) {
    total += p->binary.numel();
    already += p->pruned();
  }
  const std::size_t target = pruned_count(sparsity, total);
  if (target <= already) return;
  std::vector<Candidate> survivors;
  for (std::size_t m = 0; m < pairs.size(); ++m) survivors_of(m, survivors);
  prune_candidates(survivors, target - already, pairs);
}

namespace {

Provenance base_provenance(const PruningRunConfig& config, SnapshotTag source) {
  Provenance p;
  p.method = to_string(config.method);
  p.loss = to_string(config.loss);
  p.sparsity = config.sparsity;
  p.seed = config.seed;
  p.source = to_string(source);
  return p;
}

struct RunningLoss {
  double sum = 0.0;
  long n = 0;
  void add(double v) {
    sum += v;
    ++n;
  }
  double take() {
    const double m = n ? sum / static_cast<double>(n) : 0.0;
    sum = 0.0;
    n = 0;
    return m;
  }
};

}  // namespace

Subnetwork imp_run(Encoder& model, const TrainData& data, const EvalSets& sets, const PruningRunConfig& config) {
  if (config.method == PruneMethod::mask) throw std::invalid_argument("imp_run: method must be imp or imp-rw");
  config.validate();
  if (!data.split || data.split->empty()) throw std::invalid_argument("imp_run: empty training split");
  const long k = config.imp_events();
  const long dt = config.interval();

  Subnetwork out;
  const ParameterSnapshot theta0 = model.snapshot(SnapshotTag::intermediate, 0);
  out.provenance = base_provenance(config, SnapshotTag::intermediate);
  const std::vector<WeightRef> refs = model.prunable();
  MaskSet masks = MaskSet::ones(refs);
  AdamW opt = make_optimizer(model, config.optim);
  BatchStream stream(data.split->size(), static_cast<std::size_t>(config.batch), derive_seed(config.seed, "search/batches"));

  long n = 0;
  RunningLoss running;
  // Candidates for selection: evaluations taken at the target sparsity.
  std::vector<ParameterSnapshot> at_target;
  std::vector<std::size_t> at_target_index;

  auto finish_imp = [&](long t) {
    if (out.trajectory.empty() || out.trajectory.back().step != t) {
      out.trajectory.push_back(evaluate(model, &masks, sets, t, running.take()));
      at_target.push_back(model.snapshot(SnapshotTag::intermediate, t));
      at_target_index.push_back(out.trajectory.size() - 1);
    }
    std::vector<TrajectoryPoint> eligible;
    for (std::size_t i : at_target_index) eligible.push_back(out.trajectory[i]);
    const std::size_t best = select_checkpoint(eligible, config.rule, config.t_max);
    out.selected = at_target_index[best];
    out.weights = at_target[best];
    model.restore(out.weights);
  };

  for (long t = 0; t < config.t_max; ++t) {
    if (t % dt == 0) {
      if (n == k && config.method == PruneMethod::imp) {
        finish_imp(t);
        out.masks = masks.binary_copy();
        return out;
      }
      prune_by_magnitude(refs, masks, static_cast<double>(n + 1) * config.delta_s, config.scope);
      ++n;
      if (config.record_events) out.events.push_back(masks.binary_copy());
      if (n == k && config.method == PruneMethod::imp_rw) {
        for (const NamedParam& p : model.parameters()) p.tensor->drop_grad();
        model.restore(theta0);
        out.weights = theta0;
        out.trajectory.push_back(evaluate(model, &masks, sets, t, running.take()));
        out.selected = out.trajectory.size() - 1;
        out.masks = masks.binary_copy();
        return out;
      }
    }
    running.add(forward_backward(model, data, stream.next(), config.loss, &masks, Trainable::weights));
    opt.step();
    opt.zero_grad();
    const long done = t + 1;
    if (done % config.eval_interval == 0) {
      out.trajectory.push_back(evaluate(model, &masks, sets, done, running.take()));
      if (n == k) {
        at_target.push_back(model.snapshot(SnapshotTag::intermediate, done));
        at_target_index.push_back(out.trajectory.size() - 1);
      }
    }
  }
  // validate() guarantees imp reaches its return point before t_max unless
  // it lands exactly on t_max.
  if (config.method == PruneMethod::imp && n == k) {
    for (const NamedParam& p : model.parameters()) p.tensor->drop_grad();
    finish_imp(config.t_max);
    out.masks = masks.binary_copy();
    return out;
  }
  throw std::logic_error("imp_run: target sparsity not reached within t_max");
}

Subnetwork mask_train_run(Encoder& model, const TrainData& data, const EvalSets& sets,
                          const PruningRunConfig& config) {
  if (config.method != PruneMethod::mask) throw std::invalid_argument("mask_train_run: method must be mask");
  config.validate();
  if (!data.split || data.split->empty()) throw std::invalid_argument("mask_train_run: empty training split");
  const SparsitySchedule schedule = config.effective_schedule();

  Subnetwork out;
  out.provenance = base_provenance(config, SnapshotTag::intermediate);
  out.weights = model.snapshot(SnapshotTag::intermediate, 0);

  MaskSet masks;
  const double s0 = schedule_eval(schedule, 0);
  for (const WeightRef& w : model.prunable()) {
    MaskPair p;
    p.owner = w.name;
    if (config.mask.init == MaskInit::hard) {
      p.real = init_hard(*w.weight, s0, config.mask.alpha, config.mask.phi);
      p.binary = Tensor(w.weight->shape());
      p.threshold = config.mask.phi;
      p.rebinarize();
    } else {
      p.real = init_soft(*w.weight);
      p.binary = Tensor(w.weight->shape());
      recompute_threshold(p, s0);
    }
    masks.add(std::move(p));
  }

  BatchStream stream(data.split->size(), static_cast<std::size_t>(config.batch), derive_seed(config.seed, "search/batches"));
  std::vector<MaskSet> checkpoints;
  RunningLoss running;
  out.trajectory.push_back(evaluate(model, &masks, sets, 0, 0.0));
  checkpoints.push_back(masks.binary_copy());

  for (long t = 0; t < config.t_max; ++t) {
    running.add(forward_backward(model, data, stream.next(), config.loss, &masks, Trainable::masks));
    ste_step(masks, config.mask_lr);
    masks.zero_grad();
    const long done = t + 1;
    const bool eval = done % config.eval_interval == 0 || done == config.t_max;
    if (done % config.mask.threshold_interval == 0 || eval) recompute_thresholds(masks, schedule_eval(schedule, done));
    if (eval) {
      out.trajectory.push_back(evaluate(model, &masks, sets, done, running.take()));
      checkpoints.push_back(masks.binary_copy());
    }
  }
  out.selected = select_checkpoint(out.trajectory, config.rule, config.t_max);
  out.masks = std::move(checkpoints[out.selected]);
  return out;
}

Subnetwork search(Encoder& model, const TrainData& data, const EvalSets& sets, const PruningRunConfig& config) {
  return config.method == PruneMethod::mask ? mask_train_run(model, data, sets, config)
                                            : imp_run(model, data, sets, config);
}

MaskSet extract_mask(const Subnetwork& subnetwork) { return subnetwork.masks.binary_copy(); }

Checkpoint subnetwork_checkpoint(const Subnetwork& subnetwork, const ModelConfig& config) {
  Checkpoint c = to_checkpoint(subnetwork.weights, config, &subnetwork.masks, false);
  for (const auto& [k, v] : subnetwork.provenance.to_key_values()) c.meta[k] = v;
  if (!subnetwork.trajectory.empty()) c.meta["selected.step"] = std::to_string(subnetwork.selected_point().step);
  return c;
}

Subnetwork subnetwork_from_checkpoint(const Checkpoint& ckpt) {
  Subnetwork s;
  s.weights = snapshot_from_checkpoint(ckpt);
  s.masks = MaskSet::from_records(ckpt.masks);
  s.provenance = Provenance::from_key_values(ckpt.meta);
  return s;
}

}  // namespace srnet
