#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "srnet/pruning.hpp"

using namespace srnet;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.layers = 1;
  c.d_model = 16;
  c.d_ffn = 32;
  c.heads = 2;
  return c;
}

struct Fixture {
  Splits splits;
  Encoder model;
  TrainData data;
  EvalSets sets;

  explicit Fixture(std::uint64_t seed) : splits(make_splits(seed)), model(tiny_config(), seed) {
    data = {&splits.id_train, nullptr};
    sets = {&splits.id_dev, &splits.ood_test};
  }

  static Splits make_splits(std::uint64_t seed) {
    DatasetSpec s;
    s.seed = seed;
    s.n_train = 128;
    s.n_dev = 32;
    s.n_ood = 32;
    s.n_ood_train = 32;
    return generate(s);
  }
};

PruningRunConfig small_run(PruneMethod method) {
  PruningRunConfig c;
  c.method = method;
  c.t_max = 40;
  c.prune_interval = 4;
  c.eval_interval = 4;
  c.batch = 16;
  c.sparsity = 0.5;
  c.mask.threshold_interval = 4;
  c.record_events = true;
  return c;
}

bool nested(const MaskSet& later, const MaskSet& earlier) {
  for (const MaskPair& p : later.pairs()) {
    const Tensor& e = earlier.at(p.owner).binary;
    for (std::size_t i = 0; i < p.binary.numel(); ++i)
      if (p.binary[i] == 1.0f && e[i] == 0.0f) return false;
  }
  return true;
}

void check_exact_sparsity(const MaskSet& masks, double s) {
  for (const MaskPair& p : masks.pairs()) {
    INFO(p.owner);
    CHECK(p.pruned() == pruned_count(s, p.binary.numel()));
  }
}

}  // namespace

TEST_CASE("magnitude pruning of a five-entry vector") {
  Tensor w({5}, {5.0f, -4.0f, 3.0f, -2.0f, 1.0f});
  const std::vector<WeightRef> refs = {{"w", &w}};
  MaskSet masks = MaskSet::ones(refs);
  prune_by_magnitude(refs, masks, 0.4);
  CHECK(masks.at("w").binary.same_values(Tensor({5}, {1, 1, 1, 0, 0})));
  prune_by_magnitude(refs, masks, 0.6);
  CHECK(masks.at("w").binary.same_values(Tensor({5}, {1, 1, 0, 0, 0})));
  // already-pruned entries stay pruned even if their weight grows
  w[4] = 100.0f;
  prune_by_magnitude(refs, masks, 0.8);
  CHECK(masks.at("w").binary.same_values(Tensor({5}, {1, 0, 0, 0, 0})));
}

TEST_CASE("global pruning pools magnitudes across matrices") {
  Tensor a({2}, {0.1f, 0.2f}), b({4}, {5.0f, 6.0f, 7.0f, 8.0f});
  const std::vector<WeightRef> refs = {{"a", &a}, {"b", &b}};
  MaskSet local = MaskSet::ones(refs), global = MaskSet::ones(refs);
  prune_by_magnitude(refs, local, 0.5, PruneScope::local);
  prune_by_magnitude(refs, global, 0.5, PruneScope::global);
  CHECK(local.at("a").pruned() == 1);
  CHECK(local.at("b").pruned() == 2);
  CHECK(global.at("a").pruned() == 2);
  CHECK(global.at("b").pruned() == 1);
  CHECK(global.at("b").binary[0] == 0.0f);
}

TEST_CASE("magnitude ties prune the later index first") {
  Tensor w({4}, {1.0f, -1.0f, 1.0f, 3.0f});
  const std::vector<WeightRef> refs = {{"w", &w}};
  MaskSet masks = MaskSet::ones(refs);
  prune_by_magnitude(refs, masks, 0.5);
  CHECK(masks.at("w").binary.same_values(Tensor({4}, {1, 0, 0, 1})));
}

TEST_CASE("run configuration checks") {
  PruningRunConfig c = small_run(PruneMethod::imp);
  CHECK_NOTHROW(c.validate());
  CHECK(c.imp_events() == 5);
  c.sparsity = 0.55;
  CHECK_THROWS_AS(c.imp_events(), ConfigError);
  c = small_run(PruneMethod::imp);
  c.t_max = 12;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_run(PruneMethod::mask);
  c.mask.schedule = SparsitySchedule::cubic(0.3, 0.7, 0, 40);
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.sparsity = 0.7;
  CHECK_NOTHROW(c.validate());
  CHECK(small_run(PruneMethod::mask).effective_schedule().s_final == 0.5);
  CHECK(parse_prune_method("imp-rw") == PruneMethod::imp_rw);
  CHECK(std::string(to_string(PruneMethod::imp_rw)) == "imp-rw");
  CHECK_THROWS(parse_prune_method("random"));
  CHECK(parse_prune_scope("global") == PruneScope::global);
}

TEST_CASE("imp-rw masks are nested and its weights are the rewound start") {
  Fixture f(1);
  const ParameterSnapshot theta0 = f.model.snapshot(SnapshotTag::pretrained);
  const Subnetwork sub = imp_run(f.model, f.data, f.sets, small_run(PruneMethod::imp_rw));
  REQUIRE(sub.events.size() == 5);
  for (std::size_t e = 1; e < sub.events.size(); ++e) CHECK(nested(sub.events[e], sub.events[e - 1]));
  for (std::size_t e = 0; e < sub.events.size(); ++e) check_exact_sparsity(sub.events[e], 0.1 * (e + 1));
  check_exact_sparsity(sub.masks, 0.5);
  CHECK(sub.weights.same_values(theta0));
  CHECK(f.model.snapshot(SnapshotTag::intermediate).same_values(theta0));
  CHECK(sub.provenance.method == "imp-rw");
  CHECK(sub.selected_point().sparsity == doctest::Approx(sparsity_of(sub.masks)));
}

TEST_CASE("imp keeps trained survivors at the target sparsity") {
  Fixture f(2);
  const ParameterSnapshot theta0 = f.model.snapshot(SnapshotTag::pretrained);
  const Subnetwork sub = imp_run(f.model, f.data, f.sets, small_run(PruneMethod::imp));
  for (std::size_t e = 1; e < sub.events.size(); ++e) CHECK(nested(sub.events[e], sub.events[e - 1]));
  check_exact_sparsity(sub.masks, 0.5);
  CHECK_FALSE(sub.weights.same_values(theta0));
  // the selected checkpoint was taken at the target sparsity
  CHECK(sub.selected_point().sparsity == doctest::Approx(sparsity_of(sub.masks)));
  CHECK(sub.selected_point().step >= 16);
}

TEST_CASE("mask training leaves the weights frozen and meets the sparsity exactly") {
  Fixture f(3);
  const ParameterSnapshot before = f.model.snapshot(SnapshotTag::finetuned);
  PruningRunConfig c = small_run(PruneMethod::mask);
  c.mask_lr = 0.5f;
  const Subnetwork sub = mask_train_run(f.model, f.data, f.sets, c);
  CHECK(f.model.snapshot(SnapshotTag::intermediate).same_values(before));
  CHECK(sub.weights.same_values(before));
  check_exact_sparsity(sub.masks, 0.5);
  for (const TrajectoryPoint& p : sub.trajectory) CHECK(p.sparsity == doctest::Approx(sub.trajectory[0].sparsity));
}

TEST_CASE("mask training with a zero rate keeps the magnitude mask") {
  Fixture f(4);
  PruningRunConfig c = small_run(PruneMethod::mask);
  c.mask_lr = 0.0f;
  const Subnetwork sub = mask_train_run(f.model, f.data, f.sets, c);
  const std::vector<WeightRef> refs = f.model.prunable();
  MaskSet magnitude = MaskSet::ones(refs);
  prune_by_magnitude(refs, magnitude, 0.5);
  CHECK(sub.masks.same_binary(magnitude));
}

TEST_CASE("soft-init mask training with a cubic schedule ends at the final sparsity") {
  Fixture f(5);
  PruningRunConfig c = small_run(PruneMethod::mask);
  c.sparsity = 0.9;
  c.mask.init = MaskInit::soft;
  c.mask.schedule = SparsitySchedule::cubic(0.7, 0.9, 0, 32);
  c.rule = SelectionRule::after_0_7_tmax;
  const Subnetwork sub = mask_train_run(f.model, f.data, f.sets, c);
  CHECK(10 * sub.selected_point().step >= 7 * c.t_max);
  check_exact_sparsity(sub.masks, schedule_eval(c.mask.schedule, sub.selected_point().step));
  CHECK(sub.trajectory.front().sparsity < sub.trajectory.back().sparsity);
}

TEST_CASE("subnetworks round-trip through checkpoints") {
  Fixture f(6);
  Subnetwork sub = mask_train_run(f.model, f.data, f.sets, small_run(PruneMethod::mask));
  sub.provenance.paradigm = "masks-over-finetuned";
  const Checkpoint ckpt = decode_checkpoint(encode_checkpoint(subnetwork_checkpoint(sub, f.model.config())));
  const Subnetwork back = subnetwork_from_checkpoint(ckpt);
  CHECK(back.masks.same_binary(sub.masks));
  CHECK(extract_mask(back).same_binary(sub.masks));
  CHECK(back.weights.same_values(sub.weights));
  CHECK(back.provenance.paradigm == "masks-over-finetuned");
  CHECK(back.provenance.sparsity == sub.provenance.sparsity);
  CHECK(back.provenance.seed == sub.provenance.seed);
}

TEST_CASE("runs are deterministic in their seed") {
  Fixture a(7), b(7);
  const PruningRunConfig c = small_run(PruneMethod::mask);
  const Subnetwork x = mask_train_run(a.model, a.data, a.sets, c), y = mask_train_run(b.model, b.data, b.sets, c);
  CHECK(x.masks.same_binary(y.masks));
  CHECK(trajectory_csv(x.trajectory) == trajectory_csv(y.trajectory));
}
