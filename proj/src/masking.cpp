#include "srnet/masking.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <utility>

#include "srnet/kv.hpp"

namespace srnet {

std::size_t MaskPair::kept() const {
  std::size_t n = 0;
  for (float b : binary.data()) n += b != 0.0f;
  return n;
}

void MaskPair::rebinarize() {
  for (std::size_t i = 0; i < real.numel(); ++i) binary[i] = real[i] >= threshold ? 1.0f : 0.0f;
}

MaskSet MaskSet::ones(std::span<const WeightRef> weights) {
  MaskSet set;
  for (const WeightRef& w : weights) {
    MaskPair p{w.name, Tensor(w.weight->shape(), 1.0f), Tensor(w.weight->shape(), 1.0f), 0.5f};
    set.add(std::move(p));
  }
  return set;
}

MaskPair* MaskSet::find(const std::string& owner) {
  for (MaskPair& p : pairs_)
    if (p.owner == owner) return &p;
  return nullptr;
}

const MaskPair* MaskSet::find(const std::string& owner) const {
  for (const MaskPair& p : pairs_)
    if (p.owner == owner) return &p;
  return nullptr;
}

MaskPair& MaskSet::at(const std::string& owner) {
  if (MaskPair* p = find(owner)) return *p;
  throw std::out_of_range("no mask for `" + owner + "`");
}

const MaskPair& MaskSet::at(const std::string& owner) const {
  if (const MaskPair* p = find(owner)) return *p;
  throw std::out_of_range("no mask for `" + owner + "`");
}

void MaskSet::add(MaskPair pair) {
  if (find(pair.owner)) throw std::invalid_argument("duplicate mask for `" + pair.owner + "`");
  if (pair.real.shape() != pair.binary.shape()) throw ShapeError("mask `" + pair.owner + "`: real/binary shape mismatch");
  pairs_.push_back(std::move(pair));
}

void MaskSet::zero_grad() {
  for (MaskPair& p : pairs_) p.binary.drop_grad();
}

MaskSet MaskSet::binary_copy() const {
  MaskSet out;
  for (const MaskPair& p : pairs_) out.add({p.owner, p.binary.detached(), p.binary.detached(), 0.5f});
  return out;
}

bool MaskSet::same_binary(const MaskSet& other) const {
  if (pairs_.size() != other.pairs_.size()) return false;
  for (std::size_t i = 0; i < pairs_.size(); ++i)
    if (pairs_[i].owner != other.pairs_[i].owner || !pairs_[i].binary.same_values(other.pairs_[i].binary)) return false;
  return true;
}

std::vector<MaskRecord> MaskSet::to_records(bool with_real) const {
  std::vector<MaskRecord> out;
  for (const MaskPair& p : pairs_) {
    MaskRecord r{p.owner, p.binary.detached(), std::nullopt, p.threshold};
    if (with_real) r.real = p.real.detached();
    out.push_back(std::move(r));
  }
  return out;
}

MaskSet MaskSet::from_records(const std::vector<MaskRecord>& records) {
  MaskSet out;
  for (const MaskRecord& r : records) {
    MaskPair p{r.owner, r.real ? r.real->detached() : r.binary.detached(), r.binary.detached(),
               r.real ? r.threshold : 0.5f};
    out.add(std::move(p));
  }
  return out;
}

std::size_t pruned_count(double sparsity, std::size_t numel) {
  if (sparsity < 0.0 || sparsity >= 1.0) throw std::invalid_argument("sparsity must lie in [0, 1)");
  const auto k = static_cast<std::size_t>(std::floor(sparsity * static_cast<double>(numel) + 1e-9));
  return std::min(k, numel - 1);
}

Tensor binarize(const Tensor& real, float phi) {
  Tensor out(real.shape());
  for (std::size_t i = 0; i < real.numel(); ++i) out[i] = real[i] >= phi ? 1.0f : 0.0f;
  return out;
}

namespace {

// Ascending by key; among equal keys the later index comes first so that
// earlier indices survive.
std::vector<std::size_t> prune_order(const std::vector<float>& key) {
  std::vector<std::size_t> order(key.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (key[a] != key[b]) return key[a] < key[b];
    return a > b;
  });
  return order;
}

}  // namespace

Tensor init_hard(const Tensor& weight, double sparsity, float alpha, float phi) {
  std::vector<float> mag(weight.numel());
  for (std::size_t i = 0; i < mag.size(); ++i) mag[i] = std::fabs(weight[i]);
  const std::size_t k = pruned_count(sparsity, weight.numel());
  const std::vector<std::size_t> order = prune_order(mag);
  Tensor real(weight.shape(), alpha * phi);
  for (std::size_t i = 0; i < k; ++i) real[order[i]] = 0.0f;
  return real;
}

Tensor init_soft(const Tensor& weight) {
  Tensor real(weight.shape());
  for (std::size_t i = 0; i < weight.numel(); ++i) real[i] = std::fabs(weight[i]);
  return real;
}

float recompute_threshold(MaskPair& pair, double sparsity) {
  const std::size_t k = pruned_count(sparsity, pair.real.numel());
  std::vector<float> key(pair.real.data().begin(), pair.real.data().end());
  const std::vector<std::size_t> order = prune_order(key);
  const float phi = key[order[k]];
  for (std::size_t i = 0; i < k; ++i) {
    float& r = pair.real[order[i]];
    if (r >= phi) r = std::nextafter(phi, -std::numeric_limits<float>::infinity());
  }
  pair.threshold = phi;
  pair.rebinarize();
  return phi;
}

void recompute_thresholds(MaskSet& masks, double sparsity) {
  for (MaskPair& p : masks.pairs()) recompute_threshold(p, sparsity);
}

void ste_step(MaskSet& masks, float lr) {
  for (const MaskPair& p : masks.pairs())
    if (!p.binary.has_grad()) throw std::logic_error("ste_step: mask `" + p.owner + "` has no gradient");
  for (MaskPair& p : masks.pairs()) {
    auto g = std::as_const(p.binary).grad();
    for (std::size_t i = 0; i < p.real.numel(); ++i) p.real[i] -= lr * g[i];
    p.rebinarize();
  }
}

double sparsity_of(const MaskSet& masks, bool count_classifier) {
  std::size_t total = 0, pruned = 0;
  for (const MaskPair& p : masks.pairs()) {
    if (!count_classifier && p.owner == kClassifierWeight) continue;
    total += p.binary.numel();
    pruned += p.pruned();
  }
  if (total == 0) return 0.0;
  return static_cast<double>(pruned) / static_cast<double>(total);
}

double schedule_eval(const SparsitySchedule& schedule, long t) {
  if (t < 0) throw std::invalid_argument("schedule_eval: negative step");
  if (schedule.kind == ScheduleKind::fixed) return schedule.s_final;
  if (schedule.t_end <= schedule.t_begin) throw ConfigError("cubic schedule needs t_end > t_begin");
  const long tc = std::clamp(t, schedule.t_begin, schedule.t_end);
  if (tc == schedule.t_end) return schedule.s_final;
  const double frac = static_cast<double>(tc - schedule.t_begin) / static_cast<double>(schedule.t_end - schedule.t_begin);
  const double rest = 1.0 - frac;
  return schedule.s_final + (schedule.s_start - schedule.s_final) * rest * rest * rest;
}

void MaskConfig::validate() const {
  if (!(phi > 0.0f)) throw ConfigError("mask threshold phi must be positive");
  if (alpha < 1.0f) throw ConfigError("mask alpha must be >= 1");
  if (threshold_interval <= 0) throw ConfigError("threshold interval must be positive");
  if (schedule.kind == ScheduleKind::cubic && schedule.t_end <= schedule.t_begin)
    throw ConfigError("cubic schedule needs t_end > t_begin");
}

const char* to_string(MaskInit init) { return init == MaskInit::hard ? "hard" : "soft"; }

MaskInit parse_mask_init(const std::string& s) {
  if (s == "hard") return MaskInit::hard;
  if (s == "soft") return MaskInit::soft;
  throw ConfigError("unknown mask init `" + s + "` (expected hard|soft)");
}

const char* to_string(ScheduleKind kind) { return kind == ScheduleKind::fixed ? "fixed" : "cubic"; }

}  // namespace srnet
