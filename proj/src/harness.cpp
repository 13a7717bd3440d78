#include "srnet/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

namespace srnet {

namespace fs = std::filesystem;

MissingInput::MissingInput(const fs::path& path, const std::string& producer)
    : std::runtime_error("missing " + path.string() + "; run `srnet " + producer + "` with the same config first") {}

namespace {

constexpr std::size_t kEmbeddingDim = 16;

std::string trajectory_to_csv(const std::vector<TrajectoryPoint>& t) { return trajectory_csv(t); }

std::vector<TrajectoryPoint> parse_trajectory_csv(const std::string& text) {
  std::vector<TrajectoryPoint> out;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  if (line != "step,sparsity,id_acc,id_f1,ood_acc,ood_f1,loss") throw FormatError("unexpected trajectory header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    if (cells.size() != 7) throw FormatError("trajectory row needs 7 columns: " + line);
    TrajectoryPoint p;
    p.step = static_cast<long>(parse_int("step", cells[0]));
    p.sparsity = parse_double("sparsity", cells[1]);
    p.id_acc = parse_double("id_acc", cells[2]);
    p.id_f1 = parse_double("id_f1", cells[3]);
    p.ood_acc = parse_double("ood_acc", cells[4]);
    p.ood_f1 = parse_double("ood_f1", cells[5]);
    p.loss = parse_double("loss", cells[6]);
    out.push_back(p);
  }
  return out;
}

std::string sanitize(std::string s) {
  for (char& c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '.' && c != '-' && c != '_') c = '_';
  return s;
}

bool same_at_survivors(const ParameterSnapshot& a, const ParameterSnapshot& b, const MaskSet& masks) {
  for (const auto& [name, t] : a.params) {
    const Tensor& u = b.at(name);
    const MaskPair* m = masks.find(name);
    for (std::size_t i = 0; i < t.numel(); ++i)
      if ((!m || m->binary[i] != 0.0f) && t[i] != u[i]) return false;
  }
  return true;
}

PruningRunConfig prune_config_for(const RunConfig& rc, double sparsity, std::uint64_t seed, LossKind loss) {
  PruningRunConfig c = rc.prune;
  c.sparsity = sparsity;
  c.loss = loss;
  c.seed = SeedPlan::from(seed).search;
  if (c.mask.schedule.kind == ScheduleKind::cubic) {
    c.mask.schedule = SparsitySchedule::cubic(c.mask.schedule.s_start, sparsity, 0,
                                              std::max(1L, std::lround(rc.schedule_end * static_cast<double>(c.t_max))));
  } else {
    c.mask.schedule = SparsitySchedule::fixed(sparsity);
  }
  return c;
}

Subnetwork dense_subnetwork(Encoder& model, const EvalSets& sets, const PruningRunConfig& config) {
  Subnetwork sub;
  sub.masks = MaskSet::ones(model.prunable());
  sub.weights = model.snapshot(SnapshotTag::intermediate);
  sub.trajectory.push_back(evaluate(model, &sub.masks, sets, 0, 0.0));
  sub.provenance.method = to_string(config.method);
  sub.provenance.loss = to_string(config.loss);
  sub.provenance.seed = config.seed;
  return sub;
}

void note(const std::string& msg) {
  static std::mutex mu;
  std::lock_guard<std::mutex> g(mu);
  std::cerr << msg << '\n';
}

}  // namespace

// ---------------------------------------------------------------------------

std::string ExperimentRecord::name() const {
  std::string n = study + "-" + paradigm + "-" + method + "-" + finetune_loss + "-" + prune_loss;
  if (!arm.empty()) n += "-" + arm;
  n += "-s" + format_number(sparsity);
  if (study == "gradual") n += "-T" + std::to_string(t_max);
  n += "-seed" + std::to_string(seed);
  return sanitize(n);
}

KeyValues ExperimentRecord::to_key_values() const {
  KeyValues kv = {{"record.study", study},
                  {"record.paradigm", paradigm},
                  {"record.method", method},
                  {"record.finetune_loss", finetune_loss},
                  {"record.prune_loss", prune_loss},
                  {"record.arm", arm},
                  {"record.sparsity", format_number(sparsity)},
                  {"record.seed", std::to_string(seed)},
                  {"record.t_max", std::to_string(t_max)},
                  {"record.selected", std::to_string(selected)},
                  {"record.flagged", flagged ? "true" : "false"},
                  {"record.violations", std::to_string(violations.size())}};
  for (std::size_t i = 0; i < violations.size(); ++i) kv["record.violation." + std::to_string(i)] = violations[i];
  if (!trajectory.empty()) {
    const TrajectoryPoint& p = selected_point();
    kv["selected.step"] = std::to_string(p.step);
    kv["selected.id_acc"] = format_number(p.id_acc);
    kv["selected.ood_acc"] = format_number(p.ood_acc);
  }
  return kv;
}

ExperimentRecord ExperimentRecord::from_key_values(const KeyValues& kv) {
  auto get = [&](const std::string& k) {
    const auto it = kv.find(k);
    if (it == kv.end()) throw FormatError("record is missing `" + k + "`");
    return it->second;
  };
  ExperimentRecord r;
  r.study = get("record.study");
  r.paradigm = get("record.paradigm");
  r.method = get("record.method");
  r.finetune_loss = get("record.finetune_loss");
  r.prune_loss = get("record.prune_loss");
  r.arm = get("record.arm");
  r.sparsity = parse_double("record.sparsity", get("record.sparsity"));
  r.seed = static_cast<std::uint64_t>(parse_int("record.seed", get("record.seed")));
  r.t_max = static_cast<long>(parse_int("record.t_max", get("record.t_max")));
  r.selected = static_cast<std::size_t>(parse_int("record.selected", get("record.selected")));
  r.flagged = parse_bool("record.flagged", get("record.flagged"));
  const long n = parse_int("record.violations", get("record.violations"));
  for (long i = 0; i < n; ++i) r.violations.push_back(get("record.violation." + std::to_string(i)));
  return r;
}

// ---------------------------------------------------------------------------

Workspace::Workspace(RunConfig config, fs::path root) : config_(std::move(config)), root_(std::move(root)) {
  config_.validate();
  fs::create_directories(root_);
}

fs::path Workspace::seed_dir(std::uint64_t seed) const { return root_ / ("seed-" + std::to_string(seed)); }

std::mutex& Workspace::lock_for(const std::string& key) {
  std::lock_guard<std::mutex> g(mu_);
  auto& slot = locks_[key];
  if (!slot) slot = std::make_unique<std::mutex>();
  return *slot;
}

const Splits& Workspace::splits() {
  std::lock_guard<std::mutex> g(lock_for("splits"));
  if (splits_) return *splits_;
  const fs::path dir = root_ / "data";
  const fs::path spec_path = dir / "spec.kv";
  const char* names[] = {"id_train", "id_dev", "ood_test", "ood_train"};
  auto s = std::make_unique<Splits>();
  Split* parts[] = {&s->id_train, &s->id_dev, &s->ood_test, &s->ood_train};
  if (fs::exists(spec_path)) {
    if (read_key_values(spec_path) != config_.data.to_key_values())
      throw ConfigError(dir.string() + " holds data generated from a different spec; use another output directory");
    for (int i = 0; i < 4; ++i) *parts[i] = read_split(dir / (std::string(names[i]) + ".tsv"));
  } else {
    *s = generate(config_.data);
    fs::create_directories(dir);
    for (int i = 0; i < 4; ++i) write_split(dir / (std::string(names[i]) + ".tsv"), *parts[i]);
    write_key_values(spec_path, config_.data.to_key_values());
  }
  splits_ = std::move(s);
  return *splits_;
}

const Split& Workspace::oracle_train() {
  const Splits& s = splits();
  std::lock_guard<std::mutex> g(lock_for("oracle_train"));
  if (oracle_train_) return *oracle_train_;
  check_disjoint_ids(s.ood_train, s.ood_test);
  auto mix = std::make_unique<Split>(s.id_train);
  mix->insert(mix->end(), s.ood_train.begin(), s.ood_train.end());
  oracle_train_ = std::move(mix);
  return *oracle_train_;
}

ParameterSnapshot Workspace::pretrained(std::uint64_t seed, bool produce) {
  const fs::path path = seed_dir(seed) / "pretrained.ckpt";
  std::lock_guard<std::mutex> g(lock_for(path.string()));
  if (fs::exists(path)) return snapshot_from_checkpoint(read_checkpoint(path));
  if (!produce) throw MissingInput(path, "pretrain");
  note("pretraining seed " + std::to_string(seed));
  const SeedPlan plan = SeedPlan::from(seed);
  Encoder model(config_.model, plan.model);
  const PretrainResult r = pretrain(model, config_.data, config_.pretrain, plan.pretrain);
  fs::create_directories(path.parent_path());
  std::string losses = "step,loss\n";
  for (std::size_t i = 0; i < r.losses.size(); ++i) losses += std::to_string(i) + "," + format_number(r.losses[i]) + "\n";
  write_text_file(seed_dir(seed) / "pretrain_loss.csv", losses);
  write_checkpoint(path, to_checkpoint(r.snapshot, config_.model));
  return r.snapshot;
}

long Workspace::finetune_t_max() {
  return finetune_steps(static_cast<std::size_t>(config_.data.n_train), config_.finetune);
}

std::vector<long> Workspace::timing_steps() {
  const long t_max = finetune_t_max();
  std::vector<long> out;
  for (double f : config_.timing_fractions) out.push_back(std::lround(f * static_cast<double>(t_max)));
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

ParameterSnapshot Workspace::finetuned(std::uint64_t seed, LossKind loss, bool produce) {
  const std::string tag = std::string("finetuned-") + to_string(loss);
  const fs::path path = seed_dir(seed) / (tag + ".ckpt");
  {
    std::lock_guard<std::mutex> g(lock_for(path.string()));
    if (fs::exists(path)) return snapshot_from_checkpoint(read_checkpoint(path));
    if (!produce) throw MissingInput(path, "finetune");
  }
  // Prerequisites first, outside this artifact's lock.
  const ParameterSnapshot pt = pretrained(seed, produce);
  const Splits& s = splits();
  const DebiasAux* aux = loss == LossKind::std ? nullptr : &this->aux(s.id_train, "id_train", seed, loss);

  std::lock_guard<std::mutex> g(lock_for(path.string()));
  if (fs::exists(path)) return snapshot_from_checkpoint(read_checkpoint(path));
  note(std::string("fine-tuning seed ") + std::to_string(seed) + " with " + to_string(loss));
  Encoder model(config_.model, SeedPlan::from(seed).model);
  model.restore(pt);
  FinetuneConfig fc = config_.finetune;
  fc.snapshot_steps = timing_steps();
  const FinetuneResult r = finetune(model, {&s.id_train, aux}, loss, nullptr, {&s.id_dev, &s.ood_test}, fc,
                                    SeedPlan::from(seed).finetune);
  write_text_file(seed_dir(seed) / ("finetune-" + std::string(to_string(loss)) + ".csv"), trajectory_to_csv(r.trajectory));
  for (const ParameterSnapshot& snap : r.snapshots)
    write_checkpoint(seed_dir(seed) / (tag + "-step" + std::to_string(snap.step) + ".ckpt"),
                     to_checkpoint(snap, config_.model));
  Checkpoint c = to_checkpoint(r.best, config_.model);
  c.meta["finetune.selected"] = std::to_string(r.selected);
  write_checkpoint(path, c);
  return r.best;
}

ParameterSnapshot Workspace::finetune_snapshot(std::uint64_t seed, LossKind loss, long step) {
  finetuned(seed, loss);
  const fs::path path = seed_dir(seed) / ("finetuned-" + std::string(to_string(loss)) + "-step" + std::to_string(step) + ".ckpt");
  if (!fs::exists(path)) throw MissingInput(path, "finetune");
  return snapshot_from_checkpoint(read_checkpoint(path));
}

std::vector<TrajectoryPoint> Workspace::finetune_trajectory(std::uint64_t seed, LossKind loss) {
  finetuned(seed, loss);
  return parse_trajectory_csv(read_text_file(seed_dir(seed) / ("finetune-" + std::string(to_string(loss)) + ".csv")));
}

TrajectoryPoint Workspace::full_model_point(std::uint64_t seed, LossKind loss) {
  const std::vector<TrajectoryPoint> t = finetune_trajectory(seed, loss);
  return t.at(select_checkpoint(t, SelectionRule::all_steps, t.back().step));
}

const DebiasAux& Workspace::aux(const Split& split, const std::string& split_name, std::uint64_t seed, LossKind loss) {
  static const DebiasAux empty;
  if (loss == LossKind::std) return empty;
  const std::string key = split_name + "/" + std::to_string(seed) + "/" + to_string(loss);
  {
    std::lock_guard<std::mutex> g(mu_);
    if (auto it = aux_.find(key); it != aux_.end()) return *it->second;
  }
  // The teacher needs the standard fine-tuned model of this seed.
  std::optional<ParameterSnapshot> teacher;
  if (loss == LossKind::confreg) teacher = finetuned(seed, LossKind::std);

  auto out = std::make_unique<DebiasAux>();
  {
    std::lock_guard<std::mutex> g(lock_for("bias"));
    const fs::path path = root_ / "bias" / ("bias-" + split_name + ".csv");
    if (fs::exists(path)) {
      read_bias_cache(path, split, *out);
    } else {
      const Splits& s = splits();
      if (!embeddings_)
        embeddings_ = std::make_unique<EmbeddingTable>(static_cast<std::size_t>(config_.data.vocab_size), kEmbeddingDim,
                                                       derive_seed(config_.data.seed, "bias/embeddings"));
      if (!bias_model_) {
        std::vector<int> labels;
        for (const Example& ex : s.id_train) labels.push_back(ex.label);
        bias_model_ = std::make_unique<BiasModel>(BiasModel::train(
            bias_features(s.id_train, *embeddings_, BiasFeatures::overlap), labels, config_.data.classes, config_.bias));
      }
      *out = bias_degrees(*bias_model_, split, bias_features(split, *embeddings_, BiasFeatures::overlap));
      fs::create_directories(path.parent_path());
      write_bias_cache(path, split, *out);
    }
  }
  if (teacher) {
    const fs::path path = seed_dir(seed) / ("teacher-" + split_name + ".csv");
    std::lock_guard<std::mutex> g(lock_for(path.string()));
    if (fs::exists(path)) {
      read_teacher_cache(path, split, *out);
    } else {
      Encoder model(config_.model, SeedPlan::from(seed).model);
      model.restore(*teacher);
      for (const std::vector<float>& p : predict_probs(model, split, nullptr)) out->p_t.push_back(p);
      fs::create_directories(path.parent_path());
      write_teacher_cache(path, split, *out);
    }
  }
  std::lock_guard<std::mutex> g(mu_);
  auto& slot = aux_[key];
  if (!slot) slot = std::move(out);
  return *slot;
}

// ---------------------------------------------------------------------------

void check_disjoint_ids(const Split& pool, const Split& test) {
  std::set<std::string> test_ids;
  for (const Example& ex : test) test_ids.insert(ex.id);
  for (const Example& ex : pool)
    if (test_ids.count(ex.id)) throw ContractViolation("OOD train pool shares id `" + ex.id + "` with the OOD test split");
}

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (int w = 0; w < std::min<int>(jobs, static_cast<int>(n)); ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> g(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (std::thread& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

std::vector<std::string> check_sparsity(const MaskSet& masks, double sparsity, PruneScope scope) {
  std::vector<std::string> out;
  if (scope == PruneScope::global) {
    std::size_t total = 0, pruned = 0;
    for (const MaskPair& p : masks.pairs()) {
      total += p.binary.numel();
      pruned += p.pruned();
    }
    if (pruned != pruned_count(sparsity, total))
      out.push_back("pooled sparsity " + std::to_string(pruned) + "/" + std::to_string(total) + " misses target " +
                    format_number(sparsity));
    return out;
  }
  for (const MaskPair& p : masks.pairs())
    if (p.pruned() != pruned_count(sparsity, p.binary.numel()))
      out.push_back(p.owner + " has " + std::to_string(p.pruned()) + " pruned entries, expected " +
                    std::to_string(pruned_count(sparsity, p.binary.numel())));
  return out;
}

namespace {

ExperimentRecord base_record(const std::string& study, const std::string& paradigm, const std::string& method,
                             LossKind ft_loss, LossKind prune_loss, double sparsity, std::uint64_t seed, long t_max) {
  ExperimentRecord r;
  r.study = study;
  r.paradigm = paradigm;
  r.method = method;
  r.finetune_loss = to_string(ft_loss);
  r.prune_loss = to_string(prune_loss);
  r.sparsity = sparsity;
  r.seed = seed;
  r.t_max = t_max;
  return r;
}

void finish_record(Workspace& ws, ExperimentRecord& r, const std::vector<TrajectoryPoint>& trajectory,
                   std::size_t selected, LossKind full_loss) {
  r.trajectory = trajectory;
  r.selected = selected;
  const TrajectoryPoint full = ws.full_model_point(r.seed, full_loss);
  const TrajectoryPoint& p = r.selected_point();
  r.flagged = p.ood_acc > full.ood_acc && p.id_acc < full.id_acc - ws.config().id_drop_flag;
}

void save_subnetwork(Workspace& ws, const ExperimentRecord& r, const Subnetwork& sub) {
  const fs::path dir = ws.root() / "runs" / r.study / r.name();
  fs::create_directories(dir);
  write_checkpoint(dir / "subnetwork.ckpt", subnetwork_checkpoint(sub, ws.config().model));
}

// Mask training over `start` on `train`; checks that the weights stay frozen.
Subnetwork frozen_mask_run(Workspace& ws, const ParameterSnapshot& start, const TrainData& train,
                           const PruningRunConfig& pc, std::vector<std::string>& violations) {
  const Splits& s = ws.splits();
  Encoder model(ws.config().model, 0);
  model.restore(start);
  Subnetwork sub = pc.sparsity == 0.0 ? dense_subnetwork(model, {&s.id_dev, &s.ood_test}, pc)
                                      : mask_train_run(model, train, {&s.id_dev, &s.ood_test}, pc);
  if (!model.snapshot(SnapshotTag::intermediate).same_values(start))
    violations.push_back("mask training changed the frozen weights");
  if (!sub.weights.same_values(start)) violations.push_back("subnetwork weights differ from the frozen start");
  return sub;
}

}  // namespace

ExperimentRecord run_paradigm_once(Workspace& ws, Paradigm paradigm, double sparsity, std::uint64_t seed) {
  const RunConfig& rc = ws.config();
  const Splits& s = ws.splits();
  const EvalSets sets{&s.id_dev, &s.ood_test};
  const LossKind l1 = rc.finetune_loss, l2 = rc.prune.loss;
  const PruningRunConfig pc = prune_config_for(rc, sparsity, seed, l2);
  const TrainData train{&s.id_train, &ws.aux(s.id_train, "id_train", seed, l2)};
  ExperimentRecord r = base_record("paradigm", to_string(paradigm), to_string(pc.method), l1, l2, sparsity, seed, pc.t_max);

  auto masked_search = [&](const ParameterSnapshot& start) {
    Encoder model(rc.model, 0);
    model.restore(start);
    return sparsity == 0.0 ? dense_subnetwork(model, sets, pc) : search(model, train, sets, pc);
  };

  Subnetwork sub;
  switch (paradigm) {
    case Paradigm::prune_after_ft: {
      if (pc.method == PruneMethod::imp_rw)
        throw ConfigError("prune_after_ft searches with imp or mask; imp-rw rewinds to the pre-trained weights");
      const ParameterSnapshot ft = ws.finetuned(seed, l1);
      if (pc.method == PruneMethod::mask) {
        sub = frozen_mask_run(ws, ft, train, pc, r.violations);
      } else {
        sub = masked_search(ft);
      }
      r.trajectory = sub.trajectory;
      r.selected = sub.selected;
      break;
    }
    case Paradigm::prune_then_ft: {
      if (pc.method == PruneMethod::imp)
        throw ConfigError("prune_then_ft searches with imp-rw or mask so the subnetwork starts from pre-trained weights");
      const ParameterSnapshot pt = ws.pretrained(seed);
      Subnetwork found = masked_search(pt);
      // Isolated fine-tuning of the rewound subnetwork.
      Encoder model(rc.model, 0);
      model.restore(pt);
      if (!same_at_survivors(model.snapshot(SnapshotTag::intermediate), pt, found.masks))
        r.violations.push_back("rewound subnetwork does not start from the pre-trained weights");
      MaskSet masks = found.masks.binary_copy();
      const TrainData ft_train{&s.id_train, &ws.aux(s.id_train, "id_train", seed, l1)};
      const FinetuneResult fr =
          finetune(model, ft_train, l1, &masks, sets, rc.finetune, SeedPlan::from(seed).finetune, SnapshotTag::finetuned);
      if (!masks.same_binary(found.masks)) r.violations.push_back("isolated fine-tuning changed the masks");
      sub = std::move(found);
      sub.weights = fr.best;
      r.trajectory = fr.trajectory;
      r.selected = fr.selected;
      r.t_max = fr.t_max;
      break;
    }
    case Paradigm::mask_only: {
      if (pc.method != PruneMethod::mask) throw ConfigError("mask_only learns masks; set prune.method = mask");
      sub = frozen_mask_run(ws, ws.pretrained(seed), train, pc, r.violations);
      r.trajectory = sub.trajectory;
      r.selected = sub.selected;
      break;
    }
  }
  for (std::string& v : check_sparsity(sub.masks, sparsity, pc.method == PruneMethod::mask ? PruneScope::local : pc.scope))
    r.violations.push_back(std::move(v));
  sub.provenance.paradigm = to_string(paradigm);
  finish_record(ws, r, r.trajectory, r.selected, l1);
  save_subnetwork(ws, r, sub);
  return r;
}

namespace {

// Builds every prerequisite of the given seeds, one seed per worker.
void prepare(Workspace& ws, bool need_ft, LossKind ft_loss) {
  const RunConfig& rc = ws.config();
  ws.splits();
  parallel_for(rc.seeds.size(), rc.jobs, [&](std::size_t i) {
    ws.pretrained(rc.seeds[i]);
    if (need_ft) ws.finetuned(rc.seeds[i], ft_loss);
    ws.finetuned(rc.seeds[i], rc.finetune_loss);
  });
}

template <typename Job>
std::vector<ExperimentRecord> run_jobs(Workspace& ws, const std::vector<Job>& jobs,
                                       const std::function<std::vector<ExperimentRecord>(const Job&)>& run) {
  std::vector<std::vector<ExperimentRecord>> slots(jobs.size());
  parallel_for(jobs.size(), ws.config().jobs, [&](std::size_t i) { slots[i] = run(jobs[i]); });
  std::vector<ExperimentRecord> out;
  for (auto& slot : slots)
    for (ExperimentRecord& r : slot) {
      save_record(ws.root(), r);
      out.push_back(std::move(r));
    }
  return out;
}

}  // namespace

std::vector<ExperimentRecord> run_paradigm(Workspace& ws) {
  const RunConfig& rc = ws.config();
  prepare(ws, rc.paradigm == Paradigm::prune_after_ft, rc.finetune_loss);
  std::vector<std::pair<double, std::uint64_t>> jobs;
  for (std::uint64_t seed : rc.seeds)
    for (double s : rc.sparsities) jobs.emplace_back(s, seed);
  return run_jobs<std::pair<double, std::uint64_t>>(ws, jobs, [&](const auto& job) {
    note(std::string("run ") + to_string(rc.paradigm) + " sparsity " + format_number(job.first) + " seed " +
         std::to_string(job.second));
    return std::vector<ExperimentRecord>{run_paradigm_once(ws, rc.paradigm, job.first, job.second)};
  });
}

std::vector<ExperimentRecord> run_full(Workspace& ws) {
  const RunConfig& rc = ws.config();
  prepare(ws, true, rc.finetune_loss);
  std::vector<std::uint64_t> jobs = rc.seeds;
  return run_jobs<std::uint64_t>(ws, jobs, [&](const std::uint64_t& seed) {
    ExperimentRecord r = base_record("full", "full", "none", rc.finetune_loss, rc.finetune_loss, 0.0, seed,
                                     ws.finetune_t_max());
    const std::vector<TrajectoryPoint> t = ws.finetune_trajectory(seed, rc.finetune_loss);
    finish_record(ws, r, t, select_checkpoint(t, SelectionRule::all_steps, t.back().step), rc.finetune_loss);
    return std::vector<ExperimentRecord>{r};
  });
}

std::vector<ExperimentRecord> run_ood_oracle(Workspace& ws) {
  const RunConfig& rc = ws.config();
  prepare(ws, true, rc.finetune_loss);
  const Split& mix = ws.oracle_train();
  for (std::uint64_t seed : rc.seeds) ws.aux(mix, "oracle_train", seed, rc.oracle_loss);
  std::vector<std::pair<double, std::uint64_t>> jobs;
  for (std::uint64_t seed : rc.seeds)
    for (double s : rc.sparsities) jobs.emplace_back(s, seed);
  return run_jobs<std::pair<double, std::uint64_t>>(ws, jobs, [&](const auto& job) {
    const auto [sparsity, seed] = job;
    note("oracle sparsity " + format_number(sparsity) + " seed " + std::to_string(seed));
    const Splits& s = ws.splits();
    const EvalSets sets{&s.id_dev, &s.ood_test};
    PruningRunConfig pc = prune_config_for(rc, sparsity, seed, rc.oracle_loss);
    pc.method = PruneMethod::mask;
    const TrainData train{&mix, &ws.aux(mix, "oracle_train", seed, rc.oracle_loss)};
    std::vector<ExperimentRecord> out;
    auto make = [&](const char* arm, Paradigm paradigm) {
      ExperimentRecord r = base_record("oracle", to_string(paradigm), "mask", rc.finetune_loss, rc.oracle_loss,
                                       sparsity, seed, pc.t_max);
      r.arm = arm;
      return r;
    };

    auto wanted = [&](const char* arm) {
      return std::find(rc.oracle_arms.begin(), rc.oracle_arms.end(), arm) != rc.oracle_arms.end();
    };
    auto add_violations = [&](ExperimentRecord& r, const MaskSet& masks) {
      for (std::string& v : check_sparsity(masks, sparsity, PruneScope::local)) r.violations.push_back(std::move(v));
    };

    if (wanted("ft-subnet")) {
      ExperimentRecord ft = make("ft-subnet", Paradigm::prune_after_ft);
      Subnetwork ft_sub = frozen_mask_run(ws, ws.finetuned(seed, rc.finetune_loss), train, pc, ft.violations);
      add_violations(ft, ft_sub.masks);
      finish_record(ws, ft, ft_sub.trajectory, ft_sub.selected, rc.finetune_loss);
      save_subnetwork(ws, ft, ft_sub);
      out.push_back(std::move(ft));
    }
    if (!wanted("pt-subnet") && !wanted("pt-subnet-ft")) return out;

    const ParameterSnapshot pt = ws.pretrained(seed);
    ExperimentRecord ptr = make("pt-subnet", Paradigm::mask_only);
    Subnetwork pt_sub = frozen_mask_run(ws, pt, train, pc, ptr.violations);
    add_violations(ptr, pt_sub.masks);
    finish_record(ws, ptr, pt_sub.trajectory, pt_sub.selected, rc.finetune_loss);
    save_subnetwork(ws, ptr, pt_sub);
    if (wanted("pt-subnet")) out.push_back(std::move(ptr));

    if (wanted("pt-subnet-ft")) {
      ExperimentRecord ptft = make("pt-subnet-ft", Paradigm::prune_then_ft);
      Encoder model(rc.model, 0);
      model.restore(pt);
      MaskSet masks = pt_sub.masks.binary_copy();
      const FinetuneResult fr = finetune(model, train, rc.oracle_loss, &masks, sets, rc.finetune,
                                         SeedPlan::from(seed).finetune, SnapshotTag::finetuned);
      if (!masks.same_binary(pt_sub.masks)) ptft.violations.push_back("isolated fine-tuning changed the masks");
      add_violations(ptft, pt_sub.masks);
      ptft.t_max = fr.t_max;
      finish_record(ws, ptft, fr.trajectory, fr.selected, rc.finetune_loss);
      Subnetwork ptft_sub = pt_sub;
      ptft_sub.weights = fr.best;
      save_subnetwork(ws, ptft, ptft_sub);
      out.push_back(std::move(ptft));
    }
    return out;
  });
}

std::vector<ExperimentRecord> run_timing_study(Workspace& ws) {
  const RunConfig& rc = ws.config();
  prepare(ws, true, rc.finetune_loss);
  const std::vector<long> steps = ws.timing_steps();
  const long t_max = ws.finetune_t_max();
  std::vector<std::tuple<long, double, std::uint64_t>> jobs;
  for (std::uint64_t seed : rc.seeds)
    for (double s : rc.sparsities)
      for (long step : steps) jobs.emplace_back(step, s, seed);
  return run_jobs<std::tuple<long, double, std::uint64_t>>(ws, jobs, [&](const auto& job) {
    const auto [step, sparsity, seed] = job;
    note("timing start " + std::to_string(step) + " sparsity " + format_number(sparsity) + " seed " + std::to_string(seed));
    const Splits& s = ws.splits();
    const PruningRunConfig pc = prune_config_for(rc, sparsity, seed, rc.prune.loss);
    const TrainData train{&s.id_train, &ws.aux(s.id_train, "id_train", seed, rc.prune.loss)};
    // The end of fine-tuning is the selected fine-tuned model, so that curve
    // coincides with a prune_after_ft run.
    const ParameterSnapshot start =
        step == t_max ? ws.finetuned(seed, rc.finetune_loss) : ws.finetune_snapshot(seed, rc.finetune_loss, step);
    ExperimentRecord r = base_record("timing", step == 0 ? "mask_only" : "prune_after_ft", "mask", rc.finetune_loss,
                                     rc.prune.loss, sparsity, seed, pc.t_max);
    char arm[32];
    std::snprintf(arm, sizeof arm, "start%06ld", step);
    r.arm = arm;
    PruningRunConfig mask_pc = pc;
    mask_pc.method = PruneMethod::mask;
    Subnetwork sub = frozen_mask_run(ws, start, train, mask_pc, r.violations);
    for (std::string& v : check_sparsity(sub.masks, sparsity, PruneScope::local)) r.violations.push_back(std::move(v));
    finish_record(ws, r, sub.trajectory, sub.selected, rc.finetune_loss);
    save_subnetwork(ws, r, sub);
    return std::vector<ExperimentRecord>{r};
  });
}

std::vector<ExperimentRecord> run_gradual_vs_fixed(Workspace& ws) {
  const RunConfig& rc = ws.config();
  prepare(ws, true, rc.finetune_loss);
  std::vector<long> budgets = rc.gradual_budgets;
  if (budgets.empty()) budgets.push_back(rc.prune.t_max);
  const char* arms[] = {"fixed-hard", "fixed-soft", "gradual"};
  std::vector<std::tuple<int, long, std::uint64_t>> jobs;
  for (std::uint64_t seed : rc.seeds)
    for (long budget : budgets)
      for (int arm = 0; arm < 3; ++arm) jobs.emplace_back(arm, budget, seed);
  return run_jobs<std::tuple<int, long, std::uint64_t>>(ws, jobs, [&](const auto& job) {
    const auto [arm, budget, seed] = job;
    note(std::string("gradual arm ") + arms[arm] + " budget " + std::to_string(budget) + " seed " + std::to_string(seed));
    const Splits& s = ws.splits();
    RunConfig arm_rc = rc;
    arm_rc.prune.t_max = budget;
    arm_rc.prune.method = PruneMethod::mask;
    arm_rc.prune.rule = rc.gradual_rule;
    arm_rc.prune.mask.init = arm == 0 ? MaskInit::hard : MaskInit::soft;
    arm_rc.prune.mask.schedule.kind = arm == 2 ? ScheduleKind::cubic : ScheduleKind::fixed;
    arm_rc.prune.mask.schedule.s_start = rc.gradual_start;
    const PruningRunConfig pc = prune_config_for(arm_rc, rc.gradual_target, seed, rc.prune.loss);
    const TrainData train{&s.id_train, &ws.aux(s.id_train, "id_train", seed, rc.prune.loss)};
    ExperimentRecord r = base_record("gradual", "prune_after_ft", "mask", rc.finetune_loss, rc.prune.loss,
                                     rc.gradual_target, seed, budget);
    r.arm = arm == 2 ? "gradual-" + format_number(rc.gradual_start) + "-" + format_number(rc.gradual_target) : arms[arm];
    Subnetwork sub = frozen_mask_run(ws, ws.finetuned(seed, rc.finetune_loss), train, pc, r.violations);
    for (std::string& v : check_sparsity(sub.masks, rc.gradual_target, PruneScope::local))
      r.violations.push_back(std::move(v));
    if (std::fabs(sub.trajectory.at(sub.selected).sparsity - sparsity_of(sub.masks)) > 1e-12)
      r.violations.push_back("selected checkpoint is not at the target sparsity");
    finish_record(ws, r, sub.trajectory, sub.selected, rc.finetune_loss);
    save_subnetwork(ws, r, sub);
    return std::vector<ExperimentRecord>{r};
  });
}

long plateau_step(std::span<const TrajectoryPoint> trajectory, int patience) {
  if (trajectory.empty()) throw std::invalid_argument("plateau_step: empty trajectory");
  double best = trajectory[0].id_acc;
  std::size_t best_i = 0;
  for (std::size_t i = 1; i < trajectory.size(); ++i) {
    if (trajectory[i].id_acc > best) {
      best = trajectory[i].id_acc;
      best_i = i;
    } else if (i - best_i >= static_cast<std::size_t>(patience)) {
      return trajectory[best_i].step;
    }
  }
  return trajectory.back().step;
}

// ---------------------------------------------------------------------------

void save_record(const fs::path& root, const ExperimentRecord& record) {
  const fs::path dir = root / "runs" / record.study / record.name();
  fs::create_directories(dir);
  write_text_file(dir / "trajectory.csv", trajectory_csv(record.trajectory));
  write_key_values(dir / "record.kv", record.to_key_values());
}

std::vector<ExperimentRecord> load_records(const fs::path& root) {
  std::vector<fs::path> files;
  if (fs::exists(root / "runs"))
    for (const auto& e : fs::recursive_directory_iterator(root / "runs"))
      if (e.is_regular_file() && e.path().filename() == "record.kv") files.push_back(e.path());
  if (files.empty()) throw MissingInput(root / "runs", "run-paradigm");
  std::sort(files.begin(), files.end());
  std::vector<ExperimentRecord> out;
  for (const fs::path& f : files) {
    ExperimentRecord r = ExperimentRecord::from_key_values(read_key_values(f));
    r.trajectory = parse_trajectory_csv(read_text_file(f.parent_path() / "trajectory.csv"));
    if (r.selected >= r.trajectory.size()) throw FormatError(f.string() + ": selected index out of range");
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<AggregateRow> aggregate(const std::vector<ExperimentRecord>& records) {
  using Key = std::tuple<std::string, std::string, std::string, std::string, std::string, std::string, double, long>;
  std::map<Key, std::vector<const ExperimentRecord*>> groups;
  for (const ExperimentRecord& r : records)
    groups[{r.study, r.paradigm, r.method, r.finetune_loss, r.prune_loss, r.arm, r.sparsity, r.t_max}].push_back(&r);
  std::vector<AggregateRow> rows;
  for (auto& [key, members] : groups) {
    std::sort(members.begin(), members.end(),
              [](const ExperimentRecord* a, const ExperimentRecord* b) { return a->name() < b->name(); });
    AggregateRow row;
    std::tie(row.study, row.paradigm, row.method, row.finetune_loss, row.prune_loss, row.arm, row.sparsity, row.t_max) = key;
    std::vector<double> id_acc, id_f1, ood_acc, ood_f1;
    for (const ExperimentRecord* r : members) {
      const TrajectoryPoint& p = r->selected_point();
      id_acc.push_back(p.id_acc);
      id_f1.push_back(p.id_f1);
      ood_acc.push_back(p.ood_acc);
      ood_f1.push_back(p.ood_f1);
      row.flagged += r->flagged;
      row.violations += r->violations.size();
    }
    row.id_acc = mean_std(id_acc);
    row.id_f1 = mean_std(id_f1);
    row.ood_acc = mean_std(ood_acc);
    row.ood_f1 = mean_std(ood_f1);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string aggregate_csv(const std::vector<AggregateRow>& rows) {
  std::ostringstream out;
  out << "study,paradigm,method,finetune_loss,prune_loss,arm,sparsity,t_max,seeds,id_acc_mean,id_acc_std,id_f1_mean,"
         "id_f1_std,ood_acc_mean,ood_acc_std,ood_f1_mean,ood_f1_std,flagged,violations\n";
  for (const AggregateRow& r : rows) {
    out << r.study << ',' << r.paradigm << ',' << r.method << ',' << r.finetune_loss << ',' << r.prune_loss << ','
        << r.arm << ',' << format_number(r.sparsity) << ',' << r.t_max << ',' << r.id_acc.n;
    for (const MeanStd* m : {&r.id_acc, &r.id_f1, &r.ood_acc, &r.ood_f1})
      out << ',' << format_number(m->mean) << ',' << format_number(m->std);
    out << ',' << r.flagged << ',' << r.violations << '\n';
  }
  return out.str();
}

namespace {

std::string series_label(const AggregateRow& r) {
  std::string s = r.paradigm + "/" + r.method + "/" + r.prune_loss;
  if (!r.arm.empty()) s += "/" + r.arm;
  return s;
}

// x = sparsity, one column per series, mean of `metric` per cell.
std::string plot_csv(const std::vector<AggregateRow>& rows, double MeanStd::*field, const MeanStd AggregateRow::*metric) {
  std::set<double> xs;
  std::set<std::string> labels;
  std::map<std::pair<std::string, double>, double> cell;
  for (const AggregateRow& r : rows) {
    xs.insert(r.sparsity);
    labels.insert(series_label(r));
    cell[{series_label(r), r.sparsity}] = (r.*metric).*field;
  }
  std::ostringstream out;
  out << "sparsity";
  for (const std::string& l : labels) out << ',' << l;
  out << '\n';
  for (double x : xs) {
    out << format_number(x);
    for (const std::string& l : labels) {
      out << ',';
      if (auto it = cell.find({l, x}); it != cell.end()) out << format_number(it->second);
    }
    out << '\n';
  }
  return out.str();
}

// Mean ID/OOD accuracy per evaluation step, one column pair per start step.
std::string timing_curves_csv(const std::vector<ExperimentRecord>& records) {
  std::map<std::string, std::map<long, std::pair<std::vector<double>, std::vector<double>>>> series;
  std::set<long> steps;
  for (const ExperimentRecord& r : records) {
    const std::string label = r.arm + "/s" + format_number(r.sparsity);
    for (const TrajectoryPoint& p : r.trajectory) {
      series[label][p.step].first.push_back(p.id_acc);
      series[label][p.step].second.push_back(p.ood_acc);
      steps.insert(p.step);
    }
  }
  std::ostringstream out;
  out << "step";
  for (const auto& [label, _] : series) out << ',' << label << "/id_acc," << label << "/ood_acc";
  out << '\n';
  for (long step : steps) {
    out << step;
    for (const auto& [label, by_step] : series) {
      if (auto it = by_step.find(step); it != by_step.end())
        out << ',' << format_number(mean_std(it->second.first).mean) << ',' << format_number(mean_std(it->second.second).mean);
      else
        out << ",,";
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace

void write_reports(const fs::path& root, const std::vector<ExperimentRecord>& records) {
  std::map<std::string, std::vector<ExperimentRecord>> by_study;
  for (const ExperimentRecord& r : records) by_study[r.study].push_back(r);
  fs::create_directories(root / "plots");
  for (const auto& [study, recs] : by_study) {
    const std::vector<AggregateRow> rows = aggregate(recs);
    write_text_file(root / (study + "_aggregate.csv"), aggregate_csv(rows));
    write_text_file(root / "plots" / (study + "_id_acc.csv"), plot_csv(rows, &MeanStd::mean, &AggregateRow::id_acc));
    write_text_file(root / "plots" / (study + "_ood_acc.csv"), plot_csv(rows, &MeanStd::mean, &AggregateRow::ood_acc));
    write_text_file(root / "plots" / (study + "_ood_f1.csv"), plot_csv(rows, &MeanStd::mean, &AggregateRow::ood_f1));
    if (study == "timing") write_text_file(root / "plots" / "timing_curves.csv", timing_curves_csv(recs));
    if (study == "gradual") {
      std::ostringstream out;
      out << "arm,t_max,id_acc,ood_acc\n";
      std::map<long, std::map<std::string, double>> id_by_budget;
      for (const AggregateRow& r : rows) {
        out << r.arm << ',' << r.t_max << ',' << format_number(r.id_acc.mean) << "+-" << format_number(r.id_acc.std)
            << ',' << format_number(r.ood_acc.mean) << "+-" << format_number(r.ood_acc.std) << '\n';
        id_by_budget[r.t_max][r.arm.rfind("gradual", 0) == 0 ? "gradual" : r.arm] = r.id_acc.mean;
      }
      for (const auto& [budget, arms] : id_by_budget) {
        if (!arms.count("gradual") || !arms.count("fixed-hard")) continue;
        const bool ok = arms.at("gradual") >= arms.at("fixed-hard");
        out << "# t_max " << budget << ": gradual ID >= fixed-hard ID: " << (ok ? "yes" : "NO (flagged)") << '\n';
      }
      write_text_file(root / "gradual_table.csv", out.str());
    }
  }
}

void write_manifest(const fs::path& root, const std::string& command, const RunConfig& config) {
  fs::create_directories(root);
  KeyValues kv = config.to_key_values();
  kv["manifest.command"] = command;
  for (std::uint64_t seed : config.seeds) {
    const SeedPlan p = SeedPlan::from(seed);
    const std::string k = "manifest.seed." + std::to_string(seed) + ".";
    kv[k + "model"] = std::to_string(p.model);
    kv[k + "pretrain"] = std::to_string(p.pretrain);
    kv[k + "finetune"] = std::to_string(p.finetune);
    kv[k + "search"] = std::to_string(p.search);
  }
  write_key_values(root / ("manifest-" + command + ".kv"), kv,
                   "re-run with: srnet " + command + " --config <this file> (manifest.* keys are ignored)");
}

}  // namespace srnet
