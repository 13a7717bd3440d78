// Runs every acceptance criterion at its stated tolerance and time budget and
// prints one PASS/FAIL line per criterion.
//
//   acceptance --cli <path to srnet> [--out DIR] [--only 1,4,...] [--allow-fail 4] [--keep]
//
// A criterion named in --allow-fail still prints FAIL and is counted, but does
// not make the exit code nonzero. The lines are also written to DIR/acceptance.txt.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "oracles.hpp"
#include "srnet/harness.hpp"

using namespace srnet;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + std::string("failed: ") + what;
    }
  }
  void note(const std::string& what) { detail += (detail.empty() ? "" : "; ") + what; }
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

double mean_of(const std::vector<double>& v) { return mean_std(v).mean; }

ModelConfig tiny_model() {
  ModelConfig c;
  c.layers = 1;
  c.d_model = 16;
  c.d_ffn = 32;
  c.heads = 2;
  return c;
}

// ---------------------------------------------------------------------------

Outcome mechanics() {
  Outcome o;
  const Tensor real({6}, {0.0f, 0.0099f, 0.01f, 0.0101f, -1.0f, 1.0f});
  o.require(binarize(real, 0.01f).same_values(Tensor({6}, {0, 0, 1, 1, 0, 1})), "binarization truth table");

  Rng rng(101);
  int threshold_trials = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t rows = 1 + uniform_index(rng, 16), cols = 1 + uniform_index(rng, 16);
    Tensor r = testing::random_tensor({rows, cols}, rng);
    for (std::size_t i = 0; i + 1 < r.numel(); i += 4) r[i + 1] = r[i];
    MaskPair p{"w", r, Tensor({rows, cols}), 0.5f};
    const double s = uniform01(rng) * 0.95;
    recompute_threshold(p, s);
    const auto floor_count = static_cast<std::size_t>(std::floor(s * static_cast<double>(r.numel()) + 1e-9));
    std::size_t zeros = 0;
    for (float v : p.binary.data()) zeros += v == 0.0f;
    if (zeros != floor_count || !binarize(p.real, p.threshold).same_values(p.binary)) break;
    ++threshold_trials;
  }
  o.require(threshold_trials == 200, "exact per-matrix sparsity after threshold recompute");

  // Straight-through step against a reference that treats binarization as
  // the identity in backward: dL/dm_ij = W_ij * sum_r x_ri * 2 * out_rj.
  double ste_err = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    Tensor w = testing::random_tensor({5, 4}, rng), x = testing::random_tensor({3, 5}, rng);
    MaskSet masks;
    masks.add({"w", init_soft(w), Tensor({5, 4}), 0.0f});
    recompute_threshold(masks.at("w"), 0.3);
    const Tensor before = masks.at("w").real.detached();
    Tape tape;
    Var out = ops::matmul(tape.constant(x), ops::mul(tape.constant(w), tape.watch(masks.at("w").binary)));
    tape.backward(ops::sum(ops::mul(out, out)));
    const float lr = 0.05f;
    std::vector<double> ref(20);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        double g = 0.0;
        for (std::size_t r = 0; r < 3; ++r) {
          double o_rj = 0.0;
          for (std::size_t k = 0; k < 5; ++k) o_rj += x.at(r, k) * w.at(k, j) * masks.at("w").binary.at(k, j);
          g += x.at(r, i) * 2.0 * o_rj;
        }
        ref[i * 4 + j] = before[i * 4 + j] - lr * g * w.at(i, j);
      }
    ste_step(masks, lr);
    for (std::size_t i = 0; i < 20; ++i) ste_err = std::max(ste_err, std::fabs(masks.at("w").real[i] - ref[i]));
  }
  o.require(ste_err < 1e-6, "straight-through update (max error " + fmt(ste_err) + ")");

  {
    DatasetSpec spec;
    spec.n_train = 128;
    spec.n_dev = spec.n_ood = spec.n_ood_train = 32;
    const Splits sp = generate(spec);
    Encoder model(tiny_model(), 3);
    const ParameterSnapshot theta0 = model.snapshot(SnapshotTag::pretrained);
    PruningRunConfig c;
    c.method = PruneMethod::imp_rw;
    c.t_max = 40;
    c.prune_interval = 4;
    c.eval_interval = 4;
    c.batch = 16;
    c.sparsity = 0.5;
    c.record_events = true;
    const Subnetwork sub = imp_run(model, {&sp.id_train, nullptr}, {&sp.id_dev, &sp.ood_test}, c);
    bool nested = sub.events.size() == 5;
    for (std::size_t e = 1; e < sub.events.size(); ++e)
      for (const MaskPair& p : sub.events[e].pairs()) {
        const Tensor& prev = sub.events[e - 1].at(p.owner).binary;
        for (std::size_t i = 0; i < p.binary.numel(); ++i) nested &= !(p.binary[i] == 1.0f && prev[i] == 0.0f);
      }
    o.require(nested, "IMP masks nested across pruning events");
    o.require(sub.weights.same_values(theta0) && model.snapshot(SnapshotTag::intermediate).same_values(theta0),
              "imp-rw rewinds bit-exactly");
  }

  double poe_err = 0.0, rw_err = 0.0, s_err = 0.0;
  for (int i = 0; i < 500; ++i) {
    const std::size_t k = 2 + uniform_index(rng, 3);
    const std::vector<double> p = oracles::random_simplex(k, rng), uniform(k, 1.0 / static_cast<double>(k));
    const int y = static_cast<int>(uniform_index(rng, k));
    poe_err = std::max(poe_err, std::fabs(loss_poe(p, uniform, y) - loss_std(p, y)));
    const double b = uniform01(rng);
    rw_err = std::max(rw_err, std::fabs(loss_reweight(p, y, b) - (1.0 - b) * loss_std(p, y)));
    double total = 0.0;
    bool nonneg = true;
    for (double v : confreg_scale(p, uniform01(rng))) {
      total += v;
      nonneg &= v >= 0.0;
    }
    s_err = std::max(s_err, nonneg ? std::fabs(total - 1.0) : 1.0);
  }
  o.require(poe_err < 1e-6, "PoE with a uniform expert equals CE (" + fmt(poe_err) + ")");
  o.require(rw_err < 1e-6, "reweighting linear in 1 - beta (" + fmt(rw_err) + ")");
  o.require(s_err < 1e-6, "teacher smoothing normalized (" + fmt(s_err) + ")");
  o.note(std::to_string(threshold_trials) + " exact threshold recomputes; max errors STE " + fmt(ste_err) + ", PoE " +
         fmt(poe_err) + ", reweight " + fmt(rw_err) + ", smoothing " + fmt(s_err));
  return o;
}

Outcome gradients() {
  Outcome o;
  double worst = 0.0;
  std::string worst_name;
  int checked = 0;
  for (const oracles::OpCase& c : oracles::primitive_cases()) {
    const double e = oracles::worst_gradient_error(c, 20);
    ++checked;
    if (e >= worst) worst = e, worst_name = c.name;
    o.require(e < 1e-3, c.name + " relative error " + fmt(e));
  }
  for (LossKind kind : {LossKind::std, LossKind::poe, LossKind::reweight, LossKind::confreg}) {
    const double e = oracles::worst_loss_gradient_error(kind, 20);
    ++checked;
    if (e >= worst) worst = e, worst_name = std::string("loss ") + to_string(kind);
    o.require(e < 1e-3, std::string("loss ") + to_string(kind) + " relative error " + fmt(e));
  }
  o.note(std::to_string(checked) + " checks x 20 instances, worst " + worst_name + " " + fmt(worst));
  return o;
}

Outcome bias_ceiling() {
  Outcome o;
  std::vector<double> ids, oods;
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    DatasetSpec spec;
    spec.seed = seed;
    spec.rho = 0.9;
    const Splits s = generate(spec);
    const EmbeddingTable emb(static_cast<std::size_t>(spec.vocab_size), 16, derive_seed(seed, "bias/embeddings"));
    std::vector<int> labels;
    for (const Example& ex : s.id_train) labels.push_back(ex.label);
    const BiasModel bias =
        BiasModel::train(bias_features(s.id_train, emb, BiasFeatures::overlap), labels, spec.classes, BiasTrainConfig{});
    // Accuracy by argmax of the bias model's probabilities.
    auto accuracy = [&](const Split& split) {
      const std::vector<std::vector<double>> x = bias_features(split, emb, BiasFeatures::overlap);
      std::size_t correct = 0;
      for (std::size_t i = 0; i < split.size(); ++i) {
        const std::vector<double> p = bias.probs(x[i]);
        correct += static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()) == split[i].label;
      }
      return static_cast<double>(correct) / static_cast<double>(split.size());
    };
    const double id = accuracy(s.id_dev), ood = accuracy(s.ood_test);
    ids.push_back(id);
    oods.push_back(ood);
    o.require(std::fabs(id - 0.90) <= 0.03, "seed " + std::to_string(seed) + " ID " + fmt(id));
    o.require(std::fabs(ood - 0.50) <= 0.04, "seed " + std::to_string(seed) + " OOD " + fmt(ood));
  }
  o.note("ID " + fmt(mean_of(ids)) + " (each seed within 0.90 +- 0.03), OOD " + fmt(mean_of(oods)) +
         " (each within 0.50 +- 0.04)");
  return o;
}

// Default configuration of the desk-scale studies.
RunConfig study_config() {
  RunConfig c;
  c.seeds = {1, 2, 3, 4};
  c.prune.method = PruneMethod::mask;
  return c;
}

struct Means {
  double id_acc = 0, id_f1 = 0, ood_acc = 0;
};

Means means(const std::vector<ExperimentRecord>& recs) {
  std::vector<double> id, f1, ood;
  for (const ExperimentRecord& r : recs) {
    id.push_back(r.selected_point().id_acc);
    f1.push_back(r.selected_point().id_f1);
    ood.push_back(r.selected_point().ood_acc);
  }
  return {mean_of(id), mean_of(f1), mean_of(ood)};
}

std::vector<ExperimentRecord> all_records;

Outcome srnet_existence(const fs::path& root) {
  Outcome o;
  RunConfig c = study_config();
  c.paradigm = Paradigm::prune_after_ft;
  c.prune.loss = LossKind::poe;
  c.sparsities = {0.5};
  Workspace ws(c, root);
  const std::vector<ExperimentRecord> full = run_full(ws), sub = run_paradigm(ws);
  for (const auto* v : {&full, &sub}) all_records.insert(all_records.end(), v->begin(), v->end());
  write_reports(root, load_records(root));
  const Means f = means(full), m = means(sub);
  for (std::size_t i = 0; i < sub.size(); ++i)
    o.note("seed " + std::to_string(sub[i].seed) + " full " + fmt(full[i].selected_point().id_acc) + "/" +
           fmt(full[i].selected_point().ood_acc) + " -> mask " + fmt(sub[i].selected_point().id_acc) + "/" +
           fmt(sub[i].selected_point().ood_acc));
  o.note("mean full ID " + fmt(f.id_acc) + " OOD " + fmt(f.ood_acc) + "; PoE mask ID " + fmt(m.id_acc) + " OOD " +
         fmt(m.ood_acc));
  o.require(m.ood_acc >= f.ood_acc + 0.05, "OOD gain " + fmt(100 * (m.ood_acc - f.ood_acc), 3) + " points < 5");
  o.require(m.id_acc >= 0.95 * f.id_acc, "ID ratio " + fmt(m.id_acc / f.id_acc) + " < 0.95");
  return o;
}

Outcome ood_oracle(const fs::path& root) {
  Outcome o;
  RunConfig c = study_config();
  c.sparsities = {0.5};
  c.oracle_arms = {"ft-subnet"};
  Workspace ws(c, root);
  const Splits& s = ws.splits();
  // Leak guard: the real pools are disjoint, and an injected leak is caught.
  bool guard_ok = true;
  try {
    ws.oracle_train();
  } catch (const ContractViolation&) {
    guard_ok = false;
  }
  Split leaked = s.ood_train;
  leaked.push_back(s.ood_test[s.ood_test.size() / 2]);
  bool caught = false;
  try {
    check_disjoint_ids(leaked, s.ood_test);
  } catch (const ContractViolation&) {
    caught = true;
  }
  std::set<std::string> test_ids;
  for (const Example& ex : s.ood_test) test_ids.insert(ex.id);
  std::size_t shared = 0;
  for (const Example& ex : ws.oracle_train()) shared += test_ids.count(ex.id);
  o.require(guard_ok && caught && shared == 0, "leak guard");
  o.note("leak guard: 0 shared ids across " + std::to_string(ws.oracle_train().size()) +
         " training examples, injected leak caught");

  const std::vector<ExperimentRecord> recs = run_ood_oracle(ws);
  all_records.insert(all_records.end(), recs.begin(), recs.end());
  write_reports(root, load_records(root));
  const Means m = means(recs);
  o.note("ft-subnet mask on ID+OOD at 50%: ID " + fmt(m.id_acc) + " OOD " + fmt(m.ood_acc));
  o.require(m.ood_acc >= 0.95, "OOD " + fmt(m.ood_acc) + " < 0.95");
  return o;
}

// Every paradigm/method pair over the sparsity grid and 4 seeds on a scaled
// model, plus an independent re-check of the saved subnetworks.
Outcome contracts(const fs::path& root) {
  Outcome o;
  RunConfig base = RunConfig::from_key_values({{"data.n_train", "1000"},
                                               {"data.n_dev", "200"},
                                               {"data.n_ood", "200"},
                                               {"data.n_ood_train", "200"},
                                               {"model.layers", "1"},
                                               {"model.d_model", "32"},
                                               {"model.d_ffn", "64"},
                                               {"model.heads", "2"},
                                               {"pretrain.steps", "100"},
                                               {"finetune.eval_interval", "20"},
                                               {"prune.t_max", "100"},
                                               {"prune.eval_interval", "10"},
                                               {"mask.threshold_interval", "10"},
                                               {"run.seeds", "1,2,3,4"},
                                               {"run.sparsities", "0.2,0.5,0.7,0.9"}});
  const std::vector<std::pair<Paradigm, PruneMethod>> arms = {{Paradigm::prune_after_ft, PruneMethod::imp},
                                                              {Paradigm::prune_after_ft, PruneMethod::mask},
                                                              {Paradigm::prune_then_ft, PruneMethod::imp_rw},
                                                              {Paradigm::prune_then_ft, PruneMethod::mask},
                                                              {Paradigm::mask_only, PruneMethod::mask}};
  std::map<std::uint64_t, std::string> pt_before;
  std::size_t runs = 0, violations = 0, rechecked = 0, recheck_failures = 0;
  for (const auto& [paradigm, method] : arms) {
    RunConfig c = base;
    c.paradigm = paradigm;
    c.prune.method = method;
    Workspace ws(c, root);
    for (std::uint64_t seed : c.seeds) {
      ws.pretrained(seed);
      if (!pt_before.count(seed)) pt_before[seed] = read_text_file(ws.seed_dir(seed) / "pretrained.ckpt");
    }
    for (const ExperimentRecord& r : run_paradigm(ws)) {
      ++runs;
      violations += r.violations.size();
      for (const std::string& v : r.violations) o.note(r.name() + ": " + v);
      const Subnetwork sub =
          subnetwork_from_checkpoint(read_checkpoint(root / "runs" / "paradigm" / r.name() / "subnetwork.ckpt"));
      const ParameterSnapshot pt = ws.pretrained(r.seed, false), ft = ws.finetuned(r.seed, c.finetune_loss, false);
      bool ok = true;
      for (const MaskPair& p : sub.masks.pairs())
        ok &= p.pruned() == static_cast<std::size_t>(std::floor(r.sparsity * static_cast<double>(p.binary.numel()) + 1e-9));
      if (paradigm == Paradigm::mask_only) ok &= sub.weights.same_values(pt);
      if (paradigm == Paradigm::prune_after_ft && method == PruneMethod::mask) ok &= sub.weights.same_values(ft);
      ++rechecked;
      recheck_failures += !ok;
    }
  }
  for (const auto& [seed, bytes] : pt_before)
    o.require(read_text_file(root / ("seed-" + std::to_string(seed)) / "pretrained.ckpt") == bytes,
              "theta_pt checkpoint of seed " + std::to_string(seed) + " changed");
  std::size_t study_violations = 0;
  for (const ExperimentRecord& r : all_records) study_violations += r.violations.size();
  o.note(std::to_string(runs) + " sweep runs, " + std::to_string(violations) + " violations; " +
         std::to_string(rechecked) + " subnetworks re-checked, " + std::to_string(recheck_failures) + " failures; " +
         std::to_string(all_records.size()) + " desk-scale study records, " + std::to_string(study_violations) +
         " violations");
  o.require(violations == 0 && recheck_failures == 0 && study_violations == 0, "contract violations present");
  o.require(runs == arms.size() * 16, "sweep incomplete");
  return o;
}

Outcome gradual(const fs::path& root) {
  Outcome o;
  RunConfig c = study_config();
  Workspace ws(c, root);
  const std::vector<ExperimentRecord> recs = run_gradual_vs_fixed(ws);
  all_records.insert(all_records.end(), recs.begin(), recs.end());
  write_reports(root, load_records(root));
  std::map<std::string, std::vector<ExperimentRecord>> by_arm;
  for (const ExperimentRecord& r : recs) by_arm[r.arm.rfind("gradual", 0) == 0 ? "gradual" : r.arm].push_back(r);
  for (const auto& [arm, rs] : by_arm) {
    const Means m = means(rs);
    o.note(arm + " ID " + fmt(m.id_acc) + " OOD " + fmt(m.ood_acc));
  }
  o.require(fs::exists(root / "gradual_table.csv"), "gradual table not written");
  o.require(means(by_arm["gradual"]).id_acc >= means(by_arm["fixed-hard"]).id_acc, "gradual ID below fixed-hard ID");
  return o;
}

Outcome metric_oracle() {
  Outcome o;
  Rng rng(31337);
  int exact = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<int> pred, gold;
    int classes = 0;
    oracles::random_predictions(rng, pred, gold, classes);
    exact += compute_metrics(pred, gold, classes).weighted_f1 == oracles::brute_weighted_f1(pred, gold, classes);
  }
  o.note(std::to_string(exact) + "/100 bit-exact");
  o.require(exact == 100, "weighted F1 mismatch");
  return o;
}

int run_cli(const std::string& cli, const std::string& args, const fs::path& log) {
  const std::string cmd = "\"" + cli + "\" " + args + " >> \"" + log.string() + "\" 2>&1";
  return std::system(cmd.c_str());
}

Outcome determinism(const std::string& cli, const fs::path& root) {
  Outcome o;
  if (cli.empty()) {
    o.require(false, "no --cli given");
    return o;
  }
  fs::create_directories(root);
  const fs::path config = root / "tiny.kv";
  write_key_values(config, {{"data.n_train", "256"},
                            {"data.n_dev", "64"},
                            {"data.n_ood", "64"},
                            {"data.n_ood_train", "64"},
                            {"model.layers", "1"},
                            {"model.d_model", "16"},
                            {"model.d_ffn", "32"},
                            {"model.heads", "2"},
                            {"pretrain.steps", "20"},
                            {"finetune.eval_interval", "8"},
                            {"prune.t_max", "40"},
                            {"prune.eval_interval", "4"},
                            {"mask.threshold_interval", "4"},
                            {"run.seeds", "1,2"},
                            {"run.sparsities", "0,0.5"}});
  const std::vector<std::string> commands = {
      "gen-data",
      "pretrain",
      "finetune",
      "search --sparsity 0.7 --seed 2 --prune.loss poe",
      "run-paradigm --prune.method imp",
      "run-paradigm --run.paradigm prune_then_ft --prune.method imp-rw",
      "run-paradigm --run.paradigm mask_only --prune.loss reweight",
      "oracle",
      "timing",
      "gradual --gradual.budgets 20,40",
      "report"};
  std::map<std::string, std::string> first;
  for (int round = 0; round < 2; ++round) {
    const fs::path out = root / ("round" + std::to_string(round));
    fs::remove_all(out);
    for (const std::string& c : commands) {
      const std::string args = c.rfind("report", 0) == 0 ? c + " --out \"" + out.string() + "\""
                                                         : c + " --config \"" + config.string() + "\" --out \"" +
                                                               out.string() + "\" --run.jobs " + std::to_string(round + 1);
      const int rc = run_cli(cli, args, root / "log.txt");
      o.require(rc == 0, "`srnet " + c + "` exited with " + std::to_string(rc));
      // Compare the aggregate CSVs after every subcommand.
      for (const auto& e : fs::recursive_directory_iterator(out)) {
        const std::string name = e.path().filename().string();
        if (!e.is_regular_file() || e.path().extension() != ".csv" || e.path().parent_path().filename() == "runs")
          continue;
        if (name.find("aggregate") == std::string::npos && name != "gradual_table.csv") continue;
        const std::string key = c + " :: " + fs::relative(e.path(), out).string();
        const std::string bytes = read_text_file(e.path());
        if (round == 0)
          first[key] = bytes;
        else
          o.require(first.count(key) && first[key] == bytes, key + " differs");
      }
    }
  }
  o.note(std::to_string(commands.size()) + " subcommands, " + std::to_string(first.size()) +
         " aggregate snapshots byte-identical across re-runs (jobs 1 vs 2)");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string cli, out = "acceptance-out", only, allow_fail;
  bool keep = false;
  app.add_option("--cli", cli, "path to the srnet executable");
  app.add_option("--out", out, "scratch directory");
  app.add_option("--only", only, "comma-separated criterion numbers");
  app.add_option("--allow-fail", allow_fail, "comma-separated criteria whose failure does not fail the run");
  app.add_flag("--keep", keep, "reuse artifacts from an earlier run (timings then understate the budget)");
  CLI11_PARSE(app, argc, argv);

  const fs::path root = fs::absolute(out);
  if (!keep) fs::remove_all(root);
  fs::create_directories(root);
  const fs::path studies = root / "studies";

  struct Criterion {
    int id;
    const char* name;
    double budget_s;  // 0: no time bound
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "mechanics exactness suite", 30, mechanics},
      {2, "gradient suite", 120, gradients},
      {3, "bias-ceiling property", 120, bias_ceiling},
      {4, "SRNet existence at 50% sparsity (PoE mask on the CE model)", 1800, [&] { return srnet_existence(studies); }},
      {5, "OOD-oracle mask training", 1800, [&] { return ood_oracle(studies); }},
      {7, "gradual vs fixed sparsity at 90%", 2700, [&] { return gradual(studies); }},
      {6, "paradigm contracts", 0, [&] { return contracts(root / "contracts"); }},
      {8, "weighted-F1 metric oracle", 0, metric_oracle},
      {9, "determinism of subcommands", 0, [&] { return determinism(cli, root / "determinism"); }},
  };
  auto id_set = [](const std::string& list) {
    std::set<int> ids;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) ids.insert(std::stoi(item));
    return ids;
  };
  const std::set<int> selected = id_set(only), allowed = id_set(allow_fail);

  std::ofstream report(root / "acceptance.txt");
  std::map<int, std::string> summary;
  int failures = 0, blocking = 0;
  for (const Criterion& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    std::cerr << "== criterion " << c.id << ": " << c.name << '\n';
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_s > 0) o.require(secs <= c.budget_s, "over the " + fmt(c.budget_s, 5) + " s budget");
    std::ostringstream head;
    head << "criterion " << c.id << " [" << (o.pass ? "PASS" : "FAIL") << "] " << c.name << " (" << fmt(secs, 4)
         << " s" << (c.budget_s > 0 ? " of " + fmt(c.budget_s, 5) + " s" : "") << ")";
    summary[c.id] = head.str();
    std::cout << head.str() << ": " << o.detail << std::endl;
    report << head.str() << ": " << o.detail << '\n';
    failures += !o.pass;
    blocking += !o.pass && !allowed.count(c.id);
  }
  std::cout << "\nsummary\n";
  for (const auto& [id, line] : summary) std::cout << line << '\n';
  if (!failures)
    std::cout << "all criteria passed" << std::endl;
  else
    std::cout << failures << " criterion(s) failed, " << failures - blocking << " of them allowed by --allow-fail"
              << std::endl;
  return blocking ? 1 : 0;
}
