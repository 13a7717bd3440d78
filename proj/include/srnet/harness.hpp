#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "srnet/data.hpp"
#include "srnet/debias.hpp"
#include "srnet/kv.hpp"
#include "srnet/metrics.hpp"
#include "srnet/model.hpp"
#include "srnet/pruning.hpp"
#include "srnet/train.hpp"

namespace srnet {

/// prune_after_ft searches over the fine-tuned weights, prune_then_ft
/// searches over the pre-trained weights and then fine-tunes the rewound
/// subnetwork, mask_only learns masks over the frozen pre-trained weights.
enum class Paradigm { prune_after_ft, prune_then_ft, mask_only };

const char* to_string(Paradigm p);
Paradigm parse_paradigm(const std::string& s);

/// Everything a run depends on. Keys are flat and one-to-one with CLI flags.
struct RunConfig {
  DatasetSpec data;
  ModelConfig model;
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  LossKind finetune_loss = LossKind::std;
  PruningRunConfig prune;
  BiasTrainConfig bias;
  Paradigm paradigm = Paradigm::prune_after_ft;
  std::vector<double> sparsities = {0.2, 0.5, 0.7, 0.9};
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4};
  int jobs = 1;
  /// Cubic schedule end as a fraction of t_max.
  double schedule_end = 0.5;
  std::vector<double> timing_fractions = {0.0, 0.25, 0.5, 0.75, 1.0};
  double gradual_target = 0.9;
  double gradual_start = 0.7;
  /// Mask-training budgets (t_max values) for the gradual comparison; empty
  /// means the run's t_max.
  std::vector<long> gradual_budgets;
  SelectionRule gradual_rule = SelectionRule::after_0_7_tmax;
  LossKind oracle_loss = LossKind::std;
  /// Subset of ft-subnet, pt-subnet, pt-subnet-ft.
  std::vector<std::string> oracle_arms = {"ft-subnet", "pt-subnet", "pt-subnet-ft"};
  /// Evaluations without ID dev improvement before a fine-tuning run counts
  /// as plateaued.
  int plateau_patience = 3;
  /// ID accuracy drop (absolute) that flags an OOD gain as suspect.
  double id_drop_flag = 0.10;

  KeyValues to_key_values() const;
  /// Starts from the defaults and applies `kv`; unknown keys are errors.
  static RunConfig from_key_values(const KeyValues& kv);
  void apply(const KeyValues& kv);
  void validate() const;
  /// Every key with its current value, in canonical order.
  static std::vector<std::string> keys();
};

/// Model-init, pretraining, fine-tuning and search seeds fan out from one
/// global seed through labeled hashes.
struct SeedPlan {
  std::uint64_t model;
  std::uint64_t pretrain;
  std::uint64_t finetune;
  std::uint64_t search;

  static SeedPlan from(std::uint64_t seed);
};

class MissingInput : public std::runtime_error {
 public:
  MissingInput(const std::filesystem::path& path, const std::string& producer);
};

class ContractViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ExperimentRecord {
  std::string study;  // full, paradigm, oracle, timing, gradual
  std::string paradigm;
  std::string method;
  std::string finetune_loss;
  std::string prune_loss;
  std::string arm;  // oracle/gradual arm, or the timing start step
  double sparsity = 0.0;
  std::uint64_t seed = 0;
  long t_max = 0;
  std::vector<TrajectoryPoint> trajectory;
  std::size_t selected = 0;
  std::vector<std::string> violations;
  bool flagged = false;  // OOD gain alongside an ID drop beyond the flag level

  const TrajectoryPoint& selected_point() const { return trajectory.at(selected); }
  std::string name() const;
  KeyValues to_key_values() const;
  static ExperimentRecord from_key_values(const KeyValues& kv);
};

/// Artifacts shared by runs, cached on disk under one output directory:
/// datasets, per-seed pre-trained and fine-tuned snapshots, bias-model and
/// teacher predictions. Thread-safe.
class Workspace {
 public:
  Workspace(RunConfig config, std::filesystem::path root);

  const RunConfig& config() const { return config_; }
  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path seed_dir(std::uint64_t seed) const;

  /// Generated (or re-read) splits; written under data/ on first use.
  const Splits& splits();
  /// The ID train split joined with the OOD train pool; throws
  /// ContractViolation if the pool shares an id with the OOD test split.
  const Split& oracle_train();

  /// With `produce` false a missing artifact raises MissingInput naming the
  /// subcommand that creates it.
  ParameterSnapshot pretrained(std::uint64_t seed, bool produce = true);
  ParameterSnapshot finetuned(std::uint64_t seed, LossKind loss, bool produce = true);
  /// Fine-tuning snapshot kept for the timing study.
  ParameterSnapshot finetune_snapshot(std::uint64_t seed, LossKind loss, long step);
  std::vector<TrajectoryPoint> finetune_trajectory(std::uint64_t seed, LossKind loss);
  long finetune_t_max() ;
  std::vector<long> timing_steps();

  /// Bias-model (and for confreg, teacher) side information for a split.
  const DebiasAux& aux(const Split& split, const std::string& split_name, std::uint64_t seed, LossKind loss);

  /// Best ID metric of the full fine-tuned model, for the ID-drop flag.
  TrajectoryPoint full_model_point(std::uint64_t seed, LossKind loss);

 private:
  std::mutex& lock_for(const std::string& key);

  RunConfig config_;
  std::filesystem::path root_;
  std::mutex mu_;
  std::map<std::string, std::unique_ptr<std::mutex>> locks_;
  std::unique_ptr<Splits> splits_;
  std::unique_ptr<Split> oracle_train_;
  std::map<std::string, std::unique_ptr<DebiasAux>> aux_;
  std::unique_ptr<BiasModel> bias_model_;
  std::unique_ptr<EmbeddingTable> embeddings_;
};

/// Throws ContractViolation if `pool` shares an example id with `test`.
void check_disjoint_ids(const Split& pool, const Split& test);

/// Runs `fn(i)` for i in [0, n) on up to `jobs` threads. Results must be
/// written by index so the outcome does not depend on scheduling.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn);

/// Descriptions of every way `masks` miss their target sparsity; empty if none.
std::vector<std::string> check_sparsity(const MaskSet& masks, double sparsity, PruneScope scope);

/// The configured paradigm over sparsities x seeds. Contract checks run
/// after every run; violations are recorded, not thrown.
std::vector<ExperimentRecord> run_paradigm(Workspace& ws);
/// One paradigm run; exposed for tests.
ExperimentRecord run_paradigm_once(Workspace& ws, Paradigm paradigm, double sparsity, std::uint64_t seed);

/// Full fine-tuned model records (study "full"), one per seed.
std::vector<ExperimentRecord> run_full(Workspace& ws);

/// Masks trained on ID train + OOD train for the three paradigms.
std::vector<ExperimentRecord> run_ood_oracle(Workspace& ws);

/// Mask training from fine-tuning snapshots at the timing steps.
std::vector<ExperimentRecord> run_timing_study(Workspace& ws);

/// fixed-hard, fixed-soft and gradual arms at the gradual target sparsity.
std::vector<ExperimentRecord> run_gradual_vs_fixed(Workspace& ws);

/// First evaluation after which ID dev accuracy fails to improve for
/// `patience` consecutive evaluations; the last step if it never stalls.
long plateau_step(std::span<const TrajectoryPoint> trajectory, int patience);

/// Records are written under runs/<study>/<name>/.
void save_record(const std::filesystem::path& root, const ExperimentRecord& record);
/// Every record below root/runs, in name order; throws if there are none.
std::vector<ExperimentRecord> load_records(const std::filesystem::path& root);

struct AggregateRow {
  std::string study, paradigm, method, finetune_loss, prune_loss, arm;
  double sparsity = 0.0;
  long t_max = 0;
  MeanStd id_acc, id_f1, ood_acc, ood_f1;
  std::size_t flagged = 0;
  std::size_t violations = 0;
};

std::vector<AggregateRow> aggregate(const std::vector<ExperimentRecord>& records);
std::string aggregate_csv(const std::vector<AggregateRow>& rows);
/// Writes <study>_aggregate.csv and plot data (x = sparsity, one column per
/// series) for every study present.
void write_reports(const std::filesystem::path& root, const std::vector<ExperimentRecord>& records);
void write_manifest(const std::filesystem::path& root, const std::string& command, const RunConfig& config);

}  // namespace srnet
