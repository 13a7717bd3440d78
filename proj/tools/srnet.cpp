#include <cstdlib>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "srnet/harness.hpp"

using namespace srnet;
namespace fs = std::filesystem;

namespace {

constexpr int kExitError = 1;
constexpr int kExitViolation = 3;

struct Options {
  std::string config;
  std::string out;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> flags;
};

void add_common(CLI::App& cmd, Options& o) {
  cmd.add_option("--config", o.config, "key = value file; flags override it");
  cmd.add_option("--out", o.out, "output directory (default: $SRNET_OUT or ./srnet-out)");
  for (const std::string& key : RunConfig::keys()) o.flags[key] = cmd.add_option("--" + key, o.values[key]);
}

RunConfig load_config(const Options& o) {
  KeyValues kv;
  if (!o.config.empty())
    for (const auto& [k, v] : read_key_values(o.config))
      if (k.rfind("manifest.", 0) != 0) kv[k] = v;
  for (const auto& [key, opt] : o.flags)
    if (opt->count() > 0) kv[key] = o.values.at(key);
  RunConfig c = RunConfig::from_key_values(kv);
  c.validate();
  return c;
}

fs::path out_dir(const Options& o) {
  if (!o.out.empty()) return o.out;
  if (const char* env = std::getenv("SRNET_OUT"); env && *env) return env;
  return "srnet-out";
}

// Upstream artifacts must already exist; each stage produces only its own.
void require_pretrained(Workspace& ws) {
  for (std::uint64_t seed : ws.config().seeds) ws.pretrained(seed, false);
}

void require_finetuned(Workspace& ws, LossKind loss) {
  for (std::uint64_t seed : ws.config().seeds) {
    if (loss == LossKind::confreg) ws.finetuned(seed, LossKind::std, false);
    ws.finetuned(seed, loss, false);
  }
}

int finish(const fs::path& root, const std::vector<ExperimentRecord>& records) {
  std::size_t bad = 0;
  for (const ExperimentRecord& r : records) {
    const TrajectoryPoint& p = r.selected_point();
    std::cout << r.name() << "  id_acc " << format_number(p.id_acc) << "  ood_acc " << format_number(p.ood_acc)
              << (r.flagged ? "  [flagged: OOD gain with ID drop]" : "") << '\n';
    for (const std::string& v : r.violations) {
      std::cerr << "contract violation in " << r.name() << ": " << v << '\n';
      ++bad;
    }
  }
  write_reports(root, load_records(root));
  return bad == 0 ? 0 : kExitViolation;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse subnetworks of a small encoder on a synthetic task with a spurious overlap cue"};
  app.require_subcommand(1);

  struct Command {
    const char* name;
    const char* help;
    Options options;
    CLI::App* app = nullptr;
  };
  std::vector<Command> commands = {
      {"gen-data", "generate the ID and OOD splits", {}},
      {"pretrain", "masked-token pretraining, one model per seed", {}},
      {"finetune", "fine-tune the pre-trained models with finetune.loss", {}},
      {"search", "one subnetwork search (run.paradigm at --sparsity, --seed)", {}},
      {"run-paradigm", "run.paradigm over run.sparsities x run.seeds", {}},
      {"oracle", "masks trained with OOD data for the three paradigms", {}},
      {"timing", "mask training from fine-tuning snapshots", {}},
      {"gradual", "fixed versus gradual sparsity at gradual.target", {}},
      {"report", "aggregate every record under the output directory", {}},
  };
  double sparsity = 0.5;
  std::uint64_t seed = 1;
  for (Command& c : commands) {
    c.app = app.add_subcommand(c.name, c.help);
    if (std::string(c.name) == "report") {
      c.app->add_option("--out", c.options.out, "output directory (default: $SRNET_OUT or ./srnet-out)");
      continue;
    }
    add_common(*c.app, c.options);
    if (std::string(c.name) == "search") {
      c.app->add_option("--sparsity", sparsity)->required();
      c.app->add_option("--seed", seed)->required();
    }
  }
  CLI11_PARSE(app, argc, argv);

  try {
    for (Command& c : commands) {
      if (!c.app->parsed()) continue;
      const std::string name = c.name;
      const fs::path root = out_dir(c.options);
      if (name == "report") {
        const std::vector<ExperimentRecord> records = load_records(root);
        write_reports(root, records);
        std::cout << aggregate_csv(aggregate(records));
        return 0;
      }
      RunConfig config = load_config(c.options);
      if (name == "search") config.seeds = {seed};
      Workspace ws(config, root);
      write_manifest(root, name, config);
      if (name == "gen-data") {
        const Splits& s = ws.splits();
        std::cout << "id_train " << s.id_train.size() << ", id_dev " << s.id_dev.size() << ", ood_test "
                  << s.ood_test.size() << ", ood_train " << s.ood_train.size() << " in " << (root / "data").string()
                  << '\n';
        return 0;
      }
      if (name == "pretrain") {
        parallel_for(config.seeds.size(), config.jobs, [&](std::size_t i) { ws.pretrained(config.seeds[i]); });
        return 0;
      }
      if (name == "finetune") {
        require_pretrained(ws);
        if (config.finetune_loss == LossKind::confreg)
          for (std::uint64_t s : config.seeds) ws.finetuned(s, LossKind::std, false);
        parallel_for(config.seeds.size(), config.jobs,
                     [&](std::size_t i) { ws.finetuned(config.seeds[i], config.finetune_loss); });
        return finish(root, run_full(ws));
      }
      require_pretrained(ws);
      require_finetuned(ws, config.finetune_loss);
      if (config.prune.loss == LossKind::confreg) require_finetuned(ws, LossKind::std);
      std::vector<ExperimentRecord> records;
      if (name == "search") {
        ExperimentRecord r = run_paradigm_once(ws, config.paradigm, sparsity, seed);
        save_record(root, r);
        records.push_back(std::move(r));
      } else if (name == "run-paradigm") {
        records = run_paradigm(ws);
      } else if (name == "oracle") {
        if (config.oracle_loss == LossKind::confreg) require_finetuned(ws, LossKind::std);
        records = run_ood_oracle(ws);
      } else if (name == "timing") {
        records = run_timing_study(ws);
      } else if (name == "gradual") {
        records = run_gradual_vs_fixed(ws);
      }
      return finish(root, records);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitError;
  }
  return 0;
}
