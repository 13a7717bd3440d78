#include <algorithm>
#include <charconv>
#include <functional>
#include <sstream>

#include "srnet/harness.hpp"

namespace srnet {

const char* to_string(Paradigm p) {
  switch (p) {
    case Paradigm::prune_after_ft: return "prune_after_ft";
    case Paradigm::prune_then_ft: return "prune_then_ft";
    case Paradigm::mask_only: return "mask_only";
  }
  return "?";
}

Paradigm parse_paradigm(const std::string& s) {
  if (s == "prune_after_ft") return Paradigm::prune_after_ft;
  if (s == "prune_then_ft") return Paradigm::prune_then_ft;
  if (s == "mask_only") return Paradigm::mask_only;
  throw ConfigError("unknown paradigm `" + s + "` (expected prune_after_ft|prune_then_ft|mask_only)");
}

namespace {

struct Binding {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename T>
using Ref = T& (*)(RunConfig&);

template <typename T>
T& mut(const RunConfig& c, Ref<T> ref) {
  return ref(const_cast<RunConfig&>(c));
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(' '), e = item.find_last_not_of(' ');
    if (b == std::string::npos) continue;
    out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

template <typename T>
std::string join(const std::vector<T>& v, std::string (*fmt)(T)) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt(v[i]);
  return out;
}

std::string fmt_double(double v) { return format_number(v); }
std::string fmt_long(long v) { return std::to_string(v); }
std::string fmt_u64(std::uint64_t v) { return std::to_string(v); }
std::string fmt_string(std::string v) { return v; }

Binding int_key(std::string key, Ref<int> ref) {
  return {key, [ref](const RunConfig& c) { return std::to_string(mut(c, ref)); },
          [ref, key](RunConfig& c, const std::string& v) { ref(c) = static_cast<int>(parse_int(key, v)); }};
}
Binding long_key(std::string key, Ref<long> ref) {
  return {key, [ref](const RunConfig& c) { return std::to_string(mut(c, ref)); },
          [ref, key](RunConfig& c, const std::string& v) { ref(c) = static_cast<long>(parse_int(key, v)); }};
}
Binding u64_key(std::string key, Ref<std::uint64_t> ref) {
  return {key, [ref](const RunConfig& c) { return std::to_string(mut(c, ref)); },
          [ref, key](RunConfig& c, const std::string& v) { ref(c) = static_cast<std::uint64_t>(parse_int(key, v)); }};
}
Binding double_key(std::string key, Ref<double> ref) {
  return {key, [ref](const RunConfig& c) { return format_number(mut(c, ref)); },
          [ref, key](RunConfig& c, const std::string& v) { ref(c) = parse_double(key, v); }};
}
// Shortest text that reads back as the same float.
std::string fmt_float(float v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

Binding float_key(std::string key, Ref<float> ref) {
  return {key, [ref](const RunConfig& c) { return fmt_float(mut(c, ref)); },
          [ref, key](RunConfig& c, const std::string& v) { ref(c) = static_cast<float>(parse_double(key, v)); }};
}
Binding loss_key(std::string key, Ref<LossKind> ref) {
  return {key, [ref](const RunConfig& c) { return std::string(to_string(mut(c, ref))); },
          [ref](RunConfig& c, const std::string& v) { ref(c) = parse_loss_kind(v); }};
}

#define SRNET_REF(type, expr) [](RunConfig& c) -> type& { return expr; }

const std::vector<Binding>& bindings() {
  static const std::vector<Binding> table = [] {
    std::vector<Binding> b = {
        int_key("data.vocab_size", SRNET_REF(int, c.data.vocab_size)),
        int_key("data.n_train", SRNET_REF(int, c.data.n_train)),
        int_key("data.n_dev", SRNET_REF(int, c.data.n_dev)),
        int_key("data.n_ood", SRNET_REF(int, c.data.n_ood)),
        int_key("data.n_ood_train", SRNET_REF(int, c.data.n_ood_train)),
        double_key("data.rho", SRNET_REF(double, c.data.rho)),
        int_key("data.classes", SRNET_REF(int, c.data.classes)),
        u64_key("data.seed", SRNET_REF(std::uint64_t, c.data.seed)),
        int_key("data.len_a", SRNET_REF(int, c.data.len_a)),
        int_key("data.len_b", SRNET_REF(int, c.data.len_b)),
        int_key("data.markers", SRNET_REF(int, c.data.markers)),
        double_key("data.reversed_negatives", SRNET_REF(double, c.data.reversed_negatives)),
        double_key("data.ood_bias_class_fraction", SRNET_REF(double, c.data.ood_bias_class_fraction)),

        int_key("model.layers", SRNET_REF(int, c.model.layers)),
        int_key("model.d_model", SRNET_REF(int, c.model.d_model)),
        int_key("model.d_ffn", SRNET_REF(int, c.model.d_ffn)),
        int_key("model.heads", SRNET_REF(int, c.model.heads)),
        int_key("model.max_len", SRNET_REF(int, c.model.max_len)),
        {"model.activation", [](const RunConfig& c) { return std::string(c.model.activation == Activation::gelu ? "gelu" : "relu"); },
         [](RunConfig& c, const std::string& v) {
           if (v == "gelu") c.model.activation = Activation::gelu;
           else if (v == "relu") c.model.activation = Activation::relu;
           else throw ConfigError("model.activation must be gelu or relu");
         }},
        float_key("model.init_std", SRNET_REF(float, c.model.init_std)),

        long_key("pretrain.steps", SRNET_REF(long, c.pretrain.steps)),
        int_key("pretrain.batch", SRNET_REF(int, c.pretrain.batch)),
        int_key("pretrain.corpus_size", SRNET_REF(int, c.pretrain.corpus_size)),
        double_key("pretrain.mask_prob", SRNET_REF(double, c.pretrain.mask_prob)),
        float_key("pretrain.lr", SRNET_REF(float, c.pretrain.optim.lr)),
        float_key("pretrain.weight_decay", SRNET_REF(float, c.pretrain.optim.weight_decay)),

        loss_key("finetune.loss", SRNET_REF(LossKind, c.finetune_loss)),
        float_key("finetune.lr", SRNET_REF(float, c.finetune.optim.lr)),
        float_key("finetune.weight_decay", SRNET_REF(float, c.finetune.optim.weight_decay)),
        int_key("finetune.epochs", SRNET_REF(int, c.finetune.epochs)),
        int_key("finetune.batch", SRNET_REF(int, c.finetune.batch)),
        long_key("finetune.eval_interval", SRNET_REF(long, c.finetune.eval_interval)),

        {"prune.method", [](const RunConfig& c) { return std::string(to_string(c.prune.method)); },
         [](RunConfig& c, const std::string& v) { c.prune.method = parse_prune_method(v); }},
        loss_key("prune.loss", SRNET_REF(LossKind, c.prune.loss)),
        long_key("prune.t_max", SRNET_REF(long, c.prune.t_max)),
        long_key("prune.interval", SRNET_REF(long, c.prune.prune_interval)),
        double_key("prune.delta_s", SRNET_REF(double, c.prune.delta_s)),
        float_key("prune.mask_lr", SRNET_REF(float, c.prune.mask_lr)),
        float_key("prune.lr", SRNET_REF(float, c.prune.optim.lr)),
        float_key("prune.weight_decay", SRNET_REF(float, c.prune.optim.weight_decay)),
        long_key("prune.eval_interval", SRNET_REF(long, c.prune.eval_interval)),
        int_key("prune.batch", SRNET_REF(int, c.prune.batch)),
        {"prune.scope", [](const RunConfig& c) { return std::string(to_string(c.prune.scope)); },
         [](RunConfig& c, const std::string& v) { c.prune.scope = parse_prune_scope(v); }},
        {"prune.rule", [](const RunConfig& c) { return std::string(to_string(c.prune.rule)); },
         [](RunConfig& c, const std::string& v) { c.prune.rule = parse_selection_rule(v); }},

        float_key("mask.phi", SRNET_REF(float, c.prune.mask.phi)),
        float_key("mask.alpha", SRNET_REF(float, c.prune.mask.alpha)),
        long_key("mask.threshold_interval", SRNET_REF(long, c.prune.mask.threshold_interval)),
        {"mask.init", [](const RunConfig& c) { return std::string(to_string(c.prune.mask.init)); },
         [](RunConfig& c, const std::string& v) { c.prune.mask.init = parse_mask_init(v); }},
        {"mask.schedule", [](const RunConfig& c) { return std::string(to_string(c.prune.mask.schedule.kind)); },
         [](RunConfig& c, const std::string& v) {
           if (v == "fixed") c.prune.mask.schedule.kind = ScheduleKind::fixed;
           else if (v == "cubic") c.prune.mask.schedule.kind = ScheduleKind::cubic;
           else throw ConfigError("mask.schedule must be fixed or cubic");
         }},
        double_key("mask.schedule_start", SRNET_REF(double, c.prune.mask.schedule.s_start)),
        double_key("mask.schedule_end", SRNET_REF(double, c.schedule_end)),

        int_key("bias.steps", SRNET_REF(int, c.bias.steps)),
        double_key("bias.lr", SRNET_REF(double, c.bias.lr)),

        {"run.paradigm", [](const RunConfig& c) { return std::string(to_string(c.paradigm)); },
         [](RunConfig& c, const std::string& v) { c.paradigm = parse_paradigm(v); }},
        {"run.sparsities", [](const RunConfig& c) { return join(c.sparsities, fmt_double); },
         [](RunConfig& c, const std::string& v) {
           c.sparsities.clear();
           for (const std::string& s : split_list(v)) c.sparsities.push_back(parse_double("run.sparsities", s));
         }},
        {"run.seeds", [](const RunConfig& c) { return join(c.seeds, fmt_u64); },
         [](RunConfig& c, const std::string& v) {
           c.seeds.clear();
           for (const std::string& s : split_list(v))
             c.seeds.push_back(static_cast<std::uint64_t>(parse_int("run.seeds", s)));
         }},
        int_key("run.jobs", SRNET_REF(int, c.jobs)),
        double_key("run.id_drop_flag", SRNET_REF(double, c.id_drop_flag)),

        {"timing.fractions", [](const RunConfig& c) { return join(c.timing_fractions, fmt_double); },
         [](RunConfig& c, const std::string& v) {
           c.timing_fractions.clear();
           for (const std::string& s : split_list(v)) c.timing_fractions.push_back(parse_double("timing.fractions", s));
         }},
        int_key("timing.plateau_patience", SRNET_REF(int, c.plateau_patience)),

        double_key("gradual.target", SRNET_REF(double, c.gradual_target)),
        double_key("gradual.start", SRNET_REF(double, c.gradual_start)),
        {"gradual.budgets", [](const RunConfig& c) { return join(c.gradual_budgets, fmt_long); },
         [](RunConfig& c, const std::string& v) {
           c.gradual_budgets.clear();
           for (const std::string& s : split_list(v))
             c.gradual_budgets.push_back(static_cast<long>(parse_int("gradual.budgets", s)));
         }},
        {"gradual.rule", [](const RunConfig& c) { return std::string(to_string(c.gradual_rule)); },
         [](RunConfig& c, const std::string& v) { c.gradual_rule = parse_selection_rule(v); }},

        loss_key("oracle.loss", SRNET_REF(LossKind, c.oracle_loss)),
        {"oracle.arms", [](const RunConfig& c) { return join(c.oracle_arms, fmt_string); },
         [](RunConfig& c, const std::string& v) { c.oracle_arms = split_list(v); }},
    };
    return b;
  }();
  return table;
}

#undef SRNET_REF

}  // namespace

KeyValues RunConfig::to_key_values() const {
  KeyValues kv;
  for (const Binding& b : bindings()) kv[b.key] = b.get(*this);
  return kv;
}

void RunConfig::apply(const KeyValues& kv) {
  for (const auto& [key, value] : kv) {
    const auto& table = bindings();
    const auto it = std::find_if(table.begin(), table.end(), [&](const Binding& b) { return b.key == key; });
    if (it == table.end()) throw ConfigError("unknown config key `" + key + "`");
    it->set(*this, value);
  }
  // the classifier and vocabulary follow the data
  model.vocab_size = data.vocab_size;
  model.classes = data.classes;
}

RunConfig RunConfig::from_key_values(const KeyValues& kv) {
  RunConfig c;
  c.apply(kv);
  return c;
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const Binding& b : bindings()) out.push_back(b.key);
  return out;
}

void RunConfig::validate() const {
  data.validate();
  model.validate();
  if (model.vocab_size != data.vocab_size || model.classes != data.classes)
    throw ConfigError("model vocabulary and classes must match the data");
  if (seeds.empty()) throw ConfigError("run.seeds must not be empty");
  if (sparsities.empty()) throw ConfigError("run.sparsities must not be empty");
  for (double s : sparsities)
    if (s < 0.0 || s >= 1.0) throw ConfigError("sparsities must lie in [0, 1)");
  if (jobs < 1) throw ConfigError("run.jobs must be at least 1");
  if (!(schedule_end > 0.0 && schedule_end <= 1.0)) throw ConfigError("mask.schedule_end must lie in (0, 1]");
  for (double f : timing_fractions)
    if (f < 0.0 || f > 1.0) throw ConfigError("timing fractions must lie in [0, 1]");
  if (!(gradual_start < gradual_target)) throw ConfigError("gradual.start must be below gradual.target");
  if (plateau_patience < 1) throw ConfigError("timing.plateau_patience must be at least 1");
  if (finetune.epochs < 1 || finetune.batch < 1) throw ConfigError("fine-tuning epochs and batch must be positive");
  prune.mask.validate();
  if (oracle_arms.empty()) throw ConfigError("oracle.arms must not be empty");
  for (const std::string& a : oracle_arms)
    if (a != "ft-subnet" && a != "pt-subnet" && a != "pt-subnet-ft")
      throw ConfigError("unknown oracle arm `" + a + "` (expected ft-subnet|pt-subnet|pt-subnet-ft)");
}

SeedPlan SeedPlan::from(std::uint64_t seed) {
  return {derive_seed(seed, "model/init"), derive_seed(seed, "pretrain"), derive_seed(seed, "finetune"),
          derive_seed(seed, "search")};
}

}  // namespace srnet
