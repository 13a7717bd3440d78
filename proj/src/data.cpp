#include "srnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "srnet/rng.hpp"

namespace srnet {

void DatasetSpec::validate() const {
  auto fail = [](const std::string& m) { throw DataError("dataset spec: " + m); };
  if (classes != 2 && classes != 3) fail("classes must be 2 or 3");
  if (rho < 0.5 || rho > 1.0) fail("rho must lie in [0.5, 1]");
  if (markers < 2) fail("at least two markers are needed for distractor bigrams");
  if (len_a < 2 || len_b < 3) fail("sequences too short");
  if ((len_b - 2) * 5 < 4 * len_b) fail("len_b too small: high overlap needs at least 80% shared tokens");
  if (len_a - 1 < len_b - 2) fail("len_a too small to supply high-overlap fillers");
  const TaskLayout layout{markers, vocab_size};
  if (layout.content_count() / 2 < std::max(len_a - 1, len_b))
    fail("vocabulary too small to realize low overlap (need " +
         std::to_string(layout.first_content() + 2 * std::max(len_a - 1, len_b)) + " tokens)");
  if (n_train < 0 || n_dev < 0 || n_ood < 0 || n_ood_train < 0) fail("split sizes must be nonnegative");
  if (reversed_negatives < 0.0 || reversed_negatives > 1.0) fail("reversed_negatives must lie in [0, 1]");
  if (ood_bias_class_fraction <= 0.0 || ood_bias_class_fraction >= 1.0) fail("ood_bias_class_fraction must be in (0,1)");
}

KeyValues DatasetSpec::to_key_values() const {
  return {{"data.vocab_size", std::to_string(vocab_size)},
          {"data.n_train", std::to_string(n_train)},
          {"data.n_dev", std::to_string(n_dev)},
          {"data.n_ood", std::to_string(n_ood)},
          {"data.n_ood_train", std::to_string(n_ood_train)},
          {"data.rho", format_number(rho)},
          {"data.classes", std::to_string(classes)},
          {"data.seed", std::to_string(seed)},
          {"data.len_a", std::to_string(len_a)},
          {"data.len_b", std::to_string(len_b)},
          {"data.markers", std::to_string(markers)},
          {"data.reversed_negatives", format_number(reversed_negatives)},
          {"data.ood_bias_class_fraction", format_number(ood_bias_class_fraction)}};
}

DatasetSpec DatasetSpec::from_key_values(const KeyValues& kv) {
  DatasetSpec s;
  auto geti = [&](const char* k, int& out) {
    if (auto it = kv.find(k); it != kv.end()) out = static_cast<int>(parse_int(k, it->second));
  };
  auto getd = [&](const char* k, double& out) {
    if (auto it = kv.find(k); it != kv.end()) out = parse_double(k, it->second);
  };
  geti("data.vocab_size", s.vocab_size);
  geti("data.n_train", s.n_train);
  geti("data.n_dev", s.n_dev);
  geti("data.n_ood", s.n_ood);
  geti("data.n_ood_train", s.n_ood_train);
  getd("data.rho", s.rho);
  geti("data.classes", s.classes);
  if (auto it = kv.find("data.seed"); it != kv.end()) s.seed = static_cast<std::uint64_t>(parse_int("data.seed", it->second));
  geti("data.len_a", s.len_a);
  geti("data.len_b", s.len_b);
  geti("data.markers", s.markers);
  getd("data.reversed_negatives", s.reversed_negatives);
  getd("data.ood_bias_class_fraction", s.ood_bias_class_fraction);
  return s;
}

namespace {

std::vector<int> sample_distinct(const std::vector<int>& pool, std::size_t k, Rng& rng) {
  std::vector<int> p = pool;
  for (std::size_t i = 0; i < k; ++i) std::swap(p[i], p[i + uniform_index(rng, p.size() - i)]);
  p.resize(k);
  return p;
}

class PairGenerator {
 public:
  explicit PairGenerator(const DatasetSpec& spec) : spec_(spec), layout_{spec.markers, spec.vocab_size} {
    const int split = layout_.first_content() + layout_.content_count() / 2;
    for (int t = layout_.first_content(); t < spec.vocab_size; ++t) (t < split ? premise_ : filler_).push_back(t);
  }

  Example make(int label, bool high_overlap, Rng& rng) const {
    Example ex;
    ex.label = label;
    const int m = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(spec_.markers)));
    const std::vector<int> a_content = sample_distinct(premise_, static_cast<std::size_t>(spec_.len_a - 1), rng);
    ex.tokens_a = a_content;
    ex.tokens_a.insert(ex.tokens_a.begin() + static_cast<long>(uniform_index(rng, a_content.size() + 1)), layout_.marker(m));

    std::pair<int, int> bigram{layout_.agree_first(m), layout_.agree_second(m)};
    const bool reversed_class = spec_.classes == 3 && label == 0;
    const bool other_class = spec_.classes == 3 ? label == 2 : label != kBiasClass;
    if (reversed_class) {
      bigram = {layout_.agree_second(m), layout_.agree_first(m)};
    } else if (other_class) {
      if (spec_.classes == 2 && uniform01(rng) < spec_.reversed_negatives) {
        bigram = {layout_.agree_second(m), layout_.agree_first(m)};
      } else {
        int j = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(spec_.markers - 1)));
        if (j >= m) ++j;
        bigram = {layout_.agree_first(j), layout_.agree_second(j)};
      }
    }

    const std::size_t n_fill = static_cast<std::size_t>(spec_.len_b - 2);
    std::vector<int> fill;
    if (high_overlap) {
      fill = sample_distinct(a_content, n_fill, rng);
    } else {
      const std::size_t max_shared = static_cast<std::size_t>(spec_.len_b / 5);
      const std::size_t shared = uniform_index(rng, max_shared + 1);
      fill = sample_distinct(a_content, shared, rng);
      for (int t : sample_distinct(filler_, n_fill - shared, rng)) fill.push_back(t);
      deterministic_shuffle(fill.begin(), fill.end(), rng);
    }
    const std::size_t at = uniform_index(rng, n_fill + 1);
    ex.tokens_b = fill;
    ex.tokens_b.insert(ex.tokens_b.begin() + static_cast<long>(at), {bigram.first, bigram.second});
    return ex;
  }

 private:
  const DatasetSpec& spec_;
  TaskLayout layout_;
  // Premises draw from the first half of the content tokens, low-overlap
  // fillers from the second half.
  std::vector<int> premise_;
  std::vector<int> filler_;
};

std::vector<int> balanced_labels(int n, int classes, Rng& rng) {
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = i % classes;
  deterministic_shuffle(labels.begin(), labels.end(), rng);
  return labels;
}

Split make_id_split(const DatasetSpec& spec, const PairGenerator& gen, int n, double rho, const std::string& prefix,
                    std::uint64_t seed) {
  Rng rng(seed);
  const std::vector<int> labels = balanced_labels(n, spec.classes, rng);
  Split out;
  out.reserve(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool aligned = uniform01(rng) < rho;
    const bool high = (labels[i] == kBiasClass) == aligned;
    Example ex = gen.make(labels[i], high, rng);
    ex.bias_aligned = aligned;
    char id[32];
    std::snprintf(id, sizeof id, "%s-%06zu", prefix.c_str(), i);
    ex.id = id;
    out.push_back(std::move(ex));
  }
  return out;
}

Split make_ood_split(const DatasetSpec& spec, const PairGenerator& gen, int n, const std::string& prefix,
                     std::uint64_t seed) {
  Rng rng(seed);
  const int n_bias = static_cast<int>(std::lround(n * spec.ood_bias_class_fraction));
  std::vector<int> labels;
  labels.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n_bias; ++i) labels.push_back(kBiasClass);
  std::vector<int> others;
  for (int c = 0; c < spec.classes; ++c)
    if (c != kBiasClass) others.push_back(c);
  for (int i = 0; i < n - n_bias; ++i) labels.push_back(others[static_cast<std::size_t>(i) % others.size()]);
  deterministic_shuffle(labels.begin(), labels.end(), rng);
  Split out;
  out.reserve(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    Example ex = gen.make(labels[i], true, rng);
    ex.bias_aligned = labels[i] == kBiasClass;
    char id[32];
    std::snprintf(id, sizeof id, "%s-%06zu", prefix.c_str(), i);
    ex.id = id;
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace

Splits generate(const DatasetSpec& spec) {
  spec.validate();
  const PairGenerator gen(spec);
  Splits s;
  s.id_train = make_id_split(spec, gen, spec.n_train, spec.rho, "train", derive_seed(spec.seed, "data/id_train"));
  s.id_dev = make_id_split(spec, gen, spec.n_dev, spec.rho, "dev", derive_seed(spec.seed, "data/id_dev"));
  s.ood_test = make_ood_split(spec, gen, spec.n_ood, "ood", derive_seed(spec.seed, "data/ood_test"));
  s.ood_train = make_ood_split(spec, gen, spec.n_ood_train, "oodtrain", derive_seed(spec.seed, "data/ood_train"));
  return s;
}

Split generate_corpus(const DatasetSpec& spec, int n, std::uint64_t seed) {
  spec.validate();
  const PairGenerator gen(spec);
  return make_id_split(spec, gen, n, 0.5, "corpus", seed);
}

int true_rule_label(const Example& ex, const DatasetSpec& spec) {
  const TaskLayout layout{spec.markers, spec.vocab_size};
  int m = -1;
  for (int t : ex.tokens_a)
    if (t >= layout.marker(0) && t < layout.marker(spec.markers)) {
      m = t - layout.marker(0);
      break;
    }
  const int negative = spec.classes == 3 ? 2 : 0;
  if (m < 0) return negative;
  const int p = layout.agree_first(m), q = layout.agree_second(m);
  for (std::size_t i = 0; i + 1 < ex.tokens_b.size(); ++i) {
    if (ex.tokens_b[i] == p && ex.tokens_b[i + 1] == q) return kBiasClass;
    if (spec.classes == 3 && ex.tokens_b[i] == q && ex.tokens_b[i + 1] == p) return 0;
  }
  return negative;
}

double overlap_fraction(const std::vector<int>& a, const std::vector<int>& b) {
  if (b.empty()) throw DataError("overlap_fraction: empty sequence");
  const std::set<int> in_a(a.begin(), a.end());
  std::size_t shared = 0;
  for (int t : b) shared += in_a.count(t);
  return static_cast<double>(shared) / static_cast<double>(b.size());
}

std::vector<double> class_distribution(const Split& split, int classes) {
  if (split.empty()) throw DataError("class_distribution: empty split");
  std::vector<double> counts(static_cast<std::size_t>(classes), 0.0);
  for (const Example& ex : split) {
    if (ex.label < 0 || ex.label >= classes) throw DataError("class_distribution: label out of range");
    counts[static_cast<std::size_t>(ex.label)] += 1.0;
  }
  for (double& c : counts) c /= static_cast<double>(split.size());
  return counts;
}

namespace {

std::string join_tokens(const std::vector<int>& t) {
  std::string s;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (i) s += ' ';
    s += std::to_string(t[i]);
  }
  return s;
}

std::vector<int> split_tokens(const std::string& s) {
  std::vector<int> out;
  std::istringstream in(s);
  std::string tok;
  while (in >> tok) out.push_back(static_cast<int>(parse_int("token", tok)));
  return out;
}

}  // namespace

std::string format_split(const Split& split) {
  std::string out;
  for (const Example& ex : split)
    out += ex.id + '\t' + join_tokens(ex.tokens_a) + '\t' + join_tokens(ex.tokens_b) + '\t' + std::to_string(ex.label) +
           '\t' + (ex.bias_aligned ? "1" : "0") + '\n';
  return out;
}

Split parse_split(const std::string& text) {
  Split out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 5) throw DataError("split line " + std::to_string(lineno) + ": expected 5 tab-separated fields");
    Example ex;
    ex.id = fields[0];
    ex.tokens_a = split_tokens(fields[1]);
    ex.tokens_b = split_tokens(fields[2]);
    ex.label = static_cast<int>(parse_int("label", fields[3]));
    ex.bias_aligned = parse_bool("bias_aligned", fields[4]);
    out.push_back(std::move(ex));
  }
  return out;
}

void write_split(const std::filesystem::path& path, const Split& split) { write_text_file(path, format_split(split)); }

Split read_split(const std::filesystem::path& path) { return parse_split(read_text_file(path)); }

}  // namespace srnet
