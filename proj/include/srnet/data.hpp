#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "srnet/kv.hpp"

namespace srnet {

/// One sentence pair.
struct Example {
  std::string id;
  std::vector<int> tokens_a;
  std::vector<int> tokens_b;
  int label = 0;
  bool bias_aligned = false;
};

using Split = std::vector<Example>;

/// Reserved token ids shared by the generator and the encoder.
namespace token {
inline constexpr int kPad = 0;
inline constexpr int kCls = 1;
inline constexpr int kSep = 2;
inline constexpr int kMask = 3;
inline constexpr int kFirstMarker = 4;
}  // namespace token

/// The class that high lexical overlap is spuriously tied to.
inline constexpr int kBiasClass = 1;

struct DatasetSpec {
  int vocab_size = 200;
  int n_train = 10000;
  int n_dev = 1000;
  int n_ood = 2000;
  int n_ood_train = 2000;
  double rho = 0.9;
  int classes = 2;
  std::uint64_t seed = 1;
  int len_a = 10;
  int len_b = 10;
  int markers = 4;
  /// Share of K = 2 negatives carrying the reversed bigram of their own
  /// marker; the rest carry another marker's bigram.
  double reversed_negatives = 0.0;
  /// Fraction of OOD examples carrying the bias class; 0.5 is the balanced
  /// split, 0.282 the imbalanced paraphrase-style variant.
  double ood_bias_class_fraction = 0.5;

  void validate() const;
  KeyValues to_key_values() const;
  static DatasetSpec from_key_values(const KeyValues& kv);
};

/// Token-id layout of the task: markers, then one agreement bigram per
/// marker, then content tokens.
struct TaskLayout {
  int markers;
  int vocab_size;

  int marker(int i) const { return token::kFirstMarker + i; }
  int agree_first(int i) const { return token::kFirstMarker + markers + 2 * i; }
  int agree_second(int i) const { return token::kFirstMarker + markers + 2 * i + 1; }
  int first_content() const { return token::kFirstMarker + 3 * markers; }
  int content_count() const { return vocab_size - first_content(); }
};

struct Splits {
  Split id_train;
  Split id_dev;
  Split ood_test;
  Split ood_train;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// ID train/dev with overlap tied to the label at strength rho; OOD splits
/// with uniformly high overlap. Deterministic in (spec, seed).
Splits generate(const DatasetSpec& spec);

/// Bias-free pair corpus (rho = 0.5) for masked-token pretraining.
Split generate_corpus(const DatasetSpec& spec, int n, std::uint64_t seed);

/// Ground-truth rule: b contains the agreement bigram of a's marker (class 1),
/// the reversed bigram (class 0 when K = 3), or neither.
int true_rule_label(const Example& ex, const DatasetSpec& spec);

/// Fraction of b's tokens that also occur in a.
double overlap_fraction(const std::vector<int>& a, const std::vector<int>& b);

std::vector<double> class_distribution(const Split& split, int classes);

std::string format_split(const Split& split);
Split parse_split(const std::string& text);
void write_split(const std::filesystem::path& path, const Split& split);
Split read_split(const std::filesystem::path& path);

}  // namespace srnet
