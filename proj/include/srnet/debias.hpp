#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "srnet/autograd.hpp"
#include "srnet/data.hpp"

namespace srnet {

/// Floor applied before every logarithm.
inline constexpr double kLogEps = 1e-12;

enum class LossKind { std, poe, reweight, confreg };

const char* to_string(LossKind kind);
LossKind parse_loss_kind(const std::string& s);

// Per-example losses over probability vectors.

double loss_std(std::span<const double> p_m, int label);
double loss_poe(std::span<const double> p_m, std::span<const double> p_b, int label);
double loss_reweight(std::span<const double> p_m, int label, double beta);
double loss_confreg(std::span<const double> p_m, std::span<const double> p_t, double beta);
/// Teacher smoothing: S_j = p_t[j]^(1-beta) / sum_k p_t[k]^(1-beta).
std::vector<double> confreg_scale(std::span<const double> p_t, double beta);

/// Per-example side information the debiasing losses consume, aligned with
/// a training split.
struct DebiasAux {
  std::vector<std::vector<float>> p_b;  // bias-model probabilities
  std::vector<float> beta;              // p_b at the gold class
  std::vector<std::vector<float>> p_t;  // teacher probabilities (confreg only)
};

/// Batch-mean training loss computed from logits on the tape. `rows` index
/// the examples of the batch inside `aux`.
Var training_loss(Var logits, LossKind kind, std::span<const int> labels, std::span<const std::size_t> rows,
                  const DebiasAux& aux);

/// Deterministic pseudo-random unit vectors, one per token id; stands in for
/// pretrained word vectors in the similarity features.
class EmbeddingTable {
 public:
  EmbeddingTable(std::size_t vocab, std::size_t dim, std::uint64_t seed);
  explicit EmbeddingTable(std::vector<std::vector<double>> rows);

  std::span<const double> row(int token) const;
  std::size_t dim() const { return dim_; }
  double cosine(int a, int b) const;

 private:
  std::size_t dim_;
  std::vector<std::vector<double>> rows_;
};

/// (all-b-in-a, b-contiguous-in-a, overlap fraction, mean max-similarity,
/// min max-similarity).
std::array<double, 5> extract_overlap_features(const std::vector<int>& a, const std::vector<int>& b,
                                               const EmbeddingTable& emb);

/// Coordinate-wise max over the embeddings of b.
std::vector<double> extract_claim_features(const std::vector<int>& b, const EmbeddingTable& emb);

enum class BiasFeatures { overlap, claim };

std::vector<std::vector<double>> bias_features(const Split& split, const EmbeddingTable& emb, BiasFeatures kind);

struct BiasTrainConfig {
  int steps = 1000;
  double lr = 0.05;
};

/// Multinomial logistic regression over spurious features.
class BiasModel {
 public:
  BiasModel() = default;
  BiasModel(std::size_t features, int classes);

  std::vector<double> probs(std::span<const double> features) const;
  int classes() const { return classes_; }
  std::size_t features() const { return features_; }
  bool degenerate() const { return degenerate_; }

  /// Full-batch Adam on cross-entropy. Identical feature rows fall back to
  /// the class prior with a warning on stderr.
  static BiasModel train(const std::vector<std::vector<double>>& x, std::span<const int> labels, int classes,
                         const BiasTrainConfig& config);

 private:
  std::size_t features_ = 0;
  int classes_ = 0;
  std::vector<double> weights_;  // features x classes
  std::vector<double> bias_;
  bool degenerate_ = false;
};

/// p_b and beta = p_b[label] for every example of a split.
DebiasAux bias_degrees(const BiasModel& model, const Split& split, const std::vector<std::vector<double>>& features);

double bias_accuracy(const BiasModel& model, const Split& split, const std::vector<std::vector<double>>& features);

/// CSV caches keyed by example id.
void write_bias_cache(const std::filesystem::path& path, const Split& split, const DebiasAux& aux);
void write_teacher_cache(const std::filesystem::path& path, const Split& split, const DebiasAux& aux);
/// Fills p_b/beta (or p_t) in `aux` for the examples of `split`, matched by id.
void read_bias_cache(const std::filesystem::path& path, const Split& split, DebiasAux& aux);
void read_teacher_cache(const std::filesystem::path& path, const Split& split, DebiasAux& aux);

}  // namespace srnet
