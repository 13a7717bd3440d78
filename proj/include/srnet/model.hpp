#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "srnet/autograd.hpp"
#include "srnet/checkpoint.hpp"
#include "srnet/data.hpp"
#include "srnet/kv.hpp"
#include "srnet/masking.hpp"

namespace srnet {

enum class Activation { gelu, relu };

struct ModelConfig {
  int layers = 2;
  int d_model = 64;
  int d_ffn = 256;
  int heads = 4;
  int vocab_size = 200;
  int max_len = 32;
  int classes = 2;
  Activation activation = Activation::gelu;
  float init_std = 0.02f;

  void validate() const;
  KeyValues to_key_values() const;
  static ModelConfig from_key_values(const KeyValues& kv);
  bool operator==(const ModelConfig&) const = default;
};

/// Packed [batch x seq] encoding of sentence pairs as [CLS] a [SEP] b [SEP].
struct Batch {
  std::size_t size = 0;
  std::size_t seq = 0;
  std::vector<int> tokens;     // size*seq, PAD beyond each length
  std::vector<int> segments;   // 0 for [CLS] a [SEP], 1 for b [SEP]
  std::vector<std::size_t> lengths;
  std::vector<int> labels;
};

Batch make_batch(std::span<const Example* const> examples, const ModelConfig& config);

/// Which leaves receive gradients in a forward pass.
enum class Trainable { none, weights, masks };

struct NamedParam {
  std::string name;
  Tensor* tensor;
  bool prunable;
  bool decay;
};

struct LayerWeights {
  Tensor w_q, b_q, w_k, b_k, w_v, b_v, w_ao, b_ao;
  Tensor ln1_gamma, ln1_beta;
  Tensor w_in, b_in, w_out, b_out;
  Tensor ln2_gamma, ln2_beta;
};

enum class SnapshotTag { pretrained, finetuned, intermediate };

/// Named copies of every trainable parameter.
struct ParameterSnapshot {
  SnapshotTag tag = SnapshotTag::intermediate;
  long step = 0;
  std::vector<std::pair<std::string, Tensor>> params;

  const Tensor& at(const std::string& name) const;
  bool same_values(const ParameterSnapshot& other) const;
};

const char* to_string(SnapshotTag tag);

/// BERT-shaped encoder: token + position + segment embeddings, post-norm
/// transformer layers, linear classifier over the first token.
class Encoder {
 public:
  Encoder(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  std::vector<NamedParam> parameters();
  std::vector<WeightRef> prunable() const;
  /// {cls.weight} followed by the six matrices of every layer.
  std::vector<std::string> prunable_names() const;
  std::size_t prunable_numel(bool count_classifier = false) const;
  Tensor* find(const std::string& name);

  /// Hidden states [batch*seq x d_model].
  Var encode(Tape& tape, const Batch& batch, MaskSet* masks, Trainable trainable);
  /// Logits [batch x classes].
  Var forward(Tape& tape, const Batch& batch, MaskSet* masks, Trainable trainable);
  /// Single-pair convenience: logits over the classes.
  Tensor logits(const std::vector<int>& tokens_a, const std::vector<int>& tokens_b, MaskSet* masks = nullptr);

  ParameterSnapshot snapshot(SnapshotTag tag, long step = 0);
  /// Bit-exact restore; throws on any name or shape mismatch.
  void restore(const ParameterSnapshot& snap);

 private:
  Var weight(Tape& tape, Tensor& w, const std::string& name, MaskSet* masks, Trainable trainable);
  Var plain(Tape& tape, Tensor& t, Trainable trainable);

  ModelConfig config_;
  Tensor tok_emb_, pos_emb_, seg_emb_, emb_ln_gamma_, emb_ln_beta_;
  std::vector<LayerWeights> layers_;
  Tensor w_cls_, b_cls_;
};

/// Class probabilities [n x classes] for a whole split, in batches.
std::vector<std::vector<float>> predict_probs(Encoder& model, const Split& split, MaskSet* masks,
                                              std::size_t batch_size = 128);
std::vector<int> predict_labels(Encoder& model, const Split& split, MaskSet* masks, std::size_t batch_size = 128);

Checkpoint to_checkpoint(const ParameterSnapshot& snap, const ModelConfig& config, const MaskSet* masks = nullptr,
                         bool with_real_masks = false);
ParameterSnapshot snapshot_from_checkpoint(const Checkpoint& ckpt);

}  // namespace srnet
