#include <algorithm>
#include <numeric>

#include "doctest.h"
#include "srnet/model.hpp"
#include "srnet/train.hpp"

using namespace srnet;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.layers = 1;
  c.d_model = 16;
  c.d_ffn = 32;
  c.heads = 2;
  return c;
}

DatasetSpec tiny_spec(std::uint64_t seed) {
  DatasetSpec s;
  s.seed = seed;
  s.n_train = 256;
  s.n_dev = 64;
  s.n_ood = 64;
  s.n_ood_train = 64;
  return s;
}

Tensor split_logits(Encoder& model, const Split& split, MaskSet* masks) {
  std::vector<const Example*> ptrs;
  for (const Example& ex : split) ptrs.push_back(&ex);
  const Batch b = make_batch(ptrs, model.config());
  Tape tape;
  return model.forward(tape, b, masks, Trainable::none).value().detached();
}

MaskSet random_masks(const Encoder& model, Rng& rng, double keep) {
  MaskSet masks = MaskSet::ones(model.prunable());
  for (MaskPair& p : masks.pairs())
    for (float& v : p.binary.data()) v = uniform01(rng) < keep ? 1.0f : 0.0f;
  return masks;
}

}  // namespace

TEST_CASE("batches are [CLS] a [SEP] b [SEP] with segments and padding") {
  Example a{"x", {10, 11}, {12}, 1, false}, b{"y", {20}, {21, 22, 23}, 0, true};
  const Example* ptrs[] = {&a, &b};
  const Batch batch = make_batch(ptrs, ModelConfig{});
  CHECK(batch.seq == 7);
  CHECK(batch.lengths == std::vector<std::size_t>{6, 7});
  CHECK(std::vector<int>(batch.tokens.begin(), batch.tokens.begin() + 6) ==
        std::vector<int>{token::kCls, 10, 11, token::kSep, 12, token::kSep});
  CHECK(std::vector<int>(batch.segments.begin(), batch.segments.begin() + 6) == std::vector<int>{0, 0, 0, 0, 1, 1});
  CHECK(batch.tokens[7 + 6] == token::kSep);
  CHECK(batch.tokens[6] == token::kPad);
  CHECK(batch.labels == std::vector<int>{1, 0});
}

TEST_CASE("prunable set is the classifier plus six matrices per layer") {
  Encoder model(ModelConfig{}, 1);
  const std::vector<std::string> names = model.prunable_names();
  REQUIRE(names.size() == 1 + 6 * 2);
  CHECK(names.front() == kClassifierWeight);
  std::size_t expect = 0;
  for (int l = 0; l < 2; ++l) expect += 4 * 64 * 64 + 2 * 64 * 256;
  CHECK(model.prunable_numel() == expect);
  CHECK(model.prunable_numel(true) == expect + 64 * 2);
  for (const NamedParam& p : model.parameters())
    CHECK(p.prunable == (std::find(names.begin(), names.end(), p.name) != names.end()));
  // embeddings, biases and layer norms are never prunable
  CHECK_FALSE(model.parameters().front().prunable);
}

TEST_CASE("an all-ones mask leaves the forward pass bit-identical") {
  Encoder model(tiny_config(), 2);
  const Splits sp = generate(tiny_spec(2));
  MaskSet ones = MaskSet::ones(model.prunable());
  CHECK(split_logits(model, sp.id_dev, &ones).same_values(split_logits(model, sp.id_dev, nullptr)));
}

TEST_CASE("masking equals pre-multiplying the weights") {
  Rng rng(3);
  Encoder model(tiny_config(), 3);
  const Splits sp = generate(tiny_spec(3));
  MaskSet masks = random_masks(model, rng, 0.6);
  const Tensor masked = split_logits(model, sp.id_dev, &masks);
  for (const WeightRef& w : model.prunable()) {
    const Tensor& m = masks.at(w.name).binary;
    Tensor& t = *model.find(w.name);
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] *= m[i];
  }
  CHECK(split_logits(model, sp.id_dev, nullptr).same_values(masked));
}

TEST_CASE("a zeroed classifier mask reduces the logits to the classifier bias") {
  Encoder model(tiny_config(), 4);
  *model.find("cls.bias") = Tensor({2}, {0.25f, -0.5f});
  MaskSet masks = MaskSet::ones(model.prunable());
  std::ranges::fill(masks.at(kClassifierWeight).binary.data(), 0.0f);
  const Tensor z = model.logits({10, 11, 12}, {13, 14}, &masks);
  CHECK(z[0] == 0.25f);
  CHECK(z[1] == -0.5f);
}

TEST_CASE("masks on non-prunable tensors are rejected") {
  Encoder model(tiny_config(), 5);
  MaskSet masks;
  masks.add({"emb.token", Tensor({1}), Tensor({1}), 0.5f});
  CHECK_THROWS(model.logits({10}, {11}, &masks));
}

TEST_CASE("snapshot and restore are bit-exact") {
  Encoder model(tiny_config(), 6);
  const ParameterSnapshot before = model.snapshot(SnapshotTag::pretrained);
  for (NamedParam& p : model.parameters()) std::ranges::fill(p.tensor->data(), 0.125f);
  CHECK_FALSE(model.snapshot(SnapshotTag::intermediate).same_values(before));
  model.restore(before);
  CHECK(model.snapshot(SnapshotTag::intermediate).same_values(before));

  Encoder other(ModelConfig{}, 6);
  CHECK_THROWS(other.restore(before));
}

TEST_CASE("checkpoint round-trip keeps parameters and masks") {
  Rng rng(7);
  Encoder model(tiny_config(), 7);
  MaskSet masks = random_masks(model, rng, 0.5);
  const ParameterSnapshot snap = model.snapshot(SnapshotTag::finetuned, 42);
  const Checkpoint back = decode_checkpoint(encode_checkpoint(to_checkpoint(snap, model.config(), &masks)));
  const ParameterSnapshot restored = snapshot_from_checkpoint(back);
  CHECK(restored.same_values(snap));
  CHECK(restored.tag == SnapshotTag::finetuned);
  CHECK(restored.step == 42);
  CHECK(MaskSet::from_records(back.masks).same_binary(masks));
  CHECK(ModelConfig::from_key_values(back.meta) == model.config());
}

TEST_CASE("pretraining with zero steps returns the current weights") {
  Encoder model(tiny_config(), 8);
  const ParameterSnapshot init = model.snapshot(SnapshotTag::intermediate);
  PretrainConfig pc;
  pc.steps = 0;
  const PretrainResult r = pretrain(model, tiny_spec(8), pc, 8);
  CHECK(r.snapshot.same_values(init));
  CHECK(r.snapshot.tag == SnapshotTag::pretrained);
  CHECK(r.losses.empty());
}

TEST_CASE("pretraining is deterministic and leaves the classifier untouched") {
  PretrainConfig pc;
  pc.steps = 5;
  pc.corpus_size = 200;
  Encoder a(tiny_config(), 9), b(tiny_config(), 9);
  const Tensor cls_before = a.find(kClassifierWeight)->detached();
  const PretrainResult ra = pretrain(a, tiny_spec(9), pc, 9), rb = pretrain(b, tiny_spec(9), pc, 9);
  CHECK(ra.snapshot.same_values(rb.snapshot));
  CHECK(ra.losses == rb.losses);
  CHECK(a.find(kClassifierWeight)->same_values(cls_before));
  CHECK_FALSE(ra.snapshot.at("layers.0.w_q").same_values(Encoder(tiny_config(), 9).find("layers.0.w_q")->detached()));
}

TEST_CASE("fine-tuning loss decreases on every seed") {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    const Splits sp = generate(tiny_spec(seed));
    Encoder model(tiny_config(), seed);
    AdamWConfig oc;
    oc.lr = 3e-3f;
    AdamW opt = make_optimizer(model, oc);
    BatchStream stream(sp.id_train.size(), 32, seed);
    const TrainData data{&sp.id_train, nullptr};
    std::vector<double> losses;
    for (int step = 0; step < 60; ++step) {
      opt.zero_grad();
      losses.push_back(forward_backward(model, data, stream.next(), LossKind::std, nullptr, Trainable::weights));
      opt.step();
    }
    const double first = std::accumulate(losses.begin(), losses.begin() + 10, 0.0);
    const double last = std::accumulate(losses.end() - 10, losses.end(), 0.0);
    INFO("seed " << seed);
    CHECK(last < first);
  }
}

TEST_CASE("batch stream covers every row once per epoch") {
  BatchStream s(10, 4, 1);
  CHECK(s.steps_per_epoch() == 3);
  std::vector<std::size_t> seen;
  for (int i = 0; i < 3; ++i) {
    const std::vector<std::size_t> b = s.next();
    seen.insert(seen.end(), b.begin(), b.end());
  }
  std::sort(seen.begin(), seen.end());
  std::vector<std::size_t> all(10);
  std::iota(all.begin(), all.end(), std::size_t{0});
  CHECK(seen == all);
}
