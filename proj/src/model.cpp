#include "srnet/model.hpp"

#include <algorithm>
#include <cmath>

#include "srnet/rng.hpp"

namespace srnet {

void ModelConfig::validate() const {
  if (layers <= 0 || d_model <= 0 || d_ffn <= 0 || heads <= 0 || vocab_size <= 0 || max_len <= 0 || classes <= 1)
    throw ConfigError("model config: all sizes must be positive (classes >= 2)");
  if (d_model % heads != 0) throw ConfigError("model config: d_model must be divisible by heads");
  if (vocab_size <= token::kFirstMarker) throw ConfigError("model config: vocabulary too small for special tokens");
}

KeyValues ModelConfig::to_key_values() const {
  return {{"model.layers", std::to_string(layers)},
          {"model.d_model", std::to_string(d_model)},
          {"model.d_ffn", std::to_string(d_ffn)},
          {"model.heads", std::to_string(heads)},
          {"model.vocab_size", std::to_string(vocab_size)},
          {"model.max_len", std::to_string(max_len)},
          {"model.classes", std::to_string(classes)},
          {"model.activation", activation == Activation::gelu ? "gelu" : "relu"},
          {"model.init_std", format_number(init_std)}};
}

ModelConfig ModelConfig::from_key_values(const KeyValues& kv) {
  ModelConfig c;
  auto geti = [&](const char* k, int& out) {
    if (auto it = kv.find(k); it != kv.end()) out = static_cast<int>(parse_int(k, it->second));
  };
  geti("model.layers", c.layers);
  geti("model.d_model", c.d_model);
  geti("model.d_ffn", c.d_ffn);
  geti("model.heads", c.heads);
  geti("model.vocab_size", c.vocab_size);
  geti("model.max_len", c.max_len);
  geti("model.classes", c.classes);
  if (auto it = kv.find("model.activation"); it != kv.end()) {
    if (it->second == "gelu") c.activation = Activation::gelu;
    else if (it->second == "relu") c.activation = Activation::relu;
    else throw ConfigError("model.activation must be gelu or relu");
  }
  if (auto it = kv.find("model.init_std"); it != kv.end())
    c.init_std = static_cast<float>(parse_double("model.init_std", it->second));
  return c;
}

Batch make_batch(std::span<const Example* const> examples, const ModelConfig& config) {
  if (examples.empty()) throw std::invalid_argument("make_batch: empty batch");
  Batch b;
  b.size = examples.size();
  for (const Example* ex : examples) {
    const std::size_t len = 3 + ex->tokens_a.size() + ex->tokens_b.size();
    if (len > static_cast<std::size_t>(config.max_len))
      throw std::out_of_range("example `" + ex->id + "` has length " + std::to_string(len) + " > max_len " +
                              std::to_string(config.max_len));
    b.seq = std::max(b.seq, len);
  }
  b.tokens.assign(b.size * b.seq, token::kPad);
  b.segments.assign(b.size * b.seq, 0);
  for (std::size_t i = 0; i < b.size; ++i) {
    const Example& ex = *examples[i];
    auto put = [&](std::size_t pos, int tok, int seg) {
      if (tok < 0 || tok >= config.vocab_size)
        throw std::out_of_range("example `" + ex.id + "`: token id " + std::to_string(tok) + " outside vocabulary");
      b.tokens[i * b.seq + pos] = tok;
      b.segments[i * b.seq + pos] = seg;
    };
    std::size_t p = 0;
    put(p++, token::kCls, 0);
    for (int t : ex.tokens_a) put(p++, t, 0);
    put(p++, token::kSep, 0);
    for (int t : ex.tokens_b) put(p++, t, 1);
    put(p++, token::kSep, 1);
    b.lengths.push_back(p);
    b.labels.push_back(ex.label);
  }
  return b;
}

const Tensor& ParameterSnapshot::at(const std::string& name) const {
  for (const auto& [n, t] : params)
    if (n == name) return t;
  throw std::out_of_range("snapshot has no parameter `" + name + "`");
}

bool ParameterSnapshot::same_values(const ParameterSnapshot& other) const {
  if (params.size() != other.params.size()) return false;
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].first != other.params[i].first || !params[i].second.same_values(other.params[i].second)) return false;
  return true;
}

const char* to_string(SnapshotTag tag) {
  switch (tag) {
    case SnapshotTag::pretrained: return "pretrained";
    case SnapshotTag::finetuned: return "finetuned";
    case SnapshotTag::intermediate: return "intermediate";
  }
  return "intermediate";
}

namespace {

Tensor normal_tensor(Shape shape, float stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (float& x : t.data()) x = static_cast<float>(standard_normal(rng) * stddev);
  return t;
}

}  // namespace

Encoder::Encoder(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto f = static_cast<std::size_t>(config.d_ffn);
  const float sd = config.init_std;
  tok_emb_ = normal_tensor({static_cast<std::size_t>(config.vocab_size), d}, sd, rng);
  pos_emb_ = normal_tensor({static_cast<std::size_t>(config.max_len), d}, sd, rng);
  seg_emb_ = normal_tensor({2, d}, sd, rng);
  emb_ln_gamma_ = Tensor({d}, 1.0f);
  emb_ln_beta_ = Tensor({d}, 0.0f);
  for (int l = 0; l < config.layers; ++l) {
    LayerWeights w;
    w.w_q = normal_tensor({d, d}, sd, rng);
    w.w_k = normal_tensor({d, d}, sd, rng);
    w.w_v = normal_tensor({d, d}, sd, rng);
    w.w_ao = normal_tensor({d, d}, sd, rng);
    w.w_in = normal_tensor({d, f}, sd, rng);
    w.w_out = normal_tensor({f, d}, sd, rng);
    w.b_q = w.b_k = w.b_v = w.b_ao = w.b_out = Tensor({d}, 0.0f);
    w.b_in = Tensor({f}, 0.0f);
    w.ln1_gamma = w.ln2_gamma = Tensor({d}, 1.0f);
    w.ln1_beta = w.ln2_beta = Tensor({d}, 0.0f);
    layers_.push_back(std::move(w));
  }
  w_cls_ = normal_tensor({d, static_cast<std::size_t>(config.classes)}, sd, rng);
  b_cls_ = Tensor({static_cast<std::size_t>(config.classes)}, 0.0f);
}

std::vector<NamedParam> Encoder::parameters() {
  std::vector<NamedParam> out = {{"emb.token", &tok_emb_, false, true},
                                 {"emb.position", &pos_emb_, false, true},
                                 {"emb.segment", &seg_emb_, false, true},
                                 {"emb.ln.gamma", &emb_ln_gamma_, false, false},
                                 {"emb.ln.beta", &emb_ln_beta_, false, false}};
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    LayerWeights& w = layers_[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    out.insert(out.end(), {{p + "w_q", &w.w_q, true, true},         {p + "b_q", &w.b_q, false, false},
                           {p + "w_k", &w.w_k, true, true},         {p + "b_k", &w.b_k, false, false},
                           {p + "w_v", &w.w_v, true, true},         {p + "b_v", &w.b_v, false, false},
                           {p + "w_ao", &w.w_ao, true, true},       {p + "b_ao", &w.b_ao, false, false},
                           {p + "ln1.gamma", &w.ln1_gamma, false, false}, {p + "ln1.beta", &w.ln1_beta, false, false},
                           {p + "w_in", &w.w_in, true, true},       {p + "b_in", &w.b_in, false, false},
                           {p + "w_out", &w.w_out, true, true},     {p + "b_out", &w.b_out, false, false},
                           {p + "ln2.gamma", &w.ln2_gamma, false, false}, {p + "ln2.beta", &w.ln2_beta, false, false}});
  }
  out.push_back({kClassifierWeight, &w_cls_, true, true});
  out.push_back({"cls.bias", &b_cls_, false, false});
  return out;
}

std::vector<std::string> Encoder::prunable_names() const {
  std::vector<std::string> names = {kClassifierWeight};
  for (std::size_t l = 0; l < layers_.size(); ++l)
    for (const char* m : {"w_q", "w_k", "w_v", "w_ao", "w_in", "w_out"})
      names.push_back("layers." + std::to_string(l) + "." + m);
  return names;
}

std::vector<WeightRef> Encoder::prunable() const {
  std::vector<WeightRef> out;
  auto self = const_cast<Encoder*>(this);
  for (const std::string& name : prunable_names()) out.push_back({name, self->find(name)});
  return out;
}

std::size_t Encoder::prunable_numel(bool count_classifier) const {
  std::size_t n = 0;
  for (const WeightRef& w : prunable())
    if (count_classifier || w.name != kClassifierWeight) n += w.weight->numel();
  return n;
}

Tensor* Encoder::find(const std::string& name) {
  for (const NamedParam& p : parameters())
    if (p.name == name) return p.tensor;
  return nullptr;
}

Var Encoder::plain(Tape& tape, Tensor& t, Trainable trainable) {
  return trainable == Trainable::weights ? tape.watch(t) : tape.constant(t);
}

Var Encoder::weight(Tape& tape, Tensor& w, const std::string& name, MaskSet* masks, Trainable trainable) {
  Var v = plain(tape, w, trainable);
  if (!masks) return v;
  MaskPair* m = masks->find(name);
  if (!m) return v;
  if (m->binary.shape() != w.shape()) throw ShapeError("mask for `" + name + "` does not match weight shape");
  Var mv = trainable == Trainable::masks ? tape.watch(m->binary) : tape.constant(m->binary);
  return ops::mul(v, mv);
}

Var Encoder::encode(Tape& tape, const Batch& batch, MaskSet* masks, Trainable trainable) {
  if (masks) {
    const std::vector<std::string> names = prunable_names();
    for (const MaskPair& p : masks->pairs())
      if (std::find(names.begin(), names.end(), p.owner) == names.end())
        throw std::invalid_argument("mask on `" + p.owner + "`, which is not a prunable matrix");
  }
  std::vector<int> positions(batch.size * batch.seq);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % batch.seq);
  if (batch.seq > static_cast<std::size_t>(config_.max_len)) throw std::out_of_range("batch longer than max_len");

  Var x = ops::add(ops::add(ops::embedding_lookup(plain(tape, tok_emb_, trainable), batch.tokens),
                            ops::embedding_lookup(plain(tape, pos_emb_, trainable), positions)),
                   ops::embedding_lookup(plain(tape, seg_emb_, trainable), batch.segments));
  x = ops::layer_norm(x, plain(tape, emb_ln_gamma_, trainable), plain(tape, emb_ln_beta_, trainable));

  for (std::size_t l = 0; l < layers_.size(); ++l) {
    LayerWeights& w = layers_[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    auto dense = [&](Var in, Tensor& wt, const char* wname, Tensor& bias) {
      return ops::add_row(ops::matmul(in, weight(tape, wt, p + wname, masks, trainable)), plain(tape, bias, trainable));
    };
    Var q = dense(x, w.w_q, "w_q", w.b_q);
    Var k = dense(x, w.w_k, "w_k", w.b_k);
    Var v = dense(x, w.w_v, "w_v", w.b_v);
    Var ctx = ops::attention(q, k, v, batch.size, batch.seq, static_cast<std::size_t>(config_.heads), batch.lengths);
    Var h = ops::layer_norm(ops::add(x, dense(ctx, w.w_ao, "w_ao", w.b_ao)), plain(tape, w.ln1_gamma, trainable),
                            plain(tape, w.ln1_beta, trainable));
    Var inner = dense(h, w.w_in, "w_in", w.b_in);
    inner = config_.activation == Activation::gelu ? ops::gelu(inner) : ops::relu(inner);
    x = ops::layer_norm(ops::add(h, dense(inner, w.w_out, "w_out", w.b_out)), plain(tape, w.ln2_gamma, trainable),
                        plain(tape, w.ln2_beta, trainable));
  }
  return x;
}

Var Encoder::forward(Tape& tape, const Batch& batch, MaskSet* masks, Trainable trainable) {
  Var hidden = encode(tape, batch, masks, trainable);
  std::vector<std::size_t> first(batch.size);
  for (std::size_t b = 0; b < batch.size; ++b) first[b] = b * batch.seq;
  Var pooled = ops::select_rows(hidden, first);
  return ops::add_row(ops::matmul(pooled, weight(tape, w_cls_, kClassifierWeight, masks, trainable)),
                      plain(tape, b_cls_, trainable));
}

Tensor Encoder::logits(const std::vector<int>& tokens_a, const std::vector<int>& tokens_b, MaskSet* masks) {
  Example ex{"single", tokens_a, tokens_b, 0, false};
  const Example* ptr = &ex;
  const Batch b = make_batch(std::span<const Example* const>(&ptr, 1), config_);
  Tape tape;
  const Tensor& out = forward(tape, b, masks, Trainable::none).value();
  return Tensor({static_cast<std::size_t>(config_.classes)}, std::vector<float>(out.data().begin(), out.data().end()));
}

ParameterSnapshot Encoder::snapshot(SnapshotTag tag, long step) {
  ParameterSnapshot s{tag, step, {}};
  for (const NamedParam& p : parameters()) s.params.emplace_back(p.name, p.tensor->detached());
  return s;
}

void Encoder::restore(const ParameterSnapshot& snap) {
  std::vector<NamedParam> params = parameters();
  if (params.size() != snap.params.size())
    throw ShapeError("snapshot has " + std::to_string(snap.params.size()) + " parameters, model has " +
                     std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != snap.params[i].first) throw ShapeError("snapshot parameter `" + snap.params[i].first +
                                                                 "` does not match `" + params[i].name + "`");
    if (params[i].tensor->shape() != snap.params[i].second.shape())
      throw ShapeError("snapshot parameter `" + params[i].name + "` has shape " +
                       shape_str(snap.params[i].second.shape()) + ", model expects " +
                       shape_str(params[i].tensor->shape()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& src = snap.params[i].second;
    std::copy(src.data().begin(), src.data().end(), params[i].tensor->data().begin());
    params[i].tensor->drop_grad();
  }
}

std::vector<std::vector<float>> predict_probs(Encoder& model, const Split& split, MaskSet* masks,
                                              std::size_t batch_size) {
  std::vector<std::vector<float>> out;
  out.reserve(split.size());
  std::vector<const Example*> ptrs;
  for (std::size_t start = 0; start < split.size(); start += batch_size) {
    ptrs.clear();
    for (std::size_t i = start; i < std::min(split.size(), start + batch_size); ++i) ptrs.push_back(&split[i]);
    const Batch b = make_batch(ptrs, model.config());
    Tape tape;
    const Tensor& probs = ops::softmax(model.forward(tape, b, masks, Trainable::none), 1).value();
    for (std::size_t r = 0; r < probs.rows(); ++r)
      out.emplace_back(probs.ptr() + r * probs.cols(), probs.ptr() + (r + 1) * probs.cols());
  }
  return out;
}

std::vector<int> predict_labels(Encoder& model, const Split& split, MaskSet* masks, std::size_t batch_size) {
  std::vector<int> out;
  for (const auto& p : predict_probs(model, split, masks, batch_size))
    out.push_back(static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()));
  return out;
}

Checkpoint to_checkpoint(const ParameterSnapshot& snap, const ModelConfig& config, const MaskSet* masks,
                         bool with_real_masks) {
  Checkpoint c;
  c.params = snap.params;
  if (masks) c.masks = masks->to_records(with_real_masks);
  c.meta = config.to_key_values();
  c.meta["snapshot.tag"] = to_string(snap.tag);
  c.meta["snapshot.step"] = std::to_string(snap.step);
  return c;
}

ParameterSnapshot snapshot_from_checkpoint(const Checkpoint& ckpt) {
  ParameterSnapshot s;
  s.params = ckpt.params;
  if (auto it = ckpt.meta.find("snapshot.tag"); it != ckpt.meta.end()) {
    if (it->second == "pretrained") s.tag = SnapshotTag::pretrained;
    else if (it->second == "finetuned") s.tag = SnapshotTag::finetuned;
  }
  if (auto it = ckpt.meta.find("snapshot.step"); it != ckpt.meta.end())
    s.step = static_cast<long>(parse_int("snapshot.step", it->second));
  return s;
}

}  // namespace srnet
