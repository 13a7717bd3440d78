#include "srnet/debias.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "srnet/checkpoint.hpp"
#include "srnet/kv.hpp"
#include "srnet/rng.hpp"

namespace srnet {

const char* to_string(LossKind kind) {
  switch (kind) {
    case LossKind::std: return "std";
    case LossKind::poe: return "poe";
    case LossKind::reweight: return "reweight";
    case LossKind::confreg: return "confreg";
  }
  return "?";
}

LossKind parse_loss_kind(const std::string& s) {
  if (s == "std") return LossKind::std;
  if (s == "poe") return LossKind::poe;
  if (s == "reweight") return LossKind::reweight;
  if (s == "confreg") return LossKind::confreg;
  throw ConfigError("unknown loss `" + s + "` (expected std|poe|reweight|confreg)");
}

namespace {

double safe_log(double p) { return std::log(std::max(p, kLogEps)); }

void check_label(std::size_t k, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= k) throw std::out_of_range("label outside the probability vector");
}

void check_beta(double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("beta must lie in [0, 1]");
}

}  // namespace

double loss_std(std::span<const double> p_m, int label) {
  check_label(p_m.size(), label);
  return -safe_log(p_m[static_cast<std::size_t>(label)]);
}

double loss_poe(std::span<const double> p_m, std::span<const double> p_b, int label) {
  if (p_m.size() != p_b.size()) throw std::invalid_argument("loss_poe: size mismatch");
  check_label(p_m.size(), label);
  std::vector<double> z(p_m.size());
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < z.size(); ++j) {
    z[j] = safe_log(p_m[j]) + safe_log(p_b[j]);
    top = std::max(top, z[j]);
  }
  double norm = 0.0;
  for (double v : z) norm += std::exp(v - top);
  return -(z[static_cast<std::size_t>(label)] - top - std::log(norm));
}

double loss_reweight(std::span<const double> p_m, int label, double beta) {
  check_beta(beta);
  return (1.0 - beta) * loss_std(p_m, label);
}

std::vector<double> confreg_scale(std::span<const double> p_t, double beta) {
  check_beta(beta);
  std::vector<double> s(p_t.size());
  double total = 0.0;
  for (std::size_t j = 0; j < s.size(); ++j) {
    s[j] = std::pow(std::max(p_t[j], kLogEps), 1.0 - beta);
    total += s[j];
  }
  for (double& v : s) v /= total;
  return s;
}

double loss_confreg(std::span<const double> p_m, std::span<const double> p_t, double beta) {
  if (p_m.size() != p_t.size()) throw std::invalid_argument("loss_confreg: size mismatch");
  const std::vector<double> s = confreg_scale(p_t, beta);
  double loss = 0.0;
  for (std::size_t j = 0; j < s.size(); ++j) loss -= s[j] * safe_log(p_m[j]);
  return loss;
}

Var training_loss(Var logits, LossKind kind, std::span<const int> labels, std::span<const std::size_t> rows,
                  const DebiasAux& aux) {
  const Tensor& z = logits.value();
  const std::size_t n = z.rows(), k = z.cols();
  if (labels.size() != n || (kind != LossKind::std && rows.size() != n))
    throw ShapeError("training_loss: batch size mismatch");
  if (kind == LossKind::std) return ops::cross_entropy_from_logits(logits, labels);

  Tape& tape = *logits.tape;
  Var log_p = ops::log_softmax(logits, 1);
  Tensor weights({n, k});
  auto beta_of = [&](std::size_t r) -> double {
    if (rows[r] >= aux.beta.size()) throw std::out_of_range("training_loss: missing bias degree");
    return aux.beta[rows[r]];
  };

  switch (kind) {
    case LossKind::poe: {
      Tensor log_pb({n, k});
      for (std::size_t r = 0; r < n; ++r) {
        if (rows[r] >= aux.p_b.size() || aux.p_b[rows[r]].size() != k)
          throw std::out_of_range("training_loss: missing bias probabilities");
        for (std::size_t j = 0; j < k; ++j) log_pb.at(r, j) = static_cast<float>(safe_log(aux.p_b[rows[r]][j]));
        weights.at(r, static_cast<std::size_t>(labels[r])) = 1.0f;
      }
      Var combined = ops::log_softmax(ops::add(log_p, tape.constant(std::move(log_pb))), 1);
      return ops::weighted_nll(combined, weights);
    }
    case LossKind::reweight:
      for (std::size_t r = 0; r < n; ++r)
        weights.at(r, static_cast<std::size_t>(labels[r])) = static_cast<float>(1.0 - beta_of(r));
      return ops::weighted_nll(log_p, weights);
    case LossKind::confreg:
      for (std::size_t r = 0; r < n; ++r) {
        if (rows[r] >= aux.p_t.size() || aux.p_t[rows[r]].size() != k)
          throw std::out_of_range("training_loss: missing teacher probabilities");
        std::vector<double> pt(aux.p_t[rows[r]].begin(), aux.p_t[rows[r]].end());
        const std::vector<double> s = confreg_scale(pt, beta_of(r));
        for (std::size_t j = 0; j < k; ++j) weights.at(r, j) = static_cast<float>(s[j]);
      }
      return ops::weighted_nll(log_p, weights);
    case LossKind::std: break;
  }
  throw std::logic_error("unreachable");
}

EmbeddingTable::EmbeddingTable(std::size_t vocab, std::size_t dim, std::uint64_t seed) : dim_(dim) {
  if (vocab == 0 || dim == 0) throw std::invalid_argument("embedding table must be non-empty");
  Rng rng(seed);
  rows_.assign(vocab, std::vector<double>(dim));
  for (auto& row : rows_) {
    double norm = 0.0;
    for (double& v : row) {
      v = standard_normal(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (double& v : row) v /= norm;
  }
}

EmbeddingTable::EmbeddingTable(std::vector<std::vector<double>> rows) : dim_(0), rows_(std::move(rows)) {
  if (rows_.empty() || rows_[0].empty()) throw std::invalid_argument("embedding table must be non-empty");
  dim_ = rows_[0].size();
  for (const auto& r : rows_)
    if (r.size() != dim_) throw ShapeError("embedding rows differ in length");
}

std::span<const double> EmbeddingTable::row(int token) const {
  if (token < 0 || static_cast<std::size_t>(token) >= rows_.size()) throw std::out_of_range("token outside embedding table");
  return rows_[static_cast<std::size_t>(token)];
}

double EmbeddingTable::cosine(int a, int b) const {
  auto x = row(a), y = row(b);
  double dot = 0.0, nx = 0.0, ny = 0.0;
  for (std::size_t i = 0; i < dim_; ++i) {
    dot += x[i] * y[i];
    nx += x[i] * x[i];
    ny += y[i] * y[i];
  }
  if (nx == 0.0 || ny == 0.0) return 0.0;
  return dot / std::sqrt(nx * ny);
}

std::array<double, 5> extract_overlap_features(const std::vector<int>& a, const std::vector<int>& b,
                                               const EmbeddingTable& emb) {
  if (a.empty() || b.empty()) throw std::invalid_argument("extract_overlap_features: empty sequence");
  const std::set<int> in_a(a.begin(), a.end());
  std::size_t shared = 0;
  for (int t : b) shared += in_a.count(t);

  bool contiguous = false;
  if (b.size() <= a.size())
    contiguous = std::search(a.begin(), a.end(), b.begin(), b.end()) != a.end();

  double sum_max = 0.0, min_max = std::numeric_limits<double>::infinity();
  for (int tb : b) {
    double best = -std::numeric_limits<double>::infinity();
    for (int ta : a) best = std::max(best, emb.cosine(ta, tb));
    sum_max += best;
    min_max = std::min(min_max, best);
  }
  return {shared == b.size() ? 1.0 : 0.0, contiguous ? 1.0 : 0.0,
          static_cast<double>(shared) / static_cast<double>(b.size()), sum_max / static_cast<double>(b.size()),
          min_max};
}

std::vector<double> extract_claim_features(const std::vector<int>& b, const EmbeddingTable& emb) {
  if (b.empty()) throw std::invalid_argument("extract_claim_features: empty sequence");
  std::vector<double> out(emb.dim(), -std::numeric_limits<double>::infinity());
  for (int t : b) {
    auto r = emb.row(t);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], r[i]);
  }
  return out;
}

std::vector<std::vector<double>> bias_features(const Split& split, const EmbeddingTable& emb, BiasFeatures kind) {
  std::vector<std::vector<double>> out;
  out.reserve(split.size());
  for (const Example& ex : split) {
    if (kind == BiasFeatures::overlap) {
      const auto f = extract_overlap_features(ex.tokens_a, ex.tokens_b, emb);
      out.emplace_back(f.begin(), f.end());
    } else {
      out.push_back(extract_claim_features(ex.tokens_b, emb));
    }
  }
  return out;
}

BiasModel::BiasModel(std::size_t features, int classes)
    : features_(features),
      classes_(classes),
      weights_(features * static_cast<std::size_t>(classes), 0.0),
      bias_(static_cast<std::size_t>(classes), 0.0) {
  if (classes < 2) throw std::invalid_argument("bias model needs at least two classes");
}

std::vector<double> BiasModel::probs(std::span<const double> x) const {
  if (x.size() != features_) throw ShapeError("bias model: feature length mismatch");
  const auto k = static_cast<std::size_t>(classes_);
  std::vector<double> z(bias_);
  for (std::size_t f = 0; f < features_; ++f)
    for (std::size_t j = 0; j < k; ++j) z[j] += x[f] * weights_[f * k + j];
  const double top = *std::max_element(z.begin(), z.end());
  double norm = 0.0;
  for (double& v : z) {
    v = std::exp(v - top);
    norm += v;
  }
  for (double& v : z) v /= norm;
  return z;
}

BiasModel BiasModel::train(const std::vector<std::vector<double>>& x, std::span<const int> labels, int classes,
                           const BiasTrainConfig& config) {
  if (x.empty() || x.size() != labels.size()) throw std::invalid_argument("bias model: need one label per feature row");
  const std::size_t nf = x[0].size();
  for (const auto& row : x)
    if (row.size() != nf) throw ShapeError("bias model: ragged feature rows");
  const auto k = static_cast<std::size_t>(classes);
  const auto n = static_cast<double>(x.size());
  BiasModel model(nf, classes);

  std::vector<double> prior(k, 0.0);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) throw std::out_of_range("bias model: label out of range");
    prior[static_cast<std::size_t>(y)] += 1.0 / n;
  }

  const bool identical = std::all_of(x.begin(), x.end(), [&](const auto& row) { return row == x[0]; });
  if (identical) {
    std::cerr << "warning: bias features are identical for every example; falling back to the class prior\n";
    for (std::size_t j = 0; j < k; ++j) model.bias_[j] = std::log(std::max(prior[j], kLogEps));
    model.degenerate_ = true;
    return model;
  }

  // Full-batch Adam over [weights | bias].
  const std::size_t np = nf * k + k;
  std::vector<double> m(np, 0.0), v(np, 0.0), g(np);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int step = 1; step <= config.steps; ++step) {
    std::fill(g.begin(), g.end(), 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
      std::vector<double> p = model.probs(x[i]);
      p[static_cast<std::size_t>(labels[i])] -= 1.0;
      for (std::size_t f = 0; f < nf; ++f)
        for (std::size_t j = 0; j < k; ++j) g[f * k + j] += x[i][f] * p[j] / n;
      for (std::size_t j = 0; j < k; ++j) g[nf * k + j] += p[j] / n;
    }
    const double c1 = 1.0 - std::pow(b1, step), c2 = 1.0 - std::pow(b2, step);
    for (std::size_t q = 0; q < np; ++q) {
      m[q] = b1 * m[q] + (1.0 - b1) * g[q];
      v[q] = b2 * v[q] + (1.0 - b2) * g[q] * g[q];
      const double delta = config.lr * (m[q] / c1) / (std::sqrt(v[q] / c2) + eps);
      if (q < nf * k)
        model.weights_[q] -= delta;
      else
        model.bias_[q - nf * k] -= delta;
    }
  }
  return model;
}

DebiasAux bias_degrees(const BiasModel& model, const Split& split, const std::vector<std::vector<double>>& features) {
  if (features.size() != split.size()) throw ShapeError("bias_degrees: one feature row per example required");
  DebiasAux aux;
  aux.p_b.reserve(split.size());
  aux.beta.reserve(split.size());
  for (std::size_t i = 0; i < split.size(); ++i) {
    const std::vector<double> p = model.probs(features[i]);
    const int y = split[i].label;
    if (y < 0 || y >= model.classes()) throw std::out_of_range("bias_degrees: label out of range");
    aux.p_b.emplace_back(p.begin(), p.end());
    aux.beta.push_back(static_cast<float>(p[static_cast<std::size_t>(y)]));
  }
  return aux;
}

double bias_accuracy(const BiasModel& model, const Split& split, const std::vector<std::vector<double>>& features) {
  if (split.empty() || features.size() != split.size()) throw ShapeError("bias_accuracy: size mismatch");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < split.size(); ++i) {
    const std::vector<double> p = model.probs(features[i]);
    const auto pred = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
    correct += pred == split[i].label;
  }
  return static_cast<double>(correct) / static_cast<double>(split.size());
}

namespace {

void write_prob_csv(const std::filesystem::path& path, const Split& split, const std::vector<std::vector<float>>& probs,
                    const std::vector<float>* beta, const std::string& prefix) {
  if (probs.size() != split.size() || (beta && beta->size() != split.size()))
    throw ShapeError("cache: one row per example required");
  std::ostringstream out;
  out << "id";
  if (beta) out << ",beta";
  const std::size_t k = probs.empty() ? 0 : probs[0].size();
  for (std::size_t j = 0; j < k; ++j) out << ',' << prefix << j;
  out << '\n';
  for (std::size_t i = 0; i < split.size(); ++i) {
    out << split[i].id;
    if (beta) out << ',' << format_number((*beta)[i]);
    for (float p : probs[i]) out << ',' << format_number(p);
    out << '\n';
  }
  write_text_file(path, out.str());
}

// Returns rows keyed by id; each row is the numeric columns after the id.
std::map<std::string, std::vector<float>> read_prob_csv(const std::filesystem::path& path) {
  std::istringstream in(read_text_file(path));
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty cache");
  std::map<std::string, std::vector<float>> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string id, cell;
    std::getline(fields, id, ',');
    std::vector<float> values;
    while (std::getline(fields, cell, ','))
      values.push_back(static_cast<float>(parse_double(path.string() + ":" + std::to_string(lineno), cell)));
    if (!rows.emplace(id, std::move(values)).second) throw FormatError(path.string() + ": duplicate id " + id);
  }
  return rows;
}

const std::vector<float>& lookup(const std::map<std::string, std::vector<float>>& rows, const std::string& id,
                                 const std::filesystem::path& path) {
  auto it = rows.find(id);
  if (it == rows.end()) throw FormatError(path.string() + ": no entry for example " + id);
  return it->second;
}

}  // namespace

void write_bias_cache(const std::filesystem::path& path, const Split& split, const DebiasAux& aux) {
  write_prob_csv(path, split, aux.p_b, &aux.beta, "p_b_");
}

void write_teacher_cache(const std::filesystem::path& path, const Split& split, const DebiasAux& aux) {
  write_prob_csv(path, split, aux.p_t, nullptr, "p_t_");
}

void read_bias_cache(const std::filesystem::path& path, const Split& split, DebiasAux& aux) {
  const auto rows = read_prob_csv(path);
  aux.p_b.clear();
  aux.beta.clear();
  for (const Example& ex : split) {
    const std::vector<float>& r = lookup(rows, ex.id, path);
    if (r.size() < 3) throw FormatError(path.string() + ": short row for " + ex.id);
    aux.beta.push_back(r[0]);
    aux.p_b.emplace_back(r.begin() + 1, r.end());
  }
}

void read_teacher_cache(const std::filesystem::path& path, const Split& split, DebiasAux& aux) {
  const auto rows = read_prob_csv(path);
  aux.p_t.clear();
  for (const Example& ex : split) aux.p_t.push_back(lookup(rows, ex.id, path));
}

}  // namespace srnet
