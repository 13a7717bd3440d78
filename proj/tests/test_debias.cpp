#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "gradcheck.hpp"
#include "oracles.hpp"
#include "srnet/debias.hpp"

using namespace srnet;
using srnet::testing::gradcheck;
using srnet::testing::random_tensor;

using oracles::random_aux;
using oracles::random_simplex;
using oracles::softmax;

TEST_CASE("standard loss values") {
  const std::vector<double> onehot = {0.0, 1.0, 0.0};
  CHECK(loss_std(onehot, 1) == 0.0);
  const std::vector<double> uniform(3, 1.0 / 3.0);
  CHECK(loss_std(uniform, 2) == doctest::Approx(1.0986).epsilon(1e-4));
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const std::vector<double> p = random_simplex(4, rng);
    const int y = static_cast<int>(uniform_index(rng, 4));
    CHECK(std::fabs(loss_std(p, y) + std::log(p[static_cast<std::size_t>(y)])) < 1e-7);
  }
  // zero probability is clamped, not infinite
  CHECK(std::isfinite(loss_std(onehot, 0)));
  CHECK_THROWS(loss_std(onehot, 3));
}

TEST_CASE("product of experts with a uniform expert is the standard loss") {
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    const std::size_t k = 2 + uniform_index(rng, 3);
    const std::vector<double> p = random_simplex(k, rng), uniform(k, 1.0 / static_cast<double>(k));
    const int y = static_cast<int>(uniform_index(rng, k));
    CHECK(std::fabs(loss_poe(p, uniform, y) - loss_std(p, y)) < 1e-6);
  }
}

TEST_CASE("product of experts normalized-product value") {
  const std::vector<double> pm = {0.8, 0.2}, pb = {0.9, 0.1};
  CHECK(loss_poe(pm, pb, 0) == doctest::Approx(-std::log(0.72 / 0.74)).epsilon(1e-9));
  CHECK(loss_poe(pm, pb, 0) == doctest::Approx(0.0274).epsilon(1e-2));
}

TEST_CASE("confident bias expert shrinks the main-model gradient") {
  // d loss / d logits by central differences on a 2-class instance.
  auto grad_norm = [](auto loss_of_p) {
    const double h = 1e-6;
    double g2 = 0.0;
    for (int j = 0; j < 2; ++j) {
      std::vector<double> up = {0.3, -0.2}, down = up;
      up[static_cast<std::size_t>(j)] += h;
      down[static_cast<std::size_t>(j)] -= h;
      const double g = (loss_of_p(softmax(up)) - loss_of_p(softmax(down))) / (2 * h);
      g2 += g * g;
    }
    return std::sqrt(g2);
  };
  const double g_std = grad_norm([](const std::vector<double>& p) { return loss_std(p, 0); });
  double prev = g_std;
  for (double beta : {0.6, 0.9, 0.99}) {
    const std::vector<double> pb = {beta, 1.0 - beta};
    const double g = grad_norm([&](const std::vector<double>& p) { return loss_poe(p, pb, 0); });
    CHECK(g < prev);
    prev = g;
  }
}

TEST_CASE("reweighting is linear in one minus beta") {
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const std::vector<double> p = random_simplex(3, rng);
    const int y = static_cast<int>(uniform_index(rng, 3));
    const double base = loss_std(p, y);
    CHECK(loss_reweight(p, y, 1.0) == 0.0);
    CHECK(loss_reweight(p, y, 0.0) == base);
    CHECK(std::fabs(loss_reweight(p, y, 0.5) - 0.5 * base) < 1e-12);
    const double b = uniform01(rng);
    CHECK(std::fabs(loss_reweight(p, y, b) - (1.0 - b) * base) < 1e-6);
  }
  const std::vector<double> half = {0.5, 0.5};
  CHECK_THROWS(loss_reweight(half, 0, 1.5));
}

TEST_CASE("confidence regularization scaling") {
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    const std::vector<double> pt = random_simplex(3, rng);
    const std::vector<double> s0 = confreg_scale(pt, 0.0);
    for (std::size_t j = 0; j < 3; ++j) CHECK(std::fabs(s0[j] - pt[j]) < 1e-9);
    for (double v : confreg_scale(pt, 1.0)) CHECK(v == doctest::Approx(1.0 / 3.0));
    const std::vector<double> s = confreg_scale(pt, uniform01(rng));
    double total = 0.0;
    for (double v : s) {
      CHECK(v >= 0.0);
      total += v;
    }
    CHECK(std::fabs(total - 1.0) < 1e-6);
  }
  const std::vector<double> pm = {0.6, 0.4}, pt = {0.9, 0.1};
  CHECK(loss_confreg(pm, pt, 0.0) == doctest::Approx(-(0.9 * std::log(0.6) + 0.1 * std::log(0.4))));
}

TEST_CASE("tape losses equal the per-example formulas averaged over the batch") {
  Rng rng(5);
  const std::size_t n = 6, k = 3;
  const DebiasAux aux = random_aux(n, k, rng);
  const std::vector<int> labels = {0, 2, 1, 1, 0, 2};
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  Tensor logits = random_tensor({n, k}, rng, 2.0);
  for (LossKind kind : {LossKind::std, LossKind::poe, LossKind::reweight, LossKind::confreg}) {
    Tape tape;
    const double got = training_loss(tape.constant(logits), kind, labels, rows, aux).value().item();
    double ref = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      std::vector<double> z(k);
      for (std::size_t j = 0; j < k; ++j) z[j] = logits.at(r, j);
      const std::vector<double> p = softmax(z);
      const std::vector<double> pb(aux.p_b[r].begin(), aux.p_b[r].end()), pt(aux.p_t[r].begin(), aux.p_t[r].end());
      switch (kind) {
        case LossKind::std: ref += loss_std(p, labels[r]); break;
        case LossKind::poe: ref += loss_poe(p, pb, labels[r]); break;
        case LossKind::reweight: ref += loss_reweight(p, labels[r], aux.beta[r]); break;
        case LossKind::confreg: ref += loss_confreg(p, pt, aux.beta[r]); break;
      }
    }
    INFO(to_string(kind));
    CHECK(got == doctest::Approx(ref / static_cast<double>(n)).epsilon(1e-5));
  }
}

TEST_CASE("tape losses pass finite-difference checks") {
  for (LossKind kind : {LossKind::std, LossKind::poe, LossKind::reweight, LossKind::confreg}) {
    const double worst = oracles::worst_loss_gradient_error(kind, 20);
    INFO(to_string(kind) << " worst " << worst);
    CHECK(worst < 1e-3);
  }
}

TEST_CASE("overlap features") {
  // Orthonormal rows make cosine similarity an identity test.
  std::vector<std::vector<double>> rows(8, std::vector<double>(8, 0.0));
  for (std::size_t i = 0; i < 8; ++i) rows[i][i] = 1.0;
  const EmbeddingTable emb(rows);

  const std::vector<int> a = {1, 2, 3, 4};
  auto f = extract_overlap_features(a, a, emb);
  CHECK(f == std::array<double, 5>{1, 1, 1, 1, 1});

  f = extract_overlap_features({1, 2}, {5, 6, 7}, emb);
  CHECK(f == std::array<double, 5>{0, 0, 0, 0, 0});

  const std::vector<int> rev(a.rbegin(), a.rend());
  f = extract_overlap_features(a, rev, emb);
  CHECK(f[0] == 1.0);
  CHECK(f[1] == 0.0);
  CHECK(f[2] == 1.0);
  CHECK(f[3] == doctest::Approx(1.0));
  CHECK(f[4] == doctest::Approx(1.0));

  f = extract_overlap_features({1, 2, 3, 4}, {2, 3, 7}, emb);
  CHECK(f[0] == 0.0);
  CHECK(f[2] == doctest::Approx(2.0 / 3.0));
  CHECK(f[4] == doctest::Approx(0.0));
  CHECK_THROWS(extract_overlap_features({}, {1}, emb));
}

TEST_CASE("contiguity feature agrees with a brute-force subsequence search") {
  Rng rng(7);
  const EmbeddingTable emb(12, 6, 1);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<int> a(2 + uniform_index(rng, 6)), b(1 + uniform_index(rng, 4));
    for (int& t : a) t = static_cast<int>(uniform_index(rng, 4));
    for (int& t : b) t = static_cast<int>(uniform_index(rng, 4));
    bool found = false;
    for (std::size_t s = 0; s + b.size() <= a.size() && !found; ++s) {
      bool all = true;
      for (std::size_t j = 0; j < b.size(); ++j) all = all && a[s + j] == b[j];
      found = all;
    }
    CHECK(extract_overlap_features(a, b, emb)[1] == (found ? 1.0 : 0.0));
  }
}

TEST_CASE("claim features max-pool the embeddings") {
  const EmbeddingTable emb(std::vector<std::vector<double>>{{0.1, 0.2}, {0.3, 0.4}, {0.5, -1.0}});
  CHECK(extract_claim_features({2}, emb) == std::vector<double>{0.5, -1.0});
  CHECK(extract_claim_features({0, 1}, emb) == std::vector<double>{0.3, 0.4});
  CHECK(extract_claim_features({1, 2}, emb) == std::vector<double>{0.5, 0.4});
  CHECK_THROWS(extract_claim_features({}, emb));
}

TEST_CASE("bias model on a separable feature") {
  Rng rng(8);
  std::vector<std::vector<double>> x, x_test;
  std::vector<int> y, y_test;
  for (int i = 0; i < 600; ++i) {
    const int label = static_cast<int>(uniform_index(rng, 2));
    std::vector<double> f = {uniform01(rng), uniform01(rng), label ? 0.8 + 0.2 * uniform01(rng) : 0.2 * uniform01(rng),
                             uniform01(rng), uniform01(rng)};
    (i < 400 ? x : x_test).push_back(f);
    (i < 400 ? y : y_test).push_back(label);
  }
  const BiasModel m = BiasModel::train(x, y, 2, {});
  Split test(x_test.size());
  for (std::size_t i = 0; i < test.size(); ++i) test[i].label = y_test[i];
  CHECK(bias_accuracy(m, test, x_test) > 0.95);
  for (const auto& f : x_test) {
    const std::vector<double> p = m.probs(f);
    CHECK(std::fabs(p[0] + p[1] - 1.0) < 1e-6);
    CHECK(p[0] >= 0.0);
  }
  const DebiasAux aux = bias_degrees(m, test, x_test);
  for (std::size_t i = 0; i < test.size(); ++i) {
    CHECK(aux.beta[i] == aux.p_b[i][static_cast<std::size_t>(test[i].label)]);
    // a correctly confident example has beta at its p_b max
    if (aux.beta[i] > 0.5f) CHECK(aux.beta[i] == *std::max_element(aux.p_b[i].begin(), aux.p_b[i].end()));
  }
}

TEST_CASE("bias model is insensitive to training order") {
  Rng rng(9);
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  for (int i = 0; i < 200; ++i) {
    const int label = static_cast<int>(uniform_index(rng, 2));
    x.push_back({label + 0.7 * standard_normal(rng), uniform01(rng)});
    y.push_back(label);
  }
  std::vector<std::size_t> perm(x.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  deterministic_shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::vector<double>> xp;
  std::vector<int> yp;
  for (std::size_t i : perm) {
    xp.push_back(x[i]);
    yp.push_back(y[i]);
  }
  const BiasModel a = BiasModel::train(x, y, 2, {}), b = BiasModel::train(xp, yp, 2, {});
  for (const auto& f : x) CHECK(std::fabs(a.probs(f)[1] - b.probs(f)[1]) < 1e-6);
}

TEST_CASE("degenerate features fall back to the class prior") {
  const std::vector<std::vector<double>> x(10, std::vector<double>{0.5, 0.5});
  const std::vector<int> y = {1, 1, 1, 0, 1, 1, 1, 0, 1, 1};
  const BiasModel m = BiasModel::train(x, y, 2, {});
  CHECK(m.degenerate());
  CHECK(m.probs(x[0])[1] == doctest::Approx(0.8));
}

TEST_CASE("bias and teacher caches round-trip by id") {
  Rng rng(10);
  Split split(5);
  for (std::size_t i = 0; i < split.size(); ++i) {
    split[i].id = "train-" + std::to_string(i);
    split[i].label = static_cast<int>(i % 2);
  }
  const DebiasAux aux = random_aux(5, 2, rng);
  const auto dir = std::filesystem::temp_directory_path() / "srnet_test_cache";
  write_bias_cache(dir / "bias.csv", split, aux);
  write_teacher_cache(dir / "teacher.csv", split, aux);
  Split shuffled(split.rbegin(), split.rend());
  DebiasAux back;
  read_bias_cache(dir / "bias.csv", shuffled, back);
  read_teacher_cache(dir / "teacher.csv", shuffled, back);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(back.beta[i] == aux.beta[4 - i]);
    CHECK(back.p_b[i] == aux.p_b[4 - i]);
    CHECK(back.p_t[i] == aux.p_t[4 - i]);
  }
  Split unknown = split;
  unknown[0].id = "missing";
  CHECK_THROWS(read_bias_cache(dir / "bias.csv", unknown, back));
  std::filesystem::remove_all(dir);
}
