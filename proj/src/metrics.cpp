#include "srnet/metrics.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "srnet/kv.hpp"

namespace srnet {

MetricReport compute_metrics(std::span<const int> predictions, std::span<const int> labels, int classes) {
  if (predictions.empty()) throw std::invalid_argument("compute_metrics: empty input");
  if (predictions.size() != labels.size()) throw std::invalid_argument("compute_metrics: length mismatch");
  if (classes < 1) throw std::invalid_argument("compute_metrics: need at least one class");
  const auto k = static_cast<std::size_t>(classes);
  std::vector<std::size_t> confusion(k * k, 0);  // [label][prediction]
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i], p = predictions[i];
    if (y < 0 || y >= classes || p < 0 || p >= classes) throw std::out_of_range("compute_metrics: class out of range");
    ++confusion[static_cast<std::size_t>(y) * k + static_cast<std::size_t>(p)];
  }

  MetricReport r;
  r.precision.assign(k, 0.0);
  r.recall.assign(k, 0.0);
  r.f1.assign(k, 0.0);
  r.support.assign(k, 0);
  std::size_t correct = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t predicted = 0;
    for (std::size_t y = 0; y < k; ++y) {
      r.support[c] += confusion[c * k + y];
      predicted += confusion[y * k + c];
    }
    const std::size_t tp = confusion[c * k + c];
    correct += tp;
    if (predicted) r.precision[c] = static_cast<double>(tp) / static_cast<double>(predicted);
    if (r.support[c]) r.recall[c] = static_cast<double>(tp) / static_cast<double>(r.support[c]);
    if (r.precision[c] + r.recall[c] > 0.0)
      r.f1[c] = 2.0 * r.precision[c] * r.recall[c] / (r.precision[c] + r.recall[c]);
  }
  const auto n = static_cast<double>(labels.size());
  r.accuracy = static_cast<double>(correct) / n;
  for (std::size_t c = 0; c < k; ++c) r.weighted_f1 += r.f1[c] * static_cast<double>(r.support[c]) / n;
  return r;
}

MeanStd mean_std(std::span<const double> values) {
  MeanStd out;
  out.n = values.size();
  if (values.empty()) return out;
  for (double v : values) out.mean += v;
  out.mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - out.mean) * (v - out.mean);
  out.std = std::sqrt(ss / static_cast<double>(values.size()));
  return out;
}

const char* to_string(SelectionRule rule) {
  return rule == SelectionRule::all_steps ? "all_steps" : "after_0.7_tmax";
}

SelectionRule parse_selection_rule(const std::string& s) {
  if (s == "all_steps") return SelectionRule::all_steps;
  if (s == "after_0.7_tmax") return SelectionRule::after_0_7_tmax;
  throw ConfigError("unknown selection rule `" + s + "` (expected all_steps|after_0.7_tmax)");
}

std::size_t select_checkpoint(std::span<const TrajectoryPoint> trajectory, SelectionRule rule, long t_max) {
  if (trajectory.empty()) throw std::invalid_argument("select_checkpoint: empty trajectory");
  // 10 * step >= 7 * t_max keeps the cutoff exact in integers.
  auto eligible = [&](const TrajectoryPoint& p) {
    return rule == SelectionRule::all_steps || 10 * p.step >= 7 * t_max;
  };
  std::size_t best = trajectory.size();
  for (std::size_t i = 0; i < trajectory.size(); ++i) {
    if (!eligible(trajectory[i])) continue;
    if (best == trajectory.size() || trajectory[i].id_acc > trajectory[best].id_acc ||
        (trajectory[i].id_acc == trajectory[best].id_acc && trajectory[i].step < trajectory[best].step))
      best = i;
  }
  // Nothing past the cutoff: fall back to the latest point.
  if (best == trajectory.size()) {
    best = 0;
    for (std::size_t i = 1; i < trajectory.size(); ++i)
      if (trajectory[i].step > trajectory[best].step) best = i;
  }
  return best;
}

std::string trajectory_csv(std::span<const TrajectoryPoint> trajectory) {
  std::ostringstream out;
  out << "step,sparsity,id_acc,id_f1,ood_acc,ood_f1,loss\n";
  for (const TrajectoryPoint& p : trajectory)
    out << p.step << ',' << format_number(p.sparsity) << ',' << format_number(p.id_acc) << ','
        << format_number(p.id_f1) << ',' << format_number(p.ood_acc) << ',' << format_number(p.ood_f1) << ','
        << format_number(p.loss) << '\n';
  return out.str();
}

}  // namespace srnet
