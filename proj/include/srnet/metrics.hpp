#pragma once

#include <span>
#include <string>
#include <vector>

namespace srnet {

struct MetricReport {
  double accuracy = 0.0;
  double weighted_f1 = 0.0;
  std::vector<double> precision;
  std::vector<double> recall;
  std::vector<double> f1;
  std::vector<std::size_t> support;
};

/// Accuracy and support-weighted F1 from the confusion matrix; 0/0 counts
/// as 0 for precision, recall and F1.
MetricReport compute_metrics(std::span<const int> predictions, std::span<const int> labels, int classes);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  std::size_t n = 0;
};

MeanStd mean_std(std::span<const double> values);

/// One evaluation point of a training run.
struct TrajectoryPoint {
  long step = 0;
  double sparsity = 0.0;
  double id_acc = 0.0;
  double id_f1 = 0.0;
  double ood_acc = 0.0;
  double ood_f1 = 0.0;
  double loss = 0.0;
};

enum class SelectionRule { all_steps, after_0_7_tmax };

const char* to_string(SelectionRule rule);
SelectionRule parse_selection_rule(const std::string& s);

/// Index of the trajectory point with the best ID dev accuracy among the
/// eligible ones; ties go to the earliest step. Under after_0_7_tmax only
/// steps >= 0.7 * t_max are eligible.
std::size_t select_checkpoint(std::span<const TrajectoryPoint> trajectory, SelectionRule rule, long t_max);

std::string trajectory_csv(std::span<const TrajectoryPoint> trajectory);

}  // namespace srnet
