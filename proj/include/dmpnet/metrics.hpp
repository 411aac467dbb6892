#pragma once

// Evaluation measures for saliency maps against binary ground truth: mean
// absolute error, maximum F-measure over a 256-threshold sweep, structure
// measure, and maximum enhanced-alignment measure. Per-image scores average
// into a directory-level report.

#include <string>
#include <vector>

#include "dmpnet/tensor.hpp"

namespace dmpnet {

inline constexpr int kThresholdCount = 256;

struct MetricsReport {
    double mae = 0, max_f = 0, s_measure = 0, max_e = 0;
    std::vector<std::pair<double, double>> pr_curve;  // (precision, recall) per threshold
    std::vector<double> thresholds;
};

double mae(const TensorF& pred, const TensorF& gt);
double f_measure_max(const TensorF& pred, const TensorF& gt, double beta2 = 0.3,
                     std::vector<std::pair<double, double>>* pr_curve = nullptr);
double s_measure(const TensorF& pred, const TensorF& gt, double alpha = 0.5);
double e_measure_max(const TensorF& pred, const TensorF& gt);

MetricsReport evaluate_pair(const TensorF& pred, const TensorF& gt);
MetricsReport evaluate_dir(const std::string& pred_dir, const std::string& gt_dir);

std::string format_report(const MetricsReport& report);            // aligned text table
void write_report(const std::string& path, const MetricsReport&);  // metric,value lines

}  // namespace dmpnet
