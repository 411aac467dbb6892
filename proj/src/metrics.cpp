#include "dmpnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dmpnet/common.hpp"
#include "dmpnet/netpbm.hpp"

namespace dmpnet {
namespace {

void check_pair(const TensorF& pred, const TensorF& gt, bool need_binary_gt) {
    require(pred.shape() == gt.shape(), "metrics: prediction shape " + pred.shape().str() +
                                            " vs ground truth " + gt.shape().str());
    require(pred.shape().n == 1 && pred.shape().c == 1,
            "metrics: expected single-channel maps, got " + pred.shape().str());
    for (std::int64_t i = 0; i < pred.numel(); ++i)
        require(pred.data()[i] >= 0.f && pred.data()[i] <= 1.f,
                "metrics: prediction value outside [0,1]");
    if (need_binary_gt)
        for (std::int64_t i = 0; i < gt.numel(); ++i)
            require(gt.data()[i] == 0.f || gt.data()[i] == 1.f,
                    "metrics: ground truth is not binary");
}

// Threshold sweeps run on a per-image min-max normalized copy; degenerate
// constant maps pass through unchanged.
std::vector<double> normalized(const TensorF& pred) {
    std::vector<double> v(pred.data(), pred.data() + pred.numel());
    const auto [lo_it, hi_it] = std::minmax_element(v.begin(), v.end());
    const double lo = *lo_it, hi = *hi_it;
    if (hi > lo)
        for (double& x : v) x = (x - lo) / (hi - lo);
    return v;
}

double threshold_at(int i) { return static_cast<double>(i) / (kThresholdCount - 1); }

}  // namespace

double mae(const TensorF& pred, const TensorF& gt) {
    check_pair(pred, gt, false);
    double sum = 0;
    for (std::int64_t i = 0; i < pred.numel(); ++i)
        sum += std::fabs(static_cast<double>(pred.data()[i]) - gt.data()[i]);
    return sum / static_cast<double>(pred.numel());
}

double f_measure_max(const TensorF& pred, const TensorF& gt, double beta2,
                     std::vector<std::pair<double, double>>* pr_curve) {
    check_pair(pred, gt, true);
    std::int64_t positives = 0;
    for (std::int64_t i = 0; i < gt.numel(); ++i) positives += gt.data()[i] == 1.f;
    require(positives > 0, "metrics: all-background ground truth, undefined recall");

    const std::vector<double> p = normalized(pred);
    if (pr_curve) {
        pr_curve->clear();
        pr_curve->reserve(kThresholdCount);
    }
    double best = 0;
    for (int t = 0; t < kThresholdCount; ++t) {
        const double thr = threshold_at(t);
        std::int64_t tp = 0, fp = 0;
        for (std::int64_t i = 0; i < gt.numel(); ++i) {
            if (p[i] < thr) continue;
            if (gt.data()[i] == 1.f)
                ++tp;
            else
                ++fp;
        }
        const double precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / (tp + fp);
        const double recall = static_cast<double>(tp) / static_cast<double>(positives);
        if (pr_curve) pr_curve->emplace_back(precision, recall);
        const double denom = beta2 * precision + recall;
        if (denom > 0) best = std::max(best, (1 + beta2) * precision * recall / denom);
    }
    return best;
}

namespace {

// object-region similarity: 2u / (u^2 + 1 + sigma), on the masked map
double object_score(const std::vector<double>& x, const std::vector<char>& region) {
    double sum = 0;
    std::int64_t n = 0;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (region[i]) {
            sum += x[i];
            ++n;
        }
    if (n == 0) return 0;
    const double mean = sum / static_cast<double>(n);
    double var = 0;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (region[i]) var += (x[i] - mean) * (x[i] - mean);
    const double sd = std::sqrt(var / (n > 1 ? static_cast<double>(n - 1) : 1.0));
    return 2.0 * mean / (mean * mean + 1.0 + sd + 1e-12);
}

// SSIM-style similarity of one rectangular block
double block_ssim(const TensorF& pred, const TensorF& gt, int r0, int r1, int c0, int c1) {
    const std::int64_t n = static_cast<std::int64_t>(r1 - r0) * (c1 - c0);
    if (n <= 0) return 1.0;
    double mx = 0, my = 0;
    for (int r = r0; r < r1; ++r)
        for (int c = c0; c < c1; ++c) {
            mx += pred.at(0, 0, r, c);
            my += gt.at(0, 0, r, c);
        }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double vx = 0, vy = 0, cov = 0;
    for (int r = r0; r < r1; ++r)
        for (int c = c0; c < c1; ++c) {
            const double dx = pred.at(0, 0, r, c) - mx;
            const double dy = gt.at(0, 0, r, c) - my;
            vx += dx * dx;
            vy += dy * dy;
            cov += dx * dy;
        }
    const double norm = n > 1 ? static_cast<double>(n - 1) : 1.0;
    vx /= norm;
    vy /= norm;
    cov /= norm;
    const double num = 4.0 * mx * my * cov;
    const double den = (mx * mx + my * my) * (vx + vy);
    if (num != 0.0) return num / (den + 1e-12);
    return den == 0.0 ? 1.0 : 0.0;
}

}  // namespace

double s_measure(const TensorF& pred, const TensorF& gt, double alpha) {
    check_pair(pred, gt, true);
    const std::int64_t n = gt.numel();
    const int h = gt.shape().h, w = gt.shape().w;
    double gt_sum = 0, pred_sum = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        gt_sum += gt.data()[i];
        pred_sum += pred.data()[i];
    }
    const double mu = gt_sum / static_cast<double>(n);
    if (mu == 0.0) return 1.0 - pred_sum / static_cast<double>(n);  // reward empty maps
    if (mu == 1.0) return pred_sum / static_cast<double>(n);

    // object term: foreground and background compared separately
    std::vector<double> fg(n), bg(n);
    std::vector<char> in_fg(n), in_bg(n);
    for (std::int64_t i = 0; i < n; ++i) {
        const double p = pred.data()[i], g = gt.data()[i];
        fg[i] = p * g;
        bg[i] = (1.0 - p) * (1.0 - g);
        in_fg[i] = g == 1.f;
        in_bg[i] = g == 0.f;
    }
    const double s_object =
        mu * object_score(fg, in_fg) + (1.0 - mu) * object_score(bg, in_bg);

    // region term: four blocks split at the foreground centroid, each scored
    // by a SSIM-style similarity and weighted by its share of the area
    double cr = 0, cc = 0;
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            if (gt.at(0, 0, r, c) == 1.f) {
                cr += r;
                cc += c;
            }
    const int split_r = static_cast<int>(std::lround(cr / gt_sum)) + 1;  // rows above split
    const int split_c = static_cast<int>(std::lround(cc / gt_sum)) + 1;
    const double area = static_cast<double>(n);
    double s_region = 0;
    const int rows[3] = {0, std::min(split_r, h), h};
    const int cols[3] = {0, std::min(split_c, w), w};
    for (int br = 0; br < 2; ++br)
        for (int bc = 0; bc < 2; ++bc) {
            const std::int64_t cnt = static_cast<std::int64_t>(rows[br + 1] - rows[br]) *
                                     (cols[bc + 1] - cols[bc]);
            if (cnt == 0) continue;
            s_region += static_cast<double>(cnt) / area *
                        block_ssim(pred, gt, rows[br], rows[br + 1], cols[bc], cols[bc + 1]);
        }

    const double s = alpha * s_object + (1.0 - alpha) * s_region;
    return std::clamp(s, 0.0, 1.0);
}

double e_measure_max(const TensorF& pred, const TensorF& gt) {
    check_pair(pred, gt, true);
    const std::int64_t n = gt.numel();
    double gt_sum = 0;
    for (std::int64_t i = 0; i < n; ++i) gt_sum += gt.data()[i];
    const std::vector<double> p = normalized(pred);

    double best = 0;
    for (int t = 0; t < kThresholdCount; ++t) {
        const double thr = threshold_at(t);
        double fm_sum = 0;
        for (std::int64_t i = 0; i < n; ++i) fm_sum += p[i] >= thr;
        double score = 0;
        if (gt_sum == 0.0) {
            // no foreground: reward predicting background
            for (std::int64_t i = 0; i < n; ++i) score += p[i] >= thr ? 0.0 : 1.0;
        } else if (gt_sum == static_cast<double>(n)) {
            score = fm_sum;
        } else {
            const double mu_fm = fm_sum / static_cast<double>(n);
            const double mu_gt = gt_sum / static_cast<double>(n);
            for (std::int64_t i = 0; i < n; ++i) {
                const double phi_fm = (p[i] >= thr ? 1.0 : 0.0) - mu_fm;
                const double phi_gt = gt.data()[i] - mu_gt;
                const double align = 2.0 * phi_fm * phi_gt /
                                     (phi_fm * phi_fm + phi_gt * phi_gt + 1e-12);
                score += (align + 1.0) * (align + 1.0) / 4.0;
            }
        }
        best = std::max(best, score / static_cast<double>(n));
    }
    return best;
}

MetricsReport evaluate_pair(const TensorF& pred, const TensorF& gt) {
    MetricsReport r;
    r.mae = mae(pred, gt);
    r.max_f = f_measure_max(pred, gt, 0.3, &r.pr_curve);
    r.s_measure = s_measure(pred, gt);
    r.max_e = e_measure_max(pred, gt);
    r.thresholds.reserve(kThresholdCount);
    for (int t = 0; t < kThresholdCount; ++t) r.thresholds.push_back(threshold_at(t));
    return r;
}

MetricsReport evaluate_dir(const std::string& pred_dir, const std::string& gt_dir) {
    namespace fs = std::filesystem;
    require(fs::is_directory(pred_dir), "metrics: not a directory: " + pred_dir);
    require(fs::is_directory(gt_dir), "metrics: not a directory: " + gt_dir);

    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(pred_dir))
        if (entry.is_regular_file() && entry.path().extension() == ".pgm")
            names.push_back(entry.path().filename().string());
    std::sort(names.begin(), names.end());
    require(!names.empty(), "metrics: no .pgm predictions in " + pred_dir);

    MetricsReport sum;
    sum.pr_curve.assign(kThresholdCount, {0, 0});
    for (const std::string& name : names) {
        const fs::path gt_path = fs::path(gt_dir) / name;
        require(fs::exists(gt_path), "metrics: missing ground truth for " + name);
        TensorF pred = load_pgm((fs::path(pred_dir) / name).string());
        TensorF gt = load_pgm(gt_path.string());
        MetricsReport one = evaluate_pair(pred, gt);
        sum.mae += one.mae;
        sum.max_f += one.max_f;
        sum.s_measure += one.s_measure;
        sum.max_e += one.max_e;
        for (int t = 0; t < kThresholdCount; ++t) {
            sum.pr_curve[t].first += one.pr_curve[t].first;
            sum.pr_curve[t].second += one.pr_curve[t].second;
        }
        sum.thresholds = std::move(one.thresholds);
    }
    const double count = static_cast<double>(names.size());
    sum.mae /= count;
    sum.max_f /= count;
    sum.s_measure /= count;
    sum.max_e /= count;
    for (auto& [p, r] : sum.pr_curve) {
        p /= count;
        r /= count;
    }
    return sum;
}

std::string format_report(const MetricsReport& report) {
    std::ostringstream out;
    out << "metric      value\n";
    const std::pair<const char*, double> rows[] = {{"mae", report.mae},
                                                   {"max_f", report.max_f},
                                                   {"s_measure", report.s_measure},
                                                   {"max_e", report.max_e}};
    out.setf(std::ios::fixed);
    out.precision(6);
    for (const auto& [name, value] : rows) {
        out << name;
        for (std::size_t i = std::strlen(name); i < 12; ++i) out << ' ';
        out << value << "\n";
    }
    return out.str();
}

void write_report(const std::string& path, const MetricsReport& report) {
    std::ofstream out(path, std::ios::trunc);
    require(out.good(), "metrics: cannot write " + path);
    out.setf(std::ios::fixed);
    out.precision(6);
    out << "mae," << report.mae << "\n"
        << "max_f," << report.max_f << "\n"
        << "s_measure," << report.s_measure << "\n"
        << "max_e," << report.max_e << "\n";
    require(out.good(), "metrics: write failed for " + path);
}

}  // namespace dmpnet
