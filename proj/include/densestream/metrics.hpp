#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "densestream/common.hpp"

// ROC analysis and threshold metrics. AUC is computed from grouped integer
// counts, so the trapezoidal value coincides exactly with the Mann-Whitney
// pair statistic (ties count 1/2) rather than merely approximating it.

namespace densestream {

struct ConfusionCounts {
  std::int64_t tp = 0, tn = 0, fp = 0, fn = 0;
  std::int64_t total() const { return tp + tn + fp + fn; }
};

// prediction is positive iff score >= threshold
inline ConfusionCounts confusion(const std::vector<double>& scores,
                                 const std::vector<int>& labels, double threshold) {
  if (scores.size() != labels.size())
    throw data_error("confusion: scores and labels differ in length");
  ConfusionCounts c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] >= threshold;
    const bool actual = labels[i] != 0;
    if (predicted && actual) ++c.tp;
    else if (predicted && !actual) ++c.fp;
    else if (!predicted && actual) ++c.fn;
    else ++c.tn;
  }
  return c;
}

// Denominator-zero cases are reported as absent, never as a silent 0/0.
inline std::optional<double> sensitivity(const ConfusionCounts& c) {
  if (c.tp + c.fn == 0) return std::nullopt;
  return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}

inline std::optional<double> specificity(const ConfusionCounts& c) {
  if (c.tn + c.fp == 0) return std::nullopt;
  return static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
}

inline std::optional<double> accuracy(const ConfusionCounts& c) {
  if (c.total() == 0) return std::nullopt;
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

struct RocPoint {
  double threshold = 0.0;  // operating threshold producing this point
  double sensitivity = 0.0;
  double fpr = 0.0;  // 1 - specificity
};

struct RocCurve {
  std::vector<RocPoint> points;  // ordered by non-decreasing fpr
  double auc = 0.0;
};

// Thresholds sweep the distinct score values (ties grouped into a single
// operating point); endpoints (0,0) and (1,1) are always present.
inline RocCurve roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw data_error("roc_auc: scores and labels differ in length");
  std::int64_t pos = 0, neg = 0;
  for (int y : labels) (y != 0 ? pos : neg)++;
  if (pos == 0 || neg == 0)
    throw data_error("roc_auc: both classes must be present (got " + std::to_string(pos) +
                     " positives, " + std::to_string(neg) + " negatives)");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });

  RocCurve curve;
  curve.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});

  std::int64_t tp = 0, fp = 0;
  std::int64_t twice_area = 0;  // 2 * sum of trapezoids, in pair-count units
  std::size_t i = 0;
  while (i < order.size()) {
    const double s = scores[order[i]];
    std::int64_t dp = 0, dn = 0;
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == s) {
      (labels[order[j]] != 0 ? dp : dn)++;
      ++j;
    }
    twice_area += dn * (2 * tp + dp);
    tp += dp;
    fp += dn;
    curve.points.push_back({s, static_cast<double>(tp) / static_cast<double>(pos),
                            static_cast<double>(fp) / static_cast<double>(neg)});
    i = j;
  }
  if (curve.points.back().sensitivity != 1.0 || curve.points.back().fpr != 1.0)
    curve.points.push_back({-std::numeric_limits<double>::infinity(), 1.0, 1.0});
  curve.auc = static_cast<double>(twice_area) / (2.0 * static_cast<double>(pos) *
                                                 static_cast<double>(neg));
  return curve;
}

inline std::string roc_points_csv(const RocCurve& curve) {
  std::ostringstream os;
  os << "threshold,sensitivity,fpr\n";
  for (const auto& p : curve.points) {
    if (std::isinf(p.threshold))
      os << (p.threshold > 0 ? "inf" : "-inf");
    else
      os << format_fixed(p.threshold, 6);
    os << ',' << format_fixed(p.sensitivity, 6) << ',' << format_fixed(p.fpr, 6) << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// report tables mirroring the stream-model and ensemble result layout:
// training / validation / clinical-findings-in-validation x accuracy / AUC

struct StreamTableRow {
  std::string patch_size;  // "42x42x1" style
  int fold = 0;
  double train_accuracy = 0.0, train_auc = 0.0;
  double val_accuracy = 0.0, val_auc = 0.0;
  std::optional<double> cf_accuracy, cf_auc;  // finding-centered validation subset
};

inline std::string optional_cell(const std::optional<double>& v) {
  return v ? format_fixed(*v, 3) : std::string();
}

inline std::string stream_table_csv(const std::vector<StreamTableRow>& rows) {
  std::ostringstream os;
  os << "patch_size,fold,train_accuracy,train_auc,val_accuracy,val_auc,"
        "cf_val_accuracy,cf_val_auc\n";
  for (const auto& r : rows)
    os << r.patch_size << ',' << r.fold << ',' << format_fixed(r.train_accuracy, 3) << ','
       << format_fixed(r.train_auc, 3) << ',' << format_fixed(r.val_accuracy, 3) << ','
       << format_fixed(r.val_auc, 3) << ',' << optional_cell(r.cf_accuracy) << ','
       << optional_cell(r.cf_auc) << '\n';
  return os.str();
}

struct EnsembleTableRow {
  std::string input_channels;  // "t2w+adc+dwi", "ktrans", or the quadruple
  double train_accuracy = 0.0, train_auc = 0.0;
  double val_accuracy = 0.0, val_auc = 0.0;
  std::optional<double> cf_accuracy, cf_auc;
};

inline std::string ensemble_table_csv(const std::vector<EnsembleTableRow>& rows) {
  std::ostringstream os;
  os << "input_channels,train_accuracy,train_auc,val_accuracy,val_auc,"
        "cf_val_accuracy,cf_val_auc\n";
  for (const auto& r : rows)
    os << r.input_channels << ',' << format_fixed(r.train_accuracy, 3) << ','
       << format_fixed(r.train_auc, 3) << ',' << format_fixed(r.val_accuracy, 3) << ','
       << format_fixed(r.val_auc, 3) << ',' << optional_cell(r.cf_accuracy) << ','
       << optional_cell(r.cf_auc) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// minimal SVG chart: ROC curves as polylines on the unit square

struct SvgSeries {
  std::string label;
  std::vector<std::pair<double, double>> xy;  // (fpr, sensitivity)
};

inline std::string roc_svg(const std::string& title, const std::vector<SvgSeries>& series) {
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                  "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  const double w = 480, h = 480, ml = 56, mr = 16, mt = 36, mb = 48;
  const double pw = w - ml - mr, ph = h - mt - mb;
  auto px = [&](double x) { return ml + x * pw; };
  auto py = [&](double y) { return mt + (1.0 - y) * ph; };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
     << "\" viewBox=\"0 0 " << w << " " << h << "\">\n";
  os << "  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "  <text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
     << title << "</text>\n";
  // axes box and gridlines at 0, 0.25, ..., 1
  for (int i = 0; i <= 4; ++i) {
    const double t = i / 4.0;
    os << "  <line x1=\"" << px(t) << "\" y1=\"" << py(0) << "\" x2=\"" << px(t) << "\" y2=\""
       << py(1) << "\" stroke=\"#dddddd\"/>\n";
    os << "  <line x1=\"" << px(0) << "\" y1=\"" << py(t) << "\" x2=\"" << px(1) << "\" y2=\""
       << py(t) << "\" stroke=\"#dddddd\"/>\n";
    os << "  <text x=\"" << px(t) << "\" y=\"" << py(0) + 18
       << "\" text-anchor=\"middle\" font-size=\"11\">" << format_fixed(t, 2) << "</text>\n";
    os << "  <text x=\"" << px(0) - 8 << "\" y=\"" << py(t) + 4
       << "\" text-anchor=\"end\" font-size=\"11\">" << format_fixed(t, 2) << "</text>\n";
  }
  os << "  <line x1=\"" << px(0) << "\" y1=\"" << py(0) << "\" x2=\"" << px(1) << "\" y2=\""
     << py(1) << "\" stroke=\"#aaaaaa\" stroke-dasharray=\"4 4\"/>\n";
  os << "  <text x=\"" << ml + pw / 2 << "\" y=\"" << h - 10
     << "\" text-anchor=\"middle\" font-size=\"12\">1 - specificity</text>\n";
  os << "  <text x=\"14\" y=\"" << mt + ph / 2
     << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 " << mt + ph / 2
     << ")\">sensitivity</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = kColors[s % 8];
    os << "  <polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : series[s].xy) os << px(x) << ',' << py(y) << ' ';
    os << "\"/>\n";
    os << "  <text x=\"" << px(1) - 8 << "\" y=\"" << py(0) - 14.0 * (series.size() - s)
       << "\" text-anchor=\"end\" font-size=\"11\" fill=\"" << color << "\">" << series[s].label
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace densestream
