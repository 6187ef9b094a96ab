#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "unidiff/losses.hpp"

namespace unidiff {

struct MetricReport {
  std::string task;
  std::map<std::string, double> values;
  int samples = 0;
  long valid_pixels = 0;
  std::string label;  // run name, e.g. the training mode

  nlohmann::json to_json() const {
    return {{"label", label}, {"task", task}, {"samples", samples}, {"valid_pixels", valid_pixels}, {"values", values}};
  }
};

namespace detail {

inline bool pixel_valid(const Mask& mask, std::size_t i) { return mask.empty() || mask[i] != 0; }

inline void require_pixels(long count) {
  if (count == 0) throw ParameterError("metric mask selects no pixels");
}

/// Median by nth_element on a copy (mean of the two middle values for even sizes).
inline double median(std::vector<double> v) {
  const std::size_t n = v.size(), h = n / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(h), v.end());
  const double hi = v[h];
  if (n % 2) return hi;
  return (*std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(h)) + hi) / 2;
}

}  // namespace detail

/// Per-pixel angular errors in degrees over valid pixels of (n, 3, h, w) fields.
template <class T>
std::vector<double> angular_errors(const Tensor<T>& pred, const Tensor<T>& gt, const Mask& mask = {}) {
  require_same_shape(pred.shape(), gt.shape(), "angular_errors");
  if (pred.rank() != 4 || pred.dim(1) != 3) throw ShapeError("normal fields must be (n, 3, h, w)");
  const int hw = pred.dim(2) * pred.dim(3);
  std::vector<double> out;
  for (int n = 0; n < pred.dim(0); ++n)
    for (int p = 0; p < hw; ++p) {
      if (!detail::pixel_valid(mask, static_cast<std::size_t>(n) * hw + p)) continue;
      double d = 0;
      for (int c = 0; c < 3; ++c) d += static_cast<double>(pred.plane(n, c)[p]) * gt.plane(n, c)[p];
      out.push_back(std::acos(std::clamp(d, -1.0, 1.0)) * 180.0 / std::numbers::pi);
    }
  return out;
}

template <class T>
MetricReport normal_metrics(const Tensor<T>& pred, const Tensor<T>& gt, const Mask& mask = {}) {
  const std::vector<double> a = angular_errors(pred, gt, mask);
  detail::require_pixels(static_cast<long>(a.size()));
  MetricReport r;
  r.task = "normals";
  r.samples = pred.dim(0);
  r.valid_pixels = static_cast<long>(a.size());
  double sum = 0, sq = 0;
  long b1 = 0, b2 = 0, b3 = 0;
  for (double e : a) {
    sum += e;
    sq += e * e;
    b1 += e < 11.25;
    b2 += e < 22.5;
    b3 += e < 30.0;
  }
  const double n = static_cast<double>(a.size());
  r.values = {{"pct_11.25", 100.0 * b1 / n}, {"pct_22.5", 100.0 * b2 / n}, {"pct_30", 100.0 * b3 / n},
              {"mean", sum / n},           {"median", detail::median(a)}, {"rmse", std::sqrt(sq / n)}};
  return r;
}

/// Class maps are flat (n * h * w) index arrays.
inline MetricReport miou(const std::vector<int>& pred, const std::vector<int>& gt, int num_classes,
                         const Mask& mask = {}) {
  if (pred.size() != gt.size()) throw ShapeError("miou: prediction and ground truth sizes differ");
  if (!mask.empty() && mask.size() != gt.size()) throw ShapeError("miou: mask size differs");
  std::vector<long> conf(static_cast<std::size_t>(num_classes) * num_classes, 0);
  long count = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!detail::pixel_valid(mask, i)) continue;
    if (gt[i] < 0 || gt[i] >= num_classes || pred[i] < 0 || pred[i] >= num_classes)
      throw ParameterError("class index out of range at pixel " + std::to_string(i));
    ++conf[static_cast<std::size_t>(gt[i]) * num_classes + pred[i]];
    ++count;
  }
  detail::require_pixels(count);
  double sum = 0;
  int present = 0;
  MetricReport r;
  r.task = "segmentation";
  for (int c = 0; c < num_classes; ++c) {
    long tp = conf[static_cast<std::size_t>(c) * num_classes + c], fp = 0, fn = 0;
    for (int k = 0; k < num_classes; ++k) {
      if (k == c) continue;
      fp += conf[static_cast<std::size_t>(k) * num_classes + c];
      fn += conf[static_cast<std::size_t>(c) * num_classes + k];
    }
    if (tp + fn == 0) continue;  // absent from ground truth
    const double iou = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
    r.values["iou_" + std::to_string(c)] = iou;
    sum += iou;
    ++present;
  }
  r.values["miou"] = sum / present;
  r.valid_pixels = count;
  return r;
}

template <class T>
MetricReport depth_rmse(const Tensor<T>& pred, const Tensor<T>& gt, const Mask& mask = {}) {
  require_same_shape(pred.shape(), gt.shape(), "depth_rmse");
  const std::size_t hw = pred.item_size();
  double sq = 0;
  long count = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!detail::pixel_valid(mask, i)) continue;
    (void)hw;
    const double d = static_cast<double>(pred[i]) - gt[i];
    sq += d * d;
    ++count;
  }
  detail::require_pixels(count);
  MetricReport r;
  r.task = "depth";
  r.samples = pred.rank() == 4 ? pred.dim(0) : 1;
  r.valid_pixels = count;
  r.values["rmse"] = std::sqrt(sq / static_cast<double>(count));
  return r;
}

/// Whether smaller values of a metric are better.
inline bool lower_is_better(const std::string& metric) {
  return metric == "mean" || metric == "median" || metric == "rmse";
}

struct Comparison {
  std::vector<MetricReport> ordered;             // best first by the primary metric
  std::map<std::string, std::string> winners;    // metric -> label of best report
  std::string text;
  nlohmann::json json;
};

inline Comparison compare_runs(const std::vector<MetricReport>& reports, const std::string& primary) {
  if (reports.empty()) throw ParameterError("compare_runs needs at least one report");
  for (const auto& r : reports)
    if (r.task != reports.front().task) throw ParameterError("compare_runs over mixed tasks");
  for (const auto& r : reports)
    if (!r.values.count(primary)) throw ParameterError("report '" + r.label + "' lacks metric '" + primary + "'");
  Comparison c;
  c.ordered = reports;
  const bool low = lower_is_better(primary);
  std::stable_sort(c.ordered.begin(), c.ordered.end(), [&](const MetricReport& a, const MetricReport& b) {
    return low ? a.values.at(primary) < b.values.at(primary) : a.values.at(primary) > b.values.at(primary);
  });
  for (const auto& [metric, _] : reports.front().values) {
    const MetricReport* best = nullptr;
    for (const auto& r : c.ordered) {
      if (!r.values.count(metric)) continue;
      const double v = r.values.at(metric);
      if (!best || (lower_is_better(metric) ? v < best->values.at(metric) : v > best->values.at(metric))) best = &r;
    }
    if (best) c.winners[metric] = best->label;
  }
  std::ostringstream os;
  os << "run";
  for (const auto& [metric, _] : reports.front().values) os << '\t' << metric;
  os << '\n';
  for (const auto& r : c.ordered) {
    os << r.label;
    for (const auto& [metric, v] : r.values) os << '\t' << v << (c.winners[metric] == r.label ? "*" : "");
    os << '\n';
  }
  c.text = os.str();
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : c.ordered) rows.push_back(r.to_json());
  c.json = {{"primary", primary}, {"rows", rows}, {"winners", c.winners}};
  return c;
}

}  // namespace unidiff
