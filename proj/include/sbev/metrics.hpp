// Copyright 2026 The SBEV Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Training objectives and evaluation metrics.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sbev/autodiff.hpp"
#include "sbev/geometry.hpp"
#include "sbev/scenesim.hpp"

namespace sbev {

inline Tensor loss_supervised(const Tensor& logits, const SemanticMap& gt) {
  return masked_softmax_ce(logits, gt.classes, gt.mask);
}

// L_c = L_r(ipm head) + L_r(stereo head) + L_KT.
inline Tensor loss_cmd(const Tensor& logits_ipm, const Tensor& logits_stereo, const SemanticMap& gt,
                       const Tensor& l_kt) {
  return add(add(loss_supervised(logits_ipm, gt), loss_supervised(logits_stereo, gt)), l_kt);
}

// Per-class intersection / union counts, accumulated over any number of maps.
struct IouCounts {
  std::vector<std::uint64_t> inter, uni;
  std::uint64_t n_visible = 0;

  explicit IouCounts(int n_classes = 0) : inter(std::size_t(n_classes), 0), uni(std::size_t(n_classes), 0) {}

  void add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, std::span<const std::uint8_t> mask) {
    if (pred.size() != gt.size() || mask.size() != gt.size()) {
      throw std::invalid_argument("IouCounts: pred " + std::to_string(pred.size()) + ", gt " +
                                  std::to_string(gt.size()) + ", mask " + std::to_string(mask.size()) + " differ");
    }
    const std::size_t nc = inter.size();
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (!mask[i]) continue;
      if (pred[i] >= nc || gt[i] >= nc) throw std::invalid_argument("IouCounts: class index out of range");
      ++n_visible;
      if (pred[i] == gt[i]) {
        ++inter[gt[i]];
        ++uni[gt[i]];
      } else {
        ++uni[gt[i]];
        ++uni[pred[i]];
      }
    }
  }
};

struct DistanceBin {
  double threshold = 0.0;
  std::string mode;  // "min" or "max"
  double miou = 0.0;
  std::uint64_t n_visible = 0;
};

struct EvalReport {
  std::vector<double> per_class_iou;  // NaN where the class has an empty union
  std::vector<bool> defined;
  double miou = std::nan("");         // NaN when no class is defined
  std::uint64_t n_visible = 0;
  std::vector<DistanceBin> distance_bins;
  std::vector<double> pixel_ap;       // optional, per class

  bool empty() const { return n_visible == 0; }
};

inline EvalReport report_from_counts(const IouCounts& c) {
  EvalReport r;
  r.n_visible = c.n_visible;
  double total = 0.0;
  int n = 0;
  for (std::size_t k = 0; k < c.inter.size(); ++k) {
    const bool def = c.uni[k] > 0;
    r.defined.push_back(def);
    r.per_class_iou.push_back(def ? double(c.inter[k]) / double(c.uni[k]) : std::nan(""));
    if (def) {
      total += r.per_class_iou.back();
      ++n;
    }
  }
  if (n > 0) r.miou = total / n;
  return r;
}

inline EvalReport masked_macro_iou(std::span<const std::uint8_t> pred, const SemanticMap& gt, int n_classes) {
  IouCounts c(n_classes);
  c.add(pred, gt.classes, gt.mask);
  return report_from_counts(c);
}

// Visibility mask restricted by cell-centre distance from the origin:
// "min" keeps distance >= t, "max" keeps distance < t, so both modes
// partition the mask at any threshold.
inline std::vector<std::uint8_t> distance_mask(std::span<const std::uint8_t> mask, const LayoutSpec& layout,
                                               double threshold, const std::string& mode) {
  if (mode != "min" && mode != "max") throw std::invalid_argument("distance mode must be 'min' or 'max'");
  if (mask.size() != layout.cells()) throw std::invalid_argument("distance_mask: mask does not match layout");
  std::vector<std::uint8_t> out(mask.size(), 0);
  for (int j = 0; j < layout.ny; ++j) {
    for (int i = 0; i < layout.nx; ++i) {
      const std::size_t k = std::size_t(j) * layout.nx + i;
      const double dist = std::hypot(layout.x_center(i), layout.y_center(j));
      const bool keep = mode == "min" ? dist >= threshold : dist < threshold;
      out[k] = mask[k] && keep ? 1 : 0;
    }
  }
  return out;
}

// Accumulates one IouCounts per (threshold, mode) over a test set.
class DistanceBinner {
 public:
  DistanceBinner(const LayoutSpec& layout, std::vector<double> thresholds, std::vector<std::string> modes = {"min", "max"})
      : layout_(layout), thresholds_(std::move(thresholds)), modes_(std::move(modes)) {
    if (!std::is_sorted(thresholds_.begin(), thresholds_.end())) {
      throw std::invalid_argument("distance thresholds must be ascending");
    }
    counts_.assign(thresholds_.size() * modes_.size(), IouCounts(layout_.n_classes));
  }

  void add(std::span<const std::uint8_t> pred, const SemanticMap& gt) {
    std::size_t k = 0;
    for (const auto& mode : modes_) {
      for (double t : thresholds_) counts_[k++].add(pred, gt.classes, distance_mask(gt.mask, layout_, t, mode));
    }
  }

  std::vector<DistanceBin> bins() const {
    std::vector<DistanceBin> out;
    std::size_t k = 0;
    for (const auto& mode : modes_) {
      for (double t : thresholds_) {
        const EvalReport r = report_from_counts(counts_[k++]);
        out.push_back({t, mode, r.miou, r.n_visible});
      }
    }
    return out;
  }

 private:
  LayoutSpec layout_;
  std::vector<double> thresholds_;
  std::vector<std::string> modes_;
  std::vector<IouCounts> counts_;
};

// One report per threshold for a single map.
inline std::vector<EvalReport> distance_binned_iou(std::span<const std::uint8_t> pred, const SemanticMap& gt,
                                                   const LayoutSpec& layout, const std::vector<double>& thresholds,
                                                   const std::string& mode) {
  if (!std::is_sorted(thresholds.begin(), thresholds.end())) {
    throw std::invalid_argument("distance thresholds must be ascending");
  }
  std::vector<EvalReport> out;
  for (double t : thresholds) {
    IouCounts c(layout.n_classes);
    c.add(pred, gt.classes, distance_mask(gt.mask, layout, t, mode));
    out.push_back(report_from_counts(c));
  }
  return out;
}

// Average precision for one class from (score, positive) pairs. Thresholds
// sweep over the unique scores in descending order; the PR curve is
// integrated as sum over thresholds of (recall step) x precision. NaN when
// there are no positives.
inline double average_precision(std::vector<std::pair<double, bool>> items) {
  const auto positives = std::count_if(items.begin(), items.end(), [](const auto& p) { return p.second; });
  if (positives == 0) return std::nan("");
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  double ap = 0.0, prev_recall = 0.0;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < items.size();) {
    std::size_t k = i;
    while (k < items.size() && items[k].first == items[i].first) {
      tp += items[k].second ? 1 : 0;
      ++k;
    }
    seen = k;
    const double recall = double(tp) / double(positives);
    const double precision = double(tp) / double(seen);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = k;
  }
  return ap;
}

// Accumulates per-class (score, label) pairs over visible pixels.
class PixelApAccumulator {
 public:
  explicit PixelApAccumulator(int n_classes) : items_(std::size_t(n_classes)) {}

  // scores: N_C x cells, channel-major.
  void add(std::span<const double> scores, std::span<const std::uint8_t> gt, std::span<const std::uint8_t> mask) {
    const std::size_t nc = items_.size(), cells = gt.size();
    if (scores.size() != nc * cells || mask.size() != cells) throw std::invalid_argument("pixel_ap: shape mismatch");
    for (std::size_t i = 0; i < cells; ++i) {
      if (!mask[i]) continue;
      for (std::size_t c = 0; c < nc; ++c) {
        const double s = scores[c * cells + i];
        if (!(s >= 0.0 && s <= 1.0)) throw std::invalid_argument("pixel_ap: scores must lie in [0, 1]");
        items_[c].emplace_back(s, gt[i] == c);
      }
    }
  }

  std::vector<double> result() const {
    std::vector<double> out;
    for (const auto& v : items_) out.push_back(average_precision(v));
    return out;
  }

 private:
  std::vector<std::vector<std::pair<double, bool>>> items_;
};

inline std::vector<double> pixel_ap(std::span<const double> scores, std::span<const std::uint8_t> gt,
                                    std::span<const std::uint8_t> mask, int n_classes) {
  PixelApAccumulator acc(n_classes);
  acc.add(scores, gt, mask);
  return acc.result();
}

inline double three_pixel_error(std::span<const double> pred, std::span<const double> gt,
                                std::span<const std::uint8_t> valid) {
  if (pred.size() != gt.size() || valid.size() != gt.size()) throw std::invalid_argument("three_pixel_error: shape mismatch");
  std::size_t n = 0, bad = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!valid[i]) continue;
    ++n;
    if (std::abs(pred[i] - gt[i]) > 3.0) ++bad;
  }
  if (n == 0) throw std::invalid_argument("three_pixel_error: empty valid mask");
  return double(bad) / double(n);
}

// Arithmetic mean of member probability maps.
inline std::vector<double> ensemble_average(const std::vector<std::vector<double>>& members) {
  if (members.empty()) throw std::invalid_argument("ensemble_average: need at least one member");
  std::vector<double> out(members[0].size(), 0.0);
  for (const auto& m : members) {
    if (m.size() != out.size()) {
      throw std::invalid_argument("ensemble_average: member size " + std::to_string(m.size()) + " != " +
                                  std::to_string(out.size()));
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += m[i];
  }
  for (double& v : out) v /= double(members.size());
  return out;
}

// Channel-major N_C x cells scores -> per-cell argmax (first maximum wins).
inline std::vector<std::uint8_t> argmax_classes(std::span<const double> scores, std::size_t n_classes) {
  if (n_classes == 0 || scores.size() % n_classes) throw std::invalid_argument("argmax_classes: bad shape");
  const std::size_t cells = scores.size() / n_classes;
  std::vector<std::uint8_t> out(cells, 0);
  for (std::size_t i = 0; i < cells; ++i) {
    double best = scores[i];
    for (std::size_t c = 1; c < n_classes; ++c) {
      if (scores[c * cells + i] > best) {
        best = scores[c * cells + i];
        out[i] = std::uint8_t(c);
      }
    }
  }
  return out;
}

inline double mean_of(const std::vector<double>& v) {
  return v.empty() ? std::nan("") : std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
}

// Population standard deviation.
inline double std_of(const std::vector<double>& v) {
  if (v.empty()) return std::nan("");
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / double(v.size()));
}

namespace detail {
inline nlohmann::json num_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }
}  // namespace detail

inline nlohmann::json to_json(const EvalReport& r, const std::vector<std::string>& class_names) {
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t c = 0; c < r.per_class_iou.size(); ++c) {
    nlohmann::json e{{"class", c < class_names.size() ? class_names[c] : std::to_string(c)},
                     {"iou", detail::num_or_null(r.per_class_iou[c])}};
    if (c < r.pixel_ap.size()) e["pixel_ap"] = detail::num_or_null(r.pixel_ap[c]);
    classes.push_back(e);
  }
  nlohmann::json bins = nlohmann::json::array();
  for (const auto& b : r.distance_bins) {
    bins.push_back({{"threshold", b.threshold}, {"mode", b.mode}, {"miou", detail::num_or_null(b.miou)},
                    {"n_visible", b.n_visible}});
  }
  return {{"miou", detail::num_or_null(r.miou)}, {"n_visible", r.n_visible}, {"per_class", classes},
          {"distance_bins", bins}};
}

inline EvalReport eval_report_from_json(const nlohmann::json& j) {
  auto num = [](const nlohmann::json& v) { return v.is_null() ? std::nan("") : v.get<double>(); };
  EvalReport r;
  r.miou = num(j.at("miou"));
  r.n_visible = j.at("n_visible").get<std::uint64_t>();
  for (const auto& e : j.at("per_class")) {
    r.per_class_iou.push_back(num(e.at("iou")));
    r.defined.push_back(!e.at("iou").is_null());
    if (e.contains("pixel_ap")) r.pixel_ap.push_back(num(e.at("pixel_ap")));
  }
  for (const auto& b : j.at("distance_bins")) {
    r.distance_bins.push_back({b.at("threshold").get<double>(), b.at("mode").get<std::string>(), num(b.at("miou")),
                               b.at("n_visible").get<std::uint64_t>()});
  }
  return r;
}

// One row per class, then a summary row, then one row per distance bin.
inline std::string to_csv(const EvalReport& r, const std::vector<std::string>& class_names) {
  auto fmt = [](double v) {
    if (!std::isfinite(v)) return std::string();
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  std::ostringstream os;
  os << "kind,name,iou,pixel_ap,n_visible\n";
  for (std::size_t c = 0; c < r.per_class_iou.size(); ++c) {
    os << "class," << (c < class_names.size() ? class_names[c] : std::to_string(c)) << ','
       << fmt(r.per_class_iou[c]) << ',' << (c < r.pixel_ap.size() ? fmt(r.pixel_ap[c]) : "") << ",\n";
  }
  os << "summary,miou," << fmt(r.miou) << ",," << r.n_visible << '\n';
  for (const auto& b : r.distance_bins) {
    os << "distance_" << b.mode << ',' << fmt(b.threshold) << ',' << fmt(b.miou) << ",," << b.n_visible << '\n';
  }
  return os.str();
}

}  // namespace sbev
