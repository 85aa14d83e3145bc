#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "slicetrack/common.hpp"
#include "slicetrack/geometry.hpp"

namespace slicetrack::eval {

namespace fs = std::filesystem;
using nlohmann::json;

struct ScoredBox3 {
  geom::Box3D box;
  double score = 0.0;
};

struct VolumeEntry {
  std::string id;
  std::vector<ScoredBox3> preds;
  std::vector<geom::Box3D> gts;
};

// Per-volume matching outcome; predictions are score-sorted descending and
// labelled with the GT index they claimed (-1 = false positive).
struct VolumeResult {
  std::vector<double> scores;
  std::vector<int> matched_gt;
  int n_gt = 0;
};

// Greedy one-to-one matching: predictions in score order, each claiming the
// highest-IoU unmatched GT above the threshold. Because every claim depends
// only on higher-scored predictions, the matching of any score-thresholded
// subset is the corresponding prefix of this matching; the threshold sweeps
// below rely on that.
inline VolumeResult match_detections_3d(std::vector<ScoredBox3> preds,
                                        const std::vector<geom::Box3D>& gts,
                                        double iou_thresh = 0.1) {
  std::stable_sort(preds.begin(), preds.end(),
                   [](const ScoredBox3& a, const ScoredBox3& b) { return a.score > b.score; });
  VolumeResult out;
  out.n_gt = static_cast<int>(gts.size());
  std::vector<char> gt_taken(gts.size(), 0);
  for (const auto& p : preds) {
    double best_iou = iou_thresh;
    int best_gt = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gt_taken[g]) continue;
      const double iou = geom::iou3d(p.box, gts[g]);
      if (iou > best_iou) {
        best_iou = iou;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0) gt_taken[static_cast<std::size_t>(best_gt)] = 1;
    out.scores.push_back(p.score);
    out.matched_gt.push_back(best_gt);
  }
  return out;
}

namespace detail {

struct Event {
  double score;
  bool tp;
  int volume;
  int index;  // per-volume rank, for deterministic global ordering
};

inline std::vector<Event> merged_events(std::span<const VolumeResult> results) {
  std::vector<Event> events;
  for (std::size_t v = 0; v < results.size(); ++v)
    for (std::size_t i = 0; i < results[v].scores.size(); ++i)
      events.push_back({results[v].scores[i], results[v].matched_gt[i] >= 0,
                        static_cast<int>(v), static_cast<int>(i)});
  std::sort(events.begin(), events.end(), [](const Event& a, const Event& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.volume != b.volume) return a.volume < b.volume;
    return a.index < b.index;
  });
  return events;
}

inline int total_gt(std::span<const VolumeResult> results) {
  int n = 0;
  for (const auto& r : results) n += r.n_gt;
  return n;
}

}  // namespace detail

// Best sensitivity achievable with mean false positives per volume held at or
// below the allowance: sweep the global score threshold and keep the largest
// feasible operating point.
inline double sensitivity_at_fp(std::span<const VolumeResult> results, double fp_per_volume) {
  const int n_gt = detail::total_gt(results);
  const int n_vol = static_cast<int>(results.size());
  if (n_gt == 0 || n_vol == 0) return 0.0;
  const auto events = detail::merged_events(results);
  double best = 0.0;  // the empty operating point (threshold above all scores)
  int tp = 0, fp = 0;
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (events[i].tp) ++tp;
    else ++fp;
    // a threshold can only sit at a score boundary; include tied scores
    if (i + 1 < events.size() && events[i + 1].score == events[i].score) continue;
    if (static_cast<double>(fp) / n_vol <= fp_per_volume)
      best = std::max(best, static_cast<double>(tp) / n_gt);
  }
  return best;
}

// Average precision with all-point interpolation (area under the precision
// envelope as a function of recall).
inline double ap_at_iou(std::span<const VolumeResult> results) {
  const int n_gt = detail::total_gt(results);
  if (n_gt == 0) return 0.0;
  const auto events = detail::merged_events(results);
  if (events.empty()) return 0.0;
  std::vector<double> precision, recall;
  int tp = 0, fp = 0;
  for (const auto& e : events) {
    if (e.tp) ++tp;
    else ++fp;
    precision.push_back(static_cast<double>(tp) / (tp + fp));
    recall.push_back(static_cast<double>(tp) / n_gt);
  }
  // precision envelope from the right
  std::vector<double> env(precision.size());
  double run_max = 0.0;
  for (std::size_t i = precision.size(); i-- > 0;) {
    run_max = std::max(run_max, precision[i]);
    env[i] = run_max;
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (!events[i].tp) continue;
    ap += (recall[i] - prev_recall) * env[i];
    prev_recall = recall[i];
  }
  return ap;
}

// (mean FPs per volume, sensitivity) at every distinct threshold, plus the
// requested operating points; sensitivity is non-decreasing in the allowance.
inline std::vector<std::pair<double, double>> froc_curve(
    std::span<const VolumeResult> results, const std::vector<double>& fp_points = {1, 2, 4, 8}) {
  const int n_gt = detail::total_gt(results);
  const int n_vol = static_cast<int>(results.size());
  std::vector<std::pair<double, double>> curve;
  if (n_gt == 0 || n_vol == 0) return curve;
  const auto events = detail::merged_events(results);
  int tp = 0, fp = 0;
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (events[i].tp) ++tp;
    else ++fp;
    if (i + 1 < events.size() && events[i + 1].score == events[i].score) continue;
    curve.emplace_back(static_cast<double>(fp) / n_vol, static_cast<double>(tp) / n_gt);
  }
  for (double f : fp_points) curve.emplace_back(f, sensitivity_at_fp(results, f));
  std::sort(curve.begin(), curve.end());
  curve.erase(std::unique(curve.begin(), curve.end()), curve.end());
  return curve;
}

// Fragmentation: mean number of predictions overlapping each covered GT.
// Merge: mean number of GTs covered per prediction. Both at the matching IoU.
inline std::pair<double, double> fragmentation_report(std::span<const VolumeEntry> entries,
                                                      double iou_thresh = 0.1) {
  long covered_gts = 0, gt_hits = 0;
  long preds = 0, pred_hits = 0;
  for (const auto& entry : entries) {
    for (const auto& gt : entry.gts) {
      int hits = 0;
      for (const auto& p : entry.preds)
        if (geom::iou3d(p.box, gt) > iou_thresh) ++hits;
      if (hits > 0) {
        ++covered_gts;
        gt_hits += hits;
      }
    }
    for (const auto& p : entry.preds) {
      ++preds;
      for (const auto& gt : entry.gts)
        if (geom::iou3d(p.box, gt) > iou_thresh) ++pred_hits;
    }
  }
  const double frag = covered_gts ? static_cast<double>(gt_hits) / covered_gts : 0.0;
  const double merge = preds ? static_cast<double>(pred_hits) / preds : 0.0;
  return {frag, merge};
}

struct VolumeMatches {
  std::string id;
  int n_gt = 0, n_preds = 0;
  int tp = 0, fp = 0, fn = 0;  // at threshold 0 (all predictions admitted)
};

struct EvalReport {
  double iou_thresh = 0.1;
  std::vector<VolumeMatches> per_volume;
  std::map<double, double> sensitivity;  // at 1, 2, 4, 8 FPs/volume
  double avg_sensitivity = 0.0;
  double ap = 0.0;
  std::vector<std::pair<double, double>> froc;
  double fragmentation = 0.0;
  double merge_rate = 0.0;
  int n_volumes = 0;
  int n_gt = 0;
  int n_preds = 0;
};

inline EvalReport evaluate(std::span<const VolumeEntry> entries, double iou_thresh = 0.1,
                           const std::vector<double>& fp_points = {1, 2, 4, 8}) {
  std::vector<VolumeResult> results;
  EvalReport report;
  report.iou_thresh = iou_thresh;
  report.n_volumes = static_cast<int>(entries.size());
  for (const auto& entry : entries) {
    results.push_back(match_detections_3d(entry.preds, entry.gts, iou_thresh));
    report.n_gt += static_cast<int>(entry.gts.size());
    report.n_preds += static_cast<int>(entry.preds.size());
    VolumeMatches vm;
    vm.id = entry.id;
    vm.n_gt = static_cast<int>(entry.gts.size());
    vm.n_preds = static_cast<int>(entry.preds.size());
    for (int g : results.back().matched_gt) (g >= 0 ? vm.tp : vm.fp) += 1;
    vm.fn = vm.n_gt - vm.tp;
    report.per_volume.push_back(std::move(vm));
  }
  double as_sum = 0.0;
  for (double f : fp_points) {
    report.sensitivity[f] = sensitivity_at_fp(results, f);
    as_sum += report.sensitivity[f];
  }
  report.avg_sensitivity = fp_points.empty() ? 0.0 : as_sum / fp_points.size();
  report.ap = ap_at_iou(results);
  report.froc = froc_curve(results, fp_points);
  auto [frag, merge] = fragmentation_report(entries, iou_thresh);
  report.fragmentation = frag;
  report.merge_rate = merge;
  return report;
}

inline void to_json(json& j, const EvalReport& r) {
  json sens = json::object();
  for (const auto& [f, s] : r.sensitivity) {
    char key[32];
    std::snprintf(key, sizeof(key), "%g", f);
    sens[key] = s;
  }
  json froc = json::array();
  for (const auto& [f, s] : r.froc) froc.push_back({f, s});
  json per_volume = json::array();
  for (const auto& vm : r.per_volume)
    per_volume.push_back({{"id", vm.id},
                          {"n_gt", vm.n_gt},
                          {"n_preds", vm.n_preds},
                          {"tp", vm.tp},
                          {"fp", vm.fp},
                          {"fn", vm.fn}});
  j = json{{"per_volume", per_volume},
           {"iou_thresh", r.iou_thresh},
           {"sensitivity_at_fp", sens},
           {"avg_sensitivity", r.avg_sensitivity},
           {"ap", r.ap},
           {"froc", froc},
           {"fragmentation", r.fragmentation},
           {"merge_rate", r.merge_rate},
           {"n_volumes", r.n_volumes},
           {"n_gt", r.n_gt},
           {"n_preds", r.n_preds}};
}

inline void write_froc_csv(const fs::path& path,
                           const std::vector<std::pair<double, double>>& curve,
                           const std::string& config_hash = "") {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  if (!config_hash.empty()) out << "# config_hash=" << config_hash << "\n";
  out << "fp_per_volume,sensitivity\n";
  for (const auto& [f, s] : curve) out << f << "," << s << "\n";
}

inline void write_froc_svg(const fs::path& path,
                           const std::vector<std::pair<double, double>>& curve,
                           const std::string& config_hash = "") {
  const int w = 480, h = 360, m = 48;
  double fmax = 1.0;
  for (const auto& [f, s] : curve) fmax = std::max(fmax, f);
  std::ofstream out(path);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
      << "\">\n";
  if (!config_hash.empty()) out << "<!-- config_hash=" << config_hash << " -->\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<line x1=\"" << m << "\" y1=\"" << h - m << "\" x2=\"" << w - m << "\" y2=\"" << h - m
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << m << "\" y1=\"" << h - m << "\" x2=\"" << m << "\" y2=\"" << m
      << "\" stroke=\"black\"/>\n";
  out << "<text x=\"" << w / 2 << "\" y=\"" << h - 10
      << "\" font-size=\"12\" text-anchor=\"middle\">mean FPs per volume</text>\n";
  out << "<text x=\"14\" y=\"" << h / 2
      << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 " << h / 2
      << ")\">sensitivity</text>\n";
  if (!curve.empty()) {
    out << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
    for (const auto& [f, s] : curve) {
      const double x = m + (w - 2 * m) * (f / fmax);
      const double y = h - m - (h - 2 * m) * s;
      out << x << "," << y << " ";
    }
    out << "\"/>\n";
  }
  out << "</svg>\n";
}

}  // namespace slicetrack::eval
