#pragma once

#include <algorithm>
#include <limits>
#include <map>
#include <vector>

#include "slicetrack/geometry.hpp"
#include "slicetrack/tracker.hpp"

namespace slicetrack::baseline {

struct ScoredBox {
  double score = 0.0;
  geom::Box2D box;  // normalized
};

// The heuristic 2.5D post-merging baseline: chains independent per-slice
// detections by inter-slice IoU and collapses each chain into one 3D box.
// Greedy highest-IoU-first within each slice; a chain accepts at most one
// detection per slice; chains whose tail falls behind by more than max_gap
// slices close. Every detection lands in exactly one chain.
inline std::vector<track::Prediction> stack_2d_to_3d(
    const std::map<int, std::vector<ScoredBox>>& per_slice, double iou_gate, int max_gap, int nx,
    int ny, int min_length = 1) {
  struct Chain {
    long id;
    std::vector<track::TrackletSlice> slices;
  };
  std::vector<Chain> open, closed;
  long next_id = 1;

  for (const auto& [z, dets] : per_slice) {
    // retire chains that can no longer be extended
    std::vector<Chain> still_open;
    for (auto& c : open) {
      if (z - c.slices.back().z > max_gap + 1)
        closed.push_back(std::move(c));
      else
        still_open.push_back(std::move(c));
    }
    open = std::move(still_open);

    struct Pair {
      double iou;
      std::size_t chain, det;
    };
    std::vector<Pair> pairs;
    for (std::size_t ci = 0; ci < open.size(); ++ci) {
      const int gap = z - open[ci].slices.back().z - 1;
      if (gap < 0 || gap > max_gap) continue;
      for (std::size_t di = 0; di < dets.size(); ++di) {
        const double iou = geom::iou2d(open[ci].slices.back().box, dets[di].box);
        if (iou > iou_gate) pairs.push_back({iou, ci, di});
      }
    }
    std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
      return a.iou > b.iou;
    });
    std::vector<char> chain_used(open.size(), 0), det_used(dets.size(), 0);
    for (const auto& p : pairs) {
      if (chain_used[p.chain] || det_used[p.det]) continue;
      chain_used[p.chain] = 1;
      det_used[p.det] = 1;
      open[p.chain].slices.push_back({z, dets[p.det].box, dets[p.det].score});
    }
    for (std::size_t di = 0; di < dets.size(); ++di) {
      if (det_used[di]) continue;
      Chain c;
      c.id = next_id++;
      c.slices.push_back({z, dets[di].box, dets[di].score});
      open.push_back(std::move(c));
    }
  }
  for (auto& c : open) closed.push_back(std::move(c));

  std::vector<track::Prediction> out;
  for (const auto& c : closed) {
    if (static_cast<int>(c.slices.size()) < min_length) continue;
    double score_sum = 0.0;
    geom::Box3D box;
    box.x0 = box.y0 = std::numeric_limits<double>::infinity();
    box.x1 = box.y1 = -std::numeric_limits<double>::infinity();
    box.z0 = c.slices.front().z;
    box.z1 = c.slices.back().z;
    bool consecutive = true;
    for (std::size_t i = 0; i < c.slices.size(); ++i) {
      if (i > 0 && c.slices[i].z != c.slices[i - 1].z + 1) consecutive = false;
      score_sum += c.slices[i].score;
      const auto p = c.slices[i].box.scaled(nx, ny).xyxy();
      box.x0 = std::min(box.x0, p[0]);
      box.y0 = std::min(box.y0, p[1]);
      box.x1 = std::max(box.x1, p[2]);
      box.y1 = std::max(box.y1, p[3]);
    }
    if (consecutive) {
      std::vector<std::pair<int, geom::Box2D>> stack;
      for (const auto& s : c.slices) stack.emplace_back(s.z, s.box);
      box = geom::box3d_from_stack(stack, nx, ny);
    }
    track::Prediction p;
    p.box = box;
    p.score = score_sum / static_cast<double>(c.slices.size());
    p.id = c.id;
    p.length = static_cast<int>(c.slices.size());
    out.push_back(p);
  }
  std::sort(out.begin(), out.end(),
            [](const track::Prediction& a, const track::Prediction& b) { return a.id < b.id; });
  return out;
}

}  // namespace slicetrack::baseline
