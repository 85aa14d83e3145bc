#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "slicetrack/common.hpp"

namespace slicetrack::geom {

// Axis-aligned 2D box, center/size representation. Network-facing boxes are
// normalized to [0,1] slice coordinates; ground-truth helpers also use the
// same struct in voxel units (callers convert via scaled()).
struct Box2D {
  double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;

  static Box2D from_xyxy(double x0, double y0, double x1, double y1) {
    return {0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0};
  }

  std::array<double, 4> xyxy() const {
    return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
  }

  double area() const { return (w > 0.0 && h > 0.0) ? w * h : 0.0; }

  Box2D scaled(double fx, double fy) const { return {cx * fx, cy * fy, w * fx, h * fy}; }
};

// Axis-aligned 3D box: continuous x/y corners in voxel coordinates and an
// inclusive slice range [z0, z1]. A single-slice box has z0 == z1 and unit
// z thickness, so its volume stays positive.
struct Box3D {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;
  int z0 = 0, z1 = 0;

  double volume() const {
    if (x1 <= x0 || y1 <= y0 || z1 < z0) return 0.0;
    return (x1 - x0) * (y1 - y0) * static_cast<double>(z1 - z0 + 1);
  }
  int n_slices() const { return z1 - z0 + 1; }
};

inline double iou2d(const Box2D& a, const Box2D& b) {
  const auto pa = a.xyxy();
  const auto pb = b.xyxy();
  const double iw = std::min(pa[2], pb[2]) - std::max(pa[0], pb[0]);
  const double ih = std::min(pa[3], pb[3]) - std::max(pa[1], pb[1]);
  const double inter = (iw > 0.0 && ih > 0.0) ? iw * ih : 0.0;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// Generalized IoU: iou - (hull - union) / hull, in [-1, 1]. Degenerate boxes
// contribute zero area so the value reduces to the hull penalty alone.
inline double giou2d(const Box2D& a, const Box2D& b) {
  const auto pa = a.xyxy();
  const auto pb = b.xyxy();
  const double iw = std::min(pa[2], pb[2]) - std::max(pa[0], pb[0]);
  const double ih = std::min(pa[3], pb[3]) - std::max(pa[1], pb[1]);
  const double inter = (iw > 0.0 && ih > 0.0) ? iw * ih : 0.0;
  const double uni = a.area() + b.area() - inter;
  const double hw = std::max(pa[2], pb[2]) - std::min(pa[0], pb[0]);
  const double hh = std::max(pa[3], pb[3]) - std::min(pa[1], pb[1]);
  const double hull = (hw > 0.0 && hh > 0.0) ? hw * hh : 0.0;
  if (hull <= 0.0) return 0.0;
  const double iou = uni > 0.0 ? inter / uni : 0.0;
  return iou - (hull - uni) / hull;
}

inline double iou3d(const Box3D& a, const Box3D& b) {
  const double iw = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double ih = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  const int iz = std::min(a.z1, b.z1) - std::max(a.z0, b.z0) + 1;
  if (iw <= 0.0 || ih <= 0.0 || iz <= 0) return 0.0;
  const double inter = iw * ih * static_cast<double>(iz);
  const double uni = a.volume() + b.volume() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// Collapses a run of per-slice boxes (normalized coordinates) into one Box3D
// in voxel coordinates. The z values must be consecutive after sorting; the
// xy extent is the union of the member boxes.
inline Box3D box3d_from_stack(std::span<const std::pair<int, Box2D>> slices, int nx, int ny) {
  if (slices.empty()) throw DataError("box3d_from_stack: empty slice list");
  std::vector<std::pair<int, Box2D>> sorted(slices.begin(), slices.end());
  std::sort(sorted.begin(), sorted.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i].first != sorted[i - 1].first + 1)
      throw DataError("box3d_from_stack: non-consecutive z indices");
  }
  Box3D out;
  out.z0 = sorted.front().first;
  out.z1 = sorted.back().first;
  out.x0 = out.y0 = std::numeric_limits<double>::infinity();
  out.x1 = out.y1 = -std::numeric_limits<double>::infinity();
  for (const auto& [z, box] : sorted) {
    const auto p = box.scaled(static_cast<double>(nx), static_cast<double>(ny)).xyxy();
    out.x0 = std::min(out.x0, p[0]);
    out.y0 = std::min(out.y0, p[1]);
    out.x1 = std::max(out.x1, p[2]);
    out.y1 = std::max(out.y1, p[3]);
  }
  return out;
}

}  // namespace slicetrack::geom
