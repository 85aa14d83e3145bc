#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "slicetrack/autodiff.hpp"
#include "slicetrack/geometry.hpp"
#include "slicetrack/matching.hpp"

namespace slicetrack::losses {

struct LossWeights {
  double lambda_cls = 1.0;
  double lambda_box = 2.0;
  double w_l1 = 5.0;
  double w_giou = 2.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double score_eps = 1e-7;

  matching::MatchWeights match_weights() const {
    return {lambda_cls, lambda_box, w_l1, w_giou, focal_alpha, focal_gamma};
  }
};

struct QueryPred {
  double score = 0.0;
  geom::Box2D box;
};

struct TrackTarget {
  bool persists = false;
  geom::Box2D box;  // current-slice GT box; ignored when the instance ended
};

// ---- scalar (plain value) forms --------------------------------------------

inline double focal_loss(double p, int y, double alpha = 0.25, double gamma = 2.0,
                         double eps = 1e-7) {
  const double pc = std::clamp(p, eps, 1.0 - eps);
  if (y == 1) return -alpha * std::pow(1.0 - pc, gamma) * std::log(pc);
  return -(1.0 - alpha) * std::pow(pc, gamma) * std::log(1.0 - pc);
}

inline double box_loss(const geom::Box2D& pred, const geom::Box2D& gt, double w_l1 = 5.0,
                       double w_giou = 2.0) {
  const double l1 = std::abs(pred.cx - gt.cx) + std::abs(pred.cy - gt.cy) +
                    std::abs(pred.w - gt.w) + std::abs(pred.h - gt.h);
  return w_l1 * l1 + w_giou * (1.0 - geom::giou2d(pred, gt));
}

// Track queries are supervised against their own instance by identity: class 1
// with a box term while the instance persists, class 0 alone once it ended.
// Normalized by the number of valid track queries.
inline double track_loss(std::span<const QueryPred> outputs, std::span<const TrackTarget> targets,
                         const LossWeights& w = {}) {
  if (outputs.size() != targets.size())
    throw DataError("track_loss: output/target count mismatch");
  if (outputs.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    const int y = targets[i].persists ? 1 : 0;
    total += w.lambda_cls * focal_loss(outputs[i].score, y, w.focal_alpha, w.focal_gamma,
                                       w.score_eps);
    if (targets[i].persists)
      total += w.lambda_box * box_loss(outputs[i].box, targets[i].box, w.w_l1, w.w_giou);
  }
  return total / static_cast<double>(outputs.size());
}

// Detection queries: Hungarian-matched queries get class-1 focal plus the box
// term, the rest get class-0 focal. Every GT box participates regardless of
// tracking status. Normalized by max(1, n_gt) (DETR convention).
inline double det_loss(std::span<const QueryPred> outputs, std::span<const geom::Box2D> gts,
                       const LossWeights& w = {}) {
  std::vector<char> matched(outputs.size(), 0);
  double total = 0.0;
  if (!gts.empty() && !outputs.empty()) {
    matching::CostMatrix cost(static_cast<int>(outputs.size()), static_cast<int>(gts.size()));
    for (std::size_t i = 0; i < outputs.size(); ++i)
      for (std::size_t j = 0; j < gts.size(); ++j)
        cost.at(static_cast<int>(i), static_cast<int>(j)) =
            matching::pair_cost(outputs[i].score, outputs[i].box, gts[j], w.match_weights());
    for (const auto& [qi, gi] : matching::hungarian(cost)) {
      matched[qi] = 1;
      total += w.lambda_cls *
               focal_loss(outputs[qi].score, 1, w.focal_alpha, w.focal_gamma, w.score_eps);
      total += w.lambda_box * box_loss(outputs[qi].box, gts[gi], w.w_l1, w.w_giou);
    }
  }
  for (std::size_t i = 0; i < outputs.size(); ++i)
    if (!matched[i])
      total += w.lambda_cls *
               focal_loss(outputs[i].score, 0, w.focal_alpha, w.focal_gamma, w.score_eps);
  return total / std::max<std::size_t>(std::size_t{1}, gts.size());
}

inline double bce_logit(double logit, double target, double eps = 1e-7) {
  const double p = std::clamp(1.0 / (1.0 + std::exp(-logit)), eps, 1.0 - eps);
  return -target * std::log(p) - (1.0 - target) * std::log(1.0 - p);
}

// Mean BCE between sigmoid(logits) and a binary affinity matrix.
inline double similarity_loss(const std::vector<std::vector<double>>& logits,
                              const std::vector<std::vector<double>>& affinity,
                              double eps = 1e-7) {
  if (logits.empty()) return 0.0;
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (logits[i].size() != affinity[i].size())
      throw DataError("similarity_loss: affinity shape mismatch");
    for (std::size_t j = 0; j < logits[i].size(); ++j, ++n)
      total += bce_logit(logits[i][j], affinity[i][j], eps);
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

// ---- autodiff (node) forms ---------------------------------------------------

// Per-element focal loss; p and the returned losses are [m,1].
inline ad::NodePtr focal_rows(const ad::NodePtr& p, const std::vector<double>& targets,
                              const LossWeights& w = {}) {
  const int m = p->val.dim(0);
  if (static_cast<int>(targets.size()) != m) throw DataError("focal_rows: target count mismatch");
  std::vector<double> y = targets;
  auto yv = ad::leaf(Tensor({m, 1}, std::move(y)));
  auto ones = ad::leaf(Tensor::full({m, 1}, 1.0));
  auto pc = ad::clamp(p, w.score_eps, 1.0 - w.score_eps);
  auto one_m_p = ad::sub(ones, pc);
  auto pos = ad::scale(ad::mul(ad::pow_const(one_m_p, w.focal_gamma), ad::log(pc)),
                       -w.focal_alpha);
  auto neg = ad::scale(ad::mul(ad::pow_const(pc, w.focal_gamma), ad::log(one_m_p)),
                       -(1.0 - w.focal_alpha));
  return ad::add(ad::mul(yv, pos), ad::mul(ad::sub(ones, yv), neg));
}

inline ad::NodePtr boxes_to_xyxy(const ad::NodePtr& cxcywh) {
  auto cx = ad::slice_cols(cxcywh, 0, 1);
  auto cy = ad::slice_cols(cxcywh, 1, 2);
  auto hw = ad::scale(ad::slice_cols(cxcywh, 2, 3), 0.5);
  auto hh = ad::scale(ad::slice_cols(cxcywh, 3, 4), 0.5);
  return ad::concat_cols({ad::sub(cx, hw), ad::sub(cy, hh), ad::add(cx, hw), ad::add(cy, hh)});
}

// Row-wise GIoU between two [m,4] cxcywh box sets (positive extents assumed).
inline ad::NodePtr giou_rows(const ad::NodePtr& a, const ad::NodePtr& b) {
  auto pa = boxes_to_xyxy(a);
  auto pb = boxes_to_xyxy(b);
  auto col = [](const ad::NodePtr& t, int i) { return ad::slice_cols(t, i, i + 1); };
  auto iw = ad::relu(ad::sub(ad::min_elt(col(pa, 2), col(pb, 2)),
                             ad::max_elt(col(pa, 0), col(pb, 0))));
  auto ih = ad::relu(ad::sub(ad::min_elt(col(pa, 3), col(pb, 3)),
                             ad::max_elt(col(pa, 1), col(pb, 1))));
  auto inter = ad::mul(iw, ih);
  auto area_a = ad::mul(ad::slice_cols(a, 2, 3), ad::slice_cols(a, 3, 4));
  auto area_b = ad::mul(ad::slice_cols(b, 2, 3), ad::slice_cols(b, 3, 4));
  auto uni = ad::sub(ad::add(area_a, area_b), inter);
  auto hw = ad::sub(ad::max_elt(col(pa, 2), col(pb, 2)), ad::min_elt(col(pa, 0), col(pb, 0)));
  auto hh = ad::sub(ad::max_elt(col(pa, 3), col(pb, 3)), ad::min_elt(col(pa, 1), col(pb, 1)));
  auto hull = ad::mul(hw, hh);
  return ad::sub(ad::div(inter, uni), ad::div(ad::sub(hull, uni), hull));
}

// Row-wise w_l1 * L1 + w_giou * (1 - GIoU); [m,1].
inline ad::NodePtr box_loss_rows(const ad::NodePtr& pred, const ad::NodePtr& gt,
                                 const LossWeights& w = {}) {
  auto ones4 = ad::leaf(Tensor::full({4, 1}, 1.0));
  auto l1 = ad::matmul(ad::abs(ad::sub(pred, gt)), ones4);
  const int m = pred->val.dim(0);
  auto one_col = ad::leaf(Tensor::full({m, 1}, 1.0));
  auto giou_term = ad::sub(one_col, giou_rows(pred, gt));
  return ad::add(ad::scale(l1, w.w_l1), ad::scale(giou_term, w.w_giou));
}

// Node form of track_loss. scores [m,1], boxes [m,4] must already be gathered
// to the valid track rows, index-aligned with targets.
inline ad::NodePtr track_loss_node(const ad::NodePtr& scores, const ad::NodePtr& boxes,
                                   std::span<const TrackTarget> targets,
                                   const LossWeights& w = {}) {
  const int m = scores->val.dim(0);
  if (static_cast<int>(targets.size()) != m)
    throw DataError("track_loss_node: target count mismatch");
  if (m == 0) return ad::constant(0.0);
  std::vector<double> cls_targets(m);
  std::vector<int> persisting;
  for (int i = 0; i < m; ++i) {
    cls_targets[i] = targets[i].persists ? 1.0 : 0.0;
    if (targets[i].persists) persisting.push_back(i);
  }
  auto total = ad::scale(ad::sum(focal_rows(scores, cls_targets, w)), w.lambda_cls);
  if (!persisting.empty()) {
    Tensor gt({static_cast<int>(persisting.size()), 4});
    for (std::size_t r = 0; r < persisting.size(); ++r) {
      const auto& b = targets[persisting[r]].box;
      gt.at(static_cast<int>(r), 0) = b.cx;
      gt.at(static_cast<int>(r), 1) = b.cy;
      gt.at(static_cast<int>(r), 2) = b.w;
      gt.at(static_cast<int>(r), 3) = b.h;
    }
    auto pred = ad::gather_rows(boxes, persisting);
    auto box_term = ad::sum(box_loss_rows(pred, ad::leaf(std::move(gt)), w));
    total = ad::add(total, ad::scale(box_term, w.lambda_box));
  }
  return ad::scale(total, 1.0 / m);
}

// Node form of det_loss. Assignment is computed from current values (the
// standard non-differentiable matching step); the loss itself is a node.
inline ad::NodePtr det_loss_node(const ad::NodePtr& scores, const ad::NodePtr& boxes,
                                 std::span<const geom::Box2D> gts, const LossWeights& w = {}) {
  const int n = scores->val.dim(0);
  if (n == 0) return ad::constant(0.0);
  std::vector<double> cls_targets(n, 0.0);
  std::vector<int> matched_q;
  std::vector<int> matched_g;
  if (!gts.empty()) {
    matching::CostMatrix cost(n, static_cast<int>(gts.size()));
    for (int i = 0; i < n; ++i)
      for (std::size_t j = 0; j < gts.size(); ++j) {
        const geom::Box2D pb{boxes->val.at(i, 0), boxes->val.at(i, 1), boxes->val.at(i, 2),
                             boxes->val.at(i, 3)};
        cost.at(i, static_cast<int>(j)) =
            matching::pair_cost(scores->val.at(i, 0), pb, gts[j], w.match_weights());
      }
    for (const auto& [qi, gi] : matching::hungarian(cost)) {
      cls_targets[qi] = 1.0;
      matched_q.push_back(qi);
      matched_g.push_back(gi);
    }
  }
  auto total = ad::scale(ad::sum(focal_rows(scores, cls_targets, w)), w.lambda_cls);
  if (!matched_q.empty()) {
    Tensor gt({static_cast<int>(matched_q.size()), 4});
    for (std::size_t r = 0; r < matched_q.size(); ++r) {
      const auto& b = gts[matched_g[r]];
      gt.at(static_cast<int>(r), 0) = b.cx;
      gt.at(static_cast<int>(r), 1) = b.cy;
      gt.at(static_cast<int>(r), 2) = b.w;
      gt.at(static_cast<int>(r), 3) = b.h;
    }
    auto pred = ad::gather_rows(boxes, matched_q);
    auto box_term = ad::sum(box_loss_rows(pred, ad::leaf(std::move(gt)), w));
    total = ad::add(total, ad::scale(box_term, w.lambda_box));
  }
  return ad::scale(total, 1.0 / std::max<std::size_t>(std::size_t{1}, gts.size()));
}

// Binary affinity target for index-aligned track queries: the diagonal is 1
// exactly where the instance survives onto the current slice.
inline Tensor affinity_diagonal(const std::vector<bool>& persists) {
  const int n = static_cast<int>(persists.size());
  Tensor a({n, n});
  for (int i = 0; i < n; ++i) a.at(i, i) = persists[i] ? 1.0 : 0.0;
  return a;
}

// Mean BCE between sigmoid(logits) and a binary affinity matrix; node form.
inline ad::NodePtr similarity_loss_node(const ad::NodePtr& logits, const Tensor& affinity,
                                        double eps = 1e-7) {
  if (logits->val.numel() == 0) return ad::constant(0.0);
  if (!(logits->val.shape == affinity.shape))
    throw DataError("similarity_loss_node: affinity shape mismatch");
  const int m = logits->val.dim(0), n = logits->val.dim(1);
  auto y = ad::leaf(affinity);
  auto ones = ad::leaf(Tensor::full({m, n}, 1.0));
  auto p = ad::clamp(ad::sigmoid(logits), eps, 1.0 - eps);
  auto pos = ad::mul(y, ad::log(p));
  auto neg = ad::mul(ad::sub(ones, y), ad::log(ad::sub(ones, p)));
  return ad::scale(ad::sum(ad::add(pos, neg)), -1.0 / static_cast<double>(m * n));
}

// Total objective: auxiliary track+det losses after every decoder layer,
// similarity loss once on the final layer's track embeddings.
inline ad::NodePtr total_loss(std::span<const ad::NodePtr> track_per_layer,
                              std::span<const ad::NodePtr> det_per_layer,
                              const ad::NodePtr& sim) {
  ad::NodePtr total = ad::constant(0.0);
  for (const auto& t : track_per_layer) total = ad::add(total, t);
  for (const auto& d : det_per_layer) total = ad::add(total, d);
  return ad::add(total, sim);
}

}  // namespace slicetrack::losses
