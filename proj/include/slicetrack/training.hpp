#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <future>
#include <json.hpp>
#include <map>
#include <string>
#include <unordered_set>
#include <vector>

#include "slicetrack/losses.hpp"
#include "slicetrack/network.hpp"
#include "slicetrack/synthdata.hpp"

namespace slicetrack::train {

struct TrainConfig {
  int pairs_per_step = 8;
  int total_steps = 2000;
  int warmup_steps = 500;
  double lr = 2e-4;
  double lr_floor = 1e-5;
  double weight_decay = 1e-4;
  double grad_clip = 1.0;  // global norm, 0 disables
  std::uint64_t seed = 0;
  bool augment = true;
  bool sim_loss_enabled = true;  // ablation switch
  int n_threads = 1;
  int checkpoint_every = 500;

  void validate() const {
    require(pairs_per_step >= 1, "TrainConfig: pairs_per_step must be >= 1");
    require(total_steps >= 1, "TrainConfig: total_steps must be >= 1");
    require(warmup_steps >= 0 && warmup_steps <= total_steps,
            "TrainConfig: warmup must be <= total steps");
    require(lr > 0 && lr_floor >= 0 && lr_floor <= lr, "TrainConfig: bad learning rates");
    require(weight_decay >= 0, "TrainConfig: bad weight decay");
    require(n_threads >= 1, "TrainConfig: n_threads must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"pairs_per_step", c.pairs_per_step},
                     {"total_steps", c.total_steps},
                     {"warmup_steps", c.warmup_steps},
                     {"lr", c.lr},
                     {"lr_floor", c.lr_floor},
                     {"weight_decay", c.weight_decay},
                     {"grad_clip", c.grad_clip},
                     {"seed", c.seed},
                     {"augment", c.augment},
                     {"sim_loss_enabled", c.sim_loss_enabled},
                     {"n_threads", c.n_threads},
                     {"checkpoint_every", c.checkpoint_every}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("pairs_per_step").get_to(c.pairs_per_step);
  j.at("total_steps").get_to(c.total_steps);
  j.at("warmup_steps").get_to(c.warmup_steps);
  j.at("lr").get_to(c.lr);
  j.at("lr_floor").get_to(c.lr_floor);
  j.at("weight_decay").get_to(c.weight_decay);
  j.at("grad_clip").get_to(c.grad_clip);
  j.at("seed").get_to(c.seed);
  j.at("augment").get_to(c.augment);
  j.at("sim_loss_enabled").get_to(c.sim_loss_enabled);
  j.at("n_threads").get_to(c.n_threads);
  j.at("checkpoint_every").get_to(c.checkpoint_every);
}

// Warm-up then cosine decay to the floor. step is 1-based.
inline double lr_at(int step, const TrainConfig& cfg) {
  if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps)
    return cfg.lr * static_cast<double>(step) / cfg.warmup_steps;
  const int total = std::max(1, cfg.total_steps - cfg.warmup_steps);
  const double prog = std::clamp(static_cast<double>(step - cfg.warmup_steps) / total, 0.0, 1.0);
  return cfg.lr_floor + (cfg.lr - cfg.lr_floor) * 0.5 * (1.0 + std::cos(M_PI * prog));
}

struct GtBox {
  long id = 0;
  geom::Box2D box;  // normalized cxcywh
};

struct TrainingPair {
  Tensor stack_ref, stack_cur;       // [n_input_slices, H, W]
  std::vector<GtBox> gt_ref, gt_cur;
  long volume_id = 0;
  int z = 0;  // current slice; reference is z-1
};

namespace detail {

inline void flip_stack_x(Tensor& stack) {
  const int S = stack.dim(0), H = stack.dim(1), W = stack.dim(2);
  for (int s = 0; s < S; ++s)
    for (int y = 0; y < H; ++y) {
      double* row = &stack.data[(static_cast<std::size_t>(s) * H + y) * W];
      std::reverse(row, row + W);
    }
}

inline void flip_stack_y(Tensor& stack) {
  const int S = stack.dim(0), H = stack.dim(1), W = stack.dim(2);
  for (int s = 0; s < S; ++s)
    for (int y = 0; y < H / 2; ++y)
      for (int x = 0; x < W; ++x)
        std::swap(stack.data[(static_cast<std::size_t>(s) * H + y) * W + x],
                  stack.data[(static_cast<std::size_t>(s) * H + (H - 1 - y)) * W + x]);
}

}  // namespace detail

// Samples a pair of adjacent slices from a random volume, with identical
// augmentation applied to both members and GT ids carried across the pair.
inline TrainingPair sample_pair(const synth::Dataset& ds, Rng& rng, int n_input_slices,
                                bool augment) {
  if (ds.volumes.empty()) throw DataError("sample_pair: empty dataset");
  const auto& rec = ds.volumes[rng.uniform_below(ds.volumes.size())];
  const int nz = rec.volume.shape[2];
  if (nz < 2) throw DataError("sample_pair: volume needs at least 2 slices");
  const int z = 1 + static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(nz - 1)));

  TrainingPair pair;
  pair.volume_id = rec.id;
  pair.z = z;
  pair.stack_ref = synth::slice_stack(rec.volume, z - 1, n_input_slices);
  pair.stack_cur = synth::slice_stack(rec.volume, z, n_input_slices);

  const int nx = rec.volume.shape[0], ny = rec.volume.shape[1];
  for (const auto& inst : rec.instances) {
    if (auto box = synth::normalized_slice_box(inst, z - 1, nx, ny))
      pair.gt_ref.push_back({inst.id, *box});
    if (auto box = synth::normalized_slice_box(inst, z, nx, ny))
      pair.gt_cur.push_back({inst.id, *box});
  }

  if (augment) {
    const bool fx = rng.uniform() < 0.5;
    const bool fy = rng.uniform() < 0.5;
    const double gain = rng.uniform(0.9, 1.1);
    const double shift = rng.uniform(-0.05, 0.05);
    auto apply = [&](Tensor& stack, std::vector<GtBox>& boxes) {
      if (fx) detail::flip_stack_x(stack);
      if (fy) detail::flip_stack_y(stack);
      for (double& v : stack.data) v = v * gain + shift;
      for (auto& gt : boxes) {
        if (fx) gt.box.cx = 1.0 - gt.box.cx;
        if (fy) gt.box.cy = 1.0 - gt.box.cy;
      }
    };
    apply(pair.stack_ref, pair.gt_ref);
    apply(pair.stack_cur, pair.gt_cur);
  }
  return pair;
}

// Hungarian-matches the reference forward pass against the reference GT and
// turns each matched query into a track query: final-layer output embedding,
// predicted box as the autoregressive anchor, GT id as identity. One track
// query per reference GT box, ordered by GT index.
inline net::TrackQuerySet init_track_queries(const net::SliceForward& ref_fwd,
                                             const std::vector<GtBox>& ref_gt,
                                             const losses::LossWeights& w = {}) {
  net::TrackQuerySet set;
  if (ref_gt.empty()) return set;
  if (ref_fwd.n_track != 0)
    throw DataError("init_track_queries: reference pass must have no track queries");
  const auto& fin = ref_fwd.final_layer();
  const int n_det = ref_fwd.n_det;

  matching::CostMatrix cost(n_det, static_cast<int>(ref_gt.size()));
  for (int i = 0; i < n_det; ++i) {
    const geom::Box2D pb{fin.boxes->val.at(i, 0), fin.boxes->val.at(i, 1), fin.boxes->val.at(i, 2),
                         fin.boxes->val.at(i, 3)};
    for (std::size_t j = 0; j < ref_gt.size(); ++j)
      cost.at(i, static_cast<int>(j)) =
          matching::pair_cost(fin.scores->val.at(i, 0), pb, ref_gt[j].box, w.match_weights());
  }
  auto assignment = matching::hungarian(cost);
  std::sort(assignment.begin(), assignment.end(),
            [](const auto& a, const auto& b) { return a.second < b.second; });
  for (const auto& [qi, gi] : assignment) {
    net::TrackQuery q;
    q.id = ref_gt[static_cast<std::size_t>(gi)].id;
    q.valid = true;
    q.embedding = ad::slice_rows(fin.embed, qi, qi + 1);
    q.ref_box = ad::slice_rows(fin.boxes, qi, qi + 1);
    set.queries.push_back(std::move(q));
  }
  return set;
}

struct ElementLosses {
  ad::NodePtr total;
  double det_cur = 0.0, det_ref = 0.0, track = 0.0, sim = 0.0;
};

// Builds the full loss graph for one slice pair: reference pass (detection
// supervision), track-query init, current pass with padded track queries, and
// the decoupled per-layer losses plus the final-layer similarity loss.
inline ElementLosses element_losses(const net::Model& model, nn::ParamGraph& pg,
                                    const TrainingPair& pair, int pad_to_width,
                                    const losses::LossWeights& w, bool sim_enabled) {
  std::vector<geom::Box2D> ref_boxes, cur_boxes;
  for (const auto& g : pair.gt_ref) ref_boxes.push_back(g.box);
  for (const auto& g : pair.gt_cur) cur_boxes.push_back(g.box);

  const auto ref_fwd = model.forward(pg, pair.stack_ref, {});
  std::vector<ad::NodePtr> det_ref_layers;
  for (const auto& layer : ref_fwd.layers)
    det_ref_layers.push_back(losses::det_loss_node(layer.scores, layer.boxes, ref_boxes, w));

  net::TrackQuerySet track = init_track_queries(ref_fwd, pair.gt_ref, w);
  const std::vector<net::TrackQuery> valid_queries = track.queries;  // pre-padding
  while (track.size() < pad_to_width)
    track.queries.push_back(net::make_padded_query(model.config().query_dim));

  const auto cur_fwd = model.forward(pg, pair.stack_cur, track);
  const int nt = cur_fwd.n_track;

  std::unordered_set<long> cur_ids;
  std::map<long, geom::Box2D> cur_box_by_id;
  for (const auto& g : pair.gt_cur) {
    cur_ids.insert(g.id);
    cur_box_by_id[g.id] = g.box;
  }
  std::vector<losses::TrackTarget> targets;
  std::vector<bool> persists;
  for (const auto& q : valid_queries) {
    const bool alive = cur_ids.count(q.id) != 0;
    persists.push_back(alive);
    targets.push_back({alive, alive ? cur_box_by_id[q.id] : geom::Box2D{}});
  }

  std::vector<ad::NodePtr> det_cur_layers, track_layers;
  for (const auto& layer : cur_fwd.layers) {
    auto det_scores = ad::slice_rows(layer.scores, nt, nt + cur_fwd.n_det);
    auto det_boxes = ad::slice_rows(layer.boxes, nt, nt + cur_fwd.n_det);
    det_cur_layers.push_back(losses::det_loss_node(det_scores, det_boxes, cur_boxes, w));
    if (!cur_fwd.valid_track_rows.empty()) {
      auto t_scores = ad::gather_rows(layer.scores, cur_fwd.valid_track_rows);
      auto t_boxes = ad::gather_rows(layer.boxes, cur_fwd.valid_track_rows);
      track_layers.push_back(losses::track_loss_node(t_scores, t_boxes, targets, w));
    } else {
      track_layers.push_back(ad::constant(0.0));
    }
  }

  ad::NodePtr sim = ad::constant(0.0);
  if (sim_enabled && !valid_queries.empty()) {
    std::vector<ad::NodePtr> prev_parts;
    for (const auto& q : valid_queries) prev_parts.push_back(q.embedding);
    auto q_prev = model.project_similarity(pg, ad::concat_rows(prev_parts));
    auto q_curr = model.project_similarity(
        pg, ad::gather_rows(cur_fwd.final_layer().embed, cur_fwd.valid_track_rows));
    auto logits = net::similarity_logits(q_prev, q_curr);
    sim = losses::similarity_loss_node(logits, losses::affinity_diagonal(persists), w.score_eps);
  }

  ElementLosses out;
  out.total = losses::total_loss(track_layers, det_cur_layers, sim);
  for (const auto& d : det_ref_layers) out.total = ad::add(out.total, d);
  for (const auto& d : det_cur_layers) out.det_cur += d->scalar();
  for (const auto& d : det_ref_layers) out.det_ref += d->scalar();
  for (const auto& t : track_layers) out.track += t->scalar();
  out.sim = sim->scalar();
  return out;
}

// ---- optimizer ----------------------------------------------------------

// Rectified Adam with decoupled weight decay. Satisfies the schedule contract
// (warm-up then cosine to the floor) through lr_at().
class RAdam {
 public:
  RAdam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(nn::ParamStore& params, const std::map<std::string, Tensor>& grads, double lr,
            double weight_decay) {
    ++t_;
    const double b1t = std::pow(beta1_, t_);
    const double b2t = std::pow(beta2_, t_);
    const double rho_inf = 2.0 / (1.0 - beta2_) - 1.0;
    const double rho_t = rho_inf - 2.0 * t_ * b2t / (1.0 - b2t);
    double rect = 0.0;
    const bool rectified = rho_t > 4.0;
    if (rectified)
      rect = std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) /
                       ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
    for (const auto& name : params.names()) {
      Tensor& theta = params.at(name);
      const Tensor& g = grads.at(name);
      Tensor& m = moment(m_, name, theta.shape);
      Tensor& v = moment(v_, name, theta.shape);
      for (std::size_t i = 0; i < theta.numel(); ++i) {
        m.data[i] = beta1_ * m.data[i] + (1.0 - beta1_) * g.data[i];
        v.data[i] = beta2_ * v.data[i] + (1.0 - beta2_) * g.data[i] * g.data[i];
        const double m_hat = m.data[i] / (1.0 - b1t);
        double update;
        if (rectified) {
          const double v_hat = std::sqrt(v.data[i] / (1.0 - b2t));
          update = rect * m_hat / (v_hat + eps_);
        } else {
          update = m_hat;
        }
        theta.data[i] -= lr * update + lr * weight_decay * theta.data[i];
      }
    }
  }

  int steps_taken() const { return t_; }
  void set_steps_taken(int t) { t_ = t; }

  std::map<std::string, Tensor> state() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, t] : m_) out[name + ".m"] = t;
    for (const auto& [name, t] : v_) out[name + ".v"] = t;
    return out;
  }

  void restore(const std::map<std::string, Tensor>& state) {
    for (const auto& [name, t] : state) {
      if (name.size() > 2 && name.substr(name.size() - 2) == ".m")
        m_[name.substr(0, name.size() - 2)] = t;
      else if (name.size() > 2 && name.substr(name.size() - 2) == ".v")
        v_[name.substr(0, name.size() - 2)] = t;
    }
  }

 private:
  static Tensor& moment(std::map<std::string, Tensor>& store, const std::string& name,
                        const std::vector<int>& shape) {
    auto it = store.find(name);
    if (it == store.end()) it = store.emplace(name, Tensor::zeros(shape)).first;
    return it->second;
  }

  double beta1_, beta2_, eps_;
  int t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

struct StepMetrics {
  int step = 0;
  double lr = 0.0;
  double total = 0.0, det = 0.0, det_ref = 0.0, track = 0.0, sim = 0.0;
  double grad_norm = 0.0;
};

// One optimizer step: sample a batch of slice pairs, pad track widths, run
// per-element graphs (optionally on worker threads; gradients are summed in
// element order so results are thread-count independent), then update.
class Trainer {
 public:
  Trainer(net::Model& model, TrainConfig cfg, losses::LossWeights weights = {})
      : model_(&model), cfg_(cfg), weights_(weights) {
    cfg_.validate();
  }

  int step_count() const { return step_; }
  void set_step_count(int s) {
    step_ = s;
    opt_.set_steps_taken(s);
  }
  RAdam& optimizer() { return opt_; }
  const TrainConfig& config() const { return cfg_; }

  StepMetrics step(const synth::Dataset& data) {
    const int b = cfg_.pairs_per_step;
    std::vector<TrainingPair> pairs;
    pairs.reserve(static_cast<std::size_t>(b));
    for (int e = 0; e < b; ++e) {
      Rng rng(cfg_.seed, (static_cast<std::uint64_t>(step_) << 32) | static_cast<std::uint64_t>(e));
      pairs.push_back(
          sample_pair(data, rng, model_->config().n_input_slices, cfg_.augment));
    }
    // shared track width across the batch (parallel-training padding contract)
    int width = 0;
    for (const auto& p : pairs) width = std::max(width, static_cast<int>(p.gt_ref.size()));

    struct ElementResult {
      std::map<std::string, Tensor> grads;
      double total = 0, det = 0, det_ref = 0, track = 0, sim = 0;
    };
    auto run_element = [&](const TrainingPair& pair) {
      ElementResult res;
      nn::ParamGraph pg(model_->params(), true);
      auto el = element_losses(*model_, pg, pair, width, weights_, cfg_.sim_loss_enabled);
      res.total = el.total->scalar();
      res.det = el.det_cur;
      res.det_ref = el.det_ref;
      res.track = el.track;
      res.sim = el.sim;
      ad::backward(el.total);
      for (const auto& name : model_->params().names()) res.grads[name] = pg.grad(name);
      return res;
    };

    std::vector<ElementResult> results(static_cast<std::size_t>(b));
    if (cfg_.n_threads > 1) {
      std::vector<std::future<ElementResult>> futures;
      for (int e = 0; e < b; ++e)
        futures.push_back(
            std::async(std::launch::async, [&, e] { return run_element(pairs[e]); }));
      for (int e = 0; e < b; ++e) results[e] = futures[e].get();
    } else {
      for (int e = 0; e < b; ++e) results[e] = run_element(pairs[e]);
    }

    StepMetrics metrics;
    metrics.step = step_ + 1;
    std::map<std::string, Tensor> grads;
    for (const auto& name : model_->params().names())
      grads[name] = Tensor::zeros(model_->params().at(name).shape);
    for (const auto& res : results) {
      metrics.total += res.total / b;
      metrics.det += res.det / b;
      metrics.det_ref += res.det_ref / b;
      metrics.track += res.track / b;
      metrics.sim += res.sim / b;
      for (auto& [name, g] : grads) {
        const Tensor& eg = res.grads.at(name);
        for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += eg.data[i] / b;
      }
    }
    if (!std::isfinite(metrics.total))
      throw NumericError("training_step: non-finite loss at step " +
                         std::to_string(metrics.step) + " (total=" +
                         std::to_string(metrics.total) + ")");

    double norm2 = 0.0;
    for (const auto& [name, g] : grads)
      for (double x : g.data) norm2 += x * x;
    metrics.grad_norm = std::sqrt(norm2);
    if (!std::isfinite(metrics.grad_norm))
      throw NumericError("training_step: non-finite gradient at step " +
                         std::to_string(metrics.step));
    if (cfg_.grad_clip > 0.0 && metrics.grad_norm > cfg_.grad_clip) {
      const double scale = cfg_.grad_clip / metrics.grad_norm;
      for (auto& [name, g] : grads)
        for (double& x : g.data) x *= scale;
    }

    metrics.lr = lr_at(step_ + 1, cfg_);
    opt_.step(model_->params(), grads, metrics.lr, cfg_.weight_decay);
    ++step_;
    return metrics;
  }

 private:
  net::Model* model_;
  TrainConfig cfg_;
  losses::LossWeights weights_;
  RAdam opt_;
  int step_ = 0;
};

}  // namespace slicetrack::train
