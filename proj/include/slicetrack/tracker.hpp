#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "slicetrack/common.hpp"
#include "slicetrack/geometry.hpp"
#include "slicetrack/network.hpp"
#include "slicetrack/synthdata.hpp"
#include "slicetrack/tensor.hpp"

namespace slicetrack::track {

using nlohmann::json;

struct TrackerConfig {
  double tau_det = 0.3;
  double tau_track = 0.3;
  double tau_sim = 0.5;
  double redetect_iou = 0.5;
  int min_track_length = 1;
  bool sweep_top_down = false;  // default: bottom slice first

  void validate() const {
    require(tau_det >= 0 && tau_det <= 1, "TrackerConfig: tau_det must be in [0,1]");
    require(tau_track >= 0 && tau_track <= 1, "TrackerConfig: tau_track must be in [0,1]");
    require(tau_sim >= 0 && tau_sim <= 1, "TrackerConfig: tau_sim must be in [0,1]");
    require(redetect_iou >= 0 && redetect_iou <= 1, "TrackerConfig: bad redetect_iou");
    require(min_track_length >= 1, "TrackerConfig: min_track_length must be >= 1");
  }
};

inline void to_json(json& j, const TrackerConfig& c) {
  j = json{{"tau_det", c.tau_det},           {"tau_track", c.tau_track},
           {"tau_sim", c.tau_sim},           {"redetect_iou", c.redetect_iou},
           {"min_track_length", c.min_track_length}, {"sweep_top_down", c.sweep_top_down}};
}

inline void from_json(const json& j, TrackerConfig& c) {
  if (j.contains("tau_det")) j.at("tau_det").get_to(c.tau_det);
  if (j.contains("tau_track")) j.at("tau_track").get_to(c.tau_track);
  if (j.contains("tau_sim")) j.at("tau_sim").get_to(c.tau_sim);
  if (j.contains("redetect_iou")) j.at("redetect_iou").get_to(c.redetect_iou);
  if (j.contains("min_track_length")) j.at("min_track_length").get_to(c.min_track_length);
  if (j.contains("sweep_top_down")) j.at("sweep_top_down").get_to(c.sweep_top_down);
}

// Per-slice inputs to the engine, network-free so scripted streams can drive
// the state machine directly in tests.
struct TrackObservation {
  double score = 0.0;        // current-slice re-localization score
  geom::Box2D box;           // normalized
  double sim = 1.0;          // sigmoid(phi(q') . phi(q)) against the prior query
  Tensor embedding;          // updated query content
};

struct DetObservation {
  double score = 0.0;
  geom::Box2D box;
  Tensor embedding;
};

struct SliceObservations {
  int z = 0;
  std::vector<TrackObservation> track;  // aligned with the engine's live tracklets
  std::vector<DetObservation> det;
};

struct TrackletSlice {
  int z = 0;
  geom::Box2D box;
  double score = 0.0;
};

struct Tracklet {
  long id = 0;
  std::vector<TrackletSlice> slices;  // in sweep order; z steps by +-1
  Tensor query;                       // current content embedding
};

struct Prediction {
  geom::Box3D box;
  double score = 0.0;  // mean of member slice scores
  long id = 0;
  int length = 0;
};

inline void to_json(json& j, const Prediction& p) {
  j = json{{"box3d", {p.box.x0, p.box.y0, p.box.x1, p.box.y1, p.box.z0, p.box.z1}},
           {"score", p.score},
           {"id", p.id},
           {"length", p.length}};
}

inline void from_json(const json& j, Prediction& p) {
  const auto& b = j.at("box3d");
  p.box = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
           b.at(3).get<double>(), b.at(4).get<int>(), b.at(5).get<int>()};
  j.at("score").get_to(p.score);
  j.at("id").get_to(p.id);
  j.at("length").get_to(p.length);
}

// The autoregressive sweep state machine: extends or terminates live
// tracklets with score and similarity gates, suppresses re-detections against
// live tracklets, births new tracklets from surviving detections, and emits
// one 3D box per finished tracklet.
class TrackerEngine {
 public:
  TrackerEngine(TrackerConfig cfg, int nx, int ny) : cfg_(cfg), nx_(nx), ny_(ny) {
    cfg_.validate();
  }

  const std::vector<Tracklet>& live() const { return live_; }
  const std::vector<Prediction>& emitted() const { return emitted_; }
  long next_id() const { return next_id_; }

  void process_slice(const SliceObservations& obs) {
    if (obs.track.size() != live_.size())
      throw DataError("process_slice: track observations (" + std::to_string(obs.track.size()) +
                      ") misaligned with live tracklets (" + std::to_string(live_.size()) + ")");

    // extend or finalize existing tracklets
    std::vector<Tracklet> survivors;
    for (std::size_t i = 0; i < live_.size(); ++i) {
      const auto& ob = obs.track[i];
      if (ob.score > cfg_.tau_track && ob.sim > cfg_.tau_sim) {
        Tracklet t = std::move(live_[i]);
        t.slices.push_back({obs.z, ob.box, ob.score});
        t.query = ob.embedding;
        survivors.push_back(std::move(t));
      } else {
        emit(live_[i]);
      }
    }
    live_ = std::move(survivors);

    // births, strongest detections first; a detection overlapping any live
    // tracklet's current-slice box is a re-detection and is dropped
    std::vector<std::size_t> order(obs.det.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return obs.det[a].score > obs.det[b].score;
    });
    for (std::size_t k : order) {
      const auto& d = obs.det[k];
      if (d.score <= cfg_.tau_det) continue;
      bool redetection = false;
      for (const auto& t : live_) {
        if (t.slices.back().z != obs.z) continue;
        if (geom::iou2d(t.slices.back().box, d.box) > cfg_.redetect_iou) {
          redetection = true;
          break;
        }
      }
      if (redetection) continue;
      Tracklet t;
      t.id = next_id_++;
      t.slices.push_back({obs.z, d.box, d.score});
      t.query = d.embedding;
      live_.push_back(std::move(t));
    }
  }

  // End-of-sweep flush; live tracklets would otherwise vanish at the volume
  // boundary. Returns the full prediction list.
  std::vector<Prediction> finalize() {
    for (const auto& t : live_) emit(t);
    live_.clear();
    return emitted_;
  }

 private:
  void emit(const Tracklet& t) {
    if (static_cast<int>(t.slices.size()) < cfg_.min_track_length) return;
    std::vector<std::pair<int, geom::Box2D>> stack;
    double score_sum = 0.0;
    for (const auto& s : t.slices) {
      stack.emplace_back(s.z, s.box);
      score_sum += s.score;
    }
    Prediction p;
    p.box = geom::box3d_from_stack(stack, nx_, ny_);
    p.score = score_sum / static_cast<double>(t.slices.size());
    p.id = t.id;
    p.length = static_cast<int>(t.slices.size());
    emitted_.push_back(p);
  }

  TrackerConfig cfg_;
  int nx_, ny_;
  std::vector<Tracklet> live_;
  std::vector<Prediction> emitted_;
  long next_id_ = 1;
};

// Full autoregressive inference over one volume: forward each slice with the
// live track queries, convert the outputs into engine observations (the
// similarity gate compares the prior and updated query through phi), fold
// through the engine, flush at the end.
inline std::vector<Prediction> run_volume(const net::Model& model, const synth::Volume& volume,
                                          const TrackerConfig& cfg) {
  cfg.validate();
  ad::NoGradGuard no_grad;
  const int nz = volume.shape[2];
  TrackerEngine engine(cfg, volume.shape[0], volume.shape[1]);

  std::vector<int> zs(static_cast<std::size_t>(nz));
  std::iota(zs.begin(), zs.end(), 0);
  if (cfg.sweep_top_down) std::reverse(zs.begin(), zs.end());

  for (int z : zs) {
    net::TrackQuerySet track_set;
    for (const auto& t : engine.live()) {
      net::TrackQuery q;
      q.id = t.id;
      q.valid = true;
      q.embedding = ad::leaf(Tensor({1, model.config().query_dim}, t.query.data));
      const auto& b = t.slices.back().box;
      q.ref_box = ad::leaf(Tensor({1, 4}, {b.cx, b.cy, b.w, b.h}));
      track_set.queries.push_back(std::move(q));
    }

    nn::ParamGraph pg(model.params(), false);
    const Tensor stack = synth::slice_stack(volume, z, model.config().n_input_slices);
    const auto fwd = model.forward(pg, stack, track_set);
    const auto out = net::extract_final(fwd);

    SliceObservations obs;
    obs.z = z;
    for (std::size_t i = 0; i < out.track.size(); ++i) {
      TrackObservation ob;
      ob.score = out.track[i].score;
      ob.box = out.track[i].box;
      ob.embedding = out.track[i].embedding;
      ob.sim = model.similarity(engine.live()[i].query, out.track[i].embedding);
      obs.track.push_back(std::move(ob));
    }
    for (const auto& d : out.det)
      obs.det.push_back({d.score, d.box, d.embedding});
    engine.process_slice(obs);
  }
  return engine.finalize();
}

}  // namespace slicetrack::track
