#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "slicetrack/autodiff.hpp"
#include "slicetrack/geometry.hpp"
#include "slicetrack/nn.hpp"
#include "slicetrack/tensor.hpp"

namespace slicetrack::net {

namespace fs = std::filesystem;
using nlohmann::json;

struct ModelConfig {
  int n_det_queries = 50;
  int query_dim = 64;  // C
  int n_encoder_layers = 2;
  int n_decoder_layers = 3;
  int n_input_slices = 3;
  int feature_stride = 8;  // power of two; backbone has log2(stride) stages
  int n_heads = 4;
  int ffn_dim = 128;
  int sim_dim = 32;  // C' for the similarity projector
  int head_hidden = 64;
  double anchor_size_cells = 2.0;  // proposal prior, in feature cells
  double cross_locality_cells = 1.5;  // Gaussian cross-attention prior around the
                                      // query anchor, in cells; 0 disables
  bool track_query_pos = true;     // track queries share the box positional encoding
  bool masked_attention = true;    // the track->det blocking mask; ablation switch
  std::uint64_t init_seed = 1;

  void validate() const {
    require(n_det_queries >= 1, "ModelConfig: n_det_queries must be >= 1");
    require(query_dim >= 8 && query_dim % 4 == 0, "ModelConfig: query_dim must be >=8, mult of 4");
    require(query_dim % n_heads == 0, "ModelConfig: query_dim must divide by n_heads");
    require(n_encoder_layers >= 1 && n_decoder_layers >= 1, "ModelConfig: need >=1 layer each");
    require(n_input_slices >= 1 && n_input_slices % 2 == 1,
            "ModelConfig: n_input_slices must be odd");
    int s = feature_stride;
    require(s >= 2 && (s & (s - 1)) == 0, "ModelConfig: feature_stride must be a power of two");
    require(sim_dim >= 1 && head_hidden >= 1, "ModelConfig: bad head sizes");
  }

  int n_stages() const {
    int s = feature_stride, n = 0;
    while (s > 1) {
      s >>= 1;
      ++n;
    }
    return n;
  }
};

inline void to_json(json& j, const ModelConfig& c) {
  j = json{{"n_det_queries", c.n_det_queries},
           {"query_dim", c.query_dim},
           {"n_encoder_layers", c.n_encoder_layers},
           {"n_decoder_layers", c.n_decoder_layers},
           {"n_input_slices", c.n_input_slices},
           {"feature_stride", c.feature_stride},
           {"n_heads", c.n_heads},
           {"ffn_dim", c.ffn_dim},
           {"sim_dim", c.sim_dim},
           {"head_hidden", c.head_hidden},
           {"anchor_size_cells", c.anchor_size_cells},
           {"cross_locality_cells", c.cross_locality_cells},
           {"track_query_pos", c.track_query_pos},
           {"masked_attention", c.masked_attention},
           {"init_seed", c.init_seed}};
}

inline void from_json(const json& j, ModelConfig& c) {
  j.at("n_det_queries").get_to(c.n_det_queries);
  j.at("query_dim").get_to(c.query_dim);
  j.at("n_encoder_layers").get_to(c.n_encoder_layers);
  j.at("n_decoder_layers").get_to(c.n_decoder_layers);
  j.at("n_input_slices").get_to(c.n_input_slices);
  j.at("feature_stride").get_to(c.feature_stride);
  j.at("n_heads").get_to(c.n_heads);
  j.at("ffn_dim").get_to(c.ffn_dim);
  j.at("sim_dim").get_to(c.sim_dim);
  j.at("head_hidden").get_to(c.head_hidden);
  j.at("anchor_size_cells").get_to(c.anchor_size_cells);
  if (j.contains("cross_locality_cells"))
    j.at("cross_locality_cells").get_to(c.cross_locality_cells);
  j.at("track_query_pos").get_to(c.track_query_pos);
  j.at("masked_attention").get_to(c.masked_attention);
  j.at("init_seed").get_to(c.init_seed);
}

// Self-attention blocking mask over [track; det] query order. m[i][j] = 1
// blocks query i from seeing query j: detection queries cannot see track
// queries, track queries see everything.
inline std::vector<std::uint8_t> build_attention_mask(int n_track, int n_det) {
  const int n = n_track + n_det;
  std::vector<std::uint8_t> m(static_cast<std::size_t>(n) * n, 0);
  for (int i = n_track; i < n; ++i)
    for (int j = 0; j < n_track; ++j) m[static_cast<std::size_t>(i) * n + j] = 1;
  return m;
}

// One track query carried from the previous slice. Padded entries (valid ==
// false) exist only to equalize track widths across a batch; they are fully
// masked in attention and excluded from every loss.
struct TrackQuery {
  long id = -1;
  bool valid = false;
  ad::NodePtr embedding;  // [1, C]
  ad::NodePtr ref_box;    // [1, 4] cxcywh, normalized
};

struct TrackQuerySet {
  std::vector<TrackQuery> queries;

  int size() const { return static_cast<int>(queries.size()); }
  int n_valid() const {
    int n = 0;
    for (const auto& q : queries) n += q.valid ? 1 : 0;
    return n;
  }
};

inline TrackQuery make_padded_query(int query_dim) {
  TrackQuery q;
  q.id = -1;
  q.valid = false;
  q.embedding = ad::leaf(Tensor::zeros({1, query_dim}));
  q.ref_box = ad::leaf(Tensor({1, 4}, {0.5, 0.5, 0.1, 0.1}));
  return q;
}

// Pads every element of a batch to the widest track set with zero-initialized
// invalid queries so elements share a query width.
inline void pad_track_batch(std::vector<TrackQuerySet>& batch, int query_dim) {
  int width = 0;
  for (const auto& set : batch) width = std::max(width, set.size());
  for (auto& set : batch)
    while (set.size() < width) set.queries.push_back(make_padded_query(query_dim));
}

// Full forward result for one slice; per-decoder-layer nodes so auxiliary
// losses attach to every layer. Query rows are ordered [track; det].
struct SliceForward {
  int n_track = 0;
  int n_det = 0;
  std::vector<long> track_ids;      // per track row, -1 for padded
  std::vector<int> valid_track_rows;

  struct Layer {
    ad::NodePtr scores;  // [N, 1] in (0,1)
    ad::NodePtr boxes;   // [N, 4] cxcywh normalized
    ad::NodePtr embed;   // [N, C] content after this layer (pre-head)
  };
  std::vector<Layer> layers;
  const Layer& final_layer() const { return layers.back(); }

  std::vector<Tensor> self_attention;  // recorded per layer/head when requested
};

struct QueryOutput {
  double score = 0.0;
  geom::Box2D box;
  Tensor embedding;  // [C]
  long id = -1;
  bool valid = true;
};

struct DecoderOutput {
  std::vector<QueryOutput> track;
  std::vector<QueryOutput> det;
};

inline DecoderOutput extract_layer(const SliceForward& f, int layer) {
  const auto& l = f.layers.at(static_cast<std::size_t>(layer));
  const int c = l.embed->val.dim(1);
  DecoderOutput out;
  auto row = [&](int i) {
    QueryOutput q;
    q.score = l.scores->val.at(i, 0);
    q.box = {l.boxes->val.at(i, 0), l.boxes->val.at(i, 1), l.boxes->val.at(i, 2),
             l.boxes->val.at(i, 3)};
    q.embedding = Tensor({c});
    for (int k = 0; k < c; ++k) q.embedding.data[k] = l.embed->val.at(i, k);
    return q;
  };
  for (int i = 0; i < f.n_track; ++i) {
    QueryOutput q = row(i);
    q.id = f.track_ids[i];
    q.valid = q.id >= 0;
    out.track.push_back(std::move(q));
  }
  for (int i = 0; i < f.n_det; ++i) out.det.push_back(row(f.n_track + i));
  return out;
}

inline DecoderOutput extract_final(const SliceForward& f) {
  return extract_layer(f, static_cast<int>(f.layers.size()) - 1);
}

// The detector: 2.5D convolutional backbone over a slice stack, transformer
// encoder over flattened features, and a decoder over [track; det] queries
// under the blocking mask, with shared class/box heads after every layer and
// the similarity projector phi.
class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.init_seed);
    const int C = cfg_.query_dim;
    const double score_prior_bias = -4.59511985013459;  // sigmoid^-1(0.01)

    const int stages = cfg_.n_stages();
    int cin = cfg_.n_input_slices;
    for (int s = 0; s < stages; ++s) {
      const int cout = std::max(8, C >> (stages - 1 - s));
      backbone_.emplace_back(params_, rng, "backbone.s" + std::to_string(s), cin, cout);
      cin = cout;
    }
    if (cin != C) throw ConfigError("ModelConfig: query_dim must be reachable by channel doubling");
    backbone_norm_ = nn::LayerNorm(params_, "backbone.norm", C);

    for (int l = 0; l < cfg_.n_encoder_layers; ++l) {
      const std::string p = "encoder.l" + std::to_string(l);
      enc_.push_back(EncLayer{
          nn::LayerNorm(params_, p + ".ln1", C), nn::LayerNorm(params_, p + ".ln2", C),
          nn::MultiheadAttention(params_, rng, p + ".attn", C, cfg_.n_heads),
          nn::Linear(params_, rng, p + ".ffn1", C, cfg_.ffn_dim),
          nn::Linear(params_, rng, p + ".ffn2", cfg_.ffn_dim, C)});
    }
    enc_norm_ = nn::LayerNorm(params_, "encoder.norm", C);

    for (int l = 0; l < cfg_.n_decoder_layers; ++l) {
      const std::string p = "decoder.l" + std::to_string(l);
      dec_.push_back(DecLayer{
          nn::LayerNorm(params_, p + ".ln1", C), nn::LayerNorm(params_, p + ".ln2", C),
          nn::LayerNorm(params_, p + ".ln3", C),
          nn::MultiheadAttention(params_, rng, p + ".self", C, cfg_.n_heads),
          nn::MultiheadAttention(params_, rng, p + ".cross", C, cfg_.n_heads),
          nn::Linear(params_, rng, p + ".ffn1", C, cfg_.ffn_dim),
          nn::Linear(params_, rng, p + ".ffn2", cfg_.ffn_dim, C)});
    }
    final_norm_ = nn::LayerNorm(params_, "decoder.norm", C);

    class_head_ = nn::Linear(params_, rng, "head.class", C, 1, score_prior_bias);
    box_head_ = nn::Mlp(params_, rng, "head.box", {C, cfg_.head_hidden, 4});
    proposal_box_head_ = nn::Mlp(params_, rng, "head.proposal_box", {C, cfg_.head_hidden, 4});
    det_content_proj_ = nn::Linear(params_, rng, "head.det_content", C, C);
    det_content_norm_ = nn::LayerNorm(params_, "head.det_content_norm", C);
    phi_ = nn::Mlp(params_, rng, "head.phi", {C, C, cfg_.sim_dim});
  }

  const ModelConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  // stack: [n_input_slices, H, W]; track: queries carried from the previous
  // slice (possibly empty, possibly padded).
  SliceForward forward(nn::ParamGraph& pg, const Tensor& stack, const TrackQuerySet& track,
                       bool record_attention = false) const {
    return forward(pg, ad::leaf(stack), track, record_attention);
  }

  // Node overload; lets callers differentiate with respect to the input stack.
  SliceForward forward(nn::ParamGraph& pg, const ad::NodePtr& stack_node,
                       const TrackQuerySet& track, bool record_attention = false) const {
    const Tensor& stack = stack_node->val;
    if (stack.rank() != 3 || stack.dim(0) != cfg_.n_input_slices)
      throw DataError("forward: slice stack shape " + stack.shape_str() +
                      " does not match n_input_slices=" + std::to_string(cfg_.n_input_slices));
    const int H = stack.dim(1), W = stack.dim(2);
    if (H % cfg_.feature_stride != 0 || W % cfg_.feature_stride != 0)
      throw DataError("forward: slice size must be divisible by feature_stride");
    const int C = cfg_.query_dim;
    const int gh = H / cfg_.feature_stride, gw = W / cfg_.feature_stride;
    const int n_tokens = gh * gw;
    if (cfg_.n_det_queries > n_tokens)
      throw ConfigError("forward: n_det_queries exceeds encoder token count");

    // backbone over the standardized stack
    ad::NodePtr x = ad::standardize(stack_node);
    for (const auto& stage : backbone_) x = stage.fwd(pg, x);
    auto tokens =
        backbone_norm_.fwd(pg, ad::transpose(ad::reshape(x, {C, n_tokens})));  // [T, C]

    // encoder with fixed sinusoidal grid positions (added to q, k only)
    auto mem_pos = ad::leaf(nn::sinusoid_grid(gh, gw, C));
    for (const auto& layer : enc_) {
      auto h = layer.ln1.fwd(pg, tokens);
      auto hp = ad::add(h, mem_pos);
      tokens = ad::add(tokens, layer.attn.fwd(pg, hp, hp, h));
      auto h2 = layer.ln2.fwd(pg, tokens);
      tokens = ad::add(tokens, layer.ffn2.fwd(pg, ad::gelu(layer.ffn1.fwd(pg, h2))));
    }
    auto memory = enc_norm_.fwd(pg, tokens);  // [T, C]

    // query selection: rank tokens by the shared class head, take the top
    // n_det as detection query proposals
    auto objectness = class_head_.fwd(pg, memory);  // [T, 1]
    std::vector<int> sel(static_cast<std::size_t>(n_tokens));
    std::iota(sel.begin(), sel.end(), 0);
    std::stable_sort(sel.begin(), sel.end(), [&](int a, int b) {
      return objectness->val.at(a, 0) > objectness->val.at(b, 0);
    });
    sel.resize(static_cast<std::size_t>(cfg_.n_det_queries));
    std::sort(sel.begin(), sel.end());  // keep spatial order for readability

    Tensor anchor_logit({n_tokens, 4});
    for (int t = 0; t < n_tokens; ++t) {
      const int ty = t / gw, tx = t % gw;
      auto logit = [](double v) {
        const double c = std::clamp(v, 1e-6, 1.0 - 1e-6);
        return std::log(c / (1.0 - c));
      };
      anchor_logit.at(t, 0) = logit((tx + 0.5) / gw);
      anchor_logit.at(t, 1) = logit((ty + 0.5) / gh);
      anchor_logit.at(t, 2) = logit(cfg_.anchor_size_cells / gw);
      anchor_logit.at(t, 3) = logit(cfg_.anchor_size_cells / gh);
    }
    auto proposal_logits = ad::add(proposal_box_head_.fwd(pg, memory), ad::leaf(anchor_logit));
    auto det_ref = ad::sigmoid(ad::gather_rows(proposal_logits, sel));           // [k, 4]
    auto det_content = det_content_norm_.fwd(
        pg, det_content_proj_.fwd(pg, ad::gather_rows(memory, sel)));            // [k, C]

    // assemble [track; det] queries
    SliceForward out;
    out.n_track = track.size();
    out.n_det = cfg_.n_det_queries;
    const int N = out.n_track + out.n_det;
    std::vector<ad::NodePtr> content_parts, ref_parts;
    for (int i = 0; i < out.n_track; ++i) {
      const auto& q = track.queries[static_cast<std::size_t>(i)];
      out.track_ids.push_back(q.valid ? q.id : -1);
      if (q.valid) out.valid_track_rows.push_back(i);
      content_parts.push_back(q.embedding);
      ref_parts.push_back(q.ref_box);
    }
    content_parts.push_back(det_content);
    ref_parts.push_back(det_ref);
    auto queries = ad::concat_rows(content_parts);
    auto ref = ad::concat_rows(ref_parts);

    // blocking mask: track->det leakage (unless ablated) plus full row+column
    // masking of padded track queries
    std::vector<std::uint8_t> self_mask =
        cfg_.masked_attention ? build_attention_mask(out.n_track, out.n_det)
                              : std::vector<std::uint8_t>(static_cast<std::size_t>(N) * N, 0);
    std::vector<std::uint8_t> cross_mask;
    bool has_padding = false;
    for (int i = 0; i < out.n_track; ++i) {
      if (track.queries[static_cast<std::size_t>(i)].valid) continue;
      has_padding = true;
      for (int j = 0; j < N; ++j) {
        self_mask[static_cast<std::size_t>(i) * N + j] = 1;  // padded row sees nothing
        self_mask[static_cast<std::size_t>(j) * N + i] = 1;  // nothing sees padded column
      }
    }
    if (has_padding) {
      cross_mask.assign(static_cast<std::size_t>(N) * n_tokens, 0);
      for (int i = 0; i < out.n_track; ++i) {
        if (track.queries[static_cast<std::size_t>(i)].valid) continue;
        for (int t = 0; t < n_tokens; ++t)
          cross_mask[static_cast<std::size_t>(i) * n_tokens + t] = 1;
      }
    }

    // row gate to zero track-query positional terms when configured off
    ad::NodePtr track_pos_gate;
    if (!cfg_.track_query_pos) {
      Tensor gate({N});
      for (int i = 0; i < N; ++i) gate.data[i] = i < out.n_track ? 0.0 : 1.0;
      track_pos_gate = ad::leaf(gate);
    }

    // decoder; every layer predicts relative to the fixed per-query anchor
    // (track queries: previous slice's box; detection queries: encoder
    // proposal), which keeps the one-to-one assignment stable over training
    auto qpos = nn::sinusoid_boxes(ref, C);
    if (track_pos_gate) qpos = ad::mul_rows(qpos, track_pos_gate);
    auto anchor_logit_node = ad::inverse_sigmoid(ref);

    // Gaussian locality prior: cross-attention logits are biased toward
    // memory cells near the query's anchor, so queries read their own
    // neighbourhood from the start instead of having to learn locality.
    ad::NodePtr cross_bias;
    if (cfg_.cross_locality_cells > 0.0) {
      Tensor cell_x({1, n_tokens}), cell_y({1, n_tokens});
      for (int t = 0; t < n_tokens; ++t) {
        cell_x.data[t] = (t % gw + 0.5) / gw;
        cell_y.data[t] = (t / gw + 0.5) / gh;
      }
      auto ones_row = ad::leaf(Tensor::full({1, n_tokens}, 1.0));
      auto ones_col = ad::leaf(Tensor::full({N, 1}, 1.0));
      auto axis_sq = [&](const ad::NodePtr& coord_col, const Tensor& cell, double sigma) {
        auto diff = ad::sub(ad::matmul(coord_col, ones_row),
                            ad::matmul(ones_col, ad::leaf(cell)));  // [N, T]
        return ad::scale(ad::mul(diff, diff), -0.5 / (sigma * sigma));
      };
      const double sx = cfg_.cross_locality_cells / gw;
      const double sy = cfg_.cross_locality_cells / gh;
      cross_bias = ad::add(axis_sq(ad::slice_cols(ref, 0, 1), cell_x, sx),
                           axis_sq(ad::slice_cols(ref, 1, 2), cell_y, sy));
    }
    for (const auto& layer : dec_) {
      auto h = layer.ln1.fwd(pg, queries);
      auto hp = ad::add(h, qpos);
      queries = ad::add(queries,
                        layer.self_attn.fwd(pg, hp, hp, h, self_mask,
                                            record_attention ? &out.self_attention : nullptr));
      auto h2 = layer.ln2.fwd(pg, queries);
      queries = ad::add(queries, layer.cross_attn.fwd(pg, ad::add(h2, qpos),
                                                      ad::add(memory, mem_pos), memory,
                                                      cross_mask, nullptr, cross_bias));
      auto h3 = layer.ln3.fwd(pg, queries);
      queries = ad::add(queries, layer.ffn2.fwd(pg, ad::gelu(layer.ffn1.fwd(pg, h3))));

      auto embed = final_norm_.fwd(pg, queries);
      auto scores = ad::sigmoid(class_head_.fwd(pg, embed));
      auto boxes = ad::sigmoid(ad::add(box_head_.fwd(pg, embed), anchor_logit_node));
      out.layers.push_back({scores, boxes, embed});
    }
    return out;
  }

  // MLP projector phi for the inter-slice similarity head; [k, C] -> [k, C'].
  ad::NodePtr project_similarity(nn::ParamGraph& pg, const ad::NodePtr& embeddings) const {
    if (embeddings->val.dim(0) == 0)
      return ad::leaf(Tensor::zeros({0, cfg_.sim_dim}));
    return phi_.fwd(pg, embeddings);
  }

  // sigmoid(phi(prev) . phi(curr)) for two single embeddings, value only.
  double similarity(const Tensor& prev, const Tensor& curr) const {
    ad::NoGradGuard no_grad;
    nn::ParamGraph pg(params_, false);
    auto a = project_similarity(pg, ad::leaf(Tensor({1, cfg_.query_dim}, prev.data)));
    auto b = project_similarity(pg, ad::leaf(Tensor({1, cfg_.query_dim}, curr.data)));
    const double logit = ad::matmul_nt(a, b)->val.data[0];
    return 1.0 / (1.0 + std::exp(-logit));
  }

 private:
  struct EncLayer {
    nn::LayerNorm ln1, ln2;
    nn::MultiheadAttention attn;
    nn::Linear ffn1, ffn2;
  };
  struct DecLayer {
    nn::LayerNorm ln1, ln2, ln3;
    nn::MultiheadAttention self_attn, cross_attn;
    nn::Linear ffn1, ffn2;
  };

  ModelConfig cfg_;
  nn::ParamStore params_;
  std::vector<nn::ConvStage> backbone_;
  std::vector<EncLayer> enc_;
  std::vector<DecLayer> dec_;
  nn::LayerNorm backbone_norm_, enc_norm_, final_norm_, det_content_norm_;
  nn::Linear class_head_, det_content_proj_;
  nn::Mlp box_head_, proposal_box_head_, phi_;
};

// Pairwise similarity logits between two projected embedding sets.
inline ad::NodePtr similarity_logits(const ad::NodePtr& qa, const ad::NodePtr& qb) {
  if (qa->val.dim(1) != qb->val.dim(1))
    throw DataError("similarity_logits: projected dimension mismatch");
  return ad::matmul_nt(qa, qb);
}

// ---- checkpoint container ---------------------------------------------------
// Single-file archive: 8-byte magic, u64 header length, JSON header (version,
// model config echo, extra metadata, tensor index), then raw little-endian
// doubles.

constexpr char kCheckpointMagic[8] = {'S', 'T', 'C', 'K', 'P', 'T', '1', '\n'};

struct Checkpoint {
  json header;
  std::map<std::string, Tensor> tensors;
};

inline void save_checkpoint(const fs::path& path, const ModelConfig& cfg,
                            const nn::ParamStore& params, const json& extra = json::object(),
                            const std::map<std::string, Tensor>& opt_state = {}) {
  json index = json::array();
  std::size_t offset = 0;
  auto add_entry = [&](const std::string& name, const Tensor& t) {
    index.push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}, {"count", t.numel()}});
    offset += t.numel();
  };
  for (const auto& name : params.names()) add_entry(name, params.at(name));
  for (const auto& [name, t] : opt_state) add_entry("opt/" + name, t);

  json header{{"version", 1}, {"config", cfg}, {"extra", extra}, {"tensors", index}};
  const std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path.string());
  out.write(kCheckpointMagic, 8);
  const std::uint64_t hlen = header_str.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  auto write_tensor = [&](const Tensor& t) {
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  };
  for (const auto& name : params.names()) write_tensor(params.at(name));
  for (const auto& [name, t] : opt_state) write_tensor(t);
  if (!out) throw DataError("checkpoint write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw DataError("not a checkpoint file (bad magic): " + path.string());
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string header_str(hlen, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw DataError("truncated checkpoint header: " + path.string());

  Checkpoint ck;
  try {
    ck.header = json::parse(header_str);
  } catch (const json::exception& e) {
    throw DataError("malformed checkpoint header (" + std::string(e.what()) + "): " +
                    path.string());
  }
  if (ck.header.value("version", 0) != 1)
    throw DataError("unsupported checkpoint version: " + path.string());
  for (const auto& entry : ck.header.at("tensors")) {
    const std::string name = entry.at("name");
    Tensor t(entry.at("shape").get<std::vector<int>>());
    if (t.numel() != entry.at("count").get<std::size_t>())
      throw DataError("checkpoint tensor index inconsistent: " + path.string());
    ck.tensors.emplace(name, std::move(t));
  }
  // payload is stored in index order
  for (const auto& entry : ck.header.at("tensors")) {
    Tensor& t = ck.tensors.at(entry.at("name").get<std::string>());
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  }
  if (!in) throw DataError("truncated checkpoint payload: " + path.string());
  return ck;
}

// Restores parameter values by name; shapes must match the live model.
inline void apply_checkpoint(Model& model, const Checkpoint& ck) {
  for (const auto& name : model.params().names()) {
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end())
      throw DataError("checkpoint is missing parameter: " + name);
    Tensor& dst = model.params().at(name);
    if (it->second.shape != dst.shape)
      throw DataError("checkpoint shape mismatch for " + name + ": " +
                      it->second.shape_str() + " vs " + dst.shape_str());
    dst = it->second;
  }
}

inline Model load_model(const fs::path& path, Checkpoint* out_ck = nullptr) {
  Checkpoint ck = load_checkpoint(path);
  ModelConfig cfg = ck.header.at("config").get<ModelConfig>();
  Model model(cfg);
  apply_checkpoint(model, ck);
  if (out_ck) *out_ck = std::move(ck);
  return model;
}

}  // namespace slicetrack::net
