#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "slicetrack/autodiff.hpp"
#include "slicetrack/rng.hpp"
#include "slicetrack/tensor.hpp"

namespace slicetrack::nn {

// Named parameter tensors with a stable creation order. Values are owned
// here; per-element autodiff graphs wrap them as leaves via ParamGraph so
// batch elements can run on separate threads without sharing grad buffers.
class ParamStore {
 public:
  Tensor& create(const std::string& name, std::vector<int> shape) {
    if (values_.count(name)) throw NumericError("ParamStore: duplicate parameter " + name);
    order_.push_back(name);
    return values_.emplace(name, Tensor(std::move(shape))).first->second;
  }

  Tensor& at(const std::string& name) {
    auto it = values_.find(name);
    if (it == values_.end()) throw NumericError("ParamStore: unknown parameter " + name);
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = values_.find(name);
    if (it == values_.end()) throw NumericError("ParamStore: unknown parameter " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return values_.count(name) != 0; }

  const std::vector<std::string>& names() const { return order_; }
  std::size_t total_count() const {
    std::size_t n = 0;
    for (const auto& name : order_) n += values_.at(name).numel();
    return n;
  }

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, Tensor> values_;
};

// One autodiff view of a ParamStore: leaf nodes are created on first use and
// reused within the element's graph, so each parameter appears once and its
// grad accumulates across all uses.
class ParamGraph {
 public:
  explicit ParamGraph(const ParamStore& store, bool trainable)
      : store_(&store), trainable_(trainable) {}

  ad::NodePtr get(const std::string& name) {
    auto it = nodes_.find(name);
    if (it != nodes_.end()) return it->second;
    auto node = ad::leaf(store_->at(name), trainable_);
    nodes_.emplace(name, node);
    return node;
  }

  // Gradient for a parameter after backward(); zeros if the parameter was
  // untouched by this element.
  Tensor grad(const std::string& name) const {
    auto it = nodes_.find(name);
    if (it == nodes_.end() || it->second->grad.numel() == 0)
      return Tensor::zeros(store_->at(name).shape);
    return it->second->grad;
  }

 private:
  const ParamStore* store_;
  bool trainable_;
  std::unordered_map<std::string, ad::NodePtr> nodes_;
};

// ---- initializers -------------------------------------------------------

inline void init_xavier(Tensor& t, Rng& rng, int fan_in, int fan_out) {
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  for (double& x : t.data) x = rng.uniform(-limit, limit);
}

inline void init_constant(Tensor& t, double v) { std::fill(t.data.begin(), t.data.end(), v); }

// ---- layers --------------------------------------------------------------

struct Linear {
  std::string w, b;
  int in = 0, out = 0;

  Linear() = default;
  Linear(ParamStore& store, Rng& rng, const std::string& prefix, int in_dim, int out_dim,
         double bias_init = 0.0)
      : w(prefix + ".w"), b(prefix + ".b"), in(in_dim), out(out_dim) {
    init_xavier(store.create(w, {in_dim, out_dim}), rng, in_dim, out_dim);
    init_constant(store.create(b, {out_dim}), bias_init);
  }

  ad::NodePtr fwd(ParamGraph& pg, const ad::NodePtr& x) const {
    return ad::add_bias(ad::matmul(x, pg.get(w)), pg.get(b));
  }
};

struct LayerNorm {
  std::string gain, bias;

  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& prefix, int dim)
      : gain(prefix + ".g"), bias(prefix + ".b") {
    init_constant(store.create(gain, {dim}), 1.0);
    init_constant(store.create(bias, {dim}), 0.0);
  }

  ad::NodePtr fwd(ParamGraph& pg, const ad::NodePtr& x) const {
    return ad::layernorm_rows(x, pg.get(gain), pg.get(bias));
  }
};

struct Mlp {
  std::vector<Linear> layers;

  Mlp() = default;
  Mlp(ParamStore& store, Rng& rng, const std::string& prefix, std::vector<int> dims,
      double last_bias = 0.0) {
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      const bool last = (i + 2 == dims.size());
      layers.emplace_back(store, rng, prefix + ".l" + std::to_string(i), dims[i], dims[i + 1],
                          last ? last_bias : 0.0);
    }
  }

  ad::NodePtr fwd(ParamGraph& pg, ad::NodePtr x) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i].fwd(pg, x);
      if (i + 1 < layers.size()) x = ad::gelu(x);
    }
    return x;
  }
};

// Multi-head attention. The optional `blocked` mask has one byte per
// (query, key) pair; nonzero blocks that key from that query with exactly
// zero weight. Positional terms are added by the caller into q_in/k_in.
struct MultiheadAttention {
  Linear q, k, v, o;
  int dim = 0, heads = 1;

  MultiheadAttention() = default;
  MultiheadAttention(ParamStore& store, Rng& rng, const std::string& prefix, int d, int h)
      : q(store, rng, prefix + ".q", d, d),
        k(store, rng, prefix + ".k", d, d),
        v(store, rng, prefix + ".v", d, d),
        o(store, rng, prefix + ".o", d, d),
        dim(d),
        heads(h) {
    if (d % h != 0) throw ConfigError("attention dim must be divisible by heads");
  }

  // attn_bias (optional, [nq, nk]) is added to every head's logits before the
  // softmax; used for anchor-local cross attention.
  ad::NodePtr fwd(ParamGraph& pg, const ad::NodePtr& q_in, const ad::NodePtr& k_in,
                  const ad::NodePtr& v_in, const std::vector<std::uint8_t>& blocked = {},
                  std::vector<Tensor>* attn_out = nullptr,
                  const ad::NodePtr& attn_bias = nullptr) const {
    const int hd = dim / heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));
    auto qs = q.fwd(pg, q_in);
    auto ks = k.fwd(pg, k_in);
    auto vs = v.fwd(pg, v_in);
    std::vector<ad::NodePtr> head_outs;
    head_outs.reserve(heads);
    for (int h = 0; h < heads; ++h) {
      auto qh = ad::slice_cols(qs, h * hd, (h + 1) * hd);
      auto kh = ad::slice_cols(ks, h * hd, (h + 1) * hd);
      auto vh = ad::slice_cols(vs, h * hd, (h + 1) * hd);
      auto scores = ad::scale(ad::matmul_nt(qh, kh), inv_scale);
      if (attn_bias) scores = ad::add(scores, attn_bias);
      auto weights = ad::masked_softmax_rows(scores, blocked);
      if (attn_out) attn_out->push_back(weights->val);
      head_outs.push_back(ad::matmul(weights, vh));
    }
    return o.fwd(pg, heads == 1 ? head_outs[0] : ad::concat_cols(head_outs));
  }
};

// Strided conv stage; weight layout [Cin*k*k, Cout] so the forward is a
// single im2col + matmul.
struct ConvStage {
  std::string w, b;
  int cin = 0, cout = 0, k = 3, stride = 2, pad = 1;

  ConvStage() = default;
  ConvStage(ParamStore& store, Rng& rng, const std::string& prefix, int cin_, int cout_)
      : w(prefix + ".w"), b(prefix + ".b"), cin(cin_), cout(cout_) {
    init_xavier(store.create(w, {cin * k * k, cout}), rng, cin * k * k, cout);
    init_constant(store.create(b, {cout}), 0.0);
  }

  // x[Cin,H,W] -> [Cout,H/2,W/2]
  ad::NodePtr fwd(ParamGraph& pg, const ad::NodePtr& x) const {
    const int H = x->val.dim(1), W = x->val.dim(2);
    const int Ho = (H + 2 * pad - k) / stride + 1;
    const int Wo = (W + 2 * pad - k) / stride + 1;
    auto cols = ad::im2col(x, k, k, stride, pad);                     // [Ho*Wo, cin*k*k]
    auto out = ad::add_bias(ad::matmul(cols, pg.get(w)), pg.get(b));  // [Ho*Wo, cout]
    return ad::reshape(ad::transpose(ad::gelu(out)), {cout, Ho, Wo});
  }
};

// ---- positional encodings -------------------------------------------------

// Geometric frequency ladder over [1, max_cycles] cycles per unit length.
inline std::vector<double> sinusoid_freqs(int count, double max_cycles = 48.0) {
  std::vector<double> freqs(count);
  for (int i = 0; i < count; ++i) {
    const double t = count > 1 ? static_cast<double>(i) / (count - 1) : 0.0;
    freqs[i] = 2.0 * M_PI * std::pow(max_cycles, t);
  }
  return freqs;
}

// Fixed 2D sinusoidal table for a feature grid, one row per token in
// row-major (y, x) order. dim must be divisible by 4.
inline Tensor sinusoid_grid(int gh, int gw, int dim) {
  if (dim % 4 != 0) throw ConfigError("positional encoding dim must be divisible by 4");
  const int quarter = dim / 4;
  const auto freqs = sinusoid_freqs(quarter);
  Tensor out({gh * gw, dim});
  for (int y = 0; y < gh; ++y) {
    for (int x = 0; x < gw; ++x) {
      const int row = y * gw + x;
      const double ny = (y + 0.5) / gh;
      const double nx = (x + 0.5) / gw;
      for (int i = 0; i < quarter; ++i) {
        out.at(row, i) = std::sin(freqs[i] * nx);
        out.at(row, quarter + i) = std::cos(freqs[i] * nx);
        out.at(row, 2 * quarter + i) = std::sin(freqs[i] * ny);
        out.at(row, 3 * quarter + i) = std::cos(freqs[i] * ny);
      }
    }
  }
  return out;
}

// Sinusoidal embedding of box centers, differentiable in the box node.
// boxes[m,4] cxcywh -> [m, dim]; dim divisible by 4. Matches sinusoid_grid's
// frequency ladder so query and memory positions live in the same space.
inline ad::NodePtr sinusoid_boxes(const ad::NodePtr& boxes, int dim) {
  if (dim % 4 != 0) throw ConfigError("box positional dim must be divisible by 4");
  const int quarter = dim / 4;
  auto freq_row = ad::leaf(Tensor({quarter}, sinusoid_freqs(quarter)));
  auto ones = ad::leaf(Tensor::full({1, quarter}, 1.0));
  auto expand = [&](const ad::NodePtr& col) {
    return ad::mul_cols(ad::matmul(col, ones), freq_row);  // [m, quarter]
  };
  auto cx = expand(ad::slice_cols(boxes, 0, 1));
  auto cy = expand(ad::slice_cols(boxes, 1, 2));
  return ad::concat_cols({ad::sin(cx), ad::cos(cx), ad::sin(cy), ad::cos(cy)});
}

}  // namespace slicetrack::nn
