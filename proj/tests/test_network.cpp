#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "slicetrack/network.hpp"
#include "slicetrack/rng.hpp"

using namespace slicetrack;
using net::Model;
using net::ModelConfig;
using net::TrackQuery;
using net::TrackQuerySet;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n_det_queries = 4;
  cfg.query_dim = 16;
  cfg.n_encoder_layers = 1;
  cfg.n_decoder_layers = 2;
  cfg.n_input_slices = 1;
  cfg.feature_stride = 4;
  cfg.n_heads = 2;
  cfg.ffn_dim = 32;
  cfg.sim_dim = 8;
  cfg.head_hidden = 16;
  cfg.init_seed = 42;
  return cfg;
}

Tensor random_stack(Rng& rng, int slices, int h, int w) {
  Tensor t({slices, h, w});
  for (double& x : t.data) x = rng.uniform(-0.5, 0.5);
  return t;
}

TrackQuery random_track_query(Rng& rng, long id, int dim) {
  TrackQuery q;
  q.id = id;
  q.valid = true;
  Tensor e({1, dim});
  for (double& x : e.data) x = rng.uniform(-1.0, 1.0);
  q.embedding = ad::leaf(e);
  q.ref_box = ad::leaf(Tensor({1, 4}, {rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), 0.2, 0.2}));
  return q;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape == b.shape);
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace

TEST_CASE("network: attention mask matches the blocking predicate") {
  SUBCASE("1 track, 1 det") {
    const auto m = net::build_attention_mask(1, 1);
    CHECK(m == std::vector<std::uint8_t>{0, 0, 1, 0});
  }
  SUBCASE("no track queries -> all zeros") {
    for (int n_det : {1, 3, 7}) {
      const auto m = net::build_attention_mask(0, n_det);
      for (auto v : m) CHECK(v == 0);
    }
  }
  SUBCASE("2 track, 2 det enumerated") {
    const auto m = net::build_attention_mask(2, 2);
    int ones = 0;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        const bool expect = j < 2 && i >= 2;
        CHECK(static_cast<bool>(m[static_cast<std::size_t>(i) * 4 + j]) == expect);
        ones += m[static_cast<std::size_t>(i) * 4 + j];
      }
    CHECK(ones == 4);
  }
  SUBCASE("predicate holds for random sizes") {
    Rng rng(77);
    for (int trial = 0; trial < 100; ++trial) {
      const int nt = static_cast<int>(rng.uniform_int(0, 6));
      const int nd = static_cast<int>(rng.uniform_int(0, 6));
      const int n = nt + nd;
      const auto m = net::build_attention_mask(nt, nd);
      REQUIRE(m.size() == static_cast<std::size_t>(n) * n);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          CHECK(static_cast<bool>(m[static_cast<std::size_t>(i) * n + j]) ==
                (j < nt && i >= nt));
    }
  }
}

TEST_CASE("network: forward partitions and determinism") {
  const ModelConfig cfg = tiny_config();
  Model model(cfg);
  Rng rng(5);
  const Tensor stack = random_stack(rng, cfg.n_input_slices, 16, 16);

  SUBCASE("empty track set") {
    ad::NoGradGuard ng;
    nn::ParamGraph pg(model.params(), false);
    const auto fwd = model.forward(pg, stack, {});
    CHECK(fwd.n_track == 0);
    CHECK(fwd.n_det == cfg.n_det_queries);
    const auto out = net::extract_final(fwd);
    CHECK(out.track.empty());
    CHECK(out.det.size() == static_cast<std::size_t>(cfg.n_det_queries));
    for (const auto& q : out.det) {
      CHECK(q.score > 0.0);
      CHECK(q.score < 1.0);
    }
    CHECK(fwd.layers.size() == static_cast<std::size_t>(cfg.n_decoder_layers));
  }

  SUBCASE("three track queries partition as (3, n_det)") {
    TrackQuerySet track;
    for (long id = 10; id < 13; ++id) track.queries.push_back(random_track_query(rng, id, cfg.query_dim));
    ad::NoGradGuard ng;
    nn::ParamGraph pg(model.params(), false);
    const auto fwd = model.forward(pg, stack, track);
    const auto out = net::extract_final(fwd);
    CHECK(out.track.size() == 3);
    CHECK(out.det.size() == static_cast<std::size_t>(cfg.n_det_queries));
    CHECK(out.track[0].id == 10);
    CHECK(out.track[2].id == 12);
  }

  SUBCASE("identical inputs give identical outputs in eval mode") {
    ad::NoGradGuard ng;
    nn::ParamGraph pg1(model.params(), false);
    nn::ParamGraph pg2(model.params(), false);
    const auto a = model.forward(pg1, stack, {});
    const auto b = model.forward(pg2, stack, {});
    CHECK(max_abs_diff(a.final_layer().scores->val, b.final_layer().scores->val) == 0.0);
    CHECK(max_abs_diff(a.final_layer().boxes->val, b.final_layer().boxes->val) == 0.0);
    CHECK(max_abs_diff(a.final_layer().embed->val, b.final_layer().embed->val) == 0.0);
  }

  SUBCASE("wrong stack shape is rejected") {
    ad::NoGradGuard ng;
    nn::ParamGraph pg(model.params(), false);
    const Tensor bad = random_stack(rng, cfg.n_input_slices + 2, 16, 16);
    CHECK_THROWS_AS(model.forward(pg, bad, {}), DataError);
  }
}

TEST_CASE("network: track perturbation never reaches detection outputs") {
  const ModelConfig cfg = tiny_config();
  Model model(cfg);
  Rng rng(6);
  const Tensor stack = random_stack(rng, cfg.n_input_slices, 16, 16);

  TrackQuerySet track;
  track.queries.push_back(random_track_query(rng, 1, cfg.query_dim));
  track.queries.push_back(random_track_query(rng, 2, cfg.query_dim));

  ad::NoGradGuard ng;
  nn::ParamGraph pg(model.params(), false);
  const auto base = model.forward(pg, stack, track);

  // perturb the first track query's content and reference box
  TrackQuerySet bumped = track;
  Tensor e = track.queries[0].embedding->val;
  for (double& x : e.data) x += 0.37;
  bumped.queries[0].embedding = ad::leaf(e);
  bumped.queries[0].ref_box = ad::leaf(Tensor({1, 4}, {0.21, 0.84, 0.33, 0.11}));

  nn::ParamGraph pg2(model.params(), false);
  const auto pert = model.forward(pg2, stack, bumped);

  for (std::size_t l = 0; l < base.layers.size(); ++l) {
    const int nt = base.n_track;
    const int n = nt + base.n_det;
    const auto& b = base.layers[l];
    const auto& p = pert.layers[l];
    double det_diff = 0.0;
    for (int i = nt; i < n; ++i) {
      det_diff = std::max(det_diff, std::abs(b.scores->val.at(i, 0) - p.scores->val.at(i, 0)));
      for (int k = 0; k < 4; ++k)
        det_diff = std::max(det_diff, std::abs(b.boxes->val.at(i, k) - p.boxes->val.at(i, k)));
      for (int k = 0; k < cfg.query_dim; ++k)
        det_diff = std::max(det_diff, std::abs(b.embed->val.at(i, k) - p.embed->val.at(i, k)));
    }
    CHECK(det_diff <= 1e-9);
    CHECK(det_diff == 0.0);  // the blocking is exact, not approximate
  }

  // the untouched track query's output does change (track rows see each other)
  double track1_diff = 0.0;
  for (int k = 0; k < cfg.query_dim; ++k)
    track1_diff += std::abs(base.final_layer().embed->val.at(1, k) -
                            pert.final_layer().embed->val.at(1, k));
  CHECK(track1_diff > 0.0);

  SUBCASE("without the mask the leak is visible") {
    ModelConfig open_cfg = cfg;
    open_cfg.masked_attention = false;
    Model open_model(open_cfg);
    nn::ParamGraph pga(open_model.params(), false);
    nn::ParamGraph pgb(open_model.params(), false);
    const auto a = open_model.forward(pga, stack, track);
    const auto b = open_model.forward(pgb, stack, bumped);
    double det_diff = 0.0;
    const int nt = a.n_track, n = nt + a.n_det;
    for (int i = nt; i < n; ++i)
      det_diff = std::max(det_diff, std::abs(a.final_layer().scores->val.at(i, 0) -
                                             b.final_layer().scores->val.at(i, 0)));
    CHECK(det_diff > 0.0);
  }
}

TEST_CASE("network: recorded attention rows are normalized and respect masks") {
  const ModelConfig cfg = tiny_config();
  Model model(cfg);
  Rng rng(8);
  const Tensor stack = random_stack(rng, cfg.n_input_slices, 16, 16);

  TrackQuerySet track;
  track.queries.push_back(random_track_query(rng, 1, cfg.query_dim));
  track.queries.push_back(random_track_query(rng, 2, cfg.query_dim));
  track.queries.push_back(net::make_padded_query(cfg.query_dim));  // padded

  ad::NoGradGuard ng;
  nn::ParamGraph pg(model.params(), false);
  const auto fwd = model.forward(pg, stack, track, /*record_attention=*/true);
  REQUIRE(!fwd.self_attention.empty());

  const int nt = fwd.n_track;  // 3 including the padded one
  const int n = nt + fwd.n_det;
  for (const auto& weights : fwd.self_attention) {
    REQUIRE(weights.shape == std::vector<int>{n, n});
    for (int i = 0; i < n; ++i) {
      double row_sum = 0.0;
      for (int j = 0; j < n; ++j) row_sum += weights.at(i, j);
      if (i == 2) {
        CHECK(row_sum == 0.0);  // fully masked padded row
        continue;
      }
      CHECK(row_sum == doctest::Approx(1.0).epsilon(1e-9));
      CHECK(weights.at(i, 2) == 0.0);  // nobody attends to the padded query
      if (i >= nt)
        for (int j = 0; j < nt; ++j) CHECK(weights.at(i, j) == 0.0);  // det cannot see track
    }
    // track rows place nonzero weight on detection columns
    double track_on_det = 0.0;
    for (int i = 0; i < 2; ++i)
      for (int j = nt; j < n; ++j) track_on_det += weights.at(i, j);
    CHECK(track_on_det > 0.0);
  }
}

TEST_CASE("network: padded queries do not change valid outputs") {
  const ModelConfig cfg = tiny_config();
  Model model(cfg);
  Rng rng(9);
  const Tensor stack = random_stack(rng, cfg.n_input_slices, 16, 16);

  TrackQuerySet track;
  track.queries.push_back(random_track_query(rng, 1, cfg.query_dim));
  track.queries.push_back(random_track_query(rng, 2, cfg.query_dim));

  TrackQuerySet padded = track;
  padded.queries.push_back(net::make_padded_query(cfg.query_dim));
  padded.queries.push_back(net::make_padded_query(cfg.query_dim));

  ad::NoGradGuard ng;
  nn::ParamGraph pg1(model.params(), false);
  nn::ParamGraph pg2(model.params(), false);
  const auto a = model.forward(pg1, stack, track);
  const auto b = model.forward(pg2, stack, padded);

  const auto oa = net::extract_final(a);
  const auto ob = net::extract_final(b);
  REQUIRE(ob.track.size() == 4);
  for (int i = 0; i < 2; ++i) {
    CHECK(oa.track[i].score == ob.track[i].score);
    CHECK(max_abs_diff(oa.track[i].embedding, ob.track[i].embedding) == 0.0);
  }
  for (std::size_t i = 0; i < oa.det.size(); ++i) {
    CHECK(oa.det[i].score == ob.det[i].score);
    CHECK(max_abs_diff(oa.det[i].embedding, ob.det[i].embedding) == 0.0);
  }
}

TEST_CASE("network: similarity projector and logits") {
  const ModelConfig cfg = tiny_config();
  Model model(cfg);

  SUBCASE("k=0 projects to an empty matrix") {
    ad::NoGradGuard ng;
    nn::ParamGraph pg(model.params(), false);
    auto out = model.project_similarity(pg, ad::leaf(Tensor::zeros({0, cfg.query_dim})));
    CHECK(out->val.dim(0) == 0);
    CHECK(out->val.dim(1) == cfg.sim_dim);
  }

  SUBCASE("identical rows project identically") {
    Rng rng(4);
    Tensor row({1, cfg.query_dim});
    for (double& x : row.data) x = rng.uniform(-1, 1);
    Tensor two({2, cfg.query_dim});
    for (int k = 0; k < cfg.query_dim; ++k) two.at(0, k) = two.at(1, k) = row.data[k];
    ad::NoGradGuard ng;
    nn::ParamGraph pg(model.params(), false);
    auto out = model.project_similarity(pg, ad::leaf(two));
    for (int k = 0; k < cfg.sim_dim; ++k) CHECK(out->val.at(0, k) == out->val.at(1, k));
  }

  SUBCASE("similarity_logits equals explicit dot products") {
    Rng rng(12);
    Tensor a({3, 5}), b({4, 5});
    for (double& x : a.data) x = rng.uniform(-1, 1);
    for (double& x : b.data) x = rng.uniform(-1, 1);
    auto logits = net::similarity_logits(ad::leaf(a), ad::leaf(b));
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 4; ++j) {
        double dot = 0.0;
        for (int k = 0; k < 5; ++k) dot += a.at(i, k) * b.at(j, k);
        CHECK(logits->val.at(i, j) == doctest::Approx(dot).epsilon(1e-6));
      }

    // unit vector hand cases
    auto unit = ad::leaf(Tensor({1, 2}, {1.0, 0.0}));
    CHECK(net::similarity_logits(unit, unit)->val.data[0] == doctest::Approx(1.0));
    auto ortho = ad::leaf(Tensor({1, 2}, {0.0, 1.0}));
    CHECK(net::similarity_logits(unit, ortho)->val.data[0] == doctest::Approx(0.0));

    auto bad = ad::leaf(Tensor({1, 3}, {0.0, 1.0, 0.0}));
    CHECK_THROWS_AS(net::similarity_logits(unit, bad), DataError);
  }
}

TEST_CASE("network: head gradients match finite differences on a tiny config") {
  const ModelConfig cfg = tiny_config();
  Model model(cfg);
  Rng rng(21);
  const Tensor stack0 = random_stack(rng, cfg.n_input_slices, 16, 16);
  Tensor readout_emb({1, cfg.sim_dim});
  for (double& x : readout_emb.data) x = rng.uniform(-1, 1);

  enum class Head { kClass, kBox, kSim };
  auto readout = [&](const Tensor& stack, Head head, bool trainable) {
    nn::ParamGraph pg(model.params(), trainable);
    const auto fwd = model.forward(pg, stack, {});
    switch (head) {
      case Head::kClass:
        return ad::sum(fwd.final_layer().scores);
      case Head::kBox:
        return ad::sum(fwd.final_layer().boxes);
      case Head::kSim: {
        auto proj = model.project_similarity(pg, ad::slice_rows(fwd.final_layer().embed, 0, 2));
        return ad::sum(net::similarity_logits(proj, ad::leaf(readout_emb)));
      }
    }
    return ad::constant(0.0);
  };

  for (Head head : {Head::kClass, Head::kBox, Head::kSim}) {
    auto x = ad::leaf(stack0, true);
    // differentiate w.r.t. the input stack through the whole network
    nn::ParamGraph pg(model.params(), false);
    const auto fwd = model.forward(pg, x, net::TrackQuerySet{});
    ad::NodePtr y;
    switch (head) {
      case Head::kClass:
        y = ad::sum(fwd.final_layer().scores);
        break;
      case Head::kBox:
        y = ad::sum(fwd.final_layer().boxes);
        break;
      case Head::kSim: {
        auto proj = model.project_similarity(pg, ad::slice_rows(fwd.final_layer().embed, 0, 2));
        y = ad::sum(net::similarity_logits(proj, ad::leaf(readout_emb)));
        break;
      }
    }
    ad::backward(y);
    REQUIRE(x->grad.numel() == stack0.numel());

    Rng pick(55);
    const double step = 1e-5;
    int checked = 0;
    for (int t = 0; t < 25; ++t) {
      const std::size_t i = pick.uniform_below(stack0.numel());
      Tensor plus = stack0, minus = stack0;
      plus.data[i] += step;
      minus.data[i] -= step;
      ad::NoGradGuard ng;
      const double fp = readout(plus, head, false)->scalar();
      const double fm = readout(minus, head, false)->scalar();
      const double fd = (fp - fm) / (2.0 * step);
      const double an = x->grad.data[i];
      if (std::abs(fd) < 1e-8 && std::abs(an) < 1e-8) continue;
      CHECK(std::abs(fd - an) <= 1e-3 * std::max({std::abs(fd), std::abs(an), 1e-6}));
      ++checked;
    }
    CHECK(checked > 5);
  }
}

TEST_CASE("network: checkpoint round trip preserves behaviour") {
  namespace fs = std::filesystem;
  const fs::path path = fs::temp_directory_path() /
                        ("slicetrack_ckpt_" + std::to_string(::getpid()) + ".bin");
  const ModelConfig cfg = tiny_config();
  Model model(cfg);
  Rng rng(33);
  const Tensor stack = random_stack(rng, cfg.n_input_slices, 16, 16);

  ad::NoGradGuard ng;
  nn::ParamGraph pg(model.params(), false);
  const auto before = model.forward(pg, stack, {});

  net::save_checkpoint(path, cfg, model.params(), {{"step", 123}});
  net::Checkpoint ck;
  Model restored = net::load_model(path, &ck);
  CHECK(ck.header.at("extra").at("step") == 123);

  nn::ParamGraph pg2(restored.params(), false);
  const auto after = restored.forward(pg2, stack, {});
  CHECK(max_abs_diff(before.final_layer().scores->val, after.final_layer().scores->val) == 0.0);
  CHECK(max_abs_diff(before.final_layer().boxes->val, after.final_layer().boxes->val) == 0.0);

  SUBCASE("corrupt magic is rejected") {
    std::ofstream bad(path, std::ios::binary | std::ios::trunc);
    bad << "NOTACKPT garbage";
    bad.close();
    CHECK_THROWS_AS(net::load_checkpoint(path), DataError);
  }
  fs::remove(path);
}
