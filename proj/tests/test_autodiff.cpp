#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "slicetrack/autodiff.hpp"
#include "slicetrack/nn.hpp"
#include "slicetrack/rng.hpp"

using namespace slicetrack;
using ad::NodePtr;

namespace {

// Central finite differences of a scalar function of one leaf tensor,
// compared against the backward() gradient.
void check_gradient(const Tensor& x0, const std::function<NodePtr(NodePtr)>& f,
                    double step = 1e-6, double rel_tol = 1e-5) {
  auto x = ad::leaf(x0, true);
  auto y = f(x);
  REQUIRE(y->val.numel() == 1);
  ad::backward(y);
  if (x->grad.numel() == 0) x->grad = Tensor::zeros(x0.shape);  // untouched leaf
  for (std::size_t i = 0; i < x0.numel(); ++i) {
    Tensor plus = x0, minus = x0;
    plus.data[i] += step;
    minus.data[i] -= step;
    const double fp = f(ad::leaf(plus, false))->scalar();
    const double fm = f(ad::leaf(minus, false))->scalar();
    const double fd = (fp - fm) / (2.0 * step);
    const double an = x->grad.data[i];
    const double tol = rel_tol * std::max({std::abs(fd), std::abs(an), 1e-4});
    CHECK(std::abs(fd - an) <= tol);
  }
}

Tensor random_tensor(Rng& rng, std::vector<int> shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("autodiff: elementwise op gradients match finite differences") {
  Rng rng(3);
  const Tensor x = random_tensor(rng, {3, 4}, 0.2, 1.5);
  const Tensor w = random_tensor(rng, {3, 4}, -1.0, 1.0);

  check_gradient(x, [&](NodePtr n) { return ad::sum(ad::mul(n, ad::leaf(w))); });
  check_gradient(x, [&](NodePtr n) { return ad::sum(ad::div(ad::leaf(w), n)); });
  check_gradient(x, [&](NodePtr n) { return ad::sum(ad::sigmoid(n)); });
  check_gradient(x, [&](NodePtr n) { return ad::sum(ad::gelu(n)); });
  check_gradient(x, [&](NodePtr n) { return ad::sum(ad::log(n)); });
  check_gradient(x, [&](NodePtr n) { return ad::sum(ad::pow_const(n, 2.5)); });
  check_gradient(x, [&](NodePtr n) { return ad::sum(ad::sin(n)); });
  check_gradient(x, [&](NodePtr n) { return ad::sum(ad::cos(n)); });
  check_gradient(x, [&](NodePtr n) { return ad::mean(ad::min_elt(n, ad::leaf(w))); });
  check_gradient(x, [&](NodePtr n) { return ad::mean(ad::max_elt(n, ad::leaf(w))); });
}

TEST_CASE("autodiff: matmul family gradients") {
  Rng rng(5);
  const Tensor a = random_tensor(rng, {3, 5});
  const Tensor b = random_tensor(rng, {5, 2});
  const Tensor bt = random_tensor(rng, {2, 5});
  const Tensor r = random_tensor(rng, {3, 2});

  check_gradient(a, [&](NodePtr n) {
    return ad::sum(ad::mul(ad::matmul(n, ad::leaf(b)), ad::leaf(r)));
  });
  check_gradient(b, [&](NodePtr n) {
    return ad::sum(ad::mul(ad::matmul(ad::leaf(a), n), ad::leaf(r)));
  });
  check_gradient(bt, [&](NodePtr n) {
    return ad::sum(ad::mul(ad::matmul_nt(ad::leaf(a), n), ad::leaf(r)));
  });
  check_gradient(a, [&](NodePtr n) { return ad::sum(ad::transpose(n)); });
}

TEST_CASE("autodiff: structural op gradients") {
  Rng rng(7);
  const Tensor a = random_tensor(rng, {4, 3});
  const Tensor weight = random_tensor(rng, {2, 3});

  check_gradient(a, [&](NodePtr n) {
    return ad::sum(ad::mul(ad::slice_rows(n, 1, 3), ad::leaf(weight)));
  });
  check_gradient(a, [&](NodePtr n) {
    return ad::sum(ad::gather_rows(n, {2, 0, 2}));
  });
  check_gradient(a, [&](NodePtr n) {
    return ad::sum(ad::concat_rows({n, ad::slice_rows(n, 0, 2)}));
  });
  check_gradient(a, [&](NodePtr n) {
    return ad::sum(ad::concat_cols({ad::slice_cols(n, 0, 1), ad::slice_cols(n, 1, 3)}));
  });
  check_gradient(a, [&](NodePtr n) {
    return ad::sum(ad::mul_rows(n, ad::leaf(Tensor({4}, {1.0, 0.0, 2.0, -1.0}))));
  });
  check_gradient(a, [&](NodePtr n) {
    return ad::sum(ad::mul_cols(n, ad::leaf(Tensor({3}, {0.5, 2.0, -1.5}))));
  });
}

TEST_CASE("autodiff: masked softmax rows") {
  Rng rng(9);
  const Tensor s = random_tensor(rng, {3, 4});
  std::vector<std::uint8_t> blocked(12, 0);
  blocked[0 * 4 + 1] = 1;  // row 0 cannot see key 1
  blocked[2 * 4 + 0] = blocked[2 * 4 + 1] = blocked[2 * 4 + 2] = 1;

  auto w = ad::masked_softmax_rows(ad::leaf(s), blocked);
  // visible rows sum to one, blocked entries exactly zero
  for (int r = 0; r < 3; ++r) {
    double row_sum = 0.0;
    for (int c = 0; c < 4; ++c) row_sum += w->val.at(r, c);
    CHECK(row_sum == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(w->val.at(0, 1) == 0.0);
  CHECK(w->val.at(2, 0) == 0.0);
  CHECK(w->val.at(2, 3) == 1.0);

  const Tensor readout = random_tensor(rng, {3, 4});
  check_gradient(s, [&](NodePtr n) {
    return ad::sum(ad::mul(ad::masked_softmax_rows(n, blocked), ad::leaf(readout)));
  });

  // a fully blocked row yields zeros
  std::vector<std::uint8_t> all_blocked(12, 0);
  for (int c = 0; c < 4; ++c) all_blocked[1 * 4 + c] = 1;
  auto w2 = ad::masked_softmax_rows(ad::leaf(s), all_blocked);
  for (int c = 0; c < 4; ++c) CHECK(w2->val.at(1, c) == 0.0);
}

TEST_CASE("autodiff: layernorm gradients") {
  Rng rng(11);
  const Tensor x = random_tensor(rng, {3, 6});
  const Tensor g = random_tensor(rng, {6}, 0.5, 1.5);
  const Tensor b = random_tensor(rng, {6});
  const Tensor readout = random_tensor(rng, {3, 6});

  auto f = [&](NodePtr n, NodePtr gn, NodePtr bn) {
    return ad::sum(ad::mul(ad::layernorm_rows(n, gn, bn), ad::leaf(readout)));
  };
  check_gradient(x, [&](NodePtr n) { return f(n, ad::leaf(g), ad::leaf(b)); });
  check_gradient(g, [&](NodePtr n) { return f(ad::leaf(x), n, ad::leaf(b)); });
  check_gradient(b, [&](NodePtr n) { return f(ad::leaf(x), ad::leaf(g), n); });
}

TEST_CASE("autodiff: im2col conv stage gradient") {
  Rng rng(13);
  const Tensor x = random_tensor(rng, {2, 6, 6});
  const Tensor w = random_tensor(rng, {2 * 9, 3}, -0.4, 0.4);

  check_gradient(x, [&](NodePtr n) {
    return ad::sum(ad::matmul(ad::im2col(n, 3, 3, 2, 1), ad::leaf(w)));
  });
  check_gradient(w, [&](NodePtr n) {
    return ad::sum(ad::matmul(ad::im2col(ad::leaf(x), 3, 3, 2, 1), n));
  });
}

TEST_CASE("autodiff: no-grad mode records nothing") {
  ad::NoGradGuard guard;
  auto x = ad::leaf(Tensor::full({2, 2}, 1.5), true);
  auto y = ad::sum(ad::mul(x, x));
  CHECK(y->scalar() == doctest::Approx(9.0));
  CHECK_FALSE(y->requires_grad);
  CHECK(y->parents.empty());
}

TEST_CASE("autodiff: shared subexpression accumulates gradient once per use") {
  auto x = ad::leaf(Tensor::scalar(3.0), true);
  auto y = ad::mul(x, x);  // x^2, dy/dx = 6
  ad::backward(y);
  CHECK(x->grad.data[0] == doctest::Approx(6.0));
}

TEST_CASE("autodiff: attention layer end-to-end gradient") {
  Rng rng(17);
  nn::ParamStore store;
  Rng init_rng(1);
  nn::MultiheadAttention mha(store, init_rng, "attn", 8, 2);

  const Tensor q = random_tensor(rng, {3, 8});
  const Tensor kv = random_tensor(rng, {5, 8});
  const Tensor readout = random_tensor(rng, {3, 8});

  check_gradient(q, [&](NodePtr n) {
    nn::ParamGraph pg(store, false);
    auto out = mha.fwd(pg, n, ad::leaf(kv), ad::leaf(kv));
    return ad::sum(ad::mul(out, ad::leaf(readout)));
  });

  // parameter gradient through the same layer
  const Tensor w0 = store.at("attn.q.w");
  check_gradient(w0, [&](NodePtr n) {
    nn::ParamGraph pg(store, false);
    auto qs = ad::add_bias(ad::matmul(ad::leaf(q), n), pg.get("attn.q.b"));
    auto ks = mha.k.fwd(pg, ad::leaf(kv));
    auto vs = mha.v.fwd(pg, ad::leaf(kv));
    std::vector<NodePtr> heads;
    for (int h = 0; h < 2; ++h) {
      auto qh = ad::slice_cols(qs, h * 4, (h + 1) * 4);
      auto kh = ad::slice_cols(ks, h * 4, (h + 1) * 4);
      auto vh = ad::slice_cols(vs, h * 4, (h + 1) * 4);
      auto sm = ad::masked_softmax_rows(ad::scale(ad::matmul_nt(qh, kh), 0.5), {});
      heads.push_back(ad::matmul(sm, vh));
    }
    auto out = mha.o.fwd(pg, ad::concat_cols(heads));
    return ad::sum(ad::mul(out, ad::leaf(readout)));
  });
}
