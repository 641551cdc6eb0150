#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "tcsa/attention.hpp"
#include "testutil.hpp"

using namespace tcsa;

namespace {

// Straightforward dense multi-head softmax attention, no sparsity.
template <class T>
TensorT<T> dense_reference(const TensorT<T>& x, const AttentionParams<T>& p) {
  const std::size_t m = x.shape[0], C = x.shape[1], d = p.head_dim, heads = C / d;
  auto q = ops::matmul<T>(nullptr, x, p.wq);
  auto k = ops::matmul<T>(nullptr, x, p.wk);
  auto v = ops::matmul<T>(nullptr, x, p.wv);
  TensorT<T> out({m, C});
  const T inv = p.unscaled_attention ? T(1) : static_cast<T>(1.0 / std::sqrt(double(d)));
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < m; ++i) {
      std::vector<double> logits(m);
      double mx = -1e300;
      for (std::size_t j = 0; j < m; ++j) {
        double s = 0;
        for (std::size_t c = 0; c < d; ++c) s += q.at(i, h * d + c) * k.at(j, h * d + c);
        logits[j] = s * inv;
        mx = std::max(mx, logits[j]);
      }
      double z = 0;
      for (std::size_t j = 0; j < m; ++j) z += std::exp(logits[j] - mx);
      for (std::size_t c = 0; c < d; ++c) {
        double acc = 0;
        for (std::size_t j = 0; j < m; ++j)
          acc += std::exp(logits[j] - mx) / z * v.at(j, h * d + c);
        out.at(i, h * d + c) = static_cast<T>(acc);
      }
    }
  return out;
}

template <class T, class Rng>
AttentionParams<T> random_params(std::size_t C, std::size_t d, double lambda, Rng& rng) {
  AttentionParams<T> p;
  p.wq = tcsa::test::random_tensor<T>({C, C}, rng);
  p.wk = tcsa::test::random_tensor<T>({C, C}, rng);
  p.wv = tcsa::test::random_tensor<T>({C, C}, rng);
  p.head_dim = d;
  p.lambda = lambda;
  return p;
}

}  // namespace

TEST_CASE("effective k law") {
  CHECK(effective_k(392, 1.0 / 8.0) == 49);
  CHECK(effective_k(3, 1.0 / 8.0) == 1);   // floor of 1
  CHECK(effective_k(4, 1.0) == 4);
  CHECK(effective_k(4, 2.0) == 4);         // clamped to m
  CHECK(effective_k(10, 0.25) == 3);       // round(2.5) away from zero
  CHECK_THROWS_AS(effective_k(0, 0.5), TensorError);
}

TEST_CASE("two-token single-channel hand case") {
  AttentionParams<float> p;
  p.wq = Tensor::from_values({1, 1}, {1});
  p.wk = Tensor::from_values({1, 1}, {1});
  p.wv = Tensor::from_values({1, 1}, {1});
  p.head_dim = 1;
  p.lambda = 0.5;  // k = 1
  auto x = Tensor::from_values({2, 1}, {1, 2});
  auto [out, trace] = tksa<float>(nullptr, x, p);
  // relevance rows [1,2] and [2,4]; both queries pick token 1, weight 1
  CHECK(trace.k == 1);
  CHECK(trace.indices[0].at(0, 0) == 1);
  CHECK(trace.indices[0].at(1, 0) == 1);
  CHECK(trace.weights[0].at(0, 0) == doctest::Approx(1.0f));
  CHECK(out.at(0, 0) == doctest::Approx(2.0f));
  CHECK(out.at(1, 0) == doctest::Approx(2.0f));
}

TEST_CASE("full selection matches dense attention") {
  std::mt19937_64 rng(101);
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<std::size_t> md(1, 12);
    const std::size_t m = md(rng);
    const std::size_t d = 4, C = 8;
    auto p = random_params<float>(C, d, 1.0, rng);
    auto x = tcsa::test::random_tensor<float>({m, C}, rng);
    auto [out, trace] = tksa<float>(nullptr, x, p);
    auto ref = dense_reference(x, p);
    CHECK(tcsa::test::max_abs_diff(out, ref) < 1e-5);
    (void)trace;
  }
}

TEST_CASE("selection weights are row stochastic") {
  std::mt19937_64 rng(103);
  auto p = random_params<float>(8, 4, 1.0 / 8.0, rng);
  auto x = tcsa::test::random_tensor<float>({20, 8}, rng);
  auto [out, trace] = tksa<float>(nullptr, x, p);
  (void)out;
  for (const auto& w : trace.weights)
    for (std::size_t i = 0; i < w.shape[0]; ++i) {
      double sum = 0;
      for (std::size_t j = 0; j < w.shape[1]; ++j) sum += w.at(i, j);
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("unselected tokens do not contribute to a query's output") {
  std::mt19937_64 rng(107);
  const std::size_t m = 16, C = 4, d = 4;
  auto p = random_params<float>(C, d, 0.25, rng);  // k = 4
  auto x = tcsa::test::random_tensor<float>({m, C}, rng);
  auto [out, trace] = tksa<float>(nullptr, x, p);

  // recompute value rows and the weighted sum from the trace alone
  auto v = ops::matmul<float>(nullptr, x, p.wv);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t c = 0; c < d; ++c) {
      double acc = 0;
      for (std::size_t j = 0; j < trace.k; ++j)
        acc += trace.weights[0].at(i, j) *
               v.at(static_cast<std::size_t>(trace.indices[0].at(i, j)), c);
      CHECK(out.at(i, c) == doctest::Approx(acc).epsilon(1e-5));
    }
}

TEST_CASE("permutation equivariance on tie-free inputs") {
  std::mt19937_64 rng(109);
  const std::size_t m = 10, C = 8;
  auto p = random_params<float>(C, 4, 0.3, rng);
  auto x = tcsa::test::random_tensor<float>({m, C}, rng);
  auto [base, t0] = tksa<float>(nullptr, x, p);
  (void)t0;

  std::vector<std::size_t> perm(m);
  std::iota(perm.begin(), perm.end(), 0u);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor xp({m, C});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t c = 0; c < C; ++c) xp.at(i, c) = x.at(perm[i], c);
  auto [permuted, t1] = tksa<float>(nullptr, xp, p);
  (void)t1;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t c = 0; c < C; ++c)
      CHECK(permuted.at(i, c) == doctest::Approx(base.at(perm[i], c)).epsilon(1e-5));
}

TEST_CASE("forced indices reproduce the natural selection") {
  std::mt19937_64 rng(113);
  auto p = random_params<float>(8, 4, 0.25, rng);
  auto x = tcsa::test::random_tensor<float>({12, 8}, rng);
  auto [base, trace] = tksa<float>(nullptr, x, p);
  auto [forced, t2] = tksa<float>(nullptr, x, p, false, &trace.indices);
  (void)t2;
  CHECK(tcsa::test::max_abs_diff(base, forced) < 1e-6);
}

TEST_CASE("unscaled relevance differs from the scaled default") {
  std::mt19937_64 rng(127);
  auto p = random_params<float>(8, 4, 1.0, rng);
  auto x = tcsa::test::random_tensor<float>({6, 8}, rng);
  auto [scaled, ta] = tksa<float>(nullptr, x, p, true);
  p.unscaled_attention = true;
  auto [raw, tb] = tksa<float>(nullptr, x, p, true);
  (void)scaled;
  (void)raw;
  CHECK(ta.relevance[0].at(0, 0) == doctest::Approx(tb.relevance[0].at(0, 0) / 2.0f));
}

TEST_CASE("invalid head configuration is rejected") {
  std::mt19937_64 rng(131);
  auto p = random_params<float>(8, 3, 0.5, rng);  // 8 % 3 != 0
  auto x = tcsa::test::random_tensor<float>({4, 8}, rng);
  CHECK_THROWS_AS(tksa<float>(nullptr, x, p), TensorError);
  CHECK_THROWS_AS(tksa<float>(nullptr, Tensor::zeros({0, 8}), p), TensorError);
}

TEST_CASE("gradient check with frozen selection") {
  std::mt19937_64 rng(137);
  using T = double;
  const std::size_t m = 8, C = 8;
  auto p = random_params<T>(C, 4, 0.25, rng);
  auto x = tcsa::test::random_tensor<T>({m, C}, rng);
  x.set_requires_grad();
  p.wq.set_requires_grad();
  p.wk.set_requires_grad();
  p.wv.set_requires_grad();

  auto [probe, trace] = tksa<T>(nullptr, x, p);
  (void)probe;
  auto frozen = trace.indices;
  auto build = [&](TapeT<T>* tape) {
    auto [out, t] = tksa<T>(tape, x, p, false, &frozen);
    (void)t;
    return ops::sum_all(tape, ops::gelu(tape, out));
  };
  auto res = tcsa::test::grad_check<T>(build, {&x, &p.wq, &p.wk, &p.wv}, 1e-5, 1e-6);
  CHECK(res.mean_rel < 1e-5);
}
