#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "tcsa/ops.hpp"
#include "testutil.hpp"

using namespace tcsa;
using tcsa::test::grad_check;
using tcsa::test::random_tensor;

TEST_CASE("matmul identity and hand expansion") {
  auto eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  auto a = Tensor::from_values({2, 2}, {1, 2, 3, 4});
  auto c = ops::matmul<float>(nullptr, eye, a);
  CHECK(*c.data == *a.data);

  auto b = Tensor::from_values({3, 2}, {1, 0, 0, 1, 1, 1});
  auto v = Tensor::from_values({2, 1}, {2, 3});
  auto r = ops::matmul<float>(nullptr, b, v);
  CHECK(r.at(0, 0) == 2.0f);
  CHECK(r.at(1, 0) == 3.0f);
  CHECK(r.at(2, 0) == 5.0f);

  auto z = Tensor::zeros({2, 3});
  auto any = Tensor::from_values({3, 4}, std::vector<float>(12, 7.0f));
  auto zz = ops::matmul<float>(nullptr, z, any);
  for (float x : *zz.data) CHECK(x == 0.0f);

  CHECK_THROWS_AS(ops::matmul<float>(nullptr, a, b), TensorError);
}

TEST_CASE("softmax rows: symmetry, closed form, single column") {
  auto a = Tensor::from_values({1, 3}, {0, 0, 0});
  auto s = ops::softmax_rows<float>(nullptr, a);
  for (float v : *s.data) CHECK(v == doctest::Approx(1.0f / 3.0f));

  auto b = Tensor::from_values({1, 2}, {std::log(2.0f), 0.0f});
  auto sb = ops::softmax_rows<float>(nullptr, b);
  CHECK(sb.at(0, 0) == doctest::Approx(2.0f / 3.0f));
  CHECK(sb.at(0, 1) == doctest::Approx(1.0f / 3.0f));

  auto c = Tensor::from_values({3, 1}, {5, -2, 0});
  auto sc = ops::softmax_rows<float>(nullptr, c);
  for (float v : *sc.data) CHECK(v == doctest::Approx(1.0f));
}

TEST_CASE("softmax rows sum to one for wild inputs") {
  std::mt19937_64 rng(7);
  auto a = random_tensor<float>({16, 9}, rng, -50.0, 50.0);
  auto s = ops::softmax_rows<float>(nullptr, a);
  for (std::size_t i = 0; i < 16; ++i) {
    double sum = 0;
    for (std::size_t j = 0; j < 9; ++j) sum += s.at(i, j);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("topk rows ordering and tie rule") {
  auto a = Tensor::from_values({1, 3}, {3, 1, 2});
  auto [v, idx] = ops::topk_rows<float>(nullptr, a, 2);
  CHECK(v.at(0, 0) == 3.0f);
  CHECK(v.at(0, 1) == 2.0f);
  CHECK(idx.at(0, 0) == 0);
  CHECK(idx.at(0, 1) == 2);

  auto [vf, idxf] = ops::topk_rows<float>(nullptr, a, 3);
  CHECK(vf.at(0, 0) == 3.0f);
  CHECK(vf.at(0, 1) == 2.0f);
  CHECK(vf.at(0, 2) == 1.0f);

  auto t = Tensor::from_values({1, 3}, {5, 5, 1});
  auto [vt, idxt] = ops::topk_rows<float>(nullptr, t, 1);
  CHECK(vt.at(0, 0) == 5.0f);
  CHECK(idxt.at(0, 0) == 0);

  CHECK_THROWS_AS(ops::topk_rows<float>(nullptr, a, 0), TensorError);
  CHECK_THROWS_AS(ops::topk_rows<float>(nullptr, a, 4), TensorError);
}

TEST_CASE("topk values are a subsequence of the sorted row and reproduce via indices") {
  std::mt19937_64 rng(11);
  auto a = random_tensor<float>({6, 10}, rng);
  auto [v, idx] = ops::topk_rows<float>(nullptr, a, 4);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(v.at(i, j) == a.at(i, static_cast<std::size_t>(idx.at(i, j))));
      if (j > 0) CHECK(v.at(i, j - 1) >= v.at(i, j));
    }
  }
}

TEST_CASE("gather / scatter") {
  auto v = Tensor::from_values({3, 1}, {1, 2, 3});
  IndexMatrix idx{1, 2, {2, 0}};
  auto g = ops::gather_rows<float>(nullptr, v, idx);
  CHECK(g.at(0, 0, 0) == 3.0f);
  CHECK(g.at(0, 1, 0) == 1.0f);

  IndexMatrix bad{1, 1, {5}};
  CHECK_THROWS_AS(ops::gather_rows<float>(nullptr, v, bad), TensorError);

  auto src = Tensor::from_values({1, 1}, {7});
  auto sc = ops::scatter_rows<float>(nullptr, src, {1}, 3);
  CHECK(sc.at(0, 0) == 0.0f);
  CHECK(sc.at(1, 0) == 7.0f);
  CHECK(sc.at(2, 0) == 0.0f);

  auto full = Tensor::from_values({3, 1}, {4, 5, 6});
  auto scf = ops::scatter_rows<float>(nullptr, full, {0, 1, 2}, 3);
  CHECK(*scf.data == *full.data);

  auto empty = Tensor::zeros({0, 2});
  auto sce = ops::scatter_rows<float>(nullptr, empty, {}, 4);
  CHECK(sce.shape[0] == 4);
  for (float x : *sce.data) CHECK(x == 0.0f);

  CHECK_THROWS_AS(ops::scatter_rows<float>(nullptr, full, {0, 0, 1}, 3), TensorError);
  CHECK_THROWS_AS(ops::scatter_rows<float>(nullptr, full, {0, 1, 5}, 3), TensorError);
}

TEST_CASE("gather of scatter is the identity on the scattered rows") {
  std::mt19937_64 rng(3);
  auto s = random_tensor<float>({4, 3}, rng);
  std::vector<long> pos = {1, 2, 5, 7};
  auto placed = ops::scatter_rows<float>(nullptr, s, pos, 9);
  auto back = ops::take_rows<float>(nullptr, placed, pos);
  CHECK(*back.data == *s.data);
}

TEST_CASE("conv1x1 identity, matmul agreement, bias broadcast") {
  std::mt19937_64 rng(5);
  auto x = random_tensor<float>({1, 2, 2, 3}, rng);
  auto eye = Tensor::from_values({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto zero_b = Tensor::zeros({3});
  auto y = ops::conv1x1<float>(nullptr, x, eye, zero_b);
  CHECK(*y.data == *x.data);

  auto w = random_tensor<float>({3, 2}, rng);
  auto b = random_tensor<float>({2}, rng);
  auto x1 = random_tensor<float>({1, 1, 1, 3}, rng);
  auto out = ops::conv1x1<float>(nullptr, x1, w, b);
  auto flat = x1.reshaped({1, 3});
  auto oracle = ops::matmul<float>(nullptr, flat, w);
  CHECK(out.at(0, 0, 0, 0) == doctest::Approx(oracle.at(0, 0) + b.at(0)));
  CHECK(out.at(0, 0, 0, 1) == doctest::Approx(oracle.at(0, 1) + b.at(1)));

  auto zx = Tensor::zeros({1, 2, 2, 3});
  auto zy = ops::conv1x1<float>(nullptr, zx, w, b);
  for (std::size_t p = 0; p < 4; ++p) {
    CHECK(zy.at(p * 2) == doctest::Approx(b.at(0)));
    CHECK(zy.at(p * 2 + 1) == doctest::Approx(b.at(1)));
  }
}

TEST_CASE("dwconv delta kernel identity, all-ones interior sum, 1x1 input") {
  std::mt19937_64 rng(9);
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{1, 1}, {3, 5}, {7, 7}}) {
    auto x = random_tensor<float>({1, h, w, 2}, rng);
    auto delta = Tensor::zeros({2, 3, 3});
    delta.at(0 * 9 + 4) = 1.0f;
    delta.at(1 * 9 + 4) = 1.0f;
    auto bias = Tensor::zeros({2});
    auto y = ops::dwconv<float>(nullptr, x, delta, bias);
    CHECK(test::max_abs_diff(y, x) == 0.0);
  }

  auto xc = Tensor::full({1, 5, 5, 1}, 2.5f);
  auto ones = Tensor::full({1, 3, 3}, 1.0f);
  auto b0 = Tensor::zeros({1});
  auto yc = ops::dwconv<float>(nullptr, xc, ones, b0);
  CHECK(yc.at(0, 2, 2, 0) == doctest::Approx(9.0f * 2.5f));

  auto x1 = Tensor::full({1, 1, 1, 1}, 3.0f);
  std::vector<float> k49(49, 1.0f);
  auto w7 = Tensor::from_values({1, 7, 7}, k49);
  auto y1 = ops::dwconv<float>(nullptr, x1, w7, b0);
  // only the center tap overlaps the 1x1 input
  CHECK(y1.at(0) == doctest::Approx(3.0f));
}

TEST_CASE("norms: inference BN identity, constant-row layernorm, hand layernorm") {
  std::mt19937_64 rng(13);
  auto x = random_tensor<float>({1, 2, 2, 3}, rng);
  auto gamma = Tensor::full({3}, 1.0f);
  auto beta = Tensor::zeros({3});
  ops::BatchNormStateT<float> st;
  st.running_mean = Tensor::zeros({3});
  st.running_var = Tensor::full({3}, 1.0f);
  auto y = ops::batchnorm<float>(nullptr, x, gamma, beta, st, false, 0.1f, 0.0f);
  CHECK(test::max_abs_diff(y, x) < 1e-6);

  auto xc = Tensor::full({1, 4}, 3.0f);
  auto g4 = Tensor::full({4}, 1.0f);
  auto b4 = Tensor::zeros({4});
  auto ln = ops::layernorm<float>(nullptr, xc, g4, b4);
  for (float v : *ln.data) CHECK(v == doctest::Approx(0.0f));

  auto xt = Tensor::from_values({2, 2}, {1, 3, -1, 5});
  auto g2 = Tensor::full({2}, 1.0f);
  auto b2 = Tensor::zeros({2});
  auto lt = ops::layernorm<float>(nullptr, xt, g2, b2);
  // row 0: mu=2 var=1 -> (x-mu)/sqrt(1+eps)
  CHECK(lt.at(0, 0) == doctest::Approx(-1.0f / std::sqrt(1.0f + 1e-5f)));
  CHECK(lt.at(0, 1) == doctest::Approx(1.0f / std::sqrt(1.0f + 1e-5f)));
  // row 1: mu=2 var=9
  CHECK(lt.at(1, 0) == doctest::Approx(-3.0f / std::sqrt(9.0f + 1e-5f)));
}

TEST_CASE("gelu, gap, concat/split round trip") {
  auto z = Tensor::zeros({1, 1});
  CHECK(ops::gelu<float>(nullptr, z).at(0) == 0.0f);

  auto g = Tensor::from_values({2, 2}, {1, 3, 3, 1});
  auto m = ops::gap_tokens<float>(nullptr, g);
  CHECK(m.at(0, 0) == doctest::Approx(2.0f));
  CHECK(m.at(0, 1) == doctest::Approx(2.0f));

  std::mt19937_64 rng(17);
  auto a = random_tensor<float>({3, 2}, rng);
  auto b = random_tensor<float>({3, 4}, rng);
  auto cat = ops::concat_channels<float>(nullptr, a, b);
  auto a2 = ops::slice_channels<float>(nullptr, cat, 0, 2);
  auto b2 = ops::slice_channels<float>(nullptr, cat, 2, 4);
  CHECK(*a2.data == *a.data);
  CHECK(*b2.data == *b.data);
}

TEST_CASE("pixel shuffle index arithmetic and factor 1") {
  auto x = Tensor::from_values({1, 1, 1, 4}, {1, 2, 3, 4});
  auto y = ops::pixel_shuffle<float>(nullptr, x, 2);
  CHECK(y.shape == std::vector<std::size_t>{1, 2, 2, 1});
  CHECK(y.at(0, 0, 0, 0) == 1.0f);
  CHECK(y.at(0, 0, 1, 0) == 2.0f);
  CHECK(y.at(0, 1, 0, 0) == 3.0f);
  CHECK(y.at(0, 1, 1, 0) == 4.0f);

  auto same = ops::pixel_shuffle<float>(nullptr, x, 1);
  CHECK(*same.data == *x.data);
}

TEST_CASE("backward: sum gives ones, double backward is an error") {
  Tape tape;
  auto x = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  x.set_requires_grad();
  auto loss = ops::sum_all<float>(&tape, x);
  tape.backward(loss);
  for (float g : *x.grad) CHECK(g == 1.0f);
  CHECK_THROWS_AS(tape.backward(loss), TensorError);
}

TEST_CASE("backward: non-scalar loss is an error") {
  Tape tape;
  auto x = Tensor::from_values({2, 2}, {1, 2, 3, 4});
  x.set_requires_grad();
  auto y = ops::scale<float>(&tape, x, 2.0f);
  CHECK_THROWS_AS(tape.backward(y), TensorError);
}

TEST_CASE("gradient check: matmul chain at f32 and f64") {
  std::mt19937_64 rng(23);
  auto runs = [&]<class T>(T h, double floor, double tol_max, double tol_mean) {
    auto x = test::random_tensor<T>({3, 4}, rng);
    auto w = test::random_tensor<T>({4, 2}, rng);
    x.set_requires_grad();
    w.set_requires_grad();
    auto build = [&](TapeT<T>* tape) {
      return ops::sum_all(tape, ops::matmul(tape, x, w));
    };
    auto res = grad_check<T>(build, {&x, &w}, h, floor);
    CHECK(res.max_rel < tol_max);
    CHECK(res.mean_rel < tol_mean);
  };
  runs(1e-3f, 1e-2, 1e-2, 1e-3);
  runs(1e-5, 1e-6, 1e-6, 1e-7);
}

TEST_CASE("gradient check: gelu of conv1x1 chain") {
  std::mt19937_64 rng(29);
  auto x = test::random_tensor<double>({1, 2, 2, 3}, rng);
  auto w = test::random_tensor<double>({3, 2}, rng);
  auto b = test::random_tensor<double>({2}, rng);
  x.set_requires_grad();
  w.set_requires_grad();
  b.set_requires_grad();
  auto build = [&](TapeT<double>* tape) {
    return ops::sum_all(tape, ops::gelu(tape, ops::conv1x1(tape, x, w, b)));
  };
  auto res = grad_check<double>(build, {&x, &w, &b}, 1e-5, 1e-6);
  CHECK(res.mean_rel < 1e-6);
}

TEST_CASE("gradient check: softmax, topk, gather, weighted sum, norms, conv2d, dwconv") {
  std::mt19937_64 rng(31);
  using T = double;
  const T h = 1e-5;
  const double floor = 1e-6;

  SUBCASE("softmax") {
    auto x = test::random_tensor<T>({3, 4}, rng);
    x.set_requires_grad();
    auto w = test::random_tensor<T>({3, 4}, rng);
    auto build = [&](TapeT<T>* tape) {
      // weighted sum so the softmax grad is not trivially zero
      auto s = ops::softmax_rows(tape, x);
      auto prod = ops::matmul(tape, s, ops::transpose2d(tape, w));
      return ops::sum_all(tape, ops::gelu(tape, prod));
    };
    CHECK(grad_check<T>(build, {&x}, h, floor).mean_rel < 1e-5);
  }

  SUBCASE("topk + gather + weighted sum") {
    auto x = test::random_tensor<T>({3, 5}, rng);
    auto v = test::random_tensor<T>({5, 2}, rng);
    x.set_requires_grad();
    v.set_requires_grad();
    auto build = [&](TapeT<T>* tape) {
      auto [vals, idx] = ops::topk_rows(tape, x, 2);
      auto w = ops::softmax_rows(tape, vals);
      auto g = ops::gather_rows(tape, v, idx);
      return ops::sum_all(tape, ops::gelu(tape, ops::weighted_sum_rows(tape, w, g)));
    };
    CHECK(grad_check<T>(build, {&x, &v}, h, floor).mean_rel < 1e-5);
  }

  SUBCASE("repeated gather index accumulates both contributions") {
    auto v = test::random_tensor<T>({3, 2}, rng);
    v.set_requires_grad();
    IndexMatrix idx{1, 2, {1, 1}};
    auto build = [&](TapeT<T>* tape) {
      auto g = ops::gather_rows(tape, v, idx);
      return ops::sum_all(tape, ops::gelu(tape, g.reshaped({2, 2})));
    };
    CHECK(grad_check<T>(build, {&v}, h, floor).mean_rel < 1e-5);
  }

  SUBCASE("layernorm and training batchnorm") {
    auto x = test::random_tensor<T>({4, 3}, rng);
    auto gm = test::random_tensor<T>({3}, rng, 0.5, 1.5);
    auto bt = test::random_tensor<T>({3}, rng);
    x.set_requires_grad();
    gm.set_requires_grad();
    bt.set_requires_grad();
    auto build_ln = [&](TapeT<T>* tape) {
      return ops::sum_all(tape, ops::gelu(tape, ops::layernorm(tape, x, gm, bt)));
    };
    CHECK(grad_check<T>(build_ln, {&x, &gm, &bt}, h, floor).mean_rel < 1e-5);

    auto build_bn = [&](TapeT<T>* tape) {
      ops::BatchNormStateT<T> st;  // fresh state so repeated calls are pure
      st.running_mean = TensorT<T>::zeros({3});
      st.running_var = TensorT<T>::full({3}, T(1));
      return ops::sum_all(tape, ops::gelu(tape, ops::batchnorm(tape, x, gm, bt, st, true)));
    };
    CHECK(grad_check<T>(build_bn, {&x, &gm, &bt}, h, floor).mean_rel < 1e-5);
  }

  SUBCASE("conv2d and dwconv") {
    auto x = test::random_tensor<T>({1, 4, 4, 2}, rng);
    auto w = test::random_tensor<T>({3, 3, 2, 2}, rng);
    auto b = test::random_tensor<T>({2}, rng);
    x.set_requires_grad();
    w.set_requires_grad();
    b.set_requires_grad();
    auto build = [&](TapeT<T>* tape) {
      return ops::sum_all(tape, ops::gelu(tape, ops::conv2d(tape, x, w, b, 1, 1)));
    };
    CHECK(grad_check<T>(build, {&x, &w, &b}, h, floor).mean_rel < 1e-5);

    auto dw = test::random_tensor<T>({2, 3, 3}, rng);
    auto db = test::random_tensor<T>({2}, rng);
    dw.set_requires_grad();
    db.set_requires_grad();
    auto build_dw = [&](TapeT<T>* tape) {
      return ops::sum_all(tape, ops::gelu(tape, ops::dwconv(tape, x, dw, db)));
    };
    CHECK(grad_check<T>(build_dw, {&x, &dw, &db}, h, floor).mean_rel < 1e-5);
  }

  SUBCASE("pixel shuffle and scatter") {
    auto x = test::random_tensor<T>({1, 2, 2, 8}, rng);
    x.set_requires_grad();
    auto build = [&](TapeT<T>* tape) {
      return ops::sum_all(tape, ops::gelu(tape, ops::pixel_shuffle(tape, x, 2)));
    };
    CHECK(grad_check<T>(build, {&x}, h, floor).mean_rel < 1e-5);

    auto s = test::random_tensor<T>({2, 3}, rng);
    s.set_requires_grad();
    auto build_sc = [&](TapeT<T>* tape) {
      return ops::sum_all(tape, ops::gelu(tape, ops::scatter_rows(tape, s, {1, 3}, 5)));
    };
    CHECK(grad_check<T>(build_sc, {&s}, h, floor).mean_rel < 1e-5);
  }
}

TEST_CASE("ce_dice_loss: limits and closed forms") {
  // strong correct logits -> loss ~ 0
  auto good = Tensor::from_values({2, 2}, {30, -30, -30, 30});
  auto l1 = ops::ce_dice_loss<float>(nullptr, good, {0, 1});
  CHECK(l1.at(0) == doctest::Approx(0.0f).epsilon(1e-4));

  // uniform logits, 2 classes, balanced mask: CE term = ln 2
  auto uni = Tensor::zeros({4, 2});
  auto l2 = ops::ce_dice_loss<float>(nullptr, uni, {0, 0, 1, 1}, 1.0f, 0.0f);
  CHECK(l2.at(0) == doctest::Approx(std::log(2.0f)));

  // perfect one-hot prediction: soft dice loss ~ 0
  auto l3 = ops::ce_dice_loss<float>(nullptr, good, {0, 1}, 0.0f, 1.0f);
  CHECK(l3.at(0) == doctest::Approx(0.0f).epsilon(1e-4));

  CHECK_THROWS_AS(ops::ce_dice_loss<float>(nullptr, good, {0, 5}), TensorError);
}

TEST_CASE("gradient check: ce_dice_loss") {
  std::mt19937_64 rng(37);
  auto logits = test::random_tensor<double>({6, 3}, rng);
  logits.set_requires_grad();
  std::vector<int> target = {0, 1, 2, 1, 0, 2};
  auto build = [&](TapeT<double>* tape) {
    return ops::ce_dice_loss(tape, logits, target);
  };
  CHECK(grad_check<double>(build, {&logits}, 1e-6, 1e-6).mean_rel < 1e-5);
}

TEST_CASE("non-finite values are rejected") {
  auto x = Tensor::from_values({1, 2}, {1.0f, 2.0f});
  auto big = Tensor::from_values({2, 2}, {1e38f, 1e38f, 1e38f, 1e38f});
  CHECK_THROWS_AS(ops::matmul<float>(nullptr, big, big), TensorError);
  (void)x;
}

TEST_CASE("determinism: identical inputs give bitwise-identical outputs") {
  auto run = [] {
    std::mt19937_64 rng(99);
    auto x = test::random_tensor<float>({8, 8}, rng);
    auto w = test::random_tensor<float>({8, 8}, rng);
    auto y = ops::softmax_rows<float>(nullptr, ops::matmul<float>(nullptr, x, w));
    return *y.data;
  };
  CHECK(run() == run());
}
