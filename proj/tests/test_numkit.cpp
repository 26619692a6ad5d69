#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"
#include "emorag/kernels.hpp"
#include "emorag/numkit.hpp"
#include "emorag/rng.hpp"

using emorag::Rng;
namespace nk = emorag::numkit;

namespace {

nk::Tensor random_tensor(int rows, int cols, Rng& rng, bool requires_grad = true) {
  nk::Tensor t(rows, cols, requires_grad);
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(-1.0, 1.0);
  return t;
}

// Oracle: textbook three-loop product, no shared code with the kernels.
std::vector<double> naive_matmul(const std::vector<double>& a,
                                 const std::vector<double>& b, int m, int k, int n) {
  std::vector<double> c(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      for (int l = 0; l < k; ++l)
        c[static_cast<std::size_t>(i) * n + j] +=
            a[static_cast<std::size_t>(i) * k + l] * b[static_cast<std::size_t>(l) * n + j];
  return c;
}

}  // namespace

TEST_CASE("matmul matches a naive triple loop") {
  Rng rng(11);
  const int m = 13, k = 17, n = 9;
  std::vector<double> av(static_cast<std::size_t>(m) * k), bv(static_cast<std::size_t>(k) * n);
  for (double& x : av) x = rng.uniform(-2.0, 2.0);
  for (double& x : bv) x = rng.uniform(-2.0, 2.0);

  nk::Tensor a = nk::Tensor::from(m, k, av);
  nk::Tensor b = nk::Tensor::from(k, n, bv);
  nk::Tensor c = nk::matmul(a, b);
  std::vector<double> want = naive_matmul(av, bv, m, k, n);
  for (std::size_t i = 0; i < want.size(); ++i) {
    CHECK(c.data()[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }
}

TEST_CASE("parallel and serial kernels are bitwise identical") {
  Rng rng(12);
  // Big enough that the parallel branch actually forks.
  const int m = 48, k = 48, n = 48;
  std::vector<double> a(static_cast<std::size_t>(m) * k), b(static_cast<std::size_t>(k) * n);
  std::vector<double> bt(static_cast<std::size_t>(n) * k), at(static_cast<std::size_t>(k) * m);
  for (double& x : a) x = rng.uniform(-3.0, 3.0);
  for (double& x : b) x = rng.uniform(-3.0, 3.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) bt[static_cast<std::size_t>(i) * k + j] = rng.uniform(-3.0, 3.0);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < m; ++j) at[static_cast<std::size_t>(i) * m + j] = rng.uniform(-3.0, 3.0);

  std::vector<double> c1(static_cast<std::size_t>(m) * n), c2(c1);
  emorag::kernels::matmul(a.data(), b.data(), c1.data(), m, k, n);
  emorag::kernels::serial::matmul(a.data(), b.data(), c2.data(), m, k, n);
  CHECK(std::memcmp(c1.data(), c2.data(), c1.size() * sizeof(double)) == 0);

  std::vector<double> d1(static_cast<std::size_t>(m) * n, 0.5), d2(d1);
  emorag::kernels::matmul_acc(a.data(), b.data(), d1.data(), m, k, n);
  emorag::kernels::serial::matmul_acc(a.data(), b.data(), d2.data(), m, k, n);
  CHECK(std::memcmp(d1.data(), d2.data(), d1.size() * sizeof(double)) == 0);

  std::vector<double> e1(static_cast<std::size_t>(m) * n, -0.25), e2(e1);
  emorag::kernels::matmul_nt_acc(a.data(), bt.data(), e1.data(), m, k, n);
  emorag::kernels::serial::matmul_nt_acc(a.data(), bt.data(), e2.data(), m, k, n);
  CHECK(std::memcmp(e1.data(), e2.data(), e1.size() * sizeof(double)) == 0);

  std::vector<double> f1(static_cast<std::size_t>(m) * n, 1.0), f2(f1);
  emorag::kernels::matmul_tn_acc(at.data(), b.data(), f1.data(), m, k, n);
  emorag::kernels::serial::matmul_tn_acc(at.data(), b.data(), f2.data(), m, k, n);
  CHECK(std::memcmp(f1.data(), f2.data(), f1.size() * sizeof(double)) == 0);

  const std::size_t rows = 900;
  const int dim = 64;
  std::vector<double> vecs(rows * dim), q(dim);
  for (double& x : vecs) x = rng.uniform(-1.0, 1.0);
  for (double& x : q) x = rng.uniform(-1.0, 1.0);
  std::vector<double> s1(rows), s2(rows);
  emorag::kernels::dot_scan(vecs.data(), rows, dim, q.data(), s1.data());
  emorag::kernels::serial::dot_scan(vecs.data(), rows, dim, q.data(), s2.data());
  CHECK(std::memcmp(s1.data(), s2.data(), rows * sizeof(double)) == 0);
}

TEST_CASE("softmax rows against direct exponentials") {
  nk::Tensor x = nk::Tensor::from(2, 3, {1.0, 2.0, 3.0, -1.0, 0.0, 0.5});
  nk::Tensor s = nk::softmax_rows(x);
  for (int r = 0; r < 2; ++r) {
    double denom = 0.0;
    for (int j = 0; j < 3; ++j) denom += std::exp(x.at(r, j));
    double total = 0.0;
    for (int j = 0; j < 3; ++j) {
      CHECK(s.at(r, j) == doctest::Approx(std::exp(x.at(r, j)) / denom).epsilon(1e-12));
      total += s.at(r, j);
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("sum of squares backward gives 2x") {
  nk::Tensor x = nk::Tensor::from(1, 4, {0.5, -1.5, 2.0, 0.0}, true);
  nk::Tensor loss = nk::sum_all(nk::mul(x, x));
  CHECK(loss.value() == doctest::Approx(0.25 + 2.25 + 4.0).epsilon(1e-12));
  nk::backward(loss);
  const double want[] = {1.0, -3.0, 4.0, 0.0};
  for (int j = 0; j < 4; ++j) CHECK(x.grad()[j] == doctest::Approx(want[j]).epsilon(1e-12));
}

TEST_CASE("adam matches three hand-stepped updates on f(x) = x^2") {
  nk::Tensor x = nk::Tensor::scalar(1.0, true);
  std::vector<nk::Tensor> params{x};
  nk::AdamState state = nk::AdamState::init(params);
  const double lr = 0.1;

  double xm = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 3; ++t) {
    nk::zero_grad(params);
    nk::Tensor loss = nk::mul(x, x);
    nk::backward(loss);
    nk::adam_step(params, state, lr);

    const double g = 2.0 * xm;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mhat = m / (1.0 - std::pow(0.9, t));
    const double vhat = v / (1.0 - std::pow(0.999, t));
    xm -= lr * mhat / (std::sqrt(vhat) + 1e-8);
    CHECK(x.value() == doctest::Approx(xm).epsilon(1e-12));
  }
  CHECK(state.step_count == 3);
}

TEST_CASE("gradient check passes for every op") {
  Rng rng(21);
  const double h = 1e-5;
  const double tol = 1e-4;

  SUBCASE("elementwise and scalar ops") {
    nk::Tensor a = random_tensor(3, 4, rng);
    nk::Tensor b = random_tensor(3, 4, rng);
    nk::Tensor s = nk::Tensor::scalar(0.7, true);
    nk::Tensor c = random_tensor(3, 4, rng, false);
    std::vector<nk::Tensor> params{a, b, s};
    auto loss = [&]() {
      nk::Tensor t1 = nk::mul(nk::add(a, b), c);
      nk::Tensor t2 = nk::sub(t1, nk::scale(b, 0.3));
      nk::Tensor t3 = nk::add_const(nk::mul_scalar(t2, s), 0.1);
      return nk::sum_all(nk::sub_scalar(t3, s));
    };
    CHECK(nk::grad_check(params, loss, h) < tol);
  }

  SUBCASE("matmul and matmul_nt") {
    nk::Tensor a = random_tensor(3, 5, rng);
    nk::Tensor b = random_tensor(5, 2, rng);
    nk::Tensor bt = random_tensor(2, 5, rng);
    nk::Tensor c = random_tensor(3, 2, rng, false);
    std::vector<nk::Tensor> params{a, b, bt};
    auto loss = [&]() {
      nk::Tensor p1 = nk::matmul(a, b);
      nk::Tensor p2 = nk::matmul_nt(a, bt);
      return nk::sum_all(nk::mul(nk::add(p1, p2), c));
    };
    CHECK(nk::grad_check(params, loss, h) < tol);
  }

  SUBCASE("tanh and softmax") {
    nk::Tensor x = random_tensor(2, 6, rng);
    nk::Tensor c = random_tensor(2, 6, rng, false);
    std::vector<nk::Tensor> params{x};
    auto loss = [&]() {
      nk::Tensor t = nk::tanh_t(x);
      nk::Tensor sm = nk::softmax_rows(nk::scale(x, 1.5));
      return nk::sum_all(nk::mul(nk::add(t, sm), c));
    };
    CHECK(nk::grad_check(params, loss, h) < tol);
  }

  SUBCASE("slice and concat") {
    nk::Tensor x = random_tensor(2, 6, rng);
    nk::Tensor c = random_tensor(2, 6, rng, false);
    std::vector<nk::Tensor> params{x};
    auto loss = [&]() {
      nk::Tensor left = nk::slice_cols(x, 0, 2);
      nk::Tensor mid = nk::slice_cols(x, 2, 3);
      nk::Tensor right = nk::slice_cols(x, 5, 1);
      nk::Tensor glued = nk::concat_cols({nk::scale(left, 2.0), mid, right});
      return nk::sum_all(nk::mul(glued, c));
    };
    CHECK(nk::grad_check(params, loss, h) < tol);
  }

  SUBCASE("reductions and broadcasts") {
    nk::Tensor x = random_tensor(4, 3, rng);
    nk::Tensor row = random_tensor(1, 3, rng);
    nk::Tensor c = random_tensor(1, 3, rng, false);
    std::vector<nk::Tensor> params{x, row};
    auto loss = [&]() {
      nk::Tensor shifted = nk::add_row(x, row);
      nk::Tensor mr = nk::mean_rows(shifted);
      nk::Tensor pieces = nk::mul(mr, c);
      return nk::add(nk::mean_all(shifted), nk::sum_all(pieces));
    };
    CHECK(nk::grad_check(params, loss, h) < tol);
  }

  SUBCASE("divide") {
    nk::Tensor a = nk::Tensor::scalar(1.3, true);
    nk::Tensor b = nk::Tensor::scalar(-2.1, true);
    std::vector<nk::Tensor> params{a, b};
    auto loss = [&]() { return nk::divide(nk::mul(a, a), b); };
    CHECK(nk::grad_check(params, loss, h) < tol);
  }

  SUBCASE("embed_mean") {
    nk::Tensor table = random_tensor(5, 3, rng);
    nk::Tensor c = random_tensor(1, 3, rng, false);
    std::vector<int> idx{0, 2, 2, 4};
    std::vector<nk::Tensor> params{table};
    auto loss = [&]() { return nk::sum_all(nk::mul(nk::embed_mean(table, idx), c)); };
    CHECK(nk::grad_check(params, loss, h) < tol);
  }
}

TEST_CASE("gradient check exposes a deliberately wrong backward") {
  nk::Tensor x = nk::Tensor::from(1, 3, {0.4, -0.8, 1.2}, true);
  std::vector<nk::Tensor> params{x};
  auto bad_square = [](const nk::Tensor& in) {
    nk::Tensor out(in.rows(), in.cols(), true);
    for (std::size_t i = 0; i < in.size(); ++i) out.data()[i] = in.data()[i] * in.data()[i];
    out.node = std::make_shared<nk::Node>();
    out.node->parents = {in};
    nk::Tensor captured = in;
    out.node->backward = [captured](const nk::Tensor& o) mutable {
      // Claims d(x^2)/dx = 3x.
      for (std::size_t i = 0; i < o.size(); ++i) {
        captured.grad()[i] += o.grad()[i] * 3.0 * captured.data()[i];
      }
    };
    return out;
  };
  auto loss = [&]() { return nk::sum_all(bad_square(x)); };
  CHECK(nk::grad_check(params, loss, 1e-5) >= 1e-2);
}

TEST_CASE("tape frees after backward and grads accumulate across rounds") {
  nk::Tensor x = nk::Tensor::from(1, 2, {1.0, 2.0}, true);

  nk::Tensor loss1 = nk::sum_all(x);
  nk::backward(loss1);
  CHECK(x.grad()[0] == 1.0);
  CHECK_THROWS_AS(nk::backward(loss1), emorag::PreconditionError);

  nk::Tensor loss2 = nk::sum_all(x);
  nk::backward(loss2);
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 2.0);

  std::vector<nk::Tensor> params{x};
  nk::zero_grad(params);
  CHECK(x.grad()[0] == 0.0);

  // A freed intermediate cannot seed a new graph.
  nk::Tensor mid = nk::mul(x, x);
  nk::Tensor loss3 = nk::sum_all(mid);
  nk::backward(loss3);
  nk::Tensor loss4 = nk::sum_all(nk::mul(mid, mid));
  CHECK_THROWS_AS(nk::backward(loss4), emorag::PreconditionError);
}

TEST_CASE("no-grad scope records no tape") {
  nk::Tensor x = nk::Tensor::from(1, 2, {1.0, 2.0}, true);
  nk::Tensor y;
  {
    nk::NoGradGuard ng;
    y = nk::sum_all(x);
  }
  CHECK(!y.node);
  CHECK_THROWS_AS(nk::backward(y), emorag::PreconditionError);
}

TEST_CASE("non-finite results raise instead of propagating") {
  nk::Tensor big = nk::Tensor::scalar(1e200);
  CHECK_THROWS_AS(nk::scale(big, 1e200), emorag::NumericError);
  nk::Tensor zero = nk::Tensor::scalar(0.0);
  CHECK_THROWS_AS(nk::divide(big, zero), emorag::NumericError);
}

TEST_CASE("adam rejects non-finite grads without touching state") {
  nk::Tensor x = nk::Tensor::from(1, 2, {1.0, 2.0}, true);
  std::vector<nk::Tensor> params{x};
  nk::AdamState state = nk::AdamState::init(params);

  nk::Tensor l1 = nk::sum_all(nk::mul(x, x));
  nk::backward(l1);
  nk::adam_step(params, state, 0.01);
  const double x0 = x.data()[0];
  const double m0 = state.first_moment[0][0];

  x.grad()[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(nk::adam_step(params, state, 0.01), emorag::NumericError);
  CHECK(x.data()[0] == x0);
  CHECK(state.first_moment[0][0] == m0);
  CHECK(state.step_count == 1);
}

TEST_CASE("adam state must align with the param list") {
  nk::Tensor x = nk::Tensor::scalar(1.0, true);
  nk::Tensor y = nk::Tensor::scalar(2.0, true);
  std::vector<nk::Tensor> one{x};
  std::vector<nk::Tensor> two{x, y};
  nk::AdamState state = nk::AdamState::init(one);
  CHECK_THROWS_AS(nk::adam_step(two, state, 0.01), emorag::PreconditionError);
}

TEST_CASE("shape mismatches are rejected") {
  nk::Tensor a(2, 3);
  nk::Tensor b(3, 2);
  CHECK_THROWS_AS(nk::add(a, b), emorag::ShapeError);
  CHECK_THROWS_AS(nk::matmul(a, a), emorag::ShapeError);
  CHECK_THROWS_AS(nk::slice_cols(a, 2, 2), emorag::ShapeError);
  CHECK_THROWS_AS(nk::divide(a, b), emorag::ShapeError);
  CHECK_THROWS_AS(nk::Tensor(0, 3), emorag::ShapeError);
  CHECK_THROWS_AS(nk::Tensor::from(2, 2, {1.0}), emorag::ShapeError);
  CHECK_THROWS_AS(nk::embed_mean(a, {5}), emorag::ShapeError);
  CHECK_THROWS_AS(nk::embed_mean(a, {}), emorag::PreconditionError);
}
