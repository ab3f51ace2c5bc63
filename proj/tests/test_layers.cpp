#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fedmm/layers.hpp"
#include "fedmm/rng.hpp"
#include "support/gradcheck_harness.hpp"

using namespace fedmm;
using fedmm::testing::check_grads;
using fedmm::testing::random_tensor;

namespace {

// independent covariance oracle: explicit (1/n) sum of centered outer products
std::vector<double> sample_cov(const Tensor<double>& x) {
  int64_t n = x.dim(0), d = x.dim(1);
  std::vector<double> mu(static_cast<size_t>(d), 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) mu[static_cast<size_t>(j)] += x(i, j) / n;
  std::vector<double> cov(static_cast<size_t>(d * d), 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j)
      for (int64_t k = 0; k < d; ++k)
        cov[static_cast<size_t>(j * d + k)] +=
            (x(i, j) - mu[static_cast<size_t>(j)]) * (x(i, k) - mu[static_cast<size_t>(k)]) / n;
  return cov;
}

Tensor<double> random_spd(Rng& rng, int64_t d) {
  Tensor<double> m = random_tensor(rng, {d, d});
  std::vector<double> spd(static_cast<size_t>(d * d), 0.0);
  for (int64_t i = 0; i < d; ++i)
    for (int64_t j = 0; j < d; ++j) {
      double s = i == j ? 0.5 : 0.0;  // shift to keep it well conditioned
      for (int64_t k = 0; k < d; ++k) s += m(i, k) * m(j, k);
      spd[static_cast<size_t>(i * d + j)] = s;
    }
  return Tensor<double>(Shape{d, d}, std::move(spd));
}

BatchWhiteningLayer<double> make_bw(int64_t d, const Tensor<double>& gamma,
                                    const Tensor<double>& beta, double eps = 1e-5) {
  BatchWhiteningLayer<double> bw;
  bw.dim = d;
  bw.gamma = gamma;
  bw.beta = beta;
  bw.running_mean = Tensor<double>::zeros(Shape{d});
  std::vector<double> eye(static_cast<size_t>(d * d), 0.0);
  for (int64_t i = 0; i < d; ++i) eye[static_cast<size_t>(i * d + i)] = 1.0;
  bw.running_cov = Tensor<double>(Shape{d, d}, std::move(eye));
  bw.eps = eps;
  return bw;
}

}  // namespace

TEST_CASE("whitening matrix of the identity is the identity") {
  Tensor<double> cov(Shape{2, 2}, {1, 0, 0, 1});
  Tensor<double> w = compute_whitening_matrix(cov, 1e-12);
  CHECK(w(0, 0) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(w(0, 1) == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(w(1, 1) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("whitening matrix of diag(4,1) is diag(0.5,1)") {
  Tensor<double> cov(Shape{2, 2}, {4, 0, 0, 1});
  Tensor<double> w = compute_whitening_matrix(cov, 0.0);
  CHECK(w(0, 0) == doctest::Approx(0.5).epsilon(1e-10));
  CHECK(w(1, 1) == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(w(0, 1) == doctest::Approx(0.0).epsilon(1e-10));
}

TEST_CASE("whitening matrix defining property and symmetry on random SPD") {
  Rng rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    int64_t d = 2 + static_cast<int64_t>(rng.below(5));
    Tensor<double> cov = random_spd(rng, d);
    double eps = 1e-5;
    Tensor<double> w = compute_whitening_matrix(cov, eps);
    // symmetry
    for (int64_t i = 0; i < d; ++i)
      for (int64_t j = 0; j < d; ++j) CHECK(std::fabs(w(i, j) - w(j, i)) < 1e-10);
    // W (cov + eps I) W^T == I, by direct multiplication
    for (int64_t i = 0; i < d; ++i)
      for (int64_t j = 0; j < d; ++j) {
        double acc = 0;
        for (int64_t p = 0; p < d; ++p)
          for (int64_t q = 0; q < d; ++q) {
            double cpq = cov(p, q) + (p == q ? eps : 0.0);
            acc += w(i, p) * cpq * w(j, q);
          }
        CHECK(std::fabs(acc - (i == j ? 1.0 : 0.0)) < 1e-5);
      }
  }
}

TEST_CASE("batch whitening leaves an already-white batch nearly unchanged") {
  // zero mean, identity covariance by construction: orthogonal design
  Tensor<double> x(Shape{4, 2}, {1, 1, 1, -1, -1, 1, -1, -1});
  auto bw = make_bw(2, Tensor<double>::ones(Shape{2}), Tensor<double>::zeros(Shape{2}));
  Tensor<double> y = bw.forward(x, NormMode::Frozen);
  for (size_t i = 0; i < y.data().size(); ++i)
    CHECK(std::fabs(y.data()[i] - x.data()[i]) < 1e-3);
}

TEST_CASE("batch whitening with gamma 0 outputs beta everywhere") {
  Rng rng(3);
  Tensor<double> x = random_tensor(rng, {5, 3});
  auto bw = make_bw(3, Tensor<double>::zeros(Shape{3}),
                    Tensor<double>(Shape{3}, {0.7, -0.2, 1.5}));
  Tensor<double> y = bw.forward(x, NormMode::Frozen);
  for (int64_t i = 0; i < 5; ++i) {
    CHECK(y(i, 0) == doctest::Approx(0.7));
    CHECK(y(i, 1) == doctest::Approx(-0.2));
    CHECK(y(i, 2) == doctest::Approx(1.5));
  }
}

TEST_CASE("batch whitening output covariance is the identity") {
  Rng rng(99);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor<double> x = random_tensor(rng, {8, 3}, -2.0, 2.0);
    auto bw = make_bw(3, Tensor<double>::ones(Shape{3}), Tensor<double>::zeros(Shape{3}));
    Tensor<double> y = bw.forward(x, NormMode::Frozen);
    auto cov = sample_cov(y);
    for (int64_t i = 0; i < 3; ++i)
      for (int64_t j = 0; j < 3; ++j)
        CHECK(std::fabs(cov[static_cast<size_t>(i * 3 + j)] - (i == j ? 1.0 : 0.0)) < 1e-3);
  }
}

TEST_CASE("batch whitening train mode updates running stats by EMA") {
  Rng rng(17);
  Tensor<double> x = random_tensor(rng, {6, 2}, 0.5, 1.5);
  auto bw = make_bw(2, Tensor<double>::ones(Shape{2}), Tensor<double>::zeros(Shape{2}));
  bw.momentum = 0.1;

  std::vector<double> mu(2, 0.0);
  for (int64_t i = 0; i < 6; ++i)
    for (int64_t j = 0; j < 2; ++j) mu[static_cast<size_t>(j)] += x(i, j) / 6.0;

  double prev_err = std::fabs(bw.running_mean.data()[0] - mu[0]);
  for (int step = 0; step < 5; ++step) {
    bw.forward(x, NormMode::Train);
    double err = std::fabs(bw.running_mean.data()[0] - mu[0]);
    // geometric convergence with ratio (1 - momentum)
    CHECK(err == doctest::Approx(prev_err * 0.9).epsilon(1e-9));
    prev_err = err;
  }

  // frozen mode must not touch the buffers
  auto snapshot = bw.running_mean.data();
  bw.forward(x, NormMode::Frozen);
  CHECK(bw.running_mean.data() == snapshot);
}

TEST_CASE("batch whitening gradient matches finite differences through the eigendecomposition") {
  Rng rng(2024);
  int done = 0;
  while (done < 20) {
    Tensor<double> x = random_tensor(rng, {8, 3}, -1.5, 1.5);
    // only well-conditioned instances: eigengap of the batch covariance
    Eigen::MatrixXd cm(3, 3);
    auto cov = sample_cov(x);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) cm(i, j) = cov[static_cast<size_t>(i * 3 + j)];
    auto f = zca_factors(cm, 1e-5);
    if (f.min_eigengap < 1e-3) continue;
    ++done;

    Tensor<double> gamma = random_tensor(rng, {3}, 0.5, 1.5);
    Tensor<double> beta = random_tensor(rng, {3}, -0.5, 0.5);
    Tensor<double> w = random_tensor(rng, {8, 3});
    check_grads(
        [&](const std::vector<Tensor<double>>& t) {
          auto bw = make_bw(3, t[1], t[2]);
          return sum(multiply(bw.forward(t[0], NormMode::Frozen), w));
        },
        {x, gamma, beta}, 1e-4, 1e-6);
  }
}

TEST_CASE("eigengap guard falls back to stop gradient without NaNs") {
  // perfectly degenerate batch covariance (spherical)
  Tensor<double> x(Shape{4, 2}, {1, 0, -1, 0, 0, 1, 0, -1}, true);
  auto bw = make_bw(2, Tensor<double>::ones(Shape{2}), Tensor<double>::zeros(Shape{2}));
  uint64_t before = bw_stopgrad_count();
  Tensor<double> y = bw.forward(x, NormMode::Frozen);
  backward(sum(multiply(y, y)));
  CHECK(bw_stopgrad_count() > before);
  for (double g : x.grad()) CHECK(std::isfinite(g));
}

TEST_CASE("conv2d with a 1x1 identity kernel is the identity") {
  Rng rng(5);
  Tensor<double> x = random_tensor(rng, {2, 1, 4, 4});
  Tensor<double> k(Shape{1, 1, 1, 1}, {1.0});
  Tensor<double> b(Shape{1}, {0.0});
  Tensor<double> y = conv2d(x, k, b);
  CHECK(y.data() == x.data());
}

TEST_CASE("conv2d with zero kernels outputs the bias") {
  Rng rng(6);
  Tensor<double> x = random_tensor(rng, {1, 2, 4, 4});
  Tensor<double> k = Tensor<double>::zeros(Shape{3, 2, 3, 3});
  Tensor<double> b(Shape{3}, {0.5, -1.0, 2.0});
  Tensor<double> y = conv2d(x, k, b);
  for (int64_t o = 0; o < 3; ++o)
    for (int64_t i = 0; i < 16; ++i)
      CHECK(y.data()[static_cast<size_t>(o * 16 + i)] == doctest::Approx(b.data()[static_cast<size_t>(o)]));
}

TEST_CASE("conv2d matches the nested-loop oracle") {
  Rng rng(7);
  Tensor<double> x = random_tensor(rng, {2, 2, 4, 4});
  Tensor<double> k = random_tensor(rng, {3, 2, 3, 3});
  Tensor<double> b = random_tensor(rng, {3});
  Tensor<double> y = conv2d(x, k, b);
  // independent brute-force cross-correlation with zero padding
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t o = 0; o < 3; ++o)
      for (int64_t yy = 0; yy < 4; ++yy)
        for (int64_t zz = 0; zz < 4; ++zz) {
          double acc = b.data()[static_cast<size_t>(o)];
          for (int64_t c = 0; c < 2; ++c)
            for (int64_t u = -1; u <= 1; ++u)
              for (int64_t v = -1; v <= 1; ++v) {
                int64_t sy = yy + u, sz = zz + v;
                if (sy < 0 || sy > 3 || sz < 0 || sz > 3) continue;
                acc += x.data()[static_cast<size_t>(((n * 2 + c) * 4 + sy) * 4 + sz)] *
                       k.data()[static_cast<size_t>(((o * 2 + c) * 3 + (u + 1)) * 3 + (v + 1))];
              }
          CHECK(y.data()[static_cast<size_t>(((n * 3 + o) * 4 + yy) * 4 + zz)] ==
                doctest::Approx(acc).epsilon(1e-12));
        }
}

TEST_CASE("conv2d and avgpool gradients match finite differences") {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<double> x = random_tensor(rng, {1, 2, 4, 4});
    Tensor<double> k = random_tensor(rng, {2, 2, 3, 3});
    Tensor<double> b = random_tensor(rng, {2});
    Tensor<double> w = random_tensor(rng, {1, 2, 4, 4});
    Tensor<double> wp = random_tensor(rng, {1, 2, 2, 2});
    check_grads(
        [&](const std::vector<Tensor<double>>& t) {
          return sum(multiply(conv2d(t[0], t[1], t[2]), w));
        },
        {x, k, b});
    check_grads(
        [&](const std::vector<Tensor<double>>& t) {
          return sum(multiply(avgpool2x2(t[0]), wp));
        },
        {x});
  }
}

TEST_CASE("dense layer gradient matches finite differences") {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<double> x = random_tensor(rng, {4, 3});
    Tensor<double> wgt = random_tensor(rng, {3, 2});
    Tensor<double> b = random_tensor(rng, {2});
    Tensor<double> w = random_tensor(rng, {4, 2});
    check_grads(
        [&](const std::vector<Tensor<double>>& t) {
          DenseLayer<double> d{t[1], t[2]};
          return sum(multiply(d.forward(t[0]), w));
        },
        {x, wgt, b});
  }
}

TEST_CASE("batch norm gradient matches finite differences") {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<double> x = random_tensor(rng, {6, 3});
    Tensor<double> gamma = random_tensor(rng, {3}, 0.5, 1.5);
    Tensor<double> beta = random_tensor(rng, {3});
    Tensor<double> w = random_tensor(rng, {6, 3});
    check_grads(
        [&](const std::vector<Tensor<double>>& t) {
          BatchNormLayer<double> bn{3, t[1], t[2], Tensor<double>::zeros(Shape{3}),
                                    Tensor<double>::ones(Shape{3}), 1e-5, 0.1};
          return sum(multiply(bn.forward(t[0], NormMode::Frozen), w));
        },
        {x, gamma, beta});
  }
}

TEST_CASE("init_params is deterministic and respects He bounds") {
  std::vector<LayerSpec> specs{DenseSpec{"fc", 4, 3, Activation::Relu},
                               NormSpec{"nrm", 3, true}};
  auto p1 = init_params<float>(specs, 7);
  auto p2 = init_params<float>(specs, 7);
  CHECK(p1.bitwise_equal(p2));
  auto p3 = init_params<float>(specs, 8);
  CHECK(!p3.bitwise_equal(p1));

  double bound = std::sqrt(6.0 / 4.0);
  for (float v : p1.at("fc.weight").data()) {
    CHECK(v <= bound);
    CHECK(v >= -bound);
  }
  for (float v : p1.at("fc.bias").data()) CHECK(v == 0.0f);
  for (float v : p1.at("nrm.gamma").data()) CHECK(v == 1.0f);
  for (float v : p1.at("nrm.beta").data()) CHECK(v == 0.0f);
  // running cov starts at the identity
  CHECK(p1.at("nrm.running_cov")(0, 0) == 1.0f);
  CHECK(p1.at("nrm.running_cov")(0, 1) == 0.0f);
}

TEST_CASE("adam with zero gradients leaves parameters unchanged") {
  ParameterSet<float> params;
  params.add("p", Tensor<float>(Shape{3}, {1.0f, -2.0f, 0.5f}, true));
  GradMap<float> grads{{"p", {0.0f, 0.0f, 0.0f}}};
  Adam<float> opt;
  auto updated = opt.step(params, grads);
  CHECK(updated.at("p").data() == params.at("p").data());
}

TEST_CASE("adam first step moves a scalar by about lr") {
  ParameterSet<double> params;
  params.add("p", Tensor<double>(Shape{1}, {1.0}, true));
  GradMap<double> grads{{"p", {1.0}}};
  AdamConfig<double> cfg;  // lr 1e-3, beta1 0.9
  Adam<double> opt(cfg);
  auto updated = opt.step(params, grads);
  // bias-corrected first step: mhat = 1, vhat = 1 -> delta = lr/(1+eps)
  CHECK(updated.at("p").data()[0] ==
        doctest::Approx(1.0 - 1e-3 / (1.0 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("adam throws on a missing gradient") {
  ParameterSet<float> params;
  params.add("p", Tensor<float>(Shape{1}, {1.0f}, true));
  Adam<float> opt;
  CHECK_THROWS_AS(opt.step(params, GradMap<float>{}), MissingGradient);
}

TEST_CASE("batch whitening rejects undersized batches and wrong dims") {
  auto bw = make_bw(3, Tensor<double>::ones(Shape{3}), Tensor<double>::zeros(Shape{3}));
  Tensor<double> one_row(Shape{1, 3}, {1, 2, 3});
  CHECK_THROWS_AS(bw.forward(one_row, NormMode::Train), BatchTooSmall);
  Tensor<double> wrong(Shape{4, 2}, std::vector<double>(8, 0.0));
  CHECK_THROWS_AS(bw.forward(wrong, NormMode::Train), DimMismatch);
}

TEST_CASE("cholesky whitener also satisfies the defining property") {
  Rng rng(33);
  Tensor<double> cov = random_spd(rng, 4);
  Tensor<double> w = cholesky_whitener(cov, 1e-5);
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 4; ++j) {
      double acc = 0;
      for (int64_t p = 0; p < 4; ++p)
        for (int64_t q = 0; q < 4; ++q)
          acc += w(i, p) * (cov(p, q) + (p == q ? 1e-5 : 0.0)) * w(j, q);
      CHECK(std::fabs(acc - (i == j ? 1.0 : 0.0)) < 1e-5);
    }
}
