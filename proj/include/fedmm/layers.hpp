#pragma once

#include <Eigen/Dense>
#include <atomic>
#include <cstdint>
#include <iostream>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "fedmm/errors.hpp"
#include "fedmm/params.hpp"
#include "fedmm/rng.hpp"
#include "fedmm/tensor.hpp"

namespace fedmm {

enum class NormMode {
  Train,   // batch statistics, running buffers updated
  Frozen,  // batch statistics, buffers untouched (cross-model forwards)
  Eval     // running statistics
};

enum class WhitenKind { Zca, Cholesky };

// ---------------------------------------------------------------------------
// whitening matrix

struct WhiteningFactors {
  Eigen::MatrixXd U;       // eigenvectors of the symmetrized covariance
  Eigen::VectorXd a;       // eigenvalues + eps
  Eigen::MatrixXd W;       // U diag(a^-1/2) U^T
  double min_eigengap = 0; // min |a_i - a_j| over i != j (inf-like for d == 1)
};

inline WhiteningFactors zca_factors(const Eigen::MatrixXd& cov, double eps) {
  Eigen::MatrixXd sym = 0.5 * (cov + cov.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  if (es.info() != Eigen::Success)
    throw EigenFailure("eigendecomposition did not converge (d=" + std::to_string(cov.rows()) +
                       ", |cov|_max=" + std::to_string(sym.cwiseAbs().maxCoeff()) + ")");
  WhiteningFactors f;
  f.U = es.eigenvectors();
  f.a = es.eigenvalues().array() + eps;
  double amin = f.a.minCoeff();
  if (amin <= 0.0)
    throw EigenFailure("covariance + eps*I is not positive definite (min eigenvalue " +
                       std::to_string(amin - eps) + ", eps " + std::to_string(eps) +
                       ", cond est " + std::to_string(f.a.maxCoeff() / std::max(amin, 1e-300)) +
                       ")");
  f.W = f.U * f.a.array().pow(-0.5).matrix().asDiagonal() * f.U.transpose();
  f.min_eigengap = std::numeric_limits<double>::infinity();
  for (int i = 0; i < f.a.size(); ++i)
    for (int j = i + 1; j < f.a.size(); ++j)
      f.min_eigengap = std::min(f.min_eigengap, std::abs(f.a[i] - f.a[j]));
  return f;
}

// ZCA whitening matrix W = U diag((lambda+eps)^-1/2) U^T; symmetric, and
// W (cov + eps I) W^T = I.
template <typename T>
Tensor<T> compute_whitening_matrix(const Tensor<T>& cov, T eps) {
  if (cov.rank() != 2 || cov.dim(0) != cov.dim(1))
    throw ShapeMismatch("compute_whitening_matrix: square matrix required, got " +
                        shape_str(cov.shape()));
  detail::check_finite(cov.data(), "compute_whitening_matrix");
  int64_t d = cov.dim(0);
  Eigen::MatrixXd c(d, d);
  for (int64_t i = 0; i < d; ++i)
    for (int64_t j = 0; j < d; ++j) c(i, j) = static_cast<double>(cov(i, j));
  WhiteningFactors f = zca_factors(c, static_cast<double>(eps));
  std::vector<T> out(static_cast<size_t>(d * d));
  for (int64_t i = 0; i < d; ++i)
    for (int64_t j = 0; j < d; ++j) out[static_cast<size_t>(i * d + j)] = static_cast<T>(f.W(i, j));
  return Tensor<T>(Shape{d, d}, std::move(out));
}

namespace detail {

inline std::atomic<uint64_t>& bw_stopgrad_counter() {
  static std::atomic<uint64_t> c{0};
  return c;
}

inline void note_bw_stopgrad(double gap) {
  if (bw_stopgrad_counter().fetch_add(1) == 0)
    std::cerr << "[fedmm] batch whitening: eigengap " << gap
              << " below guard, using stop-gradient through the whitening matrix\n";
}

}  // namespace detail

// Number of times the eigengap guard forced a stop-gradient whitening matrix.
inline uint64_t bw_stopgrad_count() { return detail::bw_stopgrad_counter().load(); }

// Differentiable map S -> (S_sym + eps I)^(-1/2). The backward uses the
// Daleckii-Krein form for symmetric matrix functions:
//   dW = U (F o (U^T dS U)) U^T,  F_ij = (f(a_i)-f(a_j))/(a_i-a_j), F_ii = f'(a_i)
// with f(a) = a^(-1/2). When the minimum eigengap falls below `gap_guard` the
// divided differences are ill-conditioned and the op degrades to
// stop-gradient through W (counted, see bw_stopgrad_count()).
template <typename T>
Tensor<T> zca_inv_sqrt(const Tensor<T>& s, T eps, T gap_guard = T(1e-6),
                       bool grad_through = true) {
  if (s.rank() != 2 || s.dim(0) != s.dim(1))
    throw ShapeMismatch("zca_inv_sqrt: square matrix required");
  int64_t d = s.dim(0);
  Eigen::MatrixXd sm(d, d);
  for (int64_t i = 0; i < d; ++i)
    for (int64_t j = 0; j < d; ++j) sm(i, j) = static_cast<double>(s(i, j));
  auto f = std::make_shared<WhiteningFactors>(zca_factors(sm, static_cast<double>(eps)));

  std::vector<T> out(static_cast<size_t>(d * d));
  for (int64_t i = 0; i < d; ++i)
    for (int64_t j = 0; j < d; ++j) out[static_cast<size_t>(i * d + j)] = static_cast<T>(f->W(i, j));

  bool stop_grad = !grad_through || (d > 1 && f->min_eigengap < static_cast<double>(gap_guard));
  return make_op<T>("zca_inv_sqrt", Shape{d, d}, std::move(out), {s},
                    [s, d, f, stop_grad](TensorNode<T>& nd) {
                      if (stop_grad) {
                        detail::note_bw_stopgrad(f->min_eigengap);
                        return;
                      }
                      Eigen::MatrixXd gbar(d, d);
                      for (int64_t i = 0; i < d; ++i)
                        for (int64_t j = 0; j < d; ++j)
                          gbar(i, j) = static_cast<double>(nd.grad[static_cast<size_t>(i * d + j)]);
                      const auto& a = f->a;
                      Eigen::MatrixXd inner = f->U.transpose() * gbar * f->U;
                      for (int64_t i = 0; i < d; ++i)
                        for (int64_t j = 0; j < d; ++j) {
                          double fij;
                          if (i == j) {
                            fij = -0.5 * std::pow(a[i], -1.5);
                          } else {
                            fij = (std::pow(a[i], -0.5) - std::pow(a[j], -0.5)) / (a[i] - a[j]);
                          }
                          inner(i, j) *= fij;
                        }
                      Eigen::MatrixXd sbar = f->U * inner * f->U.transpose();
                      std::vector<T> g(static_cast<size_t>(d * d));
                      for (int64_t i = 0; i < d; ++i)
                        for (int64_t j = 0; j < d; ++j)
                          g[static_cast<size_t>(i * d + j)] = static_cast<T>(sbar(i, j));
                      s.node()->accum_grad(g);
                    });
}

// Cholesky whitening (config variant): W = L^-1 with S_sym + eps I = L L^T.
// Not symmetric; always stop-gradient through W.
template <typename T>
Tensor<T> cholesky_whitener(const Tensor<T>& s, T eps) {
  int64_t d = s.dim(0);
  Eigen::MatrixXd sm(d, d);
  for (int64_t i = 0; i < d; ++i)
    for (int64_t j = 0; j < d; ++j) sm(i, j) = static_cast<double>(s(i, j));
  sm = 0.5 * (sm + sm.transpose());
  sm.diagonal().array() += static_cast<double>(eps);
  Eigen::LLT<Eigen::MatrixXd> llt(sm);
  if (llt.info() != Eigen::Success)
    throw EigenFailure("cholesky factorization failed (matrix not positive definite)");
  Eigen::MatrixXd w = llt.matrixL().solve(Eigen::MatrixXd::Identity(d, d));
  std::vector<T> out(static_cast<size_t>(d * d));
  for (int64_t i = 0; i < d; ++i)
    for (int64_t j = 0; j < d; ++j) out[static_cast<size_t>(i * d + j)] = static_cast<T>(w(i, j));
  return Tensor<T>(Shape{d, d}, std::move(out));
}

// ---------------------------------------------------------------------------
// layers

template <typename T>
struct DenseLayer {
  Tensor<T> weight;  // in x out
  Tensor<T> bias;    // out

  Tensor<T> forward(const Tensor<T>& x) const { return add(matmul(x, weight), bias); }
};

// 2-D convolution, same zero padding, cross-correlation convention.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernels, const Tensor<T>& bias,
                 int64_t stride = 1) {
  if (x.rank() != 4 || kernels.rank() != 4)
    throw ShapeMismatch("conv2d: input nchw and kernels ochw required");
  int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  int64_t oc = kernels.dim(0), kc = kernels.dim(1), kh = kernels.dim(2), kw = kernels.dim(3);
  if (kc != c)
    throw ShapeMismatch("conv2d: input channels " + std::to_string(c) + " vs kernel channels " +
                        std::to_string(kc));
  if (kh % 2 == 0 || kw % 2 == 0) throw InvalidSpec("conv2d: kernel sides must be odd");
  if (bias.numel() != oc) throw ShapeMismatch("conv2d: bias length must equal out channels");
  int64_t ph = kh / 2, pw = kw / 2;
  int64_t oh = (h + stride - 1) / stride, ow = (w + stride - 1) / stride;
  std::vector<T> out(static_cast<size_t>(n * oc * oh * ow), T(0));
  const auto& xv = x.data();
  const auto& kv = kernels.data();
  const auto& bv = bias.data();
  auto xat = [&](int64_t i, int64_t ch, int64_t y, int64_t z) -> T {
    if (y < 0 || y >= h || z < 0 || z >= w) return T(0);
    return xv[static_cast<size_t>(((i * c + ch) * h + y) * w + z)];
  };
  for (int64_t i = 0; i < n; ++i)
    for (int64_t o = 0; o < oc; ++o)
      for (int64_t y = 0; y < oh; ++y)
        for (int64_t z = 0; z < ow; ++z) {
          T acc = bv[static_cast<size_t>(o)];
          for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t u = 0; u < kh; ++u)
              for (int64_t v = 0; v < kw; ++v)
                acc += kv[static_cast<size_t>(((o * c + ch) * kh + u) * kw + v)] *
                       xat(i, ch, y * stride + u - ph, z * stride + v - pw);
          out[static_cast<size_t>(((i * oc + o) * oh + y) * ow + z)] = acc;
        }
  return make_op<T>(
      "conv2d", Shape{n, oc, oh, ow}, std::move(out), {x, kernels, bias},
      [x, kernels, bias, n, c, h, w, oc, kh, kw, ph, pw, oh, ow, stride](TensorNode<T>& nd) {
        const auto& xv = x.data();
        const auto& kv = kernels.data();
        std::vector<T> gx(xv.size(), T(0));
        std::vector<T> gk(kv.size(), T(0));
        std::vector<T> gb(static_cast<size_t>(oc), T(0));
        for (int64_t i = 0; i < n; ++i)
          for (int64_t o = 0; o < oc; ++o)
            for (int64_t y = 0; y < oh; ++y)
              for (int64_t z = 0; z < ow; ++z) {
                T g = nd.grad[static_cast<size_t>(((i * oc + o) * oh + y) * ow + z)];
                if (g == T(0)) continue;
                gb[static_cast<size_t>(o)] += g;
                for (int64_t ch = 0; ch < c; ++ch)
                  for (int64_t u = 0; u < kh; ++u)
                    for (int64_t v = 0; v < kw; ++v) {
                      int64_t yy = y * stride + u - ph, zz = z * stride + v - pw;
                      if (yy < 0 || yy >= h || zz < 0 || zz >= w) continue;
                      size_t xi = static_cast<size_t>(((i * c + ch) * h + yy) * w + zz);
                      size_t ki = static_cast<size_t>(((o * c + ch) * kh + u) * kw + v);
                      gk[ki] += g * xv[xi];
                      gx[xi] += g * kv[ki];
                    }
              }
        if (x.tracked()) x.node()->accum_grad(gx);
        if (kernels.tracked()) kernels.node()->accum_grad(gk);
        if (bias.tracked()) bias.node()->accum_grad(gb);
      });
}

template <typename T>
struct Conv2dLayer {
  Tensor<T> kernels;  // out_ch x in_ch x kh x kw
  Tensor<T> bias;     // out_ch
  int64_t stride = 1;

  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, kernels, bias, stride); }
};

// 2x2 average pooling, stride 2; spatial dims must be even
template <typename T>
Tensor<T> avgpool2x2(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeMismatch("avgpool2x2: nchw input required");
  int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) throw ShapeMismatch("avgpool2x2: spatial dims must be even");
  int64_t oh = h / 2, ow = w / 2;
  std::vector<T> out(static_cast<size_t>(n * c * oh * ow));
  const auto& xv = x.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t y = 0; y < oh; ++y)
        for (int64_t z = 0; z < ow; ++z) {
          T s = 0;
          for (int64_t u = 0; u < 2; ++u)
            for (int64_t v = 0; v < 2; ++v)
              s += xv[static_cast<size_t>(((i * c + ch) * h + 2 * y + u) * w + 2 * z + v)];
          out[static_cast<size_t>(((i * c + ch) * oh + y) * ow + z)] = s / T(4);
        }
  return make_op<T>("avgpool2x2", Shape{n, c, oh, ow}, std::move(out), {x},
                    [x, n, c, h, w, oh, ow](TensorNode<T>& nd) {
                      std::vector<T> g(x.data().size());
                      for (int64_t i = 0; i < n; ++i)
                        for (int64_t ch = 0; ch < c; ++ch)
                          for (int64_t y = 0; y < oh; ++y)
                            for (int64_t z = 0; z < ow; ++z) {
                              T q = nd.grad[static_cast<size_t>(((i * c + ch) * oh + y) * ow + z)] /
                                    T(4);
                              for (int64_t u = 0; u < 2; ++u)
                                for (int64_t v = 0; v < 2; ++v)
                                  g[static_cast<size_t>(((i * c + ch) * h + 2 * y + u) * w + 2 * z +
                                                        v)] = q;
                            }
                      x.node()->accum_grad(g);
                    });
}

// ---------------------------------------------------------------------------
// batch whitening (the BW layer): x_hat = W_B (x - mu_B), out = gamma*x_hat + beta

template <typename T>
struct BatchWhiteningLayer {
  int64_t dim = 0;
  Tensor<T> gamma, beta;                // trainable
  Tensor<T> running_mean, running_cov;  // buffers
  T eps = T(1e-5);
  T momentum = T(0.1);
  WhitenKind kind = WhitenKind::Zca;
  bool grad_through_whitening = true;
  T eigengap_guard = T(1e-6);

  Tensor<T> forward(const Tensor<T>& x, NormMode mode) {
    if (x.rank() != 2 || x.dim(1) != dim)
      throw DimMismatch("batch whitening expects (n," + std::to_string(dim) + "), got " +
                        shape_str(x.shape()));
    int64_t n = x.dim(0);
    if (mode != NormMode::Eval && n < 2)
      throw BatchTooSmall("batch whitening needs n >= 2 in train mode, got n=" +
                          std::to_string(n));

    Tensor<T> xc, w;
    if (mode == NormMode::Eval) {
      xc = subtract(x, running_mean.detach());
      w = kind == WhitenKind::Zca
              ? zca_inv_sqrt(running_cov.detach(), eps, eigengap_guard, false)
              : cholesky_whitener(running_cov.detach(), eps);
    } else {
      Tensor<T> mu = mean(x, 0);
      xc = subtract(x, mu);
      // biased covariance (1/n), matching the whitening of the same batch
      Tensor<T> s = scale(matmul(transpose(xc), xc), T(1) / static_cast<T>(n));
      w = kind == WhitenKind::Zca
              ? zca_inv_sqrt(s, eps, eigengap_guard, grad_through_whitening)
              : cholesky_whitener(s.detach(), eps);
      if (mode == NormMode::Train) update_running(mu, s);
    }
    Tensor<T> xhat = matmul(xc, kind == WhitenKind::Zca ? w : transpose(w));
    return add(multiply(xhat, gamma), beta);
  }

 private:
  void update_running(const Tensor<T>& mu, const Tensor<T>& s) {
    auto& rm = running_mean.mutable_data();
    for (size_t i = 0; i < rm.size(); ++i)
      rm[i] = (T(1) - momentum) * rm[i] + momentum * mu.data()[i];
    auto& rc = running_cov.mutable_data();
    const auto& sv = s.data();
    for (size_t i = 0; i < rc.size(); ++i)
      rc[i] = (T(1) - momentum) * rc[i] + momentum * sv[i];
    // re-symmetrize
    for (int64_t i = 0; i < dim; ++i)
      for (int64_t j = i + 1; j < dim; ++j) {
        T m = (rc[static_cast<size_t>(i * dim + j)] + rc[static_cast<size_t>(j * dim + i)]) / T(2);
        rc[static_cast<size_t>(i * dim + j)] = m;
        rc[static_cast<size_t>(j * dim + i)] = m;
      }
  }
};

// Plain batch norm; the baseline normalizer when the FW module is toggled off.
template <typename T>
struct BatchNormLayer {
  int64_t dim = 0;
  Tensor<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  T eps = T(1e-5);
  T momentum = T(0.1);

  Tensor<T> forward(const Tensor<T>& x, NormMode mode) {
    if (x.rank() != 2 || x.dim(1) != dim)
      throw DimMismatch("batch norm expects (n," + std::to_string(dim) + "), got " +
                        shape_str(x.shape()));
    int64_t n = x.dim(0);
    if (mode != NormMode::Eval && n < 2)
      throw BatchTooSmall("batch norm needs n >= 2 in train mode");

    Tensor<T> xc, var;
    if (mode == NormMode::Eval) {
      xc = subtract(x, running_mean.detach());
      var = running_var.detach();
    } else {
      Tensor<T> mu = mean(x, 0);
      xc = subtract(x, mu);
      var = mean(multiply(xc, xc), 0);
      if (mode == NormMode::Train) {
        auto& rm = running_mean.mutable_data();
        for (size_t i = 0; i < rm.size(); ++i)
          rm[i] = (T(1) - momentum) * rm[i] + momentum * mu.data()[i];
        auto& rv = running_var.mutable_data();
        for (size_t i = 0; i < rv.size(); ++i)
          rv[i] = (T(1) - momentum) * rv[i] + momentum * var.data()[i];
      }
    }
    // (var+eps)^(-1/2) via exp(-0.5 log(var+eps))
    Tensor<T> inv = exp(scale(log(add(var, Tensor<T>::scalar(eps))), T(-0.5)));
    Tensor<T> xn = multiply(xc, inv);
    return add(multiply(xn, gamma), beta);
  }
};

// ---------------------------------------------------------------------------
// initialization

enum class Activation { None, Relu };

struct DenseSpec {
  std::string name;
  int64_t in = 0, out = 0;
  Activation act = Activation::None;
};
struct ConvSpec {
  std::string name;
  int64_t in_ch = 0, out_ch = 0, kh = 3, kw = 3;
  Activation act = Activation::Relu;
};
struct NormSpec {
  std::string name;
  int64_t dim = 0;
  bool whitening = true;  // false -> batch norm buffers
};
using LayerSpec = std::variant<DenseSpec, ConvSpec, NormSpec>;

// He-uniform for relu fan-in, Xavier-uniform otherwise; gamma 1, beta 0,
// running mean 0, running cov/var identity/ones. Deterministic given seed.
template <typename T>
ParameterSet<T> init_params(const std::vector<LayerSpec>& specs, uint64_t seed) {
  ParameterSet<T> out;
  Rng rng(mix_seed(seed, 0x1417));
  auto draw = [&](int64_t count, double bound) {
    std::vector<T> v(static_cast<size_t>(count));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return v;
  };
  for (const auto& spec : specs) {
    if (const auto* d = std::get_if<DenseSpec>(&spec)) {
      if (d->in <= 0 || d->out <= 0) throw InvalidSpec("dense dims must be positive: " + d->name);
      double bound = d->act == Activation::Relu ? std::sqrt(6.0 / static_cast<double>(d->in))
                                                : std::sqrt(6.0 / static_cast<double>(d->in + d->out));
      out.add(d->name + ".weight", Tensor<T>(Shape{d->in, d->out}, draw(d->in * d->out, bound), true));
      out.add(d->name + ".bias", Tensor<T>(Shape{d->out}, std::vector<T>(static_cast<size_t>(d->out), T(0)), true));
    } else if (const auto* c = std::get_if<ConvSpec>(&spec)) {
      if (c->in_ch <= 0 || c->out_ch <= 0 || c->kh <= 0 || c->kw <= 0 || c->kh % 2 == 0 ||
          c->kw % 2 == 0)
        throw InvalidSpec("conv spec invalid: " + c->name);
      int64_t fan_in = c->in_ch * c->kh * c->kw;
      double bound = c->act == Activation::Relu
                         ? std::sqrt(6.0 / static_cast<double>(fan_in))
                         : std::sqrt(6.0 / static_cast<double>(fan_in + c->out_ch * c->kh * c->kw));
      out.add(c->name + ".kernels",
              Tensor<T>(Shape{c->out_ch, c->in_ch, c->kh, c->kw},
                        draw(c->out_ch * fan_in, bound), true));
      out.add(c->name + ".bias",
              Tensor<T>(Shape{c->out_ch}, std::vector<T>(static_cast<size_t>(c->out_ch), T(0)), true));
    } else {
      const auto& nrm = std::get<NormSpec>(spec);
      if (nrm.dim <= 0) throw InvalidSpec("norm dim must be positive: " + nrm.name);
      out.add(nrm.name + ".gamma", Tensor<T>::ones(Shape{nrm.dim}), true);
      out.add(nrm.name + ".beta", Tensor<T>::zeros(Shape{nrm.dim}), true);
      out.add(nrm.name + ".running_mean", Tensor<T>::zeros(Shape{nrm.dim}), false);
      if (nrm.whitening) {
        std::vector<T> eye(static_cast<size_t>(nrm.dim * nrm.dim), T(0));
        for (int64_t i = 0; i < nrm.dim; ++i) eye[static_cast<size_t>(i * nrm.dim + i)] = T(1);
        out.add(nrm.name + ".running_cov", Tensor<T>(Shape{nrm.dim, nrm.dim}, std::move(eye)), false);
      } else {
        out.add(nrm.name + ".running_var", Tensor<T>::ones(Shape{nrm.dim}), false);
      }
    }
  }
  // fresh leaves so callers can mark trainables as roots
  for (auto& e : out.entries())
    if (e.trainable) e.tensor = Tensor<T>(e.tensor.shape(), e.tensor.data(), true);
  return out;
}

// ---------------------------------------------------------------------------
// Adam

template <typename T>
struct AdamConfig {
  T lr = T(1e-3);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
};

template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig<T> cfg = {}) : cfg_(cfg) {}

  int64_t step_count() const { return step_; }

  // Standard bias-corrected update over trainable entries; buffers pass
  // through by reference so layer-side updates keep flowing into the set.
  ParameterSet<T> step(const ParameterSet<T>& params, const GradMap<T>& grads) {
    ++step_;
    T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(step_)));
    T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(step_)));
    ParameterSet<T> out;
    for (const auto& e : params.entries()) {
      if (!e.trainable) {
        out.add(e.name, e.tensor, false);
        continue;
      }
      auto git = grads.find(e.name);
      if (git == grads.end()) throw MissingGradient("no gradient for parameter " + e.name);
      const auto& g = git->second;
      if (g.size() != e.tensor.data().size())
        throw ShapeMismatch("gradient size mismatch for " + e.name);
      auto& mom = moments_[e.name];
      if (mom.m.empty()) {
        mom.m.assign(g.size(), T(0));
        mom.v.assign(g.size(), T(0));
      }
      std::vector<T> p = e.tensor.data();
      for (size_t i = 0; i < g.size(); ++i) {
        mom.m[i] = cfg_.beta1 * mom.m[i] + (T(1) - cfg_.beta1) * g[i];
        mom.v[i] = cfg_.beta2 * mom.v[i] + (T(1) - cfg_.beta2) * g[i] * g[i];
        T mhat = mom.m[i] / bc1;
        T vhat = mom.v[i] / bc2;
        p[i] -= cfg_.lr * mhat / (static_cast<T>(std::sqrt(static_cast<double>(vhat))) + cfg_.eps);
      }
      out.add(e.name, Tensor<T>(e.tensor.shape(), std::move(p), true), true);
    }
    return out;
  }

 private:
  struct Moments {
    std::vector<T> m, v;
  };
  AdamConfig<T> cfg_;
  int64_t step_ = 0;
  std::unordered_map<std::string, Moments> moments_;
};

}  // namespace fedmm
