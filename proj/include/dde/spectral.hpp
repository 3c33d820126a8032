#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "dde/tensor.hpp"

namespace dde {

struct SpectrumReport {
  std::size_t layer = 0;
  std::vector<double> values;  // descending
  double max() const { return values.empty() ? 0.0 : values.front(); }
};

namespace detail {

using cd = std::complex<double>;
using CMat = Eigen::MatrixXcd;

inline std::vector<double> matrix_singular_values(const Eigen::MatrixXd& m) {
  if (m.size() == 0) return {};
  // BDCSVD in Eigen 3.4 mis-deflates repeated singular values of rectangular inputs
  Eigen::VectorXd s = Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues();
  return {s.data(), s.data() + s.size()};
}

struct KernelDims {
  std::size_t O, C, k;
};

inline KernelDims kernel_dims(const Tensor& kernel, std::size_t H, std::size_t W) {
  if (kernel.rank() != 4 || kernel.dim(2) != kernel.dim(3))
    throw DimensionError("conv spectrum: kernel must be [C_out,C_in,k,k], got " + shape_str(kernel.shape()));
  std::size_t k = kernel.dim(2);
  if (H < k || W < k)
    throw ContractError("conv spectrum: spatial size " + std::to_string(H) + "x" + std::to_string(W) +
                        " smaller than kernel " + std::to_string(k));
  return {kernel.dim(0), kernel.dim(1), k};
}

// twiddle[u * k + y] = exp(-2*pi*i*u*y/n)
inline std::vector<cd> twiddles(std::size_t n, std::size_t k) {
  std::vector<cd> t(n * k);
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t y = 0; y < k; ++y) {
      double a = -2.0 * std::numbers::pi * static_cast<double>((u * y) % n) / static_cast<double>(n);
      t[u * k + y] = cd(std::cos(a), std::sin(a));
    }
  return t;
}

// Per-frequency transfer matrices of the circular convolution operator, frequency-major.
inline std::vector<CMat> transfer_matrices(const Tensor& kernel, std::size_t H, std::size_t W) {
  auto [O, C, k] = kernel_dims(kernel, H, W);
  auto ty = twiddles(H, k), tx = twiddles(W, k);
  std::vector<CMat> out(H * W, CMat::Zero(static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(C)));
  std::vector<cd> row(W * k);
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t c = 0; c < C; ++c) {
      const double* w = kernel.raw() + (o * C + c) * k * k;
      // transform along x for every kernel row
      for (std::size_t y = 0; y < k; ++y)
        for (std::size_t v = 0; v < W; ++v) {
          cd acc = 0;
          for (std::size_t x = 0; x < k; ++x) acc += w[y * k + x] * tx[v * k + x];
          row[v * k + y] = acc;
        }
      for (std::size_t u = 0; u < H; ++u)
        for (std::size_t v = 0; v < W; ++v) {
          cd acc = 0;
          for (std::size_t y = 0; y < k; ++y) acc += row[v * k + y] * ty[u * k + y];
          out[u * W + v](static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(c)) = acc;
        }
    }
  return out;
}

// Inverse transform restricted to the k x k kernel support (real part).
inline Tensor kernel_from_transfer(const std::vector<CMat>& mats, std::size_t O, std::size_t C, std::size_t k,
                                   std::size_t H, std::size_t W) {
  auto ty = twiddles(H, k), tx = twiddles(W, k);
  Tensor out({O, C, k, k});
  const double norm = 1.0 / static_cast<double>(H * W);
  std::vector<cd> col(H * k);
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t u = 0; u < H; ++u)
        for (std::size_t x = 0; x < k; ++x) {
          cd acc = 0;
          for (std::size_t v = 0; v < W; ++v)
            acc += mats[u * W + v](static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(c)) * std::conj(tx[v * k + x]);
          col[u * k + x] = acc;
        }
      for (std::size_t y = 0; y < k; ++y)
        for (std::size_t x = 0; x < k; ++x) {
          cd acc = 0;
          for (std::size_t u = 0; u < H; ++u) acc += col[u * k + x] * std::conj(ty[u * k + y]);
          out[((o * C + c) * k + y) * k + x] = norm * acc.real();
        }
    }
  return out;
}

}  // namespace detail

// Singular values of the circular-boundary convolution operator on an H x W grid:
// H*W*min(C_in, C_out) values, descending.
inline SpectrumReport conv_singular_values(const Tensor& kernel, std::size_t H, std::size_t W, std::size_t layer = 0) {
  auto mats = detail::transfer_matrices(kernel, H, W);
  SpectrumReport rep;
  rep.layer = layer;
  std::size_t r = std::min(kernel.dim(0), kernel.dim(1));
  rep.values.reserve(H * W * r);
  for (const auto& m : mats) {
    Eigen::VectorXd s = Eigen::JacobiSVD<detail::CMat>(m).singularValues();
    rep.values.insert(rep.values.end(), s.data(), s.data() + s.size());
  }
  std::sort(rep.values.begin(), rep.values.end(), std::greater<>());
  return rep;
}

inline double conv_spectral_norm(const Tensor& kernel, std::size_t H, std::size_t W) {
  double best = 0.0;
  for (const auto& m : detail::transfer_matrices(kernel, H, W)) {
    Eigen::VectorXd s = Eigen::JacobiSVD<detail::CMat>(m).singularValues();
    if (s.size()) best = std::max(best, s(0));
  }
  return best;
}

// Clamps per-frequency singular values at theta and projects back to the k x k support.
// The projection can re-inflate the norm, so it is repeated and finished with a uniform
// rescale that lands the operator norm on theta.
inline Tensor clip_singular_values(const Tensor& kernel, std::size_t H, std::size_t W, double theta) {
  if (!(theta > 0)) throw ContractError("clip_singular_values: threshold must be positive");
  auto [O, C, k] = detail::kernel_dims(kernel, H, W);
  double top = conv_spectral_norm(kernel, H, W);
  if (top <= theta * (1.0 + 1e-12)) return kernel;
  Tensor cur = kernel;
  for (int it = 0; it < 20 && top > theta * (1.0 + 1e-9); ++it) {
    auto mats = detail::transfer_matrices(cur, H, W);
    for (auto& m : mats) {
      Eigen::JacobiSVD<detail::CMat> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
      Eigen::VectorXd s = svd.singularValues().cwiseMin(theta);
      m = svd.matrixU() * s.asDiagonal() * svd.matrixV().adjoint();
    }
    cur = detail::kernel_from_transfer(mats, O, C, k, H, W);
    top = conv_spectral_norm(cur, H, W);
  }
  if (top > 0 && std::abs(top - theta) > 1e-12 * theta)
    for (double& v : cur.vec()) v *= theta / top;
  return cur;
}

inline double matrix_spectral_norm(const Tensor& w) {
  if (w.rank() != 2) throw DimensionError("matrix_spectral_norm: expected rank 2, got " + shape_str(w.shape()));
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
      w.raw(), static_cast<Eigen::Index>(w.dim(0)), static_cast<Eigen::Index>(w.dim(1)));
  auto s = detail::matrix_singular_values(m);
  return s.empty() ? 0.0 : s.front();
}

// Rescales a dense matrix so its spectral norm is at most theta.
inline Tensor clip_matrix(const Tensor& w, double theta) {
  double n = matrix_spectral_norm(w);
  if (n <= theta) return w;
  Tensor out = w;
  for (double& v : out.vec()) v *= theta / n;
  return out;
}

struct LipschitzCert {
  double chi = 0, kappa = 0, delta_op = 0, nu = 0;
  std::size_t L = 1;
  double kappa_theta = 0;
};

// kappa_theta = chi * kappa * delta * (1 + nu + delta / L)^L
inline double network_lipschitz(double chi, double kappa, double delta_op, double nu, std::size_t L) {
  if (chi < 0 || kappa < 0 || delta_op < 0 || nu < 0) throw ContractError("network_lipschitz: arguments must be >= 0");
  if (L < 1) throw ContractError("network_lipschitz: L must be >= 1");
  double Ld = static_cast<double>(L);
  return chi * kappa * delta_op * std::pow(1.0 + nu + delta_op / Ld, Ld);
}

enum class LossKind { D, A, I };

inline const char* to_string(LossKind k) { return k == LossKind::D ? "D" : (k == LossKind::A ? "A" : "I"); }

struct RademacherBound {
  LossKind kind = LossKind::D;
  double m = 1, d = 1, delta = 0.1, B = 0, omega = 0;
  double dudley = 0, concentration = 0, zeta = 0;
};

struct ZetaInputs {
  double m = 1;
  double d = 1;
  double delta = 0.1;
  double B = 0;
  double omega = 0;
  double kappa = 0;
  double chi = 0;
  double delta_op = 0;
  double nu = 0;
  std::size_t L = 1;
};

inline RademacherBound zeta_bound(LossKind kind, const ZetaInputs& in) {
  if (!(in.delta > 0 && in.delta < 1)) throw ContractError("zeta_bound: delta must lie in (0,1)");
  if (in.m < 1 || in.d < 1) throw ContractError("zeta_bound: m and d must be >= 1");
  RademacherBound r{kind, in.m, in.d, in.delta, in.B, in.omega};
  r.dudley = 2.0 * network_lipschitz(in.chi, in.kappa, in.delta_op, in.nu, in.L) * std::sqrt(8.7 * in.d / in.m);
  r.concentration = (in.B + 2.0 * in.kappa * in.omega * in.m) * std::sqrt(std::log(1.0 / in.delta) / (2.0 * in.m));
  r.zeta = r.dudley + r.concentration;
  return r;
}

}  // namespace dde
