#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "dde/autodiff.hpp"
#include "dde/encoder.hpp"
#include "dde/spectral.hpp"

namespace dde {

// Gradient of a rank-0 tape value with respect to each leaf.
inline std::vector<Tensor> grad(const Var& scalar, const std::vector<Var>& leaves) {
  if (!scalar.valid() || scalar.value().rank() != 0)
    throw ContractError("grad: root must be a rank-0 tensor");
  return scalar.tape()->gradients(scalar, leaves);
}

struct LossValue {
  Var value;  // rank 0 for a single sample, [B] for a batch
  LossKind kind = LossKind::D;
  std::optional<std::string> factor;
};

struct Margins {
  std::vector<double> adapt;    // per factor
  std::vector<double> isolate;  // per factor
};

// Teacher reference sample a and student Gaussian for both members of a pair.
struct PairLatents {
  Var a, mu, logvar;
  Var a2, mu2, logvar2;
};

namespace detail {
inline void require_latent_shapes(const Var& x, const Var& y, const char* what) {
  if (x.shape() != y.shape())
    throw ContractError(std::string(what) + ": latent shapes differ " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
}
}  // namespace detail

// Symmetric KL between diagonal Gaussians, averaged over latent dims.
inline LossValue distill_loss(const LatentVars& teacher, const LatentVars& student) {
  detail::require_latent_shapes(teacher.mu, student.mu, "distill_loss");
  detail::require_latent_shapes(teacher.logvar, student.logvar, "distill_loss");
  detail::require_latent_shapes(teacher.mu, teacher.logvar, "distill_loss");
  using namespace ad;
  Var vt = exp(teacher.logvar), vs = exp(student.logvar);
  Var dm = square(teacher.mu - student.mu);
  Var term = (vt + dm) / vs + (vs + dm) / vt - 2.0;
  double N = static_cast<double>(teacher.mu.shape().back());
  return {scale(sum_last(term), 1.0 / (2.0 * N)), LossKind::D, std::nullopt};
}

inline double mutual_info(double a, double mu, double logvar) {
  return -0.5 * (logvar + (a - mu) * (a - mu) / std::exp(logvar));
}

// Bracket of the mutual-information term: logvar + (a - mu)^2 / exp(logvar).
inline Var mi_bracket(const Var& a, const Var& mu, const Var& logvar) {
  using namespace ad;
  return logvar + square(a - mu) / exp(logvar);
}

namespace detail {
inline std::pair<Var, Var> brackets(const PairLatents& p, const std::vector<std::size_t>& dims) {
  using namespace ad;
  Var t = mi_bracket(select_last(p.a, dims), select_last(p.mu, dims), select_last(p.logvar, dims));
  Var t2 = mi_bracket(select_last(p.a2, dims), select_last(p.mu2, dims), select_last(p.logvar2, dims));
  return {t, t2};
}
inline void check_pair(const PairLatents& p, const char* what) {
  require_latent_shapes(p.a, p.mu, what);
  require_latent_shapes(p.mu, p.logvar, what);
  require_latent_shapes(p.a2, p.mu2, what);
  require_latent_shapes(p.mu2, p.logvar2, what);
  require_latent_shapes(p.mu, p.mu2, what);
}
}  // namespace detail

inline LossValue adapt_loss(const PairLatents& p, const std::vector<std::size_t>& z,
                            std::optional<std::string> factor = std::nullopt) {
  if (z.empty()) throw ContractError("adapt_loss: representative dims must be non-empty");
  detail::check_pair(p, "adapt_loss");
  auto [t, t2] = detail::brackets(p, z);
  return {ad::scale(ad::mean_last(ad::sub(t, t2)), -0.5), LossKind::A, std::move(factor)};
}

inline LossValue isolation_loss(const PairLatents& p, const std::vector<std::size_t>& z, std::size_t N,
                                std::optional<std::string> factor = std::nullopt) {
  if (z.empty() || z.size() >= N) throw ContractError("isolation_loss: need 1 <= |Z_f| < N");
  detail::check_pair(p, "isolation_loss");
  if (p.mu.shape().back() != N) throw ContractError("isolation_loss: latent size mismatch");
  std::vector<std::size_t> zc;
  for (std::size_t k = 0; k < N; ++k)
    if (std::find(z.begin(), z.end(), k) == z.end()) zc.push_back(k);
  auto [t, t2] = detail::brackets(p, z);
  auto [c, c2] = detail::brackets(p, zc);
  Var v = ad::mean_last(ad::sub(t, t2)) + ad::mean_last(ad::sub(c2, c));
  return {ad::scale(v, -0.5), LossKind::I, std::move(factor)};
}

// D: 2*(logistic(L) - 1/2); A, I: arctan(L).
inline LossValue bounded(const LossValue& l) {
  if (l.kind == LossKind::D) return {ad::scale(ad::add_scalar(ad::logistic(l.value), -0.5), 2.0), l.kind, l.factor};
  return {ad::atan(l.value), l.kind, l.factor};
}

inline Var hinge(const Var& v, double gamma) {
  if (gamma < 0) throw ContractError("hinge: margin must be non-negative");
  return ad::relu(ad::add_scalar(v, -gamma));
}
inline Var hinge(const LossValue& l, double gamma) { return hinge(l.value, gamma); }

}  // namespace dde
