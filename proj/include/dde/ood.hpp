#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "dde/rng.hpp"
#include "dde/tensor.hpp"
#include "json.hpp"

namespace dde {

struct GmmComponent {
  double weight = 0;
  std::vector<double> mean;
  std::vector<double> var;  // diagonal
};

struct OodVerdict {
  double score = 0;
  bool is_ood = false;
};

struct OodReasoner {
  std::string factor;
  std::vector<std::size_t> dims;
  std::vector<GmmComponent> components;
  double threshold = -std::numeric_limits<double>::infinity();
};

inline constexpr double kVarianceFloor = 1e-6;

namespace detail {

inline double sqdist(const double* a, const double* b, std::size_t d) {
  double s = 0;
  for (std::size_t j = 0; j < d; ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
  return s;
}

}  // namespace detail

struct KMeansResult {
  std::vector<std::vector<double>> centers;
  std::vector<std::size_t> assignment;
  std::size_t iterations = 0;
};

// Lloyd's algorithm with k-means++ seeding. points: row-major [n, d].
inline KMeansResult kmeans(const std::vector<double>& points, std::size_t n, std::size_t d, std::size_t k,
                           std::uint64_t seed, std::size_t max_iter = 300, double tol = 1e-6) {
  if (k < 1) throw ConfigError("ood.k: must be >= 1");
  if (k > n) throw ConfigError("ood.k: " + std::to_string(k) + " clusters requested for " + std::to_string(n) + " points");
  Rng rng = Rng::derive(seed, 0x6b6d65616e73ULL);
  const double* X = points.data();
  KMeansResult r;
  std::vector<double> dmin(n, std::numeric_limits<double>::infinity());
  std::size_t first = rng.below(n);
  r.centers.emplace_back(X + first * d, X + first * d + d);
  while (r.centers.size() < k) {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      dmin[i] = std::min(dmin[i], detail::sqdist(X + i * d, r.centers.back().data(), d));
      total += dmin[i];
    }
    std::size_t pick = 0;
    if (total > 0) {
      double u = rng.uniform() * total, acc = 0;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        acc += dmin[i];
        if (acc > u) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.below(n);
    }
    r.centers.emplace_back(X + pick * d, X + pick * d + d);
  }

  r.assignment.assign(n, 0);
  for (r.iterations = 1; r.iterations <= max_iter; ++r.iterations) {
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        double dd = detail::sqdist(X + i * d, r.centers[c].data(), d);
        if (dd < best) {
          best = dd;
          r.assignment[i] = c;
        }
      }
    }
    std::vector<std::vector<double>> next(k, std::vector<double>(d, 0.0));
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++count[r.assignment[i]];
      for (std::size_t j = 0; j < d; ++j) next[r.assignment[i]][j] += X[i * d + j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] == 0) {
        // Re-seed an empty cluster at the point farthest from its current center.
        std::size_t far = 0;
        double fd = -1;
        for (std::size_t i = 0; i < n; ++i) {
          double dd = detail::sqdist(X + i * d, r.centers[r.assignment[i]].data(), d);
          if (dd > fd) {
            fd = dd;
            far = i;
          }
        }
        next[c].assign(X + far * d, X + far * d + d);
        r.assignment[far] = c;
        continue;
      }
      for (double& v : next[c]) v /= static_cast<double>(count[c]);
    }
    double shift = 0;
    for (std::size_t c = 0; c < k; ++c) shift = std::max(shift, std::sqrt(detail::sqdist(next[c].data(), r.centers[c].data(), d)));
    r.centers = std::move(next);
    if (shift <= tol) break;
  }
  r.iterations = std::min(r.iterations, max_iter);
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
      double dd = detail::sqdist(X + i * d, r.centers[c].data(), d);
      if (dd < best) {
        best = dd;
        r.assignment[i] = c;
      }
    }
  }
  return r;
}

inline double log_likelihood(const OodReasoner& r, const double* z) {
  const std::size_t d = r.dims.size();
  double best = -std::numeric_limits<double>::infinity();
  std::vector<double> terms;
  terms.reserve(r.components.size());
  for (const auto& c : r.components) {
    double lp = std::log(c.weight);
    for (std::size_t j = 0; j < d; ++j) {
      double diff = z[j] - c.mean[j];
      lp += -0.5 * (std::log(2.0 * std::numbers::pi * c.var[j]) + diff * diff / c.var[j]);
    }
    terms.push_back(lp);
    best = std::max(best, lp);
  }
  if (!std::isfinite(best)) return best;
  double s = 0;
  for (double t : terms) s += std::exp(t - best);
  return best + std::log(s);
}

inline OodVerdict score(const OodReasoner& r, const std::vector<double>& z) {
  if (z.size() != r.dims.size())
    throw DimensionError("ood score: expected " + std::to_string(r.dims.size()) + " dims, got " + std::to_string(z.size()));
  double s = log_likelihood(r, z.data());
  return {s, s < r.threshold};
}

// Linear-interpolated percentile, q in [0, 100].
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw ContractError("percentile of an empty set");
  std::sort(v.begin(), v.end());
  double pos = std::clamp(q, 0.0, 100.0) / 100.0 * static_cast<double>(v.size() - 1);
  auto lo = static_cast<std::size_t>(std::floor(pos));
  std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

// embeddings: row-major [n, |dims|], already restricted to Z_f.
inline OodReasoner fit(const std::vector<double>& embeddings, std::size_t n, const std::vector<std::size_t>& dims,
                       std::size_t k, double q, std::uint64_t seed, std::string factor = {}) {
  const std::size_t d = dims.size();
  if (d == 0) throw ContractError("ood fit: empty dimension set");
  if (embeddings.size() != n * d) throw DimensionError("ood fit: embedding size does not match n x |dims|");
  auto km = kmeans(embeddings, n, d, k, seed);
  OodReasoner r{std::move(factor), dims, {}, 0};
  for (std::size_t c = 0; c < k; ++c) {
    GmmComponent g{0, km.centers[c], std::vector<double>(d, 0.0)};
    std::size_t cnt = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (km.assignment[i] != c) continue;
      ++cnt;
      for (std::size_t j = 0; j < d; ++j) {
        double diff = embeddings[i * d + j] - g.mean[j];
        g.var[j] += diff * diff;
      }
    }
    for (double& v : g.var) v = std::max(cnt ? v / static_cast<double>(cnt) : 0.0, kVarianceFloor);
    g.weight = static_cast<double>(cnt) / static_cast<double>(n);
    if (cnt > 0) r.components.push_back(std::move(g));
  }
  std::vector<double> ll(n);
  for (std::size_t i = 0; i < n; ++i) ll[i] = log_likelihood(r, embeddings.data() + i * d);
  r.threshold = percentile(ll, q);
  return r;
}

// Mann-Whitney AUROC with higher score meaning in-distribution; ties count one half.
inline double auroc(const std::vector<double>& scores, const std::vector<bool>& is_ood) {
  if (scores.size() != is_ood.size()) throw DimensionError("auroc: scores and labels differ in length");
  std::size_t n_ood = static_cast<std::size_t>(std::count(is_ood.begin(), is_ood.end(), true));
  std::size_t n_id = scores.size() - n_ood;
  if (n_ood == 0 || n_id == 0) throw ContractError("auroc: both ID and OOD samples are required");
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_id = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    double avg = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t t = i; t < j; ++t)
      if (!is_ood[order[t]]) rank_sum_id += avg;
    i = j;
  }
  double u = rank_sum_id - static_cast<double>(n_id) * static_cast<double>(n_id + 1) / 2.0;
  return u / (static_cast<double>(n_id) * static_cast<double>(n_ood));
}

inline nlohmann::ordered_json to_json(const OodReasoner& r) {
  nlohmann::ordered_json j;
  j["factor"] = r.factor;
  j["dims"] = r.dims;
  j["threshold"] = r.threshold;
  j["components"] = nlohmann::ordered_json::array();
  for (const auto& c : r.components) j["components"].push_back({{"weight", c.weight}, {"mean", c.mean}, {"var", c.var}});
  return j;
}

}  // namespace dde
