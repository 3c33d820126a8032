#pragma once

#include <algorithm>
#include <chrono>
#include <string>
#include <vector>

#include "dde/encoder.hpp"
#include "dde/factor_data.hpp"
#include "dde/ood.hpp"
#include "dde/trainer.hpp"
#include "json.hpp"

namespace dde {

struct OodConfig {
  std::size_t k = 0;  // 0: number of train values of the factor
  double percentile = 5.0;
};

// Posterior means restricted to dims, row-major [idx.size(), dims.size()].
inline std::vector<double> latent_embeddings(const EncoderModel& m, const FactorDataset& ds, const std::vector<std::size_t>& idx,
                                             const std::vector<std::size_t>& dims) {
  auto g = encode_batched(m, ds, idx);
  std::vector<double> out;
  out.reserve(idx.size() * dims.size());
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (auto k : dims) out.push_back(g.mu[i * m.latent + k]);
  return out;
}

struct FactorEvaluation {
  std::string factor;
  std::size_t k = 0;
  double auroc = 0;
  std::size_t n_id = 0, n_ood = 0;
  OodReasoner reasoner;
};

inline FactorEvaluation evaluate_factor(const EncoderModel& m, const FactorDataset& ds, std::size_t f, const OodConfig& cfg,
                                        std::uint64_t seed) {
  const auto& spec = ds.factors.at(f);
  const auto& dims = m.dims(spec.name);
  auto calib = ds.split_indices(Split::Calibration);
  if (calib.empty()) throw FactorError("evaluate: dataset has no calibration samples");
  std::size_t k = cfg.k ? cfg.k : spec.train_values().size();
  FactorEvaluation ev{spec.name, k, 0, 0, 0, {}};
  ev.reasoner = fit(latent_embeddings(m, ds, calib, dims), calib.size(), dims, k, cfg.percentile, seed, spec.name);

  ScoringSet sc = scoring_set(ds, f);
  auto emb = latent_embeddings(m, ds, sc.indices, dims);
  std::vector<double> scores(sc.indices.size());
  for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = log_likelihood(ev.reasoner, emb.data() + i * dims.size());
  ev.auroc = auroc(scores, sc.is_ood);
  ev.n_ood = static_cast<std::size_t>(std::count(sc.is_ood.begin(), sc.is_ood.end(), true));
  ev.n_id = sc.is_ood.size() - ev.n_ood;
  return ev;
}

inline std::vector<FactorEvaluation> evaluate_model(const EncoderModel& m, const FactorDataset& ds, const OodConfig& cfg,
                                                    std::uint64_t seed) {
  std::vector<FactorEvaluation> out;
  for (std::size_t f = 0; f < ds.factors.size(); ++f) out.push_back(evaluate_factor(m, ds, f, cfg, seed));
  return out;
}

struct LatencyStats {
  std::size_t runs = 0;
  double mean_ms = 0, p50_ms = 0, p90_ms = 0, p99_ms = 0, min_ms = 0, max_ms = 0;
};

inline nlohmann::ordered_json to_json(const LatencyStats& s) {
  return {{"runs", s.runs},     {"mean_ms", s.mean_ms}, {"p50_ms", s.p50_ms}, {"p90_ms", s.p90_ms},
          {"p99_ms", s.p99_ms}, {"min_ms", s.min_ms},   {"max_ms", s.max_ms}};
}

// Single-image latency: conversion from stored pixels plus encode, cycling through the test split.
inline LatencyStats measure_latency(const EncoderModel& m, const FactorDataset& ds, std::size_t runs, std::size_t warmup = 20) {
  if (runs == 0) throw ConfigError("bench.runs: must be >= 1");
  auto pool = ds.split_indices(Split::Test);
  if (pool.empty()) pool = ds.split_indices(Split::Train);
  if (pool.empty()) throw FactorError("latency: dataset is empty");
  double sink = 0;
  for (std::size_t i = 0; i < warmup; ++i) sink += encode(m, ds.images({pool[i % pool.size()]})).mu[0];
  std::vector<double> ms(runs);
  for (std::size_t i = 0; i < runs; ++i) {
    auto t0 = std::chrono::steady_clock::now();
    auto g = encode(m, ds.images({pool[i % pool.size()]}));
    auto t1 = std::chrono::steady_clock::now();
    sink += g.mu[0];
    ms[i] = std::chrono::duration<double, std::milli>(t1 - t0).count();
  }
  static volatile double keep;
  keep = sink;
  LatencyStats s;
  s.runs = runs;
  for (double v : ms) s.mean_ms += v;
  s.mean_ms /= static_cast<double>(runs);
  s.p50_ms = percentile(ms, 50);
  s.p90_ms = percentile(ms, 90);
  s.p99_ms = percentile(ms, 99);
  s.min_ms = *std::min_element(ms.begin(), ms.end());
  s.max_ms = *std::max_element(ms.begin(), ms.end());
  return s;
}

}  // namespace dde
