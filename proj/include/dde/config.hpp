#pragma once

#include <zlib.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "dde/cert.hpp"
#include "dde/evaluate.hpp"
#include "dde/factor_data.hpp"
#include "dde/trainer.hpp"
#include "json.hpp"

namespace dde {

inline constexpr const char* kToolVersion = "1.0.0";

struct BenchConfig {
  std::size_t runs = 1000;
  std::size_t warmup = 20;
  std::vector<double> ratios{0.1, 0.3, 0.5, 0.7, 0.9};
};

struct CertConfig {
  std::vector<double> m_grid = default_m_grid();
  nlohmann::ordered_json constants = nlohmann::ordered_json::object();
};

struct RunConfig {
  std::uint64_t seed = 1;
  GenerateConfig data;
  TeacherConfig teacher;
  DistillConfig distill;
  CertConfig cert;
  OodConfig ood;
  BenchConfig bench;

  RunConfig() { data.factors = default_factors(); }
};

namespace detail {

using ojson = nlohmann::ordered_json;

class Section {
 public:
  Section(const ojson& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected a JSON object");
  }
  template <class T>
  void get(const char* key, T& dst) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      dst = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(name(key) + ": wrong type");
    }
  }
  const ojson* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  std::string name(const char* key) const { return path_.empty() ? key : path_ + "." + key; }
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown config key '" + name(it.key().c_str()) + "'");
  }

 private:
  const ojson& j_;
  std::string path_;
  std::set<std::string> seen_;
};

// Factor values may be written as JSON numbers or strings.
inline void value_list(Section& s, const char* key, std::vector<std::string>& dst) {
  const ojson* j = s.child(key);
  if (!j) return;
  if (!j->is_array()) throw ConfigError(s.name(key) + ": expected an array");
  dst.clear();
  for (const auto& v : *j) {
    if (v.is_string())
      dst.push_back(v.get<std::string>());
    else if (v.is_number())
      dst.push_back(v.dump());
    else
      throw ConfigError(s.name(key) + ": values must be numbers or strings");
  }
}

template <class T>
void positive(const T& v, const std::string& name) {
  if (!(v > 0)) throw ConfigError(name + ": must be positive");
}

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::ordered_json& j) {
  using detail::ojson;
  using detail::Section;
  RunConfig c;
  Section root(j, "");
  root.get("seed", c.seed);

  if (auto* dj = root.child("data")) {
    Section s(*dj, "data");
    if (auto* fj = s.child("factors")) {
      if (!fj->is_array()) throw ConfigError("data.factors: expected an array");
      c.data.factors.clear();
      for (std::size_t i = 0; i < fj->size(); ++i) {
        Section fs((*fj)[i], "data.factors[" + std::to_string(i) + "]");
        FactorSpec f;
        std::string role;
        fs.get("name", f.name);
        detail::value_list(fs, "observed_values", f.observed_values);
        detail::value_list(fs, "test_only", f.test_only);
        fs.get("role", role);
        if (f.name.empty()) throw ConfigError(fs.name("name") + ": required");
        if (role.empty()) throw ConfigError(fs.name("role") + ": required");
        try {
          f.role = parse_role(role);
        } catch (const ConfigError& e) {
          throw ConfigError(fs.name("role") + ": " + e.what());
        }
        fs.finish();
        c.data.factors.push_back(std::move(f));
      }
    }
    s.get("height", c.data.height);
    s.get("width", c.data.width);
    s.get("train_per_partition", c.data.train_per_partition);
    s.get("calibration_per_partition", c.data.calibration_per_partition);
    s.get("test_per_combination", c.data.test_per_combination);
    s.get("pairs_per_factor", c.data.pairs_per_factor);
    s.get("noise_sigma", c.data.noise_sigma);
    s.finish();
    validate_factors(c.data.factors);
  }

  if (auto* tj = root.child("teacher")) {
    Section s(*tj, "teacher");
    auto& t = c.teacher;
    s.get("widths", t.arch.widths);
    s.get("kernel", t.arch.kernel);
    s.get("stride", t.arch.stride);
    s.get("padding", t.arch.padding);
    s.get("latent", t.arch.latent);
    s.get("slope", t.arch.slope);
    s.get("gain", t.arch.gain);
    s.get("init_norm_bound", t.arch.init_norm_bound);
    if (auto* rj = s.child("representative")) {
      if (!rj->is_object()) throw ConfigError("teacher.representative: expected an object of factor -> dims");
      t.arch.representative.clear();
      for (auto it = rj->begin(); it != rj->end(); ++it) {
        try {
          t.arch.representative.push_back({it.key(), it.value().get<std::vector<std::size_t>>()});
        } catch (const nlohmann::json::exception&) {
          throw ConfigError("teacher.representative." + it.key() + ": expected a list of dims");
        }
      }
    }
    s.get("epochs", t.epochs);
    s.get("batch", t.batch);
    s.get("pairs_per_batch", t.pairs_per_batch);
    s.get("lr", t.lr);
    s.get("beta_kl", t.beta_kl);
    s.get("decoder_hidden", t.decoder_hidden);
    s.get("isolation_weight", t.isolation_weight);
    s.get("sensitivity_weight", t.sensitivity_weight);
    s.get("sensitivity_margin", t.sensitivity_margin);
    s.get("consistency_weight", t.consistency_weight);
    s.get("logvar_spread_weight", t.logvar_spread_weight);
    s.finish();
    detail::positive(t.lr, "teacher.lr");
    detail::positive(t.batch, "teacher.batch");
    detail::positive(t.arch.gain, "teacher.gain");
    detail::positive(t.decoder_hidden, "teacher.decoder_hidden");
  }

  if (auto* dj = root.child("distill")) {
    Section s(*dj, "distill");
    auto& d = c.distill;
    s.get("epochs", d.epochs);
    s.get("batch", d.batch);
    s.get("lr", d.lr);
    s.get("beta1", d.beta1);
    s.get("beta2", d.beta2);
    s.get("adam_eps", d.adam_eps);
    s.get("margin_adapt", d.margin_adapt);
    s.get("margin_isolate", d.margin_isolate);
    s.get("lambda0_adapt", d.lambda0_adapt);
    s.get("lambda0_isolate", d.lambda0_isolate);
    s.get("rate_adapt", d.rate_adapt);
    s.get("rate_isolate", d.rate_isolate);
    s.get("compression", d.compression);
    s.get("raw_losses", d.raw_losses);
    s.get("d_composite", d.d_composite);
    s.get("sample_sigma_is_variance", d.sample_sigma_is_variance);
    s.get("shared_pair_noise", d.shared_pair_noise);
    s.get("early_stop", d.early_stop);
    if (auto* cj = s.child("spectral_clip")) {
      Section cs(*cj, "distill.spectral_clip");
      cs.get("enabled", d.spectral_clip);
      cs.get("threshold", d.spectral_clip_threshold);
      cs.finish();
    }
    s.finish();
    if (!(d.compression >= 0.1 - 1e-12 && d.compression <= 0.9 + 1e-12))
      throw ConfigError("distill.compression: must lie in [0.1, 0.9]");
  }

  if (auto* cj = root.child("cert")) {
    Section s(*cj, "cert");
    s.get("m_grid", c.cert.m_grid);
    if (auto* kj = s.child("constants")) {
      constants_from_json(*kj);
      c.cert.constants = *kj;
    }
    s.finish();
    for (double m : c.cert.m_grid)
      if (m < 1) throw ConfigError("cert.m_grid: values must be >= 1");
  }
  if (auto* oj = root.child("ood")) {
    Section s(*oj, "ood");
    s.get("k", c.ood.k);
    s.get("percentile", c.ood.percentile);
    s.finish();
    if (!(c.ood.percentile >= 0 && c.ood.percentile <= 100)) throw ConfigError("ood.percentile: must lie in [0, 100]");
  }
  if (auto* bj = root.child("bench")) {
    Section s(*bj, "bench");
    s.get("runs", c.bench.runs);
    s.get("warmup", c.bench.warmup);
    s.get("ratios", c.bench.ratios);
    s.finish();
  }
  root.finish();
  validate_representative(c.teacher.arch.representative, c.teacher.arch.latent);
  validate(c.distill, c.data.factors.size());
  return c;
}

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  using detail::ojson;
  ojson j;
  j["seed"] = c.seed;
  ojson factors = ojson::array();
  for (const auto& f : c.data.factors)
    factors.push_back({{"name", f.name}, {"role", to_string(f.role)}, {"observed_values", f.observed_values}, {"test_only", f.test_only}});
  j["data"] = {{"factors", factors},
               {"height", c.data.height},
               {"width", c.data.width},
               {"train_per_partition", c.data.train_per_partition},
               {"calibration_per_partition", c.data.calibration_per_partition},
               {"test_per_combination", c.data.test_per_combination},
               {"pairs_per_factor", c.data.pairs_per_factor},
               {"noise_sigma", c.data.noise_sigma}};
  const auto& t = c.teacher;
  ojson rep = ojson::object();
  for (const auto& r : t.arch.representative) rep[r.factor] = r.dims;
  j["teacher"] = {{"widths", t.arch.widths},
                  {"kernel", t.arch.kernel},
                  {"stride", t.arch.stride},
                  {"padding", t.arch.padding},
                  {"latent", t.arch.latent},
                  {"slope", t.arch.slope},
                  {"gain", t.arch.gain},
                  {"init_norm_bound", t.arch.init_norm_bound},
                  {"representative", rep},
                  {"epochs", t.epochs},
                  {"batch", t.batch},
                  {"pairs_per_batch", t.pairs_per_batch},
                  {"lr", t.lr},
                  {"beta_kl", t.beta_kl},
                  {"decoder_hidden", t.decoder_hidden},
                  {"isolation_weight", t.isolation_weight},
                  {"sensitivity_weight", t.sensitivity_weight},
                  {"sensitivity_margin", t.sensitivity_margin},
                  {"consistency_weight", t.consistency_weight},
                  {"logvar_spread_weight", t.logvar_spread_weight}};
  const auto& d = c.distill;
  j["distill"] = {{"epochs", d.epochs},
                  {"batch", d.batch},
                  {"lr", d.lr},
                  {"beta1", d.beta1},
                  {"beta2", d.beta2},
                  {"adam_eps", d.adam_eps},
                  {"margin_adapt", d.margin_adapt},
                  {"margin_isolate", d.margin_isolate},
                  {"lambda0_adapt", d.lambda0_adapt},
                  {"lambda0_isolate", d.lambda0_isolate},
                  {"rate_adapt", d.rate_adapt},
                  {"rate_isolate", d.rate_isolate},
                  {"compression", d.compression},
                  {"raw_losses", d.raw_losses},
                  {"d_composite", d.d_composite},
                  {"sample_sigma_is_variance", d.sample_sigma_is_variance},
                  {"shared_pair_noise", d.shared_pair_noise},
                  {"early_stop", d.early_stop},
                  {"spectral_clip", {{"enabled", d.spectral_clip}, {"threshold", d.spectral_clip_threshold}}}};
  j["cert"] = {{"m_grid", c.cert.m_grid}, {"constants", c.cert.constants}};
  j["ood"] = {{"k", c.ood.k}, {"percentile", c.ood.percentile}};
  j["bench"] = {{"runs", c.bench.runs}, {"warmup", c.bench.warmup}, {"ratios", c.bench.ratios}};
  return j;
}

inline nlohmann::ordered_json read_json_file(const std::filesystem::path& p, const char* what) {
  std::ifstream is(p);
  if (!is) throw ConfigError(std::string(what) + ": cannot open " + p.string());
  try {
    return nlohmann::ordered_json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string(what) + ": " + p.string() + ": " + e.what());
  }
}

inline RunConfig load_config(const std::filesystem::path& p) { return config_from_json(read_json_file(p, "config")); }

inline std::string config_hash(const RunConfig& c) {
  std::string s = to_json(c).dump();
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08lx", crc32(0L, reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size())));
  return buf;
}

inline nlohmann::ordered_json provenance(const RunConfig& c) {
  return {{"tool", "dde"}, {"version", kToolVersion}, {"config_hash", config_hash(c)}, {"seed", c.seed}, {"config", to_json(c)}};
}

}  // namespace dde
