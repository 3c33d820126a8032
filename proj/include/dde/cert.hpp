#pragma once

#include <cmath>
#include <iomanip>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dde/autodiff.hpp"
#include "dde/encoder.hpp"
#include "dde/factor_data.hpp"
#include "dde/spectral.hpp"
#include "json.hpp"

namespace dde {

inline Tensor effective_weight(const LayerSpec& l, const Tensor& w) {
  return l.standardized ? ad::standardize_value(w, l.gain) : w;
}

// Grid on which a layer's operator is analyzed: the layer's input size, raised to the kernel size.
inline std::pair<std::size_t, std::size_t> analysis_grid(const EncoderModel& m, std::size_t layer) {
  const auto& l = m.layers.at(layer);
  auto [H, W] = m.layer_input_spatial().at(layer);
  return {std::max(H, l.kernel), std::max(W, l.kernel)};
}

inline double operator_norm(const EncoderModel& m, std::size_t layer, const Tensor& eff) {
  const auto& l = m.layers.at(layer);
  if (l.kind == LayerKind::Linear) return matrix_spectral_norm(eff);
  auto [H, W] = analysis_grid(m, layer);
  return conv_spectral_norm(eff, H, W);
}

inline std::vector<double> layer_drifts(const EncoderModel& m, const std::vector<LayerWeights>& snapshot) {
  if (snapshot.size() != m.layers.size()) throw DimensionError("operator_drift: snapshot layer count mismatch");
  std::vector<double> out;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& l = m.layers[i];
    require_same_shape(m.weights[i].weight, snapshot[i].weight, "operator_drift");
    Tensor a = effective_weight(l, m.weights[i].weight), b = effective_weight(l, snapshot[i].weight);
    for (std::size_t j = 0; j < a.size(); ++j) a[j] -= b[j];
    out.push_back(operator_norm(m, i, a));
  }
  return out;
}

inline double operator_drift(const EncoderModel& m, const std::vector<LayerWeights>& snapshot) {
  double s = 0;
  for (double d : layer_drifts(m, snapshot)) s += d;
  return s;
}
inline double operator_drift(const EncoderModel& m) { return operator_drift(m, m.snapshot); }

inline double chi_of_images(const Tensor& images) {
  if (images.rank() < 1 || images.dim(0) == 0) throw ContractError("chi: empty image set");
  std::size_t M = images.dim(0), D = images.size() / M;
  double best = 0;
  for (std::size_t i = 0; i < M; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < D; ++j) s += images[i * D + j] * images[i * D + j];
    best = std::max(best, std::sqrt(s));
  }
  return best;
}

// Largest flattened L2 norm over training images.
inline double chi_of_dataset(const FactorDataset& ds) {
  auto train = ds.split_indices(Split::Train);
  if (train.empty()) throw ContractError("chi: dataset has no training samples");
  double best = 0;
  for (auto i : train) {
    const std::uint8_t* p = ds.image_data(i);
    double s = 0;
    for (std::size_t j = 0; j < ds.image_bytes(); ++j) {
      double v = p[j] / 255.0;
      s += v * v;
    }
    best = std::max(best, std::sqrt(s));
  }
  return best;
}

struct CertConstants {
  double kappa_D = 3.0, kappa_A = 61.5, kappa_I = 206.4;
  double B_D = 1.0, B_A = 54.72, B_I = 216.8;
  double omega = 0.001;
  double delta = 0.1;
  std::optional<double> chi, d, one_plus_nu, delta_op, m, m_A, m_I;
  std::optional<std::size_t> L;
  nlohmann::ordered_json source;  // input as read
};

inline CertConstants constants_from_json(const nlohmann::ordered_json& j) {
  static const std::vector<std::string> known{"kappa_D", "kappa_A", "kappa_I", "B_D", "B_A", "B_I", "omega", "delta",
                                              "chi", "d", "one_plus_nu", "delta_op", "L", "m", "m_A", "m_I"};
  if (!j.is_object()) throw ConfigError("constants: expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw ConfigError("constants: unknown key '" + it.key() + "'");
  CertConstants c;
  c.source = j;
  auto num = [&](const char* k, double& dst) {
    if (!j.contains(k)) return;
    if (!j[k].is_number()) throw ConfigError(std::string("constants.") + k + ": expected a number");
    dst = j[k].get<double>();
  };
  auto opt = [&](const char* k, std::optional<double>& dst) {
    if (!j.contains(k) || j[k].is_null()) return;
    if (!j[k].is_number()) throw ConfigError(std::string("constants.") + k + ": expected a number");
    dst = j[k].get<double>();
  };
  num("kappa_D", c.kappa_D);
  num("kappa_A", c.kappa_A);
  num("kappa_I", c.kappa_I);
  num("B_D", c.B_D);
  num("B_A", c.B_A);
  num("B_I", c.B_I);
  num("omega", c.omega);
  num("delta", c.delta);
  opt("chi", c.chi);
  opt("d", c.d);
  opt("one_plus_nu", c.one_plus_nu);
  opt("delta_op", c.delta_op);
  opt("m", c.m);
  opt("m_A", c.m_A);
  opt("m_I", c.m_I);
  if (j.contains("L") && !j["L"].is_null()) {
    if (!j["L"].is_number_integer() || j["L"].get<long long>() < 1) throw ConfigError("constants.L: expected an integer >= 1");
    c.L = j["L"].get<std::size_t>();
  }
  if (!(c.delta > 0 && c.delta < 1)) throw ConfigError("constants.delta: must lie in (0,1)");
  return c;
}

struct CertReport {
  nlohmann::ordered_json json;
  std::vector<RademacherBound> bounds;  // D, A, I
  ZetaInputs base;                      // geometry shared by all kinds
  double m_D = 1, m_A = 1, m_I = 1;
  CertConstants constants;
};

inline CertReport certify(const EncoderModel& m, const FactorDataset& ds, const CertConstants& k) {
  using nlohmann::ordered_json;
  CertReport rep;
  rep.constants = k;
  ordered_json layers = ordered_json::array();
  std::vector<double> drifts = m.snapshot.empty() ? std::vector<double>(m.layers.size(), 0.0) : layer_drifts(m, m.snapshot);
  double init_max = 0;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& l = m.layers[i];
    Tensor eff = effective_weight(l, m.weights[i].weight);
    ordered_json e;
    e["layer"] = i;
    e["kind"] = l.kind == LayerKind::Conv ? "conv" : "linear";
    std::vector<double> top;
    if (l.kind == LayerKind::Conv) {
      auto [H, W] = analysis_grid(m, i);
      e["grid"] = {H, W};
      auto spec = conv_singular_values(eff, H, W, i);
      e["singular_value_count"] = spec.values.size();
      top.assign(spec.values.begin(), spec.values.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(5, spec.values.size())));
      e["spectral_norm"] = spec.max();
      e["min_singular_value"] = spec.values.empty() ? 0.0 : spec.values.back();
    } else {
      e["spectral_norm"] = matrix_spectral_norm(eff);
      top.push_back(e["spectral_norm"].get<double>());
    }
    e["top_singular_values"] = top;
    double init_norm = m.snapshot.empty() ? 0.0 : operator_norm(m, i, effective_weight(l, m.snapshot[i].weight));
    init_max = std::max(init_max, init_norm);
    e["init_spectral_norm"] = init_norm;
    e["drift"] = drifts[i];
    layers.push_back(e);
  }
  double drift = 0;
  for (double d : drifts) drift += d;

  ordered_json measured;
  measured["chi"] = chi_of_dataset(ds);
  measured["d"] = m.parameter_count();
  measured["delta_op"] = drift;
  measured["L"] = m.layers.size();
  measured["init_max_operator_norm"] = init_max;
  measured["m"] = ds.split_indices(Split::Train).size();
  double mA = 0;
  for (const auto& p : ds.pair_sets) mA = std::max(mA, static_cast<double>(p.pairs.size()));
  measured["m_pairs"] = mA;

  ordered_json resolved;
  auto pick = [&](const char* name, const std::optional<double>& given, double meas) {
    double v = given ? *given : meas;
    resolved[name] = {{"value", v}, {"source", given ? "constants" : "measured"}};
    return v;
  };
  ZetaInputs z;
  z.chi = pick("chi", k.chi, measured["chi"].get<double>());
  z.d = pick("d", k.d, static_cast<double>(m.parameter_count()));
  z.delta_op = pick("delta_op", k.delta_op, drift);
  z.nu = pick("one_plus_nu", k.one_plus_nu, std::max(1.0, init_max)) - 1.0;
  z.L = k.L ? *k.L : m.layers.size();
  resolved["L"] = {{"value", z.L}, {"source", k.L ? "constants" : "measured"}};
  rep.m_D = pick("m", k.m, measured["m"].get<double>());
  rep.m_A = pick("m_A", k.m_A, mA);
  rep.m_I = pick("m_I", k.m_I, mA);
  if (z.nu < 0) throw ConfigError("constants.one_plus_nu: must be >= 1");
  z.delta = k.delta;
  z.omega = k.omega;
  rep.base = z;

  ordered_json kt, zj;
  struct KindIn {
    LossKind kind;
    double kappa, B, m;
  };
  for (auto [kind, kappa, B, mm] : {KindIn{LossKind::D, k.kappa_D, k.B_D, rep.m_D}, KindIn{LossKind::A, k.kappa_A, k.B_A, rep.m_A},
                                    KindIn{LossKind::I, k.kappa_I, k.B_I, rep.m_I}}) {
    ZetaInputs in = z;
    in.kappa = kappa;
    in.B = B;
    in.m = mm;
    auto b = zeta_bound(kind, in);
    rep.bounds.push_back(b);
    kt[to_string(kind)] = network_lipschitz(z.chi, kappa, z.delta_op, z.nu, z.L);
    zj[to_string(kind)] = {{"m", b.m},           {"d", b.d},           {"delta", b.delta},
                           {"B", b.B},           {"omega", b.omega},   {"kappa", kappa},
                           {"dudley", b.dudley}, {"concentration", b.concentration}, {"zeta", b.zeta}};
  }

  ordered_json& j = rep.json;
  j["operator_convention"] =
      "circular boundary, stride-1 operator on max(input, kernel) grid; the trained network uses zero padding and "
      "its stated stride";
  j["weights"] = "effective (standardized) weights";
  j["constants_input"] = k.source;
  j["layers"] = layers;
  j["measured"] = measured;
  j["resolved"] = resolved;
  j["kappa_theta"] = kt;
  j["zeta"] = zj;
  return rep;
}

inline std::vector<double> default_m_grid() { return {10, 20, 50, 100, 200, 500, 1000, 2000, 3000}; }

inline void write_zeta_csv(std::ostream& os, const CertReport& rep, const std::vector<double>& grid) {
  os << "m";
  for (const char* k : {"D", "A", "I"}) os << ",dudley_" << k << ",concentration_" << k << ",zeta_" << k;
  os << '\n' << std::setprecision(17);
  const CertConstants& c = rep.constants;
  for (double m : grid) {
    os << m;
    for (auto [kind, kappa, B] : {std::tuple{LossKind::D, c.kappa_D, c.B_D}, std::tuple{LossKind::A, c.kappa_A, c.B_A},
                                  std::tuple{LossKind::I, c.kappa_I, c.B_I}}) {
      ZetaInputs in = rep.base;
      in.kappa = kappa;
      in.B = B;
      in.m = m;
      auto b = zeta_bound(kind, in);
      os << ',' << b.dudley << ',' << b.concentration << ',' << b.zeta;
    }
    os << '\n';
  }
}

}  // namespace dde
