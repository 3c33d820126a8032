#pragma once

#include <zlib.h>

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dde/autodiff.hpp"
#include "dde/rng.hpp"
#include "dde/spectral.hpp"
#include "dde/tensor.hpp"
#include "json.hpp"

namespace dde {

enum class LayerKind { Conv, Linear };
enum class LayerRole { Body, MuHead, LogvarHead };

struct LayerSpec {
  LayerKind kind = LayerKind::Conv;
  LayerRole role = LayerRole::Body;
  std::size_t in = 1;
  std::size_t out = 1;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::optional<double> slope;  // leaky-relu slope, none for heads
  bool standardized = false;
  double gain = 1.0;

  std::size_t weight_size() const { return kind == LayerKind::Conv ? out * in * kernel * kernel : out * in; }
  Shape weight_shape() const {
    return kind == LayerKind::Conv ? Shape{out, in, kernel, kernel} : Shape{out, in};
  }
  bool operator==(const LayerSpec&) const = default;
};

struct LayerWeights {
  Tensor weight;
  Tensor bias;
  bool operator==(const LayerWeights&) const = default;
};

struct RepresentativeDims {
  std::string factor;
  std::vector<std::size_t> dims;
  bool operator==(const RepresentativeDims&) const = default;
};

struct GaussianLatent {
  Tensor mu;
  Tensor logvar;
};

inline constexpr double kLogvarClamp = 10.0;

class EncoderModel {
 public:
  std::array<std::size_t, 3> input{3, 32, 32};
  std::vector<LayerSpec> layers;
  std::vector<LayerWeights> weights;
  std::vector<LayerWeights> snapshot;
  std::size_t latent = 30;
  std::vector<RepresentativeDims> representative;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight_size() + l.out;
    return n;
  }
  std::size_t parameter_bytes() const { return parameter_count() * sizeof(double); }

  const std::vector<std::size_t>& dims(const std::string& factor) const {
    for (const auto& r : representative)
      if (r.factor == factor) return r.dims;
    throw ConfigError("no representative dims for factor '" + factor + "'");
  }

  std::vector<std::size_t> complement(const std::vector<std::size_t>& z) const {
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < latent; ++k)
      if (std::find(z.begin(), z.end(), k) == z.end()) out.push_back(k);
    return out;
  }

  // Spatial size of the input to every layer; linear layers report 1x1.
  std::vector<std::pair<std::size_t, std::size_t>> layer_input_spatial() const {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    std::size_t H = input[1], W = input[2];
    for (const auto& l : layers) {
      if (l.kind == LayerKind::Conv) {
        out.emplace_back(H, W);
        if (l.role == LayerRole::Body) {
          H = ad::conv_out_size(H, l.kernel, l.stride, l.padding);
          W = ad::conv_out_size(W, l.kernel, l.stride, l.padding);
        }
      } else {
        out.emplace_back(1, 1);
      }
    }
    return out;
  }

  bool operator==(const EncoderModel&) const = default;
};

inline void validate_representative(const std::vector<RepresentativeDims>& reps, std::size_t N) {
  std::set<std::size_t> used;
  for (const auto& r : reps) {
    if (r.dims.empty()) throw ConfigError("representative." + r.factor + ": at least one dim required");
    if (r.dims.size() >= N) throw ConfigError("representative." + r.factor + ": complement would be empty");
    for (auto k : r.dims) {
      if (k >= N) throw ConfigError("representative." + r.factor + ": dim " + std::to_string(k) + " outside latent size");
      if (!used.insert(k).second)
        throw ConfigError("representative." + r.factor + ": dim " + std::to_string(k) + " shared with another factor");
    }
  }
}

struct EncoderConfig {
  std::array<std::size_t, 3> input{3, 32, 32};
  std::vector<std::size_t> widths{32, 64, 128, 256, 512};
  std::size_t kernel = 3;
  std::size_t stride = 2;
  std::size_t padding = 1;
  std::size_t latent = 30;
  double slope = 0.2;
  double gain = 1.7;
  double init_norm_bound = 4899.0;
  std::vector<RepresentativeDims> representative{{"haze", {3}}, {"backdrop", {6}}};
};

// Fan-in uniform init, zero bias; non-standardized layers are clipped to `norm_bound`.
inline void initialize(EncoderModel& m, std::uint64_t seed, double norm_bound) {
  m.weights.clear();
  auto spatial = m.layer_input_spatial();
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& l = m.layers[i];
    Rng rng = Rng::derive(seed, 0x1a7e0000ULL + i);
    std::size_t fan_in = l.weight_size() / l.out;
    double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor w(l.weight_shape());
    for (double& v : w.vec()) v = rng.uniform(-b, b);
    if (!l.standardized) {
      if (l.kind == LayerKind::Linear) {
        w = clip_matrix(w, norm_bound);
      } else {
        auto [H, W] = spatial[i];
        w = clip_singular_values(w, std::max(H, l.kernel), std::max(W, l.kernel), norm_bound);
      }
    }
    m.weights.push_back(LayerWeights{std::move(w), Tensor({l.out}, 0.0)});
  }
  m.snapshot = m.weights;
}

inline EncoderModel build_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  if (cfg.widths.empty()) throw ConfigError("encoder.widths: at least one conv layer required");
  for (auto w : cfg.widths)
    if (w < 1) throw ConfigError("encoder.widths: widths must be positive");
  if (cfg.latent < 2) throw ConfigError("encoder.latent: must be at least 2");
  if (!(cfg.gain > 0)) throw ConfigError("encoder.gain: must be positive");
  if (cfg.input[0] < 1 || cfg.input[1] < 1 || cfg.input[2] < 1) throw ConfigError("encoder.input: dims must be positive");
  validate_representative(cfg.representative, cfg.latent);

  EncoderModel m;
  m.input = cfg.input;
  m.latent = cfg.latent;
  m.representative = cfg.representative;
  std::size_t in = cfg.input[0], H = cfg.input[1], W = cfg.input[2];
  for (auto w : cfg.widths) {
    m.layers.push_back(LayerSpec{LayerKind::Conv, LayerRole::Body, in, w, cfg.kernel, cfg.stride, cfg.padding, cfg.slope,
                                 true, cfg.gain});
    H = ad::conv_out_size(H, cfg.kernel, cfg.stride, cfg.padding);
    W = ad::conv_out_size(W, cfg.kernel, cfg.stride, cfg.padding);
    in = w;
  }
  std::size_t flat = in * H * W;
  m.layers.push_back(LayerSpec{LayerKind::Linear, LayerRole::MuHead, flat, cfg.latent, 1, 1, 0, std::nullopt, false, 1.0});
  m.layers.push_back(LayerSpec{LayerKind::Linear, LayerRole::LogvarHead, flat, cfg.latent, 1, 1, 0, std::nullopt, false, 1.0});
  initialize(m, seed, cfg.init_norm_bound);
  return m;
}

inline EncoderModel build_teacher(const EncoderConfig& cfg, std::uint64_t seed) { return build_encoder(cfg, seed); }

inline std::size_t compressed_width(std::size_t w, double r) {
  double x = (1.0 - r) * static_cast<double>(w);
  auto c = static_cast<std::size_t>(std::ceil(x - 1e-9));
  return std::max<std::size_t>(c, 1);
}

// Student with every hidden width scaled by (1-r); latent size and Z_f are kept.
inline EncoderModel compress(const EncoderModel& teacher, double r, std::uint64_t seed, double norm_bound = 4899.0) {
  if (!(r >= 0.1 - 1e-12 && r <= 0.9 + 1e-12)) throw ConfigError("compression ratio r must lie in [0.1, 0.9]");
  EncoderModel s;
  s.input = teacher.input;
  s.latent = teacher.latent;
  s.representative = teacher.representative;
  std::size_t in = teacher.input[0];
  std::size_t H = teacher.input[1], W = teacher.input[2];
  for (const auto& l : teacher.layers) {
    LayerSpec n = l;
    if (l.role == LayerRole::Body) {
      n.in = in;
      n.out = compressed_width(l.out, r);
      if (l.kind == LayerKind::Conv) {
        H = ad::conv_out_size(H, l.kernel, l.stride, l.padding);
        W = ad::conv_out_size(W, l.kernel, l.stride, l.padding);
        in = n.out;
      } else {
        in = n.out;
        H = W = 1;
      }
    } else {
      n.in = in * H * W;
    }
    s.layers.push_back(n);
  }
  initialize(s, seed, norm_bound);
  return s;
}

// ---- forward ----

struct BoundParams {
  std::vector<Var> w;
  std::vector<Var> b;
  std::vector<Var> all() const {
    std::vector<Var> out;
    for (std::size_t i = 0; i < w.size(); ++i) {
      out.push_back(w[i]);
      out.push_back(b[i]);
    }
    return out;
  }
};

inline BoundParams bind(Tape& tape, const EncoderModel& m, bool trainable) {
  BoundParams p;
  for (const auto& lw : m.weights) {
    p.w.push_back(trainable ? tape.variable(lw.weight) : tape.constant(lw.weight));
    p.b.push_back(trainable ? tape.variable(lw.bias) : tape.constant(lw.bias));
  }
  return p;
}

inline std::vector<Tensor*> parameter_tensors(EncoderModel& m) {
  std::vector<Tensor*> out;
  for (auto& lw : m.weights) {
    out.push_back(&lw.weight);
    out.push_back(&lw.bias);
  }
  return out;
}

struct LatentVars {
  Var mu;
  Var logvar;
};

// x: [B,C,H,W]
inline LatentVars forward(Tape&, const EncoderModel& m, const BoundParams& p, const Var& x) {
  const Shape& xs = x.shape();
  if (xs.size() != 4 || xs[1] != m.input[0] || xs[2] != m.input[1] || xs[3] != m.input[2])
    throw DimensionError("encode: input " + shape_str(xs) + " does not match model input [" + std::to_string(m.input[0]) +
                         "," + std::to_string(m.input[1]) + "," + std::to_string(m.input[2]) + "]");
  std::size_t B = xs[0];
  Var h = x;
  LatentVars out;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& l = m.layers[i];
    Var w = l.standardized ? ad::standardize(p.w[i], l.gain) : p.w[i];
    if (l.role != LayerRole::Body) {
      Var y = ad::add_bias_rows(ad::linear(h, w), p.b[i]);
      if (l.role == LayerRole::MuHead)
        out.mu = y;
      else
        out.logvar = ad::clamp(y, -kLogvarClamp, kLogvarClamp);
      continue;
    }
    if (l.kind == LayerKind::Conv) {
      h = ad::add_bias_channels(ad::conv2d(h, w, l.stride, l.padding), p.b[i]);
    } else {
      if (h.shape().size() != 2) h = ad::reshape(h, {B, h.size() / B});
      h = ad::add_bias_rows(ad::linear(h, w), p.b[i]);
    }
    if (l.slope) h = ad::leaky_relu(h, *l.slope);
    bool next_is_linear = i + 1 < m.layers.size() && m.layers[i + 1].kind == LayerKind::Linear;
    if (next_is_linear && h.shape().size() != 2) h = ad::reshape(h, {B, h.size() / B});
  }
  if (!out.mu.valid() || !out.logvar.valid()) throw ContractError("encoder is missing a latent head");
  return out;
}

// Deterministic inference. Accepts [C,H,W] (returns [N]) or [B,C,H,W] (returns [B,N]).
inline GaussianLatent encode(const EncoderModel& m, const Tensor& x) {
  bool single = x.rank() == 3;
  Tape tape;
  Var xv = tape.constant(single ? x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}) : x);
  auto p = bind(tape, m, false);
  auto lv = forward(tape, m, p, xv);
  GaussianLatent g{lv.mu.value(), lv.logvar.value()};
  if (single) {
    g.mu = g.mu.reshaped({m.latent});
    g.logvar = g.logvar.reshaped({m.latent});
  }
  return g;
}

inline Tensor normal_sample(Rng& rng, const Shape& shape) {
  Tensor t(shape);
  for (double& v : t.vec()) v = rng.normal();
  return t;
}

// a = eps * sigma + mu with sigma = exp(logvar/2), or exp(logvar) when sigma_is_variance.
inline Tensor sample_with(const GaussianLatent& g, const Tensor& eps, bool sigma_is_variance = false) {
  require_same_shape(g.mu, g.logvar, "sample");
  require_same_shape(g.mu, eps, "sample");
  Tensor a(g.mu.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    double sigma = sigma_is_variance ? std::exp(g.logvar[i]) : std::exp(0.5 * g.logvar[i]);
    a[i] = eps[i] * sigma + g.mu[i];
  }
  return a;
}

inline Tensor sample(const GaussianLatent& g, Rng& rng, bool sigma_is_variance = false) {
  return sample_with(g, normal_sample(rng, g.mu.shape()), sigma_is_variance);
}

// ---- weight file ----

namespace detail {

inline nlohmann::ordered_json layer_json(const LayerSpec& l) {
  nlohmann::ordered_json j;
  j["kind"] = l.kind == LayerKind::Conv ? "conv" : "linear";
  j["role"] = l.role == LayerRole::Body ? "body" : (l.role == LayerRole::MuHead ? "mu" : "logvar");
  j["in"] = l.in;
  j["out"] = l.out;
  j["kernel"] = l.kernel;
  j["stride"] = l.stride;
  j["padding"] = l.padding;
  j["slope"] = l.slope ? nlohmann::ordered_json(*l.slope) : nlohmann::ordered_json(nullptr);
  j["standardized"] = l.standardized;
  j["gain"] = l.gain;
  return j;
}

inline LayerSpec layer_from_json(const nlohmann::json& j) {
  LayerSpec l;
  std::string kind = j.at("kind").get<std::string>();
  if (kind != "conv" && kind != "linear") throw CorruptFileError("weight file: unknown layer kind '" + kind + "'");
  l.kind = kind == "conv" ? LayerKind::Conv : LayerKind::Linear;
  std::string role = j.at("role").get<std::string>();
  if (role == "body")
    l.role = LayerRole::Body;
  else if (role == "mu")
    l.role = LayerRole::MuHead;
  else if (role == "logvar")
    l.role = LayerRole::LogvarHead;
  else
    throw CorruptFileError("weight file: unknown layer role '" + role + "'");
  l.in = j.at("in").get<std::size_t>();
  l.out = j.at("out").get<std::size_t>();
  l.kernel = j.at("kernel").get<std::size_t>();
  l.stride = j.at("stride").get<std::size_t>();
  l.padding = j.at("padding").get<std::size_t>();
  if (!j.at("slope").is_null()) l.slope = j.at("slope").get<double>();
  l.standardized = j.at("standardized").get<bool>();
  l.gain = j.at("gain").get<double>();
  if (l.in < 1 || l.out < 1 || !(l.gain > 0)) throw CorruptFileError("weight file: invalid layer spec");
  return l;
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string serialize_weights(const EncoderModel& m, const nlohmann::ordered_json& provenance = nullptr) {
  std::string payload;
  auto put = [&](const std::vector<LayerWeights>& ws) {
    for (const auto& lw : ws) {
      for (double v : lw.weight.vec()) detail::put_u64(payload, std::bit_cast<std::uint64_t>(v));
      for (double v : lw.bias.vec()) detail::put_u64(payload, std::bit_cast<std::uint64_t>(v));
    }
  };
  put(m.weights);
  bool has_snapshot = !m.snapshot.empty();
  if (has_snapshot) put(m.snapshot);

  nlohmann::ordered_json h;
  h["format"] = "DDE1";
  h["input"] = m.input;
  h["latent"] = m.latent;
  h["representative"] = nlohmann::ordered_json::array();
  for (const auto& r : m.representative) h["representative"].push_back({{"factor", r.factor}, {"dims", r.dims}});
  h["layers"] = nlohmann::ordered_json::array();
  for (const auto& l : m.layers) h["layers"].push_back(detail::layer_json(l));
  h["parameter_count"] = m.parameter_count();
  h["has_snapshot"] = has_snapshot;
  h["payload_bytes"] = payload.size();
  h["crc32"] = crc32(0L, reinterpret_cast<const Bytef*>(payload.data()), static_cast<uInt>(payload.size()));
  if (!provenance.is_null()) h["provenance"] = provenance;
  std::string header = h.dump();

  std::string out = "DDE1";
  detail::put_u64(out, header.size());
  out += header;
  out += payload;
  return out;
}

inline EncoderModel deserialize_weights(const std::string& bytes) {
  if (bytes.size() < 12 || bytes.compare(0, 4, "DDE1") != 0) throw CorruptFileError("weight file: bad magic");
  auto* base = reinterpret_cast<const unsigned char*>(bytes.data());
  std::uint64_t hlen = detail::get_u64(base + 4);
  if (hlen > bytes.size() - 12) throw CorruptFileError("weight file: truncated header");
  nlohmann::json h;
  EncoderModel m;
  std::size_t payload_bytes = 0;
  std::uint64_t crc = 0;
  bool has_snapshot = false;
  try {
    h = nlohmann::json::parse(bytes.substr(12, hlen));
    m.input = h.at("input").get<std::array<std::size_t, 3>>();
    m.latent = h.at("latent").get<std::size_t>();
    for (const auto& r : h.at("representative"))
      m.representative.push_back({r.at("factor").get<std::string>(), r.at("dims").get<std::vector<std::size_t>>()});
    for (const auto& l : h.at("layers")) m.layers.push_back(detail::layer_from_json(l));
    payload_bytes = h.at("payload_bytes").get<std::size_t>();
    crc = h.at("crc32").get<std::uint64_t>();
    has_snapshot = h.at("has_snapshot").get<bool>();
    if (h.at("parameter_count").get<std::size_t>() != m.parameter_count())
      throw CorruptFileError("weight file: parameter count disagrees with layer specs");
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFileError(std::string("weight file: malformed header: ") + e.what());
  }
  std::size_t expected = m.parameter_count() * 8 * (has_snapshot ? 2 : 1);
  if (payload_bytes != expected) throw CorruptFileError("weight file: payload size disagrees with layer specs");
  if (bytes.size() - 12 - hlen != expected) throw CorruptFileError("weight file: truncated payload");
  const unsigned char* p = base + 12 + hlen;
  if (crc32(0L, p, static_cast<uInt>(expected)) != crc) throw CorruptFileError("weight file: checksum mismatch");
  try {
    validate_representative(m.representative, m.latent);
  } catch (const ConfigError& e) {
    throw CorruptFileError(std::string("weight file: ") + e.what());
  }
  auto take = [&](std::vector<LayerWeights>& ws) {
    for (const auto& l : m.layers) {
      LayerWeights lw{Tensor(l.weight_shape()), Tensor({l.out})};
      for (double& v : lw.weight.vec()) {
        v = std::bit_cast<double>(detail::get_u64(p));
        p += 8;
      }
      for (double& v : lw.bias.vec()) {
        v = std::bit_cast<double>(detail::get_u64(p));
        p += 8;
      }
      ws.push_back(std::move(lw));
    }
  };
  take(m.weights);
  if (has_snapshot) take(m.snapshot);
  return m;
}

inline void save_weights(const EncoderModel& m, const std::filesystem::path& path,
                         const nlohmann::ordered_json& provenance = nullptr) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  std::string bytes = serialize_weights(m, provenance);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("write failed: " + path.string());
}

inline EncoderModel load_weights(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize_weights(bytes);
}

}  // namespace dde
