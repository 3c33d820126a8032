#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dde/rng.hpp"
#include "dde/tensor.hpp"
#include "json.hpp"

namespace dde {

enum class FactorRole { OverlayIntensity, BackgroundPattern };
enum class Split { Train, Calibration, Test };

inline std::string to_string(FactorRole r) {
  return r == FactorRole::OverlayIntensity ? "overlay-intensity" : "background-pattern";
}
inline FactorRole parse_role(const std::string& s) {
  if (s == "overlay-intensity") return FactorRole::OverlayIntensity;
  if (s == "background-pattern") return FactorRole::BackgroundPattern;
  throw ConfigError("factor role '" + s + "' is not one of overlay-intensity, background-pattern");
}
inline std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Calibration: return "calibration";
    default: return "test";
  }
}
inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "calibration") return Split::Calibration;
  if (s == "test") return Split::Test;
  throw ParseError("split '" + s + "' is not one of train, calibration, test");
}

struct FactorSpec {
  std::string name;
  std::vector<std::string> observed_values;
  std::vector<std::string> test_only;
  FactorRole role = FactorRole::OverlayIntensity;

  bool is_test_only(std::size_t v) const {
    return std::find(test_only.begin(), test_only.end(), observed_values.at(v)) != test_only.end();
  }
  std::vector<std::size_t> train_values() const {
    std::vector<std::size_t> out;
    for (std::size_t v = 0; v < observed_values.size(); ++v)
      if (!is_test_only(v)) out.push_back(v);
    return out;
  }
  std::size_t index_of(const std::string& value) const {
    auto it = std::find(observed_values.begin(), observed_values.end(), value);
    if (it == observed_values.end()) throw FactorError("value '" + value + "' not observed for factor " + name);
    return static_cast<std::size_t>(it - observed_values.begin());
  }
  bool operator==(const FactorSpec&) const = default;
};

struct SampleRecord {
  std::vector<std::size_t> values;  // index into observed_values, one per factor
  Split split = Split::Train;
  std::size_t partition = 0;
  bool operator==(const SampleRecord&) const = default;
};

struct Partition {
  std::size_t id = 0;
  std::vector<std::size_t> assignment;
  std::vector<std::size_t> samples;
  bool operator==(const Partition&) const = default;
};

struct PairSet {
  std::size_t factor = 0;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  bool operator==(const PairSet&) const = default;
};

struct GenerateConfig {
  std::vector<FactorSpec> factors;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t train_per_partition = 200;
  std::size_t calibration_per_partition = 50;
  std::size_t test_per_combination = 40;
  std::size_t pairs_per_factor = 1500;
  double noise_sigma = 0.03;
  std::uint64_t seed = 1;
};

inline std::vector<FactorSpec> default_factors() {
  return {
      {"haze", {"0.0", "0.25", "0.5", "0.75"}, {"0.0", "0.75"}, FactorRole::OverlayIntensity},
      {"backdrop", {"stripes", "checker", "gradient"}, {"gradient"}, FactorRole::BackgroundPattern},
  };
}

inline void validate_factors(const std::vector<FactorSpec>& factors) {
  if (factors.empty()) throw ConfigError("factors: at least one factor required");
  std::set<std::string> names;
  std::size_t patterns = 0;
  for (const auto& f : factors) {
    if (f.name.empty()) throw ConfigError("factors.name: empty factor name");
    if (!names.insert(f.name).second) throw ConfigError("factors.name: duplicate factor '" + f.name + "'");
    if (f.observed_values.size() < 2)
      throw ConfigError("factors." + f.name + ".observed_values: at least 2 values required");
    std::set<std::string> seen(f.observed_values.begin(), f.observed_values.end());
    if (seen.size() != f.observed_values.size())
      throw ConfigError("factors." + f.name + ".observed_values: duplicate value");
    for (const auto& t : f.test_only)
      if (!seen.count(t)) throw ConfigError("factors." + f.name + ".test_only: '" + t + "' is not an observed value");
    if (f.train_values().size() < 2)
      throw ConfigError("factors." + f.name + ": fewer than 2 train values");
    if (f.role == FactorRole::BackgroundPattern) ++patterns;
    for (const auto& v : f.observed_values) {
      if (f.role == FactorRole::OverlayIntensity) {
        std::size_t pos = 0;
        double h = 0;
        try {
          h = std::stod(v, &pos);
        } catch (const std::exception&) {
          pos = 0;
        }
        if (pos != v.size() || !(h >= 0.0 && h <= 1.0))
          throw ConfigError("factors." + f.name + ".observed_values: overlay value '" + v + "' not a number in [0,1]");
      } else if (v != "stripes" && v != "checker" && v != "gradient" && v != "hstripes" && v != "flat") {
        throw ConfigError("factors." + f.name + ".observed_values: unknown pattern '" + v + "'");
      }
    }
  }
  if (patterns > 1) throw ConfigError("factors: at most one background-pattern factor");
}

namespace detail {

inline double pattern_level(const std::string& p, std::size_t y, std::size_t x, std::size_t W) {
  if (p == "stripes") return ((x / 4) % 2) ? 0.8 : 0.2;
  if (p == "hstripes") return ((y / 4) % 2) ? 0.8 : 0.2;
  if (p == "checker") return (((x / 4) + (y / 4)) % 2) ? 0.8 : 0.2;
  if (p == "gradient") return 0.2 + 0.6 * static_cast<double>(x) / static_cast<double>(W > 1 ? W - 1 : 1);
  return 0.5;
}

}  // namespace detail

// Renders one HWC uint8 image. Noise is drawn from `rng` in raster order.
inline std::vector<std::uint8_t> render(const std::vector<FactorSpec>& factors, const std::vector<std::size_t>& values,
                                        std::size_t H, std::size_t W, double noise_sigma, Rng& rng) {
  static constexpr double tint[3] = {0.9, 1.0, 1.1};
  std::string pattern = "flat";
  std::vector<double> overlays;
  for (std::size_t i = 0; i < factors.size(); ++i) {
    const std::string& v = factors[i].observed_values.at(values.at(i));
    if (factors[i].role == FactorRole::BackgroundPattern)
      pattern = v;
    else
      overlays.push_back(std::stod(v));
  }
  std::vector<std::uint8_t> img(H * W * 3);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      double g = detail::pattern_level(pattern, y, x, W);
      for (std::size_t c = 0; c < 3; ++c) {
        double p = g * tint[c];
        for (double h : overlays) p = (1.0 - h) * p + h;
        if (noise_sigma > 0) p += noise_sigma * rng.normal();
        p = std::clamp(p, 0.0, 1.0);
        img[(y * W + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(p * 255.0));
      }
    }
  return img;
}

class FactorDataset {
 public:
  std::vector<FactorSpec> factors;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // per sample H*W*3, interleaved RGB
  std::vector<SampleRecord> samples;
  std::vector<std::vector<std::size_t>> partition_table;  // id -> factor assignment
  std::vector<PairSet> pair_sets;

  static constexpr std::size_t channels = 3;
  std::size_t size() const { return samples.size(); }
  std::size_t image_bytes() const { return height * width * channels; }

  const std::uint8_t* image_data(std::size_t i) const { return pixels.data() + i * image_bytes(); }

  // One image as [3,H,W] in [0,1].
  Tensor image(std::size_t i) const {
    Tensor t({channels, height, width});
    write_chw(i, t.raw());
    return t;
  }

  Tensor images(const std::vector<std::size_t>& idx) const {
    Tensor t({idx.size(), channels, height, width});
    for (std::size_t b = 0; b < idx.size(); ++b) write_chw(idx[b], t.raw() + b * image_bytes());
    return t;
  }

  Tensor images() const {
    std::vector<std::size_t> all(size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return images(all);
  }

  std::vector<std::size_t> split_indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].split == s) out.push_back(i);
    return out;
  }

  std::size_t factor_index(const std::string& name) const {
    for (std::size_t i = 0; i < factors.size(); ++i)
      if (factors[i].name == name) return i;
    throw FactorError("unknown factor '" + name + "'");
  }

  const PairSet& pairs_for(std::size_t f) const {
    for (const auto& p : pair_sets)
      if (p.factor == f) return p;
    throw FactorError("no pair set for factor " + factors.at(f).name);
  }

  bool all_train_values(const SampleRecord& s) const {
    for (std::size_t i = 0; i < factors.size(); ++i)
      if (factors[i].is_test_only(s.values[i])) return false;
    return true;
  }

  bool operator==(const FactorDataset&) const = default;

 private:
  void write_chw(std::size_t i, double* dst) const {
    const std::uint8_t* src = image_data(i);
    std::size_t P = height * width;
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t c = 0; c < channels; ++c) dst[c * P + p] = src[p * channels + c] / 255.0;
  }
};

// Groups samples of one split by the values of the listed factors (all factors when empty).
inline std::vector<Partition> partition(const FactorDataset& ds, std::vector<std::size_t> factor_idx = {},
                                        Split split = Split::Train) {
  if (factor_idx.empty())
    for (std::size_t i = 0; i < ds.factors.size(); ++i) factor_idx.push_back(i);
  std::map<std::vector<std::size_t>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    if (s.values.size() != ds.factors.size())
      throw FactorError("sample " + std::to_string(i) + " lacks a full factor assignment");
    if (s.split != split) continue;
    std::vector<std::size_t> key;
    for (auto f : factor_idx) key.push_back(s.values.at(f));
    groups[key].push_back(i);
  }
  std::vector<Partition> out;
  for (auto& [key, idx] : groups) out.push_back(Partition{out.size(), key, idx});
  return out;
}

// Samples `count` pairs uniformly over ordered partition pairs that differ only in factor f.
// Partition assignments must cover all factors in dataset order.
inline PairSet build_pairs(const std::vector<Partition>& parts, std::size_t f, std::size_t count, std::uint64_t seed) {
  std::vector<std::pair<std::size_t, std::size_t>> qualifying;
  for (std::size_t a = 0; a < parts.size(); ++a)
    for (std::size_t b = 0; b < parts.size(); ++b) {
      if (a == b || parts[a].samples.empty() || parts[b].samples.empty()) continue;
      const auto& x = parts[a].assignment;
      const auto& y = parts[b].assignment;
      if (f >= x.size() || x.size() != y.size()) continue;
      bool ok = x[f] != y[f];
      for (std::size_t i = 0; i < x.size() && ok; ++i)
        if (i != f && x[i] != y[i]) ok = false;
      if (ok) qualifying.emplace_back(a, b);
    }
  if (qualifying.empty()) throw FactorError("no partition pair differs only in factor " + std::to_string(f));
  Rng rng = Rng::derive(seed, 0x7061697273ULL + f);
  PairSet ps{f, {}};
  ps.pairs.reserve(count);
  for (std::size_t c = 0; c < count; ++c) {
    const auto& [a, b] = qualifying[rng.below(qualifying.size())];
    std::size_t i = parts[a].samples[rng.below(parts[a].samples.size())];
    std::size_t j = parts[b].samples[rng.below(parts[b].samples.size())];
    ps.pairs.emplace_back(i, j);
  }
  return ps;
}

inline FactorDataset generate(const GenerateConfig& cfg) {
  validate_factors(cfg.factors);
  if (cfg.height < 16 || cfg.width < 16) throw ConfigError("data.image_size: must be at least 16x16");
  if (cfg.train_per_partition < 1 || cfg.calibration_per_partition < 1 || cfg.test_per_combination < 1)
    throw ConfigError("data counts: every count must be at least 1");

  FactorDataset ds;
  ds.factors = cfg.factors;
  ds.height = cfg.height;
  ds.width = cfg.width;

  std::vector<std::vector<std::size_t>> combos{{}};
  for (const auto& f : cfg.factors) {
    std::vector<std::vector<std::size_t>> next;
    for (const auto& c : combos)
      for (std::size_t v = 0; v < f.observed_values.size(); ++v) {
        auto e = c;
        e.push_back(v);
        next.push_back(std::move(e));
      }
    combos = std::move(next);
  }
  auto train_combo = [&](const std::vector<std::size_t>& c) {
    for (std::size_t i = 0; i < c.size(); ++i)
      if (cfg.factors[i].is_test_only(c[i])) return false;
    return true;
  };
  // Train-value combinations take the first partition ids.
  std::stable_partition(combos.begin(), combos.end(), train_combo);
  ds.partition_table = combos;

  auto emit = [&](std::size_t pid, Split split) {
    std::size_t idx = ds.samples.size();
    Rng rng = Rng::derive(cfg.seed, idx);
    auto img = render(cfg.factors, combos[pid], cfg.height, cfg.width, cfg.noise_sigma, rng);
    ds.pixels.insert(ds.pixels.end(), img.begin(), img.end());
    ds.samples.push_back(SampleRecord{combos[pid], split, pid});
  };
  for (std::size_t pid = 0; pid < combos.size(); ++pid)
    if (train_combo(combos[pid]))
      for (std::size_t j = 0; j < cfg.train_per_partition; ++j) emit(pid, Split::Train);
  for (std::size_t pid = 0; pid < combos.size(); ++pid)
    if (train_combo(combos[pid]))
      for (std::size_t j = 0; j < cfg.calibration_per_partition; ++j) emit(pid, Split::Calibration);
  for (std::size_t pid = 0; pid < combos.size(); ++pid)
    for (std::size_t j = 0; j < cfg.test_per_combination; ++j) emit(pid, Split::Test);

  auto parts = partition(ds);
  for (std::size_t f = 0; f < ds.factors.size(); ++f)
    ds.pair_sets.push_back(build_pairs(parts, f, cfg.pairs_per_factor, cfg.seed));
  return ds;
}

struct ScoringSet {
  std::vector<std::size_t> indices;
  std::vector<bool> is_ood;
};

// Test samples for factor f: ID samples carry only train values; OOD samples carry a
// test-only value of f and train values elsewhere. Classes are truncated to equal size.
inline ScoringSet scoring_set(const FactorDataset& ds, std::size_t f) {
  std::vector<std::size_t> id, ood;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    if (s.split != Split::Test) continue;
    if (ds.all_train_values(s)) {
      id.push_back(i);
      continue;
    }
    bool others_train = true;
    for (std::size_t g = 0; g < ds.factors.size(); ++g)
      if (g != f && ds.factors[g].is_test_only(s.values[g])) others_train = false;
    if (others_train && ds.factors[f].is_test_only(s.values[f])) ood.push_back(i);
  }
  std::size_t n = std::min(id.size(), ood.size());
  // Spread the kept ID samples evenly across the pool so every ID partition is represented.
  ScoringSet out;
  for (std::size_t k = 0; k < n; ++k) {
    out.indices.push_back(id[k * id.size() / n]);
    out.is_ood.push_back(false);
  }
  for (std::size_t k = 0; k < n; ++k) {
    out.indices.push_back(ood[k]);
    out.is_ood.push_back(true);
  }
  return out;
}

// ---- on-disk format ----

inline void write_ppm(const std::filesystem::path& path, const std::uint8_t* rgb, std::size_t H, std::size_t W) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os << "P6\n" << W << ' ' << H << "\n255\n";
  os.write(reinterpret_cast<const char*>(rgb), static_cast<std::streamsize>(H * W * 3));
  if (!os) throw Error("write failed: " + path.string());
}

inline std::vector<std::uint8_t> read_ppm(const std::filesystem::path& path, std::size_t& H, std::size_t& W) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open image " + path.string());
  auto token = [&]() {
    std::string t;
    int c;
    while ((c = is.get()) != EOF) {
      if (c == '#') {
        while ((c = is.get()) != EOF && c != '\n') {
        }
        continue;
      }
      if (std::isspace(c)) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(static_cast<char>(c));
    }
    return t;
  };
  if (token() != "P6") throw ParseError(path.string() + ": not a binary PPM (P6)");
  try {
    W = std::stoul(token());
    H = std::stoul(token());
    if (std::stoul(token()) != 255) throw ParseError(path.string() + ": maxval must be 255");
  } catch (const std::invalid_argument&) {
    throw ParseError(path.string() + ": malformed PPM header");
  }
  std::vector<std::uint8_t> buf(H * W * 3);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(is.gcount()) != buf.size()) throw ParseError(path.string() + ": truncated pixel data");
  if (is.peek() != EOF) throw ParseError(path.string() + ": trailing bytes after pixel data");
  return buf;
}

inline std::string sample_file(std::size_t i) {
  std::ostringstream os;
  os << "images/" << std::setw(6) << std::setfill('0') << i << ".ppm";
  return os.str();
}

inline nlohmann::ordered_json manifest_json(const FactorDataset& ds) {
  using nlohmann::ordered_json;
  ordered_json m;
  m["format_version"] = 1;
  m["height"] = ds.height;
  m["width"] = ds.width;
  m["channels"] = FactorDataset::channels;
  m["factors"] = ordered_json::array();
  for (const auto& f : ds.factors)
    m["factors"].push_back(
        {{"name", f.name}, {"role", to_string(f.role)}, {"observed_values", f.observed_values}, {"test_only", f.test_only}});
  m["partitions"] = ordered_json::array();
  for (std::size_t p = 0; p < ds.partition_table.size(); ++p) {
    ordered_json a;
    for (std::size_t i = 0; i < ds.factors.size(); ++i)
      a[ds.factors[i].name] = ds.factors[i].observed_values.at(ds.partition_table[p][i]);
    m["partitions"].push_back({{"id", p}, {"assignment", a}});
  }
  m["samples"] = ordered_json::array();
  for (std::size_t s = 0; s < ds.samples.size(); ++s) {
    ordered_json fv;
    for (std::size_t i = 0; i < ds.factors.size(); ++i)
      fv[ds.factors[i].name] = ds.factors[i].observed_values.at(ds.samples[s].values[i]);
    m["samples"].push_back({{"file", sample_file(s)},
                            {"factors", fv},
                            {"split", to_string(ds.samples[s].split)},
                            {"partition", ds.samples[s].partition}});
  }
  m["pairs"] = ordered_json::array();
  for (const auto& ps : ds.pair_sets) {
    ordered_json pl = ordered_json::array();
    for (auto [a, b] : ps.pairs) pl.push_back({a, b});
    m["pairs"].push_back({{"factor", ds.factors.at(ps.factor).name}, {"pairs", pl}});
  }
  return m;
}

inline void save(const FactorDataset& ds, const std::filesystem::path& dir,
                 const nlohmann::ordered_json& provenance = nullptr) {
  std::filesystem::create_directories(dir / "images");
  for (std::size_t i = 0; i < ds.size(); ++i) write_ppm(dir / sample_file(i), ds.image_data(i), ds.height, ds.width);
  std::ofstream os(dir / "manifest.json");
  if (!os) throw Error("cannot write " + (dir / "manifest.json").string());
  auto m = manifest_json(ds);
  if (!provenance.is_null()) m["provenance"] = provenance;
  os << m.dump(1) << '\n';
}

namespace detail {

inline const nlohmann::json& field(const nlohmann::json& j, const char* key, const std::string& ctx) {
  if (!j.is_object()) throw ParseError("manifest: " + ctx + " is not an object");
  auto it = j.find(key);
  if (it == j.end()) throw ParseError("manifest: " + ctx + ": missing field '" + key + "'");
  return *it;
}

template <class T>
T get_as(const nlohmann::json& j, const char* key, const std::string& ctx) {
  const auto& v = field(j, key, ctx);
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ParseError("manifest: " + ctx + ": field '" + key + "' has the wrong type");
  }
}

inline std::size_t line_of(const std::string& text, std::size_t byte) {
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(std::min(byte, text.size())), '\n'));
}

}  // namespace detail

inline FactorDataset load(const std::filesystem::path& dir) {
  using detail::field;
  using detail::get_as;
  std::ifstream is(dir / "manifest.json");
  if (!is) throw ParseError("cannot open " + (dir / "manifest.json").string());
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("manifest: syntax error at line " + std::to_string(detail::line_of(text, e.byte)) + ": " + e.what());
  }

  FactorDataset ds;
  ds.height = get_as<std::size_t>(m, "height", "root");
  ds.width = get_as<std::size_t>(m, "width", "root");
  if (m.contains("channels") && m["channels"] != 3) throw ParseError("manifest: root: field 'channels' must be 3");
  const auto& fs = field(m, "factors", "root");
  if (!fs.is_array()) throw ParseError("manifest: root: field 'factors' must be an array");
  for (std::size_t i = 0; i < fs.size(); ++i) {
    std::string ctx = "factors[" + std::to_string(i) + "]";
    FactorSpec f;
    f.name = get_as<std::string>(fs[i], "name", ctx);
    try {
      f.role = parse_role(get_as<std::string>(fs[i], "role", ctx));
    } catch (const ConfigError& e) {
      throw ParseError("manifest: " + ctx + ": field 'role': " + e.what());
    }
    f.observed_values = get_as<std::vector<std::string>>(fs[i], "observed_values", ctx);
    if (fs[i].contains("test_only")) f.test_only = get_as<std::vector<std::string>>(fs[i], "test_only", ctx);
    ds.factors.push_back(std::move(f));
  }
  try {
    validate_factors(ds.factors);
  } catch (const ConfigError& e) {
    throw ParseError(std::string("manifest: ") + e.what());
  }

  auto read_assignment = [&](const nlohmann::json& a, const std::string& ctx) {
    if (!a.is_object()) throw ParseError("manifest: " + ctx + " is not an object");
    std::vector<std::size_t> vals;
    for (const auto& f : ds.factors) {
      auto it = a.find(f.name);
      if (it == a.end()) throw ParseError("manifest: " + ctx + ": missing field '" + f.name + "'");
      if (!it->is_string()) throw ParseError("manifest: " + ctx + ": field '" + f.name + "' must be a string");
      try {
        vals.push_back(f.index_of(it->get<std::string>()));
      } catch (const FactorError& e) {
        throw ParseError("manifest: " + ctx + ": " + e.what());
      }
    }
    if (a.size() != ds.factors.size()) throw ParseError("manifest: " + ctx + ": unknown factor name");
    return vals;
  };

  if (m.contains("partitions")) {
    const auto& ps = m["partitions"];
    for (std::size_t p = 0; p < ps.size(); ++p) {
      std::string ctx = "partitions[" + std::to_string(p) + "]";
      if (get_as<std::size_t>(ps[p], "id", ctx) != p) throw ParseError("manifest: " + ctx + ": ids must be 0..K-1 in order");
      ds.partition_table.push_back(read_assignment(field(ps[p], "assignment", ctx), ctx + ".assignment"));
    }
  }

  const auto& ss = field(m, "samples", "root");
  if (!ss.is_array()) throw ParseError("manifest: root: field 'samples' must be an array");
  ds.pixels.reserve(ss.size() * ds.image_bytes());
  for (std::size_t i = 0; i < ss.size(); ++i) {
    std::string ctx = "samples[" + std::to_string(i) + "]";
    SampleRecord r;
    std::string file = get_as<std::string>(ss[i], "file", ctx);
    r.values = read_assignment(field(ss[i], "factors", ctx), ctx + ".factors");
    try {
      r.split = parse_split(get_as<std::string>(ss[i], "split", ctx));
    } catch (const ParseError& e) {
      throw ParseError("manifest: " + ctx + ": field 'split': " + e.what());
    }
    if (ss[i].contains("partition")) {
      r.partition = get_as<std::size_t>(ss[i], "partition", ctx);
      if (r.partition >= ds.partition_table.size()) throw ParseError("manifest: " + ctx + ": partition id out of range");
      if (ds.partition_table[r.partition] != r.values)
        throw ParseError("manifest: " + ctx + ": factor values disagree with partition " + std::to_string(r.partition));
    } else {
      auto it = std::find(ds.partition_table.begin(), ds.partition_table.end(), r.values);
      r.partition = static_cast<std::size_t>(it - ds.partition_table.begin());
      if (it == ds.partition_table.end()) ds.partition_table.push_back(r.values);
    }
    if (r.split != Split::Test)
      for (std::size_t f = 0; f < ds.factors.size(); ++f)
        if (ds.factors[f].is_test_only(r.values[f]))
          throw ParseError("manifest: " + ctx + ": test-only value of '" + ds.factors[f].name + "' outside the test split");
    std::size_t H = 0, W = 0;
    auto px = read_ppm(dir / file, H, W);
    if (H != ds.height || W != ds.width) throw ParseError("manifest: " + ctx + ": image size does not match header");
    ds.pixels.insert(ds.pixels.end(), px.begin(), px.end());
    ds.samples.push_back(std::move(r));
  }

  if (m.contains("pairs")) {
    const auto& pl = m["pairs"];
    for (std::size_t k = 0; k < pl.size(); ++k) {
      std::string ctx = "pairs[" + std::to_string(k) + "]";
      PairSet ps;
      try {
        ps.factor = ds.factor_index(get_as<std::string>(pl[k], "factor", ctx));
      } catch (const FactorError& e) {
        throw ParseError("manifest: " + ctx + ": " + e.what());
      }
      auto raw = get_as<std::vector<std::vector<std::size_t>>>(pl[k], "pairs", ctx);
      for (const auto& p : raw) {
        if (p.size() != 2 || p[0] >= ds.size() || p[1] >= ds.size())
          throw ParseError("manifest: " + ctx + ": malformed pair");
        ps.pairs.emplace_back(p[0], p[1]);
      }
      ds.pair_sets.push_back(std::move(ps));
    }
  }
  return ds;
}

// Table of partitions with per-split sample counts.
inline std::string partition_summary(const FactorDataset& ds) {
  std::ostringstream os;
  os << std::left << std::setw(6) << "id";
  for (const auto& f : ds.factors) os << std::setw(12) << f.name;
  os << std::setw(8) << "train" << std::setw(8) << "calib" << std::setw(8) << "test" << "role\n";
  for (std::size_t p = 0; p < ds.partition_table.size(); ++p) {
    std::size_t n[3] = {0, 0, 0};
    for (const auto& s : ds.samples)
      if (s.partition == p) ++n[static_cast<int>(s.split)];
    os << std::setw(6) << ("P" + std::to_string(p + 1));
    bool held_out = false;
    for (std::size_t i = 0; i < ds.factors.size(); ++i) {
      os << std::setw(12) << ds.factors[i].observed_values[ds.partition_table[p][i]];
      held_out = held_out || ds.factors[i].is_test_only(ds.partition_table[p][i]);
    }
    os << std::setw(8) << n[0] << std::setw(8) << n[1] << std::setw(8) << n[2] << (held_out ? "held-out" : "in-distribution")
       << '\n';
  }
  return os.str();
}

}  // namespace dde
