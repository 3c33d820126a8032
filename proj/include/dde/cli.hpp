#pragma once

#include <zlib.h>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dde/cert.hpp"
#include "dde/config.hpp"
#include "dde/evaluate.hpp"
#include "dde/trainer.hpp"
#include "json.hpp"

namespace dde::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2, kNumeric = 3 };

namespace detail {

namespace fs = std::filesystem;

inline void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw Error("cannot write " + p.string());
  os << text;
  if (!os) throw Error("write failed: " + p.string());
}

inline std::string hex32(unsigned long v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08lx", v);
  return buf;
}

// Appends config_hash, seed and tool_version columns to every CSV row.
inline std::string stamp_csv(const std::string& csv, const RunConfig& c) {
  std::istringstream is(csv);
  std::ostringstream os;
  std::string line;
  bool header = true;
  std::string tail = "," + config_hash(c) + "," + std::to_string(c.seed) + "," + kToolVersion;
  while (std::getline(is, line)) {
    os << line << (header ? std::string(",config_hash,seed,tool_version") : tail) << "\r\n";
    header = false;
  }
  return os.str();
}

inline std::uint64_t student_seed(std::uint64_t seed) { return Rng::derive(seed, 0x57d3e47ULL).next(); }

inline std::string dataset_checksum(const FactorDataset& ds) {
  std::string m = manifest_json(ds).dump();
  unsigned long c = crc32(0L, reinterpret_cast<const Bytef*>(m.data()), static_cast<uInt>(m.size()));
  c = crc32(c, ds.pixels.data(), static_cast<uInt>(ds.pixels.size()));
  return hex32(c);
}

inline std::string file_checksum(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::string b((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return hex32(crc32(0L, reinterpret_cast<const Bytef*>(b.data()), static_cast<uInt>(b.size())));
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
};

inline void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "run config JSON")->check(CLI::ExistingFile);
  sub->add_option("--seed", c.seed, "override the config seed");
}

inline RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  cfg.data.seed = cfg.seed;
  return cfg;
}

inline std::string fixed(double v, int p = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(p) << v;
  return os.str();
}

inline nlohmann::ordered_json model_info(const EncoderModel& m, const fs::path& file) {
  nlohmann::ordered_json j;
  j["file"] = file.filename().string();
  j["parameter_count"] = m.parameter_count();
  j["parameter_bytes"] = m.parameter_bytes();
  j["file_bytes"] = fs::file_size(file);
  std::vector<std::size_t> widths;
  for (const auto& l : m.layers)
    if (l.role == LayerRole::Body) widths.push_back(l.out);
  j["widths"] = widths;
  return j;
}

inline int gen_data(const Common& com, const std::string& out, std::ostream& os) {
  RunConfig cfg = resolve(com);
  FactorDataset ds = generate(cfg.data);
  save(ds, out, provenance(cfg));
  os << partition_summary(ds);
  os << "samples: " << ds.size() << "  train: " << ds.split_indices(Split::Train).size()
     << "  calibration: " << ds.split_indices(Split::Calibration).size()
     << "  test: " << ds.split_indices(Split::Test).size() << '\n';
  for (const auto& p : ds.pair_sets) os << "pairs[" << ds.factors[p.factor].name << "]: " << p.pairs.size() << '\n';
  os << "checksum: " << dataset_checksum(ds) << '\n';
  return kOk;
}

inline int train_teacher_cmd(const Common& com, const std::string& data, const std::string& out, std::string trace,
                             std::ostream& os) {
  RunConfig cfg = resolve(com);
  FactorDataset ds = load(data);
  std::vector<TeacherEpoch> tr;
  EncoderModel m = train_teacher(ds, cfg.teacher, cfg.seed, &tr);
  save_weights(m, out, provenance(cfg));
  if (trace.empty()) trace = out + ".trace.csv";
  std::ostringstream csv;
  write_teacher_trace(csv, tr);
  write_text(trace, stamp_csv(csv.str(), cfg));
  os << "teacher: " << m.parameter_count() << " parameters, " << tr.size() << " epochs";
  if (!tr.empty()) os << ", final loss " << fixed(tr.back().loss);
  os << '\n';
  auto train = ds.split_indices(Split::Train);
  for (std::size_t f = 0; f < ds.factors.size(); ++f)
    os << "disentanglement ratio[" << ds.factors[f].name << "]: " << fixed(disentanglement_ratio(m, ds, f, ds.pairs_for(f).pairs), 2)
       << '\n';
  os << "weights: " << out << "\ntrace: " << trace << '\n';
  return kOk;
}

inline int distill_cmd(const Common& com, const std::string& teacher_path, const std::string& data, const std::string& out,
                       std::string trace, std::optional<double> ratio, std::ostream& os) {
  RunConfig cfg = resolve(com);
  if (ratio) {
    if (!(*ratio >= 0.1 - 1e-12 && *ratio <= 0.9 + 1e-12)) throw ConfigError("--ratio: must lie in [0.1, 0.9]");
    cfg.distill.compression = *ratio;
  }
  EncoderModel teacher = load_weights(teacher_path);
  FactorDataset ds = load(data);
  EncoderModel init = compress(teacher, cfg.distill.compression, student_seed(cfg.seed), cfg.teacher.arch.init_norm_bound);
  DistillResult res = distill(teacher, init, ds, cfg.distill, cfg.seed);
  save_weights(res.student, out, provenance(cfg));
  if (trace.empty()) trace = out + ".trace.csv";
  std::ostringstream csv;
  write_dual_trace(csv, res.trace);
  write_text(trace, stamp_csv(csv.str(), cfg));
  os << "student: " << res.student.parameter_count() << " parameters (teacher " << teacher.parameter_count() << "), r = "
     << cfg.distill.compression << ", " << res.trace.epochs.size() << " epochs\n";
  if (!res.trace.epochs.empty()) {
    const auto& e = res.trace.epochs.back();
    os << "L_D " << fixed(e.loss_d, 6) << "  L_D raw " << fixed(e.loss_d_raw, 6) << '\n';
    for (std::size_t c = 0; c < res.trace.constraints.size(); ++c)
      os << "  " << std::left << std::setw(14) << res.trace.constraints[c] << " hinge " << std::setw(12) << fixed(e.hinge[c], 6)
         << " lambda " << fixed(e.lambda[c], 4) << '\n';
  }
  os << "weights: " << out << "\ntrace: " << trace << '\n';
  return kOk;
}

inline int certify_cmd(const Common& com, const std::string& model_path, const std::string& data, const std::string& constants,
                       std::string out, std::string csv_path, std::ostream& os) {
  RunConfig cfg = resolve(com);
  EncoderModel m = load_weights(model_path);
  FactorDataset ds = load(data);
  CertConstants k = constants_from_json(constants.empty() ? cfg.cert.constants : read_json_file(constants, "constants"));
  CertReport rep = certify(m, ds, k);
  nlohmann::ordered_json j;
  j["provenance"] = provenance(cfg);
  j["model"] = model_info(m, model_path);
  for (auto it = rep.json.begin(); it != rep.json.end(); ++it) j[it.key()] = it.value();
  if (out.empty()) out = model_path + ".cert.json";
  if (csv_path.empty()) csv_path = model_path + ".zeta.csv";
  write_text(out, j.dump(2) + "\n");
  std::ostringstream csv;
  write_zeta_csv(csv, rep, cfg.cert.m_grid);
  write_text(csv_path, stamp_csv(csv.str(), cfg));
  const auto& r = rep.json["resolved"];
  os << "chi " << r["chi"]["value"].get<double>() << "  d " << r["d"]["value"].get<double>() << "  L " << r["L"]["value"].get<std::size_t>()
     << "  1+nu " << r["one_plus_nu"]["value"].get<double>() << "  delta_op " << r["delta_op"]["value"].get<double>() << '\n';
  for (const auto& b : rep.bounds)
    os << "zeta_" << to_string(b.kind) << " = " << b.zeta << "  (kappa_theta " << rep.json["kappa_theta"][to_string(b.kind)].get<double>()
       << ", m " << b.m << ")\n";
  os << "report: " << out << "\ncsv: " << csv_path << '\n';
  return kOk;
}

inline nlohmann::ordered_json factor_json(const FactorEvaluation& e) {
  return {{"factor", e.factor}, {"auroc", e.auroc}, {"k", e.k}, {"n_id", e.n_id}, {"n_ood", e.n_ood}};
}

inline int evaluate_cmd(const Common& com, const std::string& teacher_path, const std::string& student_path,
                        const std::string& data, std::string out, std::optional<std::size_t> runs, std::ostream& os) {
  RunConfig cfg = resolve(com);
  if (runs) cfg.bench.runs = *runs;
  FactorDataset ds = load(data);
  EncoderModel t = load_weights(teacher_path), s = load_weights(student_path);
  auto te = evaluate_model(t, ds, cfg.ood, cfg.seed), se = evaluate_model(s, ds, cfg.ood, cfg.seed);
  LatencyStats tl = measure_latency(t, ds, cfg.bench.runs, cfg.bench.warmup);
  LatencyStats sl = measure_latency(s, ds, cfg.bench.runs, cfg.bench.warmup);

  nlohmann::ordered_json j;
  j["provenance"] = provenance(cfg);
  j["models"] = {{"teacher", model_info(t, teacher_path)}, {"student", model_info(s, student_path)}};
  nlohmann::ordered_json table = nlohmann::ordered_json::array(), reasoners;
  for (std::size_t f = 0; f < te.size(); ++f)
    table.push_back({{"factor", te[f].factor}, {"teacher", factor_json(te[f])}, {"student", factor_json(se[f])}});
  j["auroc"] = table;
  reasoners["teacher"] = nlohmann::ordered_json::array();
  reasoners["student"] = nlohmann::ordered_json::array();
  for (const auto& e : te) reasoners["teacher"].push_back(to_json(e.reasoner));
  for (const auto& e : se) reasoners["student"].push_back(to_json(e.reasoner));
  j["reasoners"] = reasoners;
  j["timing"] = {{"teacher", to_json(tl)}, {"student", to_json(sl)}};
  if (out.empty()) out = student_path + ".eval.json";
  write_text(out, j.dump(2) + "\n");

  os << std::left << std::setw(12) << "factor" << std::setw(10) << "teacher" << "student\n";
  for (std::size_t f = 0; f < te.size(); ++f)
    os << std::setw(12) << te[f].factor << std::setw(10) << fixed(te[f].auroc) << fixed(se[f].auroc) << '\n';
  os << "size      " << t.parameter_bytes() << " B vs " << s.parameter_bytes() << " B\n";
  os << "latency   mean " << fixed(tl.mean_ms, 3) << " ms vs " << fixed(sl.mean_ms, 3) << " ms  (p99 " << fixed(tl.p99_ms, 3)
     << " vs " << fixed(sl.p99_ms, 3) << ", " << cfg.bench.runs << " runs)\n";
  os << "report: " << out << '\n';
  return kOk;
}

inline int bench_cmd(const Common& com, const std::string& teacher_path, const std::string& data, std::string out,
                     std::ostream& os) {
  RunConfig cfg = resolve(com);
  EncoderModel t = load_weights(teacher_path);
  FactorDataset ds = load(data);
  nlohmann::ordered_json rows = nlohmann::ordered_json::array(), timing = nlohmann::ordered_json::array();
  os << std::left << std::setw(8) << "r" << std::setw(14) << "params" << std::setw(14) << "bytes" << "mean ms\n";
  for (double r : cfg.bench.ratios) {
    EncoderModel s = compress(t, r, student_seed(cfg.seed), cfg.teacher.arch.init_norm_bound);
    LatencyStats l = measure_latency(s, ds, cfg.bench.runs, cfg.bench.warmup);
    rows.push_back({{"ratio", r}, {"parameter_count", s.parameter_count()}, {"parameter_bytes", s.parameter_bytes()}});
    auto lj = to_json(l);
    lj["ratio"] = r;
    timing.push_back(lj);
    os << std::setw(8) << r << std::setw(14) << s.parameter_count() << std::setw(14) << s.parameter_bytes() << fixed(l.mean_ms, 3)
       << '\n';
  }
  nlohmann::ordered_json j;
  j["provenance"] = provenance(cfg);
  j["teacher"] = model_info(t, teacher_path);
  j["sweep"] = rows;
  j["timing"] = timing;
  if (out.empty()) out = teacher_path + ".bench.json";
  write_text(out, j.dump(2) + "\n");
  os << "report: " << out << '\n';
  return kOk;
}

}  // namespace detail

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Disentangled distillation of Gaussian encoders"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  detail::Common c_gen, c_teacher, c_distill, c_cert, c_eval, c_bench;
  std::string out_path, data, teacher, student, model, constants, trace, csv;
  std::optional<double> ratio;
  std::optional<std::size_t> runs;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic factor dataset");
  detail::add_common(gen, c_gen);
  gen->add_option("--out", out_path, "output directory")->required();

  auto* tt = app.add_subcommand("train-teacher", "train the teacher encoder");
  detail::add_common(tt, c_teacher);
  tt->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  tt->add_option("--out", out_path, "weight file")->required();
  tt->add_option("--trace", trace, "trace CSV (default <out>.trace.csv)");

  auto* ds = app.add_subcommand("distill", "distill a compressed student");
  detail::add_common(ds, c_distill);
  ds->add_option("--teacher", teacher, "teacher weight file")->required()->check(CLI::ExistingFile);
  ds->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  ds->add_option("--out", out_path, "student weight file")->required();
  ds->add_option("--trace", trace, "dual trace CSV (default <out>.trace.csv)");
  ds->add_option("--ratio", ratio, "compression ratio r, overrides distill.compression");

  auto* ce = app.add_subcommand("certify", "spectra, Lipschitz coefficient and Rademacher bounds");
  detail::add_common(ce, c_cert);
  ce->add_option("--model", model, "weight file")->required()->check(CLI::ExistingFile);
  ce->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  ce->add_option("--constants", constants, "constants JSON")->check(CLI::ExistingFile);
  ce->add_option("--out", out_path, "report JSON (default <model>.cert.json)");
  ce->add_option("--csv", csv, "zeta-vs-m CSV (default <model>.zeta.csv)");

  auto* ev = app.add_subcommand("evaluate", "per-factor OOD AUROC, sizes and latency");
  detail::add_common(ev, c_eval);
  ev->add_option("--teacher", teacher, "teacher weight file")->required()->check(CLI::ExistingFile);
  ev->add_option("--student", student, "student weight file")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--out", out_path, "report JSON (default <student>.eval.json)");
  ev->add_option("--runs", runs, "latency runs, overrides bench.runs");

  auto* be = app.add_subcommand("bench", "size and latency across compression ratios");
  detail::add_common(be, c_bench);
  be->add_option("--teacher", teacher, "teacher weight file")->required()->check(CLI::ExistingFile);
  be->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  be->add_option("--out", out_path, "report JSON (default <teacher>.bench.json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return detail::gen_data(c_gen, out_path, out);
    if (*tt) return detail::train_teacher_cmd(c_teacher, data, out_path, trace, out);
    if (*ds) return detail::distill_cmd(c_distill, teacher, data, out_path, trace, ratio, out);
    if (*ce) return detail::certify_cmd(c_cert, model, data, constants, out_path, csv, out);
    if (*ev) return detail::evaluate_cmd(c_eval, teacher, student, data, out_path, runs, out);
    if (*be) return detail::bench_cmd(c_bench, teacher, data, out_path, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const ParseError& e) {
    err << "parse error: " << e.what() << '\n';
    return kUsage;
  } catch (const FactorError& e) {
    err << "factor error: " << e.what() << '\n';
    return kUsage;
  } catch (const CorruptFileError& e) {
    err << "corrupt file: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}

}  // namespace dde::cli
