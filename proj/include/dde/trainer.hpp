#pragma once

#include <cmath>
#include <cstdio>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dde/adam.hpp"
#include "dde/autodiff.hpp"
#include "dde/encoder.hpp"
#include "dde/factor_data.hpp"
#include "dde/losses.hpp"

namespace dde {

struct TrainingError : NumericError {
  TrainingError(const std::string& msg, std::size_t epoch) : NumericError(msg), epoch(epoch) {}
  std::size_t epoch;
};

// ---------------- teacher ----------------

struct TeacherConfig {
  EncoderConfig arch;
  std::size_t epochs = 100;
  std::size_t batch = 32;
  std::size_t pairs_per_batch = 32;
  double lr = 1e-3;
  double beta_kl = 1.0;
  std::size_t decoder_hidden = 256;
  double isolation_weight = 20.0;
  double sensitivity_weight = 10.0;
  double sensitivity_margin = 2.0;
  double consistency_weight = 10.0;
  double logvar_spread_weight = 100.0;
};

struct TeacherEpoch {
  std::size_t epoch = 0;
  double loss = 0, recon = 0, kl = 0, align = 0;
};

namespace detail {

inline Tensor uniform_init(const Shape& s, std::size_t fan_in, Rng& rng) {
  Tensor t(s);
  double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : t.vec()) v = rng.uniform(-b, b);
  return t;
}

// Cycles through a shuffled copy of a stored pair list.
class PairStream {
 public:
  PairStream(const std::vector<std::pair<std::size_t, std::size_t>>* pairs, Rng* rng) : pairs_(pairs), rng_(rng) {}
  void reshuffle() {
    order_ = rng_->permutation(pairs_->size());
    pos_ = 0;
  }
  std::pair<std::size_t, std::size_t> next() {
    if (pairs_->empty()) throw FactorError("empty pair set");
    if (order_.empty() || pos_ == order_.size()) reshuffle();
    return (*pairs_)[order_[pos_++]];
  }

 private:
  const std::vector<std::pair<std::size_t, std::size_t>>* pairs_;
  Rng* rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

inline Tensor normal_tensor(Rng& rng, Shape s) {
  Tensor t(std::move(s));
  for (double& v : t.vec()) v = rng.normal();
  return t;
}

}  // namespace detail

inline EncoderModel train_teacher(const FactorDataset& ds, const TeacherConfig& cfg, std::uint64_t seed,
                                  std::vector<TeacherEpoch>* trace = nullptr) {
  if (cfg.batch < 1 || !(cfg.lr > 0)) throw ConfigError("teacher: batch must be >= 1 and lr > 0");
  EncoderConfig arch = cfg.arch;
  arch.input = {FactorDataset::channels, ds.height, ds.width};
  EncoderModel model = build_teacher(arch, seed);
  const std::size_t N = model.latent;
  const std::size_t F = ds.factors.size();
  std::vector<std::vector<std::size_t>> z(F), zc(F);
  std::vector<std::size_t> all_z;
  for (std::size_t f = 0; f < F; ++f) {
    z[f] = model.dims(ds.factors[f].name);
    zc[f] = model.complement(z[f]);
    all_z.insert(all_z.end(), z[f].begin(), z[f].end());
  }

  Rng rng = Rng::derive(seed, 0x7eac4e5ULL);
  const std::size_t D = FactorDataset::channels * ds.height * ds.width;
  Tensor d1w = detail::uniform_init({cfg.decoder_hidden, N}, N, rng), d1b({cfg.decoder_hidden});
  Tensor d2w = detail::uniform_init({D, cfg.decoder_hidden}, cfg.decoder_hidden, rng), d2b({D});

  std::vector<Tensor*> params = parameter_tensors(model);
  params.insert(params.end(), {&d1w, &d1b, &d2w, &d2b});
  AdamState opt;

  auto train = ds.split_indices(Split::Train);
  std::vector<detail::PairStream> streams;
  for (std::size_t f = 0; f < F; ++f) streams.emplace_back(&ds.pairs_for(f).pairs, &rng);
  std::vector<Partition> parts;
  for (auto& p : partition(ds))
    if (p.samples.size() >= 2) parts.push_back(p);

  const std::size_t P = cfg.pairs_per_batch;
  Tape tape;
  for (std::size_t ep = 0; ep < cfg.epochs; ++ep) {
    auto perm = rng.permutation(train.size());
    for (auto& s : streams) s.reshuffle();
    TeacherEpoch rec{ep + 1};
    std::size_t nb = 0;
    try {
      for (std::size_t s = 0; s < perm.size(); s += cfg.batch) {
        std::size_t B = std::min(cfg.batch, perm.size() - s);
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < B; ++i) idx.push_back(train[perm[s + i]]);
        for (std::size_t f = 0; f < F; ++f) {
          std::vector<std::size_t> a, b;
          for (std::size_t i = 0; i < P; ++i) {
            auto [x, y] = streams[f].next();
            a.push_back(x);
            b.push_back(y);
          }
          idx.insert(idx.end(), a.begin(), a.end());
          idx.insert(idx.end(), b.begin(), b.end());
        }
        std::size_t PS = parts.empty() ? 0 : P;
        {
          std::vector<std::size_t> a, b;
          for (std::size_t i = 0; i < PS; ++i) {
            const auto& part = parts[rng.below(parts.size())];
            std::size_t x = rng.below(part.samples.size());
            std::size_t y = rng.below(part.samples.size() - 1);
            if (y >= x) ++y;
            a.push_back(part.samples[x]);
            b.push_back(part.samples[y]);
          }
          idx.insert(idx.end(), a.begin(), a.end());
          idx.insert(idx.end(), b.begin(), b.end());
        }

        tape.clear();
        using namespace ad;
        Var X = tape.constant(ds.images(idx));
        BoundParams bp = bind(tape, model, true);
        Var w1 = tape.variable(d1w), b1 = tape.variable(d1b), w2 = tape.variable(d2w), b2 = tape.variable(d2b);
        LatentVars lat = forward(tape, model, bp, X);

        Var mu = slice_rows(lat.mu, 0, B), lv = slice_rows(lat.logvar, 0, B);
        Var eps = tape.constant(detail::normal_tensor(rng, {B, N}));
        Var zs = mu + eps * exp(scale(lv, 0.5));
        Var h = leaky_relu(add_bias_rows(linear(zs, w1), b1), 0.2);
        Var recon_img = logistic(add_bias_rows(linear(h, w2), b2));
        Var target = tape.constant(ds.images(std::vector<std::size_t>(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(B))).reshaped({B, D}));
        double invB = 1.0 / static_cast<double>(B);
        Var recon = scale(sum(square(recon_img - target)), invB);
        Var kl = scale(sum(square(mu) + exp(lv) - 1.0 - lv), 0.5 * invB);
        Var centered = add_bias_rows(lv, scale(sum_rows(lv), -invB));
        Var spread = scale(sum(square(centered)), invB);

        Var align = tape.constant(Tensor::scalar(0.0));
        std::size_t off = B;
        for (std::size_t f = 0; f < F; ++f) {
          Var d = slice_rows(lat.mu, off, off + P) - slice_rows(lat.mu, off + P, off + 2 * P);
          off += 2 * P;
          Var iso = scale(mean(sum_last(square(select_last(d, zc[f])))), cfg.isolation_weight);
          Var sens = scale(mean(square(relu(cfg.sensitivity_margin - abs(select_last(d, z[f]))))), cfg.sensitivity_weight);
          align = align + iso + sens;
        }
        if (PS > 0) {
          Var d = slice_rows(lat.mu, off, off + PS) - slice_rows(lat.mu, off + PS, off + 2 * PS);
          align = align + scale(mean(square(select_last(d, all_z))), cfg.consistency_weight);
        }
        Var loss = recon + scale(kl, cfg.beta_kl) + scale(spread, cfg.logvar_spread_weight) + align;

        std::vector<Var> leaves = bp.all();
        leaves.insert(leaves.end(), {w1, b1, w2, b2});
        auto g = grad(loss, leaves);
        adam_step(params, g, opt, cfg.lr);

        rec.loss += loss.item();
        rec.recon += recon.item();
        rec.kl += kl.item();
        rec.align += align.item();
        ++nb;
      }
    } catch (const NumericError& e) {
      throw TrainingError("teacher training diverged in epoch " + std::to_string(ep + 1) + ": " + e.what(), ep + 1);
    }
    if (nb) {
      rec.loss /= static_cast<double>(nb);
      rec.recon /= static_cast<double>(nb);
      rec.kl /= static_cast<double>(nb);
      rec.align /= static_cast<double>(nb);
    }
    if (trace) trace->push_back(rec);
  }
  tape.clear();
  return model;
}

inline void write_teacher_trace(std::ostream& os, const std::vector<TeacherEpoch>& tr) {
  os << "epoch,loss,recon,kl,align\n";
  os << std::setprecision(17);
  for (const auto& r : tr) os << r.epoch << ',' << r.loss << ',' << r.recon << ',' << r.kl << ',' << r.align << '\n';
}

// Ratio of mean |delta mu| on Z_f to mean |delta mu| on the complement, over the given pairs.
inline double disentanglement_ratio(const EncoderModel& m, const FactorDataset& ds, std::size_t f,
                                    const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  const auto& z = m.dims(ds.factors.at(f).name);
  auto zc = m.complement(z);
  std::vector<std::size_t> a, b;
  for (auto [x, y] : pairs) {
    a.push_back(x);
    b.push_back(y);
  }
  Tensor ma = encode(m, ds.images(a)).mu, mb = encode(m, ds.images(b)).mu;
  double sz = 0, sc = 0;
  const std::size_t N = m.latent;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    for (auto k : z) sz += std::abs(ma[i * N + k] - mb[i * N + k]);
    for (auto k : zc) sc += std::abs(ma[i * N + k] - mb[i * N + k]);
  }
  sz /= static_cast<double>(pairs.size() * z.size());
  sc /= static_cast<double>(pairs.size() * zc.size());
  return sz / std::max(sc, 1e-300);
}

// ---------------- distillation ----------------

struct DistillConfig {
  std::size_t epochs = 50;
  std::size_t batch = 32;
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::vector<double> margin_adapt{0.1, 1e-4};
  std::vector<double> margin_isolate{0.1, 1e-4};
  std::vector<double> lambda0_adapt{2.0, 10.0};
  std::vector<double> lambda0_isolate{2.0, 10.0};
  std::vector<double> rate_adapt{0.05, 0.5};
  std::vector<double> rate_isolate{0.05, 0.5};
  double compression = 0.5;
  bool raw_losses = false;
  std::string d_composite = "logistic";  // or "raw"
  bool sample_sigma_is_variance = false;
  bool shared_pair_noise = true;
  bool early_stop = true;
  bool spectral_clip = false;
  double spectral_clip_threshold = 1.0;
};

// Constraint c = 2f is adaptability for factor f, c = 2f+1 isolation.
struct DualState {
  std::vector<double> lambda;
  std::vector<double> eta;
};

inline DualState dual_step(const DualState& st, const std::vector<double>& hinges) {
  if (hinges.size() != st.lambda.size() || st.eta.size() != st.lambda.size())
    throw DimensionError("dual_step: constraint count mismatch");
  DualState out = st;
  for (std::size_t c = 0; c < hinges.size(); ++c) {
    if (hinges[c] < 0) throw ContractError("dual_step: hinge values must be non-negative");
    out.lambda[c] = std::max(st.lambda[c] + st.eta[c] * hinges[c], 0.0);
  }
  return out;
}

struct DualEpoch {
  std::size_t epoch = 0;
  double loss_d = 0;      // composite (or raw when composites are off), the optimized term
  double loss_d_raw = 0;  // symmetric KL
  std::vector<double> hinge;
  std::vector<double> lambda;
  std::vector<double> constraint;  // mean constraint value before the margin is subtracted
};

struct DualStep {
  std::size_t epoch = 0;
  std::vector<double> lambda_before;
  std::vector<double> hinge;
  std::vector<double> lambda_after;
};

struct DualTrace {
  std::vector<std::string> constraints;
  std::vector<DualEpoch> epochs;
  std::vector<DualStep> steps;
};

inline void write_dual_trace(std::ostream& os, const DualTrace& tr) {
  os << "epoch,L_D,L_D_raw";
  for (const auto& c : tr.constraints) os << ",hinge_" << c;
  for (const auto& c : tr.constraints) os << ",lambda_" << c;
  for (const auto& c : tr.constraints) os << ",mean_" << c;
  os << '\n' << std::setprecision(17);
  for (const auto& e : tr.epochs) {
    os << e.epoch << ',' << e.loss_d << ',' << e.loss_d_raw;
    for (double h : e.hinge) os << ',' << h;
    for (double l : e.lambda) os << ',' << l;
    for (double v : e.constraint) os << ',' << v;
    os << '\n';
  }
}

struct DistillResult {
  EncoderModel student;
  DualTrace trace;
};

inline GaussianLatent encode_batched(const EncoderModel& m, const FactorDataset& ds, const std::vector<std::size_t>& idx,
                                     std::size_t chunk = 256) {
  GaussianLatent out{Tensor({idx.size(), m.latent}), Tensor({idx.size(), m.latent})};
  for (std::size_t s = 0; s < idx.size(); s += chunk) {
    std::size_t e = std::min(idx.size(), s + chunk);
    auto g = encode(m, ds.images(std::vector<std::size_t>(idx.begin() + static_cast<std::ptrdiff_t>(s),
                                                          idx.begin() + static_cast<std::ptrdiff_t>(e))));
    std::copy(g.mu.vec().begin(), g.mu.vec().end(), out.mu.vec().begin() + static_cast<std::ptrdiff_t>(s * m.latent));
    std::copy(g.logvar.vec().begin(), g.logvar.vec().end(),
              out.logvar.vec().begin() + static_cast<std::ptrdiff_t>(s * m.latent));
  }
  return out;
}

// Per-row symmetric KL without a tape.
inline std::vector<double> symmetric_kl(const GaussianLatent& t, const GaussianLatent& s) {
  require_same_shape(t.mu, s.mu, "symmetric_kl");
  std::size_t N = t.mu.shape().back(), R = t.mu.size() / N;
  std::vector<double> out(R);
  for (std::size_t r = 0; r < R; ++r) {
    double acc = 0;
    for (std::size_t k = 0; k < N; ++k) {
      std::size_t i = r * N + k;
      double vt = std::exp(t.logvar[i]), vs = std::exp(s.logvar[i]), dm = (t.mu[i] - s.mu[i]) * (t.mu[i] - s.mu[i]);
      acc += (vt + dm) / vs + (vs + dm) / vt - 2.0;
    }
    out[r] = acc / (2.0 * static_cast<double>(N));
  }
  return out;
}

inline double mean_distill_loss(const EncoderModel& teacher, const EncoderModel& student, const FactorDataset& ds,
                                const std::vector<std::size_t>& idx) {
  auto v = symmetric_kl(encode_batched(teacher, ds, idx), encode_batched(student, ds, idx));
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline void validate(const DistillConfig& c, std::size_t F) {
  if (c.batch < 1) throw ConfigError("distill.batch: must be >= 1");
  if (!(c.lr > 0)) throw ConfigError("distill.lr: must be positive");
  if (c.d_composite != "logistic" && c.d_composite != "raw")
    throw ConfigError("distill.d_composite: must be 'logistic' or 'raw'");
  auto check = [&](const std::vector<double>& v, const char* name, bool allow_zero) {
    if (v.size() != F)
      throw ConfigError(std::string("distill.") + name + ": expected " + std::to_string(F) + " values, one per factor");
    for (double x : v)
      if (x < 0 || (!allow_zero && x == 0)) throw ConfigError(std::string("distill.") + name + ": values must be >= 0");
  };
  check(c.margin_adapt, "margin_adapt", true);
  check(c.margin_isolate, "margin_isolate", true);
  check(c.lambda0_adapt, "lambda0_adapt", true);
  check(c.lambda0_isolate, "lambda0_isolate", true);
  check(c.rate_adapt, "rate_adapt", true);
  check(c.rate_isolate, "rate_isolate", true);
  if (c.spectral_clip && !(c.spectral_clip_threshold > 0))
    throw ConfigError("distill.spectral_clip_threshold: must be positive");
}

inline DistillResult distill(const EncoderModel& teacher, const EncoderModel& student_init, const FactorDataset& ds,
                             const DistillConfig& cfg, std::uint64_t seed) {
  const std::size_t F = ds.factors.size();
  validate(cfg, F);
  if (teacher.latent != student_init.latent || teacher.representative != student_init.representative)
    throw ConfigError("distill: teacher and student must share latent size and representative dims");
  const std::size_t N = teacher.latent;
  std::vector<std::vector<std::size_t>> z(F);
  for (std::size_t f = 0; f < F; ++f) z[f] = teacher.dims(ds.factors[f].name);

  DistillResult res{student_init, {}};
  EncoderModel& student = res.student;
  DualTrace& trace = res.trace;
  DualState dual;
  std::vector<double> margins;
  for (std::size_t f = 0; f < F; ++f) {
    trace.constraints.push_back("A_" + ds.factors[f].name);
    trace.constraints.push_back("I_" + ds.factors[f].name);
    dual.lambda.insert(dual.lambda.end(), {cfg.lambda0_adapt[f], cfg.lambda0_isolate[f]});
    dual.eta.insert(dual.eta.end(), {cfg.rate_adapt[f], cfg.rate_isolate[f]});
    margins.insert(margins.end(), {cfg.margin_adapt[f], cfg.margin_isolate[f]});
  }
  const std::size_t C = dual.lambda.size();

  auto train = ds.split_indices(Split::Train);
  // Teacher latents are frozen; cache them per dataset index.
  std::vector<std::size_t> row_of(ds.size(), static_cast<std::size_t>(-1));
  for (std::size_t r = 0; r < train.size(); ++r) row_of[train[r]] = r;
  GaussianLatent tcache = encode_batched(teacher, ds, train);
  auto teacher_rows = [&](const std::vector<std::size_t>& idx) {
    GaussianLatent g{Tensor({idx.size(), N}), Tensor({idx.size(), N})};
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::size_t r = row_of.at(idx[i]);
      if (r == static_cast<std::size_t>(-1)) throw FactorError("pair references a sample outside the train split");
      std::copy_n(tcache.mu.raw() + r * N, N, g.mu.raw() + i * N);
      std::copy_n(tcache.logvar.raw() + r * N, N, g.logvar.raw() + i * N);
    }
    return g;
  };

  Rng rng = Rng::derive(seed, 0xd157111ULL);
  std::vector<detail::PairStream> streams;
  for (std::size_t f = 0; f < F; ++f) streams.emplace_back(&ds.pairs_for(f).pairs, &rng);
  AdamState opt;
  opt.beta1 = cfg.beta1;
  opt.beta2 = cfg.beta2;
  opt.eps = cfg.adam_eps;
  std::vector<Tensor*> params = parameter_tensors(student);
  const bool d_raw = cfg.raw_losses || cfg.d_composite == "raw";
  auto spatial = student.layer_input_spatial();

  Tape tape;
  std::size_t calm_epochs = 0;
  for (std::size_t ep = 0; ep < cfg.epochs; ++ep) {
    auto perm = rng.permutation(train.size());
    for (auto& s : streams) s.reshuffle();
    DualEpoch rec{ep + 1, 0, 0, std::vector<double>(C, 0.0), {}, std::vector<double>(C, 0.0)};
    std::size_t seen = 0;
    try {
      for (std::size_t s = 0; s < perm.size(); s += cfg.batch) {
        std::size_t B = std::min(cfg.batch, perm.size() - s);
        std::vector<std::size_t> bi;
        for (std::size_t i = 0; i < B; ++i) bi.push_back(train[perm[s + i]]);
        std::vector<std::vector<std::size_t>> px(F), py(F);
        std::vector<std::size_t> idx = bi;
        for (std::size_t f = 0; f < F; ++f) {
          for (std::size_t i = 0; i < B; ++i) {
            auto [x, y] = streams[f].next();
            px[f].push_back(x);
            py[f].push_back(y);
          }
          idx.insert(idx.end(), px[f].begin(), px[f].end());
          idx.insert(idx.end(), py[f].begin(), py[f].end());
        }

        tape.clear();
        using namespace ad;
        Var X = tape.constant(ds.images(idx));
        BoundParams bp = bind(tape, student, true);
        LatentVars sl = forward(tape, student, bp, X);

        GaussianLatent tb = teacher_rows(bi);
        LatentVars tl{tape.constant(tb.mu), tape.constant(tb.logvar)};
        LatentVars sb{slice_rows(sl.mu, 0, B), slice_rows(sl.logvar, 0, B)};
        LossValue ld_raw = distill_loss(tl, sb);
        Var ld = d_raw ? ld_raw.value : bounded(ld_raw).value;
        Var total = ld;

        std::vector<double> hmean(C, 0.0), cmean(C, 0.0);
        std::size_t off = B;
        for (std::size_t f = 0; f < F; ++f) {
          GaussianLatent ta = teacher_rows(px[f]), tb2 = teacher_rows(py[f]);
          Tensor e1 = detail::normal_tensor(rng, {B, N});
          Tensor e2 = cfg.shared_pair_noise ? e1 : detail::normal_tensor(rng, {B, N});
          PairLatents pl;
          pl.a = tape.constant(sample_with(ta, e1, cfg.sample_sigma_is_variance));
          pl.a2 = tape.constant(sample_with(tb2, e2, cfg.sample_sigma_is_variance));
          pl.mu = slice_rows(sl.mu, off, off + B);
          pl.logvar = slice_rows(sl.logvar, off, off + B);
          pl.mu2 = slice_rows(sl.mu, off + B, off + 2 * B);
          pl.logvar2 = slice_rows(sl.logvar, off + B, off + 2 * B);
          off += 2 * B;
          LossValue la = adapt_loss(pl, z[f], ds.factors[f].name);
          LossValue li = isolation_loss(pl, z[f], N, ds.factors[f].name);
          if (!cfg.raw_losses) {
            la = bounded(la);
            li = bounded(li);
          }
          Var ha = hinge(la, margins[2 * f]), hi = hinge(li, margins[2 * f + 1]);
          hmean[2 * f] = mean(ha).item();
          hmean[2 * f + 1] = mean(hi).item();
          cmean[2 * f] = mean(la.value).item();
          cmean[2 * f + 1] = mean(li.value).item();
          for (auto [c, h] : {std::pair{2 * f, ha}, std::pair{2 * f + 1, hi}})
            if (dual.lambda[c] != 0.0 || dual.eta[c] != 0.0) total = total + scale(h, dual.lambda[c]);
        }
        Var loss = mean(total);
        auto g = grad(loss, bp.all());
        adam_step(params, g, opt, cfg.lr);
        if (cfg.spectral_clip)
          for (std::size_t i = 0; i < student.layers.size(); ++i) {
            const auto& l = student.layers[i];
            if (l.standardized) continue;
            auto& w = student.weights[i].weight;
            if (l.kind == LayerKind::Linear)
              w = clip_matrix(w, cfg.spectral_clip_threshold);
            else
              w = clip_singular_values(w, std::max(spatial[i].first, l.kernel), std::max(spatial[i].second, l.kernel),
                                       cfg.spectral_clip_threshold);
          }

        DualState next = dual_step(dual, hmean);
        trace.steps.push_back(DualStep{ep + 1, dual.lambda, hmean, next.lambda});
        dual = next;

        double bd = static_cast<double>(B);
        rec.loss_d += mean(ld).item() * bd;
        rec.loss_d_raw += mean(ld_raw.value).item() * bd;
        for (std::size_t c = 0; c < C; ++c) {
          rec.hinge[c] += hmean[c] * bd;
          rec.constraint[c] += cmean[c] * bd;
        }
        seen += B;
      }
    } catch (const NumericError& e) {
      throw TrainingError("distillation diverged in epoch " + std::to_string(ep + 1) + ": " + e.what(), ep + 1);
    }
    double n = static_cast<double>(std::max<std::size_t>(seen, 1));
    rec.loss_d /= n;
    rec.loss_d_raw /= n;
    for (double& h : rec.hinge) h /= n;
    for (double& v : rec.constraint) v /= n;
    rec.lambda = dual.lambda;

    bool calm = std::all_of(rec.hinge.begin(), rec.hinge.end(), [](double h) { return h < 1e-4; }) &&
                !trace.epochs.empty() && std::abs(rec.loss_d - trace.epochs.back().loss_d) < 1e-5;
    calm_epochs = calm ? calm_epochs + 1 : 0;
    trace.epochs.push_back(std::move(rec));
    if (cfg.early_stop && calm_epochs >= 3) break;
  }
  tape.clear();
  return res;
}

}  // namespace dde
