#pragma once

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dde/dde.hpp"

namespace testutil {

using dde::Shape;
using dde::Tape;
using dde::Tensor;
using dde::Var;

inline Tensor random_tensor(Shape s, dde::Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  for (double& v : t.vec()) v = rng.uniform(lo, hi);
  return t;
}

using Fn = std::function<Var(Tape&, const std::vector<Var>&)>;

// Contracts f's output with fixed random weights so the full Jacobian is exercised.
inline double contracted(const Fn& f, const std::vector<Tensor>& in, const Tensor* weights, Tensor* w_out, dde::Rng* rng) {
  Tape tape;
  std::vector<Var> vs;
  for (const auto& t : in) vs.push_back(tape.constant(t));
  Var y = f(tape, vs);
  if (w_out) *w_out = random_tensor(y.shape(), *rng, 0.5, 1.5);
  const Tensor& w = weights ? *weights : *w_out;
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y.value()[i] * w[i];
  return s;
}

// Largest relative error between autodiff and central differences over all input entries.
inline double fd_max_rel_error(const Fn& f, const std::vector<Tensor>& inputs, dde::Rng& rng, double h = 1e-5,
                               double floor = 1e-6) {
  Tensor w;
  contracted(f, inputs, nullptr, &w, &rng);

  Tape tape;
  std::vector<Var> vs;
  for (const auto& t : inputs) vs.push_back(tape.variable(t));
  Var y = f(tape, vs);
  Var loss = dde::ad::sum(dde::ad::mul(y, tape.constant(w)));
  auto g = tape.gradients(loss, vs);

  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto in = inputs;
      in[k][i] += h;
      double fp = contracted(f, in, &w, nullptr, nullptr);
      in[k][i] -= 2 * h;
      double fm = contracted(f, in, &w, nullptr, nullptr);
      double fd = (fp - fm) / (2 * h);
      double a = g[k][i];
      double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), floor});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

inline dde::FactorDataset small_dataset(std::uint64_t seed = 1, std::size_t hw = 16) {
  dde::GenerateConfig cfg;
  cfg.factors = dde::default_factors();
  cfg.height = cfg.width = hw;
  cfg.train_per_partition = 24;
  cfg.calibration_per_partition = 8;
  cfg.test_per_combination = 6;
  cfg.pairs_per_factor = 60;
  cfg.seed = seed;
  return dde::generate(cfg);
}

inline dde::EncoderConfig small_arch(std::size_t hw = 16) {
  dde::EncoderConfig a;
  a.input = {3, hw, hw};
  a.widths = {4, 6, 8};
  a.latent = 8;
  a.representative = {{"haze", {3}}, {"backdrop", {6}}};
  return a;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("dde_" + tag + "_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
             std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

}  // namespace testutil
