#include <gtest/gtest.h>

#include <sstream>

#include "test_util.hpp"

using namespace dde;

namespace {

TeacherConfig small_teacher(std::size_t epochs) {
  TeacherConfig c;
  c.arch = testutil::small_arch();
  c.arch.widths = {8, 16, 32};
  c.epochs = epochs;
  c.pairs_per_batch = 16;
  c.decoder_hidden = 64;
  return c;
}

DistillConfig small_distill(std::size_t epochs) {
  DistillConfig c;
  c.epochs = epochs;
  c.lr = 1e-3;
  c.d_composite = "raw";
  c.early_stop = false;
  return c;
}

const FactorDataset& data() {
  static const FactorDataset ds = testutil::small_dataset(3);
  return ds;
}

const EncoderModel& trained_teacher() {
  static const EncoderModel m = train_teacher(data(), small_teacher(25), 11);
  return m;
}

std::vector<std::pair<std::size_t, std::size_t>> held_out_pairs(std::size_t f) {
  auto parts = partition(data(), {}, Split::Calibration);
  return build_pairs(parts, f, 200, 99).pairs;
}

}  // namespace

TEST(DualStep, Arithmetic) {
  DualState s{{2.0, 0.0, 5.0}, {0.05, 0.0, 0.5}};
  auto n = dual_step(s, {0.4, 0.0, 0.0});
  EXPECT_NEAR(n.lambda[0], 2.02, 1e-15);
  EXPECT_EQ(n.lambda[1], 0.0);
  EXPECT_EQ(n.lambda[2], 5.0);
  EXPECT_THROW(dual_step(s, {0.1}), DimensionError);
  EXPECT_THROW(dual_step(s, {-0.1, 0, 0}), ContractError);
}

TEST(DualStep, ZeroStaysZero) {
  DualState s{{0.0}, {0.3}};
  for (int i = 0; i < 100; ++i) s = dual_step(s, {0.0});
  EXPECT_EQ(s.lambda[0], 0.0);
}

TEST(DualStep, NonNegativeAndMonotoneProperty) {
  Rng rng(2);
  DualState s{{1.0, 0.5}, {0.05, 0.5}};
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> h{rng.uniform() < 0.5 ? 0.0 : rng.uniform(), rng.uniform() < 0.5 ? 0.0 : rng.uniform()};
    auto n = dual_step(s, h);
    for (std::size_t c = 0; c < 2; ++c) {
      EXPECT_GE(n.lambda[c], 0.0);
      if (h[c] > 0) EXPECT_GE(n.lambda[c], s.lambda[c]);
    }
    s = n;
  }
}

TEST(DistillConfig, Defaults) {
  DistillConfig c;
  EXPECT_EQ(c.margin_adapt, (std::vector<double>{0.1, 1e-4}));
  EXPECT_EQ(c.margin_isolate, (std::vector<double>{0.1, 1e-4}));
  EXPECT_EQ(c.lambda0_adapt, (std::vector<double>{2, 10}));
  EXPECT_EQ(c.lambda0_isolate, (std::vector<double>{2, 10}));
  EXPECT_EQ(c.rate_adapt, (std::vector<double>{0.05, 0.5}));
  EXPECT_EQ(c.rate_isolate, (std::vector<double>{0.05, 0.5}));
  EXPECT_DOUBLE_EQ(c.lr, 1e-5);
  EXPECT_EQ(c.epochs, 50u);
  EXPECT_NO_THROW(validate(c, 2));
  c.margin_adapt = {0.1};
  EXPECT_THROW(validate(c, 2), ConfigError);
}

TEST(SymmetricKl, MatchesTapeLoss) {
  Rng rng(3);
  GaussianLatent t{testutil::random_tensor({3, 4}, rng), testutil::random_tensor({3, 4}, rng)};
  GaussianLatent s{testutil::random_tensor({3, 4}, rng), testutil::random_tensor({3, 4}, rng)};
  auto v = symmetric_kl(t, s);
  Tape tape;
  auto l = distill_loss({tape.constant(t.mu), tape.constant(t.logvar)}, {tape.constant(s.mu), tape.constant(s.logvar)});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(v[i], l.value.value()[i], 1e-14);
}

TEST(TrainTeacher, DeterministicAndTraced) {
  auto cfg = small_teacher(2);
  std::vector<TeacherEpoch> ta, tb;
  auto a = train_teacher(data(), cfg, 5, &ta);
  auto b = train_teacher(data(), cfg, 5, &tb);
  EXPECT_EQ(a, b);
  ASSERT_EQ(ta.size(), 2u);
  std::ostringstream os;
  write_teacher_trace(os, ta);
  std::string text = os.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
  EXPECT_NE(a.weights, a.snapshot);
}

TEST(TrainTeacher, ProbeSeparatesTrainedFromUntrained) {
  const auto& ds = data();
  EncoderModel untrained = build_teacher(
      [] {
        auto a = small_teacher(0).arch;
        a.input = {3, 16, 16};
        return a;
      }(),
      11);
  for (std::size_t f = 0; f < ds.factors.size(); ++f) {
    auto pairs = held_out_pairs(f);
    double trained = disentanglement_ratio(trained_teacher(), ds, f, pairs);
    double raw = disentanglement_ratio(untrained, ds, f, pairs);
    EXPECT_GE(trained, 2.0) << ds.factors[f].name;
    EXPECT_LT(raw, 2.0) << ds.factors[f].name;
  }
}

TEST(TrainTeacher, DivergenceRaisesTrainingError) {
  auto cfg = small_teacher(3);
  cfg.lr = 1e200;
  try {
    train_teacher(data(), cfg, 5);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_GE(e.epoch, 1u);
  }
}

TEST(Distill, DeterministicTrace) {
  const auto& t = trained_teacher();
  auto init = compress(t, 0.5, 3);
  auto a = distill(t, init, data(), small_distill(2), 4);
  auto b = distill(t, init, data(), small_distill(2), 4);
  EXPECT_EQ(a.student, b.student);
  ASSERT_EQ(a.trace.epochs.size(), 2u);
  for (std::size_t e = 0; e < 2; ++e) {
    EXPECT_EQ(a.trace.epochs[e].loss_d, b.trace.epochs[e].loss_d);
    EXPECT_EQ(a.trace.epochs[e].hinge, b.trace.epochs[e].hinge);
    EXPECT_EQ(a.trace.epochs[e].lambda, b.trace.epochs[e].lambda);
  }
  EXPECT_EQ(a.trace.constraints, (std::vector<std::string>{"A_haze", "I_haze", "A_backdrop", "I_backdrop"}));
  std::ostringstream os;
  write_dual_trace(os, a.trace);
  std::string text = os.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
}

TEST(Distill, DualTraceInvariants) {
  const auto& t = trained_teacher();
  auto res = distill(t, compress(t, 0.5, 3), data(), small_distill(3), 4);
  ASSERT_FALSE(res.trace.steps.empty());
  for (const auto& s : res.trace.steps)
    for (std::size_t c = 0; c < s.hinge.size(); ++c) {
      EXPECT_GE(s.lambda_after[c], 0.0);
      if (s.hinge[c] > 0) EXPECT_GE(s.lambda_after[c], s.lambda_before[c]);
    }
}

TEST(Distill, ZeroDualsIsPureDistillation) {
  const auto& t = trained_teacher();
  auto init = compress(t, 0.5, 3);
  auto cfg = small_distill(4);
  for (auto* v : {&cfg.lambda0_adapt, &cfg.lambda0_isolate, &cfg.rate_adapt, &cfg.rate_isolate}) *v = {0.0, 0.0};
  auto res = distill(t, init, data(), cfg, 4);
  for (const auto& s : res.trace.steps)
    for (double l : s.lambda_after) EXPECT_EQ(l, 0.0);

  auto test = data().split_indices(Split::Test);
  double before = mean_distill_loss(t, init, data(), test);
  double after = mean_distill_loss(t, res.student, data(), test);
  EXPECT_LE(after, before);
}

TEST(Distill, RejectsMismatchedStudent) {
  const auto& t = trained_teacher();
  auto arch = testutil::small_arch();
  arch.latent = 9;
  EXPECT_THROW(distill(t, build_encoder(arch, 1), data(), small_distill(1), 1), ConfigError);
}

TEST(Distill, SpectralClipBoundsHeads) {
  const auto& t = trained_teacher();
  auto cfg = small_distill(1);
  cfg.spectral_clip = true;
  cfg.spectral_clip_threshold = 0.5;
  auto res = distill(t, compress(t, 0.5, 3), data(), cfg, 4);
  for (std::size_t i = 0; i < res.student.layers.size(); ++i)
    if (!res.student.layers[i].standardized)
      EXPECT_LE(matrix_spectral_norm(res.student.weights[i].weight), 0.5 * (1 + 1e-8));
}
