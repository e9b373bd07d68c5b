#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "xdc/error.hpp"
#include "xdc/training.hpp"

using namespace xdc;
using namespace xdc::ops;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.length = 64;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 1;
  c.ffn_mult = 2;
  c.conv_channels = {4, 4, 8, 8};
  c.k_max = 3;
  c.patch_size = 16;
  c.patch_stride = 8;
  return c;
}

std::vector<double> bump(std::size_t n, double center, double width) {
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = std::exp(-0.5 * std::pow((static_cast<double>(i) - center) / width, 2));
  return v;
}

// Two-phase sample on a 64-point grid without going through the simulator.
MixtureSample toy_sample(std::uint64_t index) {
  std::mt19937_64 rng(index + 100);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  MixtureSample s;
  Grid g{10.0, 0.02, 64};
  const double w0 = 0.3 + 0.4 * u(rng);
  s.weights = {w0, 1 - w0};
  s.active_count = 2;
  const auto a = bump(64, 10 + 10 * u(rng), 2.0);
  const auto b = bump(64, 40 + 10 * u(rng), 3.0);
  std::vector<double> mix(64);
  for (std::size_t i = 0; i < 64; ++i) mix[i] = w0 * a[i] + (1 - w0) * b[i];
  s.mixed = DiffractionPattern(g, mix);
  s.components = {DiffractionPattern(g, a), DiffractionPattern(g, b), DiffractionPattern(g)};
  s.component_ids = {"a", "b"};
  return s;
}

Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return Errc::Io;
}

}  // namespace

TEST(Loss, SiSdrHandValues) {
  // y = (1, 0), y_hat = (1, 1): projection (1, 0), error (0, 1), ratio 1
  EXPECT_NEAR(si_sdr_value(std::vector<double>{1, 1}, std::vector<double>{1, 0}), 0.0, 1e-6);
  // y_hat = 2y is perfect up to scale: ratio hits the cap
  EXPECT_NEAR(si_sdr_value(std::vector<double>{2, 4}, std::vector<double>{1, 2}), 80.0, 1e-9);
  // y = (1, 0), y_hat = (1, 0.5): ratio 4
  EXPECT_NEAR(si_sdr_value(std::vector<double>{1, 0.5}, std::vector<double>{1, 0}), 10 * std::log10(4.0), 1e-6);
  const std::vector<double> zero(4, 0.0), y{1, 2, 3, 4};
  EXPECT_TRUE(std::isfinite(si_sdr_value(zero, y)));
  EXPECT_TRUE(std::isfinite(si_sdr_value(y, zero)));
}

TEST(Loss, TensorAndScalarVersionsAgree) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const LossWeights w;
  for (int t = 0; t < 20; ++t) {
    std::vector<double> p(40), y(40);
    for (auto& v : p) v = u(rng);
    for (auto& v : y) v = u(rng) < 0.3 ? 0.0 : u(rng);
    const double a = separation_loss(Tensor::from({1, 40}, p), Tensor::from({1, 40}, y), w).item();
    EXPECT_NEAR(a, separation_cost(p, y, w), 1e-12);
    EXPECT_NEAR(si_sdr(Tensor::from({1, 40}, p), Tensor::from({1, 40}, y)).item(), si_sdr_value(p, y), 1e-12);
  }
}

TEST(Loss, AmplitudeWeighting) {
  // |1 - 0| (1 + 2 * 0) + |0 - 1| (1 + 2 * 1) over 2 points
  const double v = amplitude_loss(Tensor::from({1, 2}, {1, 0}), Tensor::from({1, 2}, {0, 1}), 2.0).item();
  EXPECT_DOUBLE_EQ(v, 2.0);
}

TEST(Loss, PerfectPredictionMinimizesGeometry) {
  const auto y = bump(50, 20, 3);
  EXPECT_EQ(geometry_loss(Tensor::from({1, 50}, y), Tensor::from({1, 50}, y), 0.5).item(), 0.0);
  auto shifted = bump(50, 22, 3);
  EXPECT_GT(geometry_loss(Tensor::from({1, 50}, shifted), Tensor::from({1, 50}, y), 0.5).item(), 0.0);
}

TEST(Loss, GradientsAreFinite) {
  const LossWeights w;
  std::mt19937_64 rng(12);
  std::vector<double> y(30, 0.0);
  y[10] = 1.0;
  const Tensor target = Tensor::from({1, 30}, y);
  auto f = [&](const std::vector<Tensor>& in) { return separation_loss(sigmoid(in[0]), target, w); };
  Tensor p = Tensor::randn({1, 30}, 1.0, rng, true);
  Tensor l = f({p});
  l.backward();
  for (double g : p.grad()) EXPECT_TRUE(std::isfinite(g));
}

TEST(Pit, MatchesHungarianOracle) {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t k = 1 + trial % 4;
    std::vector<std::vector<double>> cost(k, std::vector<double>(4));
    for (auto& row : cost)
      for (auto& c : row) c = trial % 7 == 0 ? std::round(u(rng) * 3) : u(rng);
    const PitResult r = pit_match(cost, 4);
    const auto h = oracle::hungarian(cost);
    double hc = 0, rc = 0;
    for (std::size_t i = 0; i < k; ++i) {
      hc += cost[i][h[i]];
      rc += cost[i][r.slot_of_target[i]];
    }
    ASSERT_NEAR(r.cost, hc, 1e-12);
    ASSERT_NEAR(rc, r.cost, 1e-12);
    if (trial % 7 != 0) {
      ASSERT_EQ(r.slot_of_target, h);
    }
    double labels = 0;
    for (double l : r.labels) labels += l;
    ASSERT_EQ(labels, static_cast<double>(k));
  }
}

TEST(Pit, TiesResolveToSmallestSlots) {
  const std::vector<std::vector<double>> cost(2, std::vector<double>(4, 1.0));
  const PitResult r = pit_match(cost, 4);
  EXPECT_EQ(r.slot_of_target, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(code_of([] { pit_match(std::vector<std::vector<double>>(5, std::vector<double>(4)), 4); }),
            Errc::KExceedsKmax);
}

TEST(Pit, PermutedSlotsGiveTheSameLoss) {
  const auto a = bump(32, 8, 2), b = bump(32, 22, 2);
  const LossWeights w;
  const auto r1 = pit_match(std::vector<std::vector<double>>{a, b}, {a, b}, w);
  const auto r2 = pit_match(std::vector<std::vector<double>>{b, a}, {a, b}, w);
  EXPECT_NEAR(r1.cost, r2.cost, 1e-15);
  EXPECT_EQ(r2.slot_of_target, (std::vector<std::size_t>{1, 0}));
}

TEST(Schedule, WarmupThenCosine) {
  TrainConfig c;
  c.lr = 1.0;
  c.epochs = 10;
  c.warmup_epochs = 2;
  c.min_lr_ratio = 0.1;
  EXPECT_DOUBLE_EQ(learning_rate(c, 0, 5), 0.1);
  EXPECT_DOUBLE_EQ(learning_rate(c, 9, 5), 1.0);
  EXPECT_DOUBLE_EQ(learning_rate(c, 10, 5), 1.0);
  EXPECT_NEAR(learning_rate(c, 30, 5), 0.55, 1e-12);
  EXPECT_NEAR(learning_rate(c, 50, 5), 0.1, 1e-12);
}

TEST(Freeze, MaskFollowsStageAndFlags) {
  const Model m(tiny());
  TrainConfig c;
  const auto s2 = trainable_mask(m, 2, c);
  const auto s1 = trainable_mask(m, 1, c);
  c.freeze_input_projection = false;
  const auto s2b = trainable_mask(m, 2, c);
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    const auto g = m.parameters()[i].group;
    EXPECT_EQ(s2[i], g != ParamGroup::Global && g != ParamGroup::GlobalInput && g != ParamGroup::Pretrain);
    EXPECT_EQ(s1[i], g == ParamGroup::Global || g == ParamGroup::GlobalInput || g == ParamGroup::Pretrain);
    EXPECT_EQ(s2b[i], g != ParamGroup::Global && g != ParamGroup::Pretrain);
  }
}

TEST(Train, StageTwoLeavesGlobalUntouchedAndLearns) {
  Model m(tiny());
  const Model before = m.clone();
  TrainConfig c;
  c.lr = 3e-3;
  c.epochs = 12;
  c.warmup_epochs = 1;
  c.batch_size = 4;
  c.samples_per_epoch = 8;
  c.ema_decay = 0.9;
  std::vector<std::string> lines;
  const auto rep = run_stage2(
      m, [](std::uint64_t, std::uint64_t i) { return toy_sample(i); }, nullptr, c, LossWeights{}, "",
      [&](const std::string& l) { lines.push_back(l); });
  ASSERT_EQ(rep.epochs.size(), 12u);
  EXPECT_LT(rep.epochs.back().loss, rep.epochs.front().loss);
  EXPECT_EQ(lines.size(), 13u);
  EXPECT_NE(lines[1].find("stage=train epoch=0"), std::string::npos);
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    const auto g = m.parameters()[i].group;
    const bool same = m.parameters()[i].value.data() == before.parameters()[i].value.data();
    if (g == ParamGroup::Global || g == ParamGroup::GlobalInput || g == ParamGroup::Pretrain) {
      EXPECT_TRUE(same) << m.parameters()[i].name;
      EXPECT_EQ(rep.ema[i].data(), before.parameters()[i].value.data());
    }
    if (g == ParamGroup::Decoder) {
      EXPECT_FALSE(same) << m.parameters()[i].name;
    }
  }
}

TEST(Train, ThreadCountDoesNotChangeResults) {
  TrainConfig c;
  c.epochs = 3;
  c.batch_size = 4;
  c.samples_per_epoch = 8;
  c.seed = 5;
  auto src = [](std::uint64_t, std::uint64_t i) { return toy_sample(i); };
  Model a(tiny()), b(tiny());
  c.threads = 1;
  run_stage2(a, src, nullptr, c, LossWeights{});
  c.threads = 3;
  run_stage2(b, src, nullptr, c, LossWeights{});
  for (std::size_t i = 0; i < a.parameters().size(); ++i)
    ASSERT_EQ(a.parameters()[i].value.data(), b.parameters()[i].value.data()) << a.parameters()[i].name;
}

TEST(Train, StageOneUpdatesOnlyPretrainingGroups) {
  Model m(tiny());
  const Model before = m.clone();
  TrainConfig c;
  c.epochs = 3;
  c.batch_size = 2;
  c.samples_per_epoch = 4;
  c.lr = 1e-3;
  const auto dir = std::filesystem::temp_directory_path() / "xdc_test_training";
  std::filesystem::create_directories(dir);
  const std::string ck = (dir / "pre.xdck").string();
  const PatternSource src = [](std::uint64_t, std::uint64_t i) { return toy_sample(i).mixed.intensities; };
  c.val_samples = 2;
  const auto rep = run_stage1(m, src, &src, c, LossWeights{}, ck);
  ASSERT_TRUE(rep.best_val.has_value());
  EXPECT_TRUE(std::isfinite(*rep.best_val));
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    const auto g = m.parameters()[i].group;
    const bool same = m.parameters()[i].value.data() == before.parameters()[i].value.data();
    const bool on = g == ParamGroup::Global || g == ParamGroup::GlobalInput || g == ParamGroup::Pretrain;
    EXPECT_EQ(same, !on) << m.parameters()[i].name;
  }
  const Checkpoint read = read_checkpoint(ck);
  EXPECT_EQ(read.meta.at("stage"), "1");
  std::filesystem::remove_all(dir);
}

TEST(Train, RejectsBadConfig) {
  TrainConfig c;
  c.warmup_epochs = c.epochs;
  EXPECT_EQ(code_of([&] { c.validate(); }), Errc::InvalidConfig);
  c = TrainConfig{};
  c.lr = 0;
  EXPECT_EQ(code_of([&] { c.validate(); }), Errc::InvalidConfig);
  LossWeights w;
  w.lambda_act = -1;
  EXPECT_EQ(code_of([&] { w.validate(); }), Errc::InvalidConfig);
}
