#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "xdc/dataset.hpp"
#include "xdc/error.hpp"

using namespace xdc;

namespace {

ReferenceLibrary toy_library(int n, std::uint64_t seed) {
  ReferenceLibrary lib;
  lib.grid = Grid{10, 0.02, 500};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  for (int k = 0; k < n; ++k) {
    DiffractionPattern p(lib.grid);
    for (int j = 0; j < 4; ++j) add_profile(p.intensities, lib.grid, 10.5 + 9 * u(rng), 0.1 + 0.1 * u(rng), u(rng));
    p.normalize_max();
    lib.entries.emplace("id" + std::to_string(k), std::move(p));
  }
  return lib;
}

Errc code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return Errc::Usage;
}

}  // namespace

TEST(Cardinality, UniformSupport) {
  std::mt19937_64 rng(1);
  int counts[5] = {};
  const int n = 30000;
  for (int i = 0; i < n; ++i) {
    const int k = sample_cardinality(rng);
    ASSERT_GE(k, 2);
    ASSERT_LE(k, 4);
    ++counts[k];
  }
  for (int k = 2; k <= 4; ++k) {
    EXPECT_GE(counts[k] / double(n), 0.323);
    EXPECT_LE(counts[k] / double(n), 0.343);
  }
  std::mt19937_64 a(5), b(5);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_cardinality(a), sample_cardinality(b));
}

TEST(Weights, FloorAndSum) {
  std::mt19937_64 rng(2);
  for (int n : {2, 3, 4})
    for (int t = 0; t < 2000; ++t) {
      auto w = sample_weights(n, 1.0, 0.15, rng);
      double s = 0;
      for (double v : w) {
        EXPECT_GE(v, 0.15);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  EXPECT_EQ(code_of([&] { sample_weights(7, 1.0, 0.15, rng); }), Errc::InfeasibleFloor);
  auto g = sample_weights(3, 2.5, 0.15, rng);
  EXPECT_EQ(g.size(), 3u);
}

TEST(Weights, ExchangeableMarginals) {
  std::mt19937_64 rng(3);
  const int n = 20000;
  double mean[3] = {};
  for (int t = 0; t < n; ++t) {
    auto w = sample_weights(3, 1.0, 0.15, rng);
    for (int k = 0; k < 3; ++k) mean[k] += w[k] / n;
  }
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(mean[k], 1.0 / 3, 0.005);
}

TEST(Mixture, ShapesAndLinearity) {
  auto lib = toy_library(8, 4);
  auto pool = lib.ids();
  MixtureConfig cfg;
  cfg.noise_sigma = 0;
  for (std::uint64_t i = 0; i < 50; ++i) {
    auto s = mixture_at(lib, pool, 0, i, 17, cfg);
    ASSERT_EQ(s.components.size(), 4u);
    EXPECT_EQ(s.component_ids.front(), pool[i % pool.size()]);
    std::set<std::string> distinct(s.component_ids.begin(), s.component_ids.end());
    EXPECT_EQ(static_cast<int>(distinct.size()), s.active_count);
    double top = s.mixed.max();
    for (int k = 0; k < 4; ++k) {
      top = std::max(top, s.components[k].max());
      if (k >= s.active_count) {
        for (double v : s.components[k].intensities) EXPECT_EQ(v, 0.0);
      }
    }
    EXPECT_NEAR(top, 1.0, 1e-15);
    for (std::size_t t = 0; t < s.mixed.size(); ++t) {
      double acc = 0;
      for (int k = 0; k < s.active_count; ++k) acc += s.weights[k] * s.components[k].intensities[t];
      EXPECT_NEAR(s.mixed.intensities[t], acc, 1e-15);
    }
  }
}

TEST(Mixture, DeterministicStreamsAndErrors) {
  auto lib = toy_library(6, 5);
  auto pool = lib.ids();
  MixtureConfig cfg;
  auto a = mixture_at(lib, pool, 3, 9, 1, cfg);
  auto b = mixture_at(lib, pool, 3, 9, 1, cfg);
  EXPECT_EQ(a.mixed.intensities, b.mixed.intensities);
  EXPECT_EQ(a.component_ids, b.component_ids);
  auto c = mixture_at(lib, pool, 4, 9, 1, cfg);
  EXPECT_NE(a.mixed.intensities, c.mixed.intensities);
  for (double v : a.mixed.intensities) EXPECT_GE(v, 0.0);

  std::mt19937_64 rng(0);
  EXPECT_EQ(code_of([&] { make_mixture(lib, pool, "nope", rng, cfg); }), Errc::UnknownAnchor);
  std::vector<std::string> small(pool.begin(), pool.begin() + 3);
  EXPECT_EQ(code_of([&] { make_mixture(lib, small, small[0], rng, cfg); }), Errc::InsufficientLibrary);
}

TEST(Split, PartitionAndDeterminism) {
  std::vector<std::string> ids;
  for (int i = 0; i < 10; ++i) ids.push_back("c" + std::to_string(i));
  auto m = split_by_crystal(ids, {0.8, 0.1, 0.1}, 42);
  EXPECT_EQ(m.train.size(), 8u);
  EXPECT_EQ(m.val.size(), 1u);
  EXPECT_EQ(m.test.size(), 1u);
  std::set<std::string> all;
  for (auto* v : {&m.train, &m.val, &m.test}) all.insert(v->begin(), v->end());
  EXPECT_EQ(all.size(), 10u);
  auto again = split_by_crystal(ids, {0.8, 0.1, 0.1}, 42);
  EXPECT_EQ(again.train, m.train);
  EXPECT_EQ(again.test, m.test);
  ids.push_back("c3");
  EXPECT_EQ(code_of([&] { split_by_crystal(ids, {0.8, 0.1, 0.1}, 42); }), Errc::DuplicateIds);

  const auto path = (std::filesystem::temp_directory_path() / "xdc_manifest_test.txt").string();
  write_manifest(path, m);
  auto back = read_manifest(path);
  EXPECT_EQ(back.train, m.train);
  EXPECT_EQ(back.val, m.val);
  EXPECT_EQ(back.seed, 42u);
  std::filesystem::remove(path);
}

TEST(Snip, ConstantAndClamp) {
  std::vector<double> flat(400, 3.5);
  auto bg = snip_background(flat);
  for (double v : bg) EXPECT_NEAR(v, 3.5, 1e-12);

  Grid g{10, 0.02, 1500};
  std::vector<double> y(g.length, 2.0);
  const double fwhm = 0.2;
  add_profile(y, g, 25.0, fwhm, 1.0);
  bg = snip_background(y);
  for (std::size_t i = 0; i < y.size(); ++i) {
    EXPECT_LE(bg[i], y[i]);
    if (std::abs(g.at(i) - 25.0) >= 3 * fwhm) {
      EXPECT_NEAR(bg[i], 2.0, 0.05 * 2.0);
    }
  }
  std::vector<double> neg{1.0, -0.1};
  EXPECT_EQ(code_of([&] { snip_background(neg); }), Errc::NegativeInput);
}

TEST(Resample, InterpolationRules) {
  Grid g{10, 0.5, 141};
  std::vector<std::pair<double, double>> ramp{{10, 0}, {80, 1}};
  auto p = resample_to_grid(ramp, g);
  for (std::size_t i = 0; i < g.length; ++i) EXPECT_NEAR(p.intensities[i], (g.at(i) - 10) / 70, 1e-12);

  std::vector<std::pair<double, double>> on_grid;
  for (std::size_t i = 0; i < g.length; ++i) on_grid.emplace_back(g.at(i), 2.0 + std::sin(0.1 * i));
  auto q = resample_to_grid(on_grid, g);
  double mx = 0;
  for (auto& r : on_grid) mx = std::max(mx, r.second);
  for (std::size_t i = 0; i < g.length; ++i) EXPECT_NEAR(q.intensities[i], on_grid[i].second / mx, 1e-12);

  std::vector<std::pair<double, double>> part{{15, 1}, {70, 1}};
  auto r = resample_to_grid(part, g);
  for (std::size_t i = 0; i < g.length; ++i) {
    const double x = g.at(i);
    EXPECT_EQ(r.intensities[i], (x >= 15 && x <= 70) ? 1.0 : 0.0) << x;
  }
  std::vector<std::pair<double, double>> bad{{20, 1}, {15, 1}};
  EXPECT_EQ(code_of([&] { resample_to_grid(bad, g); }), Errc::NonMonotonicAngles);
  EXPECT_EQ(code_of([&] { resample_to_grid({}, g); }), Errc::EmptyInput);
}

TEST(Library, BuildAndPersist) {
  std::mt19937_64 rng(8);
  std::vector<CrystalStructure> ss;
  for (int i = 0; i < 4; ++i) ss.push_back(random_structure("s" + std::to_string(i), rng));
  SimConfig base;
  auto lib = build_library(ss, base, 5, 20, 2);
  auto lib1 = build_library(ss, base, 5, 20, 1);
  ASSERT_EQ(lib.entries.size(), 4u);
  for (const auto& [id, p] : lib.entries) {
    EXPECT_NEAR(p.max(), 1.0, 1e-15);
    EXPECT_EQ(p.intensities, lib1.at(id).intensities);
  }
  const auto dir = (std::filesystem::temp_directory_path() / "xdc_lib_test").string();
  write_library(dir, lib);
  auto back = read_library(dir);
  ASSERT_EQ(back.entries.size(), 4u);
  for (const auto& [id, p] : lib.entries) EXPECT_EQ(back.at(id).intensities, p.intensities);
  std::filesystem::remove_all(dir);
}

TEST(Library, SelectedCandidateMatchesLibraryEntry) {
  std::mt19937_64 rng(12);
  const auto s = random_structure("c0", rng);
  SimConfig base;
  const auto lib = build_library({s}, base, 9, 5, 1);
  const int pick = selected_candidate("c0", 9, 5);
  ASSERT_GE(pick, 0);
  ASSERT_LT(pick, 5);
  EXPECT_EQ(render_candidate(s, base, 9, pick).intensities, lib.at("c0").intensities);
}

TEST(Mixture, WriteReadRoundTrip) {
  auto lib = toy_library(6, 3);
  const auto pool = lib.ids();
  const auto s = mixture_at(lib, pool, 0, 2, 4, MixtureConfig{});
  const auto dir = (std::filesystem::temp_directory_path() / "xdc_mix_test").string();
  write_mixture(dir, s);
  const auto back = read_mixture(dir);
  EXPECT_EQ(back.mixed.intensities, s.mixed.intensities);
  EXPECT_TRUE(back.mixed.grid.same_as(s.mixed.grid));
  EXPECT_EQ(back.weights, s.weights);
  EXPECT_EQ(back.component_ids, s.component_ids);
  EXPECT_EQ(back.active_count, s.active_count);
  ASSERT_EQ(back.components.size(), s.components.size());
  EXPECT_EQ(back.weighted_targets(), s.weighted_targets());
  std::filesystem::remove_all(dir);
}
