#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "xdc/crystal.hpp"
#include "xdc/error.hpp"

using namespace xdc;

namespace {

const char* kNaP1 = R"(data_na_p1
_cell_length_a 4.0
_cell_length_b 4.0
_cell_length_c 4.0
_cell_angle_alpha 90
_cell_angle_beta 90
_cell_angle_gamma 90
_symmetry_space_group_name_H-M 'P 1'
_space_group_IT_number 1
loop_
_atom_site_label
_atom_site_type_symbol
_atom_site_fract_x
_atom_site_fract_y
_atom_site_fract_z
Na1 Na 0 0 0
)";

const char* kFeBody = R"(data_fe_bcc
_cell_length_a 4.0
_cell_length_b 4.0
_cell_length_c 4.0
_cell_angle_alpha 90
_cell_angle_beta 90
_cell_angle_gamma 90
loop_
_symmetry_equiv_pos_as_xyz
'x, y, z'
'x+1/2, y+1/2, z+1/2'
loop_
_atom_site_label
_atom_site_type_symbol
_atom_site_fract_x
_atom_site_fract_y
_atom_site_fract_z
_atom_site_occupancy
Fe1 Fe 0 0 0 1.0
)";

std::string cubic_with_ops() {
  // full m-3m point group from generators, written as xyz strings
  std::vector<std::string> ops;
  const int perms[6][3] = {{0, 1, 2}, {1, 2, 0}, {2, 0, 1}, {1, 0, 2}, {0, 2, 1}, {2, 1, 0}};
  const char* axes = "xyz";
  for (auto& p : perms)
    for (int s = 0; s < 8; ++s) {
      std::string op;
      for (int i = 0; i < 3; ++i) {
        if (i) op += ", ";
        if (s >> i & 1) op += "-";
        op += axes[p[i]];
      }
      ops.push_back(op);
    }
  std::string text = "data_cubic\n_cell_length_a 4\n_cell_length_b 4\n_cell_length_c 4\n"
                     "_cell_angle_alpha 90\n_cell_angle_beta 90\n_cell_angle_gamma 90\n"
                     "loop_\n_space_group_symop_operation_xyz\n";
  for (auto& o : ops) text += "'" + o + "'\n";
  text += "loop_\n_atom_site_type_symbol\n_atom_site_fract_x\n_atom_site_fract_y\n_atom_site_fract_z\nCu 0 0 0\n";
  return text;
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

TEST(Parse, P1SingleSite) {
  auto s = parse_structure(kNaP1);
  EXPECT_EQ(s.id, "na_p1");
  ASSERT_EQ(s.sites.size(), 1u);
  EXPECT_EQ(s.sites[0].element, "Na");
  EXPECT_NEAR(s.lattice.volume(), 64.0, 1e-9);
  EXPECT_EQ(s.space_group_number, 1);
}

TEST(Parse, BodyCenteringImage) {
  auto s = parse_structure(kFeBody);
  ASSERT_EQ(s.sites.size(), 2u);
  std::set<std::array<double, 3>> pos;
  for (auto& a : s.sites) pos.insert(a.frac);
  EXPECT_TRUE(pos.count({0, 0, 0}));
  EXPECT_TRUE(pos.count({0.5, 0.5, 0.5}));
}

TEST(Parse, DisorderRejected) {
  std::string text = std::string(kNaP1) + "Cl1 Cl 0 0 0\n";
  // fractional occupancies on a shared position
  std::string occ = R"(data_dis
_cell_length_a 4
_cell_length_b 4
_cell_length_c 4
_cell_angle_alpha 90
_cell_angle_beta 90
_cell_angle_gamma 90
loop_
_atom_site_type_symbol
_atom_site_fract_x
_atom_site_fract_y
_atom_site_fract_z
_atom_site_occupancy
Na 0 0 0 0.5
K 0 0 0 0.5
)";
  EXPECT_EQ(code_of([&] { parse_structure(occ); }), Errc::DisorderedStructure);
  EXPECT_EQ(code_of([&] { parse_structure(text); }), Errc::DisorderedStructure);
}

TEST(Parse, Errors) {
  EXPECT_EQ(code_of([] { parse_structure("data_x\n_cell_length_a 4\n"); }), Errc::MissingCell);
  std::string no_sites = "data_x\n_cell_length_a 4\n_cell_length_b 4\n_cell_length_c 4\n"
                         "_cell_angle_alpha 90\n_cell_angle_beta 90\n_cell_angle_gamma 90\n";
  EXPECT_EQ(code_of([&] { parse_structure(no_sites); }), Errc::MissingSites);
  std::string bad_el = std::string(kNaP1);
  bad_el.replace(bad_el.find("Na1 Na"), 6, "Xx1 Xx");
  EXPECT_EQ(code_of([&] { parse_structure(bad_el); }), Errc::UnsupportedElement);
  std::string ragged = std::string(kNaP1) + "Na2 Na 0.5 0.5\n";
  EXPECT_EQ(code_of([&] { parse_structure(ragged); }), Errc::MalformedLoop);
  std::string sg = no_sites + "_space_group_IT_number 225\nloop_\n_atom_site_type_symbol\n"
                   "_atom_site_fract_x\n_atom_site_fract_y\n_atom_site_fract_z\nNa 0 0 0\n";
  EXPECT_EQ(code_of([&] { parse_structure(sg); }), Errc::MissingSymmetry);
}

TEST(Symmetry, ParseXyz) {
  auto op = parse_xyz("-y+1/2, x-y, z+3/4");
  EXPECT_EQ(op.rotation[0], (std::array<int, 3>{0, -1, 0}));
  EXPECT_EQ(op.rotation[1], (std::array<int, 3>{1, -1, 0}));
  EXPECT_NEAR(op.translation[0], 0.5, 1e-15);
  EXPECT_NEAR(op.translation[2], 0.75, 1e-15);
  EXPECT_EQ(parse_xyz(op.to_xyz()), op);
  EXPECT_EQ(code_of([] { parse_xyz("x, x, z"); }), Errc::InvalidSymmetryOp);
}

TEST(Lattice, ReciprocalMetric) {
  Lattice c5{5, 5, 5, 90, 90, 90};
  auto g = reciprocal_metric(c5);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(g[i][j], i == j ? 1.0 / 25 : 0.0, 1e-15);
  Lattice c4{4, 4, 4, 90, 90, 90};
  EXPECT_NEAR(d_spacing(reciprocal_metric(c4), {1, 1, 1}), 2.3094010767585, 1e-12);

  Lattice tri{3.1, 4.7, 5.3, 77, 101, 94};
  auto gt = reciprocal_metric(tri);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(gt[i][j], gt[j][i], 1e-15);
  // G* is the inverse of G
  auto gr = tri.metric();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double acc = 0;
      for (int k = 0; k < 3; ++k) acc += gr[i][k] * gt[k][j];
      EXPECT_NEAR(acc, i == j ? 1.0 : 0.0, 1e-12);
    }
  Lattice flat{4, 4, 4, 90, 90, 179.9999999999};
  EXPECT_EQ(code_of([&] { reciprocal_metric(flat); }), Errc::DegenerateCell);
}

TEST(Reflections, CubicBraggAndMultiplicity) {
  auto s = parse_structure(cubic_with_ops());
  auto refl = enumerate_reflections(s, 1.5406, {10, 80});
  ASSERT_FALSE(refl.empty());
  const Reflection* r111 = nullptr;
  const Reflection* r100 = nullptr;
  for (auto& r : refl) {
    const double rel = std::abs(2 * r.d_spacing * std::sin(r.two_theta / 2 * M_PI / 180) - 1.5406) / 1.5406;
    EXPECT_LT(rel, 1e-9);
    if (r.hkl == Miller{1, 1, 1}) r111 = &r;
    if (r.hkl == Miller{1, 0, 0}) r100 = &r;
  }
  ASSERT_NE(r111, nullptr);
  ASSERT_NE(r100, nullptr);
  EXPECT_NEAR(r111->two_theta, 38.96873821328758, 1e-9);
  EXPECT_EQ(r111->multiplicity, 8);
  EXPECT_EQ(r100->multiplicity, 6);
  for (std::size_t i = 1; i < refl.size(); ++i) EXPECT_LE(refl[i - 1].two_theta, refl[i].two_theta);
}

TEST(Reflections, OrbitProperty) {
  auto s = parse_structure(cubic_with_ops());
  auto rots = laue_rotations(s.symmetry_ops);
  for (Miller h : {Miller{1, 2, 3}, Miller{2, 2, 0}, Miller{3, 0, 0}}) {
    auto orbit = miller_orbit(rots, h);
    // brute force: count distinct images directly
    std::set<Miller> direct;
    for (auto& r : rots) direct.insert(apply_to_miller(r, h));
    EXPECT_EQ(orbit.size(), direct.size());
    for (auto& img : orbit) EXPECT_EQ(miller_orbit(rots, img).size(), orbit.size());
  }
  EXPECT_EQ(miller_orbit(rots, {1, 2, 3}).size(), 48u);
}

TEST(Reflections, EmptyAndErrors) {
  auto s = parse_structure(kNaP1);
  EXPECT_TRUE(enumerate_reflections(s, 100.0, {10, 80}).empty());
  EXPECT_EQ(code_of([&] { enumerate_reflections(s, 1.5406, {80, 10}); }), Errc::EmptyRange);
  EXPECT_EQ(code_of([&] { enumerate_reflections(s, 1.5406, {0, 80}); }), Errc::EmptyRange);
}

TEST(Expansion, Idempotent) {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 50; ++t) {
    auto s = random_structure("r" + std::to_string(t), rng);
    auto again = expand_sites(s.sites, s.symmetry_ops);
    ASSERT_EQ(again.size(), s.sites.size());
    for (std::size_t i = 0; i < again.size(); ++i) {
      EXPECT_EQ(again[i].element, s.sites[i].element);
      EXPECT_LT(periodic_distance(again[i].frac, s.sites[i].frac), 1e-9);
    }
  }
}

TEST(RoundTrip, SerializeAndCif) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 30; ++t) {
    auto s = random_structure("rt" + std::to_string(t), rng);
    for (const auto& back : {deserialize_structure(serialize_structure(s)), parse_structure(to_cif(s))}) {
      EXPECT_EQ(back.id, s.id);
      EXPECT_NEAR(back.lattice.a, s.lattice.a, 1e-9);
      EXPECT_NEAR(back.lattice.beta, s.lattice.beta, 1e-9);
      ASSERT_EQ(back.sites.size(), s.sites.size());
      for (std::size_t i = 0; i < s.sites.size(); ++i) {
        EXPECT_EQ(back.sites[i].element, s.sites[i].element);
        EXPECT_LT(periodic_distance(back.sites[i].frac, s.sites[i].frac), 1e-9);
        EXPECT_NEAR(back.sites[i].occupancy, s.sites[i].occupancy, 1e-9);
      }
      EXPECT_EQ(back.symmetry_ops.size(), s.symmetry_ops.size());
    }
  }
}
