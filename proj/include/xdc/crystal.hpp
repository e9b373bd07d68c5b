// Crystal structures: lattice geometry, symmetry expansion, a small CIF
// reader and reflection enumeration.

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace xdc {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<std::array<double, 3>, 3>;
using Miller = std::array<int, 3>;
using IMat3 = std::array<std::array<int, 3>, 3>;

/// Unit cell. Lengths in Angstrom, angles in degrees.
struct Lattice {
  double a = 1, b = 1, c = 1;
  double alpha = 90, beta = 90, gamma = 90;

  /// Throws Errc::InvalidLattice when lengths or angles are out of range.
  void validate() const;
  Mat3 metric() const;  // real-space metric tensor G_ij = a_i . a_j
  double volume() const;
};

/// Reciprocal metric tensor G* (Angstrom^-2) with 1/d^2 = h G* h^T.
/// Throws Errc::DegenerateCell when the cell volume is below 1e-6 A^3.
Mat3 reciprocal_metric(const Lattice& lattice);

double d_spacing(const Mat3& recip_metric, const Miller& hkl);

struct AtomSite {
  std::string element;
  Vec3 frac{};  // wrapped into [0,1)
  double occupancy = 1.0;

  bool operator==(const AtomSite&) const = default;
};

/// x' = rotation * x + translation, in fractional coordinates.
struct SymmetryOp {
  IMat3 rotation{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  Vec3 translation{};

  Vec3 apply(const Vec3& x) const;
  int determinant() const;
  std::string to_xyz() const;

  bool operator==(const SymmetryOp&) const = default;
};

/// Parses "x+1/2, -y, z" style operator strings.
SymmetryOp parse_xyz(std::string_view text);
SymmetryOp identity_op();

struct CrystalStructure {
  std::string id;
  Lattice lattice;
  std::vector<AtomSite> sites;  // fully expanded
  std::vector<SymmetryOp> symmetry_ops;
  std::optional<int> space_group_number;
};

inline constexpr double kSiteTolerance = 1e-4;

double wrap_unit(double x);
Vec3 wrap_unit(const Vec3& x);
/// Largest per-axis periodic distance between two fractional positions.
double periodic_distance(const Vec3& p, const Vec3& q);

/// Applies every operator to every site, wraps and deduplicates images.
/// Distinct input sites landing on one position raise Errc::DisorderedStructure.
std::vector<AtomSite> expand_sites(const std::vector<AtomSite>& asymmetric,
                                   const std::vector<SymmetryOp>& ops);

/// Reads the supported CIF subset: one data block, cell parameters, an
/// optional symmetry-operator loop and an atom-site loop.
CrystalStructure parse_structure(std::string_view cif_text);
CrystalStructure load_structure(const std::string& path);

/// Writes a CIF subset document that parse_structure reads back (P1 sites
/// plus the operator list).
std::string to_cif(const CrystalStructure& s);

/// Line-oriented dump: key=value header followed by op and site records.
std::string serialize_structure(const CrystalStructure& s);
CrystalStructure deserialize_structure(std::string_view text);

struct Reflection {
  Miller hkl{};
  double d_spacing = 0;
  double two_theta = 0;  // degrees
  int multiplicity = 1;
};

/// Rotations acting on Miller indices (h' = h R): the distinct rotation parts
/// of the operators plus inversion (Friedel pairs merge in a powder pattern).
std::vector<IMat3> laue_rotations(const std::vector<SymmetryOp>& ops);
Miller apply_to_miller(const IMat3& rot, const Miller& hkl);
/// Distinct images of hkl under the rotation set.
std::vector<Miller> miller_orbit(const std::vector<IMat3>& rotations, const Miller& hkl);

/// One reflection per symmetry-distinct family with 2theta inside
/// [min, max], sorted by 2theta. Throws Errc::EmptyRange for an invalid range.
std::vector<Reflection> enumerate_reflections(const CrystalStructure& structure,
                                              double wavelength,
                                              std::array<double, 2> two_theta_range);

/// Small ordered random structure (orthogonal or monoclinic cell, a few
/// distinct atoms, optional centering) used for synthetic corpora.
CrystalStructure random_structure(const std::string& id, std::mt19937_64& rng);

}  // namespace xdc
