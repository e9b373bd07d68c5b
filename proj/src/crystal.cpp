#include "xdc/crystal.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "xdc/elements.hpp"
#include "xdc/error.hpp"

namespace xdc {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

Mat3 inverse(const Mat3& m) {
  const double det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                     m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                     m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  Mat3 r{};
  r[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det;
  r[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det;
  r[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det;
  r[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det;
  r[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det;
  r[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det;
  r[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det;
  r[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det;
  r[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det;
  return r;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::optional<double> parse_number(std::string_view s) {
  // CIF values may carry a standard uncertainty: 4.0123(5)
  if (auto p = s.find('('); p != std::string_view::npos) s = s.substr(0, p);
  if (s.empty() || s == "." || s == "?") return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

double parse_fraction(std::string_view s) {
  if (auto slash = s.find('/'); slash != std::string_view::npos) {
    auto num = parse_number(s.substr(0, slash));
    auto den = parse_number(s.substr(slash + 1));
    if (!num || !den || *den == 0) fail(Errc::InvalidSymmetryOp, "bad fraction '" + std::string(s) + "'");
    return *num / *den;
  }
  auto v = parse_number(s);
  if (!v) fail(Errc::InvalidSymmetryOp, "bad number '" + std::string(s) + "'");
  return *v;
}

// ---- CIF tokenizer -------------------------------------------------------

struct Token {
  std::string text;
  bool quoted = false;
};

std::vector<Token> tokenize_cif(std::string_view text) {
  std::vector<Token> out;
  std::size_t i = 0;
  const std::size_t n = text.size();
  bool line_start = true;
  while (i < n) {
    const char ch = text[i];
    if (ch == '\n') {
      line_start = true;
      ++i;
      continue;
    }
    if (ch == ' ' || ch == '\t' || ch == '\r') {
      ++i;
      continue;
    }
    if (ch == '#') {
      while (i < n && text[i] != '\n') ++i;
      continue;
    }
    if (ch == ';' && line_start) {
      // semicolon-delimited text field
      auto end = text.find("\n;", i + 1);
      if (end == std::string_view::npos) fail(Errc::MalformedLoop, "unterminated text field");
      out.push_back({std::string(text.substr(i + 1, end - i - 1)), true});
      i = end + 2;
      line_start = false;
      continue;
    }
    line_start = false;
    if (ch == '\'' || ch == '"') {
      std::size_t j = i + 1;
      // a closing quote must be followed by whitespace or end of input
      while (j < n && !(text[j] == ch && (j + 1 == n || std::isspace(static_cast<unsigned char>(text[j + 1])))))
        ++j;
      if (j >= n) fail(Errc::MalformedLoop, "unterminated quoted value");
      out.push_back({std::string(text.substr(i + 1, j - i - 1)), true});
      i = j + 1;
      continue;
    }
    std::size_t j = i;
    while (j < n && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    out.push_back({std::string(text.substr(i, j - i)), false});
    i = j;
  }
  return out;
}

bool starts_with_ci(std::string_view s, std::string_view prefix) {
  if (s.size() < prefix.size()) return false;
  for (std::size_t i = 0; i < prefix.size(); ++i)
    if (std::tolower(static_cast<unsigned char>(s[i])) != std::tolower(static_cast<unsigned char>(prefix[i])))
      return false;
  return true;
}

std::string lower(std::string_view s) {
  std::string r(s);
  for (auto& ch : r) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return r;
}

struct CifLoop {
  std::vector<std::string> tags;
  std::vector<std::vector<std::string>> rows;

  int column(std::string_view tag) const {
    for (std::size_t i = 0; i < tags.size(); ++i)
      if (tags[i] == tag) return static_cast<int>(i);
    return -1;
  }
};

struct CifBlock {
  std::string name;
  std::map<std::string, std::string> items;
  std::vector<CifLoop> loops;
};

CifBlock read_block(std::string_view text) {
  const auto tokens = tokenize_cif(text);
  CifBlock block;
  bool have_block = false;
  std::size_t i = 0;
  auto is_keyword = [](const Token& t) {
    return !t.quoted && (t.text.front() == '_' || starts_with_ci(t.text, "loop_") ||
                         starts_with_ci(t.text, "data_") || starts_with_ci(t.text, "save_") ||
                         starts_with_ci(t.text, "global_"));
  };
  while (i < tokens.size()) {
    const Token& t = tokens[i];
    if (!t.quoted && starts_with_ci(t.text, "data_")) {
      if (have_block) fail(Errc::UnsupportedCifFeature, "multiple data blocks are not supported");
      have_block = true;
      block.name = t.text.substr(5);
      ++i;
    } else if (!t.quoted && (starts_with_ci(t.text, "save_") || starts_with_ci(t.text, "global_"))) {
      fail(Errc::UnsupportedCifFeature, "save frames / global blocks are not supported");
    } else if (!t.quoted && starts_with_ci(t.text, "loop_")) {
      ++i;
      CifLoop loop;
      while (i < tokens.size() && !tokens[i].quoted && tokens[i].text.front() == '_')
        loop.tags.push_back(lower(tokens[i++].text));
      if (loop.tags.empty()) fail(Errc::MalformedLoop, "loop_ without tags");
      std::vector<std::string> values;
      while (i < tokens.size() && !is_keyword(tokens[i])) values.push_back(tokens[i++].text);
      if (values.size() % loop.tags.size() != 0)
        fail(Errc::MalformedLoop, "loop starting with " + loop.tags.front() + " has " +
                                      std::to_string(values.size()) + " values for " +
                                      std::to_string(loop.tags.size()) + " columns");
      for (std::size_t r = 0; r < values.size(); r += loop.tags.size())
        loop.rows.emplace_back(values.begin() + static_cast<long>(r),
                               values.begin() + static_cast<long>(r + loop.tags.size()));
      block.loops.push_back(std::move(loop));
    } else if (!t.quoted && t.text.front() == '_') {
      if (i + 1 >= tokens.size() || is_keyword(tokens[i + 1]))
        fail(Errc::MalformedLoop, "tag " + t.text + " has no value");
      block.items[lower(t.text)] = tokens[i + 1].text;
      i += 2;
    } else {
      fail(Errc::MalformedLoop, "unexpected value '" + t.text + "' outside a loop");
    }
  }
  if (!have_block) fail(Errc::UnsupportedCifFeature, "no data_ block");
  return block;
}

double require_cell(const CifBlock& b, const std::string& tag) {
  auto it = b.items.find(tag);
  if (it == b.items.end()) fail(Errc::MissingCell, "missing " + tag);
  auto v = parse_number(it->second);
  if (!v) fail(Errc::MissingCell, "unreadable " + tag + " '" + it->second + "'");
  return *v;
}

IMat3 imultiply(const IMat3& a, const IMat3& b) {
  IMat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      r[i][j] = 0;
      for (int k = 0; k < 3; ++k) r[i][j] += a[i][k] * b[k][j];
    }
  return r;
}

}  // namespace

// ---- lattice ---------------------------------------------------------------

void Lattice::validate() const {
  for (double len : {a, b, c})
    if (!(len > 0) || !std::isfinite(len)) fail(Errc::InvalidLattice, "cell lengths must be positive");
  for (double ang : {alpha, beta, gamma})
    if (!(ang > 0 && ang < 180)) fail(Errc::InvalidLattice, "cell angles must lie in (0, 180) degrees");
}

Mat3 Lattice::metric() const {
  const double ca = std::cos(alpha * kDeg), cb = std::cos(beta * kDeg), cg = std::cos(gamma * kDeg);
  return {{{a * a, a * b * cg, a * c * cb}, {a * b * cg, b * b, b * c * ca}, {a * c * cb, b * c * ca, c * c}}};
}

double Lattice::volume() const {
  const double ca = std::cos(alpha * kDeg), cb = std::cos(beta * kDeg), cg = std::cos(gamma * kDeg);
  const double arg = 1 - ca * ca - cb * cb - cg * cg + 2 * ca * cb * cg;
  return arg > 0 ? a * b * c * std::sqrt(arg) : 0.0;
}

Mat3 reciprocal_metric(const Lattice& lattice) {
  lattice.validate();
  if (lattice.volume() < 1e-6) fail(Errc::DegenerateCell, "cell volume below 1e-6 A^3");
  Mat3 g = inverse(lattice.metric());
  // symmetrize away rounding from the cofactor expansion
  for (int i = 0; i < 3; ++i)
    for (int j = i + 1; j < 3; ++j) g[i][j] = g[j][i] = 0.5 * (g[i][j] + g[j][i]);
  return g;
}

double d_spacing(const Mat3& g, const Miller& hkl) {
  double inv_d2 = 0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) inv_d2 += hkl[i] * g[i][j] * hkl[j];
  return 1.0 / std::sqrt(inv_d2);
}

// ---- symmetry --------------------------------------------------------------

Vec3 SymmetryOp::apply(const Vec3& x) const {
  Vec3 r{};
  for (int i = 0; i < 3; ++i)
    r[i] = rotation[i][0] * x[0] + rotation[i][1] * x[1] + rotation[i][2] * x[2] + translation[i];
  return r;
}

int SymmetryOp::determinant() const {
  const auto& m = rotation;
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

std::string SymmetryOp::to_xyz() const {
  static const char* axes = "xyz";
  std::string out;
  for (int i = 0; i < 3; ++i) {
    std::string comp;
    for (int j = 0; j < 3; ++j) {
      const int r = rotation[i][j];
      if (r == 0) continue;
      if (r < 0)
        comp += '-';
      else if (!comp.empty())
        comp += '+';
      if (std::abs(r) != 1) comp += std::to_string(std::abs(r)) + "*";
      comp += axes[j];
    }
    const double t = translation[i];
    if (t != 0) {
      if (t > 0 && !comp.empty()) comp += '+';
      comp += fmt_double(t);
    }
    if (comp.empty()) comp = "0";
    if (i) out += ',';
    out += comp;
  }
  return out;
}

SymmetryOp identity_op() { return SymmetryOp{}; }

SymmetryOp parse_xyz(std::string_view text) {
  SymmetryOp op;
  op.rotation = {};
  std::vector<std::string> parts;
  std::string cur;
  for (char ch : text) {
    if (ch == ',') {
      parts.push_back(cur);
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(ch)) && ch != '\'' && ch != '"') {
      cur += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
  }
  parts.push_back(cur);
  if (parts.size() != 3) fail(Errc::InvalidSymmetryOp, "expected three components in '" + std::string(text) + "'");
  for (int row = 0; row < 3; ++row) {
    const std::string& p = parts[row];
    if (p.empty()) fail(Errc::InvalidSymmetryOp, "empty component in '" + std::string(text) + "'");
    std::size_t i = 0;
    while (i < p.size()) {
      int sign = 1;
      if (p[i] == '+' || p[i] == '-') {
        sign = p[i] == '-' ? -1 : 1;
        ++i;
      }
      if (i >= p.size()) fail(Errc::InvalidSymmetryOp, "dangling sign in '" + p + "'");
      std::size_t j = i;
      while (j < p.size() && p[j] != '+' && p[j] != '-') ++j;
      std::string term = p.substr(i, j - i);
      i = j;
      const char last = term.back();
      if (last == 'x' || last == 'y' || last == 'z') {
        int coeff = 1;
        std::string prefix = term.substr(0, term.size() - 1);
        if (!prefix.empty() && prefix.back() == '*') prefix.pop_back();
        if (!prefix.empty()) {
          auto v = parse_number(prefix);
          if (!v || *v != std::round(*v)) fail(Errc::InvalidSymmetryOp, "bad coefficient in '" + p + "'");
          coeff = static_cast<int>(*v);
        }
        op.rotation[row][last - 'x'] += sign * coeff;
      } else {
        op.translation[row] += sign * parse_fraction(term);
      }
    }
  }
  const int det = op.determinant();
  if (det != 1 && det != -1)
    fail(Errc::InvalidSymmetryOp, "rotation part of '" + std::string(text) + "' has determinant " + std::to_string(det));
  return op;
}

double wrap_unit(double x) {
  double r = x - std::floor(x);
  if (r >= 1.0 - 1e-12) r = 0.0;
  if (std::abs(r) < 1e-12) r = 0.0;
  return r;
}

Vec3 wrap_unit(const Vec3& x) { return {wrap_unit(x[0]), wrap_unit(x[1]), wrap_unit(x[2])}; }

double periodic_distance(const Vec3& p, const Vec3& q) {
  double worst = 0;
  for (int i = 0; i < 3; ++i) {
    double d = p[i] - q[i];
    d -= std::round(d);
    worst = std::max(worst, std::abs(d));
  }
  return worst;
}

std::vector<AtomSite> expand_sites(const std::vector<AtomSite>& asymmetric, const std::vector<SymmetryOp>& ops) {
  std::vector<AtomSite> out;
  std::vector<std::size_t> origin;  // index of the generating input site
  const std::vector<SymmetryOp> use = ops.empty() ? std::vector<SymmetryOp>{identity_op()} : ops;
  for (std::size_t s = 0; s < asymmetric.size(); ++s) {
    const AtomSite& site = asymmetric[s];
    for (const auto& op : use) {
      const Vec3 p = wrap_unit(op.apply(site.frac));
      bool merged = false;
      for (std::size_t k = 0; k < out.size(); ++k) {
        if (periodic_distance(out[k].frac, p) >= kSiteTolerance) continue;
        if (origin[k] == s) {
          merged = true;
          break;
        }
        const AtomSite& other = out[k];
        if (other.element == site.element && std::abs(other.occupancy - site.occupancy) < 1e-9) {
          merged = true;  // duplicate listing of the same atom
          break;
        }
        fail(Errc::DisorderedStructure,
             "sites " + other.element + " (occ " + fmt_double(other.occupancy) + ") and " + site.element +
                 " (occ " + fmt_double(site.occupancy) + ") share a position; disordered structures are excluded");
      }
      if (!merged) {
        out.push_back({site.element, p, site.occupancy});
        origin.push_back(s);
      }
    }
  }
  return out;
}

// ---- CIF -------------------------------------------------------------------

CrystalStructure parse_structure(std::string_view cif_text) {
  const CifBlock block = read_block(cif_text);
  CrystalStructure s;
  s.id = block.name;

  for (const auto& [tag, value] : block.items)
    if (starts_with_ci(tag, "_atom_site_aniso")) fail(Errc::UnsupportedCifFeature, "anisotropic ADPs are not supported");
  for (const auto& loop : block.loops)
    for (const auto& tag : loop.tags)
      if (starts_with_ci(tag, "_atom_site_aniso"))
        fail(Errc::UnsupportedCifFeature, "anisotropic ADP loops are not supported");

  s.lattice.a = require_cell(block, "_cell_length_a");
  s.lattice.b = require_cell(block, "_cell_length_b");
  s.lattice.c = require_cell(block, "_cell_length_c");
  s.lattice.alpha = require_cell(block, "_cell_angle_alpha");
  s.lattice.beta = require_cell(block, "_cell_angle_beta");
  s.lattice.gamma = require_cell(block, "_cell_angle_gamma");
  try {
    s.lattice.validate();
  } catch (const Error& e) {
    fail(Errc::MissingCell, e.what());
  }

  for (const char* tag : {"_space_group_it_number", "_symmetry_int_tables_number"}) {
    if (auto it = block.items.find(tag); it != block.items.end()) {
      if (auto v = parse_number(it->second)) {
        const int sg = static_cast<int>(*v);
        if (sg >= 1 && sg <= 230) s.space_group_number = sg;
      }
    }
  }

  const CifLoop* sym_loop = nullptr;
  int sym_col = -1;
  const CifLoop* atom_loop = nullptr;
  for (const auto& loop : block.loops) {
    for (const char* tag : {"_symmetry_equiv_pos_as_xyz", "_space_group_symop_operation_xyz"}) {
      if (int c = loop.column(tag); c >= 0) {
        sym_loop = &loop;
        sym_col = c;
      }
    }
    if (loop.column("_atom_site_fract_x") >= 0) atom_loop = &loop;
  }

  if (sym_loop) {
    for (const auto& row : sym_loop->rows) s.symmetry_ops.push_back(parse_xyz(row[sym_col]));
  } else {
    if (s.space_group_number && *s.space_group_number != 1)
      fail(Errc::MissingSymmetry, "space group " + std::to_string(*s.space_group_number) +
                                      " given without an explicit symmetry-operator loop");
    s.symmetry_ops.push_back(identity_op());
  }

  if (!atom_loop) fail(Errc::MissingSites, "no _atom_site loop with fractional coordinates");
  const int cx = atom_loop->column("_atom_site_fract_x");
  const int cy = atom_loop->column("_atom_site_fract_y");
  const int cz = atom_loop->column("_atom_site_fract_z");
  if (cy < 0 || cz < 0) fail(Errc::MalformedLoop, "atom-site loop lacks fract_y or fract_z");
  const int ctype = atom_loop->column("_atom_site_type_symbol");
  const int clabel = atom_loop->column("_atom_site_label");
  const int cocc = atom_loop->column("_atom_site_occupancy");
  if (ctype < 0 && clabel < 0) fail(Errc::MalformedLoop, "atom-site loop has neither type_symbol nor label");

  std::vector<AtomSite> asym;
  for (const auto& row : atom_loop->rows) {
    AtomSite site;
    site.element = normalize_element_symbol(row[ctype >= 0 ? ctype : clabel]);
    if (!is_supported_element(site.element)) element(row[ctype >= 0 ? ctype : clabel]);  // throws
    auto x = parse_number(row[cx]), y = parse_number(row[cy]), z = parse_number(row[cz]);
    if (!x || !y || !z) fail(Errc::MalformedLoop, "unreadable coordinates for site " + row[clabel >= 0 ? clabel : ctype]);
    site.frac = wrap_unit(Vec3{*x, *y, *z});
    if (cocc >= 0) {
      auto occ = parse_number(row[cocc]);
      site.occupancy = occ.value_or(1.0);
      if (!(site.occupancy > 0 && site.occupancy <= 1.0 + 1e-9))
        fail(Errc::MalformedLoop, "occupancy outside (0, 1]");
      site.occupancy = std::min(site.occupancy, 1.0);
    }
    asym.push_back(site);
  }
  if (asym.empty()) fail(Errc::MissingSites, "atom-site loop is empty");
  s.sites = expand_sites(asym, s.symmetry_ops);
  return s;
}

CrystalStructure load_structure(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::Io, "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_structure(ss.str());
}

std::string to_cif(const CrystalStructure& s) {
  std::ostringstream o;
  o << "data_" << s.id << "\n";
  o << "_cell_length_a " << fmt_double(s.lattice.a) << "\n";
  o << "_cell_length_b " << fmt_double(s.lattice.b) << "\n";
  o << "_cell_length_c " << fmt_double(s.lattice.c) << "\n";
  o << "_cell_angle_alpha " << fmt_double(s.lattice.alpha) << "\n";
  o << "_cell_angle_beta " << fmt_double(s.lattice.beta) << "\n";
  o << "_cell_angle_gamma " << fmt_double(s.lattice.gamma) << "\n";
  if (s.space_group_number) o << "_space_group_IT_number " << *s.space_group_number << "\n";
  o << "loop_\n_space_group_symop_operation_xyz\n";
  for (const auto& op : s.symmetry_ops) o << "'" << op.to_xyz() << "'\n";
  o << "loop_\n_atom_site_label\n_atom_site_type_symbol\n_atom_site_fract_x\n_atom_site_fract_y\n"
       "_atom_site_fract_z\n_atom_site_occupancy\n";
  int k = 0;
  for (const auto& site : s.sites)
    o << site.element << ++k << ' ' << site.element << ' ' << fmt_double(site.frac[0]) << ' '
      << fmt_double(site.frac[1]) << ' ' << fmt_double(site.frac[2]) << ' ' << fmt_double(site.occupancy) << "\n";
  return o.str();
}

// ---- dump format -----------------------------------------------------------

std::string serialize_structure(const CrystalStructure& s) {
  std::ostringstream o;
  o << "# xdc-structure v1\n";
  o << "id=" << s.id << "\n";
  o << "a=" << fmt_double(s.lattice.a) << "\nb=" << fmt_double(s.lattice.b) << "\nc=" << fmt_double(s.lattice.c)
    << "\n";
  o << "alpha=" << fmt_double(s.lattice.alpha) << "\nbeta=" << fmt_double(s.lattice.beta)
    << "\ngamma=" << fmt_double(s.lattice.gamma) << "\n";
  o << "space_group=" << (s.space_group_number ? std::to_string(*s.space_group_number) : "unknown") << "\n";
  o << "ops=" << s.symmetry_ops.size() << "\n";
  for (const auto& op : s.symmetry_ops) {
    o << "op";
    for (const auto& row : op.rotation)
      for (int v : row) o << ' ' << v;
    for (double t : op.translation) o << ' ' << fmt_double(t);
    o << "\n";
  }
  o << "sites=" << s.sites.size() << "\n";
  for (const auto& site : s.sites)
    o << "site " << site.element << ' ' << fmt_double(site.frac[0]) << ' ' << fmt_double(site.frac[1]) << ' '
      << fmt_double(site.frac[2]) << ' ' << fmt_double(site.occupancy) << "\n";
  return o.str();
}

CrystalStructure deserialize_structure(std::string_view text) {
  CrystalStructure s;
  std::istringstream in{std::string(text)};
  std::string line;
  std::map<std::string, std::string> kv;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    if (line.rfind("op ", 0) == 0) {
      std::string tag;
      ls >> tag;
      SymmetryOp op;
      for (auto& row : op.rotation)
        for (int& v : row) ls >> v;
      for (double& t : op.translation) ls >> t;
      if (!ls) fail(Errc::MalformedLoop, "bad op record: " + line);
      s.symmetry_ops.push_back(op);
    } else if (line.rfind("site ", 0) == 0) {
      std::string tag;
      AtomSite site;
      ls >> tag >> site.element >> site.frac[0] >> site.frac[1] >> site.frac[2] >> site.occupancy;
      if (!ls) fail(Errc::MalformedLoop, "bad site record: " + line);
      element(site.element);
      s.sites.push_back(site);
    } else if (auto eq = line.find('='); eq != std::string::npos) {
      kv[line.substr(0, eq)] = line.substr(eq + 1);
    } else {
      fail(Errc::MalformedLoop, "unrecognized line: " + line);
    }
  }
  auto num = [&](const char* key) {
    auto it = kv.find(key);
    if (it == kv.end()) fail(Errc::MissingCell, std::string("dump lacks ") + key);
    auto v = parse_number(it->second);
    if (!v) fail(Errc::MissingCell, std::string("bad value for ") + key);
    return *v;
  };
  s.id = kv["id"];
  s.lattice = {num("a"), num("b"), num("c"), num("alpha"), num("beta"), num("gamma")};
  s.lattice.validate();
  if (auto it = kv.find("space_group"); it != kv.end() && it->second != "unknown")
    s.space_group_number = std::stoi(it->second);
  if (s.sites.empty()) fail(Errc::MissingSites, "dump has no sites");
  return s;
}

// ---- reflections -----------------------------------------------------------

Miller apply_to_miller(const IMat3& r, const Miller& h) {
  return {h[0] * r[0][0] + h[1] * r[1][0] + h[2] * r[2][0], h[0] * r[0][1] + h[1] * r[1][1] + h[2] * r[2][1],
          h[0] * r[0][2] + h[1] * r[1][2] + h[2] * r[2][2]};
}

std::vector<IMat3> laue_rotations(const std::vector<SymmetryOp>& ops) {
  std::set<IMat3> group;
  IMat3 id{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  IMat3 inv{{{-1, 0, 0}, {0, -1, 0}, {0, 0, -1}}};
  group.insert(id);
  group.insert(inv);
  for (const auto& op : ops) group.insert(op.rotation);
  // close the set under composition (user operator lists may be partial)
  bool grew = true;
  while (grew && group.size() <= 96) {
    grew = false;
    std::vector<IMat3> cur(group.begin(), group.end());
    for (const auto& a : cur)
      for (const auto& b : cur)
        if (group.insert(imultiply(a, b)).second) grew = true;
  }
  return {group.begin(), group.end()};
}

std::vector<Miller> miller_orbit(const std::vector<IMat3>& rotations, const Miller& hkl) {
  std::set<Miller> images;
  for (const auto& r : rotations) images.insert(apply_to_miller(r, hkl));
  return {images.begin(), images.end()};
}

std::vector<Reflection> enumerate_reflections(const CrystalStructure& structure, double wavelength,
                                              std::array<double, 2> range) {
  if (!(range[0] > 0 && range[0] < range[1] && range[1] < 180))
    fail(Errc::EmptyRange, "need 0 < two_theta_min < two_theta_max < 180");
  if (!(wavelength > 0)) fail(Errc::EmptyRange, "wavelength must be positive");
  const Mat3 g = reciprocal_metric(structure.lattice);
  const auto rotations = laue_rotations(structure.symmetry_ops);
  const double amax = std::max({structure.lattice.a, structure.lattice.b, structure.lattice.c});
  const int bound = static_cast<int>(std::ceil(2.0 * amax / wavelength));

  std::vector<Reflection> out;
  for (int h = -bound; h <= bound; ++h)
    for (int k = -bound; k <= bound; ++k)
      for (int l = -bound; l <= bound; ++l) {
        if (h == 0 && k == 0 && l == 0) continue;
        const Miller hkl{h, k, l};
        const double d = d_spacing(g, hkl);
        const double s = wavelength / (2.0 * d);
        if (s > 1.0) continue;
        const double tt = 2.0 * std::asin(s) / kDeg;
        if (tt < range[0] || tt > range[1]) continue;
        const auto orbit = miller_orbit(rotations, hkl);
        if (orbit.back() != hkl) continue;  // family representative = lexicographic max
        out.push_back({hkl, d, tt, static_cast<int>(orbit.size())});
      }
  std::sort(out.begin(), out.end(), [](const Reflection& x, const Reflection& y) {
    if (x.two_theta != y.two_theta) return x.two_theta < y.two_theta;
    return x.hkl < y.hkl;
  });
  return out;
}

// ---- synthetic structures ---------------------------------------------------

CrystalStructure random_structure(const std::string& id, std::mt19937_64& rng) {
  static const char* pool[] = {"Li", "Na", "K", "Mg", "Ca", "Al", "Si", "Ti", "Fe", "Co", "Ni", "Cu", "Zn",
                               "O",  "S",  "Cl", "F", "N",  "C",  "Mn", "Sr", "Ba", "Zr", "Mo", "Sn", "P"};
  std::uniform_real_distribution<double> len(3.5, 9.0), unit(0.0, 1.0), mono(95.0, 115.0);
  std::uniform_int_distribution<int> family(0, 3), nsites(1, 4), pick(0, static_cast<int>(std::size(pool)) - 1),
      centering(0, 2);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    CrystalStructure s;
    s.id = id;
    switch (family(rng)) {
      case 0: {
        const double a = len(rng);
        s.lattice = {a, a, a, 90, 90, 90};
        break;
      }
      case 1: {
        const double a = len(rng);
        s.lattice = {a, a, len(rng), 90, 90, 90};
        break;
      }
      case 2:
        s.lattice = {len(rng), len(rng), len(rng), 90, 90, 90};
        break;
      default:
        s.lattice = {len(rng), len(rng), len(rng), 90, mono(rng), 90};
        break;
    }
    s.symmetry_ops = {identity_op()};
    switch (centering(rng)) {
      case 1:
        s.symmetry_ops.push_back(parse_xyz("-x,-y,-z"));
        s.space_group_number = 2;
        break;
      case 2:
        s.symmetry_ops.push_back(parse_xyz("x+1/2,y+1/2,z+1/2"));
        break;
      default:
        s.space_group_number = 1;
        break;
    }
    std::vector<AtomSite> asym;
    const int n = nsites(rng);
    for (int i = 0; i < n; ++i)
      asym.push_back({pool[pick(rng)], wrap_unit(Vec3{unit(rng), unit(rng), unit(rng)}), 1.0});
    try {
      s.sites = expand_sites(asym, s.symmetry_ops);
    } catch (const Error&) {
      continue;
    }
    bool crowded = false;
    for (std::size_t i = 0; i < s.sites.size() && !crowded; ++i)
      for (std::size_t j = i + 1; j < s.sites.size(); ++j)
        if (periodic_distance(s.sites[i].frac, s.sites[j].frac) < 0.08) {
          crowded = true;
          break;
        }
    if (!crowded) return s;
  }
  fail(Errc::InvalidConfig, "could not place atoms for random structure " + id);
}

}  // namespace xdc
