// Embedded element data: atomic number, standard atomic mass and the
// 4-Gaussian analytic X-ray form-factor coefficients
//   f(s) = sum_i a_i exp(-b_i s^2) + c,  s = sin(theta)/lambda = Q/(4 pi).

#pragma once

#include <array>
#include <span>
#include <string>
#include <string_view>

namespace xdc {

struct ElementData {
  std::string_view symbol;
  int z;
  double mass_amu;
  std::array<double, 4> a;
  std::array<double, 4> b;  // in Angstrom^2
  double c;
};

// Throws Errc::UnsupportedElement for symbols outside the table.
const ElementData& element(std::string_view symbol);
bool is_supported_element(std::string_view symbol);
std::span<const ElementData> element_table();

// Strips oxidation states and labels: "Fe3+" -> "Fe", "O2-" -> "O", "na" -> "Na".
std::string normalize_element_symbol(std::string_view raw);

}  // namespace xdc
