#include "xdc/elements.hpp"

#include <cctype>

#include "xdc/error.hpp"

namespace xdc {

namespace {

// International Tables for Crystallography Vol. C, neutral atoms.
constexpr ElementData kElements[] = {
    {"H", 1, 1.008, {0.489918, 0.262003, 0.196767, 0.049879}, {20.6593, 7.74039, 49.5519, 2.20159}, 0.001305},
    {"He", 2, 4.0026, {0.8734, 0.6309, 0.3112, 0.178}, {9.1037, 3.3568, 22.9276, 0.9821}, 0.0064},
    {"Li", 3, 6.94, {1.1282, 0.7508, 0.6175, 0.4653}, {3.9546, 1.0524, 85.3905, 168.261}, 0.0377},
    {"Be", 4, 9.0122, {1.5919, 1.1278, 0.5391, 0.7029}, {43.6427, 1.8623, 103.483, 0.542}, 0.0385},
    {"B", 5, 10.81, {2.0545, 1.3326, 1.0979, 0.7068}, {23.2185, 1.021, 60.3498, 0.1403}, -0.1932},
    {"C", 6, 12.011, {2.31, 1.02, 1.5886, 0.865}, {20.8439, 10.2075, 0.5687, 51.6512}, 0.2156},
    {"N", 7, 14.007, {12.2126, 3.1322, 2.0125, 1.1663}, {0.0057, 9.8933, 28.9975, 0.5826}, -11.529},
    {"O", 8, 15.999, {3.0485, 2.2868, 1.5463, 0.867}, {13.2771, 5.7011, 0.3239, 32.9089}, 0.2508},
    {"F", 9, 18.998, {3.5392, 2.6412, 1.517, 1.0243}, {10.2825, 4.2944, 0.2615, 26.1476}, 0.2776},
    {"Ne", 10, 20.180, {3.9553, 3.1125, 1.4546, 1.1251}, {8.4042, 3.4262, 0.2306, 21.7184}, 0.3515},
    {"Na", 11, 22.990, {4.7626, 3.1736, 1.2674, 1.1128}, {3.285, 8.8422, 0.3136, 129.424}, 0.676},
    {"Mg", 12, 24.305, {5.4204, 2.1735, 1.2269, 2.3073}, {2.8275, 79.2611, 0.3808, 7.1937}, 0.8584},
    {"Al", 13, 26.982, {6.4202, 1.9002, 1.5936, 1.9646}, {3.0387, 0.7426, 31.5472, 85.0886}, 1.1151},
    {"Si", 14, 28.085, {6.2915, 3.0353, 1.9891, 1.541}, {2.4386, 32.3337, 0.6785, 81.6937}, 1.1407},
    {"P", 15, 30.974, {6.4345, 4.1791, 1.78, 1.4908}, {1.9067, 27.157, 0.526, 68.1645}, 1.1149},
    {"S", 16, 32.06, {6.9053, 5.2034, 1.4379, 1.5863}, {1.4679, 22.2151, 0.2536, 56.172}, 0.8669},
    {"Cl", 17, 35.45, {11.4604, 7.1962, 6.2556, 1.6455}, {0.0104, 1.1662, 18.5194, 47.7784}, -9.5574},
    {"Ar", 18, 39.948, {7.4845, 6.7723, 0.6539, 1.6442}, {0.9072, 14.8407, 43.8983, 33.3929}, 1.4445},
    {"K", 19, 39.098, {8.2186, 7.4398, 1.0519, 0.8659}, {12.7949, 0.7748, 213.187, 41.6841}, 1.4228},
    {"Ca", 20, 40.078, {8.6266, 7.3873, 1.5899, 1.0211}, {10.4421, 0.6599, 85.7484, 178.437}, 1.3751},
    {"Sc", 21, 44.956, {9.189, 7.3679, 1.6409, 1.468}, {9.0213, 0.5729, 136.108, 51.3531}, 1.3329},
    {"Ti", 22, 47.867, {9.7595, 7.3558, 1.6991, 1.9021}, {7.8508, 0.5, 35.6338, 116.105}, 1.2807},
    {"V", 23, 50.942, {10.2971, 7.3511, 2.0703, 2.0571}, {6.8657, 0.4385, 26.8938, 102.478}, 1.2199},
    {"Cr", 24, 51.996, {10.6406, 7.3537, 3.324, 1.4922}, {6.1038, 0.392, 20.2626, 98.7399}, 1.1832},
    {"Mn", 25, 54.938, {11.2819, 7.3573, 3.0193, 2.2441}, {5.3409, 0.3432, 17.8674, 83.7543}, 1.0896},
    {"Fe", 26, 55.845, {11.7695, 7.3573, 3.5222, 2.3045}, {4.7611, 0.3072, 15.3535, 76.8805}, 1.0369},
    {"Co", 27, 58.933, {12.2841, 7.3409, 4.0034, 2.3488}, {4.2791, 0.2784, 13.5359, 71.1692}, 1.0118},
    {"Ni", 28, 58.693, {12.8376, 7.292, 4.4438, 2.38}, {3.8785, 0.2565, 12.1763, 66.3421}, 1.0341},
    {"Cu", 29, 63.546, {13.338, 7.1676, 5.6158, 1.6735}, {3.5828, 0.247, 11.3966, 64.8126}, 1.191},
    {"Zn", 30, 65.38, {14.0743, 7.0318, 5.1652, 2.41}, {3.2655, 0.2333, 10.3163, 58.7097}, 1.3041},
    {"Ga", 31, 69.723, {15.2354, 6.7006, 4.3591, 2.9623}, {3.0669, 0.2412, 10.7805, 61.4135}, 1.7189},
    {"Ge", 32, 72.630, {16.0816, 6.3747, 3.7068, 3.683}, {2.8509, 0.2516, 11.4468, 54.7625}, 2.1313},
    {"As", 33, 74.922, {16.6723, 6.0701, 3.4313, 4.2779}, {2.6345, 0.2647, 12.9479, 47.7972}, 2.531},
    {"Se", 34, 78.971, {17.0006, 5.8196, 3.9731, 4.3543}, {2.4098, 0.2726, 15.2372, 43.8163}, 2.8409},
    {"Br", 35, 79.904, {17.1789, 5.2358, 5.6377, 3.9851}, {2.1723, 16.5796, 0.2609, 41.4328}, 2.9557},
    {"Kr", 36, 83.798, {17.3555, 6.7286, 5.5493, 3.5375}, {1.9384, 16.5623, 0.2261, 39.3972}, 2.825},
    {"Rb", 37, 85.468, {17.1784, 9.6435, 5.1399, 1.5292}, {1.7888, 17.3151, 0.2748, 164.934}, 3.4873},
    {"Sr", 38, 87.62, {17.5663, 9.8184, 5.422, 2.6694}, {1.5564, 14.0988, 0.1664, 132.376}, 2.5064},
    {"Y", 39, 88.906, {17.776, 10.2946, 5.72629, 3.26588}, {1.4029, 12.8006, 0.125599, 104.354}, 1.91213},
    {"Zr", 40, 91.224, {17.8765, 10.948, 5.41732, 3.65721}, {1.27618, 11.916, 0.117622, 87.6627}, 2.06929},
    {"Nb", 41, 92.906, {17.6142, 12.0144, 4.04183, 3.53346}, {1.18865, 11.766, 0.204785, 69.7957}, 3.75591},
    {"Mo", 42, 95.95, {3.7025, 17.2356, 12.8876, 3.7429}, {0.2772, 1.0958, 11.004, 61.6584}, 4.3875},
    {"Ru", 44, 101.07, {19.2674, 12.9182, 4.86337, 1.56756}, {0.80852, 8.43467, 24.7997, 94.2928}, 5.37874},
    {"Rh", 45, 102.91, {19.2957, 14.3501, 4.73425, 1.28918}, {0.751536, 8.21758, 25.8749, 98.6062}, 5.328},
    {"Pd", 46, 106.42, {19.3319, 15.5017, 5.29537, 0.605844}, {0.698655, 7.98929, 25.2052, 76.8986}, 5.26593},
    {"Ag", 47, 107.87, {19.2808, 16.6885, 4.8045, 1.0463}, {0.6446, 7.4726, 24.6605, 99.8156}, 5.179},
    {"Cd", 48, 112.41, {19.2214, 17.6444, 4.461, 1.6029}, {0.5946, 6.9089, 24.7008, 87.4825}, 5.0694},
    {"In", 49, 114.82, {19.1624, 18.5596, 4.2948, 2.0396}, {0.5476, 6.3776, 25.8499, 92.8029}, 4.9391},
    {"Sn", 50, 118.71, {19.1889, 19.1005, 4.4585, 2.4663}, {5.8303, 0.5031, 26.8909, 83.9571}, 4.7821},
    {"Sb", 51, 121.76, {19.6418, 19.0455, 5.0371, 2.6827}, {5.3034, 0.4607, 27.9074, 75.2825}, 4.5909},
    {"Te", 52, 127.60, {19.9644, 19.0138, 6.14487, 2.5239}, {4.81742, 0.420885, 28.5284, 70.8403}, 4.352},
    {"I", 53, 126.90, {20.1472, 18.9949, 7.5138, 2.2735}, {4.347, 0.3814, 27.766, 66.8776}, 4.0712},
    {"Cs", 55, 132.91, {20.3892, 19.1062, 10.662, 1.4953}, {3.569, 0.3107, 24.3879, 213.904}, 3.3352},
    {"Ba", 56, 137.33, {20.3361, 19.297, 10.888, 2.6959}, {3.216, 0.2756, 20.2073, 167.202}, 2.7731},
    {"La", 57, 138.91, {20.578, 19.599, 11.3727, 3.28719}, {2.94817, 0.244475, 18.7726, 133.124}, 2.14678},
    {"W", 74, 183.84, {29.0818, 15.43, 14.4327, 5.11982}, {1.72029, 9.2259, 0.321703, 57.056}, 9.8875},
    {"Pt", 78, 195.08, {27.0059, 17.7639, 15.7131, 5.7837}, {1.51293, 8.81174, 0.424593, 38.6103}, 11.6883},
    {"Au", 79, 196.97, {16.8819, 18.5913, 25.5582, 5.86}, {0.4611, 8.6216, 1.4826, 36.3956}, 12.0658},
    {"Pb", 82, 207.2, {31.0617, 13.0637, 18.442, 5.9696}, {0.6902, 2.3576, 8.618, 47.2579}, 13.4118},
    {"Bi", 83, 208.98, {33.3689, 12.951, 16.5877, 6.4692}, {0.704, 2.9238, 8.7937, 48.0093}, 13.5782},
};

}  // namespace

std::span<const ElementData> element_table() { return kElements; }

bool is_supported_element(std::string_view symbol) {
  for (const auto& e : kElements)
    if (e.symbol == symbol) return true;
  return false;
}

const ElementData& element(std::string_view symbol) {
  for (const auto& e : kElements)
    if (e.symbol == symbol) return e;
  std::string supported;
  for (const auto& e : kElements) {
    if (!supported.empty()) supported += ' ';
    supported += e.symbol;
  }
  fail(Errc::UnsupportedElement,
       "no form-factor data for '" + std::string(symbol) + "' (supported: " + supported + ")");
}

std::string normalize_element_symbol(std::string_view raw) {
  std::string out;
  for (char ch : raw) {
    if (!std::isalpha(static_cast<unsigned char>(ch))) break;
    if (out.empty())
      out += static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    else if (out.size() < 2)
      out += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    else
      break;
  }
  // Two-letter prefixes of labels like "Na1" are fine; "Oa" style labels fall back to one letter.
  if (out.size() == 2 && !is_supported_element(out) && is_supported_element(out.substr(0, 1)))
    out.resize(1);
  return out;
}

}  // namespace xdc
