#include "xdc/error.hpp"

namespace xdc {

std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::MissingCell: return "MissingCell";
    case Errc::MissingSites: return "MissingSites";
    case Errc::MissingSymmetry: return "MissingSymmetry";
    case Errc::DisorderedStructure: return "DisorderedStructure";
    case Errc::UnsupportedElement: return "UnsupportedElement";
    case Errc::UnsupportedCifFeature: return "UnsupportedCifFeature";
    case Errc::MalformedLoop: return "MalformedLoop";
    case Errc::InvalidSymmetryOp: return "InvalidSymmetryOp";
    case Errc::InvalidLattice: return "InvalidLattice";
    case Errc::DegenerateCell: return "DegenerateCell";
    case Errc::EmptyRange: return "EmptyRange";
    case Errc::ThetaOutOfRange: return "ThetaOutOfRange";
    case Errc::NonPositiveInput: return "NonPositiveInput";
    case Errc::NonPositiveFwhm: return "NonPositiveFwhm";
    case Errc::NoReflectionsInRange: return "NoReflectionsInRange";
    case Errc::GridMismatch: return "GridMismatch";
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::InfeasibleFloor: return "InfeasibleFloor";
    case Errc::RejectionCapExceeded: return "RejectionCapExceeded";
    case Errc::UnknownAnchor: return "UnknownAnchor";
    case Errc::InsufficientLibrary: return "InsufficientLibrary";
    case Errc::DuplicateIds: return "DuplicateIds";
    case Errc::NegativeInput: return "NegativeInput";
    case Errc::NonMonotonicAngles: return "NonMonotonicAngles";
    case Errc::EmptyInput: return "EmptyInput";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::NonFiniteInput: return "NonFiniteInput";
    case Errc::UnsupportedAxis: return "UnsupportedAxis";
    case Errc::PatchConfigInvalid: return "PatchConfigInvalid";
    case Errc::KExceedsKmax: return "KExceedsKmax";
    case Errc::IncompatibleCheckpoint: return "IncompatibleCheckpoint";
    case Errc::CorruptCheckpoint: return "CorruptCheckpoint";
    case Errc::DegenerateInput: return "DegenerateInput";
    case Errc::EmptyIndex: return "EmptyIndex";
    case Errc::Io: return "Io";
    case Errc::Usage: return "Usage";
  }
  return "Unknown";
}

}  // namespace xdc
