// Error type shared by all xdc modules.

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace xdc {

enum class Errc {
  // crystal
  MissingCell,
  MissingSites,
  MissingSymmetry,
  DisorderedStructure,
  UnsupportedElement,
  UnsupportedCifFeature,
  MalformedLoop,
  InvalidSymmetryOp,
  InvalidLattice,
  DegenerateCell,
  EmptyRange,
  // diffraction
  ThetaOutOfRange,
  NonPositiveInput,
  NonPositiveFwhm,
  NoReflectionsInRange,
  GridMismatch,
  LengthMismatch,
  InvalidConfig,
  // dataset
  InfeasibleFloor,
  RejectionCapExceeded,
  UnknownAnchor,
  InsufficientLibrary,
  DuplicateIds,
  NegativeInput,
  NonMonotonicAngles,
  EmptyInput,
  // tensor engine / network
  ShapeMismatch,
  NonFiniteInput,
  UnsupportedAxis,
  PatchConfigInvalid,
  // training
  KExceedsKmax,
  IncompatibleCheckpoint,
  CorruptCheckpoint,
  // evaluation
  DegenerateInput,
  EmptyIndex,
  // io / cli
  Io,
  Usage,
};

std::string_view errc_name(Errc code);

class Error : public std::runtime_error {
public:
  Error(Errc code, const std::string& msg)
      : std::runtime_error(std::string(errc_name(code)) + ": " + msg), code_(code) {}
  Errc code() const noexcept { return code_; }

private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& msg) { throw Error(code, msg); }

}  // namespace xdc
