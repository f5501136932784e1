#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace regfpca {

enum class Errc {
  InvalidInput,
  InvalidConfig,
  IoError,
  MissingColumn,
  NonNumericCell,
  DuplicateTimeWithinCurve,
  CurveTooShort,
  EmptyDataset,
  InvalidObservation,
  OutOfDomain,
  InvalidRange,
  InvalidDomain,
  SingularSystem,
  NonFiniteInput,
  NonFinite,
  DegenerateWeight,
  InfeasibleStart,
  NonFiniteObjective,
  MaxIterationsExceeded,
  DegenerateTemplate,
  DegenerateData,
  IrlsDiverged,
  NewtonDiverged,
  InsufficientOverlap,
  DerivativeUnderflow,
  NotSymmetric,
  GridMismatch,
  DegenerateBasis,
  LengthMismatch,
};

inline std::string_view to_string(Errc e) {
  switch (e) {
    case Errc::InvalidInput: return "InvalidInput";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::IoError: return "IoError";
    case Errc::MissingColumn: return "MissingColumn";
    case Errc::NonNumericCell: return "NonNumericCell";
    case Errc::DuplicateTimeWithinCurve: return "DuplicateTimeWithinCurve";
    case Errc::CurveTooShort: return "CurveTooShort";
    case Errc::EmptyDataset: return "EmptyDataset";
    case Errc::InvalidObservation: return "InvalidObservation";
    case Errc::OutOfDomain: return "OutOfDomain";
    case Errc::InvalidRange: return "InvalidRange";
    case Errc::InvalidDomain: return "InvalidDomain";
    case Errc::SingularSystem: return "SingularSystem";
    case Errc::NonFiniteInput: return "NonFiniteInput";
    case Errc::NonFinite: return "NonFinite";
    case Errc::DegenerateWeight: return "DegenerateWeight";
    case Errc::InfeasibleStart: return "InfeasibleStart";
    case Errc::NonFiniteObjective: return "NonFiniteObjective";
    case Errc::MaxIterationsExceeded: return "MaxIterationsExceeded";
    case Errc::DegenerateTemplate: return "DegenerateTemplate";
    case Errc::DegenerateData: return "DegenerateData";
    case Errc::IrlsDiverged: return "IrlsDiverged";
    case Errc::NewtonDiverged: return "NewtonDiverged";
    case Errc::InsufficientOverlap: return "InsufficientOverlap";
    case Errc::DerivativeUnderflow: return "DerivativeUnderflow";
    case Errc::NotSymmetric: return "NotSymmetric";
    case Errc::GridMismatch: return "GridMismatch";
    case Errc::DegenerateBasis: return "DegenerateBasis";
    case Errc::LengthMismatch: return "LengthMismatch";
  }
  return "Unknown";
}

/// Exception carrying a machine-readable error kind alongside the message.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

/// True for errors caused by malformed or invalid input data (as opposed to
/// numerical failures during fitting).
inline bool is_data_error(Errc e) {
  switch (e) {
    case Errc::InvalidInput:
    case Errc::IoError:
    case Errc::MissingColumn:
    case Errc::NonNumericCell:
    case Errc::DuplicateTimeWithinCurve:
    case Errc::CurveTooShort:
    case Errc::EmptyDataset:
    case Errc::InvalidObservation:
    case Errc::NonFiniteInput:
    case Errc::OutOfDomain:
      return true;
    default:
      return false;
  }
}

}  // namespace regfpca
