#include "supfactor/error.hpp"

namespace supfactor {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidData: return "InvalidData";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::ShapeError: return "ShapeError";
    case ErrorKind::SingularSystem: return "SingularSystem";
    case ErrorKind::OracleDiverged: return "OracleDiverged";
    case ErrorKind::NumericalError: return "NumericalError";
    case ErrorKind::SizeLimit: return "SizeLimit";
    case ErrorKind::Undefined: return "Undefined";
    case ErrorKind::MissingInput: return "MissingInput";
    case ErrorKind::Io: return "Io";
  }
  return "Unknown";
}

}  // namespace supfactor
