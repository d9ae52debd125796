#include "vflbd/error.hpp"

namespace vflbd {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Format: return "format";
    case ErrorKind::Alignment: return "alignment";
    case ErrorKind::Scheme: return "scheme";
    case ErrorKind::Scarcity: return "scarcity";
    case ErrorKind::Configuration: return "configuration";
    case ErrorKind::Contract: return "contract";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::Connectivity: return "connectivity";
    case ErrorKind::Placement: return "placement";
    case ErrorKind::Geometry: return "geometry";
    case ErrorKind::Domain: return "domain";
    case ErrorKind::Precondition: return "precondition";
    case ErrorKind::Estimation: return "estimation";
    case ErrorKind::Degenerate: return "degenerate-training";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

}  // namespace vflbd
