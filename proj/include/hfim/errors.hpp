#pragma once

#include <stdexcept>
#include <string>

namespace hfim {

// Domain error hierarchy. The CLI maps any HfimError to exit code 1.
struct HfimError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : HfimError {
  using HfimError::HfimError;
};
struct CodecError : HfimError {
  using HfimError::HfimError;
};
struct PipelineError : HfimError {
  using HfimError::HfimError;
};
struct ModelError : HfimError {
  using HfimError::HfimError;
};
struct ObjectiveError : HfimError {
  using HfimError::HfimError;
};
struct NumericalError : HfimError {
  using HfimError::HfimError;
};
struct CapabilityError : HfimError {
  using HfimError::HfimError;
};
struct ProbeError : HfimError {
  using HfimError::HfimError;
};
struct EvalError : HfimError {
  using HfimError::HfimError;
};
struct IoError : HfimError {
  using HfimError::HfimError;
};

}  // namespace hfim
