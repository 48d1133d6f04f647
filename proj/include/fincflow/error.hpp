#pragma once

#include <stdexcept>
#include <string>

namespace fincflow {

// Base of every error the library raises. Each failure kind gets its own
// subclass so callers (and tests) can catch precisely.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define FINCFLOW_DEFINE_ERROR(Name)                                   \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& what) : Error(#Name ": " + what) {} \
  };

FINCFLOW_DEFINE_ERROR(ShapeMismatch)
FINCFLOW_DEFINE_ERROR(IndivisibleChannels)
FINCFLOW_DEFINE_ERROR(OddChannels)
FINCFLOW_DEFINE_ERROR(OddSpatialDims)
FINCFLOW_DEFINE_ERROR(BadMagic)
FINCFLOW_DEFINE_ERROR(TruncatedFile)
FINCFLOW_DEFINE_ERROR(UnsupportedDtype)
FINCFLOW_DEFINE_ERROR(TooLargeForDense)
FINCFLOW_DEFINE_ERROR(ZeroScale)
FINCFLOW_DEFINE_ERROR(SingularWeight)
FINCFLOW_DEFINE_ERROR(MissingCache)
FINCFLOW_DEFINE_ERROR(NonFiniteLoss)
FINCFLOW_DEFINE_ERROR(BadFormat)
FINCFLOW_DEFINE_ERROR(DimsMismatch)
FINCFLOW_DEFINE_ERROR(InvalidConfig)

#undef FINCFLOW_DEFINE_ERROR

}  // namespace fincflow
