#pragma once

#include <stdexcept>
#include <string>

namespace bundleseg {

// Base of every error the library throws. The CLI maps subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define BUNDLESEG_ERROR(Name)              \
  class Name : public Error {              \
   public:                                 \
    using Error::Error;                    \
  }

BUNDLESEG_ERROR(IoError);
BUNDLESEG_ERROR(FormatError);
BUNDLESEG_ERROR(UnsupportedDatatype);
BUNDLESEG_ERROR(CorruptData);
BUNDLESEG_ERROR(ChannelCountError);
BUNDLESEG_ERROR(ShapeError);
BUNDLESEG_ERROR(ConfigError);
BUNDLESEG_ERROR(CorruptCheckpoint);
BUNDLESEG_ERROR(DegenerateDataset);
BUNDLESEG_ERROR(DivergenceError);
BUNDLESEG_ERROR(SpecError);
BUNDLESEG_ERROR(PairingError);

#undef BUNDLESEG_ERROR

}  // namespace bundleseg
