#pragma once

#include <stdexcept>
#include <string>

namespace stridesense {

// Base class for every error thrown by the library. `kind()` returns a stable
// machine-readable tag so callers (CLI, bindings) can map errors without RTTI.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(kind + ": " + message), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define STRIDESENSE_DEFINE_ERROR(Name)                       \
  class Name : public Error {                                \
   public:                                                   \
    explicit Name(const std::string& message)                \
        : Error(#Name, message) {}                           \
  }

// audio-io
STRIDESENSE_DEFINE_ERROR(MalformedContainer);
STRIDESENSE_DEFINE_ERROR(UnsupportedEncoding);
STRIDESENSE_DEFINE_ERROR(EmptyAudio);
STRIDESENSE_DEFINE_ERROR(LengthMismatch);
STRIDESENSE_DEFINE_ERROR(SampleRateMismatch);

// features
STRIDESENSE_DEFINE_ERROR(ClipTooShort);
STRIDESENSE_DEFINE_ERROR(DegenerateFilter);

// dataset
STRIDESENSE_DEFINE_ERROR(EventsNotSorted);
STRIDESENSE_DEFINE_ERROR(TooFewSessions);
STRIDESENSE_DEFINE_ERROR(ParseError);
STRIDESENSE_DEFINE_ERROR(RangeViolation);
STRIDESENSE_DEFINE_ERROR(UnknownRunner);

// tensor-nn
STRIDESENSE_DEFINE_ERROR(ShapeMismatch);
STRIDESENSE_DEFINE_ERROR(DegenerateBatch);
STRIDESENSE_DEFINE_ERROR(InputTooSmall);
STRIDESENSE_DEFINE_ERROR(NonScalarLoss);

// model
STRIDESENSE_DEFINE_ERROR(InvalidConfig);
STRIDESENSE_DEFINE_ERROR(InputTooShort);
STRIDESENSE_DEFINE_ERROR(NotStandardized);
STRIDESENSE_DEFINE_ERROR(VersionMismatch);
STRIDESENSE_DEFINE_ERROR(CorruptFile);
STRIDESENSE_DEFINE_ERROR(IncompatibleBackbone);

// training
STRIDESENSE_DEFINE_ERROR(TooShort);
STRIDESENSE_DEFINE_ERROR(EmptyPartition);

// evaluation
STRIDESENSE_DEFINE_ERROR(MissingFeatures);
STRIDESENSE_DEFINE_ERROR(EmptyInput);

// shared
STRIDESENSE_DEFINE_ERROR(IoError);

#undef STRIDESENSE_DEFINE_ERROR

}  // namespace stridesense
