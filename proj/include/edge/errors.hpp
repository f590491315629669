#pragma once

#include <stdexcept>
#include <string>

namespace edge {

/// Broad failure class; the CLI maps each category onto an exit code.
enum class ErrorCategory { Config, Data, Numeric };

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

#define EDGE_DEFINE_ERROR(Name, Category)                                  \
  class Name : public Error {                                              \
   public:                                                                 \
    explicit Name(const std::string& what)                                 \
        : Error(ErrorCategory::Category, std::string(#Name ": ") + what) {} \
  }

// kinematics
EDGE_DEFINE_ERROR(DegenerateRotation, Numeric);
EDGE_DEFINE_ERROR(NotARotation, Data);
EDGE_DEFINE_ERROR(TooShort, Data);
EDGE_DEFINE_ERROR(InvalidSkeleton, Data);

// diffusion
EDGE_DEFINE_ERROR(InvalidSteps, Config);
EDGE_DEFINE_ERROR(StepOutOfRange, Config);
EDGE_DEFINE_ERROR(ShapeMismatch, Data);
EDGE_DEFINE_ERROR(ConstraintShapeMismatch, Data);
EDGE_DEFINE_ERROR(BadOverlap, Data);

// model / training
EDGE_DEFINE_ERROR(NonFiniteActivation, Numeric);
EDGE_DEFINE_ERROR(NonFiniteLoss, Numeric);

// audio
EDGE_DEFINE_ERROR(EmptyAudio, Data);
EDGE_DEFINE_ERROR(NoTempoFound, Data);
EDGE_DEFINE_ERROR(BadHeader, Data);
EDGE_DEFINE_ERROR(FpsMismatch, Data);

// metrics
EDGE_DEFINE_ERROR(DegenerateNormalizer, Numeric);
EDGE_DEFINE_ERROR(EmptyMusicBeats, Data);
EDGE_DEFINE_ERROR(TooFewClips, Data);
EDGE_DEFINE_ERROR(DimensionMismatch, Data);
EDGE_DEFINE_ERROR(NonConvergentSqrt, Numeric);
EDGE_DEFINE_ERROR(ZeroLengthBone, Data);

// pipeline
EDGE_DEFINE_ERROR(ConfigError, Config);
EDGE_DEFINE_ERROR(IoError, Data);
EDGE_DEFINE_ERROR(FeatureTooShort, Data);

#undef EDGE_DEFINE_ERROR

}  // namespace edge
