#pragma once

#include <stdexcept>
#include <string>

namespace fedmm {

// Base for every error thrown by the library. Each condition named in a
// contract gets its own type so callers can catch precisely.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define FEDMM_DEFINE_ERROR(NAME)                                   \
  struct NAME : Error {                                            \
    explicit NAME(const std::string& msg) : Error(#NAME ": " + msg) {} \
  }

FEDMM_DEFINE_ERROR(ShapeMismatch);
FEDMM_DEFINE_ERROR(DomainError);
FEDMM_DEFINE_ERROR(NotScalar);
FEDMM_DEFINE_ERROR(EmptyGraph);
FEDMM_DEFINE_ERROR(InvalidSpec);
FEDMM_DEFINE_ERROR(EigenFailure);
FEDMM_DEFINE_ERROR(BatchTooSmall);
FEDMM_DEFINE_ERROR(DimMismatch);
FEDMM_DEFINE_ERROR(MissingGradient);
FEDMM_DEFINE_ERROR(UnknownModality);
FEDMM_DEFINE_ERROR(MissingModality);
FEDMM_DEFINE_ERROR(NonBinaryLabel);
FEDMM_DEFINE_ERROR(EmptyDataset);
FEDMM_DEFINE_ERROR(InvalidConfig);
FEDMM_DEFINE_ERROR(CorruptHeader);
FEDMM_DEFINE_ERROR(LengthMismatch);
FEDMM_DEFINE_ERROR(UnsupportedVersion);
FEDMM_DEFINE_ERROR(ChecksumMismatch);
FEDMM_DEFINE_ERROR(TooFewGroups);
FEDMM_DEFINE_ERROR(IoError);
FEDMM_DEFINE_ERROR(FormatError);

#undef FEDMM_DEFINE_ERROR

}  // namespace fedmm
