#pragma once

#include <stdexcept>
#include <string>

namespace setpose {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define SETPOSE_DEFINE_ERROR(Name)                   \
    class Name : public Error {                      \
    public:                                          \
        explicit Name(const std::string& what)       \
            : Error(std::string(#Name ": ") + what) {} \
    }

SETPOSE_DEFINE_ERROR(InvalidArgument);
SETPOSE_DEFINE_ERROR(DegenerateInput);
SETPOSE_DEFINE_ERROR(BehindCamera);
SETPOSE_DEFINE_ERROR(ShapeMismatch);
SETPOSE_DEFINE_ERROR(NotScalar);
SETPOSE_DEFINE_ERROR(InsufficientPoints);
SETPOSE_DEFINE_ERROR(NumericalFailure);
SETPOSE_DEFINE_ERROR(NoConsensus);
SETPOSE_DEFINE_ERROR(EmptyInput);
SETPOSE_DEFINE_ERROR(UnknownClass);
SETPOSE_DEFINE_ERROR(ParseError);
SETPOSE_DEFINE_ERROR(ValidationError);
SETPOSE_DEFINE_ERROR(UnsupportedFormat);
SETPOSE_DEFINE_ERROR(IOError);

#undef SETPOSE_DEFINE_ERROR

}  // namespace setpose
