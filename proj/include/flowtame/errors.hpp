#pragma once

#include <stdexcept>
#include <string>

namespace flowtame {

// Base of every error thrown by the library. The CLI maps the subclasses
// onto exit codes (see tools/flowtame.cpp).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define FLOWTAME_DEFINE_ERROR(Name)                                  \
    class Name : public Error {                                      \
    public:                                                          \
        explicit Name(const std::string& what) : Error(#Name ": " + what) {} \
    }

// autodiff / numerics
FLOWTAME_DEFINE_ERROR(DomainError);
FLOWTAME_DEFINE_ERROR(ShapeError);
FLOWTAME_DEFINE_ERROR(EmptyInputError);
FLOWTAME_DEFINE_ERROR(NonScalarOutputError);
FLOWTAME_DEFINE_ERROR(NonFiniteError);

// configuration and counts
FLOWTAME_DEFINE_ERROR(ConfigError);
FLOWTAME_DEFINE_ERROR(InvalidCountError);

// optimisation
FLOWTAME_DEFINE_ERROR(NonFiniteGradError);

// statistics
FLOWTAME_DEFINE_ERROR(InsufficientDataError);
FLOWTAME_DEFINE_ERROR(DegenerateStatsError);

// data and persistence
FLOWTAME_DEFINE_ERROR(EmptySplitError);
FLOWTAME_DEFINE_ERROR(OverlapError);
FLOWTAME_DEFINE_ERROR(SchemaVersionError);
FLOWTAME_DEFINE_ERROR(CorruptFileError);
FLOWTAME_DEFINE_ERROR(IoError);

#undef FLOWTAME_DEFINE_ERROR

}  // namespace flowtame
