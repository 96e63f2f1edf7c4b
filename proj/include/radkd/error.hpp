#pragma once

#include <stdexcept>
#include <string>

namespace radkd {

/// Base for every error raised by the pipeline. `kind()` names the failure
/// class so callers (and the CLI exit-code mapping) can branch without RTTI.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(kind + ": " + what), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define RADKD_DEFINE_ERROR(Name)                                          \
    class Name : public Error {                                           \
    public:                                                               \
        explicit Name(const std::string& what) : Error(#Name, what) {}    \
    }

// corpus
RADKD_DEFINE_ERROR(EmptyReport);
RADKD_DEFINE_ERROR(EmptyDocument);
RADKD_DEFINE_ERROR(InvalidSpec);
RADKD_DEFINE_ERROR(InvalidDataset);

// teacher
RADKD_DEFINE_ERROR(TeacherParseError);
RADKD_DEFINE_ERROR(TeacherUnavailable);
RADKD_DEFINE_ERROR(ConfidenceUnavailable);

// model / checkpoints
RADKD_DEFINE_ERROR(InvalidToken);
RADKD_DEFINE_ERROR(UnsupportedCheckpoint);
RADKD_DEFINE_ERROR(ConfigError);

// training
RADKD_DEFINE_ERROR(InvalidDistribution);
RADKD_DEFINE_ERROR(DegenerateLatent);
RADKD_DEFINE_ERROR(EmptyDataset);

// evaluation
RADKD_DEFINE_ERROR(UndefinedAUC);
RADKD_DEFINE_ERROR(DegenerateGeometry);
RADKD_DEFINE_ERROR(DegenerateProjection);

#undef RADKD_DEFINE_ERROR

/// Schema or syntax failure while reading a file. `line()` is 1-based; 0 when
/// the failure is not tied to a line (e.g. a truncated binary payload).
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line = 0)
        : Error("ParseError",
                line ? "line " + std::to_string(line) + ": " + what : what),
          line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

}  // namespace radkd
