#pragma once

#include <stdexcept>
#include <string>

namespace fairskin {

// Base for all library errors. `code()` is the stable machine-readable
// condition name; the message carries the human-readable details.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& message)
        : std::runtime_error(message), code_(std::move(code)) {}

    const std::string& code() const { return code_; }

private:
    std::string code_;
};

struct EmptySkinRegion : Error {
    explicit EmptySkinRegion(const std::string& msg) : Error("EmptySkinRegion", msg) {}
};

struct DegenerateTarget : Error {
    explicit DegenerateTarget(const std::string& msg) : Error("DegenerateTarget", msg) {}
};

struct BadDistribution : Error {
    explicit BadDistribution(const std::string& msg) : Error("BadDistribution", msg) {}
};

struct MissingCounterpart : Error {
    explicit MissingCounterpart(const std::string& msg) : Error("MissingCounterpart", msg) {}
};

struct BadConfig : Error {
    explicit BadConfig(const std::string& msg) : Error("BadConfig", msg) {}
};

struct ShapeMismatch : Error {
    explicit ShapeMismatch(const std::string& msg) : Error("ShapeMismatch", msg) {}
};

struct DegenerateBatch : Error {
    explicit DegenerateBatch(const std::string& msg) : Error("DegenerateBatch", msg) {}
};

struct EmptyModel : Error {
    explicit EmptyModel(const std::string& msg) : Error("EmptyModel", msg) {}
};

struct EmptyGroup : Error {
    explicit EmptyGroup(const std::string& msg) : Error("EmptyGroup", msg) {}
};

struct InsufficientGroupData : Error {
    explicit InsufficientGroupData(const std::string& msg) : Error("InsufficientGroupData", msg) {}
};

struct SingleClass : Error {
    explicit SingleClass(const std::string& msg) : Error("SingleClass", msg) {}
};

struct BadClass : Error {
    explicit BadClass(const std::string& msg) : Error("BadClass", msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error("IoError", msg) {}
};

struct ParseError : Error {
    ParseError(const std::string& msg, long line)
        : Error("ParseError", msg + " (line " + std::to_string(line) + ")"), line_(line) {}

    long line() const { return line_; }

private:
    long line_;
};

struct MissingFile : Error {
    explicit MissingFile(const std::string& msg) : Error("MissingFile", msg) {}
};

// Wraps any error raised while executing a pipeline stage, keeping the stage
// name addressable for exit-code mapping and error reports.
struct StageFailure : Error {
    StageFailure(const std::string& stage, const std::string& msg)
        : Error("StageFailure", "stage '" + stage + "' failed: " + msg), stage_(stage) {}

    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

}  // namespace fairskin
