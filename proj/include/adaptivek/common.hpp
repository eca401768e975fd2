#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace adaptivek {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

enum class ErrorCode : int {
    invalid_argument = 1,
    dimension_mismatch = 2,
    io = 3,
    format = 4,
    numeric = 5,
    exhausted = 6,
};

/// Base exception for everything thrown by the library. The code survives the
/// trip across the C boundary as an ak_status.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

struct InvalidArgument : Error {
    explicit InvalidArgument(const std::string& w) : Error(ErrorCode::invalid_argument, w) {}
};
struct DimensionMismatch : Error {
    explicit DimensionMismatch(const std::string& w) : Error(ErrorCode::dimension_mismatch, w) {}
};
struct IoError : Error {
    explicit IoError(const std::string& w) : Error(ErrorCode::io, w) {}
};
struct FormatError : Error {
    explicit FormatError(const std::string& w) : Error(ErrorCode::format, w) {}
};
struct NumericError : Error {
    explicit NumericError(const std::string& w) : Error(ErrorCode::numeric, w) {}
};
struct ExhaustedError : Error {
    explicit ExhaustedError(const std::string& w) : Error(ErrorCode::exhausted, w) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw InvalidArgument(msg);
}

inline void require_dims(bool cond, const std::string& msg) {
    if (!cond) throw DimensionMismatch(msg);
}

} // namespace adaptivek
