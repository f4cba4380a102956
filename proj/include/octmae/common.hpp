#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace octmae {

using Vec3 = Eigen::Vector3d;

// Row-major dynamic matrix; one row per point / voxel / token.
template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatD = Mat<double>;
using MatF = Mat<float>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad arguments, mismatched shapes or inconsistent configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// File missing, unreadable or malformed.
class IoError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf encountered or a decode collapsed where a result was required.
class NumericalError : public Error {
 public:
  using Error::Error;
};

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

inline bool valid_depth(double z) { return std::isfinite(z) && z > 0.0; }

}  // namespace octmae
