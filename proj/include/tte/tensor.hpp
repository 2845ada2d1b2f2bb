#pragma once

#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace tte {

/// Row-major dense matrix; activations are [sequence x features].
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Non-finite values where finite ones are required.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration values.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Scalar>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<Scalar, float>)
    return "f32";
  else
    return "f64";
}

}  // namespace tte
