#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace unlearn {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;
using VectorF = Vector<float>;
using RowVectorF = RowVector<float>;

// Input that fails validation (bad config, malformed file, contract violation).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Failure during computation (divergence, missing artifact, I/O).
class RuntimeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Number of worker threads used by parallel_for. Results never depend on it:
// callers write per-item outputs and reduce them in item order.
void set_num_threads(int n);
int num_threads();

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

// FNV-1a, 64 bit. Stable across runs and platforms, used for config stamps.
std::uint64_t fnv1a64(std::string_view data);
std::string hex64(std::uint64_t v);

}  // namespace unlearn
