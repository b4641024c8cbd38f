// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sgdll/errors.hpp"

namespace sgdll {

/// Dense row-major matrix. Weight blocks, gradients and hidden states all use
/// this layout so that row j of an output head is the class-j weight vector.
template <typename Scalar>
using Tensor2 = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Tensor2d = Tensor2<double>;
using Tensor2f = Tensor2<float>;

enum class Norm { L2, RMS };

/// Pairwise summation over a contiguous range. Leaves of 64 elements are summed
/// left to right; the split point is always floor(n / 2). The order therefore
/// depends only on the length, which makes every reduction bit-reproducible.
double pairwise_sum(std::span<const double> xs);

namespace detail {

template <typename Derived>
double sum_squares_impl(const Eigen::MatrixBase<Derived>& m, bool& finite) {
  // Row-major traversal in blocks of 64 coefficients; block sums are then
  // combined pairwise.
  constexpr Eigen::Index kLeaf = 64;
  const Eigen::Index rows = m.rows();
  const Eigen::Index cols = m.cols();
  const Eigen::Index n = rows * cols;
  std::vector<double> leaves;
  leaves.reserve(static_cast<std::size_t>(n / kLeaf + 1));
  double acc = 0.0;
  Eigen::Index in_leaf = 0;
  finite = true;
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) {
      const double v = static_cast<double>(m.coeff(i, j));
      if (!std::isfinite(v)) finite = false;
      acc += v * v;
      if (++in_leaf == kLeaf) {
        leaves.push_back(acc);
        acc = 0.0;
        in_leaf = 0;
      }
    }
  }
  if (in_leaf > 0 || leaves.empty()) leaves.push_back(acc);
  return pairwise_sum(leaves);
}

}  // namespace detail

/// Sum of squared entries accumulated in 64-bit with a fixed order.
/// Throws NumericError on a non-finite entry.
template <typename Derived>
double sum_squares(const Eigen::MatrixBase<Derived>& m, const std::string& block = {}) {
  bool finite = true;
  const double s = detail::sum_squares_impl(m, finite);
  if (!finite) throw NumericError(block, "non-finite entry");
  return s;
}

template <typename Derived>
double frobenius_norm(const Eigen::MatrixBase<Derived>& m, const std::string& block = {}) {
  return std::sqrt(sum_squares(m, block));
}

/// Frobenius norm divided by sqrt(rows * cols).
template <typename Derived>
double rms_norm(const Eigen::MatrixBase<Derived>& m, const std::string& block = {}) {
  const auto n = m.rows() * m.cols();
  if (n == 0) throw std::invalid_argument("rms_norm: empty tensor");
  return frobenius_norm(m, block) / std::sqrt(static_cast<double>(n));
}

template <typename Derived>
double norm_of(const Eigen::MatrixBase<Derived>& m, Norm kind, const std::string& block = {}) {
  return kind == Norm::L2 ? frobenius_norm(m, block) : rms_norm(m, block);
}

/// min{1, r / norm}, with the conventions 0-norm -> 1 and r = inf -> 1.
inline double clip_factor(double norm, double r) {
  if (!(r > 0.0)) throw std::invalid_argument("clip: radius must be positive");
  if (norm <= r || std::isinf(r)) return 1.0;
  return r / norm;
}

/// Result of clipping: the clipped tensor and the scale that produced it.
template <typename Scalar>
struct Clipped {
  Tensor2<Scalar> value;
  double scale = 1.0;
};

/// clip_{r,||.||}(x) = min{1, r/||x||} x.
///
/// When the scale is below one the result is re-measured and the scale is
/// nudged down by one epsilon at a time until the returned norm is <= r. This
/// makes clip idempotent and the bound exact in the tensor's own precision.
template <typename Derived>
Clipped<typename Derived::Scalar> clip_with_scale(const Eigen::MatrixBase<Derived>& x, double r,
                                                  Norm kind) {
  using Scalar = typename Derived::Scalar;
  Clipped<Scalar> out{x.eval(), 1.0};
  if (!(r > 0.0)) throw std::invalid_argument("clip: radius must be positive");
  if (out.value.size() == 0 || std::isinf(r)) return out;
  const double n = norm_of(out.value, kind);
  double s = clip_factor(n, r);
  if (s == 1.0) return out;
  Tensor2<Scalar> y = (out.value.template cast<double>() * s).template cast<Scalar>();
  constexpr double kNudge = 1.0 - std::numeric_limits<Scalar>::epsilon();
  for (int guard = 0; guard < 64 && norm_of(y, kind) > r; ++guard) {
    s *= kNudge;
    y = (out.value.template cast<double>() * s).template cast<Scalar>();
  }
  out.value = std::move(y);
  out.scale = s;
  return out;
}

template <typename Derived>
Tensor2<typename Derived::Scalar> clip(const Eigen::MatrixBase<Derived>& x, double r, Norm kind) {
  return clip_with_scale(x, r, kind).value;
}

/// Counter-based generator: draw k of stream (seed, stream) is
/// splitmix64(key + k * golden_gamma) with key = splitmix64(seed ^ splitmix64(stream)).
/// Integer draws are identical on every platform; normal() additionally
/// depends on the libm used for log/cos.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  /// Uniform integer in [0, n). Unbiased (rejection on the top range).
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller; the second variate is cached.
  double normal();

  /// Independent child handle; children of distinct ids never share a key.
  Rng split(std::uint64_t child) const;

  static std::uint64_t mix64(std::uint64_t z);

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Fill a tensor with i.i.d. N(0, stddev^2) draws in row-major order.
template <typename Scalar>
Tensor2<Scalar> gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Tensor2<Scalar> t(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) t(i, j) = static_cast<Scalar>(stddev * rng.normal());
  return t;
}

/// Inverse-CDF sampler over a fixed probability vector.
class Categorical {
 public:
  explicit Categorical(std::span<const double> probs);
  std::size_t sample(Rng& rng) const;
  std::size_t size() const noexcept { return cdf_.size(); }

 private:
  std::vector<double> cdf_;
};

/// Mean and standard error of a sample, both reduced pairwise.
struct SampleStats {
  double mean = 0.0;
  double se = 0.0;  // standard error of the mean
  std::size_t n = 0;
};

SampleStats summarize(std::span<const double> xs);

/// Least-squares slope of y against x.
double fit_slope(std::span<const double> x, std::span<const double> y);

}  // namespace sgdll
