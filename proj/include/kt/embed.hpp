#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

#include "kt/backend.hpp"

namespace kt {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Unit-norm snippet/query embedding as stored in the knowledge base.
using EmbeddingVector = Vector<float>;

class EmbeddingError : public std::runtime_error {
 public:
  EmbeddingError(const std::string& what, bool retriable = false)
      : std::runtime_error(what), retriable_(retriable) {}
  bool retriable() const noexcept { return retriable_; }

 private:
  bool retriable_;
};

class DimensionMismatch : public EmbeddingError {
 public:
  DimensionMismatch(std::int64_t expected, std::int64_t actual)
      : EmbeddingError("embedding dimension mismatch: expected " + std::to_string(expected) +
                       ", got " + std::to_string(actual)),
        expected_(expected),
        actual_(actual) {}

  std::int64_t expected() const noexcept { return expected_; }
  std::int64_t actual() const noexcept { return actual_; }

 private:
  std::int64_t expected_;
  std::int64_t actual_;
};

/// Returns v / ||v||. The norm is accumulated in double. Throws EmbeddingError
/// for zero or non-finite input.
template <typename Derived>
Vector<typename Derived::Scalar> normalized(const Eigen::MatrixBase<Derived>& v) {
  using Scalar = typename Derived::Scalar;
  const Vector<double> wide = v.template cast<double>();
  if (!wide.allFinite()) throw EmbeddingError("embedding contains non-finite values");
  const double norm = wide.norm();
  if (!(norm > 0.0)) throw EmbeddingError("cannot normalize a zero embedding");
  return (wide / norm).template cast<Scalar>();
}

/// 1 - a.b for unit vectors, clamped to [0, 2].
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar cosine_distance(const Eigen::MatrixBase<DerivedA>& a,
                                          const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  if (a.size() != b.size()) throw DimensionMismatch(a.size(), b.size());
  const Scalar d = Scalar(1) - a.dot(b.template cast<Scalar>());
  return std::clamp(d, Scalar(0), Scalar(2));
}

/// Set-once embedding dimension shared by a knowledge base.
class DimensionLatch {
 public:
  DimensionLatch() = default;
  explicit DimensionLatch(std::int64_t dim) : dim_(dim) {}

  /// Latches `dim` on first use; afterwards throws DimensionMismatch for any
  /// other value.
  void enforce(std::int64_t dim) {
    std::int64_t expected = 0;
    if (dim_.compare_exchange_strong(expected, dim) || expected == dim) return;
    throw DimensionMismatch(expected, dim);
  }

  std::optional<std::int64_t> get() const {
    const auto d = dim_.load();
    return d == 0 ? std::nullopt : std::optional<std::int64_t>(d);
  }

 private:
  std::atomic<std::int64_t> dim_{0};
};

/// Embeds `text` with the backend, L2-normalizes, and checks the dimension
/// against `latch`. Backend failures surface as EmbeddingError with the
/// backend's retriable flag.
EmbeddingVector embed_text(InferenceBackend& backend, const std::string& model_name,
                           const std::string& text, DimensionLatch& latch);

}  // namespace kt
