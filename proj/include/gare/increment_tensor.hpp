#ifndef GARE_INCREMENT_TENSOR_HPP
#define GARE_INCREMENT_TENSOR_HPP

#include <cstddef>
#include <span>
#include <vector>

#include "gare/tensorcore.hpp"

namespace gare {

/// Which side of a text-video pair receives (or supplies) something.
enum class Side { text, video };

/// B*B pair-specific increments stored as a (B*B) x D matrix, pair (i, j) at
/// row i*B + j. Per-pair norms are cached on construction.
class IncrementTensor {
 public:
  IncrementTensor() = default;
  IncrementTensor(std::size_t batch, Matrix delta);

  static IncrementTensor zeros(std::size_t batch, std::size_t dim);

  std::size_t batch() const noexcept { return batch_; }
  std::size_t dim() const noexcept { return delta_.cols(); }
  const Matrix& matrix() const noexcept { return delta_; }

  std::span<const double> pair(std::size_t i, std::size_t j) const {
    return delta_.row_span(i * batch_ + j);
  }
  /// eps_ij = ||delta_ij||_2
  double norm(std::size_t i, std::size_t j) const { return norms_[i * batch_ + j]; }
  const std::vector<double>& norms() const noexcept { return norms_; }

 private:
  std::size_t batch_ = 0;
  Matrix delta_;
  std::vector<double> norms_;
};

}  // namespace gare

#endif  // GARE_INCREMENT_TENSOR_HPP
