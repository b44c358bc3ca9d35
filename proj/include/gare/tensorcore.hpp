// Dense row-major matrices of doubles, seeded random streams and the
// binary / CSV matrix formats shared by every other module.

#ifndef GARE_TENSORCORE_HPP
#define GARE_TENSORCORE_HPP

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gare {

/// Raised when operand shapes violate an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an input lies outside an operation's numeric domain
/// (near-zero norms inside a cosine, negative discriminants, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Raised on malformed serialized data.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Norms at or below this floor are rejected by cosine-type operations.
inline constexpr double kNormFloor = 1e-12;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  /// Row-list constructor; every row must have the same length.
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix identity(std::size_t n);
  static Matrix column(std::span<const double> values);
  static Matrix row(std::span<const double> values);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t k) { return data_[k]; }
  double operator[](std::size_t k) const { return data_[k]; }

  std::span<double> row_span(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row_span(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }
  std::vector<double> row_vector(std::size_t r) const;

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  /// Same data viewed with another shape; total size must be preserved.
  Matrix reshaped(std::size_t rows, std::size_t cols) const;
  Matrix transposed() const;

  bool all_finite() const noexcept;

  friend bool operator==(const Matrix& a, const Matrix& b) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// ---- arithmetic ------------------------------------------------------------

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
/// Stack rows selected by `index` (repeats allowed).
Matrix gather_rows(const Matrix& a, std::span<const std::size_t> index);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> x);
/// Cosine of the angle between two vectors. Throws DomainError when either
/// norm is at or below kNormFloor.
double cosine(std::span<const double> a, std::span<const double> b);

double max_abs(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);
/// ||a - b|| / max(||a||, ||b||), with 0 when both are exactly zero.
double relative_error(std::span<const double> a, std::span<const double> b);

// ---- randomness ------------------------------------------------------------

/// Counter-based stream: sample k is splitmix64(seed, k). Identical seeds give
/// identical sequences on every platform; gaussians go through Box-Muller.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double gaussian();
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);

  /// Independent child stream for a named purpose; the parent is untouched.
  RngStream split(std::uint64_t stream_id) const;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
  double cached_gaussian_ = 0.0;
  bool has_cached_ = false;
};

std::uint64_t splitmix64(std::uint64_t x);

Matrix gaussian_sample(RngStream& rng, std::size_t rows, std::size_t cols,
                       double mean, double std_dev);
/// Fisher-Yates permutation of 0..n-1.
std::vector<std::size_t> permutation(RngStream& rng, std::size_t n);

// ---- serialization ---------------------------------------------------------

/// Binary layout: "GARE", u32 version, u32 rows, u32 cols (little-endian),
/// then rows*cols little-endian f64 in row-major order.
inline constexpr std::uint32_t kMatrixFormatVersion = 1;

void write_matrix(std::ostream& out, const Matrix& m);
Matrix read_matrix(std::istream& in);
void save_matrix(const std::string& path, const Matrix& m);
Matrix load_matrix(const std::string& path);

/// One row per line, comma separated, shortest round-trip decimal form.
void write_csv(std::ostream& out, const Matrix& m);
std::string format_double(double v);

// ---- parallelism -----------------------------------------------------------

/// Worker cap from GARE_THREADS, defaulting to the hardware concurrency.
std::size_t worker_count();

/// Runs fn(k) for k in [0, n) on up to worker_count() threads. Each index is
/// handled exactly once; callers write into disjoint slots so the result is
/// independent of scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace gare

#endif  // GARE_TENSORCORE_HPP
