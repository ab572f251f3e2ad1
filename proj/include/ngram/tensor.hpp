#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ngram {

/// Raised when tensor shapes are incompatible with an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);

/// Dense row-major array of doubles with an explicit shape.
///
/// Rank 1 and rank 2 tensors cover everything the model needs; higher ranks
/// are storable and serializable but no operation in this library consumes
/// them.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }
  static Tensor vector(std::size_t n) { return Tensor({n}); }
  static Tensor from_rows(const std::vector<std::vector<double>>& rows);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Rank-2 accessors. A rank-1 tensor is treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> row(std::size_t r);
  std::span<const double> row(std::size_t r) const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  void fill(double value);

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Reproducible generator: std::mt19937_64, whose output sequence is fixed by
/// the C++ standard. Real and integer draws are derived from raw 64-bit words
/// by the formulas below rather than by <random> distributions, whose
/// algorithms are implementation-defined.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }
  /// (word >> 11) * 2^-53, uniform on [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n), rejection sampled so every value is equally likely.
  std::uint64_t below(std::uint64_t n);
  /// Independent child stream; the parent advances by one draw.
  SeededRng split() { return SeededRng(next_u64()); }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

Tensor matmul(const Tensor& a, const Tensor& b);
/// a · bᵀ
Tensor matmul_bt(const Tensor& a, const Tensor& b);
/// aᵀ · b
Tensor matmul_at(const Tensor& a, const Tensor& b);
/// out += aᵀ · b, shapes checked.
void accumulate_matmul_at(Tensor& out, const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
void add_inplace(Tensor& dst, const Tensor& src);
void scale_inplace(Tensor& dst, double factor);
/// Adds a length-n bias to every row of an m×n tensor.
void add_row_bias(Tensor& x, const Tensor& bias);
/// Column sums of an m×n tensor, accumulated into a length-n tensor.
void accumulate_column_sums(Tensor& out, const Tensor& x);

/// Logit value that receives exactly zero probability in softmax_rows.
inline constexpr double kMaskedLogit = -1.0e300;

/// Row-wise softmax with max subtraction. Rows made entirely of kMaskedLogit
/// are rejected.
Tensor softmax_rows(const Tensor& x);

struct LayerNormCache {
  Tensor normalized;  // (x - mean) * inv_std, before gain/bias
  std::vector<double> inv_std;
};

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps,
                  LayerNormCache* cache = nullptr);

/// Gradient of layer_norm with respect to its input; parameter gradients are
/// accumulated into d_gain and d_bias.
Tensor layer_norm_backward(const Tensor& d_out, const Tensor& gain, const LayerNormCache& cache,
                           Tensor& d_gain, Tensor& d_bias);

/// Uniform draws in ±sqrt(6 / (fan_in + fan_out)).
Tensor xavier_init(SeededRng& rng, std::size_t fan_in, std::size_t fan_out);

bool all_finite(const Tensor& t);
double max_abs_diff(const Tensor& a, const Tensor& b);

/// Little-endian layout: u64 rank, u64 dims[rank], f64 data[product(dims)].
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

void write_u64(std::ostream& out, std::uint64_t value);
std::uint64_t read_u64(std::istream& in);

}  // namespace ngram
