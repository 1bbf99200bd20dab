#pragma once

// Dense float64 matrices and a hand-differentiated multilayer perceptron.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace balancelab {

class Rng;

/// Row-major dense matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Matrix from_rows(const std::vector<std::vector<double>>& rows);
  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }

  bool all_finite() const noexcept;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

/// a · b. Throws ShapeError unless a.cols() == b.rows(), NumericError on overflow.
Matrix matmul(const Matrix& a, const Matrix& b);
/// aᵀ · b without materialising the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// a · bᵀ without materialising the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& a);
/// Elementwise a + b; shapes must match.
Matrix add(const Matrix& a, const Matrix& b);
/// a += scale · b in place.
void axpy(double scale, const Matrix& b, Matrix& a);
/// Column sums as a vector of length a.cols().
std::vector<double> column_sums(const Matrix& a);
/// Rows of `a` selected by `index`, in order.
Matrix gather_rows(const Matrix& a, std::span<const std::size_t> index);

struct MlpLayer {
  Matrix weight;               // d_out × d_in
  std::vector<double> bias;    // d_out

  std::size_t in_dim() const noexcept { return weight.cols(); }
  std::size_t out_dim() const noexcept { return weight.rows(); }
  friend bool operator==(const MlpLayer&, const MlpLayer&) = default;
};

/// Rectifier on every hidden layer, identity on the last one.
struct MlpParams {
  std::vector<MlpLayer> layers;

  std::size_t in_dim() const;
  std::size_t out_dim() const;
  std::size_t parameter_count() const;
  /// Throws ShapeError if consecutive layers do not chain.
  void validate() const;

  friend bool operator==(const MlpParams&, const MlpParams&) = default;
};

/// Same layout as MlpParams; each entry is ∂loss/∂parameter.
using MlpGradients = MlpParams;

/// Zero-valued parameters with the same shapes as `like`.
MlpParams zeros_like(const MlpParams& like);

/// Glorot-uniform weights, zero biases. sizes = {d_in, h_1, ..., d_out}.
MlpParams init_mlp(std::span<const std::size_t> sizes, Rng& rng);

struct MlpCache {
  std::vector<Matrix> inputs;       // input of layer t (post-activation of t-1)
  std::vector<Matrix> preacts;      // pre-activation of layer t
  std::vector<std::size_t> shape;   // d_in, d_out of every layer, for stale-cache checks
};

struct MlpForward {
  Matrix output;
  MlpCache cache;
};

MlpForward mlp_forward(const MlpParams& params, const Matrix& input);

struct MlpBackward {
  MlpGradients grads;
  Matrix input_grad;
};

/// Exact reverse pass. The rectifier's derivative at 0 is taken as 0.
MlpBackward mlp_backward(const MlpParams& params, const MlpCache& cache, const Matrix& output_grad);

/// Parameters flattened layer by layer: weights row-major, then bias.
std::vector<double> flatten(const MlpParams& params);
/// Inverse of flatten, using `like` for the shapes.
MlpParams unflatten(std::span<const double> flat, const MlpParams& like);

/// Central-difference gradient check over a flat parameter vector.
/// Returns max_k |analytic_k − numeric_k| / max(1, |numeric_k|).
double finite_diff_check(const std::function<double(std::span<const double>)>& f,
                         std::span<const double> point, std::span<const double> analytic,
                         double eps);

double finite_diff_check(const std::function<double(const MlpParams&)>& f, const MlpParams& params,
                         const MlpGradients& analytic, double eps);

}  // namespace balancelab
