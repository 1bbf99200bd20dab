#include "balancelab/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "balancelab/errors.hpp"
#include "balancelab/random.hpp"

namespace balancelab {

namespace {

std::string dims(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_finite(const Matrix& m, const char* op) {
  if (!m.all_finite()) throw NumericError(std::string(op) + ": non-finite result");
}

std::vector<std::size_t> shape_of(const MlpParams& p) {
  std::vector<std::size_t> s;
  s.reserve(p.layers.size() * 2);
  for (const auto& l : p.layers) {
    s.push_back(l.in_dim());
    s.push_back(l.out_dim());
  }
  return s;
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), values_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
  if (values_.size() != rows * cols)
    throw ShapeError("matrix " + std::to_string(rows) + "x" + std::to_string(cols) + " given " +
                     std::to_string(values_.size()) + " values");
}

Matrix Matrix::from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return {};
  Matrix m(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != m.cols()) throw ShapeError("ragged rows");
    std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
  }
  return m;
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

bool Matrix::all_finite() const noexcept {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul " + dims(a) + " * " + dims(b));
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto o = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      auto br = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) o[j] += aik * br[j];
    }
  }
  require_finite(out, "matmul");
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw ShapeError("matmul_tn " + dims(a) + "^T * " + dims(b));
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto ar = a.row(k);
    auto br = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = ar[i];
      auto o = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) o[j] += aki * br[j];
    }
  }
  require_finite(out, "matmul_tn");
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt " + dims(a) + " * " + dims(b) + "^T");
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto ar = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto br = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += ar[k] * br[k];
      out(i, j) = acc;
    }
  }
  require_finite(out, "matmul_nt");
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

Matrix add(const Matrix& a, const Matrix& b) {
  Matrix out = a;
  axpy(1.0, b, out);
  return out;
}

void axpy(double scale, const Matrix& b, Matrix& a) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("axpy " + dims(a) + " vs " + dims(b));
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) av[i] += scale * bv[i];
}

std::vector<double> column_sums(const Matrix& a) {
  std::vector<double> s(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    for (std::size_t j = 0; j < a.cols(); ++j) s[j] += r[j];
  }
  return s;
}

Matrix gather_rows(const Matrix& a, std::span<const std::size_t> index) {
  Matrix out(index.size(), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= a.rows()) throw ShapeError("gather_rows: index out of range");
    std::copy_n(a.row(index[i]).begin(), a.cols(), out.row(i).begin());
  }
  return out;
}

std::size_t MlpParams::in_dim() const {
  if (layers.empty()) throw ShapeError("mlp has no layers");
  return layers.front().in_dim();
}

std::size_t MlpParams::out_dim() const {
  if (layers.empty()) throw ShapeError("mlp has no layers");
  return layers.back().out_dim();
}

std::size_t MlpParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

void MlpParams::validate() const {
  if (layers.empty()) throw ShapeError("mlp has no layers");
  for (std::size_t t = 0; t < layers.size(); ++t) {
    const auto& l = layers[t];
    if (l.weight.rows() == 0 || l.weight.cols() == 0)
      throw ShapeError("layer " + std::to_string(t) + " is empty");
    if (l.bias.size() != l.out_dim())
      throw ShapeError("layer " + std::to_string(t) + " bias length mismatch");
    if (t + 1 < layers.size() && layers[t + 1].in_dim() != l.out_dim())
      throw ShapeError("layer " + std::to_string(t) + " output does not chain into layer " +
                       std::to_string(t + 1));
  }
}

MlpParams zeros_like(const MlpParams& like) {
  MlpParams z;
  z.layers.reserve(like.layers.size());
  for (const auto& l : like.layers)
    z.layers.push_back({Matrix(l.out_dim(), l.in_dim()), std::vector<double>(l.out_dim(), 0.0)});
  return z;
}

MlpParams init_mlp(std::span<const std::size_t> sizes, Rng& rng) {
  if (sizes.size() < 2) throw ShapeError("mlp needs at least an input and an output size");
  MlpParams p;
  for (std::size_t t = 0; t + 1 < sizes.size(); ++t) {
    const std::size_t fan_in = sizes[t];
    const std::size_t fan_out = sizes[t + 1];
    if (fan_in == 0 || fan_out == 0) throw ShapeError("mlp layer sizes must be positive");
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    MlpLayer layer{Matrix(fan_out, fan_in), std::vector<double>(fan_out, 0.0)};
    for (double& w : layer.weight.values()) w = rng.uniform(-a, a);
    p.layers.push_back(std::move(layer));
  }
  return p;
}

MlpForward mlp_forward(const MlpParams& params, const Matrix& input) {
  params.validate();
  if (input.cols() != params.in_dim())
    throw ShapeError("mlp input has " + std::to_string(input.cols()) + " columns, expected " +
                     std::to_string(params.in_dim()));
  MlpForward fw;
  fw.cache.shape = shape_of(params);
  Matrix x = input;
  for (std::size_t t = 0; t < params.layers.size(); ++t) {
    const auto& layer = params.layers[t];
    Matrix pre = matmul_nt(x, layer.weight);
    for (std::size_t r = 0; r < pre.rows(); ++r) {
      auto row = pre.row(r);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += layer.bias[j];
    }
    fw.cache.inputs.push_back(std::move(x));
    x = pre;
    if (t + 1 < params.layers.size())
      for (double& v : x.values()) v = v > 0.0 ? v : 0.0;
    fw.cache.preacts.push_back(std::move(pre));
  }
  fw.output = std::move(x);
  return fw;
}

MlpBackward mlp_backward(const MlpParams& params, const MlpCache& cache, const Matrix& output_grad) {
  if (cache.shape != shape_of(params) || cache.inputs.size() != params.layers.size() ||
      cache.preacts.size() != params.layers.size())
    throw ContractError("mlp_backward: cache was produced by a different network");
  const Matrix& last = cache.preacts.back();
  if (output_grad.rows() != last.rows() || output_grad.cols() != last.cols())
    throw ContractError("mlp_backward: output gradient " + dims(output_grad) +
                        " does not match cached output " + dims(last));

  MlpBackward bw;
  bw.grads = zeros_like(params);
  Matrix g = output_grad;
  for (std::size_t t = params.layers.size(); t-- > 0;) {
    if (t + 1 < params.layers.size()) {
      auto gv = g.values();
      auto pv = cache.preacts[t].values();
      for (std::size_t k = 0; k < gv.size(); ++k)
        if (!(pv[k] > 0.0)) gv[k] = 0.0;
    }
    bw.grads.layers[t].weight = matmul_tn(g, cache.inputs[t]);
    bw.grads.layers[t].bias = column_sums(g);
    g = matmul(g, params.layers[t].weight);
  }
  bw.input_grad = std::move(g);
  return bw;
}

std::vector<double> flatten(const MlpParams& params) {
  std::vector<double> flat;
  flat.reserve(params.parameter_count());
  for (const auto& l : params.layers) {
    flat.insert(flat.end(), l.weight.values().begin(), l.weight.values().end());
    flat.insert(flat.end(), l.bias.begin(), l.bias.end());
  }
  return flat;
}

MlpParams unflatten(std::span<const double> flat, const MlpParams& like) {
  if (flat.size() != like.parameter_count()) throw ShapeError("unflatten: length mismatch");
  MlpParams p = zeros_like(like);
  std::size_t at = 0;
  for (auto& l : p.layers) {
    auto w = l.weight.values();
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(at), w.size(), w.begin());
    at += w.size();
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(at), l.bias.size(), l.bias.begin());
    at += l.bias.size();
  }
  return p;
}

double finite_diff_check(const std::function<double(std::span<const double>)>& f,
                         std::span<const double> point, std::span<const double> analytic,
                         double eps) {
  if (!(eps > 0.0)) throw InvalidArgument("finite_diff_check: eps must be positive");
  if (analytic.size() != point.size()) throw ShapeError("finite_diff_check: gradient length mismatch");
  std::vector<double> p(point.begin(), point.end());
  double worst = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double saved = p[k];
    p[k] = saved + eps;
    const double up = f(p);
    p[k] = saved - eps;
    const double down = f(p);
    p[k] = saved;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericError("finite_diff_check: non-finite function value at coordinate " +
                         std::to_string(k));
    const double numeric = (up - down) / (2.0 * eps);
    worst = std::max(worst, std::abs(analytic[k] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

double finite_diff_check(const std::function<double(const MlpParams&)>& f, const MlpParams& params,
                         const MlpGradients& analytic, double eps) {
  const auto point = flatten(params);
  const auto grad = flatten(analytic);
  return finite_diff_check([&](std::span<const double> x) { return f(unflatten(x, params)); },
                           point, grad, eps);
}

}  // namespace balancelab
