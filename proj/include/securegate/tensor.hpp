#pragma once

// Dense row-major f64 tensors plus the numeric kernels shared by the autodiff
// tape and the fast inference path. Both paths call the same kernels in the
// same order, so their outputs are bit-identical.

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "securegate/rng.hpp"

namespace securegate {

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;

  Tensor(std::vector<std::size_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != data.size())
      throw std::invalid_argument("Tensor: shape/data size mismatch");
  }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t d : s) {
      if (d == 0) throw std::invalid_argument("Tensor: zero dimension");
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<std::size_t> s) {
    std::size_t n = numel_of(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }

  static Tensor full(std::vector<std::size_t> s, double v) {
    std::size_t n = numel_of(s);
    return Tensor(std::move(s), std::vector<double>(n, v));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor randn(std::vector<std::size_t> s, Rng& rng, double stddev = 1.0) {
    Tensor t = zeros(std::move(s));
    for (double& v : t.data) v = rng.normal(0.0, stddev);
    return t;
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }

  std::size_t rows() const {
    if (rank() != 2) throw std::logic_error("Tensor::rows: not 2-D");
    return shape[0];
  }
  std::size_t cols() const {
    if (rank() != 2) throw std::logic_error("Tensor::cols: not 2-D");
    return shape[1];
  }

  double& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double max_abs() const {
    double m = 0.0;
    for (double v : data) m = std::max(m, std::abs(v));
    return m;
  }

  double l2_norm() const {
    double s = 0.0;
    for (double v : data) s += v * v;
    return std::sqrt(s);
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i)
      os << shape[i] << (i + 1 < shape.size() ? "," : "");
    os << ')';
    return os.str();
  }
};

// ---------------------------------------------------------------------------
// kernels

// out = op_a(a) * op_b(b) where op is optional transpose. 2-D only.
// Accumulation order is fixed (k innermost via row updates), so results are
// deterministic. flops, when given, is incremented by 2*m*k*n.
inline void matmul_into(Tensor& out, const Tensor& a, const Tensor& b,
                        bool ta, bool tb, std::uint64_t* flops = nullptr) {
  if (a.rank() != 2 || b.rank() != 2)
    throw std::invalid_argument("matmul: operands must be 2-D, got " +
                                a.shape_str() + " and " + b.shape_str());
  const std::size_t m = ta ? a.cols() : a.rows();
  const std::size_t k = ta ? a.rows() : a.cols();
  const std::size_t kb = tb ? b.cols() : b.rows();
  const std::size_t n = tb ? b.rows() : b.cols();
  if (k != kb)
    throw std::invalid_argument("matmul: inner dimensions disagree: " +
                                a.shape_str() + (ta ? "^T" : "") + " x " +
                                b.shape_str() + (tb ? "^T" : ""));
  out.shape = {m, n};
  out.data.assign(m * n, 0.0);
  double* o = out.data.data();
  const double* pa = a.data.data();
  const double* pb = b.data.data();

  if (!ta && !tb) {
    for (std::size_t i = 0; i < m; ++i) {
      double* orow = o + i * n;
      const double* arow = pa + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = arow[p];
        const double* brow = pb + p * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  } else if (!ta && tb) {
    if (m >= 8) {
      // Transpose b once and reuse the vector-friendly row-update loop. The
      // accumulation order over p is unchanged, so results are bit-identical
      // to the dot-product form below.
      thread_local std::vector<double> scratch;
      scratch.assign(k * n, 0.0);
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t p = 0; p < k; ++p) scratch[p * n + j] = pb[j * k + p];
      for (std::size_t i = 0; i < m; ++i) {
        double* orow = o + i * n;
        const double* arow = pa + i * k;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = arow[p];
          const double* brow = scratch.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
      }
    } else {
      for (std::size_t i = 0; i < m; ++i) {
        const double* arow = pa + i * k;
        double* orow = o + i * n;
        for (std::size_t j = 0; j < n; ++j) {
          const double* brow = pb + j * k;
          double s = 0.0;
          for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
          orow[j] = s;
        }
      }
    }
  } else if (ta && !tb) {
    for (std::size_t p = 0; p < k; ++p) {
      const double* arow = pa + p * m;
      const double* brow = pb + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const double av = arow[i];
        double* orow = o + i * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  } else {
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = pb + p;  // column p of b, strided
      const double* arow = pa + p * m;
      for (std::size_t i = 0; i < m; ++i) {
        const double av = arow[i];
        double* orow = o + i * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j * k];
      }
    }
  }
  if (flops) *flops += 2ull * m * k * n;
}

inline Tensor matmul(const Tensor& a, const Tensor& b, bool ta = false,
                     bool tb = false, std::uint64_t* flops = nullptr) {
  Tensor out;
  matmul_into(out, a, b, ta, tb, flops);
  return out;
}

// Row-wise softmax over the last dimension of a 2-D tensor. scale multiplies
// the logits first; causal masks out j > i (requires a square matrix).
inline void softmax_inplace(Tensor& x, bool causal = false, double scale = 1.0) {
  if (x.rank() != 2)
    throw std::invalid_argument("softmax: expected 2-D input, got " + x.shape_str());
  const std::size_t rows = x.rows(), cols = x.cols();
  if (causal && rows != cols)
    throw std::invalid_argument("softmax: causal mask needs a square matrix, got " +
                                x.shape_str());
  for (std::size_t i = 0; i < rows; ++i) {
    double* row = x.data.data() + i * cols;
    const std::size_t lim = causal ? i + 1 : cols;
    double mx = -HUGE_VAL;
    for (std::size_t j = 0; j < lim; ++j) mx = std::max(mx, row[j] * scale);
    double sum = 0.0;
    for (std::size_t j = 0; j < lim; ++j) {
      row[j] = std::exp(row[j] * scale - mx);
      sum += row[j];
    }
    for (std::size_t j = 0; j < lim; ++j) row[j] /= sum;
    for (std::size_t j = lim; j < cols; ++j) row[j] = 0.0;
  }
}

// y = gamma * (x - mu) / sqrt(var + eps) + beta per row; gamma/beta have
// length cols. When xhat_out/inv_std_out are given the normalized values and
// reciprocal stddevs are saved for the backward pass.
inline Tensor layer_norm_forward(const Tensor& x, const Tensor& gamma,
                                 const Tensor& beta, double eps,
                                 Tensor* xhat_out = nullptr,
                                 std::vector<double>* inv_std_out = nullptr) {
  if (x.rank() != 2)
    throw std::invalid_argument("layer_norm: expected 2-D input, got " + x.shape_str());
  const std::size_t rows = x.rows(), cols = x.cols();
  if (gamma.numel() != cols || beta.numel() != cols)
    throw std::invalid_argument("layer_norm: gamma/beta length must equal " +
                                std::to_string(cols));
  Tensor y = Tensor::zeros({rows, cols});
  if (xhat_out) *xhat_out = Tensor::zeros({rows, cols});
  if (inv_std_out) inv_std_out->assign(rows, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* row = x.data.data() + i * cols;
    double mu = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mu += row[j];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double d = row[j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < cols; ++j) {
      const double xh = (row[j] - mu) * inv;
      if (xhat_out) xhat_out->data[i * cols + j] = xh;
      y.data[i * cols + j] = gamma.data[j] * xh + beta.data[j];
    }
    if (inv_std_out) (*inv_std_out)[i] = inv;
  }
  return y;
}

inline double gelu_scalar(double x) {
  return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440));
}

inline double gelu_grad_scalar(double x) {
  static constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return 0.5 * (1.0 + std::erf(x * 0.70710678118654752440)) +
         x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

inline void gelu_inplace(Tensor& x) {
  for (double& v : x.data) v = gelu_scalar(v);
}

inline double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// GLU over the last dimension: splits [n, 2h] into (a, b) and returns
// a * sigmoid(b) with shape [n, h].
inline Tensor glu_forward(const Tensor& x) {
  if (x.rank() != 2 || x.cols() % 2 != 0)
    throw std::invalid_argument("glu: expected 2-D input with even columns, got " +
                                x.shape_str());
  const std::size_t rows = x.rows(), half = x.cols() / 2;
  Tensor y = Tensor::zeros({rows, half});
  for (std::size_t i = 0; i < rows; ++i) {
    const double* row = x.data.data() + i * x.cols();
    for (std::size_t j = 0; j < half; ++j)
      y.data[i * half + j] = row[j] * sigmoid_scalar(row[half + j]);
  }
  return y;
}

inline Tensor embedding_gather(const Tensor& table, const std::vector<int>& ids) {
  if (table.rank() != 2)
    throw std::invalid_argument("embedding: table must be 2-D, got " + table.shape_str());
  const std::size_t v = table.rows(), d = table.cols();
  Tensor out = Tensor::zeros({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) +
                              " outside table of " + std::to_string(v) + " rows");
    const double* src = table.data.data() + static_cast<std::size_t>(ids[i]) * d;
    std::copy(src, src + d, out.data.data() + i * d);
  }
  return out;
}

}  // namespace securegate
