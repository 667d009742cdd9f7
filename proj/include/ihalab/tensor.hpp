#pragma once

// Dense row-major float64 tensors and the handful of kernels the rest of the
// library is built on: matmul, masked row softmax, the named head-mixing
// contractions, and a row-reduction rank estimate.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace ihalab {

using Shape = std::vector<std::size_t>;

class dimension_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A softmax/hard-attention row with no visible entry.
class degenerate_row_error : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

class Tensor {
 public:
  // Rank-0 scalar holding one zero.
  Tensor() : data_(1, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != shape_numel(shape_)) {
      throw dimension_error("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> d;
    d.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw dimension_error("ragged matrix literal");
      d.insert(d.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(d));
  }

  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& vec() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const double& operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const double& operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  double& operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }
  const double& operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }

  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.at(1); }

  // Row-major layout makes this metadata-only.
  Tensor reshape(Shape s) const {
    if (shape_numel(s) != data_.size()) {
      throw dimension_error("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    }
    return Tensor(std::move(s), data_);
  }

  bool operator==(const Tensor& o) const = default;

 private:
  static void check_shape(const Shape& s) {
    for (auto e : s) {
      if (e == 0) throw dimension_error("tensor shape entries must be >= 1, got " + shape_str(s));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

// Row-major boolean matrix; true means visible / set.
class BoolMatrix {
 public:
  BoolMatrix() = default;
  BoolMatrix(std::size_t rows, std::size_t cols, bool fill = false)
      : rows_(rows), cols_(cols), data_(rows * cols, fill ? 1 : 0) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j] != 0; }
  void set(std::size_t i, std::size_t j, bool v) { data_[i * cols_ + j] = v ? 1 : 0; }
  bool operator==(const BoolMatrix&) const = default;

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<unsigned char> data_;
};

inline void require_rank(const Tensor& t, std::size_t r, std::string_view what) {
  if (t.rank() != r) {
    throw dimension_error(std::string(what) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(t.shape()));
  }
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw dimension_error("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return c;
}

inline Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  Tensor t({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) t(j, i) = a(i, j);
  return t;
}

inline Tensor matrix_power(const Tensor& a, std::size_t e) {
  require_rank(a, 2, "matrix_power");
  if (a.dim(0) != a.dim(1)) throw dimension_error("matrix_power needs a square matrix");
  Tensor r = Tensor::identity(a.dim(0));
  for (std::size_t i = 0; i < e; ++i) r = matmul(r, a);
  return r;
}

// [a, b] column-wise concatenation.
inline Tensor hconcat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw dimension_error("hconcat of nothing");
  const std::size_t r = parts.front().dim(0);
  std::size_t c = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "hconcat");
    if (p.dim(0) != r) throw dimension_error("hconcat row mismatch");
    c += p.dim(1);
  }
  Tensor out({r, c});
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < p.dim(1); ++j) out(i, off + j) = p(i, j);
    off += p.dim(1);
  }
  return out;
}

// [a; b] row-wise stacking.
inline Tensor vconcat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw dimension_error("vconcat of nothing");
  const std::size_t c = parts.front().dim(1);
  std::size_t r = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "vconcat");
    if (p.dim(1) != c) throw dimension_error("vconcat column mismatch");
    r += p.dim(0);
  }
  std::vector<double> d;
  d.reserve(r * c);
  for (const auto& p : parts) d.insert(d.end(), p.vec().begin(), p.vec().end());
  return Tensor({r, c}, std::move(d));
}

inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank(a, 2, "slice_cols");
  if (begin >= end || end > a.dim(1)) throw dimension_error("slice_cols out of range");
  Tensor out({a.dim(0), end - begin});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = begin; j < end; ++j) out(i, j - begin) = a(i, j);
  return out;
}

inline Tensor operator+(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw dimension_error("add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

inline Tensor operator-(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw dimension_error("sub shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
  return c;
}

inline Tensor operator*(double s, const Tensor& a) {
  Tensor c = a;
  for (auto& v : c.data()) v *= s;
  return c;
}

inline double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw dimension_error("compare shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Row-wise softmax over the visible entries; masked entries come out exactly 0.
inline Tensor softmax_rows(const Tensor& s, const BoolMatrix* mask = nullptr) {
  require_rank(s, 2, "softmax_rows");
  const std::size_t m = s.dim(0), n = s.dim(1);
  if (mask && (mask->rows() != m || mask->cols() != n))
    throw dimension_error("softmax_rows mask shape mismatch");
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (!mask || (*mask)(i, j)) mx = std::max(mx, s(i, j));
    if (mx == -std::numeric_limits<double>::infinity())
      throw degenerate_row_error("softmax row " + std::to_string(i) + " is fully masked");
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && !(*mask)(i, j)) continue;
      const double e = std::exp(s(i, j) - mx);
      out(i, j) = e;
      z += e;
    }
    for (std::size_t j = 0; j < n; ++j) out(i, j) /= z;
  }
  return out;
}

inline Tensor softmax_rows(const Tensor& s, const BoolMatrix& mask) { return softmax_rows(s, &mask); }

// Named index contractions used by the pseudo-head machinery.
enum class Contraction {
  mix_heads,         // 'mhp,nmd->hpnd'   alpha[H,H,P], X[N,H,d]       -> [H,P,N,d]
  collapse,          // 'hp,hnpd->hnd'    R[H,P],       T[H,N,P,d]     -> [H,N,d]
  general_collapse,  // 'hq,qnd->hnd'     R[H,H*P],     T[H,N,P,d]     -> [H,N,d], q = (h',p)
};

inline Contraction parse_contraction(std::string_view spec) {
  if (spec == "mhp,nmd->hpnd") return Contraction::mix_heads;
  if (spec == "hp,hnpd->hnd") return Contraction::collapse;
  if (spec == "hq,qnd->hnd" || spec == "general_collapse") return Contraction::general_collapse;
  throw std::invalid_argument("unknown contraction descriptor '" + std::string(spec) + "'");
}

inline Tensor contract(Contraction c, const Tensor& a, const Tensor& b) {
  switch (c) {
    case Contraction::mix_heads: {
      require_rank(a, 3, "mix_heads alpha");
      require_rank(b, 3, "mix_heads operand");
      const std::size_t H = a.dim(0), Ht = a.dim(1), P = a.dim(2);
      const std::size_t N = b.dim(0), d = b.dim(2);
      if (b.dim(1) != H)
        throw dimension_error("mix_heads: alpha " + shape_str(a.shape()) + " vs operand " +
                             shape_str(b.shape()));
      Tensor out({Ht, P, N, d});
      for (std::size_t m = 0; m < H; ++m)
        for (std::size_t h = 0; h < Ht; ++h)
          for (std::size_t p = 0; p < P; ++p) {
            const double w = a(m, h, p);
            if (w == 0.0) continue;
            for (std::size_t n = 0; n < N; ++n)
              for (std::size_t k = 0; k < d; ++k) out(h, p, n, k) += w * b(n, m, k);
          }
      return out;
    }
    case Contraction::collapse: {
      require_rank(a, 2, "collapse R");
      require_rank(b, 4, "collapse operand");
      const std::size_t H = b.dim(0), N = b.dim(1), P = b.dim(2), d = b.dim(3);
      if (a.dim(0) != H || a.dim(1) != P)
        throw dimension_error("collapse: R " + shape_str(a.shape()) + " vs operand " +
                             shape_str(b.shape()));
      Tensor out({H, N, d});
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t p = 0; p < P; ++p) {
            const double w = a(h, p);
            for (std::size_t k = 0; k < d; ++k) out(h, n, k) += w * b(h, n, p, k);
          }
      return out;
    }
    case Contraction::general_collapse: {
      require_rank(a, 2, "general_collapse R");
      require_rank(b, 4, "general_collapse operand");
      const std::size_t Hs = b.dim(0), N = b.dim(1), P = b.dim(2), d = b.dim(3);
      const std::size_t H = a.dim(0);
      if (a.dim(1) != Hs * P)
        throw dimension_error("general_collapse: R " + shape_str(a.shape()) + " vs operand " +
                             shape_str(b.shape()));
      Tensor out({H, N, d});
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t hs = 0; hs < Hs; ++hs)
          for (std::size_t p = 0; p < P; ++p) {
            const double w = a(h, hs * P + p);
            if (w == 0.0) continue;
            for (std::size_t n = 0; n < N; ++n)
              for (std::size_t k = 0; k < d; ++k) out(h, n, k) += w * b(hs, n, p, k);
          }
      return out;
    }
  }
  throw std::invalid_argument("unknown contraction descriptor");
}

inline Tensor contract(std::string_view spec, const Tensor& a, const Tensor& b) {
  return contract(parse_contraction(spec), a, b);
}

// Rank by Gaussian elimination with partial pivoting. A pivot counts iff
// |pivot| > tol * max|entry| of the input.
inline std::size_t numerical_rank(const Tensor& a, double tol) {
  require_rank(a, 2, "numerical_rank");
  if (!(tol > 0.0)) throw std::invalid_argument("numerical_rank: tol must be > 0");
  Tensor w = a;
  const std::size_t m = w.dim(0), n = w.dim(1);
  const double scale = max_abs(a);
  if (scale == 0.0) return 0;
  const double thresh = tol * scale;
  std::size_t r = 0;
  for (std::size_t col = 0; col < n && r < m; ++col) {
    std::size_t piv = r;
    for (std::size_t i = r + 1; i < m; ++i)
      if (std::abs(w(i, col)) > std::abs(w(piv, col))) piv = i;
    if (std::abs(w(piv, col)) <= thresh) continue;
    if (piv != r)
      for (std::size_t j = 0; j < n; ++j) std::swap(w(piv, j), w(r, j));
    for (std::size_t i = r + 1; i < m; ++i) {
      const double f = w(i, col) / w(r, col);
      if (f == 0.0) continue;
      for (std::size_t j = col; j < n; ++j) w(i, j) -= f * w(r, j);
    }
    ++r;
  }
  return r;
}

}  // namespace ihalab
