// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensor on a contiguous buffer, plus the deterministic
// RNG and the binary tensor record used by checkpoints.
//
// Activations are laid out (batch, channels, height, width); convolution
// weights (out, in/groups, kH, kW). The scalar type is a template
// parameter; TensorX below aliases the build-configured default.

#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <istream>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace strattn {

#if defined(STRATTN_SCALAR_F32)
using DefaultScalar = float;
#else
using DefaultScalar = double;
#endif

// Validation failures (bad shapes, bad configs). CLI maps these to exit 1.
struct ShapeError : std::invalid_argument {
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

// Numerical failures (degenerate slices, non-finite values). CLI exit 2.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    out += std::to_string(s[i]);
    if (i + 1 < s.size()) out += ", ";
  }
  return out + ")";
}

template <class S>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    std::size_t n = 1;
    for (std::size_t d = 0; d < shape_.size(); ++d) {
      if (shape_[d] < 1)
        throw ShapeError("tensor extent " + std::to_string(d) + " must be >= 1, got 0 in " +
                         shape_str(shape_));
      n *= shape_[d];
    }
    data_.assign(n, S(0));
  }

  Tensor(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
    std::size_t n = 1;
    for (std::size_t d = 0; d < shape_.size(); ++d) {
      if (shape_[d] < 1)
        throw ShapeError("tensor extent " + std::to_string(d) + " must be >= 1 in " +
                         shape_str(shape_));
      n *= shape_[d];
    }
    if (n != data_.size())
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, S value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t d) const { return shape_.at(d); }
  std::size_t numel() const { return data_.size(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  auto begin() { return data_.begin(); }
  auto end() { return data_.end(); }
  auto begin() const { return data_.begin(); }
  auto end() const { return data_.end(); }

  S& operator[](std::size_t flat) {
    assert(flat < data_.size());
    return data_[flat];
  }
  S operator[](std::size_t flat) const {
    assert(flat < data_.size());
    return data_[flat];
  }

  S& operator()(std::size_t i) {
    assert(rank() == 1);
    return data_[i];
  }
  S operator()(std::size_t i) const {
    assert(rank() == 1);
    return data_[i];
  }
  S& operator()(std::size_t i, std::size_t j) {
    assert(rank() == 2);
    return data_[i * shape_[1] + j];
  }
  S operator()(std::size_t i, std::size_t j) const {
    assert(rank() == 2);
    return data_[i * shape_[1] + j];
  }
  S& operator()(std::size_t i, std::size_t j, std::size_t k) {
    assert(rank() == 3);
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  S operator()(std::size_t i, std::size_t j, std::size_t k) const {
    assert(rank() == 3);
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  S& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    assert(rank() == 4);
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  S operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    assert(rank() == 4);
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  Tensor reshaped(Shape shape) const {
    Tensor t(std::move(shape), data_);
    return t;
  }

 private:
  Shape shape_;
  std::vector<S> data_;
};

using TensorX = Tensor<DefaultScalar>;

template <class S>
void require_rank(const Tensor<S>& t, std::size_t r, const char* what) {
  if (t.rank() != r)
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(r) + ", got " +
                     shape_str(t.shape()));
}

template <class S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* what) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(what) + ": shape " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

template <class S>
bool all_finite(const Tensor<S>& t) {
  for (S v : t)
    if (!std::isfinite(double(v))) return false;
  return true;
}

// Debug-mode guard: forward ops assert finite outputs on finite inputs.
template <class S>
void debug_check_finite(const Tensor<S>& t, const char* what) {
#ifndef NDEBUG
  assert(all_finite(t) && what);
#else
  (void)t;
  (void)what;
#endif
}

// ---- elementwise helpers ----------------------------------------------

template <class S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape(a, b, "tensor add");
  Tensor<S> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  return out;
}

template <class S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape(a, b, "tensor sub");
  Tensor<S> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
  return out;
}

template <class S>
Tensor<S> operator*(S s, const Tensor<S>& a) {
  Tensor<S> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = s * a[i];
  return out;
}

// y += alpha * x
template <class S>
void axpy(S alpha, const Tensor<S>& x, Tensor<S>& y) {
  require_same_shape(x, y, "axpy");
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] += alpha * x[i];
}

template <class S>
double max_abs(const Tensor<S>& t) {
  double m = 0;
  for (S v : t) m = std::max(m, std::abs(double(v)));
  return m;
}

// max over elements of |a-b| / max(|a|, |b|, floor)
template <class S>
double max_rel_diff(const Tensor<S>& a, const Tensor<S>& b, double floor = 1e-8) {
  require_same_shape(a, b, "max_rel_diff");
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    double den = std::max({std::abs(double(a[i])), std::abs(double(b[i])), floor});
    m = std::max(m, std::abs(double(a[i]) - double(b[i])) / den);
  }
  return m;
}

// ---- Eigen views over the contiguous buffer ---------------------------

template <class S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<MatRM<S>>;
template <class S>
using ConstMatMap = Eigen::Map<const MatRM<S>>;
template <class S>
using VecMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>;
template <class S>
using ConstVecMap = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>;

template <class S>
MatMap<S> as_matrix(Tensor<S>& t, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
  assert(offset + rows * cols <= t.numel());
  return MatMap<S>(t.data() + offset, rows, cols);
}

template <class S>
ConstMatMap<S> as_matrix(const Tensor<S>& t, std::size_t rows, std::size_t cols,
                         std::size_t offset = 0) {
  assert(offset + rows * cols <= t.numel());
  return ConstMatMap<S>(t.data() + offset, rows, cols);
}

// ---- deterministic RNG -------------------------------------------------
//
// Counter-based splitmix64: draw i from seed s is mix(s + (i+1)*GOLDEN).
// State is exactly (seed, position), so identical seed + position gives
// identical values on any platform; save/restore is two integers.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t position = 0)
      : seed_(seed), pos_(position) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t position() const { return pos_; }

  std::uint64_t next_u64() {
    std::uint64_t z = seed_ + (++pos_) * 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1) with 53 random bits; exact binary scaling
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double range(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

 private:
  std::uint64_t seed_;
  std::uint64_t pos_;
};

// Fan-in scaled uniform init: U(-a, a) with a = sqrt(6/fan_in), so the
// element standard deviation is sqrt(2/fan_in). Bit-identical per seed.
template <class S>
Tensor<S> seeded_init(Shape shape, std::size_t fan_in, Rng& rng) {
  if (fan_in < 1) throw ShapeError("seeded_init: fan_in must be >= 1");
  Tensor<S> t(std::move(shape));
  const double a = std::sqrt(6.0 / double(fan_in));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = S(rng.range(-a, a));
  return t;
}

// ---- binary tensor record ----------------------------------------------
//
// Little-endian record: magic "STRA", format version u32, rank u32,
// extents u64[rank], dtype tag u8 (0 = f64, 1 = f32), raw data.

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = (unsigned char)((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = (unsigned char)((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw NumericError("tensor record: truncated u32");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw NumericError("tensor record: truncated u64");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
  return v;
}

template <class S>
constexpr std::uint8_t dtype_tag() {
  static_assert(std::is_same_v<S, double> || std::is_same_v<S, float>,
                "tensor records support f64 and f32 only");
  return std::is_same_v<S, double> ? 0 : 1;
}

inline bool host_is_little_endian() {
  const std::uint16_t probe = 1;
  unsigned char b;
  std::memcpy(&b, &probe, 1);
  return b == 1;
}

}  // namespace detail

inline constexpr char kTensorMagic[4] = {'S', 'T', 'R', 'A'};
inline constexpr std::uint32_t kTensorFormatVersion = 1;

template <class S>
void write_tensor(std::ostream& os, const Tensor<S>& t) {
  os.write(kTensorMagic, 4);
  detail::write_u32(os, kTensorFormatVersion);
  detail::write_u32(os, std::uint32_t(t.rank()));
  for (std::size_t d = 0; d < t.rank(); ++d) detail::write_u64(os, t.extent(d));
  const std::uint8_t tag = detail::dtype_tag<S>();
  os.write(reinterpret_cast<const char*>(&tag), 1);
  if (detail::host_is_little_endian()) {
    os.write(reinterpret_cast<const char*>(t.data()),
             std::streamsize(t.numel() * sizeof(S)));
  } else {
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const S v = t[i];
      std::uint64_t bits = 0;
      std::memcpy(&bits, &v, sizeof(S));
      if constexpr (sizeof(S) == 8)
        detail::write_u64(os, bits);
      else
        detail::write_u32(os, std::uint32_t(bits));
    }
  }
}

template <class S>
Tensor<S> read_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kTensorMagic, 4) != 0)
    throw NumericError("tensor record: bad magic");
  const std::uint32_t version = detail::read_u32(is);
  if (version != kTensorFormatVersion)
    throw NumericError("tensor record: unsupported version " + std::to_string(version));
  const std::uint32_t rank = detail::read_u32(is);
  if (rank > 32) throw NumericError("tensor record: implausible rank");
  Shape shape(rank);
  for (std::uint32_t d = 0; d < rank; ++d) shape[d] = detail::read_u64(is);
  std::uint8_t tag;
  is.read(reinterpret_cast<char*>(&tag), 1);
  if (!is) throw NumericError("tensor record: truncated dtype tag");
  if (tag != detail::dtype_tag<S>())
    throw NumericError("tensor record: dtype tag " + std::to_string(int(tag)) +
                       " does not match requested scalar");
  Tensor<S> t(std::move(shape));
  if (detail::host_is_little_endian()) {
    is.read(reinterpret_cast<char*>(t.data()), std::streamsize(t.numel() * sizeof(S)));
    if (!is) throw NumericError("tensor record: truncated data");
  } else {
    for (std::size_t i = 0; i < t.numel(); ++i) {
      if constexpr (sizeof(S) == 8) {
        std::uint64_t bits = detail::read_u64(is);
        std::memcpy(&t[i], &bits, 8);
      } else {
        std::uint32_t bits = detail::read_u32(is);
        std::memcpy(&t[i], &bits, 4);
      }
    }
  }
  return t;
}

}  // namespace strattn
