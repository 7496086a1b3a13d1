#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace emblaunder {

// Domain error with a stable code string ("ZeroNorm", "ShapeMismatch", ...)
// so callers and tests can match on the class of failure.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& msg)
      : std::runtime_error(code + ": " + msg), code_(std::move(code)) {}
  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <typename T>
inline bool is_finite_value(T v) {
  return v - v == T(0);  // false for NaN and +/-Inf
}

// Dense row-major tensor. Values are checked finite at creation; graph ops
// re-check after every forward computation.
template <typename T>
struct TensorT {
  Shape shape;
  std::vector<T> data;

  TensorT() = default;
  TensorT(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<int64_t>(data.size()) != numel(shape)) {
      throw Error("ShapeMismatch", "data size " + std::to_string(data.size()) +
                                       " does not match shape " +
                                       shape_str(shape));
    }
    check_finite();
  }

  static TensorT zeros(Shape s) {
    TensorT t;
    t.shape = std::move(s);
    t.data.assign(static_cast<size_t>(numel(t.shape)), T(0));
    return t;
  }

  static TensorT scalar(T v) { return TensorT({}, {v}); }

  static TensorT vec(std::initializer_list<T> vals) {
    TensorT t;
    t.shape = {static_cast<int>(vals.size())};
    t.data.assign(vals);
    t.check_finite();
    return t;
  }

  int rank() const { return static_cast<int>(shape.size()); }
  int64_t size() const { return static_cast<int64_t>(data.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  T& at(int64_t i) { return data[static_cast<size_t>(i)]; }
  T at(int64_t i) const { return data[static_cast<size_t>(i)]; }

  void check_finite() const {
    for (T v : data) {
      if (!is_finite_value(v)) {
        throw Error("NonFinite", "tensor of shape " + shape_str(shape) +
                                     " contains NaN or Inf");
      }
    }
  }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out;
    out.shape = shape;
    out.data.reserve(data.size());
    for (T v : data) out.data.push_back(static_cast<U>(v));
    return out;
  }
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

// Plain-value vector helpers for evaluation-side math (no gradients).
inline float vec_dot(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw Error("ShapeMismatch", "dot of unequal vectors");
  float s = 0.0f;
  for (int64_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

inline float vec_norm(const Tensor& a) {
  float s = 0.0f;
  for (float v : a.data) s += v * v;
  return std::sqrt(s);
}

inline float vec_cosine(const Tensor& a, const Tensor& b) {
  const float na = vec_norm(a), nb = vec_norm(b);
  if (na == 0.0f || nb == 0.0f) throw Error("ZeroNorm", "cosine of zero vector");
  return vec_dot(a, b) / (na * nb);
}

inline void vec_normalize(Tensor& a) {
  const float n = vec_norm(a);
  if (n == 0.0f) throw Error("ZeroNorm", "cannot normalize zero vector");
  for (float& v : a.data) v /= n;
}

}  // namespace emblaunder
