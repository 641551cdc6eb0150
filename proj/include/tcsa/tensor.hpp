#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace tcsa {

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dense rank<=4 row-major tensor, channels-last. Data and grad are shared
// so that views (reshape) accumulate into the same gradient storage.
template <class T>
struct TensorT {
  std::vector<std::size_t> shape;
  std::shared_ptr<std::vector<T>> data;
  bool requires_grad = false;
  std::shared_ptr<std::vector<T>> grad;

  TensorT() = default;

  explicit TensorT(std::vector<std::size_t> s, T fill = T(0)) : shape(std::move(s)) {
    data = std::make_shared<std::vector<T>>(numel_of(shape), fill);
  }

  static TensorT zeros(std::vector<std::size_t> s) { return TensorT(std::move(s)); }

  static TensorT full(std::vector<std::size_t> s, T v) { return TensorT(std::move(s), v); }

  static TensorT from_values(std::vector<std::size_t> s, std::vector<T> values) {
    TensorT t;
    t.shape = std::move(s);
    if (numel_of(t.shape) != values.size()) throw TensorError("from_values: size mismatch");
    t.data = std::make_shared<std::vector<T>>(std::move(values));
    return t;
  }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    return n;
  }

  std::size_t numel() const { return data ? data->size() : 0; }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  std::size_t rank() const { return shape.size(); }

  T& at(std::size_t i) { return (*data)[i]; }
  T at(std::size_t i) const { return (*data)[i]; }

  T& at(std::size_t i, std::size_t j) { return (*data)[i * shape[1] + j]; }
  T at(std::size_t i, std::size_t j) const { return (*data)[i * shape[1] + j]; }

  T& at(std::size_t i, std::size_t j, std::size_t k) {
    return (*data)[(i * shape[1] + j) * shape[2] + k];
  }
  T at(std::size_t i, std::size_t j, std::size_t k) const {
    return (*data)[(i * shape[1] + j) * shape[2] + k];
  }

  T& at(std::size_t b, std::size_t y, std::size_t x, std::size_t c) {
    return (*data)[((b * shape[1] + y) * shape[2] + x) * shape[3] + c];
  }
  T at(std::size_t b, std::size_t y, std::size_t x, std::size_t c) const {
    return (*data)[((b * shape[1] + y) * shape[2] + x) * shape[3] + c];
  }

  TensorT& set_requires_grad() {
    requires_grad = true;
    if (!grad) grad = std::make_shared<std::vector<T>>(numel(), T(0));
    return *this;
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), T(0));
  }

  // Same storage, new shape. Grad storage is shared too.
  TensorT reshaped(std::vector<std::size_t> s) const {
    if (numel_of(s) != numel()) throw TensorError("reshape: element count mismatch");
    TensorT t = *this;
    t.shape = std::move(s);
    return t;
  }

  TensorT clone() const {
    TensorT t;
    t.shape = shape;
    t.data = std::make_shared<std::vector<T>>(*data);
    return t;
  }
};

// Integer index matrix produced by top-k / selection ops; never carries grad.
struct IndexMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<long> idx;

  long at(std::size_t i, std::size_t j) const { return idx[i * cols + j]; }
  long& at(std::size_t i, std::size_t j) { return idx[i * cols + j]; }
};

template <class T>
void check_finite(const TensorT<T>& t, const char* op) {
  for (T v : *t.data) {
    if (!std::isfinite(static_cast<double>(v)))
      throw TensorError(std::string(op) + ": non-finite value produced");
  }
}

template <class T>
void ensure_grad(const TensorT<T>& t) {
  if (t.requires_grad && !t.grad)
    const_cast<TensorT<T>&>(t).grad = std::make_shared<std::vector<T>>(t.numel(), T(0));
}

// Reverse-mode tape. Ops push a closure per node; backward replays them in
// strict reverse order. A tape can be consumed by backward only once.
template <class T>
class TapeT {
 public:
  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

  std::size_t size() const { return nodes_.size(); }

  void backward(TensorT<T>& loss) {
    if (spent_) throw TensorError("backward: tape already consumed");
    if (loss.numel() != 1) throw TensorError("backward: loss must be scalar");
    if (!loss.requires_grad || !loss.grad)
      throw TensorError("backward: loss is not on the tape");
    (*loss.grad)[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    spent_ = true;
  }

  void clear() {
    nodes_.clear();
    spent_ = false;
  }

 private:
  std::vector<std::function<void()>> nodes_;
  bool spent_ = false;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

// Truncated normal init (resample outside 2 sigma), the usual transformer default.
template <class T, class Rng>
TensorT<T> trunc_normal(std::vector<std::size_t> shape, double sigma, Rng& rng) {
  TensorT<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, sigma);
  for (auto& v : *t.data) {
    double z = dist(rng);
    while (std::abs(z) > 2.0 * sigma) z = dist(rng);
    v = static_cast<T>(z);
  }
  return t;
}

template <class T, class Rng>
TensorT<T> uniform(std::vector<std::size_t> shape, double lo, double hi, Rng& rng) {
  TensorT<T> t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : *t.data) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace tcsa
