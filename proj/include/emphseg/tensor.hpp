#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "emphseg/errors.hpp"

namespace emphseg {

/// Dense NCHW tensor. Domain features use the same type with shape (N, bins, 1, 1).
template <class T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t n, std::size_t c, std::size_t h, std::size_t w, T fill = T(0))
      : shape_{n, c, h, w}, data_(n * c * h * w, fill) {}

  std::size_t n() const { return shape_[0]; }
  std::size_t c() const { return shape_[1]; }
  std::size_t h() const { return shape_[2]; }
  std::size_t w() const { return shape_[3]; }
  std::size_t plane() const { return shape_[2] * shape_[3]; }
  std::size_t sample_size() const { return shape_[1] * shape_[2] * shape_[3]; }
  std::size_t size() const { return data_.size(); }
  const std::array<std::size_t, 4>& shape() const { return shape_; }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T* sample(std::size_t i) { return data_.data() + i * sample_size(); }
  const T* sample(std::size_t i) const { return data_.data() + i * sample_size(); }
  T* channel(std::size_t i, std::size_t ch) { return sample(i) + ch * plane(); }
  const T* channel(std::size_t i, std::size_t ch) const { return sample(i) + ch * plane(); }

  T& at(std::size_t i, std::size_t ch, std::size_t y, std::size_t x) {
    return data_[((i * shape_[1] + ch) * shape_[2] + y) * shape_[3] + x];
  }
  const T& at(std::size_t i, std::size_t ch, std::size_t y, std::size_t x) const {
    return data_[((i * shape_[1] + ch) * shape_[2] + y) * shape_[3] + x];
  }

  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool operator==(const Tensor&) const = default;

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(n(), c(), h(), w());
    std::transform(data_.begin(), data_.end(), out.values().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  /// Samples [first, first + count) as a new tensor.
  Tensor slice_batch(std::size_t first, std::size_t count) const {
    Tensor out(count, c(), h(), w());
    std::copy(sample(first), sample(first) + count * sample_size(), out.data());
    return out;
  }

 private:
  std::array<std::size_t, 4> shape_{0, 0, 0, 0};
  std::vector<T> data_;
};

/// A named, shape-tagged learnable array.
template <class T>
struct Param {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<T> values;

  bool operator==(const Param&) const = default;
};

/// All learnable weights keyed by stable layer names, kept in insertion order.
template <class T>
class ModelParams {
 public:
  Param<T>& add(const std::string& name, std::vector<std::size_t> shape, T fill = T(0)) {
    if (index_.count(name)) throw ContractError("duplicate parameter '" + name + "'");
    std::size_t count = 1;
    for (auto d : shape) count *= d;
    index_[name] = params_.size();
    params_.push_back({name, std::move(shape), std::vector<T>(count, fill)});
    return params_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Param<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("no parameter named '" + name + "'");
    return params_[it->second];
  }
  const Param<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("no parameter named '" + name + "'");
    return params_[it->second];
  }

  T* data(const std::string& name) { return at(name).values.data(); }
  const T* data(const std::string& name) const { return at(name).values.data(); }

  std::vector<Param<T>>& all() { return params_; }
  const std::vector<Param<T>>& all() const { return params_; }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.values.size();
    return n;
  }

  ModelParams zeros_like() const {
    ModelParams out;
    for (const auto& p : params_) out.add(p.name, p.shape);
    return out;
  }

  void fill(T value) {
    for (auto& p : params_) std::fill(p.values.begin(), p.values.end(), value);
  }

  bool all_finite() const {
    for (const auto& p : params_) {
      for (T v : p.values) {
        if (!std::isfinite(static_cast<double>(v))) return false;
      }
    }
    return true;
  }

  template <class U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    for (const auto& p : params_) {
      auto& q = out.add(p.name, p.shape);
      std::transform(p.values.begin(), p.values.end(), q.values.begin(),
                     [](T v) { return static_cast<U>(v); });
    }
    return out;
  }

  bool operator==(const ModelParams& o) const { return params_ == o.params_; }

 private:
  std::vector<Param<T>> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace emphseg
