#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "siamattn/conv.hpp"

namespace siamattn {

using Rng = std::mt19937_64;

// Optimiser parameter groups: the backbone trains at a reduced rate.
enum class ParamGroup : std::uint8_t { kBackbone = 0, kHead = 1 };

template <typename T>
struct NamedParam {
  std::string name;
  ParamGroup group;
  Var<T> var;
};

template <typename T>
class ParameterStore {
 public:
  Var<T> create(const std::string& name, ParamGroup group, Tensor<T> init) {
    SIAMATTN_CHECK(!index_.count(name), ErrorCode::kInvalidArgument, "duplicate parameter " + name);
    Var<T> v(std::move(init), true);
    index_[name] = params_.size();
    params_.push_back({name, group, v});
    return v;
  }

  const std::vector<NamedParam<T>>& all() const { return params_; }

  const NamedParam<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.var.value().size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  // Copies values by name from a store of a (possibly different) scalar type.
  template <typename U>
  void copy_values_from(const ParameterStore<U>& other) {
    for (auto& p : params_) {
      const auto* src = other.find(p.name);
      SIAMATTN_CHECK(src != nullptr, ErrorCode::kCheckpointMismatch, "missing parameter " + p.name);
      SIAMATTN_CHECK(src->var.shape() == p.var.shape(), ErrorCode::kCheckpointMismatch,
                     "shape mismatch for parameter " + p.name);
      p.var.mutable_value() = src->var.value().template cast<T>();
    }
  }

 private:
  std::vector<NamedParam<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// kSmall: N(0, 0.01^2), used for final prediction layers.
enum class Init { kHe, kZero, kSmall };

template <typename T>
Tensor<T> init_tensor(Shape shape, int fan_in, Init init, Rng& rng) {
  Tensor<T> t(std::move(shape));
  if (init == Init::kZero) return t;
  const double stddev = init == Init::kHe ? std::sqrt(2.0 / std::max(1, fan_in)) : 0.01;
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
struct Conv2d {
  Var<T> weight;
  Var<T> bias;
  ConvGeometry geometry;

  static Conv2d create(ParameterStore<T>& store, const std::string& name, ParamGroup group, int in,
                       int out, int kernel, ConvGeometry geometry, Rng& rng, bool with_bias = true,
                       Init init = Init::kHe) {
    Conv2d c;
    c.geometry = geometry;
    c.weight = store.create(name + ".weight", group,
                            init_tensor<T>(Shape{out, in, kernel, kernel}, in * kernel * kernel, init, rng));
    if (with_bias) c.bias = store.create(name + ".bias", group, Tensor<T>(Shape{out}));
    return c;
  }

  Var<T> operator()(const Var<T>& x) const { return conv2d(x, weight, bias, geometry); }
  int out_channels() const { return weight.dim(0); }
};

template <typename T>
struct ConvTranspose2d {
  Var<T> weight;
  Var<T> bias;
  int stride = 1;

  static ConvTranspose2d create(ParameterStore<T>& store, const std::string& name, ParamGroup group,
                                int in, int out, int kernel, int stride, Rng& rng,
                                Init init = Init::kHe) {
    ConvTranspose2d c;
    c.stride = stride;
    c.weight = store.create(name + ".weight", group,
                            init_tensor<T>(Shape{in, out, kernel, kernel}, in, init, rng));
    c.bias = store.create(name + ".bias", group, Tensor<T>(Shape{out}));
    return c;
  }

  Var<T> operator()(const Var<T>& x) const { return conv_transpose2d(x, weight, bias, stride); }
};

// Fully connected layer over a flattened input.
template <typename T>
struct Linear {
  Var<T> weight;  // out x in
  Var<T> bias;    // out x 1

  static Linear create(ParameterStore<T>& store, const std::string& name, ParamGroup group, int in,
                       int out, Rng& rng, Init init = Init::kHe) {
    Linear l;
    l.weight = store.create(name + ".weight", group, init_tensor<T>(Shape{out, in}, in, init, rng));
    l.bias = store.create(name + ".bias", group, Tensor<T>(Shape{out, 1}));
    return l;
  }

  Var<T> operator()(const Var<T>& x) const {
    const int in = weight.dim(1);
    SIAMATTN_CHECK(static_cast<int>(x.value().size()) == in, ErrorCode::kShapeMismatch,
                   "linear input size " + std::to_string(x.value().size()) + " != " + std::to_string(in));
    return add(matmul(weight, reshape(x, Shape{in, 1})), bias);
  }

  int in_features() const { return weight.dim(1); }
  int out_features() const { return weight.dim(0); }
};

}  // namespace siamattn
