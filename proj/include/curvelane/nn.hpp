#pragma once

// Parameter storage and the small layer set the network is built from.

#include "curvelane/autograd.hpp"
#include "curvelane/ops.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace curvelane::nn {

using ag::Shape;
using ag::Tensor;

/// Named, ordered collection of trainable leaves. Initial values are drawn
/// in double precision so float and double models start identically.
template <class S>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<S> value;
  };

  explicit ParamStore(std::uint64_t seed = 0) : rng_(seed) {}

  Tensor<S> add(const std::string& name, Shape shape, const std::vector<double>& init) {
    for (const auto& e : entries_)
      if (e.name == name) throw std::invalid_argument("duplicate parameter " + name);
    std::vector<S> v(init.begin(), init.end());
    Tensor<S> t = Tensor<S>::parameter(std::move(shape), std::move(v));
    entries_.push_back({name, t});
    return t;
  }

  Tensor<S> uniform(const std::string& name, Shape shape, double bound) {
    std::uniform_real_distribution<double> d(-bound, bound);
    std::vector<double> v(ag::numel(shape));
    for (auto& x : v) x = d(rng_);
    return add(name, std::move(shape), v);
  }

  Tensor<S> normal(const std::string& name, Shape shape, double stddev) {
    std::normal_distribution<double> d(0.0, stddev);
    std::vector<double> v(ag::numel(shape));
    for (auto& x : v) x = d(rng_);
    return add(name, std::move(shape), v);
  }

  Tensor<S> constant(const std::string& name, Shape shape, double value) {
    return add(name, shape, std::vector<double>(ag::numel(shape), value));
  }

  std::mt19937_64& rng() { return rng_; }
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  std::vector<Tensor<S>> tensors() const {
    std::vector<Tensor<S>> out;
    for (const auto& e : entries_) out.push_back(e.value);
    return out;
  }

  void zero_grad() {
    for (auto& e : entries_) e.value.zero_grad();
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(scalar_count());
    for (const auto& e : entries_) out.insert(out.end(), e.value.values().begin(), e.value.values().end());
    return out;
  }

  void assign(const std::vector<double>& flat) {
    if (flat.size() != scalar_count()) {
      throw std::invalid_argument("parameter count mismatch: expected " + std::to_string(scalar_count()) + ", got " +
                                  std::to_string(flat.size()));
    }
    std::size_t off = 0;
    for (auto& e : entries_) {
      auto& v = e.value.mutable_values();
      for (auto& x : v) x = static_cast<S>(flat[off++]);
    }
  }

 private:
  std::mt19937_64 rng_;
  std::vector<Entry> entries_;
};

template <class S>
struct Linear {
  Tensor<S> weight;  // out x in
  Tensor<S> bias;    // out

  Linear() = default;
  Linear(ParamStore<S>& ps, const std::string& name, int in, int out, bool with_bias = true, double gain = 1.0) {
    weight = ps.uniform(name + ".weight", {out, in}, gain * std::sqrt(6.0 / (in + out)));
    if (with_bias) bias = ps.constant(name + ".bias", {out}, 0.0);
  }

  /// Zero weight and bias: the layer outputs `bias_init` regardless of input.
  static Linear zeros(ParamStore<S>& ps, const std::string& name, int in, int out,
                      const std::vector<double>& bias_init = {}) {
    Linear l;
    l.weight = ps.constant(name + ".weight", {out, in}, 0.0);
    l.bias = bias_init.empty() ? ps.constant(name + ".bias", {out}, 0.0) : ps.add(name + ".bias", {out}, bias_init);
    return l;
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return ag::linear(x, weight, bias); }
};

template <class S>
struct LayerNorm {
  Tensor<S> gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParamStore<S>& ps, const std::string& name, int d) {
    gamma = ps.constant(name + ".gamma", {d}, 1.0);
    beta = ps.constant(name + ".beta", {d}, 0.0);
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return ag::layer_norm(x, gamma, beta); }
};

template <class S>
struct Conv2d {
  Tensor<S> weight, bias;
  int kernel = 1, stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(ParamStore<S>& ps, const std::string& name, int in, int out, int k, int s, int p)
      : kernel(k), stride(s), pad(p) {
    weight = ps.uniform(name + ".weight", {out, in * k * k}, std::sqrt(6.0 / (in * k * k)));
    bias = ps.constant(name + ".bias", {out}, 0.0);
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return ag::conv2d(x, weight, bias, kernel, stride, pad); }
};

/// Two linear layers with a ReLU between them.
template <class S>
struct Mlp {
  Linear<S> fc1, fc2;

  Mlp() = default;
  Mlp(ParamStore<S>& ps, const std::string& name, int in, int hidden, int out)
      : fc1(ps, name + ".fc1", in, hidden), fc2(ps, name + ".fc2", hidden, out) {}

  Tensor<S> operator()(const Tensor<S>& x) const { return fc2(ag::relu(fc1(x))); }
};

/// Multi-head attention with input and output projections.
template <class S>
struct MultiHeadAttention {
  Linear<S> q, k, v, o;
  int heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore<S>& ps, const std::string& name, int d, int h)
      : q(ps, name + ".q", d, d), k(ps, name + ".k", d, d), v(ps, name + ".v", d, d), o(ps, name + ".o", d, d),
        heads(h) {}

  Tensor<S> operator()(const Tensor<S>& query, const Tensor<S>& key, const Tensor<S>& value) const {
    return o(ag::attention(q(query), k(key), v(value), heads));
  }
};

}  // namespace curvelane::nn
