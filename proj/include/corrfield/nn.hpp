#pragma once

// Layer weights, named parameter registries and the SGD optimizer.

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "corrfield/ops.hpp"
#include "corrfield/rng.hpp"
#include "corrfield/tensor.hpp"

namespace corrfield {

template <std::floating_point T>
struct Conv2dWeights {
  BasicTensor<T> kernel;  // k x k x Cin x Cout
  std::optional<BasicTensor<T>> bias;

  std::size_t in_channels() const { return kernel.dim(2); }
  std::size_t out_channels() const { return kernel.dim(3); }
  std::size_t kernel_size() const { return kernel.dim(0); }

  BasicTensor<T> operator()(const BasicTensor<T>& x, std::size_t stride = 1) const {
    return conv2d(x, kernel, bias, stride);
  }

  // Centered uniform init scaled by 1/sqrt(fan_in); bias starts at zero.
  static Conv2dWeights uniform(std::size_t k, std::size_t cin, std::size_t cout,
                               SplitMix64 rng, bool with_bias = true) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(k * k * cin));
    std::vector<T> w(k * k * cin * cout);
    for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
    Conv2dWeights out{BasicTensor<T>(Shape{k, k, cin, cout}, std::move(w), true), {}};
    if (with_bias) out.bias = BasicTensor<T>::zeros(Shape{cout}, true);
    return out;
  }

  static Conv2dWeights zeros(std::size_t k, std::size_t cin, std::size_t cout,
                             bool with_bias = true) {
    Conv2dWeights out{BasicTensor<T>::zeros(Shape{k, k, cin, cout}, true), {}};
    if (with_bias) out.bias = BasicTensor<T>::zeros(Shape{cout}, true);
    return out;
  }

  template <typename Visit>
  void visit(const std::string& prefix, Visit&& visit_fn) {
    visit_fn(prefix + ".kernel", kernel);
    if (bias) visit_fn(prefix + ".bias", *bias);
  }
};

// Ordered name -> tensor registry. Tensors are handles, so updates through
// the registry reach the owning module.
template <std::floating_point T>
using ParameterList = std::vector<std::pair<std::string, BasicTensor<T>>>;

template <std::floating_point T, typename Module>
ParameterList<T> collect_parameters(Module& module) {
  ParameterList<T> out;
  module.visit("", [&](const std::string& name, BasicTensor<T>& t) {
    out.emplace_back(name.starts_with('.') ? name.substr(1) : name, t);
  });
  return out;
}

struct SgdOptions {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

// SGD with heavy-ball momentum and L2 weight decay:
//   v <- momentum * v + (g + wd * w);  w <- w - lr * v
template <std::floating_point T>
class Sgd {
 public:
  Sgd(ParameterList<T> params, SgdOptions options)
      : params_(std::move(params)), options_(options) {
    for (auto& [name, p] : params_) velocity_.emplace_back(p.size(), T(0));
  }

  void step() {
    const T lr = static_cast<T>(options_.learning_rate);
    const T mu = static_cast<T>(options_.momentum);
    const T wd = static_cast<T>(options_.weight_decay);
    for (std::size_t t = 0; t < params_.size(); ++t) {
      auto& p = params_[t].second;
      auto vals = p.mutable_values();
      auto& vel = velocity_[t];
      const auto g = p.grad();
      for (std::size_t i = 0; i < vals.size(); ++i) {
        const T grad = (g.empty() ? T(0) : g[i]) + wd * vals[i];
        vel[i] = mu * vel[i] + grad;
        vals[i] -= lr * vel[i];
      }
    }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  // Global L2 norm of the current gradients.
  double grad_norm() const {
    double total = 0.0;
    for (const auto& [name, p] : params_)
      for (T g : p.grad()) total += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(total);
  }

  // Rescales gradients in place so their global norm is at most max_norm.
  void clip_grad_norm(double max_norm) {
    const double norm = grad_norm();
    if (norm <= max_norm || norm == 0.0) return;
    const T factor = static_cast<T>(max_norm / norm);
    for (auto& [name, p] : params_) {
      auto& grad = p.node()->grad;
      for (auto& g : grad) g *= factor;
    }
  }

  const ParameterList<T>& parameters() const { return params_; }
  SgdOptions& options() { return options_; }

 private:
  ParameterList<T> params_;
  SgdOptions options_;
  std::vector<std::vector<T>> velocity_;
};

}  // namespace corrfield
