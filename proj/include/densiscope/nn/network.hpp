#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "densiscope/nn/activations.hpp"
#include "densiscope/nn/adam.hpp"
#include "densiscope/nn/batchnorm.hpp"
#include "densiscope/nn/conv2d.hpp"
#include "densiscope/nn/dense.hpp"
#include "densiscope/nn/tensor.hpp"

namespace densiscope {

template <typename Scalar>
struct Conv2dLayer {
  std::string name;
  Conv2dParams<Scalar> params;
};

template <typename Scalar>
struct BatchNormLayer {
  std::string name;
  BatchNormParams<Scalar> params;
};

struct ReluLayer {
  std::string name;
};

template <typename Scalar>
struct DropoutLayer {
  std::string name;
  Scalar keep_prob = Scalar(0.5);
};

template <typename Scalar>
struct DenseLayer {
  std::string name;
  DenseParams<Scalar> params;
};

template <typename Scalar>
using Layer = std::variant<Conv2dLayer<Scalar>, BatchNormLayer<Scalar>, ReluLayer,
                           DropoutLayer<Scalar>, DenseLayer<Scalar>>;

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

/// Everything the backward pass needs from a forward pass.
template <typename Scalar>
struct ForwardTrace {
  Mode mode = Mode::infer;
  std::vector<Tensor4<Scalar>> inputs;        // input of each layer
  std::vector<DropoutMask<Scalar>> masks;     // per layer; empty tensor for non-dropout layers
  Tensor4<Scalar> output;
};

template <typename Scalar>
struct NetworkGrads {
  std::vector<Vector<Scalar>> params;  // in learnable() order
  Tensor4<Scalar> input;               // empty unless requested
};

/// A feed-forward stack of layers. Layers run in order; dense layers flatten
/// whatever reaches them.
template <typename Scalar_>
class Network {
 public:
  using Scalar = Scalar_;
  using LayerType = Layer<Scalar>;

  std::vector<LayerType> layers;

  /// Inference-mode forward pass; never mutates state.
  Tensor4<Scalar> forward(const Tensor4<Scalar>& x) const {
    Tensor4<Scalar> a = x;
    for (const auto& layer : layers) a = apply_infer(layer, a);
    return a;
  }

  /// Inference-mode forward pass that also returns every layer's input.
  ForwardTrace<Scalar> trace(const Tensor4<Scalar>& x) const {
    ForwardTrace<Scalar> t;
    t.mode = Mode::infer;
    t.output = x;
    for (const auto& layer : layers) {
      t.inputs.push_back(t.output);
      t.masks.emplace_back();
      t.output = apply_infer(layer, t.output);
    }
    return t;
  }

  /// Training-mode forward pass: batch statistics in batch norm (running
  /// statistics are updated) and dropout masks drawn from `rng`.
  ForwardTrace<Scalar> forward_train(const Tensor4<Scalar>& x, std::mt19937_64& rng) {
    ForwardTrace<Scalar> t;
    t.mode = Mode::train;
    t.output = x;
    for (auto& layer : layers) {
      t.inputs.push_back(t.output);
      t.masks.emplace_back();
      Tensor4<Scalar>& a = t.output;
      std::visit(overloaded{
                     [&](Conv2dLayer<Scalar>& l) { a = conv2d(a, l.params); },
                     [&](BatchNormLayer<Scalar>& l) { a = batchnorm(a, l.params, Mode::train); },
                     [&](ReluLayer&) { a = relu(a); },
                     [&](DropoutLayer<Scalar>& l) {
                       auto [out, mask] = dropout(a, l.keep_prob, Mode::train, rng());
                       a = std::move(out);
                       t.masks.back() = std::move(mask);
                     },
                     [&](DenseLayer<Scalar>& l) { a = dense(a, l.params); },
                 },
                 layer);
    }
    return t;
  }

  NetworkGrads<Scalar> backward(const ForwardTrace<Scalar>& t, const Tensor4<Scalar>& grad_out,
                                bool need_input_grad = false) const {
    if (t.inputs.size() != layers.size()) throw ValidationError("backward: trace does not match");
    std::vector<std::vector<Vector<Scalar>>> per_layer(layers.size());
    Tensor4<Scalar> g = grad_out;
    for (std::size_t i = layers.size(); i-- > 0;) {
      const bool want_input = need_input_grad || i > 0;
      const Tensor4<Scalar>& in = t.inputs[i];
      std::visit(overloaded{
                     [&](const Conv2dLayer<Scalar>& l) {
                       auto cg = conv2d_backward(in, l.params, g);
                       per_layer[i] = {std::move(cg.weight.data()), std::move(cg.bias)};
                       g = std::move(cg.input);
                     },
                     [&](const BatchNormLayer<Scalar>& l) {
                       auto bg = batchnorm_backward(in, l.params, g, t.mode);
                       per_layer[i] = {std::move(bg.gamma), std::move(bg.beta)};
                       g = std::move(bg.input);
                     },
                     [&](const ReluLayer&) { g = relu_backward(in, g); },
                     [&](const DropoutLayer<Scalar>&) {
                       if (t.mode == Mode::train) g = dropout_backward(t.masks[i], g);
                     },
                     [&](const DenseLayer<Scalar>& l) {
                       auto dg = dense_backward(in, l.params, g);
                       per_layer[i] = {Eigen::Map<const Vector<Scalar>>(dg.weight.data(),
                                                                        dg.weight.size()),
                                       std::move(dg.bias)};
                       g = std::move(dg.input);
                     },
                 },
                 layers[i]);
      if (!want_input) break;
    }
    NetworkGrads<Scalar> out;
    for (auto& v : per_layer) {
      for (auto& p : v) out.params.push_back(std::move(p));
    }
    if (need_input_grad) out.input = std::move(g);
    return out;
  }

  struct NamedView {
    std::string name;
    std::span<Scalar> values;
  };

  /// Learnable tensors in canonical order (conv: weight, bias; batch norm:
  /// gamma, beta; dense: weight, bias).
  std::vector<NamedView> learnable() {
    std::vector<NamedView> out;
    for (auto& layer : layers) {
      std::visit(overloaded{
                     [&](Conv2dLayer<Scalar>& l) {
                       out.push_back({l.name + ".weight", span_of(l.params.weight.data())});
                       out.push_back({l.name + ".bias", span_of(l.params.bias)});
                     },
                     [&](BatchNormLayer<Scalar>& l) {
                       out.push_back({l.name + ".gamma", span_of(l.params.gamma)});
                       out.push_back({l.name + ".beta", span_of(l.params.beta)});
                     },
                     [&](DenseLayer<Scalar>& l) {
                       out.push_back({l.name + ".weight", span_of(l.params.weight)});
                       out.push_back({l.name + ".bias", span_of(l.params.bias)});
                     },
                     [](auto&) {},
                 },
                 layer);
    }
    return out;
  }

  /// Learnable tensors plus batch-norm running statistics.
  std::vector<NamedView> state_tensors() {
    std::vector<NamedView> out = learnable();
    for (auto& layer : layers) {
      if (auto* bn = std::get_if<BatchNormLayer<Scalar>>(&layer)) {
        out.push_back({bn->name + ".running_mean", span_of(bn->params.running_mean)});
        out.push_back({bn->name + ".running_var", span_of(bn->params.running_var)});
      }
    }
    return out;
  }

  /// Pairs learnable tensors with gradients for the optimizer.
  std::vector<ParamSlot<Scalar>> slots(const NetworkGrads<Scalar>& grads) {
    auto views = learnable();
    if (views.size() != grads.params.size()) throw ShapeError("slots: gradient count mismatch");
    std::vector<ParamSlot<Scalar>> out;
    for (std::size_t i = 0; i < views.size(); ++i) {
      out.push_back({views[i].name, views[i].values,
                     std::span<const Scalar>(grads.params[i].data(), grads.params[i].size())});
    }
    return out;
  }

  template <typename To>
  Network<To> cast() const {
    Network<To> n;
    for (const auto& layer : layers) {
      std::visit(overloaded{
                     [&](const Conv2dLayer<Scalar>& l) {
                       Conv2dParams<To> p{l.params.weight.template cast<To>(),
                                          l.params.bias.template cast<To>(), l.params.stride,
                                          l.params.padding};
                       n.layers.push_back(Conv2dLayer<To>{l.name, std::move(p)});
                     },
                     [&](const BatchNormLayer<Scalar>& l) {
                       BatchNormParams<To> p{l.params.gamma.template cast<To>(),
                                             l.params.beta.template cast<To>(),
                                             l.params.running_mean.template cast<To>(),
                                             l.params.running_var.template cast<To>(),
                                             To(l.params.momentum), To(l.params.epsilon)};
                       n.layers.push_back(BatchNormLayer<To>{l.name, std::move(p)});
                     },
                     [&](const ReluLayer& l) { n.layers.push_back(l); },
                     [&](const DropoutLayer<Scalar>& l) {
                       n.layers.push_back(DropoutLayer<To>{l.name, To(l.keep_prob)});
                     },
                     [&](const DenseLayer<Scalar>& l) {
                       DenseParams<To> p{l.params.weight.template cast<To>(),
                                         l.params.bias.template cast<To>()};
                       n.layers.push_back(DenseLayer<To>{l.name, std::move(p)});
                     },
                 },
                 layer);
    }
    return n;
  }

 private:
  template <typename Derived>
  static std::span<Scalar> span_of(Eigen::PlainObjectBase<Derived>& m) {
    return {m.data(), static_cast<std::size_t>(m.size())};
  }

  static Tensor4<Scalar> apply_infer(const LayerType& layer, const Tensor4<Scalar>& a) {
    return std::visit(overloaded{
                          [&](const Conv2dLayer<Scalar>& l) { return conv2d(a, l.params); },
                          [&](const BatchNormLayer<Scalar>& l) {
                            auto p = l.params;
                            return batchnorm(a, p, Mode::infer);
                          },
                          [&](const ReluLayer&) { return relu(a); },
                          [&](const DropoutLayer<Scalar>&) { return a; },
                          [&](const DenseLayer<Scalar>& l) { return dense(a, l.params); },
                      },
                      layer);
  }
};

}  // namespace densiscope
