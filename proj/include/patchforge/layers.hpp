#pragma once

// Differentiable layer kernels with hand-written backward passes.
//
// Every function is pure: routing information needed by a backward pass is
// returned to the caller rather than cached. Kernels are instantiated for
// float (training/inference) and double (gradient verification).

#include <cstdint>
#include <vector>

#include "patchforge/tensor.hpp"

namespace patchforge::layers {

/// Learnable weights and bias of one layer plus their momentum buffers.
template <class T>
struct LayerParams {
  BasicTensor<T> weights;
  BasicTensor<T> bias;
  BasicTensor<T> weight_velocity;
  BasicTensor<T> bias_velocity;

  LayerParams() = default;
  LayerParams(BasicTensor<T> w, BasicTensor<T> b)
      : weights(std::move(w)),
        bias(std::move(b)),
        weight_velocity(weights.shape()),
        bias_velocity(bias.shape()) {}

  bool empty() const noexcept { return weights.empty(); }
  std::size_t count() const noexcept { return weights.size() + bias.size(); }

  template <class U>
  LayerParams<U> cast() const {
    LayerParams<U> out;
    if (empty()) return out;
    out.weights = weights.template cast<U>();
    out.bias = bias.template cast<U>();
    out.weight_velocity = weight_velocity.template cast<U>();
    out.bias_velocity = bias_velocity.template cast<U>();
    return out;
  }
};

template <class T>
struct ParamGrads {
  BasicTensor<T> input;
  BasicTensor<T> weights;
  BasicTensor<T> bias;
};

// --- convolution ----------------------------------------------------------
// input {H, W, Cin}, weights {kh, kw, Cin, Cout}, bias {Cout}.

std::size_t conv_output_size(std::size_t in, std::size_t kernel, int pad, int stride);

template <class T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const LayerParams<T>& params, int pad, int stride);

/// Gradients of sum(upstream * conv2d_forward(input)) w.r.t. input, weights
/// and bias.
template <class T>
ParamGrads<T> conv2d_backward(const BasicTensor<T>& input, const LayerParams<T>& params, int pad, int stride,
                              const BasicTensor<T>& upstream);

// --- ReLU -----------------------------------------------------------------

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& input);

/// Passes upstream where input > 0; the gradient at exactly 0 is 0.
template <class T>
BasicTensor<T> relu_backward(const BasicTensor<T>& input, const BasicTensor<T>& upstream);

// --- pooling --------------------------------------------------------------
// Windows that overrun the right/bottom edge see implicit zeros; average
// pooling always divides by the full window area.

enum class PoolKind { Max, Avg };

template <class T>
struct PoolResult {
  BasicTensor<T> output;
  /// Max pooling only: flat input index of the winning element per output,
  /// or -1 when the winner was padding.
  std::vector<std::int64_t> routing;
};

std::size_t pool_output_size(std::size_t in, int window, int stride);

template <class T>
PoolResult<T> pool2d(const BasicTensor<T>& input, PoolKind kind, int window, int stride);

template <class T>
BasicTensor<T> pool2d_backward(const Shape& input_shape, PoolKind kind, int window, int stride,
                               const std::vector<std::int64_t>& routing, const BasicTensor<T>& upstream);

// --- fully connected ------------------------------------------------------
// weights {n_in, n_out}; S = W^T h + b with h the flattened input.

template <class T>
BasicTensor<T> fc_forward(const BasicTensor<T>& input, const LayerParams<T>& params);

template <class T>
ParamGrads<T> fc_backward(const BasicTensor<T>& input, const LayerParams<T>& params, const BasicTensor<T>& upstream);

// --- classifier output ----------------------------------------------------

/// Max-subtracted softmax over a score vector.
template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& scores);

/// -log p[label].
template <class T>
double cross_entropy(const BasicTensor<T>& probabilities, std::size_t label);

/// Gradient of the batch-mean loss w.r.t. the scores of one sample:
/// (p - onehot(label)) / batch_size.
template <class T>
BasicTensor<T> softmax_cross_entropy_backward(const BasicTensor<T>& probabilities, std::size_t label,
                                              std::size_t batch_size);

}  // namespace patchforge::layers
