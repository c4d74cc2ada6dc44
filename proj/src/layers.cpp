#include "patchforge/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace patchforge::layers {
namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

struct ConvGeometry {
  std::size_t h, w, cin, kh, kw, cout, oh, ow;
  int pad, stride;
  std::size_t rows() const { return oh * ow; }
  std::size_t patch() const { return kh * kw * cin; }
};

template <class T>
ConvGeometry conv_geometry(const BasicTensor<T>& input, const LayerParams<T>& params, int pad, int stride) {
  require(input.rank() == 3, "conv2d: input must be rank 3 {H,W,C}, got " + shape_string(input.shape()));
  require(params.weights.rank() == 4,
          "conv2d: weights must be rank 4 {kh,kw,cin,cout}, got " + shape_string(params.weights.shape()));
  if (pad < 0) throw DomainError("conv2d: pad must be >= 0");
  if (stride < 1) throw DomainError("conv2d: stride must be >= 1");
  ConvGeometry g{};
  g.h = input.dim(0);
  g.w = input.dim(1);
  g.cin = input.dim(2);
  g.kh = params.weights.dim(0);
  g.kw = params.weights.dim(1);
  g.cout = params.weights.dim(3);
  g.pad = pad;
  g.stride = stride;
  require(params.weights.dim(2) == g.cin, "conv2d: input has " + std::to_string(g.cin) +
                                              " channels but kernel expects " +
                                              std::to_string(params.weights.dim(2)));
  require(params.bias.size() == g.cout, "conv2d: bias length " + std::to_string(params.bias.size()) +
                                            " does not match " + std::to_string(g.cout) + " output channels");
  g.oh = conv_output_size(g.h, g.kh, pad, stride);
  g.ow = conv_output_size(g.w, g.kw, pad, stride);
  return g;
}

// Row r = output pixel (oy, ox); column = (ky, kx, ci), matching the weight
// layout so that output = cols * W.
template <class T>
std::vector<T> im2col(const BasicTensor<T>& input, const ConvGeometry& g) {
  std::vector<T> cols(g.rows() * g.patch(), T{0});
  const T* in = input.data().data();
  for (std::size_t oy = 0; oy < g.oh; ++oy) {
    for (std::size_t ox = 0; ox < g.ow; ++ox) {
      T* row = cols.data() + (oy * g.ow + ox) * g.patch();
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - g.pad;
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - g.pad;
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
          const T* src = in + (static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.cin;
          std::copy(src, src + g.cin, row + (ky * g.kw + kx) * g.cin);
        }
      }
    }
  }
  return cols;
}

template <class T>
void col2im_add(const std::vector<T>& cols, const ConvGeometry& g, BasicTensor<T>& grad_input) {
  T* out = grad_input.data().data();
  for (std::size_t oy = 0; oy < g.oh; ++oy) {
    for (std::size_t ox = 0; ox < g.ow; ++ox) {
      const T* row = cols.data() + (oy * g.ow + ox) * g.patch();
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - g.pad;
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - g.pad;
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
          T* dst = out + (static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.cin;
          const T* src = row + (ky * g.kw + kx) * g.cin;
          for (std::size_t c = 0; c < g.cin; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

}  // namespace

std::size_t conv_output_size(std::size_t in, std::size_t kernel, int pad, int stride) {
  const auto padded = static_cast<std::ptrdiff_t>(in) + 2 * pad;
  if (padded < static_cast<std::ptrdiff_t>(kernel)) {
    throw DimensionError("conv2d: kernel " + std::to_string(kernel) + " larger than padded input " +
                         std::to_string(padded));
  }
  return static_cast<std::size_t>((padded - static_cast<std::ptrdiff_t>(kernel)) / stride) + 1;
}

template <class T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const LayerParams<T>& params, int pad, int stride) {
  const ConvGeometry g = conv_geometry(input, params, pad, stride);
  const std::vector<T> cols = im2col(input, g);
  BasicTensor<T> out({g.oh, g.ow, g.cout});
  MapMat<T> result(out.data().data(), g.rows(), g.cout);
  result.noalias() = ConstMapMat<T>(cols.data(), g.rows(), g.patch()) *
                     ConstMapMat<T>(params.weights.data().data(), g.patch(), g.cout);
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bias(params.bias.data().data(), g.cout);
  result.rowwise() += bias;
  return out;
}

template <class T>
ParamGrads<T> conv2d_backward(const BasicTensor<T>& input, const LayerParams<T>& params, int pad, int stride,
                              const BasicTensor<T>& upstream) {
  const ConvGeometry g = conv_geometry(input, params, pad, stride);
  require(upstream.shape() == Shape{g.oh, g.ow, g.cout},
          "conv2d_backward: upstream gradient " + shape_string(upstream.shape()) + " does not match output " +
              shape_string({g.oh, g.ow, g.cout}));
  const std::vector<T> cols = im2col(input, g);
  ConstMapMat<T> grad_out(upstream.data().data(), g.rows(), g.cout);

  ParamGrads<T> grads;
  grads.weights = BasicTensor<T>(params.weights.shape());
  MapMat<T>(grads.weights.data().data(), g.patch(), g.cout).noalias() =
      ConstMapMat<T>(cols.data(), g.rows(), g.patch()).transpose() * grad_out;

  grads.bias = BasicTensor<T>({g.cout});
  for (std::size_t c = 0; c < g.cout; ++c) {
    double sum = 0.0;
    for (std::size_t r = 0; r < g.rows(); ++r) sum += static_cast<double>(grad_out(r, c));
    grads.bias[c] = static_cast<T>(sum);
  }

  std::vector<T> grad_cols(g.rows() * g.patch());
  MapMat<T>(grad_cols.data(), g.rows(), g.patch()).noalias() =
      grad_out * ConstMapMat<T>(params.weights.data().data(), g.patch(), g.cout).transpose();
  grads.input = BasicTensor<T>(input.shape());
  col2im_add(grad_cols, g, grads.input);
  return grads;
}

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& input) {
  BasicTensor<T> out = input;
  for (T& v : out.data()) v = v > T{0} ? v : T{0};
  return out;
}

template <class T>
BasicTensor<T> relu_backward(const BasicTensor<T>& input, const BasicTensor<T>& upstream) {
  require(input.shape() == upstream.shape(), "relu_backward: upstream gradient " +
                                                 shape_string(upstream.shape()) + " does not match input " +
                                                 shape_string(input.shape()));
  BasicTensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T{0} ? upstream[i] : T{0};
  return out;
}

std::size_t pool_output_size(std::size_t in, int window, int stride) {
  if (window < 1 || stride < 1) throw DomainError("pool2d: window and stride must be >= 1");
  if (static_cast<std::size_t>(window) > in) {
    throw DimensionError("pool2d: window " + std::to_string(window) + " larger than input " + std::to_string(in));
  }
  const std::size_t span = in - static_cast<std::size_t>(window);
  return (span + static_cast<std::size_t>(stride) - 1) / static_cast<std::size_t>(stride) + 1;
}

template <class T>
PoolResult<T> pool2d(const BasicTensor<T>& input, PoolKind kind, int window, int stride) {
  require(input.rank() == 3, "pool2d: input must be rank 3 {H,W,C}, got " + shape_string(input.shape()));
  const std::size_t h = input.dim(0), w = input.dim(1), c = input.dim(2);
  const std::size_t oh = pool_output_size(h, window, stride);
  const std::size_t ow = pool_output_size(w, window, stride);
  PoolResult<T> result;
  result.output = BasicTensor<T>({oh, ow, c});
  if (kind == PoolKind::Max) result.routing.assign(oh * ow * c, -1);
  const double area = static_cast<double>(window) * window;

  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t out_index = (oy * ow + ox) * c + ch;
        if (kind == PoolKind::Max) {
          T best = std::numeric_limits<T>::lowest();
          std::int64_t best_index = -1;
          bool first = true;
          for (int wy = 0; wy < window; ++wy) {
            for (int wx = 0; wx < window; ++wx) {
              const std::size_t iy = oy * stride + wy, ix = ox * stride + wx;
              const bool inside = iy < h && ix < w;
              const T v = inside ? input.at(iy, ix, ch) : T{0};
              if (first || v > best) {
                best = v;
                best_index = inside ? static_cast<std::int64_t>((iy * w + ix) * c + ch) : -1;
                first = false;
              }
            }
          }
          result.output[out_index] = best;
          result.routing[out_index] = best_index;
        } else {
          double sum = 0.0;
          for (int wy = 0; wy < window; ++wy) {
            for (int wx = 0; wx < window; ++wx) {
              const std::size_t iy = oy * stride + wy, ix = ox * stride + wx;
              if (iy < h && ix < w) sum += static_cast<double>(input.at(iy, ix, ch));
            }
          }
          result.output[out_index] = static_cast<T>(sum / area);
        }
      }
    }
  }
  return result;
}

template <class T>
BasicTensor<T> pool2d_backward(const Shape& input_shape, PoolKind kind, int window, int stride,
                               const std::vector<std::int64_t>& routing, const BasicTensor<T>& upstream) {
  require(input_shape.size() == 3, "pool2d_backward: input shape must be rank 3");
  const std::size_t h = input_shape[0], w = input_shape[1], c = input_shape[2];
  const std::size_t oh = pool_output_size(h, window, stride);
  const std::size_t ow = pool_output_size(w, window, stride);
  require(upstream.shape() == Shape{oh, ow, c}, "pool2d_backward: upstream gradient " +
                                                    shape_string(upstream.shape()) + " does not match output " +
                                                    shape_string({oh, ow, c}));
  BasicTensor<T> grad(input_shape);
  if (kind == PoolKind::Max) {
    require(routing.size() == upstream.size(), "pool2d_backward: routing size does not match output");
    for (std::size_t i = 0; i < upstream.size(); ++i) {
      if (routing[i] >= 0) grad[static_cast<std::size_t>(routing[i])] += upstream[i];
    }
    return grad;
  }
  const T scale = static_cast<T>(1.0 / (static_cast<double>(window) * window));
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T g = upstream.at(oy, ox, ch) * scale;
        for (int wy = 0; wy < window; ++wy) {
          for (int wx = 0; wx < window; ++wx) {
            const std::size_t iy = oy * stride + wy, ix = ox * stride + wx;
            if (iy < h && ix < w) grad.at(iy, ix, ch) += g;
          }
        }
      }
    }
  }
  return grad;
}

template <class T>
BasicTensor<T> fc_forward(const BasicTensor<T>& input, const LayerParams<T>& params) {
  require(params.weights.rank() == 2, "fc: weights must be rank 2 {in,out}");
  const std::size_t n_in = params.weights.dim(0), n_out = params.weights.dim(1);
  require(input.size() == n_in, "fc: flattened input length " + std::to_string(input.size()) +
                                    " does not match weight rows " + std::to_string(n_in));
  require(params.bias.size() == n_out, "fc: bias length does not match output width");
  BasicTensor<T> out({n_out});
  Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> s(out.data().data(), n_out);
  s.noalias() = ConstMapMat<T>(params.weights.data().data(), n_in, n_out).transpose() *
                Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(input.data().data(), n_in);
  s += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(params.bias.data().data(), n_out);
  return out;
}

template <class T>
ParamGrads<T> fc_backward(const BasicTensor<T>& input, const LayerParams<T>& params, const BasicTensor<T>& upstream) {
  require(params.weights.rank() == 2, "fc: weights must be rank 2 {in,out}");
  const std::size_t n_in = params.weights.dim(0), n_out = params.weights.dim(1);
  require(input.size() == n_in, "fc_backward: input length does not match weight rows");
  require(upstream.size() == n_out, "fc_backward: upstream length " + std::to_string(upstream.size()) +
                                        " does not match output width " + std::to_string(n_out));
  using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
  Eigen::Map<const Vec> h(input.data().data(), n_in);
  Eigen::Map<const Vec> g(upstream.data().data(), n_out);
  ParamGrads<T> grads;
  grads.input = BasicTensor<T>(input.shape());
  Eigen::Map<Vec>(grads.input.data().data(), n_in).noalias() =
      ConstMapMat<T>(params.weights.data().data(), n_in, n_out) * g;
  grads.weights = BasicTensor<T>({n_in, n_out});
  MapMat<T>(grads.weights.data().data(), n_in, n_out).noalias() = h * g.transpose();
  grads.bias = BasicTensor<T>({n_out});
  std::copy(upstream.data().begin(), upstream.data().end(), grads.bias.data().begin());
  return grads;
}

template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& scores) {
  if (scores.empty()) throw DimensionError("softmax: needs at least one score");
  const double peak = static_cast<double>(*std::max_element(scores.data().begin(), scores.data().end()));
  std::vector<double> e(scores.size());
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    e[i] = std::exp(static_cast<double>(scores[i]) - peak);
    total += e[i];
  }
  BasicTensor<T> out(scores.shape());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = static_cast<T>(e[i] / total);
  return out;
}

template <class T>
double cross_entropy(const BasicTensor<T>& probabilities, std::size_t label) {
  if (label >= probabilities.size()) {
    throw IndexError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                     std::to_string(probabilities.size()) + " classes");
  }
  const double p = std::max(static_cast<double>(probabilities[label]), std::numeric_limits<double>::min());
  return -std::log(p);
}

template <class T>
BasicTensor<T> softmax_cross_entropy_backward(const BasicTensor<T>& probabilities, std::size_t label,
                                              std::size_t batch_size) {
  if (label >= probabilities.size()) {
    throw IndexError("softmax_cross_entropy_backward: label " + std::to_string(label) + " out of range for " +
                     std::to_string(probabilities.size()) + " classes");
  }
  if (batch_size == 0) throw DomainError("softmax_cross_entropy_backward: batch size must be >= 1");
  BasicTensor<T> grad(probabilities.shape());
  const double inv_n = 1.0 / static_cast<double>(batch_size);
  for (std::size_t i = 0; i < probabilities.size(); ++i) {
    const double target = i == label ? 1.0 : 0.0;
    grad[i] = static_cast<T>((static_cast<double>(probabilities[i]) - target) * inv_n);
  }
  return grad;
}

#define PATCHFORGE_INSTANTIATE_LAYERS(T)                                                                        \
  template BasicTensor<T> conv2d_forward(const BasicTensor<T>&, const LayerParams<T>&, int, int);               \
  template ParamGrads<T> conv2d_backward(const BasicTensor<T>&, const LayerParams<T>&, int, int,                \
                                         const BasicTensor<T>&);                                                \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                          \
  template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);                          \
  template PoolResult<T> pool2d(const BasicTensor<T>&, PoolKind, int, int);                                     \
  template BasicTensor<T> pool2d_backward(const Shape&, PoolKind, int, int, const std::vector<std::int64_t>&,   \
                                          const BasicTensor<T>&);                                               \
  template BasicTensor<T> fc_forward(const BasicTensor<T>&, const LayerParams<T>&);                             \
  template ParamGrads<T> fc_backward(const BasicTensor<T>&, const LayerParams<T>&, const BasicTensor<T>&);      \
  template BasicTensor<T> softmax(const BasicTensor<T>&);                                                       \
  template double cross_entropy(const BasicTensor<T>&, std::size_t);                                            \
  template BasicTensor<T> softmax_cross_entropy_backward(const BasicTensor<T>&, std::size_t, std::size_t);

PATCHFORGE_INSTANTIATE_LAYERS(float)
PATCHFORGE_INSTANTIATE_LAYERS(double)

#undef PATCHFORGE_INSTANTIATE_LAYERS

}  // namespace patchforge::layers
