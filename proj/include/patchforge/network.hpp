#pragma once

// Two-branch late-fusion patch classifier.
//
// A network holds one convolutional branch per field of view (small and
// large); both branches share a topology but have independent parameters.
// Their flattened outputs are concatenated (small first) and fed to a
// fully-connected head that ends in a softmax over the classes.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "patchforge/layers.hpp"
#include "patchforge/tensor.hpp"

namespace patchforge::net {

enum class LayerKind { Conv, Relu, MaxPool, AvgPool, FullyConnected };

std::string to_string(LayerKind kind);

struct LayerDesc {
  LayerKind kind = LayerKind::Relu;
  int kernel = 0;   // conv
  int outputs = 0;  // conv channels / fc width
  int pad = 0;      // conv
  int stride = 1;   // conv, pool
  int window = 0;   // pool

  static LayerDesc conv(int kernel, int outputs, int pad, int stride = 1) {
    return {LayerKind::Conv, kernel, outputs, pad, stride, 0};
  }
  static LayerDesc relu() { return {}; }
  static LayerDesc max_pool(int window, int stride) { return {LayerKind::MaxPool, 0, 0, 0, stride, window}; }
  static LayerDesc avg_pool(int window, int stride) { return {LayerKind::AvgPool, 0, 0, 0, stride, window}; }
  static LayerDesc fc(int outputs) { return {LayerKind::FullyConnected, 0, outputs, 0, 1, 0}; }

  bool has_params() const { return kind == LayerKind::Conv || kind == LayerKind::FullyConnected; }
  bool operator==(const LayerDesc&) const = default;
};

struct NetworkSpec {
  std::size_t input_size = 32;
  std::size_t input_channels = 1;
  std::vector<LayerDesc> branch;  // applied to each field of view
  std::vector<LayerDesc> head;    // applied to the concatenated branch outputs
  std::vector<std::string> class_names;

  std::size_t class_count() const { return class_names.size(); }
  bool operator==(const NetworkSpec&) const = default;
};

/// Output shape of every layer, in order. Throws DimensionError on any
/// inconsistency in the chain or class list.
struct SpecShapes {
  std::vector<Shape> branch;
  std::vector<Shape> head;
};
SpecShapes validate(const NetworkSpec& spec);

std::string spec_to_json(const NetworkSpec& spec);
NetworkSpec spec_from_json(const std::string& text);

inline const std::vector<std::string> kMultiClassNames = {"lesion", "normal-interior", "normal-boundary"};
inline const std::vector<std::string> kBinaryClassNames = {"lesion", "non-lesion"};

/// Per branch: conv5x5x32 p2, ReLU, max 2/2, conv5x5x32 p2, ReLU, avg 2/2,
/// conv5x5x64 p2, ReLU, avg 2/2, conv4x4x64, ReLU -> 64 features.
/// Head: FC 128->64, ReLU, FC 64->classes.
NetworkSpec parallel_multiclass_spec();
NetworkSpec binary_spec();
NetworkSpec spec_with_classes(std::vector<std::string> class_names);

std::size_t param_count(const NetworkSpec& spec);
std::size_t branch_param_count(const NetworkSpec& spec);
std::size_t head_param_count(const NetworkSpec& spec);

enum class Branch { Small, Large };

template <class T>
struct ForwardTrace {
  std::vector<BasicTensor<T>> small_inputs;  // input to each branch layer
  std::vector<BasicTensor<T>> large_inputs;
  std::vector<std::vector<std::int64_t>> small_routing;  // max-pool routing per layer (empty otherwise)
  std::vector<std::vector<std::int64_t>> large_routing;
  std::vector<BasicTensor<T>> head_inputs;
  BasicTensor<T> scores;
  BasicTensor<T> probabilities;
};

/// Weight/bias gradients in flat layer order (small branch, large branch,
/// head); parameter-free layers hold empty tensors.
template <class T>
struct Gradients {
  std::vector<BasicTensor<T>> weights;
  std::vector<BasicTensor<T>> bias;

  void add(const Gradients& other);
  void scale(T factor);
};

template <class T>
class BasicNetwork {
 public:
  BasicNetwork() = default;
  /// Adopts `params` (one entry per layer in flat order) after checking
  /// their shapes against the spec.
  BasicNetwork(NetworkSpec spec, std::vector<layers::LayerParams<T>> params);

  /// Gaussian initialization: N(0, 0.01^2) conv weights, N(0, 0.05^2) FC
  /// weights, zero biases. Deterministic in `seed`.
  static BasicNetwork build(NetworkSpec spec, std::uint64_t seed);

  const NetworkSpec& spec() const noexcept { return spec_; }
  std::size_t class_count() const noexcept { return spec_.class_count(); }
  std::size_t layer_count() const noexcept { return params_.size(); }
  std::size_t branch_layers() const noexcept { return spec_.branch.size(); }
  const LayerDesc& desc(std::size_t flat_index) const;

  std::vector<layers::LayerParams<T>>& params() noexcept { return params_; }
  const std::vector<layers::LayerParams<T>>& params() const noexcept { return params_; }
  std::size_t flat_index(Branch branch, std::size_t layer) const;

  std::size_t param_count() const;

  /// Class probabilities for one patch pair ({N, N, C} each). Fills `trace`
  /// with everything backward() needs when given.
  BasicTensor<T> forward(const BasicTensor<T>& small, const BasicTensor<T>& large,
                         ForwardTrace<T>* trace = nullptr) const;

  /// Parameter gradients given d(loss)/d(scores) for a traced forward pass.
  Gradients<T> backward(const ForwardTrace<T>& trace, const BasicTensor<T>& grad_scores) const;

  Gradients<T> zero_gradients() const;

  /// Training-set mean liver intensity the network was trained against.
  double intensity_mean = 0.0;

  template <class U>
  BasicNetwork<U> cast() const {
    std::vector<layers::LayerParams<U>> p;
    p.reserve(params_.size());
    for (const auto& lp : params_) p.push_back(lp.template cast<U>());
    BasicNetwork<U> out(spec_, std::move(p));
    out.intensity_mean = intensity_mean;
    return out;
  }

  /// Parameters and spec equal bit for bit (velocities ignored).
  bool same_parameters(const BasicNetwork& other) const;

 private:
  BasicTensor<T> run_branch(Branch branch, const BasicTensor<T>& input, std::vector<BasicTensor<T>>* inputs,
                            std::vector<std::vector<std::int64_t>>* routing) const;
  void backward_branch(Branch branch, const std::vector<BasicTensor<T>>& inputs,
                       const std::vector<std::vector<std::int64_t>>& routing, BasicTensor<T> grad,
                       Gradients<T>& out) const;

  NetworkSpec spec_;
  SpecShapes shapes_;
  std::vector<layers::LayerParams<T>> params_;
};

using Network = BasicNetwork<float>;
using NetworkD = BasicNetwork<double>;

Network build_parallel_multiclass(std::uint64_t seed);
Network build_binary(std::uint64_t seed);

// PFCK checkpoint: "PFCK", u16 version, u32 descriptor length, UTF-8 JSON
// descriptor (spec + intensity mean), then weight and bias TNSR blocks for
// each parametric layer in flat order.
inline constexpr std::uint16_t kCheckpointVersion = 1;

void write_checkpoint(std::ostream& out, const Network& net);
Network read_checkpoint(std::istream& in);
void save_checkpoint(const Network& net, const std::filesystem::path& path);
Network load_checkpoint(const std::filesystem::path& path);

}  // namespace patchforge::net
