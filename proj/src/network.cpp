#include "patchforge/network.hpp"

#include <fstream>
#include <json.hpp>
#include <random>
#include <sstream>
#include <unordered_set>

#include "binary_io.hpp"

namespace patchforge::net {

using layers::LayerParams;
using json = nlohmann::json;

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::AvgPool: return "avgpool";
    case LayerKind::FullyConnected: return "fc";
  }
  return "?";
}

namespace {

LayerKind kind_from_string(const std::string& s) {
  for (auto k : {LayerKind::Conv, LayerKind::Relu, LayerKind::MaxPool, LayerKind::AvgPool, LayerKind::FullyConnected}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown layer kind \"" + s + "\"");
}

std::string where(const char* part, std::size_t i) { return std::string(part) + " layer " + std::to_string(i); }

Shape next_shape(const Shape& in, const LayerDesc& d, const std::string& ctx) {
  switch (d.kind) {
    case LayerKind::Conv: {
      if (in.size() != 3) throw DimensionError(ctx + ": conv needs a spatial {H,W,C} input");
      if (d.kernel < 1 || d.outputs < 1) throw DimensionError(ctx + ": conv kernel and outputs must be >= 1");
      if (d.pad < 0 || d.stride < 1) throw DimensionError(ctx + ": conv needs pad >= 0 and stride >= 1");
      const auto k = static_cast<std::size_t>(d.kernel);
      return {layers::conv_output_size(in[0], k, d.pad, d.stride), layers::conv_output_size(in[1], k, d.pad, d.stride),
              static_cast<std::size_t>(d.outputs)};
    }
    case LayerKind::MaxPool:
    case LayerKind::AvgPool:
      if (in.size() != 3) throw DimensionError(ctx + ": pooling needs a spatial {H,W,C} input");
      return {layers::pool_output_size(in[0], d.window, d.stride), layers::pool_output_size(in[1], d.window, d.stride),
              in[2]};
    case LayerKind::Relu: return in;
    case LayerKind::FullyConnected:
      if (d.outputs < 1) throw DimensionError(ctx + ": fc outputs must be >= 1");
      return {static_cast<std::size_t>(d.outputs)};
  }
  return in;
}

Shape weight_shape(const Shape& in, const LayerDesc& d) {
  if (d.kind == LayerKind::Conv) {
    return {static_cast<std::size_t>(d.kernel), static_cast<std::size_t>(d.kernel), in[2],
            static_cast<std::size_t>(d.outputs)};
  }
  return {shape_volume(in), static_cast<std::size_t>(d.outputs)};
}

std::size_t layer_param_count(const Shape& in, const LayerDesc& d) {
  if (!d.has_params()) return 0;
  return shape_volume(weight_shape(in, d)) + static_cast<std::size_t>(d.outputs);
}

json layer_to_json(const LayerDesc& d) {
  json j{{"kind", to_string(d.kind)}};
  switch (d.kind) {
    case LayerKind::Conv:
      j["kernel"] = d.kernel;
      j["outputs"] = d.outputs;
      j["pad"] = d.pad;
      j["stride"] = d.stride;
      break;
    case LayerKind::MaxPool:
    case LayerKind::AvgPool:
      j["window"] = d.window;
      j["stride"] = d.stride;
      break;
    case LayerKind::FullyConnected: j["outputs"] = d.outputs; break;
    case LayerKind::Relu: break;
  }
  return j;
}

LayerDesc layer_from_json(const json& j) {
  LayerDesc d;
  d.kind = kind_from_string(j.at("kind").get<std::string>());
  d.kernel = j.value("kernel", 0);
  d.outputs = j.value("outputs", 0);
  d.pad = j.value("pad", 0);
  d.stride = j.value("stride", 1);
  d.window = j.value("window", 0);
  return d;
}

std::vector<LayerDesc> default_branch() {
  return {LayerDesc::conv(5, 32, 2), LayerDesc::relu(), LayerDesc::max_pool(2, 2),
          LayerDesc::conv(5, 32, 2), LayerDesc::relu(), LayerDesc::avg_pool(2, 2),
          LayerDesc::conv(5, 64, 2), LayerDesc::relu(), LayerDesc::avg_pool(2, 2),
          LayerDesc::conv(4, 64, 0), LayerDesc::relu()};
}

}  // namespace

SpecShapes validate(const NetworkSpec& spec) {
  if (spec.input_size < 1 || spec.input_channels < 1) throw DimensionError("spec: input size/channels must be >= 1");
  if (spec.branch.empty()) throw DimensionError("spec: branch has no layers");
  if (spec.head.empty()) throw DimensionError("spec: head has no layers");
  SpecShapes shapes;
  Shape s{spec.input_size, spec.input_size, spec.input_channels};
  for (std::size_t i = 0; i < spec.branch.size(); ++i) {
    if (spec.branch[i].kind == LayerKind::FullyConnected) {
      throw DimensionError(where("branch", i) + ": fully-connected layers belong in the head");
    }
    s = next_shape(s, spec.branch[i], where("branch", i));
    shapes.branch.push_back(s);
  }
  s = {2 * shape_volume(s)};
  for (std::size_t i = 0; i < spec.head.size(); ++i) {
    const auto k = spec.head[i].kind;
    if (k != LayerKind::FullyConnected && k != LayerKind::Relu) {
      throw DimensionError(where("head", i) + ": only fc and relu layers are allowed in the head");
    }
    s = next_shape(s, spec.head[i], where("head", i));
    shapes.head.push_back(s);
  }
  if (spec.head.back().kind != LayerKind::FullyConnected) throw DimensionError("spec: head must end with an fc layer");
  if (spec.class_count() < 2) throw DimensionError("spec: need at least two classes");
  if (shape_volume(s) != spec.class_count()) {
    throw DimensionError("spec: final layer width " + std::to_string(shape_volume(s)) + " does not match " +
                         std::to_string(spec.class_count()) + " class names");
  }
  std::unordered_set<std::string> seen;
  for (const auto& n : spec.class_names) {
    if (n.empty() || !seen.insert(n).second) throw DimensionError("spec: class names must be non-empty and unique");
  }
  return shapes;
}

std::string spec_to_json(const NetworkSpec& spec) {
  json j;
  j["input_size"] = spec.input_size;
  j["input_channels"] = spec.input_channels;
  j["branch"] = json::array();
  for (const auto& d : spec.branch) j["branch"].push_back(layer_to_json(d));
  j["head"] = json::array();
  for (const auto& d : spec.head) j["head"].push_back(layer_to_json(d));
  j["class_names"] = spec.class_names;
  return j.dump();
}

NetworkSpec spec_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    NetworkSpec spec;
    spec.input_size = j.at("input_size").get<std::size_t>();
    spec.input_channels = j.at("input_channels").get<std::size_t>();
    for (const auto& d : j.at("branch")) spec.branch.push_back(layer_from_json(d));
    for (const auto& d : j.at("head")) spec.head.push_back(layer_from_json(d));
    spec.class_names = j.at("class_names").get<std::vector<std::string>>();
    return spec;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed network descriptor: ") + e.what());
  }
}

NetworkSpec spec_with_classes(std::vector<std::string> class_names) {
  NetworkSpec spec;
  spec.branch = default_branch();
  spec.head = {LayerDesc::fc(64), LayerDesc::relu(), LayerDesc::fc(static_cast<int>(class_names.size()))};
  spec.class_names = std::move(class_names);
  return spec;
}

NetworkSpec parallel_multiclass_spec() { return spec_with_classes(kMultiClassNames); }
NetworkSpec binary_spec() { return spec_with_classes(kBinaryClassNames); }

std::size_t branch_param_count(const NetworkSpec& spec) {
  if (spec.branch.empty()) return 0;
  const SpecShapes shapes = validate(spec);
  std::size_t total = 0;
  Shape in{spec.input_size, spec.input_size, spec.input_channels};
  for (std::size_t i = 0; i < spec.branch.size(); ++i) {
    total += layer_param_count(in, spec.branch[i]);
    in = shapes.branch[i];
  }
  return total;
}

std::size_t head_param_count(const NetworkSpec& spec) {
  if (spec.head.empty()) return 0;
  const SpecShapes shapes = validate(spec);
  std::size_t total = 0;
  Shape in{2 * shape_volume(shapes.branch.back())};
  for (std::size_t i = 0; i < spec.head.size(); ++i) {
    total += layer_param_count(in, spec.head[i]);
    in = shapes.head[i];
  }
  return total;
}

std::size_t param_count(const NetworkSpec& spec) {
  if (spec.branch.empty() && spec.head.empty()) return 0;
  return 2 * branch_param_count(spec) + head_param_count(spec);
}

// --- gradients ------------------------------------------------------------

template <class T>
void Gradients<T>::add(const Gradients& other) {
  if (other.weights.size() != weights.size()) throw DimensionError("gradient sets have different layer counts");
  for (std::size_t l = 0; l < weights.size(); ++l) {
    for (std::size_t i = 0; i < weights[l].size(); ++i) weights[l][i] += other.weights[l][i];
    for (std::size_t i = 0; i < bias[l].size(); ++i) bias[l][i] += other.bias[l][i];
  }
}

template <class T>
void Gradients<T>::scale(T factor) {
  for (auto& w : weights)
    for (T& v : w.data()) v *= factor;
  for (auto& b : bias)
    for (T& v : b.data()) v *= factor;
}

// --- network --------------------------------------------------------------

template <class T>
BasicNetwork<T>::BasicNetwork(NetworkSpec spec, std::vector<LayerParams<T>> params)
    : spec_(std::move(spec)), shapes_(validate(spec_)), params_(std::move(params)) {
  const std::size_t expected = 2 * spec_.branch.size() + spec_.head.size();
  if (params_.size() != expected) {
    throw DimensionError("network: expected " + std::to_string(expected) + " layer parameter slots, got " +
                         std::to_string(params_.size()));
  }
  for (std::size_t l = 0; l < params_.size(); ++l) {
    const LayerDesc& d = desc(l);
    if (!d.has_params()) {
      if (!params_[l].empty()) throw DimensionError("network: layer " + std::to_string(l) + " takes no parameters");
      continue;
    }
    Shape in;
    const std::size_t nb = spec_.branch.size();
    if (l < 2 * nb) {
      const std::size_t i = l % nb;
      in = i == 0 ? Shape{spec_.input_size, spec_.input_size, spec_.input_channels} : shapes_.branch[i - 1];
    } else {
      const std::size_t i = l - 2 * nb;
      in = i == 0 ? Shape{2 * shape_volume(shapes_.branch.back())} : shapes_.head[i - 1];
    }
    const Shape ws = weight_shape(in, d);
    if (params_[l].weights.shape() != ws || params_[l].bias.shape() != Shape{static_cast<std::size_t>(d.outputs)}) {
      throw DimensionError("network: layer " + std::to_string(l) + " expects weights " + shape_string(ws) + ", got " +
                           shape_string(params_[l].weights.shape()));
    }
    if (params_[l].weight_velocity.shape() != ws) params_[l].weight_velocity = BasicTensor<T>(ws);
    if (params_[l].bias_velocity.shape() != params_[l].bias.shape()) {
      params_[l].bias_velocity = BasicTensor<T>(params_[l].bias.shape());
    }
  }
}

template <class T>
BasicNetwork<T> BasicNetwork<T>::build(NetworkSpec spec, std::uint64_t seed) {
  const SpecShapes shapes = validate(spec);
  std::mt19937_64 rng(seed);
  std::vector<LayerParams<T>> params;
  const std::size_t nb = spec.branch.size();
  auto make = [&](const Shape& in, const LayerDesc& d) {
    if (!d.has_params()) return LayerParams<T>{};
    const double sd = d.kind == LayerKind::Conv ? 0.01 : 0.05;
    std::normal_distribution<double> gauss(0.0, sd);
    BasicTensor<T> w(weight_shape(in, d));
    for (T& v : w.data()) v = static_cast<T>(gauss(rng));
    return LayerParams<T>(std::move(w), BasicTensor<T>({static_cast<std::size_t>(d.outputs)}));
  };
  for (int b = 0; b < 2; ++b) {
    Shape in{spec.input_size, spec.input_size, spec.input_channels};
    for (std::size_t i = 0; i < nb; ++i) {
      params.push_back(make(in, spec.branch[i]));
      in = shapes.branch[i];
    }
  }
  Shape in{2 * shape_volume(shapes.branch.back())};
  for (std::size_t i = 0; i < spec.head.size(); ++i) {
    params.push_back(make(in, spec.head[i]));
    in = shapes.head[i];
  }
  return BasicNetwork(std::move(spec), std::move(params));
}

template <class T>
const LayerDesc& BasicNetwork<T>::desc(std::size_t l) const {
  const std::size_t nb = spec_.branch.size();
  return l < 2 * nb ? spec_.branch[l % nb] : spec_.head.at(l - 2 * nb);
}

template <class T>
std::size_t BasicNetwork<T>::flat_index(Branch branch, std::size_t layer) const {
  return (branch == Branch::Small ? 0 : spec_.branch.size()) + layer;
}

template <class T>
std::size_t BasicNetwork<T>::param_count() const {
  std::size_t total = 0;
  for (const auto& p : params_) total += p.count();
  return total;
}

template <class T>
BasicTensor<T> BasicNetwork<T>::run_branch(Branch branch, const BasicTensor<T>& input,
                                           std::vector<BasicTensor<T>>* inputs,
                                           std::vector<std::vector<std::int64_t>>* routing) const {
  BasicTensor<T> x = input;
  for (std::size_t i = 0; i < spec_.branch.size(); ++i) {
    const LayerDesc& d = spec_.branch[i];
    const auto& p = params_[flat_index(branch, i)];
    BasicTensor<T> y;
    std::vector<std::int64_t> route;
    switch (d.kind) {
      case LayerKind::Conv: y = layers::conv2d_forward(x, p, d.pad, d.stride); break;
      case LayerKind::Relu: y = layers::relu(x); break;
      case LayerKind::MaxPool:
      case LayerKind::AvgPool: {
        auto r = layers::pool2d(x, d.kind == LayerKind::MaxPool ? layers::PoolKind::Max : layers::PoolKind::Avg,
                                d.window, d.stride);
        y = std::move(r.output);
        route = std::move(r.routing);
        break;
      }
      case LayerKind::FullyConnected: y = layers::fc_forward(x, p); break;
    }
    if (inputs) inputs->push_back(std::move(x));
    if (routing) routing->push_back(std::move(route));
    x = std::move(y);
  }
  return x;
}

template <class T>
BasicTensor<T> BasicNetwork<T>::forward(const BasicTensor<T>& small, const BasicTensor<T>& large,
                                        ForwardTrace<T>* trace) const {
  const Shape expected{spec_.input_size, spec_.input_size, spec_.input_channels};
  if (small.shape() != expected || large.shape() != expected) {
    throw DimensionError("forward: patches must be " + shape_string(expected) + ", got " +
                         shape_string(small.shape()) + " and " + shape_string(large.shape()));
  }
  ForwardTrace<T> local;
  ForwardTrace<T>& t = trace ? *trace : local;
  const bool keep = trace != nullptr;
  t = ForwardTrace<T>{};
  const BasicTensor<T> fs = run_branch(Branch::Small, small, keep ? &t.small_inputs : nullptr,
                                       keep ? &t.small_routing : nullptr);
  const BasicTensor<T> fl = run_branch(Branch::Large, large, keep ? &t.large_inputs : nullptr,
                                       keep ? &t.large_routing : nullptr);
  std::vector<T> fused(fs.data().begin(), fs.data().end());
  fused.insert(fused.end(), fl.data().begin(), fl.data().end());
  const std::size_t width = fused.size();
  BasicTensor<T> x({width}, std::move(fused));
  const std::size_t nb = spec_.branch.size();
  for (std::size_t i = 0; i < spec_.head.size(); ++i) {
    const LayerDesc& d = spec_.head[i];
    BasicTensor<T> y = d.kind == LayerKind::FullyConnected ? layers::fc_forward(x, params_[2 * nb + i]) : layers::relu(x);
    if (keep) t.head_inputs.push_back(std::move(x));
    x = std::move(y);
  }
  BasicTensor<T> probs = layers::softmax(x);
  if (keep) {
    t.scores = std::move(x);
    t.probabilities = probs;
  }
  return probs;
}

template <class T>
Gradients<T> BasicNetwork<T>::zero_gradients() const {
  Gradients<T> g;
  for (const auto& p : params_) {
    g.weights.push_back(p.empty() ? BasicTensor<T>{} : BasicTensor<T>(p.weights.shape()));
    g.bias.push_back(p.empty() ? BasicTensor<T>{} : BasicTensor<T>(p.bias.shape()));
  }
  return g;
}

template <class T>
void BasicNetwork<T>::backward_branch(Branch branch, const std::vector<BasicTensor<T>>& inputs,
                                      const std::vector<std::vector<std::int64_t>>& routing, BasicTensor<T> grad,
                                      Gradients<T>& out) const {
  for (std::size_t i = spec_.branch.size(); i-- > 0;) {
    const LayerDesc& d = spec_.branch[i];
    const std::size_t l = flat_index(branch, i);
    const BasicTensor<T>& x = inputs[i];
    switch (d.kind) {
      case LayerKind::Conv: {
        auto g = layers::conv2d_backward(x, params_[l], d.pad, d.stride, grad);
        out.weights[l] = std::move(g.weights);
        out.bias[l] = std::move(g.bias);
        if (i > 0) grad = std::move(g.input);
        break;
      }
      case LayerKind::Relu: grad = layers::relu_backward(x, grad); break;
      case LayerKind::MaxPool:
      case LayerKind::AvgPool:
        grad = layers::pool2d_backward(
            x.shape(), d.kind == LayerKind::MaxPool ? layers::PoolKind::Max : layers::PoolKind::Avg, d.window,
            d.stride, routing[i], grad);
        break;
      case LayerKind::FullyConnected: break;
    }
  }
}

template <class T>
Gradients<T> BasicNetwork<T>::backward(const ForwardTrace<T>& trace, const BasicTensor<T>& grad_scores) const {
  if (trace.head_inputs.size() != spec_.head.size() || trace.small_inputs.size() != spec_.branch.size()) {
    throw DimensionError("backward: trace does not come from a traced forward pass of this network");
  }
  if (grad_scores.size() != class_count()) throw DimensionError("backward: score gradient has wrong length");
  Gradients<T> out = zero_gradients();
  const std::size_t nb = spec_.branch.size();
  BasicTensor<T> grad = grad_scores;
  for (std::size_t i = spec_.head.size(); i-- > 0;) {
    const BasicTensor<T>& x = trace.head_inputs[i];
    if (spec_.head[i].kind == LayerKind::FullyConnected) {
      auto g = layers::fc_backward(x, params_[2 * nb + i], grad);
      out.weights[2 * nb + i] = std::move(g.weights);
      out.bias[2 * nb + i] = std::move(g.bias);
      grad = std::move(g.input);
    } else {
      grad = layers::relu_backward(x, grad);
    }
  }
  const Shape feature_shape = shapes_.branch.back();
  const std::size_t half = shape_volume(feature_shape);
  std::vector<T> gs(grad.data().begin(), grad.data().begin() + static_cast<std::ptrdiff_t>(half));
  std::vector<T> gl(grad.data().begin() + static_cast<std::ptrdiff_t>(half), grad.data().end());
  backward_branch(Branch::Small, trace.small_inputs, trace.small_routing, BasicTensor<T>(feature_shape, std::move(gs)),
                  out);
  backward_branch(Branch::Large, trace.large_inputs, trace.large_routing, BasicTensor<T>(feature_shape, std::move(gl)),
                  out);
  return out;
}

template <class T>
bool BasicNetwork<T>::same_parameters(const BasicNetwork& other) const {
  if (!(spec_ == other.spec_) || params_.size() != other.params_.size()) return false;
  for (std::size_t l = 0; l < params_.size(); ++l) {
    if (!(params_[l].weights == other.params_[l].weights) || !(params_[l].bias == other.params_[l].bias)) return false;
  }
  return true;
}

template struct Gradients<float>;
template struct Gradients<double>;
template class BasicNetwork<float>;
template class BasicNetwork<double>;

Network build_parallel_multiclass(std::uint64_t seed) { return Network::build(parallel_multiclass_spec(), seed); }
Network build_binary(std::uint64_t seed) { return Network::build(binary_spec(), seed); }

// --- checkpoints ----------------------------------------------------------

void write_checkpoint(std::ostream& out, const Network& net) {
  json descriptor;
  descriptor["spec"] = json::parse(spec_to_json(net.spec()));
  descriptor["intensity_mean"] = net.intensity_mean;
  const std::string text = descriptor.dump();
  out.write("PFCK", 4);
  detail::put_le<std::uint16_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : net.params()) {
    if (p.empty()) continue;
    write_tensor(out, p.weights);
    write_tensor(out, p.bias);
  }
}

Network read_checkpoint(std::istream& in) {
  detail::Reader r(in, 0);
  r.expect_magic("PFCK");
  const std::uint64_t version_at = r.offset();
  const auto version = r.le<std::uint16_t>("checkpoint version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), version_at);
  }
  const auto length = r.le<std::uint32_t>("descriptor length");
  const std::uint64_t text_at = r.offset();
  std::string text(length, '\0');
  r.bytes(text.data(), length, "descriptor");
  NetworkSpec spec;
  double intensity_mean = 0.0;
  try {
    const json descriptor = json::parse(text);
    spec = spec_from_json(descriptor.at("spec").dump());
    intensity_mean = descriptor.value("intensity_mean", 0.0);
  } catch (const std::exception& e) {
    throw FormatError(std::string("bad checkpoint descriptor: ") + e.what(), text_at);
  }
  try {
    validate(spec);
  } catch (const DimensionError& e) {
    throw FormatError(std::string("inconsistent network descriptor: ") + e.what(), text_at);
  }
  std::vector<LayerParams<float>> params;
  std::uint64_t offset = r.offset();
  const std::size_t nb = spec.branch.size();
  const std::size_t layers = 2 * nb + spec.head.size();
  for (std::size_t l = 0; l < layers; ++l) {
    const LayerDesc& d = l < 2 * nb ? spec.branch[l % nb] : spec.head[l - 2 * nb];
    if (!d.has_params()) {
      params.emplace_back();
      continue;
    }
    const auto start = in.tellg();
    Tensor w = read_tensor(in, offset);
    Tensor b = read_tensor(in, offset + static_cast<std::uint64_t>(in.tellg() - start));
    offset += static_cast<std::uint64_t>(in.tellg() - start);
    params.emplace_back(std::move(w), std::move(b));
  }
  try {
    Network net(std::move(spec), std::move(params));
    net.intensity_mean = intensity_mean;
    return net;
  } catch (const DimensionError& e) {
    throw FormatError(std::string("checkpoint parameters do not match descriptor: ") + e.what(), offset);
  }
}

void save_checkpoint(const Network& net, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  write_checkpoint(out, net);
  if (!out) throw IoError("write failed: " + path.string());
}

Network load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  try {
    return read_checkpoint(in);
  } catch (const FormatError& e) {
    throw e.in_file(path.string());
  }
}

}  // namespace patchforge::net
