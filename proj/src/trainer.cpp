#include "patchforge/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "patchforge/errors.hpp"
#include "patchforge/parallel.hpp"
#include "patchforge/seeding.hpp"

namespace patchforge::train {

namespace {

// Samples per gradient chunk; fixed so the summation tree never depends on
// the worker count.
constexpr std::size_t kChunk = 8;

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) { throw ConfigError("train." + field + ": " + why); };
  if (epochs < 1) fail("epochs", "must be >= 1");
  if (batch_size < 1) fail("batch_size", "must be >= 1");
  if (!(base_lr > 0)) fail("base_lr", "must be > 0");
  if (!(lr_decay_factor > 0) || lr_decay_factor > 1) fail("lr_decay_factor", "must lie in (0, 1]");
  if (decay_start_epoch < 1) fail("decay_start_epoch", "must be >= 1");
  if (decay_every < 1) fail("decay_every", "must be >= 1");
  if (momentum < 0 || momentum >= 1) fail("momentum", "must lie in [0, 1)");
  if (weight_decay < 0) fail("weight_decay", "must be >= 0");
  if (workers < 1) fail("workers", "must be >= 1");
}

double lr_at_epoch(const TrainConfig& config, int epoch) {
  if (epoch < 1 || epoch > config.epochs) {
    throw DomainError("lr_at_epoch: epoch " + std::to_string(epoch) + " outside [1, " + std::to_string(config.epochs) +
                      "]");
  }
  if (epoch < config.decay_start_epoch) return config.base_lr;
  const int steps = 1 + (epoch - config.decay_start_epoch) / config.decay_every;
  // dividing by a power of the inverse factor keeps 1e-4 -> 1e-5 -> 1e-6 exact
  return config.base_lr / std::pow(1.0 / config.lr_decay_factor, steps);
}

template <class T>
void sgd_step(BasicTensor<T>& w, const BasicTensor<T>& g, BasicTensor<T>& v, double lr, double momentum,
              double weight_decay) {
  if (w.shape() != g.shape() || w.shape() != v.shape()) {
    throw DimensionError("sgd_step: shapes differ (weights " + shape_string(w.shape()) + ", gradient " +
                         shape_string(g.shape()) + ", velocity " + shape_string(v.shape()) + ")");
  }
  auto wd = w.data();
  const auto gd = g.data();
  auto vd = v.data();
  for (std::size_t i = 0; i < wd.size(); ++i) {
    const double wi = wd[i];
    const double vi = momentum * static_cast<double>(vd[i]) - lr * (static_cast<double>(gd[i]) + weight_decay * wi);
    vd[i] = static_cast<T>(vi);
    wd[i] = static_cast<T>(wi + static_cast<double>(vd[i]));
  }
}

template <class T>
void sgd_step(net::BasicNetwork<T>& network, const net::Gradients<T>& grads, double lr, double momentum,
              double weight_decay) {
  auto& params = network.params();
  if (grads.weights.size() != params.size()) throw DimensionError("sgd_step: gradient layer count mismatch");
  for (std::size_t l = 0; l < params.size(); ++l) {
    if (params[l].empty()) continue;
    sgd_step(params[l].weights, grads.weights[l], params[l].weight_velocity, lr, momentum, weight_decay);
    sgd_step(params[l].bias, grads.bias[l], params[l].bias_velocity, lr, momentum, weight_decay);
  }
}

template <class T>
net::Gradients<T> batch_gradients(const net::BasicNetwork<T>& network, std::span<const patches::PatchSample> samples,
                                  std::span<const std::size_t> order, int workers, double& loss_sum,
                                  std::size_t& correct) {
  const std::size_t n = order.size();
  const std::size_t chunks = (n + kChunk - 1) / kChunk;
  std::vector<net::Gradients<T>> partial(chunks);
  std::vector<double> chunk_loss(chunks, 0.0);
  std::vector<std::size_t> chunk_correct(chunks, 0);
  const T inv_n = static_cast<T>(1.0 / static_cast<double>(n));

  parallel_for(chunks, workers, [&](std::size_t c) {
    net::Gradients<T> acc = network.zero_gradients();
    for (std::size_t i = c * kChunk; i < std::min(n, (c + 1) * kChunk); ++i) {
      const auto& s = samples[order[i]];
      net::ForwardTrace<T> trace;
      BasicTensor<T> small = s.small.template cast<T>(), large = s.large.template cast<T>();
      const BasicTensor<T> p = network.forward(small, large, &trace);
      chunk_loss[c] += layers::cross_entropy(p, s.label);
      std::size_t best = 0;
      for (std::size_t k = 1; k < p.size(); ++k)
        if (p[k] > p[best]) best = k;
      chunk_correct[c] += best == s.label;
      BasicTensor<T> g = p;
      g[s.label] -= T(1);
      for (T& v : g.data()) v *= inv_n;
      acc.add(network.backward(trace, g));
    }
    partial[c] = std::move(acc);
  });

  net::Gradients<T> total = std::move(partial[0]);
  for (std::size_t c = 1; c < chunks; ++c) total.add(partial[c]);
  for (std::size_t c = 0; c < chunks; ++c) {
    loss_sum += chunk_loss[c];
    correct += chunk_correct[c];
  }
  return total;
}

std::string TrainLog::to_csv(bool include_timing) const {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,lr,mean_loss,accuracy" << (include_timing ? ",seconds" : "") << "\n";
  for (const auto& e : epochs) {
    out << e.epoch << "," << e.lr << "," << e.mean_loss << "," << e.accuracy;
    if (include_timing) out << "," << e.seconds;
    out << "\n";
  }
  return out.str();
}

void TrainLog::save_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << to_csv();
}

namespace {

bool all_finite(const net::Network& network) {
  for (const auto& p : network.params()) {
    for (float v : p.weights.data())
      if (!std::isfinite(v)) return false;
    for (float v : p.bias.data())
      if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace

TrainLog train(net::Network& network, std::span<const patches::PatchSample> data, const TrainConfig& config,
               const EpochCallback& on_epoch) {
  config.validate();
  if (data.empty()) throw DataError("train: the patch dataset is empty");
  const Shape patch{network.spec().input_size, network.spec().input_size, network.spec().input_channels};
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& s = data[i];
    if (s.label >= network.class_count()) {
      throw DataError("train: sample " + std::to_string(i) + " (case " + s.case_id + ", x " + std::to_string(s.x) +
                      ", y " + std::to_string(s.y) + ") has label " + std::to_string(s.label) + " but the network has " +
                      std::to_string(network.class_count()) + " classes");
    }
    if (s.small.shape() != patch || s.large.shape() != patch) {
      throw DataError("train: sample " + std::to_string(i) + " has patch shape " + shape_string(s.small.shape()) +
                      ", expected " + shape_string(patch));
    }
  }

  TrainLog log;
  std::vector<std::size_t> order(data.size());
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const double lr = lr_at_epoch(config, epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(derive_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
      std::swap(order[i - 1], order[j]);
    }

    double loss_sum = 0.0;
    std::size_t correct = 0;
    const auto bs = static_cast<std::size_t>(config.batch_size);
    for (std::size_t b = 0; b < order.size(); b += bs) {
      const std::span<const std::size_t> batch(order.data() + b, std::min(bs, order.size() - b));
      const auto grads = batch_gradients(network, data, batch, config.workers, loss_sum, correct);
      sgd_step(network, grads, lr, config.momentum, config.weight_decay);
    }
    if (!all_finite(network)) {
      throw DomainError("train: non-finite parameters after epoch " + std::to_string(epoch) +
                        "; lower base_lr (currently " + std::to_string(config.base_lr) + ")");
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.lr = lr;
    stats.mean_loss = loss_sum / static_cast<double>(data.size());
    stats.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log.epochs.push_back(stats);
    if (on_epoch) on_epoch(stats, network);
  }
  return log;
}

#define PATCHFORGE_INSTANTIATE(T)                                                                                      \
  template void sgd_step<T>(BasicTensor<T>&, const BasicTensor<T>&, BasicTensor<T>&, double, double, double);        \
  template void sgd_step<T>(net::BasicNetwork<T>&, const net::Gradients<T>&, double, double, double);                \
  template net::Gradients<T> batch_gradients<T>(const net::BasicNetwork<T>&, std::span<const patches::PatchSample>,   \
                                                std::span<const std::size_t>, int, double&, std::size_t&);
PATCHFORGE_INSTANTIATE(float)
PATCHFORGE_INSTANTIATE(double)
#undef PATCHFORGE_INSTANTIATE

}  // namespace patchforge::train
