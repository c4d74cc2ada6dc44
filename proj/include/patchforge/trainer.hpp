#pragma once

// Mini-batch SGD with momentum, weight decay and a staged learning-rate
// schedule, minimizing mean softmax cross-entropy over patch samples.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "patchforge/network.hpp"
#include "patchforge/patchlab.hpp"

namespace patchforge::train {

struct TrainConfig {
  int epochs = 50;
  int batch_size = 128;
  double base_lr = 1e-4;
  double lr_decay_factor = 0.1;
  int decay_start_epoch = 31;  // first epoch at the reduced rate
  int decay_every = 10;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  int workers = 1;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  double mean_loss = 0.0;
  double accuracy = 0.0;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochStats> epochs;

  /// Header "epoch,lr,mean_loss,accuracy,seconds" then one row per epoch.
  std::string to_csv(bool include_timing = true) const;
  void save_csv(const std::filesystem::path& path) const;
};

/// Rate for a 1-based epoch: base_lr until decay_start_epoch, then divided
/// by 1/lr_decay_factor once more every decay_every epochs.
double lr_at_epoch(const TrainConfig& config, int epoch);

/// v <- momentum * v - lr * (g + weight_decay * w);  w <- w + v.
template <class T>
void sgd_step(BasicTensor<T>& w, const BasicTensor<T>& g, BasicTensor<T>& v, double lr, double momentum,
              double weight_decay);

/// Applies sgd_step to every parametric layer (weights and biases).
template <class T>
void sgd_step(net::BasicNetwork<T>& network, const net::Gradients<T>& grads, double lr, double momentum,
              double weight_decay);

/// Called after each epoch with that epoch's statistics.
using EpochCallback = std::function<void(const EpochStats&, const net::Network&)>;

/// Trains `network` in place. The sample order is reshuffled each epoch
/// from a seed derived from (config.seed, epoch); the last partial batch is
/// kept. Gradients are reduced over fixed-size sample chunks in sample
/// order, so results do not depend on config.workers.
TrainLog train(net::Network& network, std::span<const patches::PatchSample> data, const TrainConfig& config,
               const EpochCallback& on_epoch = {});

/// Batch-mean loss and gradients for `samples` (the same reduction train()
/// uses for one mini-batch). Returns the summed loss and fills `correct`.
template <class T>
net::Gradients<T> batch_gradients(const net::BasicNetwork<T>& network, std::span<const patches::PatchSample> samples,
                                  std::span<const std::size_t> order, int workers, double& loss_sum,
                                  std::size_t& correct);

}  // namespace patchforge::train
