#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "lbba/error.hpp"
#include "lbba/param_store.hpp"
#include "lbba/tensor.hpp"

namespace lbba {

// SGD hyperparameters. Batch size is fixed at 1 image per step throughout
// the pipeline; it is kept here so configs can echo it.
struct TrainConfig {
  double learning_rate = 0.001;
  double momentum = 0.9;
  double weight_decay = 0.0;
  int batch_size = 1;
  int epochs = 8;
  int decay_epoch = 6;    // lr *= decay_factor once epoch >= decay_epoch
  double decay_factor = 0.1;
  std::uint64_t seed = 1;

  void validate() const {
    if (learning_rate <= 0.0) throw ConfigError("TrainConfig: learning_rate must be > 0");
    if (epochs < 1) throw ConfigError("TrainConfig: epochs must be >= 1");
    if (decay_factor <= 0.0) throw ConfigError("TrainConfig: decay_factor must be > 0");
  }

  double lr_at_epoch(int epoch) const {
    return epoch >= decay_epoch ? learning_rate * decay_factor : learning_rate;
  }
};

// Momentum SGD over a ParamStore. Velocity buffers are keyed by parameter
// name and created on first use.
template <typename S>
class SgdOptimizer {
 public:
  explicit SgdOptimizer(TrainConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  const TrainConfig& config() const { return cfg_; }

  // v <- mu*v - lr*(g + wd*p); p <- p + v
  void step(ParamStore<S>& params,
            const std::map<std::string, Tensor<S>>& grads, int epoch) {
    const S lr = static_cast<S>(cfg_.lr_at_epoch(epoch));
    const S mu = static_cast<S>(cfg_.momentum);
    const S wd = static_cast<S>(cfg_.weight_decay);
    for (const auto& [name, grad] : grads) {
      Tensor<S>& p = params.at(name);
      if (p.shape != grad.shape) {
        throw DimensionError("sgd_step: gradient shape mismatch for " + name);
      }
      if (!grad.all_finite()) {
        throw DivergenceError("sgd_step: non-finite gradient in " + name);
      }
      Tensor<S>& v = velocity_.try_emplace(name, Tensor<S>(p.shape)).first->second;
      for (int i = 0; i < p.size(); ++i) {
        v[i] = mu * v[i] - lr * (grad[i] + wd * p[i]);
        p[i] += v[i];
      }
    }
  }

  void reset() { velocity_.clear(); }

 private:
  TrainConfig cfg_;
  std::map<std::string, Tensor<S>> velocity_;
};

}  // namespace lbba
