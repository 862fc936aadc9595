#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "bevis/layers.hpp"

namespace bevis {

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamConfig {
  double base_lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double decay_rate = 0.7;
  std::uint64_t decay_interval = 5000;
};

/// Adam with exponential learning-rate decay.
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;

  /// lr applied by the next step: base_lr · decay_rate^(step / decay_interval).
  double learning_rate() const;
};

AdamState make_adam(const std::vector<Tensor>& params, AdamConfig config = {});

/// Applies one update from the params' accumulated gradients. Throws
/// NonFiniteError (leaving everything untouched) if any gradient is not finite.
/// Params without a gradient are treated as having a zero gradient.
void adam_step(AdamState& state, std::vector<Tensor>& params);

/// Moments and step count as named records for the checkpoint container.
std::vector<NamedTensor> adam_records(const AdamState& state, const ParameterRegistry& reg);
void restore_adam(AdamState& state, const ParameterRegistry& reg,
                  const std::vector<NamedTensor>& records);

}  // namespace bevis
