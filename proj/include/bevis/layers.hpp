#pragma once

#include <string>
#include <vector>

#include "bevis/ops.hpp"
#include "bevis/rng.hpp"
#include "bevis/tensor.hpp"

namespace bevis {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Trainable parameters and non-trainable buffers of a network, in a stable
/// registration order (the checkpoint order).
struct ParameterRegistry {
  std::vector<NamedTensor> params;
  std::vector<NamedTensor> buffers;

  std::vector<Tensor> param_tensors() const;
};

struct Conv3x3Layer {
  Tensor weight;  // [3, 3, C, C']
  Tensor bias;    // [C']

  static Conv3x3Layer init(std::size_t c_in, std::size_t c_out, Rng& rng);
  Tensor operator()(const Tensor& x) const { return ops::conv3x3(x, weight, bias); }
  void collect(const std::string& prefix, ParameterRegistry& reg) const;
};

struct DenseLayer {
  Tensor weight;  // [C, C']
  Tensor bias;    // [C'], may be undefined

  static DenseLayer init(std::size_t c_in, std::size_t c_out, Rng& rng, bool with_bias = true);
  Tensor operator()(const Tensor& x) const { return ops::dense(x, weight, bias); }
  void collect(const std::string& prefix, ParameterRegistry& reg) const;
};

struct BatchNormLayer {
  Tensor gamma;
  Tensor beta;
  ops::BatchNormBuffers buffers;

  static BatchNormLayer init(std::size_t channels);
  Tensor operator()(const Tensor& x, bool training, bool update_running = true) {
    return ops::batch_norm(x, gamma, beta, buffers, training, update_running);
  }
  void collect(const std::string& prefix, ParameterRegistry& reg) const;
};

}  // namespace bevis
