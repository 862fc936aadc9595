#include "bevis/layers.hpp"

#include <cmath>

namespace bevis {

double normal(Rng& rng, double mean, double stddev) {
  // Box-Muller on the portable uniform source.
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::vector<Tensor> ParameterRegistry::param_tensors() const {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

namespace {

Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = normal(rng, 0.0, stddev);
  return Tensor(std::move(shape), std::move(v), true);
}

}  // namespace

Conv3x3Layer Conv3x3Layer::init(std::size_t c_in, std::size_t c_out, Rng& rng) {
  return {he_normal({3, 3, c_in, c_out}, 9 * c_in, rng), Tensor::zeros({c_out}, true)};
}

void Conv3x3Layer::collect(const std::string& prefix, ParameterRegistry& reg) const {
  reg.params.push_back({prefix + ".weight", weight});
  reg.params.push_back({prefix + ".bias", bias});
}

DenseLayer DenseLayer::init(std::size_t c_in, std::size_t c_out, Rng& rng, bool with_bias) {
  DenseLayer layer{he_normal({c_in, c_out}, c_in, rng), Tensor()};
  if (with_bias) layer.bias = Tensor::zeros({c_out}, true);
  return layer;
}

void DenseLayer::collect(const std::string& prefix, ParameterRegistry& reg) const {
  reg.params.push_back({prefix + ".weight", weight});
  if (bias.defined()) reg.params.push_back({prefix + ".bias", bias});
}

BatchNormLayer BatchNormLayer::init(std::size_t channels) {
  BatchNormLayer bn;
  bn.gamma = Tensor::filled({channels}, 1.0, true);
  bn.beta = Tensor::zeros({channels}, true);
  bn.buffers.running_mean = Tensor::zeros({channels});
  bn.buffers.running_var = Tensor::filled({channels}, 1.0);
  return bn;
}

void BatchNormLayer::collect(const std::string& prefix, ParameterRegistry& reg) const {
  reg.params.push_back({prefix + ".gamma", gamma});
  reg.params.push_back({prefix + ".beta", beta});
  reg.buffers.push_back({prefix + ".running_mean", buffers.running_mean});
  reg.buffers.push_back({prefix + ".running_var", buffers.running_var});
}

}  // namespace bevis
