#include "bevis/optim.hpp"

#include <cmath>
#include <map>

namespace bevis {

double AdamState::learning_rate() const {
  return config.base_lr *
         std::pow(config.decay_rate,
                  static_cast<double>(step) / static_cast<double>(config.decay_interval));
}

AdamState make_adam(const std::vector<Tensor>& params, AdamConfig config) {
  AdamState state;
  state.config = config;
  for (const auto& p : params) {
    state.first_moment.emplace_back(p.size(), 0.0);
    state.second_moment.emplace_back(p.size(), 0.0);
  }
  return state;
}

void adam_step(AdamState& state, std::vector<Tensor>& params) {
  if (params.size() != state.first_moment.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " params but state for " +
                     std::to_string(state.first_moment.size()));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (state.first_moment[k].size() != params[k].size()) {
      throw ShapeError("adam_step: moment size mismatch for parameter " + std::to_string(k));
    }
    for (double g : params[k].grad()) {
      if (!std::isfinite(g)) {
        throw NonFiniteError("adam_step: non-finite gradient in parameter " + std::to_string(k));
      }
    }
  }

  const auto& cfg = state.config;
  const double lr = state.learning_rate();
  const double t = static_cast<double>(state.step + 1);
  const double bias1 = 1.0 - std::pow(cfg.beta1, t);
  const double bias2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto value = params[k].mutable_data();
    const auto grad = params[k].grad();
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad.empty() ? 0.0 : grad[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = m[i] / bias1;
      const double v_hat = v[i] / bias2;
      value[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
  ++state.step;
}

std::vector<NamedTensor> adam_records(const AdamState& state, const ParameterRegistry& reg) {
  std::vector<NamedTensor> out;
  out.push_back({"adam/step", Tensor::scalar(static_cast<double>(state.step))});
  for (std::size_t k = 0; k < reg.params.size(); ++k) {
    const auto& p = reg.params[k];
    out.push_back({"adam/m/" + p.name, Tensor(p.tensor.shape(), state.first_moment[k])});
    out.push_back({"adam/v/" + p.name, Tensor(p.tensor.shape(), state.second_moment[k])});
  }
  return out;
}

void restore_adam(AdamState& state, const ParameterRegistry& reg,
                  const std::vector<NamedTensor>& records) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& r : records) by_name[r.name] = &r.tensor;
  auto find = [&](const std::string& name) -> const Tensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint lacks record '" + name + "'");
    return *it->second;
  };
  state.step = static_cast<std::uint64_t>(find("adam/step").item());
  state.first_moment.clear();
  state.second_moment.clear();
  for (const auto& p : reg.params) {
    const auto& m = find("adam/m/" + p.name);
    const auto& v = find("adam/v/" + p.name);
    if (m.size() != p.tensor.size() || v.size() != p.tensor.size()) {
      throw ShapeError("checkpoint moment shape mismatch for '" + p.name + "'");
    }
    state.first_moment.emplace_back(m.data().begin(), m.data().end());
    state.second_moment.emplace_back(v.data().begin(), v.data().end());
  }
}

}  // namespace bevis
