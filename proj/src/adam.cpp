#include "segnet/adam.hpp"

#include <cmath>

namespace segnet {

void AdamHyper::validate() const {
  if (!(lr > 0.0)) throw ShapeError("adam: learning rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ShapeError("adam: beta1 must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ShapeError("adam: beta2 must lie in [0, 1)");
  if (!(epsilon > 0.0)) throw ShapeError("adam: epsilon must be positive");
}

template <typename T>
void adam_step(NamedTensors<T>& params, const NamedTensors<T>& grads, AdamState<T>& state) {
  state.hyper.validate();
  for (const auto& [name, param] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw ShapeError("adam: no gradient for parameter " + name);
    if (it->second.shape() != param.shape()) {
      throw ShapeError("adam: gradient shape " + shape_to_string(it->second.shape()) +
                       " does not match parameter " + name + " " + shape_to_string(param.shape()));
    }
    for (auto* moments : {&state.m, &state.v}) {
      auto mit = moments->find(name);
      if (mit == moments->end()) {
        moments->emplace(name, BasicTensor<T>::zeros_like(param));
      } else if (mit->second.shape() != param.shape()) {
        throw ShapeError("adam: moment shape mismatch for parameter " + name);
      }
    }
  }

  state.step += 1;
  const auto& h = state.hyper;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(h.beta1, t);
  const double correction2 = 1.0 - std::pow(h.beta2, t);

  for (auto& [name, param] : params) {
    const auto& grad = grads.at(name);
    auto& m = state.m.at(name);
    auto& v = state.v.at(name);
    for (std::size_t i = 0; i < param.size(); ++i) {
      const double g = grad[i];
      const double mi = h.beta1 * static_cast<double>(m[i]) + (1.0 - h.beta1) * g;
      const double vi = h.beta2 * static_cast<double>(v[i]) + (1.0 - h.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double m_hat = mi / correction1;
      const double v_hat = vi / correction2;
      param[i] = static_cast<T>(static_cast<double>(param[i]) - h.lr * m_hat / (std::sqrt(v_hat) + h.epsilon));
    }
    require_finite(param, "adam_step");
  }
}

template void adam_step(NamedTensors<float>&, const NamedTensors<float>&, AdamState<float>&);
template void adam_step(NamedTensors<double>&, const NamedTensors<double>&, AdamState<double>&);

}  // namespace segnet
