#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "segnet/tensor.hpp"

namespace segnet {

template <typename T>
using NamedTensors = std::map<std::string, BasicTensor<T>>;

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const;
  friend bool operator==(const AdamHyper&, const AdamHyper&) = default;
};

/// Moment estimates for every parameter plus the shared step counter.
template <typename T>
struct AdamState {
  AdamHyper hyper;
  NamedTensors<T> m;
  NamedTensors<T> v;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update, in place. Every parameter must have a
/// gradient of identical shape; missing moments are created as zeros.
template <typename T>
void adam_step(NamedTensors<T>& params, const NamedTensors<T>& grads, AdamState<T>& state);

}  // namespace segnet
