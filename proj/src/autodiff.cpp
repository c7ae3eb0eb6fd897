#include "segnet/autodiff.hpp"

#include <cmath>
#include <stdexcept>

namespace segnet::ad {
namespace {

constexpr double kProbLo = 1e-7;
constexpr double kProbHi = 1.0 - 1e-7;

struct FaultState {
  std::string op;
  double factor = 1.0;
  bool active = false;
};

thread_local FaultState g_fault;

std::uint64_t mix64(std::uint64_t h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  return h;
}

template <typename T>
void check_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

// Neumaier-compensated sum; the mean of N equal terms comes back as that term.
struct CompensatedSum {
  double sum = 0.0;
  double carry = 0.0;
  void add(double v) {
    const double t = sum + v;
    if (std::abs(sum) >= std::abs(v)) {
      carry += (sum - t) + v;
    } else {
      carry += (v - t) + sum;
    }
    sum = t;
  }
  double value() const { return sum + carry; }
};

}  // namespace

BackwardFaultGuard::BackwardFaultGuard(std::string op, double factor) {
  g_fault = FaultState{std::move(op), factor, true};
}

BackwardFaultGuard::~BackwardFaultGuard() { g_fault = FaultState{}; }

template <typename T>
const BasicTensor<T>& BackwardContext<T>::output() const {
  return graph_.value(node_);
}

template <typename T>
const BasicTensor<T>& BackwardContext<T>::input(std::size_t i) const {
  return graph_.value(graph_.nodes_[node_].inputs.at(i));
}

template <typename T>
bool BackwardContext<T>::needs(std::size_t i) const {
  return graph_.nodes_[graph_.nodes_[node_].inputs.at(i)].requires_grad;
}

template <typename T>
void BackwardContext<T>::accumulate(std::size_t i, BasicTensor<T> grad) {
  const NodeId target = graph_.nodes_[node_].inputs.at(i);
  auto& node = graph_.nodes_[target];
  if (!node.requires_grad) return;
  if (grad.shape() != graph_.value(target).shape()) {
    throw ShapeError("gradient for input of '" + graph_.nodes_[node_].op + "' has shape " +
                     shape_to_string(grad.shape()) + ", expected " +
                     shape_to_string(graph_.value(target).shape()));
  }
  if (g_fault.active && g_fault.op == graph_.nodes_[node_].op) {
    for (auto& v : grad.data()) v = static_cast<T>(v * g_fault.factor);
  }
  auto& slot = graph_.grads_[target];
  if (!slot) {
    slot = std::move(grad);
  } else {
    for (std::size_t k = 0; k < grad.size(); ++k) (*slot)[k] += grad[k];
  }
}

template <typename T>
NodeId Graph<T>::push(Node node) {
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

template <typename T>
NodeId Graph<T>::constant(BasicTensor<T> value) {
  Node node;
  node.op = "constant";
  node.owned = std::move(value);
  return push(std::move(node));
}

template <typename T>
NodeId Graph<T>::parameter(const std::string& name, const BasicTensor<T>& value) {
  if (auto it = params_.find(name); it != params_.end()) return it->second;
  Node node;
  node.op = "parameter";
  node.external = &value;
  node.requires_grad = true;
  node.param_name = name;
  const NodeId id = push(std::move(node));
  params_.emplace(name, id);
  return id;
}

template <typename T>
NodeId Graph<T>::record(std::string op, BasicTensor<T> value, std::vector<NodeId> inputs,
                        BackwardFn<T> backward) {
  Node node;
  node.op = std::move(op);
  for (NodeId in : inputs) {
    if (in >= nodes_.size()) throw std::out_of_range("graph input refers to a later node");
    node.requires_grad = node.requires_grad || nodes_[in].requires_grad;
  }
  if (!value.all_finite()) throw NonFiniteError("non-finite value produced by " + node.op);
  node.inputs = std::move(inputs);
  node.owned = std::move(value);
  if (node.requires_grad) node.backward = std::move(backward);
  return push(std::move(node));
}

template <typename T>
const BasicTensor<T>& Graph<T>::value(NodeId id) const {
  const Node& node = nodes_.at(id);
  return node.external ? *node.external : node.owned;
}

template <typename T>
std::vector<std::string> Graph<T>::parameter_names() const {
  std::vector<std::string> names;
  names.reserve(params_.size());
  for (const auto& [name, id] : params_) names.push_back(name);
  std::sort(names.begin(), names.end());
  return names;
}

template <typename T>
void Graph<T>::mix_pattern(std::uint64_t value) noexcept {
  pattern_ = mix64(pattern_, value);
}

template <typename T>
GradientMap<T> Graph<T>::backward(NodeId loss) {
  if (loss >= nodes_.size()) throw std::out_of_range("loss node does not exist");
  if (value(loss).size() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " +
                     shape_to_string(value(loss).shape()));
  }
  grads_.assign(nodes_.size(), std::nullopt);
  grads_[loss] = BasicTensor<T>::full(value(loss).shape(), T{1});

  for (NodeId id = loss + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.requires_grad || !node.backward || !grads_[id]) continue;
    BasicTensor<T> grad = std::move(*grads_[id]);
    grads_[id].reset();
    BackwardContext<T> ctx(*this, id, grad);
    node.backward(ctx);
  }

  GradientMap<T> out;
  for (const auto& [name, id] : params_) {
    if (grads_[id]) {
      out.emplace(name, std::move(*grads_[id]));
    } else {
      out.emplace(name, BasicTensor<T>::zeros_like(value(id)));
    }
  }
  grads_.clear();
  return out;
}

template <typename T>
NodeId add(Graph<T>& g, NodeId a, NodeId b) {
  const auto& va = g.value(a);
  const auto& vb = g.value(b);
  check_same_shape(va, vb, "add");
  BasicTensor<T> out(va.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
  return g.record("add", std::move(out), {a, b}, [](BackwardContext<T>& ctx) {
    if (ctx.needs(0)) ctx.accumulate(0, ctx.grad_out());
    if (ctx.needs(1)) ctx.accumulate(1, ctx.grad_out());
  });
}

template <typename T>
NodeId mul(Graph<T>& g, NodeId a, NodeId b) {
  const auto& va = g.value(a);
  const auto& vb = g.value(b);
  check_same_shape(va, vb, "mul");
  BasicTensor<T> out(va.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
  return g.record("mul", std::move(out), {a, b}, [](BackwardContext<T>& ctx) {
    const auto& go = ctx.grad_out();
    for (std::size_t side = 0; side < 2; ++side) {
      if (!ctx.needs(side)) continue;
      const auto& other = ctx.input(1 - side);
      BasicTensor<T> grad(go.shape());
      for (std::size_t i = 0; i < go.size(); ++i) grad[i] = go[i] * other[i];
      ctx.accumulate(side, std::move(grad));
    }
  });
}

template <typename T>
NodeId sum(Graph<T>& g, NodeId x) {
  const auto& vx = g.value(x);
  double total = 0.0;
  for (T v : vx.data()) total += static_cast<double>(v);
  BasicTensor<T> out({1}, static_cast<T>(total));
  return g.record("sum", std::move(out), {x}, [](BackwardContext<T>& ctx) {
    ctx.accumulate(0, BasicTensor<T>::full(ctx.input(0).shape(), ctx.grad_out()[0]));
  });
}

template <typename T>
NodeId relu(Graph<T>& g, NodeId x) {
  const auto& vx = g.value(x);
  std::uint64_t bits = 0;
  std::uint64_t h = 0x84222325cbf29ce4ULL;
  for (std::size_t i = 0; i < vx.size(); ++i) {
    bits = (bits << 1) | (vx[i] > T{0} ? 1u : 0u);
    if ((i & 63) == 63) h = mix64(h, bits), bits = 0;
  }
  g.mix_pattern(mix64(h, bits));
  return g.record("relu", ops::relu(vx), {x}, [](BackwardContext<T>& ctx) {
    const auto& in = ctx.input(0);
    const auto& go = ctx.grad_out();
    BasicTensor<T> grad(in.shape());
    for (std::size_t i = 0; i < in.size(); ++i) grad[i] = in[i] > T{0} ? go[i] : T{0};
    ctx.accumulate(0, std::move(grad));
  });
}

template <typename T>
NodeId sigmoid(Graph<T>& g, NodeId x) {
  return g.record("sigmoid", ops::sigmoid(g.value(x)), {x}, [](BackwardContext<T>& ctx) {
    const auto& out = ctx.output();
    const auto& go = ctx.grad_out();
    BasicTensor<T> grad(out.shape());
    for (std::size_t i = 0; i < out.size(); ++i) grad[i] = go[i] * out[i] * (T{1} - out[i]);
    ctx.accumulate(0, std::move(grad));
  });
}

template <typename T>
NodeId reshape(Graph<T>& g, NodeId x, Shape shape) {
  BasicTensor<T> out = g.value(x).reshaped(std::move(shape));
  return g.record("reshape", std::move(out), {x}, [](BackwardContext<T>& ctx) {
    ctx.accumulate(0, ctx.grad_out().reshaped(ctx.input(0).shape()));
  });
}

template <typename T>
NodeId conv2d(Graph<T>& g, NodeId input, NodeId kernel, NodeId bias, const ops::ConvOptions& opts) {
  BasicTensor<T> out = ops::conv2d(g.value(input), g.value(kernel), g.value(bias), opts);
  return g.record("conv2d", std::move(out), {input, kernel, bias}, [opts](BackwardContext<T>& ctx) {
    auto grads = ops::conv2d_backward(ctx.input(0), ctx.input(1), ctx.grad_out(), opts, ctx.needs(0));
    if (ctx.needs(0)) ctx.accumulate(0, std::move(grads.input));
    ctx.accumulate(1, std::move(grads.kernel));
    ctx.accumulate(2, std::move(grads.bias));
  });
}

template <typename T>
NodeId conv2d_transpose(Graph<T>& g, NodeId input, NodeId kernel, NodeId bias, std::size_t stride) {
  BasicTensor<T> out = ops::conv2d_transpose(g.value(input), g.value(kernel), g.value(bias), stride);
  return g.record("conv2d_transpose", std::move(out), {input, kernel, bias},
                  [stride](BackwardContext<T>& ctx) {
                    auto grads = ops::conv2d_transpose_backward(ctx.input(0), ctx.input(1),
                                                                ctx.grad_out(), stride, ctx.needs(0));
                    if (ctx.needs(0)) ctx.accumulate(0, std::move(grads.input));
                    ctx.accumulate(1, std::move(grads.kernel));
                    ctx.accumulate(2, std::move(grads.bias));
                  });
}

template <typename T>
NodeId concat_channels(Graph<T>& g, const std::vector<NodeId>& parts) {
  std::vector<const BasicTensor<T>*> values;
  values.reserve(parts.size());
  for (NodeId id : parts) values.push_back(&g.value(id));
  BasicTensor<T> out = ops::concat_channels(values);
  return g.record("concat_channels", std::move(out), parts, [n = parts.size()](BackwardContext<T>& ctx) {
    const auto& go = ctx.grad_out();
    const std::size_t total = go.dim(2);
    const std::size_t positions = go.dim(0) * go.dim(1);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t c = ctx.input(k).dim(2);
      if (ctx.needs(k)) {
        BasicTensor<T> grad(ctx.input(k).shape());
        for (std::size_t p = 0; p < positions; ++p) {
          const T* src = go.raw() + p * total + offset;
          std::copy(src, src + c, grad.raw() + p * c);
        }
        ctx.accumulate(k, std::move(grad));
      }
      offset += c;
    }
  });
}

template <typename T>
NodeId global_avg_pool(Graph<T>& g, NodeId x) {
  return g.record("global_avg_pool", ops::global_avg_pool(g.value(x)), {x}, [](BackwardContext<T>& ctx) {
    const auto& in = ctx.input(0);
    const auto& go = ctx.grad_out();
    const std::size_t channels = in.dim(2);
    const std::size_t positions = in.dim(0) * in.dim(1);
    const T inv = T{1} / static_cast<T>(positions);
    BasicTensor<T> grad(in.shape());
    for (std::size_t p = 0; p < positions; ++p) {
      for (std::size_t c = 0; c < channels; ++c) grad[p * channels + c] = go[c] * inv;
    }
    ctx.accumulate(0, std::move(grad));
  });
}

template <typename T>
NodeId global_max_pool(Graph<T>& g, NodeId x) {
  std::vector<std::size_t> argmax;
  BasicTensor<T> out = ops::global_max_pool(g.value(x), &argmax);
  std::uint64_t h = 0;
  for (std::size_t idx : argmax) h = mix64(h, idx);
  g.mix_pattern(h);
  return g.record("global_max_pool", std::move(out), {x},
                  [argmax = std::move(argmax)](BackwardContext<T>& ctx) {
                    const auto& in = ctx.input(0);
                    const auto& go = ctx.grad_out();
                    const std::size_t channels = in.dim(2);
                    BasicTensor<T> grad(in.shape());
                    for (std::size_t c = 0; c < channels; ++c) grad[argmax[c] * channels + c] = go[c];
                    ctx.accumulate(0, std::move(grad));
                  });
}

template <typename T>
NodeId scale_channels(Graph<T>& g, NodeId features, NodeId scale) {
  BasicTensor<T> out = ops::scale_channels(g.value(features), g.value(scale));
  return g.record("scale_channels", std::move(out), {features, scale}, [](BackwardContext<T>& ctx) {
    const auto& f = ctx.input(0);
    const auto& s = ctx.input(1);
    const auto& go = ctx.grad_out();
    const std::size_t channels = f.dim(2);
    const std::size_t positions = f.size() / channels;
    if (ctx.needs(0)) ctx.accumulate(0, ops::scale_channels(go, s));
    if (ctx.needs(1)) {
      std::vector<double> acc(channels, 0.0);
      for (std::size_t p = 0; p < positions; ++p) {
        for (std::size_t c = 0; c < channels; ++c) {
          acc[c] += static_cast<double>(go[p * channels + c]) * static_cast<double>(f[p * channels + c]);
        }
      }
      BasicTensor<T> grad(s.shape());
      for (std::size_t c = 0; c < channels; ++c) grad[c] = static_cast<T>(acc[c]);
      ctx.accumulate(1, std::move(grad));
    }
  });
}

template <typename T>
NodeId broadcast_spatial(Graph<T>& g, NodeId vec, std::size_t height, std::size_t width) {
  BasicTensor<T> out = ops::broadcast_spatial(g.value(vec), height, width);
  return g.record("broadcast_spatial", std::move(out), {vec}, [](BackwardContext<T>& ctx) {
    const auto& go = ctx.grad_out();
    const std::size_t channels = go.dim(2);
    const std::size_t positions = go.dim(0) * go.dim(1);
    std::vector<double> acc(channels, 0.0);
    for (std::size_t p = 0; p < positions; ++p) {
      for (std::size_t c = 0; c < channels; ++c) acc[c] += static_cast<double>(go[p * channels + c]);
    }
    BasicTensor<T> grad(ctx.input(0).shape());
    for (std::size_t c = 0; c < channels; ++c) grad[c] = static_cast<T>(acc[c]);
    ctx.accumulate(0, std::move(grad));
  });
}

template <typename T>
NodeId bce_loss(Graph<T>& g, NodeId pred, const BasicTensor<T>& target) {
  const auto& p = g.value(pred);
  check_same_shape(p, target, "bce_loss");
  CompensatedSum total;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pc = std::clamp(static_cast<double>(p[i]), kProbLo, kProbHi);
    const double t = static_cast<double>(target[i]);
    total.add(-(t * std::log(pc) + (1.0 - t) * std::log(1.0 - pc)));
  }
  const double n = static_cast<double>(p.size());
  BasicTensor<T> out({1}, static_cast<T>(total.value() / n));
  // The clamp is treated as identity in the backward pass so saturated
  // pixels keep a usable gradient.
  return g.record("bce_loss", std::move(out), {pred}, [target, n](BackwardContext<T>& ctx) {
    const auto& pv = ctx.input(0);
    const double scale = static_cast<double>(ctx.grad_out()[0]) / n;
    BasicTensor<T> grad(pv.shape());
    for (std::size_t i = 0; i < pv.size(); ++i) {
      const double pc = std::clamp(static_cast<double>(pv[i]), kProbLo, kProbHi);
      const double t = static_cast<double>(target[i]);
      grad[i] = static_cast<T>(scale * (pc - t) / (pc * (1.0 - pc)));
    }
    ctx.accumulate(0, std::move(grad));
  });
}

template <typename T>
NodeId soft_dice_loss(Graph<T>& g, NodeId pred, const BasicTensor<T>& target) {
  const auto& p = g.value(pred);
  check_same_shape(p, target, "soft_dice_loss");
  if (p.rank() != 3) throw ShapeError("soft_dice_loss expects (H, W, C) predictions");
  const std::size_t channels = p.dim(2);
  const std::size_t positions = p.size() / channels;
  std::vector<double> inter(channels, 0.0), psum(channels, 0.0), gsum(channels, 0.0);
  for (std::size_t k = 0; k < positions; ++k) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double pv = p[k * channels + c];
      const double tv = target[k * channels + c];
      inter[c] += pv * tv;
      psum[c] += pv;
      gsum[c] += tv;
    }
  }
  double mean_dice = 0.0;
  for (std::size_t c = 0; c < channels; ++c) {
    mean_dice += (2.0 * inter[c] + 1.0) / (psum[c] + gsum[c] + 1.0);
  }
  mean_dice /= static_cast<double>(channels);
  BasicTensor<T> out({1}, static_cast<T>(1.0 - mean_dice));
  return g.record("soft_dice_loss", std::move(out), {pred},
                  [target, inter, psum, gsum, channels, positions](BackwardContext<T>& ctx) {
                    const double scale = static_cast<double>(ctx.grad_out()[0]) / static_cast<double>(channels);
                    BasicTensor<T> grad(ctx.input(0).shape());
                    for (std::size_t k = 0; k < positions; ++k) {
                      for (std::size_t c = 0; c < channels; ++c) {
                        const double denom = psum[c] + gsum[c] + 1.0;
                        const double tv = target[k * channels + c];
                        const double d = (2.0 * tv * denom - (2.0 * inter[c] + 1.0)) / (denom * denom);
                        grad[k * channels + c] = static_cast<T>(-scale * d);
                      }
                    }
                    ctx.accumulate(0, std::move(grad));
                  });
}

#define SEGNET_INSTANTIATE_AD(T)                                                                  \
  template class BackwardContext<T>;                                                              \
  template class Graph<T>;                                                                        \
  template NodeId add(Graph<T>&, NodeId, NodeId);                                                 \
  template NodeId mul(Graph<T>&, NodeId, NodeId);                                                 \
  template NodeId sum(Graph<T>&, NodeId);                                                         \
  template NodeId relu(Graph<T>&, NodeId);                                                        \
  template NodeId sigmoid(Graph<T>&, NodeId);                                                     \
  template NodeId reshape(Graph<T>&, NodeId, Shape);                                              \
  template NodeId conv2d(Graph<T>&, NodeId, NodeId, NodeId, const ops::ConvOptions&);             \
  template NodeId conv2d_transpose(Graph<T>&, NodeId, NodeId, NodeId, std::size_t);               \
  template NodeId concat_channels(Graph<T>&, const std::vector<NodeId>&);                         \
  template NodeId global_avg_pool(Graph<T>&, NodeId);                                             \
  template NodeId global_max_pool(Graph<T>&, NodeId);                                             \
  template NodeId scale_channels(Graph<T>&, NodeId, NodeId);                                      \
  template NodeId broadcast_spatial(Graph<T>&, NodeId, std::size_t, std::size_t);                 \
  template NodeId bce_loss(Graph<T>&, NodeId, const BasicTensor<T>&);                             \
  template NodeId soft_dice_loss(Graph<T>&, NodeId, const BasicTensor<T>&);

SEGNET_INSTANTIATE_AD(float)
SEGNET_INSTANTIATE_AD(double)

}  // namespace segnet::ad
