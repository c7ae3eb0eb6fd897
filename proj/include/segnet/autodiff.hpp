#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "segnet/ops.hpp"
#include "segnet/tensor.hpp"

// Tape-based reverse-mode differentiation. A Graph records every op in
// execution order, so node ids are already a topological order and backward
// is a single reverse sweep.
namespace segnet::ad {

using NodeId = std::size_t;

template <typename T>
using GradientMap = std::map<std::string, BasicTensor<T>>;

template <typename T>
class Graph;

template <typename T>
class BackwardContext {
 public:
  const BasicTensor<T>& grad_out() const { return *grad_out_; }
  const BasicTensor<T>& output() const;
  const BasicTensor<T>& input(std::size_t i) const;
  bool needs(std::size_t i) const;
  void accumulate(std::size_t i, BasicTensor<T> grad);

 private:
  friend class Graph<T>;
  BackwardContext(Graph<T>& graph, NodeId node, const BasicTensor<T>& grad_out)
      : graph_(graph), node_(node), grad_out_(&grad_out) {}

  Graph<T>& graph_;
  NodeId node_;
  const BasicTensor<T>* grad_out_;
};

template <typename T>
using BackwardFn = std::function<void(BackwardContext<T>&)>;

template <typename T>
class Graph {
 public:
  NodeId constant(BasicTensor<T> value);

  /// Registers a trainable leaf. The tensor is referenced, not copied, and
  /// must outlive the graph. Registering the same name twice returns the
  /// original node.
  NodeId parameter(const std::string& name, const BasicTensor<T>& value);

  NodeId record(std::string op, BasicTensor<T> value, std::vector<NodeId> inputs,
                BackwardFn<T> backward);

  const BasicTensor<T>& value(NodeId id) const;
  const std::string& op(NodeId id) const { return nodes_.at(id).op; }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_.at(id).inputs; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }
  std::vector<std::string> parameter_names() const;

  /// Gradient of a scalar node with respect to every registered parameter.
  /// Parameters that do not influence the loss receive zero tensors.
  GradientMap<T> backward(NodeId loss);

  /// Fingerprint of the piecewise-linear branch choices taken during the
  /// forward pass (ReLU signs, max-pool winners). Two evaluations with equal
  /// fingerprints lie on the same smooth piece.
  std::uint64_t activation_pattern() const noexcept { return pattern_; }
  void mix_pattern(std::uint64_t value) noexcept;

 private:
  friend class BackwardContext<T>;

  struct Node {
    std::string op;
    std::vector<NodeId> inputs;
    BasicTensor<T> owned;
    const BasicTensor<T>* external = nullptr;
    BackwardFn<T> backward;
    bool requires_grad = false;
    std::string param_name;
  };

  NodeId push(Node node);

  std::vector<Node> nodes_;
  std::unordered_map<std::string, NodeId> params_;
  std::vector<std::optional<BasicTensor<T>>> grads_;
  std::uint64_t pattern_ = 0xcbf29ce484222325ULL;
};

/// Test hook: while alive, gradients emitted by ops named `op` are multiplied
/// by `factor`. Used to prove the gradient checker catches broken rules.
class BackwardFaultGuard {
 public:
  BackwardFaultGuard(std::string op, double factor);
  ~BackwardFaultGuard();
  BackwardFaultGuard(const BackwardFaultGuard&) = delete;
  BackwardFaultGuard& operator=(const BackwardFaultGuard&) = delete;
};

// Differentiable ops. All take and return node ids of the same graph.

template <typename T>
NodeId add(Graph<T>& g, NodeId a, NodeId b);
template <typename T>
NodeId mul(Graph<T>& g, NodeId a, NodeId b);
template <typename T>
NodeId sum(Graph<T>& g, NodeId x);
template <typename T>
NodeId relu(Graph<T>& g, NodeId x);
template <typename T>
NodeId sigmoid(Graph<T>& g, NodeId x);
template <typename T>
NodeId reshape(Graph<T>& g, NodeId x, Shape shape);
template <typename T>
NodeId conv2d(Graph<T>& g, NodeId input, NodeId kernel, NodeId bias, const ops::ConvOptions& opts);
template <typename T>
NodeId conv2d_transpose(Graph<T>& g, NodeId input, NodeId kernel, NodeId bias, std::size_t stride);
template <typename T>
NodeId concat_channels(Graph<T>& g, const std::vector<NodeId>& parts);
template <typename T>
NodeId global_avg_pool(Graph<T>& g, NodeId x);
template <typename T>
NodeId global_max_pool(Graph<T>& g, NodeId x);
template <typename T>
NodeId scale_channels(Graph<T>& g, NodeId features, NodeId scale);
template <typename T>
NodeId broadcast_spatial(Graph<T>& g, NodeId vec, std::size_t height, std::size_t width);

/// Mean binary cross-entropy of probabilities against a 0/1 target of the
/// same shape. Probabilities are clamped to [1e-7, 1-1e-7] before the log.
template <typename T>
NodeId bce_loss(Graph<T>& g, NodeId pred, const BasicTensor<T>& target);

/// 1 - mean over channels of (2*sum(p*g) + 1) / (sum(p) + sum(g) + 1).
template <typename T>
NodeId soft_dice_loss(Graph<T>& g, NodeId pred, const BasicTensor<T>& target);

}  // namespace segnet::ad
