#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>

#include "segnet/adam.hpp"
#include "segnet/autodiff.hpp"
#include "segnet/tensor.hpp"

namespace segnet::model {

enum class Variant { Baseline, Enhanced };

std::string to_string(Variant variant);
Variant parse_variant(std::string_view text);

struct ModelConfig {
  std::size_t input_size = 128;
  std::size_t input_channels = 4;
  std::array<std::size_t, 4> encoder_tap_widths{16, 24, 40, 80};
  // Width of the extra stride-32 encoder stage that feeds the bottleneck.
  std::size_t bottleneck_width = 160;
  std::array<std::size_t, 4> decoder_widths{256, 128, 64, 32};
  std::size_t aspp_filters = 256;
  std::array<std::size_t, 3> aspp_dilations{6, 12, 18};
  std::size_t output_channels = 3;
  Variant variant = Variant::Enhanced;

  void validate() const;

  /// The small configuration used for finite-difference gradient checks:
  /// 32x32 input, tap widths (4, 6, 8, 10), 16 ASPP filters.
  static ModelConfig miniature(Variant variant);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

constexpr std::size_t kOutputStride = 32;

template <typename T>
using NamedParams = NamedTensors<T>;

/// Every trainable tensor the configuration needs, keyed by hierarchical
/// name (e.g. "encoder.stage2.block.conv1.kernel").
std::map<std::string, Shape> parameter_shapes(const ModelConfig& config);

std::size_t parameter_count(const ModelConfig& config);

/// Uniform kernels with bound sqrt(3 * gain / fan_in), zero biases. The gain
/// is 2 (He) for convs followed by ReLU, 1 for linear projections, and 0.1
/// for the second conv of each residual branch so that stacked unnormalized
/// blocks start close to their shortcut. Each
/// tensor draws from its own stream keyed by (seed, name), so variants that
/// share a parameter name share its initial value.
NamedParams<float> init_params(const ModelConfig& config, std::uint64_t seed);

/// Throws ShapeError unless `params` has exactly the names and shapes the
/// configuration requires.
template <typename T>
void check_params(const ModelConfig& config, const NamedParams<T>& params);

/// Looks parameters up by name and registers them in a graph on first use.
template <typename T>
class ParamBinder {
 public:
  ParamBinder(ad::Graph<T>& graph, const NamedParams<T>& params) : graph_(graph), params_(params) {}
  ad::NodeId operator()(const std::string& name);
  ad::Graph<T>& graph() { return graph_; }

 private:
  ad::Graph<T>& graph_;
  const NamedParams<T>& params_;
};

struct EncoderOutput {
  std::array<ad::NodeId, 4> taps{};  // strides 2, 4, 8, 16
  ad::NodeId bottleneck_in = 0;      // stride 32
};

/// Two 3x3 convs with ReLU plus a shortcut (identity, or a 1x1 projection
/// when the width changes), summed and passed through ReLU.
template <typename T>
ad::NodeId residual_block(ParamBinder<T>& bind, ad::NodeId x, const std::string& prefix,
                          std::size_t out_channels);

/// F' = sigmoid(avg_pool(F) + max_pool(F)) * F, channel-wise. No parameters.
template <typename T>
ad::NodeId channel_attention(ad::Graph<T>& g, ad::NodeId features);

/// Five parallel branches (1x1, three dilated 3x3, pooled 1x1), each with
/// ReLU, concatenated and fused by a 1x1 conv.
template <typename T>
ad::NodeId aspp(ParamBinder<T>& bind, ad::NodeId x, const std::string& prefix,
                const ModelConfig& config);

/// Output of a single ASPP branch (0 = 1x1, 1..3 = dilated, 4 = pooled),
/// before concatenation.
template <typename T>
ad::NodeId aspp_branch(ParamBinder<T>& bind, ad::NodeId x, const std::string& prefix,
                       const ModelConfig& config, std::size_t branch);

template <typename T>
EncoderOutput encoder_forward(ParamBinder<T>& bind, ad::NodeId image, const ModelConfig& config);

template <typename T>
ad::NodeId bottleneck_forward(ParamBinder<T>& bind, ad::NodeId x, const ModelConfig& config);

template <typename T>
ad::NodeId decoder_forward(ParamBinder<T>& bind, const std::array<ad::NodeId, 4>& taps,
                           ad::NodeId bottleneck, const ModelConfig& config);

/// Full network; returns the (S, S, 3) probability node, channels (WT, TC, ET).
template <typename T>
ad::NodeId model_forward(ad::Graph<T>& g, ad::NodeId image, const NamedParams<T>& params,
                         const ModelConfig& config);

/// Inference without keeping the graph around.
template <typename T>
BasicTensor<T> predict(const BasicTensor<T>& image, const NamedParams<T>& params,
                       const ModelConfig& config);

/// Eager channel attention on a single feature map.
template <typename T>
BasicTensor<T> channel_attention(const BasicTensor<T>& features);

/// The attention vector M_c alone.
template <typename T>
BasicTensor<T> channel_attention_weights(const BasicTensor<T>& features);

template <typename T>
NamedParams<T> cast_params(const NamedParams<float>& params) {
  NamedParams<T> out;
  for (const auto& [name, tensor] : params) out.emplace(name, tensor.template cast<T>());
  return out;
}

}  // namespace segnet::model
