#include "segnet/model.hpp"

#include <cmath>

#include "segnet/rng.hpp"

namespace segnet::model {
namespace {

using ad::NodeId;

std::string stage_name(std::size_t k) { return "encoder.stage" + std::to_string(k); }
std::string level_name(std::size_t k) { return "decoder.level" + std::to_string(k); }

void add_conv(std::map<std::string, Shape>& shapes, const std::string& prefix, std::size_t kh,
              std::size_t kw, std::size_t cin, std::size_t cout) {
  shapes[prefix + ".kernel"] = {kh, kw, cin, cout};
  shapes[prefix + ".bias"] = {cout};
}

// Transposed kernels are (kH, kW, Cout, Cin).
void add_up(std::map<std::string, Shape>& shapes, const std::string& prefix, std::size_t cin,
            std::size_t cout) {
  shapes[prefix + ".kernel"] = {2, 2, cout, cin};
  shapes[prefix + ".bias"] = {cout};
}

void add_residual(std::map<std::string, Shape>& shapes, const std::string& prefix, std::size_t cin,
                  std::size_t cout) {
  add_conv(shapes, prefix + ".conv1", 3, 3, cin, cout);
  add_conv(shapes, prefix + ".conv2", 3, 3, cout, cout);
  if (cin != cout) add_conv(shapes, prefix + ".shortcut", 1, 1, cin, cout);
}

std::string aspp_branch_name(const ModelConfig& config, std::size_t branch) {
  switch (branch) {
    case 0:
      return "conv1x1";
    case 4:
      return "pool";
    default:
      return "atrous" + std::to_string(config.aspp_dilations.at(branch - 1));
  }
}

// Variance gain for a kernel: 2 when a ReLU follows, 1 for linear outputs,
// and a small value for the last conv of a residual branch so each block
// starts close to its shortcut. Without normalization layers this keeps
// activations from growing with depth.
double init_gain(const std::string& name) {
  if (name.ends_with(".conv2.kernel")) return 0.1;
  if (name.ends_with(".shortcut.kernel") || name.ends_with(".up.kernel") ||
      name == "aspp.fuse.kernel" || name == "head.out.kernel") {
    return 1.0;
  }
  return 2.0;
}

template <typename T>
NodeId conv(ParamBinder<T>& bind, NodeId x, const std::string& prefix, const ops::ConvOptions& opts) {
  return ad::conv2d(bind.graph(), x, bind(prefix + ".kernel"), bind(prefix + ".bias"), opts);
}

template <typename T>
NodeId up(ParamBinder<T>& bind, NodeId x, const std::string& prefix) {
  return ad::conv2d_transpose(bind.graph(), x, bind(prefix + ".kernel"), bind(prefix + ".bias"), 2);
}

}  // namespace

std::string to_string(Variant variant) {
  return variant == Variant::Baseline ? "baseline" : "enhanced";
}

Variant parse_variant(std::string_view text) {
  if (text == "baseline") return Variant::Baseline;
  if (text == "enhanced") return Variant::Enhanced;
  throw ShapeError("unknown model variant '" + std::string(text) + "' (expected baseline|enhanced)");
}

void ModelConfig::validate() const {
  if (input_size == 0 || input_size % kOutputStride != 0) {
    throw ShapeError("input_size must be a positive multiple of 32, got " + std::to_string(input_size));
  }
  if (input_channels == 0) throw ShapeError("input_channels must be positive");
  for (std::size_t w : encoder_tap_widths) {
    if (w == 0) throw ShapeError("encoder tap widths must be positive");
  }
  if (bottleneck_width == 0) throw ShapeError("bottleneck_width must be positive");
  for (std::size_t k = 0; k < decoder_widths.size(); ++k) {
    if (decoder_widths[k] == 0) throw ShapeError("decoder widths must be positive");
    if (k > 0 && decoder_widths[k] >= decoder_widths[k - 1]) {
      throw ShapeError("decoder widths must be strictly decreasing");
    }
  }
  if (decoder_widths.back() != 32) throw ShapeError("decoder widths must end at 32");
  if (aspp_filters == 0) throw ShapeError("aspp_filters must be positive");
  for (std::size_t d : aspp_dilations) {
    if (d == 0) throw ShapeError("aspp dilations must be positive");
  }
  if (output_channels != 3) throw ShapeError("output_channels must be 3 (WT, TC, ET)");
}

ModelConfig ModelConfig::miniature(Variant variant) {
  ModelConfig c;
  c.input_size = 32;
  c.encoder_tap_widths = {4, 6, 8, 10};
  c.bottleneck_width = 12;
  c.aspp_filters = 16;
  c.variant = variant;
  return c;
}

std::map<std::string, Shape> parameter_shapes(const ModelConfig& config) {
  config.validate();
  std::map<std::string, Shape> shapes;
  std::size_t width = config.input_channels;
  for (std::size_t k = 1; k <= 5; ++k) {
    const std::size_t out = k <= 4 ? config.encoder_tap_widths[k - 1] : config.bottleneck_width;
    add_conv(shapes, stage_name(k) + ".down", 3, 3, width, out);
    add_residual(shapes, stage_name(k) + ".block", out, out);
    width = out;
  }
  if (config.variant == Variant::Enhanced) {
    const std::size_t f = config.aspp_filters;
    for (std::size_t b = 0; b < 5; ++b) {
      const std::size_t k = (b >= 1 && b <= 3) ? 3 : 1;
      add_conv(shapes, "aspp." + aspp_branch_name(config, b), k, k, width, f);
    }
    add_conv(shapes, "aspp.fuse", 1, 1, 5 * f, f);
  } else {
    add_residual(shapes, "bottleneck.block", width, config.aspp_filters);
  }
  width = config.aspp_filters;
  for (std::size_t k = 1; k <= 4; ++k) {
    const std::size_t out = config.decoder_widths[k - 1];
    const std::size_t skip = config.encoder_tap_widths[4 - k];
    add_up(shapes, level_name(k) + ".up", width, out);
    add_residual(shapes, level_name(k) + ".block", out + skip, out);
    width = out;
  }
  add_up(shapes, "head.up", width, config.decoder_widths.back());
  add_conv(shapes, "head.out", 1, 1, config.decoder_widths.back(), config.output_channels);
  return shapes;
}

std::size_t parameter_count(const ModelConfig& config) {
  std::size_t total = 0;
  for (const auto& [name, shape] : parameter_shapes(config)) total += shape_numel(shape);
  return total;
}

NamedParams<float> init_params(const ModelConfig& config, std::uint64_t seed) {
  NamedParams<float> params;
  for (const auto& [name, shape] : parameter_shapes(config)) {
    Tensor t(shape);
    if (shape.size() == 4) {
      const bool transposed = name.ends_with(".up.kernel");
      // Transposed 2x2/stride-2 kernels feed each output from Cin inputs.
      const double fan_in = transposed ? static_cast<double>(shape[3])
                                       : static_cast<double>(shape[0] * shape[1] * shape[2]);
      const double bound = std::sqrt(init_gain(name) * 3.0 / fan_in);
      Rng rng(derive_seed(seed, fnv1a(name)));
      for (auto& v : t.data()) v = static_cast<float>(rng.uniform(-bound, bound));
    }
    params.emplace(name, std::move(t));
  }
  return params;
}

template <typename T>
void check_params(const ModelConfig& config, const NamedParams<T>& params) {
  const auto shapes = parameter_shapes(config);
  if (shapes.size() != params.size()) {
    throw ShapeError("architecture mismatch: expected " + std::to_string(shapes.size()) +
                     " parameter tensors, got " + std::to_string(params.size()));
  }
  for (const auto& [name, shape] : shapes) {
    auto it = params.find(name);
    if (it == params.end()) throw ShapeError("architecture mismatch: missing parameter " + name);
    if (it->second.shape() != shape) {
      throw ShapeError("architecture mismatch: parameter " + name + " has shape " +
                       shape_to_string(it->second.shape()) + ", expected " + shape_to_string(shape));
    }
  }
}

template <typename T>
NodeId ParamBinder<T>::operator()(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ShapeError("missing parameter " + name);
  return graph_.parameter(name, it->second);
}

template <typename T>
NodeId residual_block(ParamBinder<T>& bind, NodeId x, const std::string& prefix, std::size_t out_channels) {
  auto& g = bind.graph();
  NodeId h = ad::relu(g, conv(bind, x, prefix + ".conv1", {}));
  h = conv(bind, h, prefix + ".conv2", {});
  NodeId shortcut = x;
  if (g.value(x).dim(2) != out_channels) shortcut = conv(bind, x, prefix + ".shortcut", {});
  return ad::relu(g, ad::add(g, h, shortcut));
}

template <typename T>
NodeId channel_attention(ad::Graph<T>& g, NodeId features) {
  const NodeId descriptor = ad::add(g, ad::global_avg_pool(g, features), ad::global_max_pool(g, features));
  return ad::scale_channels(g, features, ad::sigmoid(g, descriptor));
}

template <typename T>
NodeId aspp_branch(ParamBinder<T>& bind, NodeId x, const std::string& prefix, const ModelConfig& config,
                   std::size_t branch) {
  auto& g = bind.graph();
  const std::string name = prefix + "." + aspp_branch_name(config, branch);
  if (branch == 4) {
    const std::size_t h = g.value(x).dim(0);
    const std::size_t w = g.value(x).dim(1);
    const std::size_t c = g.value(x).dim(2);
    NodeId pooled = ad::reshape(g, ad::global_avg_pool(g, x), {1, 1, c});
    NodeId projected = ad::relu(g, conv(bind, pooled, name, {}));
    return ad::broadcast_spatial(g, projected, h, w);
  }
  ops::ConvOptions opts;
  if (branch >= 1) opts.dilation = config.aspp_dilations.at(branch - 1);
  return ad::relu(g, conv(bind, x, name, opts));
}

template <typename T>
NodeId aspp(ParamBinder<T>& bind, NodeId x, const std::string& prefix, const ModelConfig& config) {
  std::vector<NodeId> branches;
  for (std::size_t b = 0; b < 5; ++b) branches.push_back(aspp_branch(bind, x, prefix, config, b));
  NodeId merged = ad::concat_channels(bind.graph(), branches);
  return conv(bind, merged, prefix + ".fuse", {});
}

template <typename T>
EncoderOutput encoder_forward(ParamBinder<T>& bind, NodeId image, const ModelConfig& config) {
  config.validate();
  auto& g = bind.graph();
  const auto& shape = g.value(image).shape();
  if (shape.size() != 3 || shape[0] != shape[1] || shape[0] % kOutputStride != 0) {
    throw ShapeError("encoder input must be (S, S, C) with S divisible by 32, got " + shape_to_string(shape));
  }
  if (shape[2] != config.input_channels) {
    throw ShapeError("encoder input has " + std::to_string(shape[2]) + " channels, config expects " +
                     std::to_string(config.input_channels));
  }
  EncoderOutput out;
  NodeId x = image;
  for (std::size_t k = 1; k <= 5; ++k) {
    const std::size_t width = k <= 4 ? config.encoder_tap_widths[k - 1] : config.bottleneck_width;
    x = ad::relu(g, conv(bind, x, stage_name(k) + ".down", {2, 1, ops::Padding::Same}));
    x = residual_block(bind, x, stage_name(k) + ".block", width);
    if (k <= 4) out.taps[k - 1] = x;
  }
  out.bottleneck_in = x;
  return out;
}

template <typename T>
NodeId bottleneck_forward(ParamBinder<T>& bind, NodeId x, const ModelConfig& config) {
  if (config.variant == Variant::Enhanced) return aspp(bind, x, "aspp", config);
  return residual_block(bind, x, "bottleneck.block", config.aspp_filters);
}

template <typename T>
NodeId decoder_forward(ParamBinder<T>& bind, const std::array<NodeId, 4>& taps, NodeId bottleneck,
                       const ModelConfig& config) {
  auto& g = bind.graph();
  NodeId x = bottleneck;
  for (std::size_t k = 1; k <= 4; ++k) {
    const std::string level = level_name(k);
    x = up(bind, x, level + ".up");
    const NodeId skip = taps[4 - k];
    if (g.value(x).dim(0) != g.value(skip).dim(0) || g.value(x).dim(1) != g.value(skip).dim(1)) {
      throw ShapeError("decoder level " + std::to_string(k) + " produced " +
                       shape_to_string(g.value(x).shape()) + " but its skip tap is " +
                       shape_to_string(g.value(skip).shape()));
    }
    x = ad::concat_channels(g, {x, skip});
    if (config.variant == Variant::Enhanced) x = channel_attention(g, x);
    x = residual_block(bind, x, level + ".block", config.decoder_widths[k - 1]);
  }
  x = up(bind, x, "head.up");
  x = conv(bind, x, "head.out", {});
  return ad::sigmoid(g, x);
}

template <typename T>
NodeId model_forward(ad::Graph<T>& g, NodeId image, const NamedParams<T>& params, const ModelConfig& config) {
  ParamBinder<T> bind(g, params);
  const EncoderOutput enc = encoder_forward(bind, image, config);
  const NodeId bottleneck = bottleneck_forward(bind, enc.bottleneck_in, config);
  return decoder_forward(bind, enc.taps, bottleneck, config);
}

template <typename T>
BasicTensor<T> predict(const BasicTensor<T>& image, const NamedParams<T>& params, const ModelConfig& config) {
  ad::Graph<T> g;
  const NodeId out = model_forward(g, g.constant(image), params, config);
  return g.value(out);
}

template <typename T>
BasicTensor<T> channel_attention_weights(const BasicTensor<T>& features) {
  BasicTensor<T> avg = ops::global_avg_pool(features);
  const BasicTensor<T> max = ops::global_max_pool(features);
  for (std::size_t c = 0; c < avg.size(); ++c) avg[c] += max[c];
  return ops::sigmoid(avg);
}

template <typename T>
BasicTensor<T> channel_attention(const BasicTensor<T>& features) {
  return ops::scale_channels(features, channel_attention_weights(features));
}

#define SEGNET_INSTANTIATE_MODEL(T)                                                                 \
  template void check_params(const ModelConfig&, const NamedParams<T>&);                            \
  template class ParamBinder<T>;                                                                    \
  template NodeId residual_block(ParamBinder<T>&, NodeId, const std::string&, std::size_t);         \
  template NodeId channel_attention(ad::Graph<T>&, NodeId);                                         \
  template NodeId aspp(ParamBinder<T>&, NodeId, const std::string&, const ModelConfig&);            \
  template NodeId aspp_branch(ParamBinder<T>&, NodeId, const std::string&, const ModelConfig&,      \
                              std::size_t);                                                         \
  template EncoderOutput encoder_forward(ParamBinder<T>&, NodeId, const ModelConfig&);              \
  template NodeId bottleneck_forward(ParamBinder<T>&, NodeId, const ModelConfig&);                  \
  template NodeId decoder_forward(ParamBinder<T>&, const std::array<NodeId, 4>&, NodeId,            \
                                  const ModelConfig&);                                              \
  template NodeId model_forward(ad::Graph<T>&, NodeId, const NamedParams<T>&, const ModelConfig&);  \
  template BasicTensor<T> predict(const BasicTensor<T>&, const NamedParams<T>&, const ModelConfig&); \
  template BasicTensor<T> channel_attention(const BasicTensor<T>&);                                 \
  template BasicTensor<T> channel_attention_weights(const BasicTensor<T>&);

SEGNET_INSTANTIATE_MODEL(float)
SEGNET_INSTANTIATE_MODEL(double)

}  // namespace segnet::model
