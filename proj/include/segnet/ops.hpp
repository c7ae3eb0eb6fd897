#pragma once

#include <cstddef>
#include <vector>

#include "segnet/tensor.hpp"

namespace segnet::ops {

enum class Padding { Same, Valid };

struct ConvOptions {
  std::size_t stride = 1;
  std::size_t dilation = 1;
  Padding padding = Padding::Same;
};

/// Resolved spatial arithmetic for one convolution. `same` padding splits the
/// total symmetrically; an odd surplus goes to the bottom/right.
struct ConvGeometry {
  std::size_t in_h = 0, in_w = 0;
  std::size_t out_h = 0, out_w = 0;
  std::size_t kernel_h = 0, kernel_w = 0;
  std::size_t stride = 1, dilation = 1;
  std::size_t pad_top = 0, pad_left = 0;

  std::size_t patch_size(std::size_t channels) const { return kernel_h * kernel_w * channels; }
  std::size_t positions() const { return out_h * out_w; }
};

ConvGeometry conv_geometry(std::size_t in_h, std::size_t in_w, std::size_t kernel_h,
                           std::size_t kernel_w, const ConvOptions& opts);

template <typename T>
struct ConvGrads {
  BasicTensor<T> input;  // empty when not requested
  BasicTensor<T> kernel;
  BasicTensor<T> bias;
};

/// Cross-correlation (no kernel flip). input (H,W,Cin), kernel (kH,kW,Cin,Cout),
/// bias (Cout).
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                      const BasicTensor<T>& bias, const ConvOptions& opts);

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                             const BasicTensor<T>& grad_out, const ConvOptions& opts,
                             bool need_input_grad);

/// Adjoint of a `valid`, undilated conv2d with the same kernel and stride.
/// input (H,W,Cin), kernel (kH,kW,Cout,Cin) -> ((H-1)*s+kH, (W-1)*s+kW, Cout).
template <typename T>
BasicTensor<T> conv2d_transpose(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                                const BasicTensor<T>& bias, std::size_t stride);

template <typename T>
ConvGrads<T> conv2d_transpose_backward(const BasicTensor<T>& input,
                                       const BasicTensor<T>& kernel,
                                       const BasicTensor<T>& grad_out, std::size_t stride,
                                       bool need_input_grad);

/// Per-channel spatial mean. The reduction sums each channel's values in
/// ascending order, so the result does not depend on spatial arrangement.
template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& features);

/// Per-channel spatial maximum. `argmax` (optional) receives the flat spatial
/// index of the first maximal element of each channel.
template <typename T>
BasicTensor<T> global_max_pool(const BasicTensor<T>& features,
                               std::vector<std::size_t>* argmax = nullptr);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);

/// Logistic sigmoid clamped to the open interval: results never round to
/// exactly 0 or 1.
template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x);

template <typename T>
T sigmoid_scalar(T x);

/// Broadcast (H, W, C) x (C) -> (H, W, C), multiplying each channel.
template <typename T>
BasicTensor<T> scale_channels(const BasicTensor<T>& features, const BasicTensor<T>& scale);

/// Concatenate rank-3 maps along the channel axis.
template <typename T>
BasicTensor<T> concat_channels(const std::vector<const BasicTensor<T>*>& parts);

/// Repeat a (C) or (1,1,C) vector over an H x W grid.
template <typename T>
BasicTensor<T> broadcast_spatial(const BasicTensor<T>& vec, std::size_t height, std::size_t width);

template <typename T>
T inner_product(const BasicTensor<T>& a, const BasicTensor<T>& b);

}  // namespace segnet::ops
