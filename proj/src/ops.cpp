#include "segnet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <limits>
#include <string>

#include "segnet/parallel.hpp"

namespace segnet::ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

// Rows of the result are partitioned across workers; the reduction for a
// given output scalar never spans workers.
constexpr std::size_t kMinRowsPerWorker = 64;

// c[m x n] = a[m x k] * b[k x n]
template <typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  ConstMap<T> B(b, k, n);
  parallel_for(m, kMinRowsPerWorker, [&](std::size_t r0, std::size_t r1) {
    ConstMap<T> A(a + r0 * k, r1 - r0, k);
    MutMap<T> C(c + r0 * n, r1 - r0, n);
    C.noalias() = A * B;
  });
}

// c[m x n] = a^T * b where a is stored [k x m], b [k x n]
template <typename T>
void matmul_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  ConstMap<T> A(a, k, m);
  ConstMap<T> B(b, k, n);
  parallel_for(m, kMinRowsPerWorker, [&](std::size_t r0, std::size_t r1) {
    MutMap<T> C(c + r0 * n, r1 - r0, n);
    C.noalias() = A.middleCols(r0, r1 - r0).transpose() * B;
  });
}

// c[m x n] = a * b^T where a is [m x k], b stored [n x k]
template <typename T>
void matmul_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  ConstMap<T> B(b, n, k);
  parallel_for(m, kMinRowsPerWorker, [&](std::size_t r0, std::size_t r1) {
    ConstMap<T> A(a + r0 * k, r1 - r0, k);
    MutMap<T> C(c + r0 * n, r1 - r0, n);
    C.noalias() = A * B.transpose();
  });
}

bool is_pointwise(const ConvGeometry& g) {
  return g.kernel_h == 1 && g.kernel_w == 1 && g.stride == 1 && g.pad_top == 0 &&
         g.pad_left == 0 && g.out_h == g.in_h && g.out_w == g.in_w;
}

template <typename T>
std::vector<T> im2col(const T* input, const ConvGeometry& g, std::size_t channels) {
  const std::size_t patch = g.patch_size(channels);
  std::vector<T> cols(g.positions() * patch, T{0});
  for (std::size_t oy = 0; oy < g.out_h; ++oy) {
    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
      T* row = cols.data() + (oy * g.out_w + ox) * patch;
      for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky * g.dilation) -
                                  static_cast<std::ptrdiff_t>(g.pad_top);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
        for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
          const std::ptrdiff_t ix =
              static_cast<std::ptrdiff_t>(ox * g.stride + kx * g.dilation) -
              static_cast<std::ptrdiff_t>(g.pad_left);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
          const T* src = input + (static_cast<std::size_t>(iy) * g.in_w + static_cast<std::size_t>(ix)) * channels;
          std::copy(src, src + channels, row + (ky * g.kernel_w + kx) * channels);
        }
      }
    }
  }
  return cols;
}

template <typename T>
void col2im(const T* cols, const ConvGeometry& g, std::size_t channels, T* output) {
  const std::size_t patch = g.patch_size(channels);
  for (std::size_t oy = 0; oy < g.out_h; ++oy) {
    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
      const T* row = cols + (oy * g.out_w + ox) * patch;
      for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky * g.dilation) -
                                  static_cast<std::ptrdiff_t>(g.pad_top);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
        for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
          const std::ptrdiff_t ix =
              static_cast<std::ptrdiff_t>(ox * g.stride + kx * g.dilation) -
              static_cast<std::ptrdiff_t>(g.pad_left);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
          T* dst = output + (static_cast<std::size_t>(iy) * g.in_w + static_cast<std::size_t>(ix)) * channels;
          const T* src = row + (ky * g.kernel_w + kx) * channels;
          for (std::size_t c = 0; c < channels; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

template <typename T>
void add_bias(BasicTensor<T>& out, const BasicTensor<T>& bias) {
  const std::size_t channels = bias.size();
  T* data = out.raw();
  const std::size_t positions = out.size() / channels;
  for (std::size_t p = 0; p < positions; ++p) {
    for (std::size_t c = 0; c < channels; ++c) data[p * channels + c] += bias[c];
  }
}

template <typename T>
BasicTensor<T> spatial_sum(const BasicTensor<T>& grad_out) {
  const std::size_t channels = grad_out.dim(2);
  BasicTensor<T> sum({channels});
  const std::size_t positions = grad_out.size() / channels;
  for (std::size_t p = 0; p < positions; ++p) {
    for (std::size_t c = 0; c < channels; ++c) sum[c] += grad_out[p * channels + c];
  }
  return sum;
}

template <typename T>
void require_rank(const BasicTensor<T>& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + " must have rank " + std::to_string(rank) + ", got " +
                     shape_to_string(t.shape()));
  }
}

template <typename T>
void check_conv_args(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                     std::size_t kernel_in_axis, const char* op) {
  require_rank(input, 3, "conv input");
  require_rank(kernel, 4, "conv kernel");
  if (kernel.dim(kernel_in_axis) != input.dim(2)) {
    throw ShapeError(std::string(op) + ": kernel expects " +
                     std::to_string(kernel.dim(kernel_in_axis)) + " input channels, input has " +
                     std::to_string(input.dim(2)));
  }
}

template <typename T>
void check_bias(const BasicTensor<T>& bias, std::size_t out_channels) {
  if (bias.rank() != 1 || bias.dim(0) != out_channels) {
    throw ShapeError("bias shape " + shape_to_string(bias.shape()) + " does not match " +
                     std::to_string(out_channels) + " output channels");
  }
}

}  // namespace

ConvGeometry conv_geometry(std::size_t in_h, std::size_t in_w, std::size_t kernel_h,
                           std::size_t kernel_w, const ConvOptions& opts) {
  if (opts.stride < 1) throw ShapeError("conv stride must be positive");
  if (opts.dilation < 1) throw ShapeError("conv dilation must be positive");
  if (kernel_h < 1 || kernel_w < 1) throw ShapeError("conv kernel extents must be positive");
  ConvGeometry g;
  g.in_h = in_h;
  g.in_w = in_w;
  g.kernel_h = kernel_h;
  g.kernel_w = kernel_w;
  g.stride = opts.stride;
  g.dilation = opts.dilation;
  const std::size_t span_h = (kernel_h - 1) * opts.dilation + 1;
  const std::size_t span_w = (kernel_w - 1) * opts.dilation + 1;
  if (opts.padding == Padding::Same) {
    g.out_h = (in_h + opts.stride - 1) / opts.stride;
    g.out_w = (in_w + opts.stride - 1) / opts.stride;
    const std::size_t need_h = (g.out_h - 1) * opts.stride + span_h;
    const std::size_t need_w = (g.out_w - 1) * opts.stride + span_w;
    g.pad_top = need_h > in_h ? (need_h - in_h) / 2 : 0;
    g.pad_left = need_w > in_w ? (need_w - in_w) / 2 : 0;
  } else {
    if (span_h > in_h || span_w > in_w) {
      throw ShapeError("valid convolution kernel span exceeds the input extent");
    }
    g.out_h = (in_h - span_h) / opts.stride + 1;
    g.out_w = (in_w - span_w) / opts.stride + 1;
  }
  return g;
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                      const BasicTensor<T>& bias, const ConvOptions& opts) {
  check_conv_args(input, kernel, 2, "conv2d");
  const std::size_t cin = input.dim(2);
  const std::size_t cout = kernel.dim(3);
  check_bias(bias, cout);
  const ConvGeometry g = conv_geometry(input.dim(0), input.dim(1), kernel.dim(0), kernel.dim(1), opts);

  BasicTensor<T> out({g.out_h, g.out_w, cout});
  const std::size_t patch = g.patch_size(cin);
  if (is_pointwise(g)) {
    matmul(input.raw(), kernel.raw(), out.raw(), g.positions(), patch, cout);
  } else {
    const std::vector<T> cols = im2col(input.raw(), g, cin);
    matmul(cols.data(), kernel.raw(), out.raw(), g.positions(), patch, cout);
  }
  add_bias(out, bias);
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                             const BasicTensor<T>& grad_out, const ConvOptions& opts,
                             bool need_input_grad) {
  check_conv_args(input, kernel, 2, "conv2d_backward");
  const std::size_t cin = input.dim(2);
  const std::size_t cout = kernel.dim(3);
  const ConvGeometry g = conv_geometry(input.dim(0), input.dim(1), kernel.dim(0), kernel.dim(1), opts);
  if (grad_out.shape() != Shape{g.out_h, g.out_w, cout}) {
    throw ShapeError("conv2d_backward: gradient shape " + shape_to_string(grad_out.shape()) +
                     " does not match output shape");
  }
  const std::size_t patch = g.patch_size(cin);
  const bool pointwise = is_pointwise(g);
  std::vector<T> cols;
  const T* cols_ptr = input.raw();
  if (!pointwise) {
    cols = im2col(input.raw(), g, cin);
    cols_ptr = cols.data();
  }

  ConvGrads<T> grads;
  grads.kernel = BasicTensor<T>(kernel.shape());
  matmul_tn(cols_ptr, grad_out.raw(), grads.kernel.raw(), patch, g.positions(), cout);
  grads.bias = spatial_sum(grad_out);

  if (need_input_grad) {
    grads.input = BasicTensor<T>(input.shape());
    if (pointwise) {
      matmul_nt(grad_out.raw(), kernel.raw(), grads.input.raw(), g.positions(), cout, patch);
    } else {
      std::vector<T> grad_cols(g.positions() * patch);
      matmul_nt(grad_out.raw(), kernel.raw(), grad_cols.data(), g.positions(), cout, patch);
      col2im(grad_cols.data(), g, cin, grads.input.raw());
    }
  }
  return grads;
}

template <typename T>
BasicTensor<T> conv2d_transpose(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                                const BasicTensor<T>& bias, std::size_t stride) {
  check_conv_args(input, kernel, 3, "conv2d_transpose");
  if (stride < 1) throw ShapeError("conv2d_transpose stride must be positive");
  const std::size_t cin = input.dim(2);
  const std::size_t cout = kernel.dim(2);
  check_bias(bias, cout);
  const std::size_t out_h = (input.dim(0) - 1) * stride + kernel.dim(0);
  const std::size_t out_w = (input.dim(1) - 1) * stride + kernel.dim(1);
  const ConvGeometry g =
      conv_geometry(out_h, out_w, kernel.dim(0), kernel.dim(1), {stride, 1, Padding::Valid});

  const std::size_t patch = g.patch_size(cout);
  std::vector<T> cols(g.positions() * patch);
  matmul_nt(input.raw(), kernel.raw(), cols.data(), g.positions(), cin, patch);
  BasicTensor<T> out({out_h, out_w, cout});
  col2im(cols.data(), g, cout, out.raw());
  add_bias(out, bias);
  return out;
}

template <typename T>
ConvGrads<T> conv2d_transpose_backward(const BasicTensor<T>& input,
                                       const BasicTensor<T>& kernel,
                                       const BasicTensor<T>& grad_out, std::size_t stride,
                                       bool need_input_grad) {
  check_conv_args(input, kernel, 3, "conv2d_transpose_backward");
  const std::size_t cin = input.dim(2);
  const std::size_t cout = kernel.dim(2);
  const std::size_t out_h = (input.dim(0) - 1) * stride + kernel.dim(0);
  const std::size_t out_w = (input.dim(1) - 1) * stride + kernel.dim(1);
  if (grad_out.shape() != Shape{out_h, out_w, cout}) {
    throw ShapeError("conv2d_transpose_backward: gradient shape " +
                     shape_to_string(grad_out.shape()) + " does not match output shape");
  }
  const ConvGeometry g =
      conv_geometry(out_h, out_w, kernel.dim(0), kernel.dim(1), {stride, 1, Padding::Valid});
  const std::size_t patch = g.patch_size(cout);
  const std::vector<T> grad_cols = im2col(grad_out.raw(), g, cout);

  ConvGrads<T> grads;
  grads.kernel = BasicTensor<T>(kernel.shape());
  matmul_tn(grad_cols.data(), input.raw(), grads.kernel.raw(), patch, g.positions(), cin);
  grads.bias = spatial_sum(grad_out);
  if (need_input_grad) {
    grads.input = BasicTensor<T>(input.shape());
    matmul(grad_cols.data(), kernel.raw(), grads.input.raw(), g.positions(), patch, cin);
  }
  return grads;
}

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& features) {
  require_rank(features, 3, "global_avg_pool input");
  const std::size_t positions = features.dim(0) * features.dim(1);
  const std::size_t channels = features.dim(2);
  BasicTensor<T> out({channels});
  std::vector<T> column(positions);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t p = 0; p < positions; ++p) column[p] = features[p * channels + c];
    std::sort(column.begin(), column.end());
    double sum = 0.0;
    for (T v : column) sum += static_cast<double>(v);
    out[c] = static_cast<T>(sum / static_cast<double>(positions));
  }
  return out;
}

template <typename T>
BasicTensor<T> global_max_pool(const BasicTensor<T>& features, std::vector<std::size_t>* argmax) {
  require_rank(features, 3, "global_max_pool input");
  const std::size_t positions = features.dim(0) * features.dim(1);
  const std::size_t channels = features.dim(2);
  BasicTensor<T> out({channels});
  if (argmax) argmax->assign(channels, 0);
  for (std::size_t c = 0; c < channels; ++c) {
    std::size_t best = 0;
    for (std::size_t p = 1; p < positions; ++p) {
      if (features[p * channels + c] > features[best * channels + c]) best = p;
    }
    out[c] = features[best * channels + c];
    if (argmax) (*argmax)[c] = best;
  }
  return out;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
  return out;
}

template <typename T>
T sigmoid_scalar(T x) {
  T p;
  if (x >= T{0}) {
    p = T{1} / (T{1} + std::exp(-x));
  } else {
    const T e = std::exp(x);
    p = e / (T{1} + e);
  }
  constexpr T lo = std::numeric_limits<T>::min();
  constexpr T hi = T{1} - std::numeric_limits<T>::epsilon() / T{2};
  return std::clamp(p, lo, hi);
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = sigmoid_scalar(x[i]);
  return out;
}

template <typename T>
BasicTensor<T> scale_channels(const BasicTensor<T>& features, const BasicTensor<T>& scale) {
  require_rank(features, 3, "scale_channels input");
  const std::size_t channels = features.dim(2);
  if (scale.size() != channels) {
    throw ShapeError("scale_channels: scale has " + std::to_string(scale.size()) +
                     " entries for " + std::to_string(channels) + " channels");
  }
  BasicTensor<T> out(features.shape());
  const std::size_t positions = features.size() / channels;
  for (std::size_t p = 0; p < positions; ++p) {
    for (std::size_t c = 0; c < channels; ++c) {
      out[p * channels + c] = features[p * channels + c] * scale[c];
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> concat_channels(const std::vector<const BasicTensor<T>*>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels needs at least one input");
  const std::size_t h = parts.front()->dim(0);
  const std::size_t w = parts.front()->dim(1);
  std::size_t total = 0;
  for (const auto* part : parts) {
    require_rank(*part, 3, "concat_channels input");
    if (part->dim(0) != h || part->dim(1) != w) {
      throw ShapeError("concat_channels: spatial extents differ: " +
                       shape_to_string(parts.front()->shape()) + " vs " +
                       shape_to_string(part->shape()));
    }
    total += part->dim(2);
  }
  BasicTensor<T> out({h, w, total});
  for (std::size_t p = 0; p < h * w; ++p) {
    T* dst = out.raw() + p * total;
    for (const auto* part : parts) {
      const std::size_t c = part->dim(2);
      std::copy(part->raw() + p * c, part->raw() + (p + 1) * c, dst);
      dst += c;
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> broadcast_spatial(const BasicTensor<T>& vec, std::size_t height, std::size_t width) {
  const std::size_t channels = vec.size();
  if (vec.rank() != 1 && !(vec.rank() == 3 && vec.dim(0) == 1 && vec.dim(1) == 1)) {
    throw ShapeError("broadcast_spatial expects (C) or (1, 1, C), got " + shape_to_string(vec.shape()));
  }
  BasicTensor<T> out({height, width, channels});
  for (std::size_t p = 0; p < height * width; ++p) {
    std::copy(vec.raw(), vec.raw() + channels, out.raw() + p * channels);
  }
  return out;
}

template <typename T>
T inner_product(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.size() != b.size()) throw ShapeError("inner_product: size mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sum += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return static_cast<T>(sum);
}

#define SEGNET_INSTANTIATE_OPS(T)                                                               \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&,                  \
                                 const BasicTensor<T>&, const ConvOptions&);                    \
  template ConvGrads<T> conv2d_backward(const BasicTensor<T>&, const BasicTensor<T>&,           \
                                        const BasicTensor<T>&, const ConvOptions&, bool);       \
  template BasicTensor<T> conv2d_transpose(const BasicTensor<T>&, const BasicTensor<T>&,        \
                                           const BasicTensor<T>&, std::size_t);                 \
  template ConvGrads<T> conv2d_transpose_backward(const BasicTensor<T>&, const BasicTensor<T>&, \
                                                  const BasicTensor<T>&, std::size_t, bool);    \
  template BasicTensor<T> global_avg_pool(const BasicTensor<T>&);                               \
  template BasicTensor<T> global_max_pool(const BasicTensor<T>&, std::vector<std::size_t>*);    \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                          \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                       \
  template T sigmoid_scalar(T);                                                                 \
  template BasicTensor<T> scale_channels(const BasicTensor<T>&, const BasicTensor<T>&);         \
  template BasicTensor<T> concat_channels(const std::vector<const BasicTensor<T>*>&);           \
  template BasicTensor<T> broadcast_spatial(const BasicTensor<T>&, std::size_t, std::size_t);   \
  template T inner_product(const BasicTensor<T>&, const BasicTensor<T>&);

SEGNET_INSTANTIATE_OPS(float)
SEGNET_INSTANTIATE_OPS(double)

}  // namespace segnet::ops
