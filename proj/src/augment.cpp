#include "segnet/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace segnet::augment {
namespace {

BinaryMask gather(const BinaryMask& mask, const std::vector<std::size_t>& src) {
  std::vector<std::uint8_t> out(src.size());
  const auto& in = mask.values();
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = in[src[i]];
  return BinaryMask(mask.height(), mask.width(), std::move(out));
}

}  // namespace

void AugConfig::validate() const {
  if (!(rotation_deg >= 0.0) || !(shift_frac >= 0.0) || !(zoom_frac >= 0.0)) {
    throw ShapeError("augmentation bounds must be nonnegative");
  }
  if (zoom_frac >= 1.0) throw ShapeError("zoom_frac must be below 1");
  if (!(hflip_prob >= 0.0 && hflip_prob <= 1.0)) throw ShapeError("hflip_prob must lie in [0, 1]");
}

AugConfig AugConfig::identity() {
  AugConfig c;
  c.rotation_deg = 0.0;
  c.shift_frac = 0.0;
  c.zoom_frac = 0.0;
  c.hflip_prob = 0.0;
  return c;
}

AffineTransform sample_transform(const AugConfig& config, Rng& rng, std::size_t height, std::size_t width) {
  config.validate();
  AffineTransform t;
  t.rotation_deg = rng.uniform(-config.rotation_deg, config.rotation_deg);
  t.shift_x = rng.uniform(-config.shift_frac, config.shift_frac) * static_cast<double>(width);
  t.shift_y = rng.uniform(-config.shift_frac, config.shift_frac) * static_cast<double>(height);
  t.zoom = 1.0 + rng.uniform(-config.zoom_frac, config.zoom_frac);
  t.hflip = rng.bernoulli(config.hflip_prob);
  return t;
}

std::vector<std::size_t> source_indices(const AffineTransform& t, std::size_t height, std::size_t width) {
  if (!(t.zoom > 0.0)) throw ShapeError("zoom must be positive");
  const double theta = t.rotation_deg * std::numbers::pi / 180.0;
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  const double cy = (static_cast<double>(height) - 1.0) / 2.0;
  const double cx = (static_cast<double>(width) - 1.0) / 2.0;
  const double max_y = static_cast<double>(height) - 1.0;
  const double max_x = static_cast<double>(width) - 1.0;

  std::vector<std::size_t> src(height * width);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const double qx = t.hflip ? max_x - static_cast<double>(x) : static_cast<double>(x);
      const double dx = qx - cx - t.shift_x;
      const double dy = static_cast<double>(y) - cy - t.shift_y;
      const double sx = cx + (c * dx + s * dy) / t.zoom;
      const double sy = cy + (-s * dx + c * dy) / t.zoom;
      const double ix = std::clamp(std::floor(sx + 0.5), 0.0, max_x);
      const double iy = std::clamp(std::floor(sy + 0.5), 0.0, max_y);
      src[y * width + x] = static_cast<std::size_t>(iy) * width + static_cast<std::size_t>(ix);
    }
  }
  return src;
}

Sample apply_transform(const Sample& sample, const AffineTransform& t) {
  sample.validate();
  const std::size_t h = sample.image.dim(0);
  const std::size_t w = sample.image.dim(1);
  const std::size_t channels = sample.image.dim(2);
  const auto src = source_indices(t, h, w);

  Sample out;
  out.id = sample.id;
  out.image = Tensor(sample.image.shape());
  for (std::size_t i = 0; i < src.size(); ++i) {
    std::copy_n(sample.image.raw() + src[i] * channels, channels, out.image.raw() + i * channels);
  }
  out.masks.wt = gather(sample.masks.wt, src);
  out.masks.tc = gather(sample.masks.tc, src);
  out.masks.et = gather(sample.masks.et, src);
  return out;
}

Sample augment_sample(const Sample& sample, const AugConfig& config, std::uint64_t index, std::uint64_t epoch) {
  Rng rng(derive_seed(config.seed, index, epoch));
  const auto t = sample_transform(config, rng, sample.image.dim(0), sample.image.dim(1));
  return apply_transform(sample, t);
}

}  // namespace segnet::augment
