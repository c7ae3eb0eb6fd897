#pragma once

#include <cstdint>

#include "segnet/rng.hpp"
#include "segnet/sample.hpp"

namespace segnet::augment {

/// Magnitude bounds for random geometric augmentation.
struct AugConfig {
  double rotation_deg = 25.0;  // rotation drawn from [-r, r]
  double shift_frac = 0.20;    // shifts drawn from [-f, f] * extent, per axis
  double zoom_frac = 0.20;     // zoom drawn from [1 - z, 1 + z]
  double hflip_prob = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
  static AugConfig identity();

  friend bool operator==(const AugConfig&, const AugConfig&) = default;
};

/// zoom ∘ rotation about the image centre ∘ shift, then an optional
/// horizontal flip. Shifts are in pixels (x to the right, y down); positive
/// rotation turns +x towards +y.
struct AffineTransform {
  double rotation_deg = 0.0;
  double shift_x = 0.0;
  double shift_y = 0.0;
  double zoom = 1.0;
  bool hflip = false;

  friend bool operator==(const AffineTransform&, const AffineTransform&) = default;
};

/// Draws in a fixed order: rotation, shift x, shift y, zoom, flip. Shift
/// bounds are relative to `height` x `width`.
AffineTransform sample_transform(const AugConfig& config, Rng& rng, std::size_t height, std::size_t width);

/// For every output pixel, the flat source index under the inverse map, with
/// nearest-neighbour rounding and edge replication.
std::vector<std::size_t> source_indices(const AffineTransform& t, std::size_t height, std::size_t width);

/// Resamples image and masks with one shared index map, so masks stay binary
/// and nesting is preserved.
Sample apply_transform(const Sample& sample, const AffineTransform& t);

/// Augments sample `index` of `epoch` from its own derived stream.
Sample augment_sample(const Sample& sample, const AugConfig& config, std::uint64_t index, std::uint64_t epoch);

}  // namespace segnet::augment
