#pragma once

#include <string>

#include "segnet/masks.hpp"
#include "segnet/tensor.hpp"

namespace segnet {

/// One multi-modal (S, S, C) image with its WT/TC/ET masks.
struct Sample {
  std::string id;
  Tensor image;
  RegionMaskSet masks;

  /// Throws ShapeError unless the image is (H, W, C) matching the masks and
  /// the masks are nested.
  void validate() const;

  friend bool operator==(const Sample&, const Sample&) = default;
};

}  // namespace segnet
