#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "segnet/tensor.hpp"

namespace segnet {

/// The three nested evaluation regions. Channel order in predictions and
/// mask tensors is WT, TC, ET.
enum class Region { WT = 0, TC = 1, ET = 2 };

inline constexpr std::array<Region, 3> kRegions{Region::WT, Region::TC, Region::ET};

std::string region_name(Region region);

struct Pixel {
  std::int32_t y = 0;
  std::int32_t x = 0;
  friend auto operator<=>(const Pixel&, const Pixel&) = default;
};

/// 2-D mask with values in {0, 1}.
class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(std::size_t height, std::size_t width);
  BinaryMask(std::size_t height, std::size_t width, std::vector<std::uint8_t> values);

  /// Foreground where `channel` of an (H, W, C) tensor exceeds `threshold`.
  template <typename T>
  static BinaryMask threshold(const BasicTensor<T>& maps, std::size_t channel, double threshold);

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t size() const noexcept { return values_.size(); }

  bool at(std::size_t y, std::size_t x) const noexcept { return values_[y * width_ + x] != 0; }
  void set(std::size_t y, std::size_t x, bool on) noexcept { values_[y * width_ + x] = on ? 1 : 0; }

  std::size_t count() const noexcept;
  bool empty() const noexcept { return count() == 0; }
  bool same_shape(const BinaryMask& other) const noexcept {
    return height_ == other.height_ && width_ == other.width_;
  }
  /// Pixelwise implication: every foreground pixel of *this is set in `outer`.
  bool subset_of(const BinaryMask& outer) const;

  const std::vector<std::uint8_t>& values() const noexcept { return values_; }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<std::uint8_t> values_;
};

/// WT, TC and ET masks with ET ⊆ TC ⊆ WT.
struct RegionMaskSet {
  BinaryMask wt;
  BinaryMask tc;
  BinaryMask et;

  const BinaryMask& operator[](Region r) const;
  BinaryMask& operator[](Region r);

  bool nested() const { return et.subset_of(tc) && tc.subset_of(wt); }

  /// Packs to an (H, W, 3) tensor in WT, TC, ET channel order.
  template <typename T>
  BasicTensor<T> to_tensor() const;

  static RegionMaskSet from_tensor(const ByteTensor& masks);

  friend bool operator==(const RegionMaskSet&, const RegionMaskSet&) = default;
};

}  // namespace segnet
