#include "segnet/masks.hpp"

#include <algorithm>

namespace segnet {

std::string region_name(Region region) {
  switch (region) {
    case Region::WT:
      return "WT";
    case Region::TC:
      return "TC";
    case Region::ET:
      return "ET";
  }
  return "?";
}

BinaryMask::BinaryMask(std::size_t height, std::size_t width)
    : height_(height), width_(width), values_(height * width, 0) {}

BinaryMask::BinaryMask(std::size_t height, std::size_t width, std::vector<std::uint8_t> values)
    : height_(height), width_(width), values_(std::move(values)) {
  if (values_.size() != height_ * width_) throw ShapeError("mask data does not match its extent");
  for (auto v : values_) {
    if (v > 1) throw ShapeError("mask values must be 0 or 1");
  }
}

template <typename T>
BinaryMask BinaryMask::threshold(const BasicTensor<T>& maps, std::size_t channel, double threshold) {
  if (maps.rank() != 3 || channel >= maps.dim(2)) {
    throw ShapeError("cannot threshold channel " + std::to_string(channel) + " of " +
                     shape_to_string(maps.shape()));
  }
  BinaryMask mask(maps.dim(0), maps.dim(1));
  for (std::size_t y = 0; y < mask.height_; ++y) {
    for (std::size_t x = 0; x < mask.width_; ++x) {
      mask.set(y, x, static_cast<double>(maps.at(y, x, channel)) > threshold);
    }
  }
  return mask;
}

template BinaryMask BinaryMask::threshold(const BasicTensor<float>&, std::size_t, double);
template BinaryMask BinaryMask::threshold(const BasicTensor<double>&, std::size_t, double);
template BinaryMask BinaryMask::threshold(const BasicTensor<std::uint8_t>&, std::size_t, double);

std::size_t BinaryMask::count() const noexcept {
  return static_cast<std::size_t>(std::count(values_.begin(), values_.end(), std::uint8_t{1}));
}

bool BinaryMask::subset_of(const BinaryMask& outer) const {
  if (!same_shape(outer)) throw ShapeError("mask shapes differ");
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (values_[i] && !outer.values_[i]) return false;
  }
  return true;
}

const BinaryMask& RegionMaskSet::operator[](Region r) const {
  return r == Region::WT ? wt : (r == Region::TC ? tc : et);
}

BinaryMask& RegionMaskSet::operator[](Region r) {
  return r == Region::WT ? wt : (r == Region::TC ? tc : et);
}

template <typename T>
BasicTensor<T> RegionMaskSet::to_tensor() const {
  if (!wt.same_shape(tc) || !wt.same_shape(et)) throw ShapeError("region masks differ in shape");
  BasicTensor<T> out({wt.height(), wt.width(), 3});
  for (std::size_t y = 0; y < wt.height(); ++y) {
    for (std::size_t x = 0; x < wt.width(); ++x) {
      out.at(y, x, 0) = static_cast<T>(wt.at(y, x));
      out.at(y, x, 1) = static_cast<T>(tc.at(y, x));
      out.at(y, x, 2) = static_cast<T>(et.at(y, x));
    }
  }
  return out;
}

template Tensor RegionMaskSet::to_tensor<float>() const;
template Tensor64 RegionMaskSet::to_tensor<double>() const;
template ByteTensor RegionMaskSet::to_tensor<std::uint8_t>() const;

RegionMaskSet RegionMaskSet::from_tensor(const ByteTensor& masks) {
  if (masks.rank() != 3 || masks.dim(2) != 3) {
    throw ShapeError("region mask tensor must be (H, W, 3), got " + shape_to_string(masks.shape()));
  }
  for (auto v : masks.data()) {
    if (v > 1) throw ShapeError("region mask tensor must be binary");
  }
  RegionMaskSet set;
  set.wt = BinaryMask::threshold(masks, 0, 0.5);
  set.tc = BinaryMask::threshold(masks, 1, 0.5);
  set.et = BinaryMask::threshold(masks, 2, 0.5);
  return set;
}

}  // namespace segnet
