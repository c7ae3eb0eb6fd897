#pragma once

#include <array>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "segnet/masks.hpp"
#include "segnet/tensor.hpp"

namespace segnet::metrics {

/// 2|P ∩ G| / (|P| + |G|); 1.0 when both masks are empty.
double dice(const BinaryMask& pred, const BinaryMask& truth);

/// Foreground pixels with a 4-connected background neighbour, plus foreground
/// pixels on the image border. Row-major order.
std::vector<Pixel> extract_boundary(const BinaryMask& mask);

/// Exact squared Euclidean distance from every cell of an H x W grid to the
/// nearest point, by two separable 1-D lower-envelope passes. Values are
/// integers stored as doubles.
Tensor64 squared_edt(std::span<const Pixel> points, std::size_t height, std::size_t width);

/// sqrt of squared_edt.
Tensor64 edt(std::span<const Pixel> points, std::size_t height, std::size_t width);

/// Nearest-rank percentile: the ceil(p/100 * n)-th smallest value (1-based).
double nearest_rank_percentile(std::vector<double> values, int percent);

enum class Hd95Mode {
  MaxOfDirected,    // max(P95(d(P→G)), P95(d(G→P)))
  UnionPercentile,  // P95 of both directed sets pooled together
};

std::string to_string(Hd95Mode mode);
Hd95Mode parse_hd95_mode(const std::string& text);

/// 95th-percentile boundary distance in pixels. Both empty: 0. Exactly one
/// empty: the image diagonal sqrt(H^2 + W^2).
double hd95(const BinaryMask& pred, const BinaryMask& truth, Hd95Mode mode = Hd95Mode::MaxOfDirected);

enum class Degeneracy { None, BothEmpty, PredEmpty, TruthEmpty };

struct RegionScore {
  double dsc = 0.0;
  double hd95 = 0.0;
  Degeneracy degeneracy = Degeneracy::None;
};

/// Scores channel c of `pred` (thresholded at `threshold`) against region c
/// of `truth`, in WT, TC, ET order.
std::array<RegionScore, 3> evaluate_regions(const Tensor& pred, const RegionMaskSet& truth,
                                            double threshold = 0.5,
                                            Hd95Mode mode = Hd95Mode::MaxOfDirected);

std::array<RegionScore, 3> evaluate_masks(const RegionMaskSet& pred, const RegionMaskSet& truth,
                                          Hd95Mode mode = Hd95Mode::MaxOfDirected);

struct SampleScore {
  std::string sample_id;
  Region region = Region::WT;
  double dsc = 0.0;
  double hd95 = 0.0;
};

struct DegenerateCounts {
  std::size_t both_empty = 0;
  std::size_t pred_empty = 0;
  std::size_t truth_empty = 0;
};

/// Per-sample and per-region aggregated scores.
class MetricsReport {
 public:
  explicit MetricsReport(double threshold = 0.5, Hd95Mode mode = Hd95Mode::MaxOfDirected)
      : threshold_(threshold), mode_(mode) {}

  void add(const std::string& sample_id, const std::array<RegionScore, 3>& scores);

  const std::vector<SampleScore>& records() const noexcept { return records_; }
  std::size_t sample_count() const noexcept { return records_.size() / 3; }
  double mean_dsc(Region region) const;
  double mean_hd95(Region region) const;
  const DegenerateCounts& degenerate(Region region) const {
    return degenerate_[static_cast<std::size_t>(region)];
  }
  double threshold() const noexcept { return threshold_; }
  Hd95Mode mode() const noexcept { return mode_; }

  nlohmann::ordered_json to_json() const;

 private:
  double threshold_;
  Hd95Mode mode_;
  std::vector<SampleScore> records_;
  std::array<DegenerateCounts, 3> degenerate_{};
};

/// Aligned text table: one row per method, DSC and HD95 column groups, each
/// split into ET, WT, TC.
std::string format_table(const std::vector<std::pair<std::string, const MetricsReport*>>& rows);

}  // namespace segnet::metrics
