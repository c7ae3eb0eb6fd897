#include "segnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace segnet::metrics {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void require_same_shape(const BinaryMask& a, const BinaryMask& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": mask shapes differ (" + std::to_string(a.height()) + "x" +
                     std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                     std::to_string(b.width()) + ")");
  }
}

// 1-D squared distance transform of a sampled function f (kInf = no site),
// lower envelope of parabolas rooted at the finite samples.
void envelope_1d(const std::vector<double>& f, std::vector<double>& out, std::vector<std::size_t>& v,
                 std::vector<double>& z) {
  const std::size_t n = f.size();
  std::size_t k = 0;
  bool any = false;
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    if (!any) {
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      any = true;
      continue;
    }
    const double fq = f[q] + static_cast<double>(q * q);
    auto intersect = [&](std::size_t site) {
      const double vs = static_cast<double>(site);
      return (fq - (f[site] + vs * vs)) / (2.0 * static_cast<double>(q) - 2.0 * vs);
    };
    // z[0] is -inf, so the scan stops at k == 0 at the latest.
    double s = intersect(v[k]);
    while (s <= z[k]) s = intersect(v[--k]);
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  if (!any) {
    std::fill(out.begin(), out.end(), kInf);
    return;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double d = static_cast<double>(q) - static_cast<double>(v[k]);
    out[q] = d * d + f[v[k]];
  }
}

std::vector<double> directed_distances(const std::vector<Pixel>& from, const Tensor64& to_field) {
  std::vector<double> out;
  out.reserve(from.size());
  for (const Pixel& p : from) out.push_back(to_field[static_cast<std::size_t>(p.y) * to_field.dim(1) + static_cast<std::size_t>(p.x)]);
  return out;
}

}  // namespace

double dice(const BinaryMask& pred, const BinaryMask& truth) {
  require_same_shape(pred, truth, "dice");
  std::size_t inter = 0, p = 0, g = 0;
  const auto& pv = pred.values();
  const auto& gv = truth.values();
  for (std::size_t i = 0; i < pv.size(); ++i) {
    p += pv[i];
    g += gv[i];
    inter += pv[i] & gv[i];
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(p + g);
}

std::vector<Pixel> extract_boundary(const BinaryMask& mask) {
  std::vector<Pixel> out;
  const std::size_t h = mask.height();
  const std::size_t w = mask.width();
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (!mask.at(y, x)) continue;
      const bool border = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
      const bool exposed = border || !mask.at(y - 1, x) || !mask.at(y + 1, x) ||
                           !mask.at(y, x - 1) || !mask.at(y, x + 1);
      if (exposed) out.push_back({static_cast<std::int32_t>(y), static_cast<std::int32_t>(x)});
    }
  }
  return out;
}

Tensor64 squared_edt(std::span<const Pixel> points, std::size_t height, std::size_t width) {
  if (points.empty()) throw ShapeError("edt requires a nonempty point set");
  if (height == 0 || width == 0) throw ShapeError("edt grid must be nonempty");

  // Pass 1: per column, distance to the nearest site in that column.
  std::vector<double> column(height * width, kInf);
  for (const Pixel& p : points) {
    if (p.y < 0 || p.x < 0 || static_cast<std::size_t>(p.y) >= height || static_cast<std::size_t>(p.x) >= width) {
      throw ShapeError("edt point lies outside the grid");
    }
    column[static_cast<std::size_t>(p.y) * width + static_cast<std::size_t>(p.x)] = 0.0;
  }
  for (std::size_t x = 0; x < width; ++x) {
    double last = kInf;
    for (std::size_t y = 0; y < height; ++y) {
      double& cell = column[y * width + x];
      if (cell == 0.0) {
        last = static_cast<double>(y);
      } else if (last != kInf) {
        cell = static_cast<double>(y) - last;
      }
    }
    last = kInf;
    for (std::size_t y = height; y-- > 0;) {
      double& cell = column[y * width + x];
      if (cell == 0.0) {
        last = static_cast<double>(y);
      } else if (last != kInf) {
        cell = std::min(cell, last - static_cast<double>(y));
      }
    }
    for (std::size_t y = 0; y < height; ++y) {
      double& cell = column[y * width + x];
      if (cell != kInf) cell *= cell;
    }
  }

  // Pass 2: per row, lower envelope over the column results.
  Tensor64 out({height, width});
  std::vector<double> f(width), row(width), z(width + 1);
  std::vector<std::size_t> v(width);
  for (std::size_t y = 0; y < height; ++y) {
    std::copy(column.begin() + static_cast<std::ptrdiff_t>(y * width),
              column.begin() + static_cast<std::ptrdiff_t>((y + 1) * width), f.begin());
    envelope_1d(f, row, v, z);
    std::copy(row.begin(), row.end(), out.raw() + y * width);
  }
  return out;
}

Tensor64 edt(std::span<const Pixel> points, std::size_t height, std::size_t width) {
  Tensor64 out = squared_edt(points, height, width);
  for (auto& v : out.data()) v = std::sqrt(v);
  return out;
}

double nearest_rank_percentile(std::vector<double> values, int percent) {
  if (values.empty()) throw ShapeError("percentile of an empty set");
  if (percent < 0 || percent > 100) throw ShapeError("percentile must lie in [0, 100]");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  std::size_t rank = (static_cast<std::size_t>(percent) * n + 99) / 100;
  rank = std::clamp<std::size_t>(rank, 1, n);
  return values[rank - 1];
}

std::string to_string(Hd95Mode mode) {
  return mode == Hd95Mode::MaxOfDirected ? "max_of_directed" : "union_percentile";
}

Hd95Mode parse_hd95_mode(const std::string& text) {
  if (text == "max_of_directed") return Hd95Mode::MaxOfDirected;
  if (text == "union_percentile") return Hd95Mode::UnionPercentile;
  throw ShapeError("unknown hd95 mode '" + text + "'");
}

double hd95(const BinaryMask& pred, const BinaryMask& truth, Hd95Mode mode) {
  require_same_shape(pred, truth, "hd95");
  const auto pb = extract_boundary(pred);
  const auto gb = extract_boundary(truth);
  if (pb.empty() && gb.empty()) return 0.0;
  if (pb.empty() || gb.empty()) {
    const double h = static_cast<double>(pred.height());
    const double w = static_cast<double>(pred.width());
    return std::sqrt(h * h + w * w);
  }
  const Tensor64 to_truth = edt(gb, truth.height(), truth.width());
  const Tensor64 to_pred = edt(pb, pred.height(), pred.width());
  std::vector<double> forward = directed_distances(pb, to_truth);
  std::vector<double> reverse = directed_distances(gb, to_pred);
  if (mode == Hd95Mode::UnionPercentile) {
    forward.insert(forward.end(), reverse.begin(), reverse.end());
    return nearest_rank_percentile(std::move(forward), 95);
  }
  return std::max(nearest_rank_percentile(std::move(forward), 95),
                  nearest_rank_percentile(std::move(reverse), 95));
}

std::array<RegionScore, 3> evaluate_masks(const RegionMaskSet& pred, const RegionMaskSet& truth, Hd95Mode mode) {
  std::array<RegionScore, 3> scores;
  for (Region r : kRegions) {
    const BinaryMask& p = pred[r];
    const BinaryMask& g = truth[r];
    RegionScore& s = scores[static_cast<std::size_t>(r)];
    s.dsc = dice(p, g);
    s.hd95 = hd95(p, g, mode);
    const bool pe = p.empty();
    const bool ge = g.empty();
    s.degeneracy = pe && ge ? Degeneracy::BothEmpty
                 : pe       ? Degeneracy::PredEmpty
                 : ge       ? Degeneracy::TruthEmpty
                            : Degeneracy::None;
  }
  return scores;
}

std::array<RegionScore, 3> evaluate_regions(const Tensor& pred, const RegionMaskSet& truth, double threshold,
                                            Hd95Mode mode) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ShapeError("threshold must lie in (0, 1)");
  if (pred.rank() != 3 || pred.dim(2) != 3 || pred.dim(0) != truth.wt.height() ||
      pred.dim(1) != truth.wt.width()) {
    throw ShapeError("prediction shape " + shape_to_string(pred.shape()) + " does not match the masks");
  }
  RegionMaskSet binary;
  for (Region r : kRegions) binary[r] = BinaryMask::threshold(pred, static_cast<std::size_t>(r), threshold);
  return evaluate_masks(binary, truth, mode);
}

void MetricsReport::add(const std::string& sample_id, const std::array<RegionScore, 3>& scores) {
  for (Region r : kRegions) {
    const RegionScore& s = scores[static_cast<std::size_t>(r)];
    records_.push_back({sample_id, r, s.dsc, s.hd95});
    DegenerateCounts& d = degenerate_[static_cast<std::size_t>(r)];
    switch (s.degeneracy) {
      case Degeneracy::BothEmpty:
        ++d.both_empty;
        break;
      case Degeneracy::PredEmpty:
        ++d.pred_empty;
        break;
      case Degeneracy::TruthEmpty:
        ++d.truth_empty;
        break;
      case Degeneracy::None:
        break;
    }
  }
}

double MetricsReport::mean_dsc(Region region) const {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : records_) {
    if (r.region == region) sum += r.dsc, ++n;
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

double MetricsReport::mean_hd95(Region region) const {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : records_) {
    if (r.region == region) sum += r.hd95, ++n;
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

nlohmann::ordered_json MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["threshold"] = threshold_;
  j["hd95_mode"] = to_string(mode_);
  j["sample_count"] = sample_count();
  nlohmann::ordered_json mean;
  nlohmann::ordered_json degenerate;
  for (Region r : kRegions) {
    mean[region_name(r)] = {{"dsc", mean_dsc(r)}, {"hd95", mean_hd95(r)}};
    const auto& d = this->degenerate(r);
    degenerate[region_name(r)] = {
        {"both_empty", d.both_empty}, {"pred_empty", d.pred_empty}, {"truth_empty", d.truth_empty}};
  }
  j["mean"] = std::move(mean);
  j["degenerate"] = std::move(degenerate);
  nlohmann::ordered_json samples = nlohmann::ordered_json::array();
  for (const auto& r : records_) {
    samples.push_back({{"id", r.sample_id}, {"region", region_name(r.region)}, {"dsc", r.dsc}, {"hd95", r.hd95}});
  }
  j["samples"] = std::move(samples);
  return j;
}

std::string format_table(const std::vector<std::pair<std::string, const MetricsReport*>>& rows) {
  constexpr std::array<Region, 3> order{Region::ET, Region::WT, Region::TC};
  std::size_t name_width = 7;
  for (const auto& [name, report] : rows) name_width = std::max(name_width, name.size());

  char buf[64];
  std::string out;
  auto pad = [](std::string s, std::size_t w) {
    if (s.size() < w) s.append(w - s.size(), ' ');
    return s;
  };
  out += pad("Method", name_width) + " | " + pad("DSC", 26) + " | HD95\n";
  out += pad("", name_width) + " |";
  for (int group = 0; group < 2; ++group) {
    for (Region r : order) {
      std::snprintf(buf, sizeof buf, " %8s", region_name(r).c_str());
      out += buf;
    }
    out += group == 0 ? " |" : "\n";
  }
  out += std::string(name_width, '-') + "-+-" + std::string(26, '-') + "-+-" + std::string(27, '-') + "\n";
  for (const auto& [name, report] : rows) {
    out += pad(name, name_width) + " |";
    for (Region r : order) {
      std::snprintf(buf, sizeof buf, " %8.4f", report->mean_dsc(r));
      out += buf;
    }
    out += " |";
    for (Region r : order) {
      std::snprintf(buf, sizeof buf, " %8.3f", report->mean_hd95(r));
      out += buf;
    }
    out += "\n";
  }
  return out;
}

}  // namespace segnet::metrics
