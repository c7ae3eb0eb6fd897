#include "segnet/data.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "json.hpp"
#include "segnet/io.hpp"
#include "segnet/rng.hpp"

namespace segnet {

void Sample::validate() const {
  if (image.rank() != 3) throw ShapeError("sample " + id + ": image must be (H, W, C), got " + shape_to_string(image.shape()));
  for (Region r : kRegions) {
    const BinaryMask& m = masks[r];
    if (m.height() != image.dim(0) || m.width() != image.dim(1)) {
      throw ShapeError("sample " + id + ": " + region_name(r) + " mask does not match image " +
                       shape_to_string(image.shape()));
    }
  }
  if (!masks.nested()) throw ShapeError("sample " + id + ": masks violate ET ⊆ TC ⊆ WT");
  require_finite(image, "sample image");
}

namespace data {
namespace {

struct Ellipse {
  double cy, cx, ry, rx, angle;

  bool contains(double y, double x) const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double dy = y - cy, dx = x - cx;
    const double u = c * dx + s * dy;
    const double v = -s * dx + c * dy;
    return (u * u) / (rx * rx) + (v * v) / (ry * ry) <= 1.0;
  }
};

// Child ellipse: centre displaced within the parent's inner half, axes a
// random fraction of the parent's.
Ellipse nested_in(const Ellipse& parent, Rng& rng, double lo, double hi) {
  Ellipse e;
  const double r = 0.5 * (1.0 - hi) * rng.uniform();
  const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double c = std::cos(parent.angle), s = std::sin(parent.angle);
  const double u = r * parent.rx * std::cos(phi), v = r * parent.ry * std::sin(phi);
  e.cx = parent.cx + c * u - s * v;
  e.cy = parent.cy + s * u + c * v;
  e.rx = parent.rx * rng.uniform(lo, hi);
  e.ry = parent.ry * rng.uniform(lo, hi);
  e.angle = rng.uniform(0.0, std::numbers::pi);
  return e;
}

// Mean intensity per tissue class (background, brain, edema, necrotic core,
// enhancing) for channels loosely modelled on T1, T1Gd, T2 and FLAIR.
constexpr std::array<std::array<double, 4>, 5> kProfiles{{
    {0.00, 0.00, 0.00, 0.00},
    {0.60, 0.60, 0.45, 0.50},
    {0.50, 0.55, 0.90, 0.95},
    {0.30, 0.35, 0.80, 0.60},
    {0.55, 1.00, 0.70, 0.75},
}};

constexpr double kNoiseSigma = 0.05;

}  // namespace

std::string sample_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%05zu", index);
  return buf;
}

Sample generate_sample(std::size_t index, std::size_t size, std::uint64_t seed, std::size_t channels) {
  if (size == 0 || size % 32 != 0) throw ShapeError("sample size must be a positive multiple of 32");
  if (channels == 0) throw ShapeError("channel count must be positive");
  Rng rng(derive_seed(seed, index));
  const double S = static_cast<double>(size);

  Ellipse brain{S / 2 + rng.uniform(-0.04, 0.04) * S, S / 2 + rng.uniform(-0.04, 0.04) * S,
                rng.uniform(0.36, 0.44) * S, rng.uniform(0.30, 0.38) * S, rng.uniform(-0.3, 0.3)};
  // WT semi-axes are drawn in absolute terms so the tumour area stays in a
  // fixed band regardless of the brain shape.
  Ellipse wt = nested_in(brain, rng, 0.0, 0.5);
  wt.rx = rng.uniform(0.08, 0.19) * S;
  wt.ry = rng.uniform(0.08, 0.19) * S;
  const Ellipse tc = nested_in(wt, rng, 0.45, 0.75);
  const Ellipse et = nested_in(tc, rng, 0.45, 0.8);

  std::array<double, 4> gain{};
  for (std::size_t c = 0; c < 4; ++c) gain[c] = rng.uniform(0.9, 1.1);

  Sample sample;
  sample.id = sample_id(index);
  sample.image = Tensor({size, size, channels});
  sample.masks.wt = BinaryMask(size, size);
  sample.masks.tc = BinaryMask(size, size);
  sample.masks.et = BinaryMask(size, size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double py = static_cast<double>(y) + 0.5, px = static_cast<double>(x) + 0.5;
      const bool in_brain = brain.contains(py, px);
      const bool in_wt = in_brain && wt.contains(py, px);
      const bool in_tc = in_wt && tc.contains(py, px);
      const bool in_et = in_tc && et.contains(py, px);
      sample.masks.wt.set(y, x, in_wt);
      sample.masks.tc.set(y, x, in_tc);
      sample.masks.et.set(y, x, in_et);
      const std::size_t tissue = in_et ? 4 : in_tc ? 3 : in_wt ? 2 : in_brain ? 1 : 0;
      for (std::size_t c = 0; c < channels; ++c) {
        const double mean = kProfiles[tissue][c % 4] * gain[c % 4];
        sample.image.at(y, x, c) = static_cast<float>(mean + kNoiseSigma * rng.normal());
      }
    }
  }
  return sample;
}

Dataset generate_synthetic_dataset(std::size_t n, std::size_t size, std::uint64_t seed, std::size_t channels) {
  if (n == 0) throw ShapeError("dataset size must be at least 1");
  Dataset ds;
  ds.generator_seed = seed;
  ds.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) ds.samples.push_back(generate_sample(i, size, seed, channels));
  return ds;
}

std::vector<std::string> Dataset::ids() const {
  std::vector<std::string> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.id);
  return out;
}

std::size_t Dataset::index_of(const std::string& id) const {
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].id == id) return i;
  }
  throw std::out_of_range("no sample with id '" + id + "'");
}

void SplitRatios::validate() const {
  for (double r : {train, val, test}) {
    if (!(r >= 0.0 && r <= 1.0)) throw ShapeError("split ratios must lie in [0, 1]");
  }
  if (std::abs(train + val + test - 1.0) > 1e-9) throw ShapeError("split ratios must sum to 1");
}

const std::vector<std::string>& DatasetSplit::part(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw ShapeError("unknown split '" + name + "' (expected train, val or test)");
}

namespace {

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace

DatasetSplit split_dataset(const std::vector<std::string>& ids, const SplitRatios& ratios, std::uint64_t seed) {
  if (ids.empty()) throw ShapeError("cannot split an empty dataset");
  ratios.validate();
  const std::size_t n = ids.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(mix_seed(seed));
  shuffle(order, rng);

  // The small slack keeps exact products such as 0.7 * 100 from flooring to 69.
  const auto take = [n](double r) { return static_cast<std::size_t>(std::floor(r * static_cast<double>(n) + 1e-9)); };
  const std::size_t n_train = take(ratios.train);
  const std::size_t n_val = std::min(take(ratios.val), n - n_train);

  DatasetSplit split;
  split.split_seed = seed;
  for (std::size_t k = 0; k < n; ++k) {
    auto& dst = k < n_train ? split.train : (k < n_train + n_val ? split.val : split.test);
    dst.push_back(ids[order[k]]);
  }
  return split;
}

std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                    std::uint64_t epoch) {
  if (batch_size == 0) throw ShapeError("batch size must be at least 1");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, epoch, 0x62617463ULL));
  shuffle(order, rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

std::vector<std::vector<std::string>> batch_iter(const std::vector<std::string>& ids, std::size_t batch_size,
                                                 std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::vector<std::string>> out;
  for (const auto& batch : batch_indices(ids.size(), batch_size, seed, epoch)) {
    auto& dst = out.emplace_back();
    for (std::size_t i : batch) dst.push_back(ids[i]);
  }
  return out;
}

namespace {

constexpr const char* kManifestFormat = "segnet-dataset";
constexpr int kManifestVersion = 1;

}  // namespace

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  for (const auto& s : dataset.samples) s.validate();
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["format"] = kManifestFormat;
  manifest["version"] = kManifestVersion;
  manifest["generator_seed"] = dataset.generator_seed;
  manifest["count"] = dataset.samples.size();
  auto& entries = manifest["samples"] = nlohmann::ordered_json::array();
  for (const auto& s : dataset.samples) {
    const std::string image_file = s.id + "_image.sgt";
    const std::string mask_file = s.id + "_masks.sgt";
    io::write_tensor_file(dir / image_file, s.image);
    io::write_tensor_file(dir / mask_file, s.masks.to_tensor<std::uint8_t>());
    nlohmann::ordered_json e;
    e["id"] = s.id;
    e["image"] = image_file;
    e["masks"] = mask_file;
    entries.push_back(std::move(e));
  }
  io::write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) {
    throw io::FormatError(io::FormatErrorKind::Io, "no manifest.json in " + dir.string());
  }
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(io::read_file(manifest_path));
    if (manifest.at("format").get<std::string>() != kManifestFormat) {
      throw io::FormatError(io::FormatErrorKind::Malformed, "manifest format is not " + std::string(kManifestFormat));
    }
    if (manifest.at("version").get<int>() != kManifestVersion) {
      throw io::FormatError(io::FormatErrorKind::Malformed, "unsupported manifest version");
    }
  } catch (const nlohmann::json::exception& e) {
    throw io::FormatError(io::FormatErrorKind::Malformed, "bad manifest: " + std::string(e.what()));
  }
  Dataset ds;
  ds.generator_seed = manifest.value("generator_seed", std::uint64_t{0});
  for (const auto& e : manifest.at("samples")) {
    Sample s;
    s.id = e.at("id").get<std::string>();
    s.image = io::read_f32_file(dir / e.at("image").get<std::string>());
    s.masks = RegionMaskSet::from_tensor(io::read_u8_file(dir / e.at("masks").get<std::string>()));
    s.validate();
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.empty()) throw io::FormatError(io::FormatErrorKind::Malformed, "dataset has no samples");
  return ds;
}

}  // namespace data
}  // namespace segnet
