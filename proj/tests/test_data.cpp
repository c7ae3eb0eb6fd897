#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "segnet/data.hpp"
#include "segnet/io.hpp"
#include "test_util.hpp"

namespace segnet {
namespace {

namespace fs = std::filesystem;
using testing::random_tensor;

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("segnet_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>(v >> (8 * i)));
}

// --- tensor records -----------------------------------------------------------

TEST(TensorFile, RoundTripBitwise) {
  Rng rng(1);
  const auto dir = scratch("tf");
  const auto t = random_tensor<float>({7, 5, 3}, rng);
  io::write_tensor_file(dir / "t.sgt", t);
  EXPECT_TRUE(bitwise_equal(io::read_f32_file(dir / "t.sgt"), t));
  for (const Shape& shape : {Shape{1}, Shape{4, 3}, Shape{2, 3, 4}, Shape{2, 1, 3, 2}}) {
    const auto f = random_tensor<float>(shape, rng, -1e30, 1e30);
    const auto b = random_tensor<float>(shape, rng, 0, 255).cast<std::uint8_t>();
    EXPECT_TRUE(bitwise_equal(std::get<Tensor>(io::decode_tensor(io::encode_tensor(f))), f));
    EXPECT_TRUE(bitwise_equal(std::get<ByteTensor>(io::decode_tensor(io::encode_tensor(b))), b));
  }
  const Tensor neg_zero({1}, -0.0f);
  EXPECT_TRUE(bitwise_equal(std::get<Tensor>(io::decode_tensor(io::encode_tensor(neg_zero))), neg_zero));
  fs::remove_all(dir);
}

TEST(TensorFile, LayoutIsLittleEndian) {
  const std::string bytes = io::encode_tensor(Tensor({2}, std::vector<float>{1.0f, -2.0f}));
  std::string want = "SGT1";
  put_u32(want, 0);
  put_u32(want, 1);
  put_u32(want, 2);
  want += std::string("\x00\x00\x80\x3f\x00\x00\x00\xc0", 8);
  EXPECT_EQ(bytes, want);
}

TEST(TensorFile, Errors) {
  auto kind_of = [](const std::string& bytes) {
    try {
      io::decode_tensor(bytes);
    } catch (const io::FormatError& e) {
      return e.kind();
    }
    return io::FormatErrorKind::Io;
  };
  std::string good = io::encode_tensor(ByteTensor({4, 4}));
  std::string bad_magic = good;
  bad_magic.replace(0, 4, "XXXX");
  EXPECT_EQ(kind_of(bad_magic), io::FormatErrorKind::BadMagic);
  EXPECT_EQ(kind_of(good.substr(0, good.size() - 1)), io::FormatErrorKind::Truncated);  // 15-byte payload
  EXPECT_EQ(kind_of(good.substr(0, 6)), io::FormatErrorKind::Truncated);
  std::string dtype = good;
  dtype[4] = 7;
  EXPECT_EQ(kind_of(dtype), io::FormatErrorKind::UnknownDtype);
  EXPECT_EQ(kind_of(good + "z"), io::FormatErrorKind::Malformed);
  EXPECT_THROW(io::encode_tensor(Tensor({1}, std::numeric_limits<float>::quiet_NaN())), NonFiniteError);
  EXPECT_THROW(io::read_tensor_file("/nonexistent/x.sgt"), io::FormatError);
}

// --- checkpoint container -----------------------------------------------------

TEST(Container, RoundTripAndChecksum) {
  Rng rng(2);
  io::Entries e;
  e.emplace("a.kernel", random_tensor<float>({3, 3, 2, 4}, rng));
  e.emplace("a.bias", random_tensor<float>({4}, rng));
  e.emplace("meta.json", ByteTensor({3}, std::vector<std::uint8_t>{'{', '}', '\n'}));
  const std::string bytes = io::encode_container(e);
  EXPECT_EQ(bytes.substr(0, 4), "SGC1");
  const auto back = io::decode_container(bytes);
  ASSERT_EQ(back.size(), 3u);
  EXPECT_TRUE(bitwise_equal(std::get<Tensor>(back.at("a.kernel")), std::get<Tensor>(e.at("a.kernel"))));
  EXPECT_EQ(io::encode_container(back), bytes);

  for (std::size_t pos : {8ul, 20ul, bytes.size() / 2, bytes.size() - 9}) {
    std::string flipped = bytes;
    flipped[pos] ^= 0x01;
    EXPECT_THROW(io::decode_container(flipped), io::FormatError) << pos;
  }
  std::string sum_only = bytes;
  sum_only.back() ^= 0x40;
  try {
    io::decode_container(sum_only);
    FAIL();
  } catch (const io::FormatError& err) {
    EXPECT_EQ(err.kind(), io::FormatErrorKind::BadChecksum);
  }
  try {
    io::decode_container(bytes.substr(0, bytes.size() - 3));
    FAIL();
  } catch (const io::FormatError& err) {
    EXPECT_EQ(err.kind(), io::FormatErrorKind::Truncated);
  }
  std::string magic = bytes;
  magic[3] = '2';
  try {
    io::decode_container(magic);
    FAIL();
  } catch (const io::FormatError& err) {
    EXPECT_EQ(err.kind(), io::FormatErrorKind::BadMagic);
  }
}

TEST(Container, ChecksumIsFnv1aOfPrefix) {
  io::Entries e;
  e.emplace("x", Tensor({1}, 3.0f));
  const std::string bytes = io::encode_container(e);
  const std::string body = bytes.substr(0, bytes.size() - 8);
  // Independent FNV-1a 64.
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : body) h = (h ^ c) * 1099511628211ULL;
  std::uint64_t stored = 0;
  for (int i = 7; i >= 0; --i) stored = (stored << 8) | static_cast<unsigned char>(bytes[body.size() + i]);
  EXPECT_EQ(stored, h);
}

// --- synthetic data -----------------------------------------------------------

TEST(Synthetic, NestedAndBinary) {
  for (std::size_t i = 0; i < 1000; ++i) {
    const auto s = data::generate_sample(i, 32, 17);
    ASSERT_TRUE(s.masks.nested()) << i;
    ASSERT_FALSE(s.masks.wt.empty());
    ASSERT_EQ(s.image.shape(), (Shape{32, 32, 4}));
  }
}

TEST(Synthetic, Deterministic) {
  const auto a = data::generate_synthetic_dataset(5, 64, 3), b = data::generate_synthetic_dataset(5, 64, 3);
  ASSERT_EQ(a.samples.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_TRUE(bitwise_equal(a.samples[i].image, b.samples[i].image));
    EXPECT_EQ(a.samples[i].masks, b.samples[i].masks);
  }
  EXPECT_FALSE(a.samples[0] == data::generate_sample(0, 64, 4));
  EXPECT_EQ(a.samples[3], data::generate_sample(3, 64, 3));
}

TEST(Synthetic, WholeTumourAreaBand) {
  const auto ds = data::generate_synthetic_dataset(200, 64, 11);
  double mean = 0.0;
  for (const auto& s : ds.samples) mean += static_cast<double>(s.masks.wt.count()) / (64.0 * 64.0);
  mean /= 200.0;
  EXPECT_GE(mean, 0.02);
  EXPECT_LE(mean, 0.25);
}

TEST(Synthetic, ModalitiesDiffer) {
  const auto s = data::generate_sample(0, 64, 1);
  // Enhancing tumour is brightest in channel 1 (post-contrast) relative to channel 0.
  double c0 = 0, c1 = 0;
  std::size_t n = 0;
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x)
      if (s.masks.et.at(y, x)) c0 += s.image.at(y, x, 0), c1 += s.image.at(y, x, 1), ++n;
  ASSERT_GT(n, 0u);
  EXPECT_GT(c1 / n, c0 / n + 0.2);
}

TEST(Synthetic, Errors) {
  EXPECT_THROW(data::generate_synthetic_dataset(0, 64, 1), ShapeError);
  EXPECT_THROW(data::generate_synthetic_dataset(2, 48, 1), ShapeError);
}

// --- split and batches --------------------------------------------------------

std::vector<std::string> ids(std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(data::sample_id(i));
  return out;
}

TEST(Split, Sizes) {
  const auto s100 = data::split_dataset(ids(100), {}, 1);
  EXPECT_EQ(s100.train.size(), 70u);
  EXPECT_EQ(s100.val.size(), 15u);
  EXPECT_EQ(s100.test.size(), 15u);
  const auto s10 = data::split_dataset(ids(10), {}, 1);
  EXPECT_EQ(s10.train.size(), 7u);
  EXPECT_EQ(s10.val.size(), 1u);
  EXPECT_EQ(s10.test.size(), 2u);
  const auto s64 = data::split_dataset(ids(64), {}, 1);
  EXPECT_EQ(s64.train.size(), 44u);
  EXPECT_EQ(s64.val.size(), 9u);
  EXPECT_EQ(s64.test.size(), 11u);
}

TEST(Split, PartitionAndDeterminism) {
  const auto all = ids(37);
  const auto a = data::split_dataset(all, {}, 5), b = data::split_dataset(all, {}, 5);
  EXPECT_EQ(a, b);
  EXPECT_NE(a.train, data::split_dataset(all, {}, 6).train);
  std::multiset<std::string> seen;
  for (const auto* part : {&a.train, &a.val, &a.test}) seen.insert(part->begin(), part->end());
  EXPECT_EQ(seen, std::multiset<std::string>(all.begin(), all.end()));
}

TEST(Split, Errors) {
  EXPECT_THROW(data::split_dataset({}, {}, 1), ShapeError);
  EXPECT_THROW(data::split_dataset(ids(3), {0.5, 0.5, 0.5}, 1), ShapeError);
}

TEST(Batches, SizesOrderAndPartition) {
  const auto all = ids(10);
  const auto e0 = data::batch_iter(all, 4, 3, 0);
  ASSERT_EQ(e0.size(), 3u);
  EXPECT_EQ(e0[0].size(), 4u);
  EXPECT_EQ(e0[1].size(), 4u);
  EXPECT_EQ(e0[2].size(), 2u);
  EXPECT_EQ(e0, data::batch_iter(all, 4, 3, 0));
  EXPECT_NE(e0, data::batch_iter(all, 4, 3, 1));
  std::multiset<std::string> seen;
  for (const auto& b : e0) seen.insert(b.begin(), b.end());
  EXPECT_EQ(seen, std::multiset<std::string>(all.begin(), all.end()));
  EXPECT_THROW(data::batch_iter(all, 0, 3, 0), ShapeError);
}

// --- dataset directory --------------------------------------------------------

TEST(DatasetDir, SaveLoadRoundTrip) {
  const auto dir = scratch("ds");
  const auto ds = data::generate_synthetic_dataset(3, 32, 9);
  data::save_dataset(ds, dir);
  EXPECT_TRUE(fs::exists(dir / "manifest.json"));
  EXPECT_TRUE(fs::exists(dir / "s00001_image.sgt"));
  EXPECT_TRUE(fs::exists(dir / "s00001_masks.sgt"));
  const auto back = data::load_dataset(dir);
  EXPECT_EQ(back.generator_seed, 9u);
  ASSERT_EQ(back.samples.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_TRUE(bitwise_equal(back.samples[i].image, ds.samples[i].image));
    EXPECT_EQ(back.samples[i].masks, ds.samples[i].masks);
  }
  const std::string manifest = io::read_file(dir / "manifest.json");
  data::save_dataset(back, dir);
  EXPECT_EQ(io::read_file(dir / "manifest.json"), manifest);
  EXPECT_LT(manifest.find("\"format\""), manifest.find("\"samples\""));
  fs::remove_all(dir);
}

TEST(DatasetDir, MissingManifest) {
  const auto dir = scratch("empty");
  EXPECT_THROW(data::load_dataset(dir), io::FormatError);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace segnet
