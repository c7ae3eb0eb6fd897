#include "segnet/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "segnet/rng.hpp"

namespace segnet::io {
namespace {

constexpr std::string_view kTensorMagic = "SGT1";
constexpr std::string_view kContainerMagic = "SGC1";

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

class Reader {
 public:
  Reader(std::string_view bytes, std::size_t& offset) : bytes_(bytes), offset_(offset) {}

  std::string_view take(std::size_t n, const char* what) {
    if (bytes_.size() - offset_ < n) {
      throw FormatError(FormatErrorKind::Truncated, std::string("truncated ") + what + ": need " +
                                                        std::to_string(n) + " bytes, " +
                                                        std::to_string(bytes_.size() - offset_) + " left");
    }
    auto out = bytes_.substr(offset_, n);
    offset_ += n;
    return out;
  }

  std::uint32_t u32(const char* what) {
    auto b = take(4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[static_cast<std::size_t>(i)]);
    return v;
  }

  std::uint64_t u64(const char* what) {
    auto b = take(8, what);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[static_cast<std::size_t>(i)]);
    return v;
  }

 private:
  std::string_view bytes_;
  std::size_t& offset_;
};

}  // namespace

std::string encode_tensor(const AnyTensor& any) {
  std::string out(kTensorMagic);
  std::visit(
      [&](const auto& t) {
        using T = typename std::decay_t<decltype(t)>::value_type;
        if constexpr (std::is_same_v<T, float>) {
          require_finite(t, "write_tensor_file");
          put_u32(out, static_cast<std::uint32_t>(Dtype::F32));
        } else {
          put_u32(out, static_cast<std::uint32_t>(Dtype::U8));
        }
        if (t.empty()) throw ShapeError("cannot encode an empty tensor");
        put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t e : t.shape()) {
          if (e > UINT32_MAX) throw ShapeError("tensor extent exceeds u32");
          put_u32(out, static_cast<std::uint32_t>(e));
        }
        if constexpr (std::is_same_v<T, float>) {
          out.reserve(out.size() + 4 * t.size());
          for (float v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
        } else {
          out.append(reinterpret_cast<const char*>(t.raw()), t.size());
        }
      },
      any);
  return out;
}

AnyTensor decode_tensor(std::string_view bytes, std::size_t& offset) {
  Reader r(bytes, offset);
  auto magic = r.take(4, "tensor magic");
  if (magic != kTensorMagic) {
    throw FormatError(FormatErrorKind::BadMagic, "bad tensor magic '" + std::string(magic) + "'");
  }
  const std::uint32_t dtype = r.u32("tensor dtype");
  if (dtype != static_cast<std::uint32_t>(Dtype::F32) && dtype != static_cast<std::uint32_t>(Dtype::U8)) {
    throw FormatError(FormatErrorKind::UnknownDtype, "unknown tensor dtype code " + std::to_string(dtype));
  }
  const std::uint32_t ndim = r.u32("tensor rank");
  if (ndim == 0) throw FormatError(FormatErrorKind::Malformed, "tensor rank must be positive");
  Shape shape;
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < ndim; ++i) {
    const std::uint32_t e = r.u32("tensor extent");
    if (e == 0) throw FormatError(FormatErrorKind::Malformed, "tensor extents must be positive");
    shape.push_back(e);
    if (count > (std::size_t{1} << 40) / e) throw FormatError(FormatErrorKind::Malformed, "tensor too large");
    count *= e;
  }
  if (dtype == static_cast<std::uint32_t>(Dtype::F32)) {
    auto payload = r.take(4 * count, "tensor payload");
    std::vector<float> data(count);
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t v = 0;
      for (int b = 3; b >= 0; --b) v = (v << 8) | static_cast<unsigned char>(payload[4 * i + static_cast<std::size_t>(b)]);
      data[i] = std::bit_cast<float>(v);
    }
    return Tensor(std::move(shape), std::move(data));
  }
  auto payload = r.take(count, "tensor payload");
  std::vector<std::uint8_t> data(payload.begin(), payload.end());
  return ByteTensor(std::move(shape), std::move(data));
}

AnyTensor decode_tensor(std::string_view bytes) {
  std::size_t offset = 0;
  AnyTensor t = decode_tensor(bytes, offset);
  if (offset != bytes.size()) {
    throw FormatError(FormatErrorKind::Malformed, std::to_string(bytes.size() - offset) + " trailing bytes after tensor");
  }
  return t;
}

std::string encode_container(const Entries& entries) {
  std::string out(kContainerMagic);
  put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, tensor] : entries) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    out += encode_tensor(tensor);
  }
  put_u64(out, fnv1a(out));
  return out;
}

Entries decode_container(std::string_view bytes) {
  std::size_t offset = 0;
  Reader r(bytes, offset);
  auto magic = r.take(4, "checkpoint magic");
  if (magic != kContainerMagic) {
    throw FormatError(FormatErrorKind::BadMagic, "bad checkpoint magic '" + std::string(magic) + "'");
  }
  const std::uint32_t count = r.u32("entry count");
  Entries entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = r.u32("entry name length");
    std::string name(r.take(len, "entry name"));
    AnyTensor t = decode_tensor(bytes, offset);
    if (!entries.emplace(std::move(name), std::move(t)).second) {
      throw FormatError(FormatErrorKind::Malformed, "duplicate checkpoint entry");
    }
  }
  const std::size_t body = offset;
  const std::uint64_t stored = r.u64("checksum");
  if (offset != bytes.size()) {
    throw FormatError(FormatErrorKind::Malformed, "trailing bytes after checkpoint checksum");
  }
  if (stored != fnv1a(bytes.substr(0, body))) {
    throw FormatError(FormatErrorKind::BadChecksum, "checkpoint checksum mismatch");
  }
  return entries;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::Io, "cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(FormatErrorKind::Io, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError(FormatErrorKind::Io, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_tensor_file(const std::filesystem::path& path, const AnyTensor& tensor) {
  write_file(path, encode_tensor(tensor));
}

AnyTensor read_tensor_file(const std::filesystem::path& path) { return decode_tensor(read_file(path)); }

Tensor read_f32_file(const std::filesystem::path& path) {
  AnyTensor t = read_tensor_file(path);
  if (auto* f = std::get_if<Tensor>(&t)) return std::move(*f);
  throw FormatError(FormatErrorKind::Malformed, path.string() + " holds u8 data, expected f32");
}

ByteTensor read_u8_file(const std::filesystem::path& path) {
  AnyTensor t = read_tensor_file(path);
  if (auto* b = std::get_if<ByteTensor>(&t)) return std::move(*b);
  throw FormatError(FormatErrorKind::Malformed, path.string() + " holds f32 data, expected u8");
}

void write_container_file(const std::filesystem::path& path, const Entries& entries) {
  write_file(path, encode_container(entries));
}

Entries read_container_file(const std::filesystem::path& path) { return decode_container(read_file(path)); }

}  // namespace segnet::io
