#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>

#include "segnet/tensor.hpp"

// Binary containers.
//
// Tensor record ("SGT1"):
//   magic "SGT1" | u32 dtype (0 = f32, 1 = u8) | u32 ndim | ndim x u32 extent |
//   row-major payload
// Checkpoint ("SGC1"):
//   magic "SGC1" | u32 entry count | per entry: u32 name length, UTF-8 name,
//   tensor record | u64 FNV-1a of every preceding byte
// All integers and floats are little-endian.
namespace segnet::io {

enum class FormatErrorKind { BadMagic, Truncated, UnknownDtype, BadChecksum, Malformed, Io };

class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  FormatErrorKind kind() const noexcept { return kind_; }

 private:
  FormatErrorKind kind_;
};

enum class Dtype : std::uint32_t { F32 = 0, U8 = 1 };

using AnyTensor = std::variant<Tensor, ByteTensor>;
using Entries = std::map<std::string, AnyTensor>;

std::string encode_tensor(const AnyTensor& tensor);

/// Parses one record starting at `offset`; advances `offset` past it.
AnyTensor decode_tensor(std::string_view bytes, std::size_t& offset);

/// Whole-buffer parse; trailing bytes are an error.
AnyTensor decode_tensor(std::string_view bytes);

std::string encode_container(const Entries& entries);
Entries decode_container(std::string_view bytes);

std::string read_file(const std::filesystem::path& path);
/// Writes through a temporary sibling and renames, so readers never observe
/// a partial file.
void write_file(const std::filesystem::path& path, std::string_view bytes);

void write_tensor_file(const std::filesystem::path& path, const AnyTensor& tensor);
AnyTensor read_tensor_file(const std::filesystem::path& path);
Tensor read_f32_file(const std::filesystem::path& path);
ByteTensor read_u8_file(const std::filesystem::path& path);

void write_container_file(const std::filesystem::path& path, const Entries& entries);
Entries read_container_file(const std::filesystem::path& path);

}  // namespace segnet::io
