#pragma once

// TensorFile: "MMRT" magic, u32 LE version, u8 dtype (0 = f32), u8 ndim,
// ndim x u64 LE dims, then the row-major f32 LE payload. Nothing may follow.

#include <filesystem>
#include <string>
#include <string_view>

#include "mmr/tensor.hpp"

namespace mmr {

inline constexpr char kTensorMagic[4] = {'M', 'M', 'R', 'T'};
inline constexpr std::uint32_t kTensorFormatVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;

std::string encode_tensor(const Tensorf& t);
Tensorf decode_tensor(std::string_view bytes);

Tensorf read_tensor_file(const std::filesystem::path& path);
/// Writes through a temporary sibling and renames, so readers never see a partial file.
void write_tensor_file(const std::filesystem::path& path, const Tensorf& t);

/// Writes `<path>.partial`, then renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace mmr
