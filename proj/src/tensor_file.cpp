#include "mmr/tensor_file.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace mmr {
namespace {

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(char((v >> (8 * i)) & 0xFF));
}

template <class U>
U get_le(std::string_view in, std::size_t off) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= U(std::uint8_t(in[off + i])) << (8 * i);
  return v;
}

void need(std::string_view in, std::size_t off, std::size_t n, const char* what) {
  if (in.size() < off + n) throw FormatError(std::string("truncated ") + what, in.size());
}

}  // namespace

std::string encode_tensor(const Tensorf& t) {
  if (t.rank() > 255) throw ShapeError("tensor rank exceeds 255");
  std::string out(kTensorMagic, 4);
  put_le<std::uint32_t>(out, kTensorFormatVersion);
  out.push_back(char(kDtypeF32));
  out.push_back(char(t.rank()));
  for (std::size_t d : t.dims()) put_le<std::uint64_t>(out, d);
  out.reserve(out.size() + 4 * t.size());
  for (float v : t.data()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

Tensorf decode_tensor(std::string_view in) {
  need(in, 0, 4, "magic");
  if (std::memcmp(in.data(), kTensorMagic, 4) != 0) throw FormatError("bad magic", 0);
  need(in, 4, 4, "version");
  if (get_le<std::uint32_t>(in, 4) != kTensorFormatVersion) throw FormatError("unsupported format version", 4);
  need(in, 8, 2, "header");
  if (std::uint8_t(in[8]) != kDtypeF32) throw FormatError("unknown dtype code", 8);
  const std::size_t ndim = std::uint8_t(in[9]);
  std::size_t off = 10;
  Shape dims;
  for (std::size_t i = 0; i < ndim; ++i, off += 8) {
    need(in, off, 8, "dims");
    dims.push_back(std::size_t(get_le<std::uint64_t>(in, off)));
  }
  const std::size_t n = numel(dims);
  if (in.size() - off < 4 * n) throw FormatError("truncated payload", in.size());
  if (in.size() - off > 4 * n) throw FormatError("trailing bytes after payload", off + 4 * n);
  std::vector<float> data(n);
  for (std::size_t i = 0; i < n; ++i) data[i] = std::bit_cast<float>(get_le<std::uint32_t>(in, off + 4 * i));
  return Tensorf(std::move(dims), std::move(data));
}

Tensorf read_tensor_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open tensor file: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return decode_tensor(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.reason(), e.offset());
  }
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".partial");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write file: " + path.string());
    f.write(bytes.data(), std::streamsize(bytes.size()));
    if (!f) throw DataError("short write: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open file: " + path.string());
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void write_tensor_file(const std::filesystem::path& path, const Tensorf& t) { write_file_atomic(path, encode_tensor(t)); }

}  // namespace mmr
