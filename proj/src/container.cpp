#include "gcbm/container.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace gcbm {

namespace {

template <std::size_t N>
std::size_t read_exact(std::istream& in, std::array<unsigned char, N>& buf) {
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(N));
  return static_cast<std::size_t>(in.gcount());
}

}  // namespace

void write_u16(std::ostream& out, std::uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>((v >> 8) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 2);
}

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint16_t read_u16(std::istream& in, const std::string& context) {
  std::array<unsigned char, 2> b{};
  if (read_exact(in, b) != 2) throw FormatError(context + ": truncated header");
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t read_u32(std::istream& in, const std::string& context) {
  std::array<unsigned char, 4> b{};
  if (read_exact(in, b) != 4) throw FormatError(context + ": truncated header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

void write_matrix(std::ostream& out, const Matrix& m) {
  if (m.rows() > UINT32_MAX || m.cols() > UINT32_MAX) {
    throw FormatError("matrix too large for container: " + shape_str(m));
  }
  out.write(kMatrixMagic, 4);
  write_u16(out, kContainerVersion);
  write_u16(out, kDtypeF64);
  write_u32(out, static_cast<std::uint32_t>(m.rows()));
  write_u32(out, static_cast<std::uint32_t>(m.cols()));
  std::vector<unsigned char> payload(m.size() * 8);
  auto data = m.data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(data[i]);
    for (int b = 0; b < 8; ++b) payload[i * 8 + b] = static_cast<unsigned char>((bits >> (8 * b)) & 0xff);
  }
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!out) throw FormatError("failed writing matrix payload");
}

Matrix read_matrix(std::istream& in, const std::string& context) {
  std::array<unsigned char, 4> magic{};
  const std::size_t got = read_exact(in, magic);
  if (got != 4) throw FormatError(context + ": truncated header");
  if (std::memcmp(magic.data(), kMatrixMagic, 4) != 0) throw FormatError(context + ": bad magic");
  const std::uint16_t version = read_u16(in, context);
  if (version != kContainerVersion) {
    throw FormatError(context + ": unsupported container version " + std::to_string(version));
  }
  const std::uint16_t dtype = read_u16(in, context);
  if (dtype != kDtypeF64) throw FormatError(context + ": unsupported dtype code " + std::to_string(dtype));
  const std::uint32_t rows = read_u32(in, context);
  const std::uint32_t cols = read_u32(in, context);
  const std::size_t count = static_cast<std::size_t>(rows) * cols;
  const std::size_t expected = count * 8;
  std::vector<unsigned char> payload(expected);
  in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(expected));
  const auto actual = static_cast<std::size_t>(in.gcount());
  if (actual != expected) {
    throw FormatError(context + ": truncated payload: expected " + std::to_string(expected) +
                      " bytes, got " + std::to_string(actual));
  }
  std::vector<double> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(payload[i * 8 + b]) << (8 * b);
    data[i] = std::bit_cast<double>(bits);
  }
  return Matrix(rows, cols, std::move(data));
}

void save_matrix(const std::filesystem::path& path, const Matrix& m) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_matrix(out, m);
}

Matrix load_matrix(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  Matrix m = read_matrix(in, path.string());
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError(path.string() + ": trailing bytes after payload");
  }
  return m;
}

}  // namespace gcbm
