#pragma once

// Binary matrix container shared by datasets, checkpoints and activation
// exports. Layout (all integers little-endian):
//
//   offset  size  field
//   0       4     magic "GCBM"
//   4       2     version (1)
//   6       2     dtype code (1 = IEEE-754 binary64)
//   8       4     rows
//   12      4     cols
//   16      8*r*c row-major payload, little-endian binary64

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include "gcbm/tensor.hpp"

namespace gcbm {

inline constexpr char kMatrixMagic[4] = {'G', 'C', 'B', 'M'};
inline constexpr std::uint16_t kContainerVersion = 1;
inline constexpr std::uint16_t kDtypeF64 = 1;
inline constexpr std::size_t kMatrixHeaderBytes = 16;

void write_matrix(std::ostream& out, const Matrix& m);
// `context` names the source in error messages.
Matrix read_matrix(std::istream& in, const std::string& context);

void save_matrix(const std::filesystem::path& path, const Matrix& m);
Matrix load_matrix(const std::filesystem::path& path);

// Little-endian primitives, also used by the checkpoint format.
void write_u16(std::ostream& out, std::uint16_t v);
void write_u32(std::ostream& out, std::uint32_t v);
std::uint16_t read_u16(std::istream& in, const std::string& context);
std::uint32_t read_u32(std::istream& in, const std::string& context);

}  // namespace gcbm
