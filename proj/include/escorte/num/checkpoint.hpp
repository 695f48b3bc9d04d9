#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "escorte/num/matrix.hpp"
#include "escorte/num/params.hpp"

namespace escorte::num {

/// On-disk model checkpoint. Layout (all integers and floats little-endian):
///
///   "ESCORTE-CKPT"                      12 bytes, no terminator
///   u32 format version                  currently 1
///   u32 len, bytes                      model kind ("reid", "action")
///   u32 count, then count x (u32 len, bytes, i64 value)   dimensions
///   u32 count, then count x (u32 len, bytes, u32 rows, u32 cols,
///                            rows*cols f64 row-major)     parameter blocks
struct Checkpoint {
  static constexpr char kMagic[] = "ESCORTE-CKPT";
  static constexpr std::uint32_t kVersion = 1;

  std::string kind;
  std::vector<std::pair<std::string, std::int64_t>> dims;
  ParamStore params;

  /// Throws ConfigError when the dimension is missing.
  std::int64_t dim(const std::string& name) const;
};

void write_checkpoint(const Checkpoint& ckpt, std::ostream& out);
/// Throws ParseError on a bad magic or truncation, VersionError on a version mismatch.
Checkpoint read_checkpoint(std::istream& in);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace escorte::num
