#include "escorte/num/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "escorte/error.hpp"

namespace escorte::num {

namespace {

constexpr std::size_t kMagicLen = sizeof(Checkpoint::kMagic) - 1;

void put_u64(std::ostream& out, std::uint64_t v, int bytes) {
  char buf[8];
  for (int i = 0; i < bytes; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(buf, bytes);
}

void put_u32(std::ostream& out, std::uint32_t v) { put_u64(out, v, 4); }

void put_string(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint64_t get_u64(std::istream& in, int bytes) {
  unsigned char buf[8];
  if (!in.read(reinterpret_cast<char*>(buf), bytes)) throw ParseError(0, "checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

std::uint32_t get_u32(std::istream& in) { return static_cast<std::uint32_t>(get_u64(in, 4)); }

std::string get_string(std::istream& in) {
  const std::uint32_t n = get_u32(in);
  if (n > (1u << 20)) throw ParseError(0, "checkpoint string length implausible");
  std::string s(n, '\0');
  if (!in.read(s.data(), n)) throw ParseError(0, "checkpoint truncated");
  return s;
}

}  // namespace

std::int64_t Checkpoint::dim(const std::string& name) const {
  for (const auto& [k, v] : dims) {
    if (k == name) return v;
  }
  throw ConfigError("checkpoint of kind '" + kind + "' has no dimension '" + name + "'");
}

void write_checkpoint(const Checkpoint& ckpt, std::ostream& out) {
  out.write(Checkpoint::kMagic, kMagicLen);
  put_u32(out, Checkpoint::kVersion);
  put_string(out, ckpt.kind);
  put_u32(out, static_cast<std::uint32_t>(ckpt.dims.size()));
  for (const auto& [name, value] : ckpt.dims) {
    put_string(out, name);
    put_u64(out, static_cast<std::uint64_t>(value), 8);
  }
  put_u32(out, static_cast<std::uint32_t>(ckpt.params.size()));
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    const Matrix& m = ckpt.params.at(i);
    put_string(out, ckpt.params.name(i));
    put_u32(out, static_cast<std::uint32_t>(m.rows()));
    put_u32(out, static_cast<std::uint32_t>(m.cols()));
    for (double v : m.data()) put_u64(out, std::bit_cast<std::uint64_t>(v), 8);
  }
}

Checkpoint read_checkpoint(std::istream& in) {
  char magic[kMagicLen];
  if (!in.read(magic, kMagicLen) || std::memcmp(magic, Checkpoint::kMagic, kMagicLen) != 0) {
    throw ParseError(0, "not a checkpoint (bad magic)");
  }
  const std::uint32_t version = get_u32(in);
  if (version != Checkpoint::kVersion) {
    throw VersionError("checkpoint format version " + std::to_string(version) +
                       " unsupported (expected " + std::to_string(Checkpoint::kVersion) + ")");
  }
  Checkpoint ckpt;
  ckpt.kind = get_string(in);
  const std::uint32_t ndims = get_u32(in);
  for (std::uint32_t i = 0; i < ndims; ++i) {
    std::string name = get_string(in);
    const auto value = static_cast<std::int64_t>(get_u64(in, 8));
    ckpt.dims.emplace_back(std::move(name), value);
  }
  const std::uint32_t nblocks = get_u32(in);
  for (std::uint32_t i = 0; i < nblocks; ++i) {
    std::string name = get_string(in);
    const std::uint32_t rows = get_u32(in);
    const std::uint32_t cols = get_u32(in);
    if (static_cast<std::uint64_t>(rows) * cols > (1ULL << 28)) {
      throw ParseError(0, "checkpoint block '" + name + "' implausibly large");
    }
    Matrix m(rows, cols);
    for (double& v : m.data()) v = std::bit_cast<double>(get_u64(in, 8));
    ckpt.params.add(std::move(name), std::move(m));
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot open '" + path.string() + "' for writing");
  write_checkpoint(ckpt, out);
  if (!out) throw ConfigError("failed writing '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint '" + path.string() + "'");
  return read_checkpoint(in);
}

}  // namespace escorte::num
