#include "sscan/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace sscan {

namespace {

constexpr char kMagic[4] = {'S', 'S', 'C', 'K'};

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError("checkpoint: truncated file");
  return v;
}

}  // namespace

void write_checkpoint(const std::string& path, const std::string& config_text,
                      const std::vector<TensorRecord>& records) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("checkpoint: cannot open " + path + " for writing");
  os.write(kMagic, 4);
  write_pod<std::uint32_t>(os, kCheckpointVersion);
  write_pod<std::uint64_t>(os, config_text.size());
  os.write(config_text.data(), static_cast<std::streamsize>(config_text.size()));
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(records.size()));
  for (const TensorRecord& rec : records) {
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(rec.name.size()));
    os.write(rec.name.data(), static_cast<std::streamsize>(rec.name.size()));
    write_pod<std::uint8_t>(os, rec.dtype);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(rec.shape.size()));
    for (index_t e : rec.shape) write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(e));
    os.write(rec.bytes.data(), static_cast<std::streamsize>(rec.bytes.size()));
  }
  if (!os) throw DataError("checkpoint: write failed for " + path);
}

CheckpointFile read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw DataError("checkpoint: bad magic in " + path);
  CheckpointFile out;
  out.version = read_pod<std::uint32_t>(is);
  if (out.version != kCheckpointVersion)
    throw DataError("checkpoint: unsupported version " + std::to_string(out.version));
  const auto cfg_len = read_pod<std::uint64_t>(is);
  out.config_text.resize(cfg_len);
  is.read(out.config_text.data(), static_cast<std::streamsize>(cfg_len));
  const auto n_records = read_pod<std::uint32_t>(is);
  out.records.resize(n_records);
  for (TensorRecord& rec : out.records) {
    const auto name_len = read_pod<std::uint32_t>(is);
    rec.name.resize(name_len);
    is.read(rec.name.data(), name_len);
    rec.dtype = read_pod<std::uint8_t>(is);
    const auto rank = read_pod<std::uint32_t>(is);
    rec.shape.resize(rank);
    std::uint64_t numel = 1;
    for (auto& e : rec.shape) {
      e = static_cast<index_t>(read_pod<std::uint64_t>(is));
      numel *= static_cast<std::uint64_t>(e);
    }
    const std::uint64_t elem = (rec.dtype == 0) ? 4 : 8;
    rec.bytes.resize(numel * elem);
    is.read(rec.bytes.data(), static_cast<std::streamsize>(rec.bytes.size()));
    if (!is) throw DataError("checkpoint: truncated tensor data in " + path);
  }
  return out;
}

}  // namespace sscan
