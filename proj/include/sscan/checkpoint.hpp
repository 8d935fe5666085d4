#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "sscan/model.hpp"

namespace sscan {

// Checkpoint container format:
//   magic "SSCK", version u32,
//   config text (u64 byte length + UTF-8 key=value lines),
//   tensor records: u32 name length, name, u8 dtype tag (0=f32, 1=f64),
//   u32 rank, u64 extents, raw little-endian element data.
struct TensorRecord {
  std::string name;
  std::uint8_t dtype;  // 0 = f32, 1 = f64
  Shape shape;
  std::vector<char> bytes;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::string& path, const std::string& config_text,
                      const std::vector<TensorRecord>& records);

struct CheckpointFile {
  std::uint32_t version;
  std::string config_text;
  std::vector<TensorRecord> records;
};

CheckpointFile read_checkpoint(const std::string& path);

template <typename T>
constexpr std::uint8_t dtype_tag() {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  return sizeof(T) == 4 ? 0 : 1;
}

template <typename T>
void save_model(const std::string& path, Model<T>& model,
                const std::string& config_text) {
  std::vector<TensorRecord> records;
  model.visit_params([&](const std::string& name, Param<T>& p) {
    TensorRecord rec;
    rec.name = name;
    rec.dtype = dtype_tag<T>();
    rec.shape = p.value.shape();
    rec.bytes.resize(static_cast<size_t>(p.value.bytes()));
    std::memcpy(rec.bytes.data(), p.value.data(), rec.bytes.size());
    records.push_back(std::move(rec));
  });
  write_checkpoint(path, config_text, records);
}

template <typename T>
void load_model_params(Model<T>& model, const CheckpointFile& ckpt) {
  size_t k = 0;
  model.visit_params([&](const std::string& name, Param<T>& p) {
    if (k >= ckpt.records.size())
      throw DataError("checkpoint: missing tensor record for " + name);
    const TensorRecord& rec = ckpt.records[k++];
    if (rec.name != name)
      throw DataError("checkpoint: expected tensor " + name + ", found " + rec.name);
    if (rec.dtype != dtype_tag<T>())
      throw DataError("checkpoint: dtype mismatch for " + name);
    if (rec.shape != p.value.shape())
      throw DataError("checkpoint: shape mismatch for " + name);
    std::memcpy(p.value.data(), rec.bytes.data(), rec.bytes.size());
  });
  if (k != ckpt.records.size())
    throw DataError("checkpoint: unexpected extra tensor records");
}

}  // namespace sscan
