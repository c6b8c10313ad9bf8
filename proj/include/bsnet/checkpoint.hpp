#pragma once

// Checkpoint format: a flat map from dot-separated parameter names to dense
// double arrays.
//
//   magic   "BSNCKPT1"                     8 bytes
//   count   uint64 (little-endian)
//   entry*  { uint32 name_len, name bytes, uint32 ndims,
//             int64 dims[ndims], double values[prod(dims)] }

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "bsnet/nn.hpp"
#include "bsnet/tensor.hpp"

namespace bsnet {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'B', 'S', 'N', 'C', 'K', 'P', 'T', '1'};

inline void save_checkpoint(const std::string& path,
                            const std::vector<std::pair<std::string, Tensor>>& state) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open checkpoint for writing: " + path);
  out.write(kCheckpointMagic, 8);
  uint64_t count = state.size();
  out.write(reinterpret_cast<const char*>(&count), sizeof(count));
  for (const auto& [name, t] : state) {
    uint32_t nl = static_cast<uint32_t>(name.size());
    out.write(reinterpret_cast<const char*>(&nl), sizeof(nl));
    out.write(name.data(), nl);
    uint32_t nd = static_cast<uint32_t>(t.shape().size());
    out.write(reinterpret_cast<const char*>(&nd), sizeof(nd));
    for (int64_t d : t.shape()) out.write(reinterpret_cast<const char*>(&d), sizeof(d));
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!out) throw CheckpointError("write failed for checkpoint: " + path);
}

struct CheckpointEntry {
  Shape shape;
  std::vector<double> data;
};

inline std::map<std::string, CheckpointEntry> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw CheckpointError("not a checkpoint file (bad magic): " + path);
  uint64_t count = 0;
  in.read(reinterpret_cast<char*>(&count), sizeof(count));
  std::map<std::string, CheckpointEntry> entries;
  for (uint64_t k = 0; k < count; ++k) {
    uint32_t nl = 0;
    in.read(reinterpret_cast<char*>(&nl), sizeof(nl));
    if (!in || nl > (1u << 20)) throw CheckpointError("truncated or corrupt checkpoint: " + path);
    std::string name(nl, '\0');
    in.read(name.data(), nl);
    uint32_t nd = 0;
    in.read(reinterpret_cast<char*>(&nd), sizeof(nd));
    if (!in || nd > 8) throw CheckpointError("truncated or corrupt checkpoint: " + path);
    CheckpointEntry e;
    e.shape.resize(nd);
    for (uint32_t i = 0; i < nd; ++i)
      in.read(reinterpret_cast<char*>(&e.shape[i]), sizeof(int64_t));
    int64_t n = shape_numel(e.shape);
    if (!in || n < 0) throw CheckpointError("truncated or corrupt checkpoint: " + path);
    e.data.resize(static_cast<size_t>(n));
    in.read(reinterpret_cast<char*>(e.data.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw CheckpointError("truncated or corrupt checkpoint: " + path);
    entries.emplace(std::move(name), std::move(e));
  }
  return entries;
}

// Copies loaded entries into the model state. Validates everything before
// mutating anything, so a failed load leaves the model untouched.
// `prefix` restricts the load to parameters whose name starts with it;
// `require_all` demands that every selected model entry exist in the file.
inline void apply_checkpoint(std::vector<std::pair<std::string, Tensor>>& state,
                             const std::map<std::string, CheckpointEntry>& entries,
                             const std::string& prefix = "", bool require_all = true) {
  std::vector<std::pair<Tensor*, const CheckpointEntry*>> plan;
  for (auto& [name, t] : state) {
    if (!prefix.empty() && name.rfind(prefix, 0) != 0) continue;
    auto it = entries.find(name);
    if (it == entries.end()) {
      if (require_all) throw CheckpointError("checkpoint is missing parameter: " + name);
      continue;
    }
    if (it->second.shape != t.shape())
      throw CheckpointError("shape mismatch for parameter " + name + ": model " +
                            shape_str(t.shape()) + " vs checkpoint " +
                            shape_str(it->second.shape));
    plan.emplace_back(&t, &it->second);
  }
  if (plan.empty()) throw CheckpointError("no parameters matched prefix '" + prefix + "'");
  for (auto& [t, e] : plan) t->vec() = e->data;
}

}  // namespace bsnet
