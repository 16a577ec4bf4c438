#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ppcd/tensor.hpp"

namespace ppcd {

// Binary container: "PPCD" magic, u32 format version, length-prefixed JSON
// metadata, then named tensor records (u32 name length, name bytes, u8 dtype,
// u32 rank, u32 extents, raw little-endian values). Round trips bit-exactly.
struct Checkpoint {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<std::pair<std::string, Tensor>> tensors;

    void add(const std::string& name, const Tensor& t);
    const Tensor* find(const std::string& name) const;
    const Tensor& at(const std::string& name) const;
};

inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ppcd
