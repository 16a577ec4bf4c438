#pragma once

#include <string>

#include "ppcd/checkpoint.hpp"
#include "ppcd/losses.hpp"

namespace ppcd {

nlohmann::json to_json(const GenConfig& cfg);
GenConfig gen_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DiscConfig& cfg);
DiscConfig disc_config_from_json(const nlohmann::json& j);

// Pack parameters, running statistics and mask states under `prefix`.
// Mask freeze flags and freeze-time regularizer readings live in the
// metadata; frozen values are tensor records next to the mask weights.
void pack_generator(Checkpoint& c, Generator& g, const std::string& prefix);
void unpack_generator(const Checkpoint& c, Generator& g, const std::string& prefix);

void pack_discriminator(Checkpoint& c, Discriminator& d, const std::string& prefix);
void unpack_discriminator(const Checkpoint& c, Discriminator& d, const std::string& prefix);

void pack_distill_head(Checkpoint& c, DistillHead& h, const std::string& prefix);
void unpack_distill_head(const Checkpoint& c, DistillHead& h, const std::string& prefix);

}  // namespace ppcd
