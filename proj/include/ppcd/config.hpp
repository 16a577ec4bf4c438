#pragma once

#include <string>

#include <json.hpp>

#include "ppcd/trainer.hpp"

namespace ppcd {

// Everything one run needs: dataset recipe, model widths, training schedule.
// Serialized as a flat JSON document; command-line flags override file values.
struct HarnessConfig {
    int num_classes = 8;
    int image_size = 16;
    int per_class = 32;
    uint64_t data_seed = 7;
    int z_dim = 32;
    int width = 16;
    int teacher_width_factor = 2;
    TrainConfig train;

    GenConfig student_config() const {
        GenConfig g = default_gen_config(image_size, width, num_classes, z_dim);
        g.alpha = train.alpha;
        g.delta = train.delta;
        g.pivot = train.pivot;
        return g;
    }
    GenConfig teacher_config() const {
        return teacher_config_for(student_config(), teacher_width_factor);
    }
    DiscConfig disc_config() const { return default_disc_config(image_size, width, num_classes); }

    void validate() const {
        if (num_classes < 2) fail("config needs at least 2 classes");
        if (per_class < 1) fail("config needs per_class >= 1");
        if (width < 8 || width % 8 != 0) fail("width must be a positive multiple of 8");
        if (z_dim < 1) fail("z_dim must be positive");
        if (teacher_width_factor < 1) fail("teacher_width_factor must be >= 1");
        train.validate();
        student_config().validate();
        disc_config().validate();
    }
};

nlohmann::json to_json(const HarnessConfig& cfg);
HarnessConfig harness_config_from_json(const nlohmann::json& j);
HarnessConfig load_harness_config(const std::string& path);
void save_harness_config(const std::string& path, const HarnessConfig& cfg);

}  // namespace ppcd
