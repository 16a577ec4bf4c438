#include "ppcd/config.hpp"

#include <fstream>
#include <set>

namespace ppcd {

using nlohmann::json;

json to_json(const HarnessConfig& cfg) {
    return json{{"num_classes", cfg.num_classes},
                {"image_size", cfg.image_size},
                {"per_class", cfg.per_class},
                {"data_seed", cfg.data_seed},
                {"z_dim", cfg.z_dim},
                {"width", cfg.width},
                {"teacher_width_factor", cfg.teacher_width_factor},
                {"epochs", cfg.train.epochs},
                {"base_lr", cfg.train.base_lr},
                {"lr_drop_epochs", cfg.train.lr_drop_epochs},
                {"lr_drop_factor", cfg.train.lr_drop_factor},
                {"batch_size", cfg.train.batch_size},
                {"grad_accum_steps", cfg.train.grad_accum_steps},
                {"beta1", cfg.train.beta1},
                {"beta2", cfg.train.beta2},
                {"adam_eps", cfg.train.adam_eps},
                {"pp_weight", cfg.train.pp_weight},
                {"seed", cfg.train.seed},
                {"ablation", to_string(cfg.train.ablation)},
                {"adv_loss", to_string(cfg.train.adv)},
                {"alpha", cfg.train.alpha},
                {"delta", cfg.train.delta},
                {"pivot", cfg.train.pivot},
                {"stop_after_freeze", cfg.train.stop_after_freeze}};
}

HarnessConfig harness_config_from_json(const json& j) {
    if (!j.is_object()) fail("config must be a JSON object");
    HarnessConfig def;
    json known = to_json(def);
    for (const auto& [key, value] : j.items())
        if (!known.contains(key)) fail("unknown config key '" + key + "'");

    HarnessConfig cfg;
    auto get = [&](const char* key, auto& slot) {
        if (j.contains(key)) slot = j.at(key).get<std::decay_t<decltype(slot)>>();
    };
    get("num_classes", cfg.num_classes);
    get("image_size", cfg.image_size);
    get("per_class", cfg.per_class);
    get("data_seed", cfg.data_seed);
    get("z_dim", cfg.z_dim);
    get("width", cfg.width);
    get("teacher_width_factor", cfg.teacher_width_factor);
    get("epochs", cfg.train.epochs);
    get("base_lr", cfg.train.base_lr);
    get("lr_drop_epochs", cfg.train.lr_drop_epochs);
    get("lr_drop_factor", cfg.train.lr_drop_factor);
    get("batch_size", cfg.train.batch_size);
    get("grad_accum_steps", cfg.train.grad_accum_steps);
    get("beta1", cfg.train.beta1);
    get("beta2", cfg.train.beta2);
    get("adam_eps", cfg.train.adam_eps);
    get("pp_weight", cfg.train.pp_weight);
    get("seed", cfg.train.seed);
    if (j.contains("ablation")) cfg.train.ablation = ablation_from_string(j.at("ablation"));
    if (j.contains("adv_loss")) cfg.train.adv = adv_loss_from_string(j.at("adv_loss"));
    get("alpha", cfg.train.alpha);
    get("delta", cfg.train.delta);
    get("pivot", cfg.train.pivot);
    get("stop_after_freeze", cfg.train.stop_after_freeze);
    cfg.validate();
    return cfg;
}

HarnessConfig load_harness_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) fail("cannot open config " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        fail("invalid JSON in " + path + ": " + e.what());
    }
    return harness_config_from_json(j);
}

void save_harness_config(const std::string& path, const HarnessConfig& cfg) {
    std::ofstream os(path);
    if (!os) fail("cannot open " + path + " for writing");
    os << to_json(cfg).dump(2) << "\n";
    if (!os) fail("failed while writing " + path);
}

}  // namespace ppcd
