#include "ppcd/model_io.hpp"

namespace ppcd {

using nlohmann::json;

json to_json(const GenConfig& cfg) {
    json blocks = json::array();
    for (const BlockSpec& b : cfg.blocks) blocks.push_back({b.in, b.out, b.upsample});
    return json{{"z_dim", cfg.z_dim},
                {"num_classes", cfg.num_classes},
                {"stem_size", cfg.stem_size},
                {"image_channels", cfg.image_channels},
                {"blocks", blocks},
                {"attn_after", cfg.attn_after},
                {"distill_blocks", cfg.distill_blocks},
                {"alpha", cfg.alpha},
                {"delta", cfg.delta},
                {"pivot", cfg.pivot},
                {"masked", cfg.masked}};
}

GenConfig gen_config_from_json(const json& j) {
    GenConfig cfg;
    cfg.z_dim = j.at("z_dim");
    cfg.num_classes = j.at("num_classes");
    cfg.stem_size = j.at("stem_size");
    cfg.image_channels = j.at("image_channels");
    cfg.blocks.clear();
    for (const auto& b : j.at("blocks"))
        cfg.blocks.push_back({b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<bool>()});
    cfg.attn_after = j.at("attn_after");
    cfg.distill_blocks = j.at("distill_blocks").get<std::vector<int>>();
    cfg.alpha = j.at("alpha");
    cfg.delta = j.at("delta");
    cfg.pivot = j.at("pivot");
    cfg.masked = j.at("masked");
    cfg.validate();
    return cfg;
}

json to_json(const DiscConfig& cfg) {
    json blocks = json::array();
    for (const DBlockSpec& b : cfg.blocks) blocks.push_back({b.in, b.out, b.downsample});
    return json{{"num_classes", cfg.num_classes},
                {"image_channels", cfg.image_channels},
                {"blocks", blocks},
                {"spectral_norm", cfg.spectral_norm}};
}

DiscConfig disc_config_from_json(const json& j) {
    DiscConfig cfg;
    cfg.num_classes = j.at("num_classes");
    cfg.image_channels = j.at("image_channels");
    cfg.blocks.clear();
    for (const auto& b : j.at("blocks"))
        cfg.blocks.push_back({b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<bool>()});
    cfg.spectral_norm = j.at("spectral_norm");
    cfg.validate();
    return cfg;
}

namespace {

void pack_list(Checkpoint& c, const ParamList& list) {
    for (const auto& p : list) c.add(p.name, *p.tensor);
}

void unpack_list(const Checkpoint& c, const ParamList& list) {
    for (const auto& p : list) {
        const Tensor& t = c.at(p.name);
        if (!t.same_shape(*p.tensor))
            fail("checkpoint tensor " + p.name + " has shape " + shape_str(t.shape()) +
                 ", model expects " + shape_str(p.tensor->shape()));
        *p.tensor = t;
    }
}

std::vector<std::pair<std::string, MaskState*>> named_masks(Generator& g,
                                                            const std::string& prefix) {
    std::vector<std::pair<std::string, MaskState*>> out;
    for (size_t k = 0; k < g.blocks.size(); ++k)
        if (g.blocks[k].has_masks) {
            std::string base = prefix + ".block" + std::to_string(k);
            out.push_back({base + ".mask1", &g.blocks[k].mask1});
            out.push_back({base + ".mask2", &g.blocks[k].mask2});
        }
    return out;
}

}  // namespace

void pack_generator(Checkpoint& c, Generator& g, const std::string& prefix) {
    c.meta[prefix + "_config"] = to_json(g.cfg);
    ParamList list;
    g.collect_params(prefix, list);
    g.collect_buffers(prefix, list);
    pack_list(c, list);
    json masks = json::object();
    for (auto& [name, m] : named_masks(g, prefix)) {
        masks[name] = {{"frozen", m->frozen}, {"frozen_reg", m->frozen_reg}};
        if (m->frozen) c.add(name + ".m_star", m->m_star);
    }
    c.meta[prefix + "_masks"] = masks;
}

void unpack_generator(const Checkpoint& c, Generator& g, const std::string& prefix) {
    ParamList list;
    g.collect_params(prefix, list);
    g.collect_buffers(prefix, list);
    unpack_list(c, list);
    if (!c.meta.contains(prefix + "_masks")) fail("checkpoint is missing mask states");
    const json& masks = c.meta.at(prefix + "_masks");
    for (auto& [name, m] : named_masks(g, prefix)) {
        if (!masks.contains(name)) fail("checkpoint is missing mask state " + name);
        const json& jm = masks.at(name);
        m->frozen = jm.at("frozen");
        m->frozen_reg = jm.at("frozen_reg");
        if (m->frozen) {
            const Tensor& star = c.at(name + ".m_star");
            if (star.size() != m->n()) fail("frozen mask size mismatch for " + name);
            m->m_star = star;
        }
    }
}

void pack_discriminator(Checkpoint& c, Discriminator& d, const std::string& prefix) {
    c.meta[prefix + "_config"] = to_json(d.cfg);
    ParamList list;
    d.collect_params(prefix, list);
    d.collect_buffers(prefix, list);
    pack_list(c, list);
}

void unpack_discriminator(const Checkpoint& c, Discriminator& d, const std::string& prefix) {
    ParamList list;
    d.collect_params(prefix, list);
    d.collect_buffers(prefix, list);
    unpack_list(c, list);
}

void pack_distill_head(Checkpoint& c, DistillHead& h, const std::string& prefix) {
    c.meta[prefix + "_blocks"] = h.blocks;
    ParamList list;
    h.collect_params(prefix, list);
    pack_list(c, list);
}

void unpack_distill_head(const Checkpoint& c, DistillHead& h, const std::string& prefix) {
    ParamList list;
    h.collect_params(prefix, list);
    unpack_list(c, list);
}

}  // namespace ppcd
