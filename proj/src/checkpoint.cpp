#include "ppcd/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace ppcd {
namespace {

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is, const std::string& path) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) fail("truncated checkpoint: " + path);
    return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
           static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

void put_f32(std::ostream& os, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
}

float get_f32(std::istream& is, const std::string& path) {
    uint32_t bits = get_u32(is, path);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace

void Checkpoint::add(const std::string& name, const Tensor& t) {
    if (find(name)) fail("duplicate tensor name in checkpoint: " + name);
    tensors.push_back({name, t});
}

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return &t;
    return nullptr;
}

const Tensor& Checkpoint::at(const std::string& name) const {
    const Tensor* t = find(name);
    if (!t) fail("checkpoint is missing tensor " + name);
    return *t;
}

void save_checkpoint(const std::string& path, const Checkpoint& c) {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail("cannot open " + path + " for writing");
    os.write("PPCD", 4);
    put_u32(os, kCheckpointVersion);
    std::string meta = c.meta.dump();
    put_u32(os, static_cast<uint32_t>(meta.size()));
    os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    put_u32(os, static_cast<uint32_t>(c.tensors.size()));
    for (const auto& [name, t] : c.tensors) {
        put_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        os.put(0);  // dtype tag: f32
        put_u32(os, static_cast<uint32_t>(t.rank()));
        for (int d = 0; d < t.rank(); ++d) put_u32(os, static_cast<uint32_t>(t.dim(d)));
        for (int64_t i = 0; i < t.size(); ++i) put_f32(os, t[i]);
    }
    if (!os) fail("failed while writing " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail("cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4)) fail("truncated checkpoint: " + path);
    if (std::memcmp(magic, "PPCD", 4) != 0) fail("not a checkpoint container: " + path);
    uint32_t version = get_u32(is, path);
    if (version != kCheckpointVersion)
        fail("unsupported checkpoint version " + std::to_string(version) + " in " + path);
    uint32_t meta_len = get_u32(is, path);
    std::string meta(meta_len, '\0');
    if (!is.read(meta.data(), meta_len)) fail("truncated checkpoint: " + path);
    Checkpoint c;
    try {
        c.meta = nlohmann::json::parse(meta);
    } catch (const nlohmann::json::exception& e) {
        fail("corrupt checkpoint metadata in " + path + ": " + e.what());
    }
    uint32_t count = get_u32(is, path);
    for (uint32_t k = 0; k < count; ++k) {
        uint32_t name_len = get_u32(is, path);
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) fail("truncated checkpoint: " + path);
        int dtype = is.get();
        if (dtype == EOF) fail("truncated checkpoint: " + path);
        if (dtype != 0) fail("unknown tensor dtype tag in " + path);
        uint32_t rank = get_u32(is, path);
        if (rank > 8) fail("corrupt tensor rank in " + path);
        Shape shape(rank);
        for (uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<int>(get_u32(is, path));
        Tensor t(shape);
        for (int64_t i = 0; i < t.size(); ++i) t[i] = get_f32(is, path);
        if (c.find(name)) fail("duplicate tensor name in " + path + ": " + name);
        c.tensors.push_back({std::move(name), std::move(t)});
    }
    return c;
}

}  // namespace ppcd
