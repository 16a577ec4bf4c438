#pragma once

#include <string>
#include <vector>

#include "ppcd/model.hpp"

namespace ppcd {

// Physically remove dead channels from a fully binarized student: conv1
// output filters (with the following norm channels and conv2 input slices)
// where the first mask is zero, conv2 output filters and transition input
// slices where the second mask is zero. Mask layers disappear; transition
// and skip layers stay since they define each block's fixed output width.
Generator strip_and_rewire(Generator& masked);

// Surviving (hidden1, hidden2) widths per block, recorded in checkpoints so
// a pruned model can be rebuilt before loading its tensors.
std::vector<std::pair<int, int>> hidden_widths(const Generator& g);

// Build an empty pruned-shape generator: no masks, transitions kept, per-block
// hidden widths as recorded.
Generator build_pruned_shell(const GenConfig& cfg, const std::vector<std::pair<int, int>>& hidden,
                             uint64_t seed);

// Max elementwise |a - b| over `trials` seeded (z, cls) batches in eval mode.
double equivalence_check(Generator& a, Generator& b, int trials, uint64_t seed, int batch = 4);

// Per-layer accounting: parameter count by closed formula, MACs per sample
// from the static spatial schedule, plus the layer's output channel count.
struct LayerCount {
    std::string name;
    long long params = 0;
    long long macs = 0;
    int channels = 0;
};

std::vector<LayerCount> count_generator(const Generator& g);
std::vector<LayerCount> count_discriminator(const Discriminator& d, int image_size);

long long total_params(const std::vector<LayerCount>& rows);
long long total_macs(const std::vector<LayerCount>& rows);

// Independent oracle: walk every stored parameter value.
template <typename T>
long long brute_force_param_count(ParamListT<T>& params) {
    long long n = 0;
    for (const auto& p : params) n += p.tensor->size();
    return n;
}

struct PruneRow {
    std::string name;
    long long params_before = 0, params_after = 0;
    long long macs_before = 0, macs_after = 0;
    int channels_before = 0, channels_after = 0;
};

struct PruneReport {
    std::vector<PruneRow> rows;
    long long params_before = 0, params_after = 0;
    long long macs_before = 0, macs_after = 0;

    double param_factor() const {
        return params_after ? static_cast<double>(params_before) / params_after : 0.0;
    }
    double mac_factor() const {
        return macs_after ? static_cast<double>(macs_before) / macs_after : 0.0;
    }
    std::string to_csv() const;
    std::string to_table() const;
};

PruneReport make_prune_report(const Generator& masked, const Generator& pruned);

}  // namespace ppcd
