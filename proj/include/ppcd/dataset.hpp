#pragma once

#include <cstdint>
#include <vector>

#include "ppcd/tensor.hpp"

namespace ppcd {

// Procedurally drawn shapes-on-canvas dataset: each class is a fixed
// shape/color pair, each sample jitters position and scale from its own
// seeded stream. Stands in for a real image corpus at desk scale.
struct SyntheticDataset {
    int num_classes = 0;
    int image_size = 0;
    int per_class = 0;
    uint64_t seed = 0;
    Tensor images;            // [n, 3, S, S], values in [-1, 1]
    std::vector<int> labels;  // [n]

    int size() const { return static_cast<int>(labels.size()); }

    // Gather a batch by sample indices.
    Tensor gather(const std::vector<int>& idx) const;
    std::vector<int> gather_labels(const std::vector<int>& idx) const;

    // Mean image of one class, [3, S, S].
    Tensor class_mean(int cls) const;
};

SyntheticDataset synth_dataset(uint64_t seed, int num_classes, int image_size, int per_class);

}  // namespace ppcd
