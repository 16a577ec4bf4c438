#include "ppcd/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace ppcd {
namespace {

constexpr int kNumShapes = 5;
constexpr int kNumColors = 10;

// RGB palette in [-1, 1].
constexpr float kPalette[kNumColors][3] = {
    {1.0f, -0.8f, -0.8f},    {-0.8f, 1.0f, -0.8f},    {-0.8f, -0.8f, 1.0f},
    {1.0f, 1.0f, -0.8f},     {1.0f, -0.8f, 1.0f},     {-0.8f, 1.0f, 1.0f},
    {1.0f, 0.2f, -0.8f},     {0.4f, -0.6f, 1.0f},     {0.95f, 0.95f, 0.95f},
    {-0.2f, 1.0f, 0.2f},
};

// enum over shape kinds: disc, square, triangle, ring, plus
bool covers(int shape, double dx, double dy, double r) {
    double ax = std::abs(dx), ay = std::abs(dy);
    switch (shape) {
        case 0: return dx * dx + dy * dy <= r * r;
        case 1: return ax <= r * 0.82 && ay <= r * 0.82;
        case 2: return dy >= -r && dy <= r && ax <= (r - dy) * 0.5;
        case 3: {
            double d2 = dx * dx + dy * dy;
            return d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r);
        }
        default: return (ax <= 0.33 * r && ay <= r) || (ay <= 0.33 * r && ax <= r);
    }
}

}  // namespace

Tensor SyntheticDataset::gather(const std::vector<int>& idx) const {
    int64_t stride = 3LL * image_size * image_size;
    Tensor out({static_cast<int>(idx.size()), 3, image_size, image_size});
    for (size_t b = 0; b < idx.size(); ++b) {
        if (idx[b] < 0 || idx[b] >= size()) fail("sample index out of range");
        std::copy_n(&images.vec()[idx[b] * stride], stride, &out.vec()[b * stride]);
    }
    return out;
}

std::vector<int> SyntheticDataset::gather_labels(const std::vector<int>& idx) const {
    std::vector<int> out(idx.size());
    for (size_t b = 0; b < idx.size(); ++b) {
        if (idx[b] < 0 || idx[b] >= size()) fail("sample index out of range");
        out[b] = labels[idx[b]];
    }
    return out;
}

Tensor SyntheticDataset::class_mean(int cls) const {
    if (cls < 0 || cls >= num_classes) fail("class out of range");
    Tensor mean({3, image_size, image_size});
    int64_t stride = mean.size();
    int count = 0;
    for (int i = 0; i < size(); ++i)
        if (labels[i] == cls) {
            for (int64_t j = 0; j < stride; ++j) mean[j] += images[i * stride + j];
            ++count;
        }
    if (count == 0) fail("class has no samples");
    for (int64_t j = 0; j < stride; ++j) mean[j] /= static_cast<float>(count);
    return mean;
}

SyntheticDataset synth_dataset(uint64_t seed, int num_classes, int image_size, int per_class) {
    if (num_classes < 2) fail("synthetic dataset needs at least 2 classes");
    if (image_size != 16 && image_size != 32)
        fail("synthetic dataset supports image sizes 16 and 32, got " +
             std::to_string(image_size));
    if (per_class < 1) fail("need at least one sample per class");
    if (num_classes > kNumShapes * kNumColors)
        fail("at most " + std::to_string(kNumShapes * kNumColors) + " distinct classes");

    SyntheticDataset ds;
    ds.num_classes = num_classes;
    ds.image_size = image_size;
    ds.per_class = per_class;
    ds.seed = seed;
    int n = num_classes * per_class;
    ds.images = Tensor({n, 3, image_size, image_size});
    ds.labels.resize(n);

    int64_t plane = static_cast<int64_t>(image_size) * image_size;
    double S = image_size;
    for (int cls = 0; cls < num_classes; ++cls) {
        // distinct (shape, color) pair per class; injective for < 30 classes,
        // and classes sharing a color sit two shape steps apart
        int shape = (cls + 2 * (cls / kNumColors)) % kNumShapes;
        int color = cls % kNumColors;
        for (int j = 0; j < per_class; ++j) {
            int i = cls * per_class + j;
            ds.labels[i] = cls;
            Rng rng(derive_seed(seed, "sample." + std::to_string(cls) + "." + std::to_string(j)));
            double cx = S / 2 + rng.uniform(-S / 8, S / 8);
            double cy = S / 2 + rng.uniform(-S / 8, S / 8);
            double r = rng.uniform(0.28, 0.42) * S;
            float bg = static_cast<float>(-0.85 + rng.uniform(-0.1, 0.1));
            float* px = &ds.images.vec()[i * 3 * plane];
            for (int y = 0; y < image_size; ++y)
                for (int x = 0; x < image_size; ++x) {
                    bool on = covers(shape, x + 0.5 - cx, y + 0.5 - cy, r);
                    for (int c = 0; c < 3; ++c)
                        px[c * plane + y * image_size + x] = on ? kPalette[color][c] : bg;
                }
        }
    }
    return ds;
}

}  // namespace ppcd
