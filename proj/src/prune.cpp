#include "ppcd/prune.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace ppcd {
namespace {

Tensor gather_dim0(const Tensor& t, const std::vector<int>& keep) {
    Shape shape = t.shape();
    int64_t stride = 1;
    for (size_t d = 1; d < shape.size(); ++d) stride *= shape[d];
    shape[0] = static_cast<int>(keep.size());
    Tensor out(shape);
    for (size_t i = 0; i < keep.size(); ++i)
        std::copy_n(&t.vec()[keep[i] * stride], stride, &out.vec()[i * stride]);
    return out;
}

Tensor gather_dim1(const Tensor& t, const std::vector<int>& keep) {
    Shape shape = t.shape();
    int64_t inner = 1;
    for (size_t d = 2; d < shape.size(); ++d) inner *= shape[d];
    int64_t old_cols = shape[1];
    shape[1] = static_cast<int>(keep.size());
    Tensor out(shape);
    for (int64_t r = 0; r < t.dim(0); ++r)
        for (size_t i = 0; i < keep.size(); ++i)
            std::copy_n(&t.vec()[(r * old_cols + keep[i]) * inner],
                        inner, &out.vec()[(r * static_cast<int64_t>(shape[1]) + static_cast<int64_t>(i)) * inner]);
    return out;
}

Conv2d slice_conv_out(const Conv2d& c, const std::vector<int>& keep) {
    Conv2d out = c;
    out.weight = gather_dim0(c.weight, keep);
    out.bias = gather_dim0(c.bias, keep);
    return out;
}

Conv2d slice_conv_in(const Conv2d& c, const std::vector<int>& keep) {
    Conv2d out = c;
    out.weight = gather_dim1(c.weight, keep);
    return out;
}

CondBatchNorm slice_cbn(const CondBatchNorm& n, const std::vector<int>& keep) {
    CondBatchNorm out = n;
    out.channels = static_cast<int>(keep.size());
    out.gain.dim = out.channels;
    out.bias.dim = out.channels;
    out.gain.table = gather_dim1(n.gain.table, keep);
    out.bias.table = gather_dim1(n.bias.table, keep);
    out.running_mean = gather_dim0(n.running_mean, keep);
    out.running_var = gather_dim0(n.running_var, keep);
    return out;
}

}  // namespace

Generator strip_and_rewire(Generator& masked) {
    for (MaskState* m : masked.masks())
        if (!m->frozen) fail("binarization incomplete: every mask must be frozen before export");
    Generator p;
    p.cfg = masked.cfg;
    p.cfg.masked = false;
    p.stem = masked.stem;
    p.attn = masked.attn;
    p.out_bn = masked.out_bn;
    p.out_conv = masked.out_conv;
    for (GBlockT<float>& b : masked.blocks) {
        GBlockT<float> nb;
        nb.in_ch = b.in_ch;
        nb.out_ch = b.out_ch;
        nb.upsample = b.upsample;
        nb.has_masks = false;
        nb.has_transition = b.has_transition;
        nb.cbn1 = b.cbn1;
        nb.skip = b.skip;
        if (b.has_masks) {
            std::vector<int> s1 = active_channels(b.mask1);
            std::vector<int> s2 = active_channels(b.mask2);
            nb.hidden1 = static_cast<int>(s1.size());
            nb.hidden2 = static_cast<int>(s2.size());
            nb.conv1 = slice_conv_out(b.conv1, s1);
            nb.cbn2 = slice_cbn(b.cbn2, s1);
            nb.conv2 = slice_conv_in(slice_conv_out(b.conv2, s2), s1);
            nb.transition = slice_conv_in(b.transition, s2);
        } else {
            nb.hidden1 = b.hidden1;
            nb.hidden2 = b.hidden2;
            nb.conv1 = b.conv1;
            nb.cbn2 = b.cbn2;
            nb.conv2 = b.conv2;
            nb.transition = b.transition;
        }
        p.blocks.push_back(std::move(nb));
    }
    return p;
}

std::vector<std::pair<int, int>> hidden_widths(const Generator& g) {
    std::vector<std::pair<int, int>> out;
    for (const GBlockT<float>& b : g.blocks) out.push_back({b.hidden1, b.hidden2});
    return out;
}

Generator build_pruned_shell(const GenConfig& cfg, const std::vector<std::pair<int, int>>& hidden,
                             uint64_t seed) {
    if (hidden.size() != cfg.blocks.size())
        fail("hidden width list does not match the block count");
    GenConfig shell_cfg = cfg;
    shell_cfg.masked = false;
    Generator g = build_generator<float>(shell_cfg, seed);
    for (size_t k = 0; k < g.blocks.size(); ++k) {
        GBlockT<float>& b = g.blocks[k];
        auto [h1, h2] = hidden[k];
        if (h1 < 0 || h2 < 0) fail("hidden widths must be non-negative");
        b.hidden1 = h1;
        b.hidden2 = h2;
        b.has_transition = true;
        b.conv1 = Conv2d(b.in_ch, h1, 3);
        b.cbn2 = CondBatchNorm(cfg.num_classes, h1);
        b.conv2 = Conv2d(h1, h2, 3);
        b.transition = Conv2d(h2, b.out_ch, 1);
    }
    return g;
}

double equivalence_check(Generator& a, Generator& b, int trials, uint64_t seed, int batch) {
    if (a.cfg.z_dim != b.cfg.z_dim || a.cfg.num_classes != b.cfg.num_classes)
        fail("models disagree on noise or class dimensions");
    Rng rng(seed);
    double worst = 0;
    for (int t = 0; t < trials; ++t) {
        Tensor z({batch, a.cfg.z_dim});
        rng.fill_normal(z, 0.0, 1.0);
        std::vector<int> cls(batch);
        for (int& c : cls) c = rng.uniform_int(0, a.cfg.num_classes - 1);
        Tape ta, tb;
        Ctx xa{&ta, false, false, false}, xb{&tb, false, false, false};
        Tensor ia = a.forward(xa, ta.leaf(z), ClassBatch::hard(cls)).image.value();
        Tensor ib = b.forward(xb, tb.leaf(z), ClassBatch::hard(cls)).image.value();
        if (!ia.same_shape(ib))
            fail("output shape mismatch: " + shape_str(ia.shape()) + " vs " +
                 shape_str(ib.shape()));
        for (int64_t i = 0; i < ia.size(); ++i)
            worst = std::max(worst, static_cast<double>(std::abs(ia[i] - ib[i])));
    }
    return worst;
}

namespace {

long long conv_params(const Conv2d& c) { return c.weight.size() + c.bias.size(); }

long long conv_macs(const Conv2d& c, int out_hw) {
    // k^2 * Cin * Cout * Hout * Wout
    return static_cast<long long>(c.weight.size()) * out_hw * out_hw;
}

}  // namespace

std::vector<LayerCount> count_generator(const Generator& g) {
    const GenConfig& cfg = g.cfg;
    if (cfg.stem_size <= 0) fail("generator spatial schedule is degenerate");
    std::vector<LayerCount> rows;
    int c0 = cfg.blocks[0].in;
    long long stem_out = static_cast<long long>(c0) * cfg.stem_size * cfg.stem_size;
    rows.push_back({"g.stem", static_cast<long long>(g.stem.weight.size()) + g.stem.bias.size(),
                    static_cast<long long>(cfg.z_dim) * stem_out, c0});
    int s = cfg.stem_size;
    for (size_t k = 0; k < g.blocks.size(); ++k) {
        const GBlockT<float>& b = g.blocks[k];
        std::string base = "g.block" + std::to_string(k);
        if (b.upsample) s *= 2;
        int K = cfg.num_classes;
        rows.push_back({base + ".cbn1", 2LL * K * b.in_ch, 0, b.in_ch});
        rows.push_back({base + ".conv1", conv_params(b.conv1), conv_macs(b.conv1, s), b.hidden1});
        rows.push_back({base + ".cbn2", 2LL * K * b.hidden1, 0, b.hidden1});
        if (b.has_masks)
            rows.push_back({base + ".mask1", b.mask1.n(), 0, b.hidden1});
        rows.push_back({base + ".conv2", conv_params(b.conv2), conv_macs(b.conv2, s), b.hidden2});
        if (b.has_masks)
            rows.push_back({base + ".mask2", b.mask2.n(), 0, b.hidden2});
        if (b.has_transition)
            rows.push_back({base + ".transition", conv_params(b.transition),
                            conv_macs(b.transition, s), b.out_ch});
        rows.push_back({base + ".skip", conv_params(b.skip), conv_macs(b.skip, s), b.out_ch});
        if (static_cast<int>(k) == cfg.attn_after) {
            const SelfAttentionT<float>& a = g.attn;
            long long hw = static_cast<long long>(s) * s;
            long long conv_part = conv_macs(a.f, s) + conv_macs(a.g, s) + conv_macs(a.h, s);
            long long bmm_part = hw * hw * (a.channels / a.reduction) + hw * hw * a.channels;
            rows.push_back({"g.attn",
                            conv_params(a.f) + conv_params(a.g) + conv_params(a.h) +
                                a.gamma.size(),
                            conv_part + bmm_part, a.channels});
        }
    }
    int last = g.blocks.back().out_ch;
    rows.push_back({"g.out_bn", 2LL * last, 0, last});
    rows.push_back({"g.out_conv", conv_params(g.out_conv), conv_macs(g.out_conv, s),
                    cfg.image_channels});
    return rows;
}

std::vector<LayerCount> count_discriminator(const Discriminator& d, int image_size) {
    if (image_size <= 0) fail("discriminator needs a positive input size");
    std::vector<LayerCount> rows;
    int s = image_size;
    for (size_t k = 0; k < d.blocks.size(); ++k) {
        const DBlockT<float>& b = d.blocks[k];
        std::string base = "d.block" + std::to_string(k);
        rows.push_back({base + ".conv1", conv_params(b.conv1), conv_macs(b.conv1, s), b.out_ch});
        rows.push_back({base + ".conv2", conv_params(b.conv2), conv_macs(b.conv2, s), b.out_ch});
        if (b.downsample) s /= 2;
        rows.push_back({base + ".skip", conv_params(b.skip), conv_macs(b.skip, s), b.out_ch});
        if (s <= 0) fail("discriminator spatial schedule collapsed to zero");
    }
    int F = d.cfg.feature_dim();
    rows.push_back({"d.head", F, F, F});
    rows.push_back({"d.embed", static_cast<long long>(d.embed.table.size()), F, F});
    return rows;
}

long long total_params(const std::vector<LayerCount>& rows) {
    long long n = 0;
    for (const auto& r : rows) n += r.params;
    return n;
}

long long total_macs(const std::vector<LayerCount>& rows) {
    long long n = 0;
    for (const auto& r : rows) n += r.macs;
    return n;
}

PruneReport make_prune_report(const Generator& masked, const Generator& pruned) {
    std::vector<LayerCount> before = count_generator(masked);
    std::vector<LayerCount> after = count_generator(pruned);
    PruneReport rep;
    for (const LayerCount& b : before) {
        PruneRow row;
        row.name = b.name;
        row.params_before = b.params;
        row.macs_before = b.macs;
        row.channels_before = b.channels;
        for (const LayerCount& a : after)
            if (a.name == b.name) {
                row.params_after = a.params;
                row.macs_after = a.macs;
                row.channels_after = a.channels;
            }
        rep.rows.push_back(row);
        rep.params_before += row.params_before;
        rep.params_after += row.params_after;
        rep.macs_before += row.macs_before;
        rep.macs_after += row.macs_after;
    }
    return rep;
}

std::string PruneReport::to_csv() const {
    std::string out =
        "name,params_before,params_after,macs_before,macs_after,channels_before,channels_after\n";
    char buf[256];
    for (const PruneRow& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%lld,%lld,%lld,%lld,%d,%d\n", r.name.c_str(),
                      r.params_before, r.params_after, r.macs_before, r.macs_after,
                      r.channels_before, r.channels_after);
        out += buf;
    }
    std::snprintf(buf, sizeof buf, "total,%lld,%lld,%lld,%lld,,\n", params_before, params_after,
                  macs_before, macs_after);
    out += buf;
    return out;
}

std::string PruneReport::to_table() const {
    char buf[256];
    std::string out;
    std::snprintf(buf, sizeof buf, "%-24s %12s %12s %14s %14s %9s\n", "layer", "params", "pruned",
                  "macs", "pruned", "channels");
    out += buf;
    for (const PruneRow& r : rows) {
        std::snprintf(buf, sizeof buf, "%-24s %12lld %12lld %14lld %14lld %4d->%-4d\n",
                      r.name.c_str(), r.params_before, r.params_after, r.macs_before,
                      r.macs_after, r.channels_before, r.channels_after);
        out += buf;
    }
    std::snprintf(buf, sizeof buf, "%-24s %12lld %12lld %14lld %14lld\n", "total", params_before,
                  params_after, macs_before, macs_after);
    out += buf;
    std::snprintf(buf, sizeof buf, "compression: %.2fx params, %.2fx macs\n", param_factor(),
                  mac_factor());
    out += buf;
    return out;
}

}  // namespace ppcd
