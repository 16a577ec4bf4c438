#pragma once

#include <string>
#include <vector>

#include "ppcd/layers.hpp"
#include "ppcd/mask.hpp"

namespace ppcd {

struct BlockSpec {
    int in = 0;
    int out = 0;
    bool upsample = false;
};

struct GenConfig {
    int z_dim = 32;
    int num_classes = 8;
    int stem_size = 4;
    int image_channels = 3;
    std::vector<BlockSpec> blocks;
    int attn_after = 2;  // attention runs after this block index; -1 disables
    std::vector<int> distill_blocks = {1, 2, 3, 4};
    double alpha = 0.7;
    double delta = 1000.0;
    double pivot = 0.005;
    bool masked = true;  // false: teacher-style plain residual generator

    int image_size() const {
        int s = stem_size;
        for (const BlockSpec& b : blocks)
            if (b.upsample) s *= 2;
        return s;
    }

    void validate() const {
        if (z_dim <= 0 || num_classes < 2 || stem_size <= 0 || blocks.empty())
            fail("generator config: need z_dim > 0, >= 2 classes and a non-empty block list");
        for (size_t k = 0; k + 1 < blocks.size(); ++k)
            if (blocks[k].out != blocks[k + 1].in)
                fail("generator config: block " + std::to_string(k) + " emits " +
                     std::to_string(blocks[k].out) + " channels but block " +
                     std::to_string(k + 1) + " expects " + std::to_string(blocks[k + 1].in));
        if (attn_after >= static_cast<int>(blocks.size()))
            fail("generator config: attention position out of range");
        for (int d : distill_blocks)
            if (d < 0 || d >= static_cast<int>(blocks.size()))
                fail("generator config: distilled block index out of range");
    }
};

struct DBlockSpec {
    int in = 0;
    int out = 0;
    bool downsample = false;
};

struct DiscConfig {
    int num_classes = 8;
    int image_channels = 3;
    std::vector<DBlockSpec> blocks;
    bool spectral_norm = true;

    int feature_dim() const { return blocks.empty() ? 0 : blocks.back().out; }

    void validate() const {
        if (num_classes < 2 || blocks.empty()) fail("discriminator config: empty block list");
        if (blocks[0].in != image_channels)
            fail("discriminator config: first block must accept the image channels");
        for (size_t k = 0; k + 1 < blocks.size(); ++k)
            if (blocks[k].out != blocks[k + 1].in)
                fail("discriminator config: channel chain broken at block " + std::to_string(k));
    }
};

// Uniform-width defaults used by the desk-scale configs: stem 4x4, five
// generator blocks, upsampling front-loaded until the target size is reached.
inline GenConfig default_gen_config(int image_size, int width, int num_classes, int z_dim,
                                    bool masked = true) {
    if (image_size < 8 || (image_size & (image_size - 1)) != 0)
        fail("image size must be a power of two >= 8");
    GenConfig cfg;
    cfg.z_dim = z_dim;
    cfg.num_classes = num_classes;
    cfg.masked = masked;
    int ups = 0;
    for (int s = cfg.stem_size; s < image_size; s *= 2) ++ups;
    int n_blocks = std::max(5, ups);
    for (int k = 0; k < n_blocks; ++k) cfg.blocks.push_back({width, width, k < ups});
    cfg.attn_after = std::min(2, n_blocks - 1);
    cfg.distill_blocks.clear();
    for (int k = 1; k < n_blocks; ++k) cfg.distill_blocks.push_back(k);
    cfg.validate();
    return cfg;
}

inline DiscConfig default_disc_config(int image_size, int width, int num_classes) {
    DiscConfig cfg;
    cfg.num_classes = num_classes;
    int downs = 0;
    for (int s = image_size; s > 4; s /= 2) ++downs;
    cfg.blocks.push_back({cfg.image_channels, width, true});
    for (int k = 1; k < downs; ++k) cfg.blocks.push_back({width, width, true});
    cfg.blocks.push_back({width, width, false});
    cfg.validate();
    return cfg;
}

inline GenConfig teacher_config_for(const GenConfig& student, int width_factor = 2) {
    GenConfig t = student;
    t.masked = false;
    for (BlockSpec& b : t.blocks) {
        b.in *= width_factor;
        b.out *= width_factor;
    }
    return t;
}

// ---------------------------------------------------------------------------
// residual generator block (teacher, student and pruned variants)
// ---------------------------------------------------------------------------

template <typename T>
struct GBlockT {
    int in_ch = 0, out_ch = 0;
    int hidden1 = 0, hidden2 = 0;  // conv1/conv2 output widths
    bool upsample = false;
    bool has_masks = false;
    bool has_transition = false;

    CondBatchNormT<T> cbn1, cbn2;
    Conv2dT<T> conv1, conv2;
    MaskStateT<T> mask1, mask2;
    Conv2dT<T> transition;
    Conv2dT<T> skip;

    VarT<T> forward(CtxT<T>& ctx, VarT<T> x, const ClassBatchT<T>& cls) {
        if (x.value().dim(1) != in_ch)
            fail("block expects " + std::to_string(in_ch) + " input channels, got " +
                 shape_str(x.value().shape()));
        VarT<T> h = cbn1.forward(ctx, x, cls);
        h = ops::relu(h);
        if (upsample) h = ops::upsample_nearest2(h);
        h = conv1.forward(ctx, h);
        h = cbn2.forward(ctx, h, cls);
        if (has_masks) h = mask_forward(ctx, h, mask1);
        h = ops::relu(h);
        h = conv2.forward(ctx, h);
        if (has_masks) h = mask_forward(ctx, h, mask2);
        if (has_transition) h = transition.forward(ctx, h);
        VarT<T> s = x;
        if (upsample) s = ops::upsample_nearest2(s);
        s = skip.forward(ctx, s);
        return ops::add(h, s);
    }

    void collect_params(const std::string& p, ParamListT<T>& out) {
        cbn1.collect(p + ".cbn1", out);
        conv1.collect(p + ".conv1", out);
        cbn2.collect(p + ".cbn2", out);
        conv2.collect(p + ".conv2", out);
        if (has_masks) {
            mask1.collect_params(p + ".mask1", out);
            mask2.collect_params(p + ".mask2", out);
        }
        if (has_transition) transition.collect(p + ".transition", out);
        skip.collect(p + ".skip", out);
    }

    void collect_buffers(const std::string& p, ParamListT<T>& out) {
        cbn1.collect_buffers(p + ".cbn1", out);
        cbn2.collect_buffers(p + ".cbn2", out);
    }
};

template <typename T>
GBlockT<T> build_gblock(const BlockSpec& spec, int num_classes, bool masked, double alpha,
                        double delta, double pivot, uint64_t seed, const std::string& name) {
    GBlockT<T> b;
    b.in_ch = spec.in;
    b.out_ch = spec.out;
    b.hidden1 = spec.out;
    b.hidden2 = spec.out;
    b.upsample = spec.upsample;
    b.has_masks = masked;
    b.has_transition = masked;
    b.cbn1 = CondBatchNormT<T>(num_classes, b.in_ch);
    b.cbn2 = CondBatchNormT<T>(num_classes, b.hidden1);
    b.conv1 = Conv2dT<T>(b.in_ch, b.hidden1, 3);
    b.conv2 = Conv2dT<T>(b.hidden1, b.hidden2, 3);
    b.skip = Conv2dT<T>(b.in_ch, b.out_ch, 1);
    {
        Rng r(derive_seed(seed, name + ".conv1"));
        b.conv1.init(r);
    }
    {
        Rng r(derive_seed(seed, name + ".conv2"));
        b.conv2.init(r);
    }
    {
        Rng r(derive_seed(seed, name + ".skip"));
        b.skip.init(r);
    }
    {
        Rng r(derive_seed(seed, name + ".cbn"));
        init::normal(b.cbn1.gain.table, r);
        for (int64_t i = 0; i < b.cbn1.gain.table.size(); ++i) b.cbn1.gain.table[i] += T(1);
        init::normal(b.cbn1.bias.table, r);
        init::normal(b.cbn2.gain.table, r);
        for (int64_t i = 0; i < b.cbn2.gain.table.size(); ++i) b.cbn2.gain.table[i] += T(1);
        init::normal(b.cbn2.bias.table, r);
    }
    if (masked) {
        b.mask1 = MaskStateT<T>(b.hidden1, T(delta), T(alpha), T(pivot));
        b.mask2 = MaskStateT<T>(b.hidden2, T(delta), T(alpha), T(pivot));
        b.transition = make_transition<T>(b.hidden2, b.out_ch);
    }
    return b;
}

// ---------------------------------------------------------------------------
// generator
// ---------------------------------------------------------------------------

template <typename T>
struct GenOutT {
    VarT<T> image;
    std::vector<VarT<T>> taps;  // one per block, pre-attention
};

template <typename T>
struct GeneratorT {
    GenConfig cfg;
    LinearT<T> stem;
    std::vector<GBlockT<T>> blocks;
    SelfAttentionT<T> attn;
    BatchNormT<T> out_bn;
    Conv2dT<T> out_conv;

    GenOutT<T> forward(CtxT<T>& ctx, VarT<T> z, const ClassBatchT<T>& cls) {
        const TensorT<T>& zv = z.value();
        if (zv.rank() != 2 || zv.dim(1) != cfg.z_dim)
            fail("generator expects z of shape (B," + std::to_string(cfg.z_dim) + "), got " +
                 shape_str(zv.shape()));
        if (cls.batch() != zv.dim(0)) fail("class batch does not match noise batch");
        int B = zv.dim(0);
        VarT<T> x = stem.forward(ctx, z);
        x = ops::reshape(x, {B, cfg.blocks[0].in, cfg.stem_size, cfg.stem_size});
        GenOutT<T> out;
        for (size_t k = 0; k < blocks.size(); ++k) {
            x = blocks[k].forward(ctx, x, cls);
            out.taps.push_back(x);
            if (static_cast<int>(k) == cfg.attn_after) x = attn.forward(ctx, x);
        }
        x = out_bn.forward(ctx, x);
        x = ops::relu(x);
        x = out_conv.forward(ctx, x);
        out.image = ops::tanh_op(x);
        return out;
    }

    std::vector<MaskStateT<T>*> masks() {
        std::vector<MaskStateT<T>*> ms;
        for (GBlockT<T>& b : blocks)
            if (b.has_masks) {
                ms.push_back(&b.mask1);
                ms.push_back(&b.mask2);
            }
        return ms;
    }

    bool all_masks_frozen() {
        for (MaskStateT<T>* m : masks())
            if (!m->frozen) return false;
        return true;
    }

    void collect_params(const std::string& p, ParamListT<T>& out) {
        stem.collect(p + ".stem", out);
        for (size_t k = 0; k < blocks.size(); ++k)
            blocks[k].collect_params(p + ".block" + std::to_string(k), out);
        if (cfg.attn_after >= 0) attn.collect(p + ".attn", out);
        out_bn.collect(p + ".out_bn", out);
        out_conv.collect(p + ".out_conv", out);
    }

    void collect_buffers(const std::string& p, ParamListT<T>& out) {
        for (size_t k = 0; k < blocks.size(); ++k)
            blocks[k].collect_buffers(p + ".block" + std::to_string(k), out);
        out_bn.collect_buffers(p + ".out_bn", out);
        out_conv.collect_buffers(p + ".out_conv", out);
    }
};

template <typename T>
GeneratorT<T> build_generator(const GenConfig& cfg, uint64_t seed) {
    cfg.validate();
    GeneratorT<T> g;
    g.cfg = cfg;
    int c0 = cfg.blocks[0].in;
    g.stem = LinearT<T>(cfg.z_dim, c0 * cfg.stem_size * cfg.stem_size);
    {
        Rng r(derive_seed(seed, "stem"));
        g.stem.init(r);
    }
    for (size_t k = 0; k < cfg.blocks.size(); ++k)
        g.blocks.push_back(build_gblock<T>(cfg.blocks[k], cfg.num_classes, cfg.masked, cfg.alpha,
                                           cfg.delta, cfg.pivot, seed,
                                           "block" + std::to_string(k)));
    if (cfg.attn_after >= 0) {
        g.attn = SelfAttentionT<T>(cfg.blocks[static_cast<size_t>(cfg.attn_after)].out);
        Rng r(derive_seed(seed, "attn"));
        g.attn.init(r);
    }
    int last = cfg.blocks.back().out;
    g.out_bn = BatchNormT<T>(last);
    g.out_conv = Conv2dT<T>(last, cfg.image_channels, 3);
    {
        Rng r(derive_seed(seed, "out_conv"));
        g.out_conv.init(r);
    }
    return g;
}

// ---------------------------------------------------------------------------
// discriminator
// ---------------------------------------------------------------------------

template <typename T>
struct DBlockT {
    int in_ch = 0, out_ch = 0;
    bool downsample = false;
    bool first = false;
    Conv2dT<T> conv1, conv2, skip;

    VarT<T> forward(CtxT<T>& ctx, VarT<T> x) {
        VarT<T> h = first ? x : ops::relu(x);
        h = conv1.forward(ctx, h);
        h = ops::relu(h);
        h = conv2.forward(ctx, h);
        if (downsample) h = ops::avg_pool2(h);
        VarT<T> s = downsample ? ops::avg_pool2(x) : x;
        s = skip.forward(ctx, s);
        return ops::add(h, s);
    }

    void collect_params(const std::string& p, ParamListT<T>& out) {
        conv1.collect(p + ".conv1", out);
        conv2.collect(p + ".conv2", out);
        skip.collect(p + ".skip", out);
    }

    void collect_buffers(const std::string& p, ParamListT<T>& out) {
        conv1.collect_buffers(p + ".conv1", out);
        conv2.collect_buffers(p + ".conv2", out);
        skip.collect_buffers(p + ".skip", out);
    }
};

template <typename T>
struct DiscriminatorT {
    DiscConfig cfg;
    std::vector<DBlockT<T>> blocks;
    TensorT<T> head;  // [feature_dim]
    EmbeddingT<T> embed;
    SpectralNormT<T> head_sn, embed_sn;

    VarT<T> forward(CtxT<T>& ctx, VarT<T> image, const ClassBatchT<T>& cls) {
        const TensorT<T>& iv = image.value();
        if (iv.rank() != 4 || iv.dim(1) != cfg.image_channels)
            fail("discriminator expects (B," + std::to_string(cfg.image_channels) +
                 ",H,W) images, got " + shape_str(iv.shape()));
        VarT<T> x = image;
        for (DBlockT<T>& b : blocks) x = b.forward(ctx, x);
        x = ops::relu(x);
        VarT<T> feat = ops::sum_axes(x, {2, 3}, false);  // global sum pool -> [B,F]
        VarT<T> hw = ctx.param(head);
        hw = head_sn.apply(ctx, hw, head);
        VarT<T> table = ctx.param(embed.table);
        table = embed_sn.apply(ctx, table, embed.table);
        VarT<T> e = cls.is_soft() ? ops::matmul(ctx.constant(cls.soft), table)
                                  : ops::embedding_rows(table, cls.idx);
        VarT<T> uncond = ops::sum_axes(ops::mul(feat, hw), {1}, false);
        VarT<T> cond = ops::sum_axes(ops::mul(feat, e), {1}, false);
        return ops::add(uncond, cond);
    }

    void collect_params(const std::string& p, ParamListT<T>& out) {
        for (size_t k = 0; k < blocks.size(); ++k)
            blocks[k].collect_params(p + ".block" + std::to_string(k), out);
        out.push_back({p + ".head", &head});
        embed.collect(p + ".embed", out);
    }

    void collect_buffers(const std::string& p, ParamListT<T>& out) {
        for (size_t k = 0; k < blocks.size(); ++k)
            blocks[k].collect_buffers(p + ".block" + std::to_string(k), out);
        head_sn.collect_buffers(p + ".head", out);
        embed_sn.collect_buffers(p + ".embed", out);
    }
};

template <typename T>
DiscriminatorT<T> build_discriminator(const DiscConfig& cfg, uint64_t seed) {
    cfg.validate();
    DiscriminatorT<T> d;
    d.cfg = cfg;
    for (size_t k = 0; k < cfg.blocks.size(); ++k) {
        const DBlockSpec& s = cfg.blocks[k];
        DBlockT<T> b;
        b.in_ch = s.in;
        b.out_ch = s.out;
        b.downsample = s.downsample;
        b.first = (k == 0);
        b.conv1 = Conv2dT<T>(s.in, s.out, 3);
        b.conv2 = Conv2dT<T>(s.out, s.out, 3);
        b.skip = Conv2dT<T>(s.in, s.out, 1);
        std::string name = "block" + std::to_string(k);
        {
            Rng r(derive_seed(seed, name + ".conv1"));
            b.conv1.init(r);
            if (cfg.spectral_norm) b.conv1.enable_spectral_norm(r);
        }
        {
            Rng r(derive_seed(seed, name + ".conv2"));
            b.conv2.init(r);
            if (cfg.spectral_norm) b.conv2.enable_spectral_norm(r);
        }
        {
            Rng r(derive_seed(seed, name + ".skip"));
            b.skip.init(r);
            if (cfg.spectral_norm) b.skip.enable_spectral_norm(r);
        }
        d.blocks.push_back(std::move(b));
    }
    int F = cfg.feature_dim();
    d.head = TensorT<T>({F});
    d.embed = EmbeddingT<T>(cfg.num_classes, F);
    {
        Rng r(derive_seed(seed, "head"));
        init::normal(d.head, r);
        if (cfg.spectral_norm) {
            d.head_sn.init(F, 1, r);
            d.head_sn.warm_up(d.head);
        }
    }
    {
        Rng r(derive_seed(seed, "embed"));
        init::normal(d.embed.table, r);
        if (cfg.spectral_norm) {
            d.embed_sn.init(cfg.num_classes, F, r);
            d.embed_sn.warm_up(d.embed.table);
        }
    }
    return d;
}

using Generator = GeneratorT<float>;
using Discriminator = DiscriminatorT<float>;

}  // namespace ppcd
