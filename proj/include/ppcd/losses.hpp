#pragma once

#include <string>
#include <vector>

#include "ppcd/model.hpp"

namespace ppcd {

enum class AdvLoss { non_saturating, saturating, hinge };

inline AdvLoss adv_loss_from_string(const std::string& s) {
    if (s == "non_saturating") return AdvLoss::non_saturating;
    if (s == "saturating") return AdvLoss::saturating;
    if (s == "hinge") return AdvLoss::hinge;
    fail("unknown adversarial loss '" + s + "'; expected non_saturating, saturating or hinge");
}

inline const char* to_string(AdvLoss k) {
    switch (k) {
        case AdvLoss::non_saturating: return "non_saturating";
        case AdvLoss::saturating: return "saturating";
        default: return "hinge";
    }
}

// Per-step loss readings for the metrics stream.
struct LossBundle {
    double l_pp = 0;
    double l_cd = 0;
    double l_adv_d = 0;
    double l_adv_g = 0;
    double total_g = 0;
};

// Collapse a feature stack to a per-sample energy map: sum of squared
// activations over channels. Works for any channel count, so teacher and
// student maps are comparable even when their widths differ.
template <typename T>
VarT<T> attention_map(VarT<T> x) {
    if (x.value().rank() != 4) fail("attention map expects (B,C,H,W), got " + shape_str(x.shape()));
    return ops::sum_axes(ops::square(x), {1}, false);
}

// Per-sample spatial standardization of teacher features followed by a
// trainable class-conditional affine, so the comparison target carries class
// identity instead of leaking it through raw feature statistics.
template <typename T>
struct ClassCondNormT {
    int channels = 0;
    T eps = T(1e-5);
    EmbeddingT<T> gain, bias;

    ClassCondNormT() = default;
    ClassCondNormT(int num_classes, int channels_)
        : channels(channels_), gain(num_classes, channels_), bias(num_classes, channels_) {
        for (int64_t i = 0; i < gain.table.size(); ++i) gain.table[i] = T(1);
    }

    VarT<T> forward(CtxT<T>& ctx, VarT<T> x, const ClassBatchT<T>& cls) {
        const Shape shape = x.value().shape();
        if (shape.size() != 4 || shape[1] != channels)
            fail("class-conditional norm expects (B," + std::to_string(channels) +
                 ",H,W) features, got " + shape_str(shape));
        if (shape[2] * shape[3] < 2)
            fail("class-conditional norm needs at least two spatial positions, got " +
                 shape_str(shape));
        if (cls.batch() != shape[0]) fail("class batch does not match feature batch");
        VarT<T> mean = ops::mean_axes(x, {2, 3}, true);
        VarT<T> centered = ops::sub(x, mean);
        VarT<T> var = ops::mean_axes(ops::square(centered), {2, 3}, true);
        VarT<T> xhat = ops::div(centered, ops::sqrt_op(ops::scalar_add(var, eps)));
        VarT<T> g = ops::reshape(gain.lookup(ctx, cls), {shape[0], channels, 1, 1});
        VarT<T> b = ops::reshape(bias.lookup(ctx, cls), {shape[0], channels, 1, 1});
        return ops::add(ops::mul(xhat, g), b);
    }

    void collect(const std::string& prefix, ParamListT<T>& params) {
        gain.collect(prefix + ".gain", params);
        bias.collect(prefix + ".bias", params);
    }
};

using ClassCondNorm = ClassCondNormT<float>;

// Distance between l2-normalized attention maps, averaged over the batch.
// A map whose norm falls below 1e-12 is treated as the zero map; such guard
// hits are counted through `zero_norm_guards` so callers can log them.
template <typename T>
VarT<T> distill_loss(VarT<T> f_t, VarT<T> f_s, int* zero_norm_guards = nullptr) {
    const TensorT<T>& a = f_t.value();
    if (a.rank() != 3 || !a.same_shape(f_s.value()))
        fail("distillation maps must share one (B,H,W) shape, got " + shape_str(a.shape()) +
             " vs " + shape_str(f_s.value().shape()));
    int B = a.dim(0);
    int hw = a.dim(1) * a.dim(2);
    auto normalize = [&](VarT<T> f) {
        VarT<T> flat = ops::reshape(f, {B, hw});
        VarT<T> norm = ops::sqrt_op(ops::sum_axes(ops::square(flat), {1}, true));
        TensorT<T> keep({B, 1});
        for (int i = 0; i < B; ++i) {
            bool dead = norm.value()[i] < T(1e-12);
            keep[i] = dead ? T(0) : T(1);
            if (dead && zero_norm_guards) ++*zero_norm_guards;
        }
        return ops::div(ops::mul(flat, f.tape->constant(keep)), ops::clamp_min(norm, T(1e-12)));
    };
    VarT<T> diff = ops::sub(normalize(f_t), normalize(f_s));
    VarT<T> per_sample = ops::sqrt_op(ops::sum_axes(ops::square(diff), {1}, false));
    return ops::mean_all(per_sample);
}

// Mean of the per-layer mask regularizers. Frozen masks contribute their
// freeze-time constant, so they add to the reading but not to the gradient.
template <typename T>
VarT<T> aggregate_pp(CtxT<T>& ctx, const std::vector<MaskStateT<T>*>& masks) {
    if (masks.empty()) fail("pruning aggregation needs at least one mask layer");
    VarT<T> total;
    for (MaskStateT<T>* m : masks) {
        VarT<T> li = m->frozen ? ctx.constant(TensorT<T>::scalar(m->frozen_reg))
                               : mask_regularizer(ctx, *m);
        total = total.valid() ? ops::add(total, li) : li;
    }
    return ops::scalar_mul(total, T(1) / T(masks.size()));
}

template <typename T>
VarT<T> aggregate_cd(const std::vector<VarT<T>>& per_block) {
    if (per_block.empty())
        fail("distillation aggregation over zero blocks; disable distillation explicitly instead");
    VarT<T> total = per_block[0];
    for (size_t k = 1; k < per_block.size(); ++k) total = ops::add(total, per_block[k]);
    return ops::scalar_mul(total, T(1) / T(per_block.size()));
}

template <typename T>
struct AdvPairT {
    VarT<T> d;  // discriminator objective
    VarT<T> g;  // generator objective
};

template <typename T>
AdvPairT<T> adversarial_losses(VarT<T> d_real, VarT<T> d_fake,
                               AdvLoss kind = AdvLoss::non_saturating) {
    using namespace ops;
    if (kind == AdvLoss::hinge) {
        VarT<T> ld = add(mean_all(relu(scalar_add(neg(d_real), T(1)))),
                         mean_all(relu(scalar_add(d_fake, T(1)))));
        return {ld, neg(mean_all(d_fake))};
    }
    auto log_clamped = [](VarT<T> p) { return log_op(clamp_min(p, T(1e-12))); };
    VarT<T> pr = sigmoid(d_real);
    VarT<T> pf = sigmoid(d_fake);
    VarT<T> one_minus_pf = scalar_add(neg(pf), T(1));
    VarT<T> ld = neg(add(mean_all(log_clamped(pr)), mean_all(log_clamped(one_minus_pf))));
    VarT<T> lg = kind == AdvLoss::saturating ? mean_all(log_clamped(one_minus_pf))
                                             : neg(mean_all(log_clamped(pf)));
    return {ld, lg};
}

template <typename T>
VarT<T> total_loss(VarT<T> l_pp, VarT<T> l_cd, VarT<T> l_adv_g, T pp_weight = T(0.01)) {
    return ops::add(ops::add(ops::scalar_mul(l_pp, pp_weight), l_cd), l_adv_g);
}

// The distillation stack: one class-conditional normalizer per distilled
// block, applied to teacher taps only (the student's own conditioning lives
// inside its blocks). Normalizer tables train jointly with the student.
template <typename T>
struct DistillHeadT {
    std::vector<int> blocks;
    std::vector<ClassCondNormT<T>> norms;

    VarT<T> forward(CtxT<T>& ctx, const std::vector<VarT<T>>& teacher_taps,
                    const std::vector<VarT<T>>& student_taps, const ClassBatchT<T>& cls,
                    int* zero_norm_guards = nullptr) {
        std::vector<VarT<T>> per;
        for (size_t j = 0; j < blocks.size(); ++j) {
            size_t k = static_cast<size_t>(blocks[j]);
            if (k >= teacher_taps.size() || k >= student_taps.size())
                fail("distilled block index out of range");
            VarT<T> ft = attention_map(norms[j].forward(ctx, teacher_taps[k], cls));
            VarT<T> fs = attention_map(student_taps[k]);
            per.push_back(distill_loss(ft, fs, zero_norm_guards));
        }
        return aggregate_cd(per);
    }

    void collect_params(const std::string& prefix, ParamListT<T>& params) {
        for (size_t j = 0; j < norms.size(); ++j)
            norms[j].collect(prefix + ".ccn" + std::to_string(blocks[j]), params);
    }
};

using DistillHead = DistillHeadT<float>;

template <typename T>
DistillHeadT<T> build_distill_head(const GenConfig& student_cfg, const GenConfig& teacher_cfg) {
    if (student_cfg.blocks.size() != teacher_cfg.blocks.size())
        fail("teacher and student must have the same block count");
    DistillHeadT<T> head;
    head.blocks = student_cfg.distill_blocks;
    for (int k : head.blocks)
        head.norms.emplace_back(teacher_cfg.num_classes,
                                teacher_cfg.blocks[static_cast<size_t>(k)].out);
    return head;
}

}  // namespace ppcd
