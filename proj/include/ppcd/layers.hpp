#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "ppcd/tape.hpp"

namespace ppcd {

// Parameter/buffer registry entry. Registries are plain ordered vectors so
// walking them is deterministic.
template <typename T>
struct ParamRefT {
    std::string name;
    TensorT<T>* tensor;
};

template <typename T>
using ParamListT = std::vector<ParamRefT<T>>;

using ParamList = ParamListT<float>;

// Per-graph context. `trainable` decides whether parameter leaves require
// grad; `training` selects batch vs running statistics; `update_state`
// gates mutation of running stats and power-iteration vectors.
template <typename T>
struct CtxT {
    TapeT<T>* tape = nullptr;
    bool trainable = true;
    bool training = true;
    bool update_state = true;

    CtxT() = default;
    explicit CtxT(TapeT<T>* tp, bool trainable_ = true, bool training_ = true,
                  bool update_state_ = true)
        : tape(tp), trainable(trainable_), training(training_), update_state(update_state_) {}

    // param -> leaf bindings, in first-use order
    std::vector<std::pair<TensorT<T>*, VarT<T>>> bound;

    VarT<T> param(TensorT<T>& t) {
        auto it = cache_.find(&t);
        if (it != cache_.end()) return it->second;
        VarT<T> v = tape->leaf(t, trainable);
        cache_.emplace(&t, v);
        if (trainable) bound.push_back({&t, v});
        return v;
    }

    VarT<T> constant(TensorT<T> t) { return tape->leaf(std::move(t), false); }

    // Route a parameter through an externally created leaf (used by the
    // finite-difference checks to perturb a layer's weights from outside).
    void bind(TensorT<T>& t, VarT<T> v) { cache_[&t] = v; }

private:
    std::unordered_map<TensorT<T>*, VarT<T>> cache_;
};

using Ctx = CtxT<float>;

// A batch of class conditions: hard indices or a soft mixture over classes.
template <typename T>
struct ClassBatchT {
    std::vector<int> idx;  // used when soft is empty
    TensorT<T> soft;       // [B, num_classes]

    static ClassBatchT hard(std::vector<int> indices) { return ClassBatchT{std::move(indices), {}}; }
    static ClassBatchT mixture(TensorT<T> weights) { return ClassBatchT{{}, std::move(weights)}; }

    bool is_soft() const { return soft.size() > 0; }
    int batch() const {
        return is_soft() ? soft.dim(0) : static_cast<int>(idx.size());
    }
};

using ClassBatch = ClassBatchT<float>;

namespace init {

template <typename T>
void normal(TensorT<T>& t, Rng& rng, double stddev = 0.02) {
    rng.fill_normal(t, 0.0, stddev);
}

template <typename T>
void constant(TensorT<T>& t, T v) {
    std::fill(t.vec().begin(), t.vec().end(), v);
}

}  // namespace init

// ---------------------------------------------------------------------------
// embedding table
// ---------------------------------------------------------------------------

template <typename T>
struct EmbeddingT {
    int num_classes = 0;
    int dim = 0;
    TensorT<T> table;  // [num_classes, dim]

    EmbeddingT() = default;
    EmbeddingT(int k, int d) : num_classes(k), dim(d), table({k, d}) {}

    VarT<T> lookup(CtxT<T>& ctx, const ClassBatchT<T>& cls) {
        VarT<T> tab = ctx.param(table);
        if (cls.is_soft()) {
            if (cls.soft.rank() != 2 || cls.soft.dim(1) != num_classes)
                fail("class mixture must be (B," + std::to_string(num_classes) + "), got " +
                     shape_str(cls.soft.shape()));
            return ops::matmul(ctx.constant(cls.soft), tab);
        }
        return ops::embedding_rows(tab, cls.idx);
    }

    void collect(const std::string& prefix, ParamListT<T>& params) {
        params.push_back({prefix + ".table", &table});
    }
};

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

template <typename T>
struct LinearT {
    TensorT<T> weight;  // [in, out] so forward is x @ W
    TensorT<T> bias;    // [out]

    LinearT() = default;
    LinearT(int in, int out) : weight({in, out}), bias({out}) {}

    void init(Rng& rng) { init::normal(weight, rng); }

    VarT<T> forward(CtxT<T>& ctx, VarT<T> x) {
        return ops::add(ops::matmul(x, ctx.param(weight)), ctx.param(bias));
    }

    void collect(const std::string& prefix, ParamListT<T>& params) {
        params.push_back({prefix + ".weight", &weight});
        params.push_back({prefix + ".bias", &bias});
    }
};

// ---------------------------------------------------------------------------
// spectral normalization
// ---------------------------------------------------------------------------

template <typename T>
struct SpectralNormT {
    bool enabled = false;
    TensorT<T> u;  // [rows]
    TensorT<T> v;  // [cols]

    void init(int rows, int cols, Rng& rng) {
        enabled = true;
        u = TensorT<T>({rows});
        v = TensorT<T>({cols});
        rng.fill_normal(u, 0.0, 1.0);
        rng.fill_normal(v, 0.0, 1.0);
        normalize(u);
        normalize(v);
    }

    // Settle u,v on the initial weight so the first sigma estimate is already
    // close to the top singular value; afterwards one step per training step
    // keeps tracking the slowly moving weights.
    void warm_up(const TensorT<T>& host, int iters = 20) {
        if (!enabled) return;
        int rows = host.dim(0);
        int cols = static_cast<int>(host.size() / std::max(1, rows));
        for (int k = 0; k < iters; ++k) power_iteration(host, rows, cols);
    }

    // One power-iteration step on the matricized weight (rows = dim 0 of
    // `host`, cols = rest), then divide by sigma = u^T W v on the tape.
    VarT<T> apply(CtxT<T>& ctx, VarT<T> w, TensorT<T>& host) {
        if (!enabled) return w;
        int rows = host.dim(0);
        int cols = static_cast<int>(host.size() / rows);
        if (ctx.update_state) power_iteration(host, rows, cols);
        VarT<T> w2 = ops::reshape(w, {rows, cols});
        VarT<T> ur = ctx.constant(TensorT<T>({1, rows}, u.vec()));
        VarT<T> vc = ctx.constant(TensorT<T>({cols, 1}, v.vec()));
        VarT<T> sigma = ops::reshape(ops::matmul(ops::matmul(ur, w2), vc), {1});
        return ops::div(w, ops::clamp_min(sigma, T(1e-12)));
    }

    // Current sigma estimate without touching the tape.
    T sigma_estimate(const TensorT<T>& host) const {
        int rows = host.dim(0);
        int cols = static_cast<int>(host.size() / rows);
        T s = T(0);
        for (int i = 0; i < rows; ++i) {
            T acc = T(0);
            for (int j = 0; j < cols; ++j) acc += host[static_cast<int64_t>(i) * cols + j] * v[j];
            s += u[i] * acc;
        }
        return s;
    }

    void power_iteration(const TensorT<T>& host, int rows, int cols) {
        std::vector<T> vn(static_cast<size_t>(cols), T(0));
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) vn[static_cast<size_t>(j)] += host[static_cast<int64_t>(i) * cols + j] * u[i];
        assign_normalized(v, vn);
        std::vector<T> un(static_cast<size_t>(rows), T(0));
        for (int i = 0; i < rows; ++i) {
            T acc = T(0);
            for (int j = 0; j < cols; ++j) acc += host[static_cast<int64_t>(i) * cols + j] * v[j];
            un[static_cast<size_t>(i)] = acc;
        }
        assign_normalized(u, un);
    }

    void collect_buffers(const std::string& prefix, ParamListT<T>& bufs) {
        if (!enabled) return;
        bufs.push_back({prefix + ".sn_u", &u});
        bufs.push_back({prefix + ".sn_v", &v});
    }

private:
    static void normalize(TensorT<T>& x) {
        T n = T(0);
        for (int64_t i = 0; i < x.size(); ++i) n += x[i] * x[i];
        n = std::sqrt(n);
        if (n > T(1e-12))
            for (int64_t i = 0; i < x.size(); ++i) x[i] /= n;
    }

    // Keep the previous vector when the image collapses (zero weight).
    void assign_normalized(TensorT<T>& dst, const std::vector<T>& src) {
        T n = T(0);
        for (T x : src) n += x * x;
        n = std::sqrt(n);
        if (n <= T(1e-12)) return;
        for (int64_t i = 0; i < dst.size(); ++i) dst[i] = src[static_cast<size_t>(i)] / n;
    }
};

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

template <typename T>
struct Conv2dT {
    TensorT<T> weight;  // [out, in, k, k]
    TensorT<T> bias;    // [out]
    int stride = 1;
    int pad = 0;
    SpectralNormT<T> sn;

    Conv2dT() = default;
    Conv2dT(int in, int out, int k, int stride_ = 1, int pad_ = -1)
        : weight({out, in, k, k}), bias({out}), stride(stride_), pad(pad_ < 0 ? k / 2 : pad_) {}

    void init(Rng& rng) { init::normal(weight, rng); }

    void enable_spectral_norm(Rng& rng) {
        sn.init(weight.dim(0), static_cast<int>(weight.size() / std::max(1, weight.dim(0))), rng);
        sn.warm_up(weight);
    }

    VarT<T> forward(CtxT<T>& ctx, VarT<T> x) {
        VarT<T> w = ctx.param(weight);
        w = sn.apply(ctx, w, weight);
        return ops::conv2d(x, w, ctx.param(bias), stride, pad);
    }

    void collect(const std::string& prefix, ParamListT<T>& params) {
        params.push_back({prefix + ".weight", &weight});
        params.push_back({prefix + ".bias", &bias});
    }

    void collect_buffers(const std::string& prefix, ParamListT<T>& bufs) {
        sn.collect_buffers(prefix, bufs);
    }
};

// ---------------------------------------------------------------------------
// conditional batch normalization
// ---------------------------------------------------------------------------

template <typename T>
struct CondBatchNormT {
    int channels = 0;
    T eps = T(1e-5);
    T momentum = T(0.1);
    EmbeddingT<T> gain;  // rows init to 1
    EmbeddingT<T> bias;  // rows init to 0
    TensorT<T> running_mean;
    TensorT<T> running_var;

    CondBatchNormT() = default;
    CondBatchNormT(int num_classes, int ch)
        : channels(ch),
          gain(num_classes, ch),
          bias(num_classes, ch),
          running_mean({ch}),
          running_var({ch}) {
        init::constant(gain.table, T(1));
        init::constant(running_var, T(1));
    }

    VarT<T> forward(CtxT<T>& ctx, VarT<T> x, const ClassBatchT<T>& cls) {
        const TensorT<T>& xv = x.value();
        if (xv.rank() != 4 || xv.dim(1) != channels)
            fail("batch norm expects (B," + std::to_string(channels) + ",H,W), got " +
                 shape_str(xv.shape()));
        if (xv.dim(0) == 0) fail("batch norm on an empty batch");
        VarT<T> xhat;
        if (ctx.training) {
            VarT<T> mean = ops::mean_axes(x, {0, 2, 3}, true);
            VarT<T> centered = ops::sub(x, mean);
            VarT<T> var = ops::mean_axes(ops::square(centered), {0, 2, 3}, true);
            xhat = ops::div(centered, ops::sqrt_op(ops::scalar_add(var, eps)));
            if (ctx.update_state) update_running(mean.value(), var.value(), xv);
        } else {
            TensorT<T> m({1, channels, 1, 1}, running_mean.vec());
            TensorT<T> s({1, channels, 1, 1});
            for (int c = 0; c < channels; ++c) s[c] = std::sqrt(running_var[c] + eps);
            xhat = ops::div(ops::sub(x, ctx.constant(m)), ctx.constant(s));
        }
        int B = xv.dim(0);
        VarT<T> g = ops::reshape(gain.lookup(ctx, cls), {B, channels, 1, 1});
        VarT<T> b = ops::reshape(bias.lookup(ctx, cls), {B, channels, 1, 1});
        return ops::add(ops::mul(xhat, g), b);
    }

    void collect(const std::string& prefix, ParamListT<T>& params) {
        gain.collect(prefix + ".gain", params);
        bias.collect(prefix + ".bias", params);
    }

    void collect_buffers(const std::string& prefix, ParamListT<T>& bufs) {
        bufs.push_back({prefix + ".running_mean", &running_mean});
        bufs.push_back({prefix + ".running_var", &running_var});
    }

private:
    void update_running(const TensorT<T>& batch_mean, const TensorT<T>& batch_var,
                        const TensorT<T>& xv) {
        int64_t count = xv.size() / channels;
        T unbias = count > 1 ? static_cast<T>(count) / static_cast<T>(count - 1) : T(1);
        for (int c = 0; c < channels; ++c) {
            running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * batch_mean[c];
            running_var[c] = (T(1) - momentum) * running_var[c] + momentum * batch_var[c] * unbias;
        }
    }
};

// Unconditional batch norm: conditional form with a single shared class row.
template <typename T>
struct BatchNormT {
    CondBatchNormT<T> core;

    BatchNormT() = default;
    explicit BatchNormT(int ch) : core(1, ch) {}

    VarT<T> forward(CtxT<T>& ctx, VarT<T> x) {
        return core.forward(ctx, x, ClassBatchT<T>::hard(std::vector<int>(x.value().dim(0), 0)));
    }

    void collect(const std::string& prefix, ParamListT<T>& params) { core.collect(prefix, params); }
    void collect_buffers(const std::string& prefix, ParamListT<T>& bufs) {
        core.collect_buffers(prefix, bufs);
    }
};

// ---------------------------------------------------------------------------
// self-attention
// ---------------------------------------------------------------------------

template <typename T>
struct SelfAttentionT {
    int channels = 0;
    int reduction = 8;
    Conv2dT<T> f, g, h;   // 1x1 convs
    TensorT<T> gamma;     // scalar gate, init 0

    SelfAttentionT() = default;
    explicit SelfAttentionT(int ch, int reduction_ = 8)
        : channels(ch),
          reduction(reduction_),
          f(ch, ch / reduction_, 1),
          g(ch, ch / reduction_, 1),
          h(ch, ch, 1),
          gamma({1}) {
        if (ch % reduction_ != 0)
            fail("attention channels " + std::to_string(ch) + " not divisible by reduction " +
                 std::to_string(reduction_));
    }

    void init(Rng& rng) {
        f.init(rng);
        g.init(rng);
        h.init(rng);
    }

    VarT<T> forward(CtxT<T>& ctx, VarT<T> x) {
        const TensorT<T>& xv = x.value();
        int B = xv.dim(0), H = xv.dim(2), W = xv.dim(3);
        int n = H * W;
        if (n == 0) fail("attention on empty spatial extent");
        int cr = channels / reduction;
        VarT<T> fq = ops::reshape(f.forward(ctx, x), {B, cr, n});
        VarT<T> gk = ops::reshape(g.forward(ctx, x), {B, cr, n});
        VarT<T> hv = ops::reshape(h.forward(ctx, x), {B, channels, n});
        // att[b,i,j] = <f(x_i), g(x_j)>, softmax over source positions i
        VarT<T> att = ops::softmax(ops::bmm(ops::transpose_last2(fq), gk), 1);
        VarT<T> o = ops::reshape(ops::bmm(hv, att), {B, channels, H, W});
        return ops::add(x, ops::mul(ctx.param(gamma), o));
    }

    void collect(const std::string& prefix, ParamListT<T>& params) {
        f.collect(prefix + ".f", params);
        g.collect(prefix + ".g", params);
        h.collect(prefix + ".h", params);
        params.push_back({prefix + ".gamma", &gamma});
    }

    void collect_buffers(const std::string&, ParamListT<T>&) {}
};

// ---------------------------------------------------------------------------
// projection discriminator head
// ---------------------------------------------------------------------------

// logit_b = <feat_b, head> + <feat_b, embed[cls_b]>
template <typename T>
VarT<T> projection_logit(CtxT<T>& ctx, VarT<T> features, const ClassBatchT<T>& cls,
                         TensorT<T>& head, EmbeddingT<T>& embed) {
    const TensorT<T>& fv = features.value();
    if (fv.rank() != 2) fail("projection head expects (B,D) features, got " + shape_str(fv.shape()));
    if (head.dim(0) != fv.dim(1) || embed.dim != fv.dim(1))
        fail("projection head dimension mismatch");
    VarT<T> hw = ctx.param(head);
    VarT<T> e = embed.lookup(ctx, cls);  // [B, D]
    VarT<T> uncond = ops::sum_axes(ops::mul(features, hw), {1}, false);
    VarT<T> cond = ops::sum_axes(ops::mul(features, e), {1}, false);
    return ops::add(uncond, cond);
}

using Embedding = EmbeddingT<float>;
using Linear = LinearT<float>;
using SpectralNorm = SpectralNormT<float>;
using Conv2d = Conv2dT<float>;
using CondBatchNorm = CondBatchNormT<float>;
using BatchNorm = BatchNormT<float>;
using SelfAttention = SelfAttentionT<float>;

}  // namespace ppcd
