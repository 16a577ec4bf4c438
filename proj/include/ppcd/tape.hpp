#pragma once

#include <algorithm>
#include <deque>
#include <functional>
#include <initializer_list>
#include <memory>
#include <utility>

#include "ppcd/tensor.hpp"

namespace ppcd {

// Reverse-mode tape. Nodes are appended in execution order, so creation
// order is a topological order and one reverse sweep visits each node once.
// A tape is single-threaded and lives for one forward/backward pair.
template <typename T>
class TapeT;

template <typename T>
struct VarT {
    TapeT<T>* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const TensorT<T>& value() const;
    const Shape& shape() const { return value().shape(); }
};

template <typename T>
class TapeT {
public:
    using BackFn = std::function<void(TapeT&, const TensorT<T>&)>;

    VarT<T> leaf(TensorT<T> value, bool requires_grad = false) {
        return push(std::move(value), requires_grad, nullptr, "leaf");
    }

    VarT<T> constant(TensorT<T> value) { return leaf(std::move(value), false); }

    // Extension point: record an output with an explicit backward rule.
    // requires_grad is inherited from the listed inputs.
    VarT<T> record(TensorT<T> value, std::initializer_list<VarT<T>> inputs, BackFn back,
                   const char* op = "custom") {
        bool rg = false;
        for (const VarT<T>& v : inputs) rg = rg || node(v.id).requires_grad;
        return push(std::move(value), rg, rg ? std::move(back) : nullptr, op);
    }

    VarT<T> record(TensorT<T> value, bool requires_grad, BackFn back, const char* op) {
        return push(std::move(value), requires_grad, requires_grad ? std::move(back) : nullptr, op);
    }

    const TensorT<T>& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

    // Gradient of the last backward() loss w.r.t. var; zeros if unreachable.
    TensorT<T> grad_of(const VarT<T>& v) const {
        const NodeT& n = nodes_[static_cast<size_t>(v.id)];
        if (n.grad.size() == 0) return TensorT<T>(n.value.shape());
        return n.grad;
    }

    void accumulate(int id, const TensorT<T>& g) {
        NodeT& n = nodes_[static_cast<size_t>(id)];
        if (!n.requires_grad) return;
        if (!n.value.same_shape(g))
            fail(std::string("gradient shape ") + shape_str(g.shape()) + " does not match value " +
                 shape_str(n.value.shape()) + " at op " + n.op);
        if (n.grad.size() == 0) {
            n.grad = g;
        } else {
            T* a = n.grad.data();
            const T* b = g.data();
            for (int64_t i = 0; i < g.size(); ++i) a[i] += b[i];
        }
    }

    void backward(const VarT<T>& loss) {
        if (loss.tape != this) fail("backward: loss var belongs to a different tape");
        const NodeT& ln = nodes_[static_cast<size_t>(loss.id)];
        if (ln.value.size() != 1)
            fail("backward requires a scalar loss, got shape " + shape_str(ln.value.shape()));
        for (NodeT& n : nodes_) n.grad = TensorT<T>();
        accumulate(loss.id, TensorT<T>::scalar(T(1)));
        for (int id = loss.id; id >= 0; --id) {
            NodeT& n = nodes_[static_cast<size_t>(id)];
            if (n.grad.size() == 0 || !n.back) continue;
            n.back(*this, n.grad);
        }
    }

    size_t size() const { return nodes_.size(); }

private:
    struct NodeT {
        TensorT<T> value;
        TensorT<T> grad;
        bool requires_grad = false;
        BackFn back;
        const char* op = "";
    };

    NodeT& node(int id) { return nodes_[static_cast<size_t>(id)]; }

    VarT<T> push(TensorT<T> value, bool rg, BackFn back, const char* op) {
        if (debug::finite_checks() && !value.all_finite())
            fail(std::string("non-finite values produced by op '") + op + "'");
        nodes_.push_back(NodeT{std::move(value), TensorT<T>(), rg, std::move(back), op});
        return VarT<T>{this, static_cast<int>(nodes_.size()) - 1};
    }

    // deque: appending never invalidates references returned by value()
    std::deque<NodeT> nodes_;
};

template <typename T>
const TensorT<T>& VarT<T>::value() const {
    return tape->value(id);
}

using Tape = TapeT<float>;
using TapeD = TapeT<double>;
using Var = VarT<float>;
using VarD = VarT<double>;

// ---------------------------------------------------------------------------
// broadcasting helpers
// ---------------------------------------------------------------------------

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
    Shape out(r);
    for (size_t i = 0; i < r; ++i) {
        int da = i < r - ra ? 1 : a[i - (r - ra)];
        int db = i < r - rb ? 1 : b[i - (r - rb)];
        if (da != db && da != 1 && db != 1)
            fail(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b) +
                 " at dimension " + std::to_string(i));
        out[i] = std::max(da, db);
    }
    return out;
}

// Strides of `s` aligned to a broadcast result of rank r; 0 where broadcast.
inline std::vector<int64_t> broadcast_strides(const Shape& s, size_t r) {
    std::vector<int64_t> st(r, 0);
    int64_t acc = 1;
    for (size_t i = s.size(); i-- > 0;) {
        st[i + (r - s.size())] = (s[i] == 1) ? 0 : acc;
        acc *= s[i];
    }
    return st;
}

template <typename T, typename F>
TensorT<T> broadcast_apply(const TensorT<T>& a, const TensorT<T>& b, F f, const char* op) {
    Shape os = broadcast_shape(a.shape(), b.shape(), op);
    TensorT<T> out(os);
    size_t r = os.size();
    auto sa = broadcast_strides(a.shape(), r);
    auto sb = broadcast_strides(b.shape(), r);
    std::vector<int> idx(r, 0);
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    int64_t oa = 0, ob = 0;
    for (int64_t i = 0; i < out.size(); ++i) {
        po[i] = f(pa[oa], pb[ob]);
        for (size_t d = r; d-- > 0;) {
            idx[d]++;
            oa += sa[d];
            ob += sb[d];
            if (idx[d] < os[d]) break;
            idx[d] = 0;
            oa -= sa[d] * os[d];
            ob -= sb[d] * os[d];
        }
    }
    return out;
}

// Sum `g` down to `target` shape (undo broadcasting).
template <typename T>
TensorT<T> reduce_grad_to(const TensorT<T>& g, const Shape& target) {
    if (g.shape() == target) return g;
    TensorT<T> out(target);
    size_t r = g.shape().size();
    auto st = broadcast_strides(target, r);
    const Shape& gs = g.shape();
    std::vector<int> idx(r, 0);
    const T* pg = g.data();
    T* po = out.data();
    int64_t off = 0;
    for (int64_t i = 0; i < g.size(); ++i) {
        po[off] += pg[i];
        for (size_t d = r; d-- > 0;) {
            idx[d]++;
            off += st[d];
            if (idx[d] < gs[d]) break;
            idx[d] = 0;
            off -= st[d] * gs[d];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// gemm kernels (row-major)
// ---------------------------------------------------------------------------

// C += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(const T* A, const T* B, T* C, int M, int N, int K) {
    for (int i = 0; i < M; ++i) {
        const T* a = A + static_cast<int64_t>(i) * K;
        T* c = C + static_cast<int64_t>(i) * N;
        for (int k = 0; k < K; ++k) {
            T av = a[k];
            if (av == T(0)) continue;
            const T* b = B + static_cast<int64_t>(k) * N;
            for (int j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// C += A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(const T* A, const T* B, T* C, int M, int N, int K) {
    for (int i = 0; i < M; ++i) {
        const T* a = A + static_cast<int64_t>(i) * K;
        T* c = C + static_cast<int64_t>(i) * N;
        for (int j = 0; j < N; ++j) {
            const T* b = B + static_cast<int64_t>(j) * K;
            T acc = T(0);
            for (int k = 0; k < K; ++k) acc += a[k] * b[k];
            c[j] += acc;
        }
    }
}

// C += A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(const T* A, const T* B, T* C, int M, int N, int K) {
    for (int k = 0; k < K; ++k) {
        const T* a = A + static_cast<int64_t>(k) * M;
        const T* b = B + static_cast<int64_t>(k) * N;
        for (int i = 0; i < M; ++i) {
            T av = a[i];
            if (av == T(0)) continue;
            T* c = C + static_cast<int64_t>(i) * N;
            for (int j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

template <typename T>
void im2col(const T* x, T* col, int C, int H, int W, int k, int stride, int pad, int Hout,
            int Wout) {
    int P = Hout * Wout;
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                T* dst = col + (static_cast<int64_t>(c) * k * k + ki * k + kj) * P;
                for (int oh = 0; oh < Hout; ++oh) {
                    int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= H) {
                        std::fill(dst + oh * Wout, dst + (oh + 1) * Wout, T(0));
                        continue;
                    }
                    const T* src = x + (static_cast<int64_t>(c) * H + ih) * W;
                    for (int ow = 0; ow < Wout; ++ow) {
                        int iw = ow * stride - pad + kj;
                        dst[oh * Wout + ow] = (iw < 0 || iw >= W) ? T(0) : src[iw];
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, T* x, int C, int H, int W, int k, int stride, int pad, int Hout,
                int Wout) {
    int P = Hout * Wout;
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                const T* src = col + (static_cast<int64_t>(c) * k * k + ki * k + kj) * P;
                for (int oh = 0; oh < Hout; ++oh) {
                    int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= H) continue;
                    T* dst = x + (static_cast<int64_t>(c) * H + ih) * W;
                    for (int ow = 0; ow < Wout; ++ow) {
                        int iw = ow * stride - pad + kj;
                        if (iw >= 0 && iw < W) dst[iw] += src[oh * Wout + ow];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// tape ops
// ---------------------------------------------------------------------------

namespace ops {

template <typename T>
TapeT<T>& tape_of(const VarT<T>& a) {
    if (!a.valid()) fail("op applied to an invalid var");
    return *a.tape;
}

template <typename T>
TapeT<T>& tape_of(const VarT<T>& a, const VarT<T>& b) {
    if (!a.valid() || !b.valid()) fail("op applied to an invalid var");
    if (a.tape != b.tape) fail("op applied to vars from different tapes");
    return *a.tape;
}

// -- binary broadcast ops ---------------------------------------------------

template <typename T>
VarT<T> add(VarT<T> a, VarT<T> b) {
    TapeT<T>& t = tape_of(a, b);
    TensorT<T> out = detail::broadcast_apply<T>(
        a.value(), b.value(), [](T x, T y) { return x + y; }, "add");
    Shape as = a.value().shape(), bs = b.value().shape();
    return t.record(
        std::move(out), {a, b},
        [a, b, as, bs](TapeT<T>& tp, const TensorT<T>& g) {
            tp.accumulate(a.id, detail::reduce_grad_to(g, as));
            tp.accumulate(b.id, detail::reduce_grad_to(g, bs));
        },
        "add");
}

template <typename T>
VarT<T> sub(VarT<T> a, VarT<T> b) {
    TapeT<T>& t = tape_of(a, b);
    TensorT<T> out = detail::broadcast_apply<T>(
        a.value(), b.value(), [](T x, T y) { return x - y; }, "sub");
    Shape as = a.value().shape(), bs = b.value().shape();
    return t.record(
        std::move(out), {a, b},
        [a, b, as, bs](TapeT<T>& tp, const TensorT<T>& g) {
            tp.accumulate(a.id, detail::reduce_grad_to(g, as));
            TensorT<T> gn(g.shape());
            for (int64_t i = 0; i < g.size(); ++i) gn[i] = -g[i];
            tp.accumulate(b.id, detail::reduce_grad_to(gn, bs));
        },
        "sub");
}

template <typename T>
VarT<T> mul(VarT<T> a, VarT<T> b) {
    TapeT<T>& t = tape_of(a, b);
    TensorT<T> out = detail::broadcast_apply<T>(
        a.value(), b.value(), [](T x, T y) { return x * y; }, "mul");
    Shape as = a.value().shape(), bs = b.value().shape();
    return t.record(
        std::move(out), {a, b},
        [a, b, as, bs](TapeT<T>& tp, const TensorT<T>& g) {
            const TensorT<T>& av = tp.value(a.id);
            const TensorT<T>& bv = tp.value(b.id);
            TensorT<T> ga = detail::broadcast_apply<T>(
                g, bv, [](T x, T y) { return x * y; }, "mul_bwd");
            tp.accumulate(a.id, detail::reduce_grad_to(ga, as));
            TensorT<T> gb = detail::broadcast_apply<T>(
                g, av, [](T x, T y) { return x * y; }, "mul_bwd");
            tp.accumulate(b.id, detail::reduce_grad_to(gb, bs));
        },
        "mul");
}

template <typename T>
VarT<T> div(VarT<T> a, VarT<T> b) {
    TapeT<T>& t = tape_of(a, b);
    TensorT<T> out = detail::broadcast_apply<T>(
        a.value(), b.value(), [](T x, T y) { return x / y; }, "div");
    Shape as = a.value().shape(), bs = b.value().shape();
    return t.record(
        std::move(out), {a, b},
        [a, b, as, bs](TapeT<T>& tp, const TensorT<T>& g) {
            const TensorT<T>& av = tp.value(a.id);
            const TensorT<T>& bv = tp.value(b.id);
            TensorT<T> ga = detail::broadcast_apply<T>(
                g, bv, [](T x, T y) { return x / y; }, "div_bwd");
            tp.accumulate(a.id, detail::reduce_grad_to(ga, as));
            TensorT<T> q = detail::broadcast_apply<T>(
                av, bv, [](T x, T y) { return -x / (y * y); }, "div_bwd");
            TensorT<T> gb = detail::broadcast_apply<T>(
                g, q, [](T x, T y) { return x * y; }, "div_bwd");
            tp.accumulate(b.id, detail::reduce_grad_to(gb, bs));
        },
        "div");
}

// -- unary ops ----------------------------------------------------------------

template <typename T, typename FwdF, typename BwdF>
VarT<T> unary_op(VarT<T> a, FwdF f, BwdF dfdx, const char* name) {
    TapeT<T>& t = tape_of(a);
    const TensorT<T>& av = a.value();
    TensorT<T> out(av.shape());
    for (int64_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
    return t.record(
        std::move(out), {a},
        [a, dfdx](TapeT<T>& tp, const TensorT<T>& g) {
            const TensorT<T>& x = tp.value(a.id);
            TensorT<T> gx(x.shape());
            for (int64_t i = 0; i < x.size(); ++i) gx[i] = g[i] * dfdx(x[i]);
            tp.accumulate(a.id, gx);
        },
        name);
}

template <typename T>
VarT<T> neg(VarT<T> a) {
    return unary_op(
        a, [](T x) { return -x; }, [](T) { return T(-1); }, "neg");
}

template <typename T>
VarT<T> relu(VarT<T> a) {
    // subgradient at 0 is 0
    return unary_op(
        a, [](T x) { return x > T(0) ? x : T(0); }, [](T x) { return x > T(0) ? T(1) : T(0); },
        "relu");
}

template <typename T>
VarT<T> sigmoid(VarT<T> a) {
    return unary_op(
        a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
        [](T x) {
            T s = T(1) / (T(1) + std::exp(-x));
            return s * (T(1) - s);
        },
        "sigmoid");
}

template <typename T>
VarT<T> tanh_op(VarT<T> a) {
    return unary_op(
        a, [](T x) { return std::tanh(x); },
        [](T x) {
            T y = std::tanh(x);
            return T(1) - y * y;
        },
        "tanh");
}

template <typename T>
VarT<T> exp_op(VarT<T> a) {
    return unary_op(
        a, [](T x) { return std::exp(x); }, [](T x) { return std::exp(x); }, "exp");
}

template <typename T>
VarT<T> log_op(VarT<T> a) {
    return unary_op(
        a, [](T x) { return std::log(x); }, [](T x) { return T(1) / x; }, "log");
}

template <typename T>
VarT<T> sqrt_op(VarT<T> a) {
    // subgradient at 0 is 0 (minimum of the composed norms this feeds)
    return unary_op(
        a, [](T x) { return std::sqrt(x); },
        [](T x) { return x == T(0) ? T(0) : T(0.5) / std::sqrt(x); }, "sqrt");
}

template <typename T>
VarT<T> abs_op(VarT<T> a) {
    return unary_op(
        a, [](T x) { return std::abs(x); },
        [](T x) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); }, "abs");
}

template <typename T>
VarT<T> square(VarT<T> a) {
    return unary_op(
        a, [](T x) { return x * x; }, [](T x) { return T(2) * x; }, "square");
}

template <typename T>
VarT<T> clamp_min(VarT<T> a, T floor) {
    return unary_op(
        a, [floor](T x) { return x < floor ? floor : x; },
        [floor](T x) { return x >= floor ? T(1) : T(0); }, "clamp_min");
}

template <typename T>
VarT<T> scalar_mul(VarT<T> a, T c) {
    return unary_op(
        a, [c](T x) { return c * x; }, [c](T) { return c; }, "scalar_mul");
}

template <typename T>
VarT<T> scalar_add(VarT<T> a, T c) {
    return unary_op(
        a, [c](T x) { return x + c; }, [](T) { return T(1); }, "scalar_add");
}

// -- shape ops ----------------------------------------------------------------

template <typename T>
VarT<T> reshape(VarT<T> a, Shape shape) {
    TapeT<T>& t = tape_of(a);
    const TensorT<T>& av = a.value();
    if (shape_numel(shape) != av.size())
        fail("reshape: cannot view " + shape_str(av.shape()) + " as " + shape_str(shape));
    TensorT<T> out(shape, av.vec());
    Shape as = av.shape();
    return t.record(
        std::move(out), {a},
        [a, as](TapeT<T>& tp, const TensorT<T>& g) {
            tp.accumulate(a.id, TensorT<T>(as, g.vec()));
        },
        "reshape");
}

// [..., M, N] -> [..., N, M]
template <typename T>
TensorT<T> transpose_last2_value(const TensorT<T>& a) {
    if (a.rank() < 2) fail("transpose_last2 requires rank >= 2");
    Shape os = a.shape();
    int M = os[os.size() - 2], N = os[os.size() - 1];
    std::swap(os[os.size() - 2], os[os.size() - 1]);
    TensorT<T> out(os);
    int64_t batch = a.size() / (static_cast<int64_t>(M) * N);
    const T* pa = a.data();
    T* po = out.data();
    for (int64_t b = 0; b < batch; ++b) {
        const T* x = pa + b * M * N;
        T* y = po + b * M * N;
        for (int i = 0; i < M; ++i)
            for (int j = 0; j < N; ++j) y[static_cast<int64_t>(j) * M + i] = x[static_cast<int64_t>(i) * N + j];
    }
    return out;
}

template <typename T>
VarT<T> transpose_last2(VarT<T> a) {
    TapeT<T>& t = tape_of(a);
    return t.record(
        transpose_last2_value(a.value()), {a},
        [a](TapeT<T>& tp, const TensorT<T>& g) {
            tp.accumulate(a.id, transpose_last2_value(g));
        },
        "transpose_last2");
}

// -- reductions ---------------------------------------------------------------

// Sum over `axes`; with keepdims the reduced extents become 1.
template <typename T>
VarT<T> sum_axes(VarT<T> a, std::vector<int> axes, bool keepdims) {
    TapeT<T>& t = tape_of(a);
    const TensorT<T>& av = a.value();
    size_t r = av.shape().size();
    std::vector<bool> red(r, false);
    for (int ax : axes) {
        if (ax < 0 || ax >= static_cast<int>(r))
            fail("sum: axis " + std::to_string(ax) + " out of range for " + shape_str(av.shape()));
        red[static_cast<size_t>(ax)] = true;
    }
    Shape kshape(r);
    for (size_t i = 0; i < r; ++i) kshape[i] = red[i] ? 1 : av.shape()[i];
    TensorT<T> out = detail::reduce_grad_to(av, kshape);  // same access pattern as a sum
    Shape oshape;
    if (keepdims) {
        oshape = kshape;
    } else {
        for (size_t i = 0; i < r; ++i)
            if (!red[i]) oshape.push_back(av.shape()[i]);
        if (oshape.empty()) oshape.push_back(1);
        out = TensorT<T>(oshape, out.vec());
    }
    Shape as = av.shape();
    return t.record(
        std::move(out), {a},
        [a, as, kshape](TapeT<T>& tp, const TensorT<T>& g) {
            TensorT<T> gk(kshape, g.vec());
            TensorT<T> gx = detail::broadcast_apply<T>(
                gk, TensorT<T>(as), [](T x, T) { return x; }, "sum_bwd");
            tp.accumulate(a.id, gx);
        },
        "sum");
}

template <typename T>
VarT<T> mean_axes(VarT<T> a, std::vector<int> axes, bool keepdims) {
    const Shape& s = a.value().shape();
    int64_t count = 1;
    for (int ax : axes) count *= s[static_cast<size_t>(ax)];
    VarT<T> sm = sum_axes(a, std::move(axes), keepdims);
    return scalar_mul(sm, T(1) / static_cast<T>(count));
}

template <typename T>
VarT<T> sum_all(VarT<T> a) {
    std::vector<int> axes(a.value().shape().size());
    for (size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
    return sum_axes(a, axes, false);
}

template <typename T>
VarT<T> mean_all(VarT<T> a) {
    return scalar_mul(sum_all(a), T(1) / static_cast<T>(a.value().size()));
}

// sqrt of the sum of squares over the whole tensor
template <typename T>
VarT<T> l2_norm(VarT<T> a) {
    return sqrt_op(sum_all(square(a)));
}

template <typename T>
VarT<T> softmax(VarT<T> a, int axis) {
    TapeT<T>& t = tape_of(a);
    const TensorT<T>& av = a.value();
    size_t r = av.shape().size();
    if (axis < 0 || axis >= static_cast<int>(r)) fail("softmax: axis out of range");
    int n = av.shape()[static_cast<size_t>(axis)];
    int64_t inner = 1;
    for (size_t i = static_cast<size_t>(axis) + 1; i < r; ++i) inner *= av.shape()[i];
    int64_t outer = av.size() / (inner * n);
    TensorT<T> out(av.shape());
    const T* px = av.data();
    T* po = out.data();
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            int64_t base = o * n * inner + in;
            T mx = px[base];
            for (int i = 1; i < n; ++i) mx = std::max(mx, px[base + i * inner]);
            T z = T(0);
            for (int i = 0; i < n; ++i) {
                T e = std::exp(px[base + i * inner] - mx);
                po[base + i * inner] = e;
                z += e;
            }
            for (int i = 0; i < n; ++i) po[base + i * inner] /= z;
        }
    }
    // The backward rule reads the op's own output; its id is known only after
    // recording, hence the indirection.
    auto self_id = std::make_shared<int>(-1);
    VarT<T> res = t.record(
        std::move(out), {a},
        [a, n, inner, outer, self_id](TapeT<T>& tp, const TensorT<T>& g) {
            const TensorT<T>& s = tp.value(*self_id);
            TensorT<T> gx(s.shape());
            const T* ps = s.data();
            const T* pg = g.data();
            T* px = gx.data();
            for (int64_t o = 0; o < outer; ++o) {
                for (int64_t in = 0; in < inner; ++in) {
                    int64_t base = o * n * inner + in;
                    T dot = T(0);
                    for (int i = 0; i < n; ++i) dot += pg[base + i * inner] * ps[base + i * inner];
                    for (int i = 0; i < n; ++i)
                        px[base + i * inner] =
                            ps[base + i * inner] * (pg[base + i * inner] - dot);
                }
            }
            tp.accumulate(a.id, gx);
        },
        "softmax");
    *self_id = res.id;
    return res;
}

// -- matrix products ------------------------------------------------------------

template <typename T>
VarT<T> matmul(VarT<T> a, VarT<T> b) {
    TapeT<T>& t = tape_of(a, b);
    const TensorT<T>& av = a.value();
    const TensorT<T>& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2)
        fail("matmul expects rank-2 operands, got " + shape_str(av.shape()) + " and " +
             shape_str(bv.shape()));
    int M = av.dim(0), K = av.dim(1), K2 = bv.dim(0), N = bv.dim(1);
    if (K != K2)
        fail("matmul: inner dimensions disagree, " + shape_str(av.shape()) + " vs " +
             shape_str(bv.shape()));
    TensorT<T> out({M, N});
    detail::gemm_nn(av.data(), bv.data(), out.data(), M, N, K);
    return t.record(
        std::move(out), {a, b},
        [a, b, M, N, K](TapeT<T>& tp, const TensorT<T>& g) {
            const TensorT<T>& av2 = tp.value(a.id);
            const TensorT<T>& bv2 = tp.value(b.id);
            TensorT<T> ga({M, K});
            detail::gemm_nt(g.data(), bv2.data(), ga.data(), M, K, N);
            tp.accumulate(a.id, ga);
            TensorT<T> gb({K, N});
            detail::gemm_tn(av2.data(), g.data(), gb.data(), K, N, M);
            tp.accumulate(b.id, gb);
        },
        "matmul");
}

// batched matmul: [B,M,K] x [B,K,N] -> [B,M,N]
template <typename T>
VarT<T> bmm(VarT<T> a, VarT<T> b) {
    TapeT<T>& t = tape_of(a, b);
    const TensorT<T>& av = a.value();
    const TensorT<T>& bv = b.value();
    if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(1))
        fail("bmm: incompatible shapes " + shape_str(av.shape()) + " and " +
             shape_str(bv.shape()));
    int B = av.dim(0), M = av.dim(1), K = av.dim(2), N = bv.dim(2);
    TensorT<T> out({B, M, N});
    for (int i = 0; i < B; ++i)
        detail::gemm_nn(av.data() + static_cast<int64_t>(i) * M * K,
                        bv.data() + static_cast<int64_t>(i) * K * N,
                        out.data() + static_cast<int64_t>(i) * M * N, M, N, K);
    return t.record(
        std::move(out), {a, b},
        [a, b, B, M, N, K](TapeT<T>& tp, const TensorT<T>& g) {
            const TensorT<T>& av2 = tp.value(a.id);
            const TensorT<T>& bv2 = tp.value(b.id);
            TensorT<T> ga({B, M, K});
            TensorT<T> gb({B, K, N});
            for (int i = 0; i < B; ++i) {
                detail::gemm_nt(g.data() + static_cast<int64_t>(i) * M * N,
                                bv2.data() + static_cast<int64_t>(i) * K * N,
                                ga.data() + static_cast<int64_t>(i) * M * K, M, K, N);
                detail::gemm_tn(av2.data() + static_cast<int64_t>(i) * M * K,
                                g.data() + static_cast<int64_t>(i) * M * N,
                                gb.data() + static_cast<int64_t>(i) * K * N, K, N, M);
            }
            tp.accumulate(a.id, ga);
            tp.accumulate(b.id, gb);
        },
        "bmm");
}

// -- conv / pooling / resampling -------------------------------------------------

// Cross-correlation. x:[B,Cin,H,W] w:[Cout,Cin,k,k] bias:[Cout].
template <typename T>
VarT<T> conv2d(VarT<T> x, VarT<T> w, VarT<T> bias, int stride, int pad) {
    TapeT<T>& t = tape_of(x, w);
    const TensorT<T>& xv = x.value();
    const TensorT<T>& wv = w.value();
    const TensorT<T>& bv = bias.value();
    if (xv.rank() != 4) fail("conv2d: input must be 4-d, got " + shape_str(xv.shape()));
    if (wv.rank() != 4) fail("conv2d: weight must be 4-d, got " + shape_str(wv.shape()));
    int B = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    int Cout = wv.dim(0), k = wv.dim(2);
    if (wv.dim(1) != Cin)
        fail("conv2d: weight expects " + std::to_string(wv.dim(1)) + " input channels, input has " +
             std::to_string(Cin));
    if (wv.dim(3) != k) fail("conv2d: kernel must be square, got " + shape_str(wv.shape()));
    if (bv.rank() != 1 || bv.dim(0) != Cout)
        fail("conv2d: bias must have shape (" + std::to_string(Cout) + "), got " +
             shape_str(bv.shape()));
    if (stride < 1) fail("conv2d: stride must be >= 1");
    int Hout = (H + 2 * pad - k) / stride + 1;
    int Wout = (W + 2 * pad - k) / stride + 1;
    if (Hout < 1 || Wout < 1) fail("conv2d: empty output for input " + shape_str(xv.shape()));
    int P = Hout * Wout;
    int CK = Cin * k * k;
    TensorT<T> out({B, Cout, Hout, Wout});
    {
        std::vector<T> col(static_cast<size_t>(CK) * P);
        for (int b = 0; b < B; ++b) {
            detail::im2col(xv.data() + static_cast<int64_t>(b) * Cin * H * W, col.data(), Cin, H,
                           W, k, stride, pad, Hout, Wout);
            detail::gemm_nn(wv.data(), col.data(), out.data() + static_cast<int64_t>(b) * Cout * P,
                            Cout, P, CK);
        }
        T* po = out.data();
        const T* pb = bv.data();
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < Cout; ++c) {
                T bval = pb[c];
                T* row = po + (static_cast<int64_t>(b) * Cout + c) * P;
                for (int p = 0; p < P; ++p) row[p] += bval;
            }
    }
    return t.record(
        std::move(out), {x, w, bias},
        [x, w, bias, B, Cin, H, W, Cout, k, stride, pad, Hout, Wout](TapeT<T>& tp,
                                                                     const TensorT<T>& g) {
            const TensorT<T>& xv2 = tp.value(x.id);
            const TensorT<T>& wv2 = tp.value(w.id);
            int P = Hout * Wout;
            int CK = Cin * k * k;
            bool need_x = tp.requires_grad(x.id);
            bool need_w = tp.requires_grad(w.id);
            bool need_b = tp.requires_grad(bias.id);
            if (need_b) {
                TensorT<T> gb({Cout});
                const T* pg = g.data();
                for (int b = 0; b < B; ++b)
                    for (int c = 0; c < Cout; ++c) {
                        const T* row = pg + (static_cast<int64_t>(b) * Cout + c) * P;
                        T acc = T(0);
                        for (int p = 0; p < P; ++p) acc += row[p];
                        gb[c] += acc;
                    }
                tp.accumulate(bias.id, gb);
            }
            if (!need_x && !need_w) return;
            TensorT<T> gw({Cout, Cin, k, k});
            TensorT<T> gx({B, Cin, H, W});
            std::vector<T> col(static_cast<size_t>(CK) * P);
            std::vector<T> colg(static_cast<size_t>(CK) * P);
            for (int b = 0; b < B; ++b) {
                const T* gslice = g.data() + static_cast<int64_t>(b) * Cout * P;
                if (need_w) {
                    detail::im2col(xv2.data() + static_cast<int64_t>(b) * Cin * H * W, col.data(),
                                   Cin, H, W, k, stride, pad, Hout, Wout);
                    detail::gemm_nt(gslice, col.data(), gw.data(), Cout, CK, P);
                }
                if (need_x) {
                    std::fill(colg.begin(), colg.end(), T(0));
                    detail::gemm_tn(wv2.data(), gslice, colg.data(), CK, P, Cout);
                    detail::col2im_add(colg.data(), gx.data() + static_cast<int64_t>(b) * Cin * H * W,
                                       Cin, H, W, k, stride, pad, Hout, Wout);
                }
            }
            if (need_w) tp.accumulate(w.id, gw);
            if (need_x) tp.accumulate(x.id, gx);
        },
        "conv2d");
}

template <typename T>
VarT<T> upsample_nearest2(VarT<T> x) {
    TapeT<T>& t = tape_of(x);
    const TensorT<T>& xv = x.value();
    if (xv.rank() != 4) fail("upsample: input must be 4-d, got " + shape_str(xv.shape()));
    int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    TensorT<T> out({B, C, 2 * H, 2 * W});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) {
                    T v = xv.at4(b, c, h, w);
                    out.at4(b, c, 2 * h, 2 * w) = v;
                    out.at4(b, c, 2 * h, 2 * w + 1) = v;
                    out.at4(b, c, 2 * h + 1, 2 * w) = v;
                    out.at4(b, c, 2 * h + 1, 2 * w + 1) = v;
                }
    return t.record(
        std::move(out), {x},
        [x, B, C, H, W](TapeT<T>& tp, const TensorT<T>& g) {
            TensorT<T> gx({B, C, H, W});
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c)
                    for (int h = 0; h < H; ++h)
                        for (int w = 0; w < W; ++w)
                            gx.at4(b, c, h, w) = g.at4(b, c, 2 * h, 2 * w) +
                                                 g.at4(b, c, 2 * h, 2 * w + 1) +
                                                 g.at4(b, c, 2 * h + 1, 2 * w) +
                                                 g.at4(b, c, 2 * h + 1, 2 * w + 1);
            tp.accumulate(x.id, gx);
        },
        "upsample_nearest2");
}

template <typename T>
VarT<T> avg_pool2(VarT<T> x) {
    TapeT<T>& t = tape_of(x);
    const TensorT<T>& xv = x.value();
    if (xv.rank() != 4) fail("avg_pool2: input must be 4-d");
    int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (H % 2 || W % 2) fail("avg_pool2: spatial dims must be even, got " + shape_str(xv.shape()));
    TensorT<T> out({B, C, H / 2, W / 2});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H / 2; ++h)
                for (int w = 0; w < W / 2; ++w)
                    out.at4(b, c, h, w) =
                        (xv.at4(b, c, 2 * h, 2 * w) + xv.at4(b, c, 2 * h, 2 * w + 1) +
                         xv.at4(b, c, 2 * h + 1, 2 * w) + xv.at4(b, c, 2 * h + 1, 2 * w + 1)) *
                        T(0.25);
    return t.record(
        std::move(out), {x},
        [x, B, C, H, W](TapeT<T>& tp, const TensorT<T>& g) {
            TensorT<T> gx({B, C, H, W});
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c)
                    for (int h = 0; h < H / 2; ++h)
                        for (int w = 0; w < W / 2; ++w) {
                            T v = g.at4(b, c, h, w) * T(0.25);
                            gx.at4(b, c, 2 * h, 2 * w) = v;
                            gx.at4(b, c, 2 * h, 2 * w + 1) = v;
                            gx.at4(b, c, 2 * h + 1, 2 * w) = v;
                            gx.at4(b, c, 2 * h + 1, 2 * w + 1) = v;
                        }
            tp.accumulate(x.id, gx);
        },
        "avg_pool2");
}

// table:[K,D] indices:[B] -> [B,D]; backward scatter-adds into the table.
template <typename T>
VarT<T> embedding_rows(VarT<T> table, const std::vector<int>& indices) {
    TapeT<T>& t = tape_of(table);
    const TensorT<T>& tv = table.value();
    if (tv.rank() != 2) fail("embedding: table must be rank 2, got " + shape_str(tv.shape()));
    int K = tv.dim(0), D = tv.dim(1);
    int B = static_cast<int>(indices.size());
    TensorT<T> out({B, D});
    for (int b = 0; b < B; ++b) {
        int idx = indices[b];
        if (idx < 0 || idx >= K)
            fail("embedding: class index " + std::to_string(idx) + " out of range [0," +
                 std::to_string(K) + ")");
        std::copy(tv.data() + static_cast<int64_t>(idx) * D,
                  tv.data() + static_cast<int64_t>(idx + 1) * D, out.data() + static_cast<int64_t>(b) * D);
    }
    std::vector<int> idx_copy = indices;
    return t.record(
        std::move(out), {table},
        [table, idx_copy, K, D](TapeT<T>& tp, const TensorT<T>& g) {
            TensorT<T> gt({K, D});
            for (size_t b = 0; b < idx_copy.size(); ++b) {
                const T* src = g.data() + static_cast<int64_t>(b) * D;
                T* dst = gt.data() + static_cast<int64_t>(idx_copy[b]) * D;
                for (int d = 0; d < D; ++d) dst[d] += src[d];
            }
            tp.accumulate(table.id, gt);
        },
        "embedding");
}

}  // namespace ops

}  // namespace ppcd
