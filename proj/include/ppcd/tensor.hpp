#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ppcd {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

[[noreturn]] inline void fail(const std::string& msg) { throw std::runtime_error(msg); }

// Dense row-major n-d array. Value semantics; ops never alias.
template <typename T>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(Shape shape) : shape_(std::move(shape)) {
        check_shape();
        data_.assign(static_cast<size_t>(shape_numel(shape_)), T(0));
    }

    TensorT(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape();
        if (static_cast<int64_t>(data_.size()) != shape_numel(shape_))
            fail("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                 shape_str(shape_));
    }

    static TensorT full(Shape shape, T v) {
        TensorT t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static TensorT scalar(T v) { return TensorT({1}, {v}); }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // 4-d accessor (B,C,H,W)
    T& at4(int b, int c, int h, int w) {
        return data_[((static_cast<size_t>(b) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    const T& at4(int b, int c, int h, int w) const {
        return data_[((static_cast<size_t>(b) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    T& at2(int i, int j) { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
    const T& at2(int i, int j) const { return data_[static_cast<size_t>(i) * shape_[1] + j]; }

    T item() const {
        if (size() != 1) fail("item() on non-scalar tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

private:
    void check_shape() const {
        for (int e : shape_)
            if (e < 0) fail("negative extent in shape " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<T> data_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

namespace debug {
// When on, every tape op verifies its output is finite and throws otherwise.
bool finite_checks();
void set_finite_checks(bool on);
}  // namespace debug

// Deterministic seed derivation: FNV-1a over the tag mixed into the base seed.
inline uint64_t derive_seed(uint64_t base, std::string_view tag) {
    uint64_t h = 1469598103934665603ull;
    for (char c : tag) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    // splitmix64 finalizer
    uint64_t z = base ^ h;
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Portable deterministic RNG (xoshiro-free: splitmix64 stream + Box-Muller).
// std::normal_distribution is avoided so streams are identical across stdlibs.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0,1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    int uniform_int(int lo, int hi) {  // inclusive bounds
        return lo + static_cast<int>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 1e-300) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void fill_normal(TensorT<T>& t, double mean, double stddev) {
        for (int64_t i = 0; i < t.size(); ++i)
            t[i] = static_cast<T>(mean + stddev * normal());
    }

    template <typename T>
    void fill_uniform(TensorT<T>& t, double lo, double hi) {
        for (int64_t i = 0; i < t.size(); ++i)
            t[i] = static_cast<T>(uniform(lo, hi));
    }

private:
    uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace ppcd
