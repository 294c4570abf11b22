#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace teocc {

// Process-wide accounting of live tensor payload bytes. The training harness
// samples the peak around each phase to report memory overhead ratios.
namespace mem {

inline std::atomic<std::int64_t>& live_bytes() {
    static std::atomic<std::int64_t> v{0};
    return v;
}

inline std::atomic<std::int64_t>& peak_bytes() {
    static std::atomic<std::int64_t> v{0};
    return v;
}

inline void on_alloc(std::int64_t n) {
    const std::int64_t cur = live_bytes().fetch_add(n) + n;
    std::int64_t prev = peak_bytes().load();
    while (cur > prev && !peak_bytes().compare_exchange_weak(prev, cur)) {
    }
}

inline void on_free(std::int64_t n) { live_bytes().fetch_sub(n); }

inline void reset_peak() { peak_bytes().store(live_bytes().load()); }

/// Training allocates and frees multi-megabyte activation buffers every step;
/// with glibc defaults those round-trip through mmap. Raising the thresholds
/// keeps them on the free list. Call once at process start.
inline void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace mem

/// Dense row-major n-d array. The last dimension is contiguous.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        std::int64_t n = 1;
        for (int d : shape_) {
            if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
            n *= d;
        }
        numel_ = n;
        data_ = alloc(n);
        std::fill(data_.get(), data_.get() + n, T(0));
    }

    Tensor(std::initializer_list<int> shape) : Tensor(std::vector<int>(shape)) {}

    Tensor(const Tensor& other) : shape_(other.shape_), numel_(other.numel_) {
        data_ = alloc(numel_);
        std::memcpy(data_.get(), other.data_.get(), sizeof(T) * static_cast<std::size_t>(numel_));
    }

    Tensor(Tensor&& other) noexcept = default;
    Tensor& operator=(Tensor&& other) noexcept = default;

    Tensor& operator=(const Tensor& other) {
        if (this != &other) {
            Tensor tmp(other);
            *this = std::move(tmp);
        }
        return *this;
    }

    ~Tensor() = default;

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::int64_t numel() const { return numel_; }
    bool empty() const { return numel_ == 0; }

    T* data() { return data_.get(); }
    const T* data() const { return data_.get(); }

    T& operator[](std::int64_t i) { return data_.get()[i]; }
    const T& operator[](std::int64_t i) const { return data_.get()[i]; }

    void fill(T v) { std::fill(data_.get(), data_.get() + numel_, v); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, T v) {
        Tensor t(std::move(shape));
        t.fill(v);
        return t;
    }

    static Tensor scalar(T v) {
        Tensor t(std::vector<int>{});
        t[0] = v;
        return t;
    }

private:
    struct Deleter {
        std::int64_t bytes = 0;
        void operator()(T* p) const {
            if (p) {
                ::operator delete[](p);
                mem::on_free(bytes);
            }
        }
    };

    using Ptr = std::unique_ptr<T[], Deleter>;

    static Ptr alloc(std::int64_t n) {
        // A zero-dim tensor still holds one scalar slot.
        const std::int64_t slots = std::max<std::int64_t>(n, 1);
        const std::int64_t bytes = slots * static_cast<std::int64_t>(sizeof(T));
        T* p = static_cast<T*>(::operator new[](static_cast<std::size_t>(bytes)));
        mem::on_alloc(bytes);
        return Ptr(p, Deleter{bytes});
    }

    std::vector<int> shape_;
    std::int64_t numel_ = 1;
    Ptr data_ = alloc(1);
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    out += ")";
    return out;
}

template <typename T>
bool tensor_equal(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) return false;
    return std::memcmp(a.data(), b.data(), sizeof(T) * static_cast<std::size_t>(a.numel())) == 0;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
    double m = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        m = std::max(m, static_cast<double>(std::abs(double(a[i]) - double(b[i]))));
    }
    return m;
}

}  // namespace teocc
