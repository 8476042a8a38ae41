#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <utility>
#include <vector>

#include "prfnet/common.hpp"

namespace prfnet {

namespace detail {

// Allocator that default-initializes (i.e. leaves trivial types
// uninitialized) so op outputs that are fully overwritten skip a memset.
template <typename T>
struct DefaultInitAlloc : std::allocator<T> {
    template <typename U>
    struct rebind {
        using other = DefaultInitAlloc<U>;
    };
    template <typename U>
    void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
        ::new (static_cast<void*>(p)) U;
    }
    template <typename U, typename... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

}  // namespace detail

// Dense N-d array (rank <= 4) with an optional same-shape gradient buffer.
// Tensor is a cheap handle onto shared storage: copies alias the same node,
// which is what lets autodiff closures and parameter stores see one value.
// Value buffers are treated as immutable once an op has produced them;
// mutation is confined to optimizer updates, BN running stats and gradient
// accumulation.
template <typename T>
class Tensor {
    static_assert(std::is_floating_point_v<T>, "Tensor is f32/f64 only");

    struct Node {
        Shape shape;
        std::vector<T, detail::DefaultInitAlloc<T>> value;
        std::vector<T, detail::DefaultInitAlloc<T>> grad;  // empty until ensure_grad()
        bool requires_grad = false;
    };

public:
    using Scalar = T;
    using Buffer = std::vector<T, detail::DefaultInitAlloc<T>>;

    Tensor() = default;

    static Tensor zeros(const Shape& s) {
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = s;
        t.node_->value.assign(static_cast<size_t>(s.numel()), T(0));
        return t;
    }

    // Uninitialized storage; caller must write every element.
    static Tensor empty(const Shape& s) {
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = s;
        t.node_->value.resize(static_cast<size_t>(s.numel()));
        return t;
    }

    static Tensor full(const Shape& s, T v) {
        Tensor t = zeros(s);
        for (auto& x : t.node_->value) x = v;
        return t;
    }

    static Tensor from(const Shape& s, const std::vector<T>& v) {
        check<ShapeError>(static_cast<int64_t>(v.size()) == s.numel(),
                          "value count ", v.size(), " does not match shape ", s.str());
        Tensor t = empty(s);
        std::copy(v.begin(), v.end(), t.node_->value.begin());
        return t;
    }

    static Tensor from(const Shape& s, const Buffer& v) {
        check<ShapeError>(static_cast<int64_t>(v.size()) == s.numel(),
                          "value count ", v.size(), " does not match shape ", s.str());
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = s;
        t.node_->value = v;
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t numel() const { return node_->shape.numel(); }

    T* data() { return node_->value.data(); }
    const T* data() const { return node_->value.data(); }
    Buffer& values() { return node_->value; }
    const Buffer& values() const { return node_->value; }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    bool has_grad() const { return node_ && !node_->grad.empty(); }
    void ensure_grad() {
        if (node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
    }
    T* grad() { return node_->grad.data(); }
    const T* grad() const { return node_->grad.data(); }
    Buffer& grad_values() { return node_->grad; }
    void clear_grad() {
        node_->grad.clear();
        node_->grad.shrink_to_fit();
    }

    // Deep copy of values only.
    Tensor clone() const {
        Tensor t = from(shape(), node_->value);
        return t;
    }

    T item() const {
        check<ShapeError>(numel() == 1, "item() on non-scalar tensor ", shape().str());
        return node_->value[0];
    }

    // Row-major element access, mainly for tests and file IO.
    T& at(int64_t i) { return node_->value[static_cast<size_t>(i)]; }
    T at(int64_t i) const { return node_->value[static_cast<size_t>(i)]; }
    T& at(int64_t i, int64_t j) {
        return node_->value[static_cast<size_t>(i * shape().dim(1) + j)];
    }
    T at(int64_t i, int64_t j) const {
        return node_->value[static_cast<size_t>(i * shape().dim(1) + j)];
    }
    T& at(int64_t c, int64_t h, int64_t w) {
        const Shape& s = shape();
        return node_->value[static_cast<size_t>((c * s.dim(1) + h) * s.dim(2) + w)];
    }
    T at(int64_t c, int64_t h, int64_t w) const {
        const Shape& s = shape();
        return node_->value[static_cast<size_t>((c * s.dim(1) + h) * s.dim(2) + w)];
    }
    T& at(int64_t n, int64_t c, int64_t h, int64_t w) {
        const Shape& s = shape();
        return node_->value[static_cast<size_t>(
            ((n * s.dim(1) + c) * s.dim(2) + h) * s.dim(3) + w)];
    }
    T at(int64_t n, int64_t c, int64_t h, int64_t w) const {
        const Shape& s = shape();
        return node_->value[static_cast<size_t>(
            ((n * s.dim(1) + c) * s.dim(2) + h) * s.dim(3) + w)];
    }

    // Node identity, used by tests asserting aliasing/sharing.
    const void* id() const { return node_.get(); }
    bool same_node(const Tensor& o) const { return node_ == o.node_; }

private:
    std::shared_ptr<Node> node_;
};

// Global toggle for post-op finiteness scans. On by default; a forward op fed
// finite inputs must produce finite outputs, anything else is a hard error.
inline bool& finite_checks_enabled() {
    static bool enabled = true;
    return enabled;
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
    if (!finite_checks_enabled()) return;
    const T* p = t.data();
    const int64_t n = t.numel();
    // A NaN/Inf anywhere poisons the sum; eight accumulators keep the scan
    // vectorizable. Magnitudes here are O(1), so the sum cannot overflow on
    // its own.
    T acc[8] = {T(0), T(0), T(0), T(0), T(0), T(0), T(0), T(0)};
    int64_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (int j = 0; j < 8; ++j) acc[j] += p[i + j];
    T total = T(0);
    for (int j = 0; j < 8; ++j) total += acc[j];
    for (; i < n; ++i) total += p[i];
    if (std::isfinite(total)) return;
    for (int64_t k = 0; k < n; ++k) {
        if (!std::isfinite(p[k]))
            throw NonFiniteError(cat("non-finite value from ", op, " at index ", k));
    }
    throw NonFiniteError(cat("non-finite accumulation from ", op));
}

}  // namespace prfnet
