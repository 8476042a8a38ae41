#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>

namespace prfnet {

// Base error for all library failures.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/dimension contract violations.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Invalid argument values (bad stride, bad severity, ...).
struct ValueError : Error {
    explicit ValueError(const std::string& msg) : Error(msg) {}
};

// NaN/Inf produced by a forward op.
struct NonFiniteError : Error {
    explicit NonFiniteError(const std::string& msg) : Error(msg) {}
};

// Malformed files, missing paths, unreadable inputs.
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

namespace detail {
inline void cat_into(std::string&) {}
template <typename Head, typename... Tail>
void cat_into(std::string& out, Head&& head, Tail&&... tail) {
    if constexpr (std::is_arithmetic_v<std::decay_t<Head>>) {
        out += std::to_string(head);
    } else {
        out += head;
    }
    cat_into(out, std::forward<Tail>(tail)...);
}
}  // namespace detail

template <typename... Args>
std::string cat(Args&&... args) {
    std::string out;
    detail::cat_into(out, std::forward<Args>(args)...);
    return out;
}

template <typename E = Error, typename... Args>
void check(bool cond, Args&&... args) {
    if (!cond) throw E(cat(std::forward<Args>(args)...));
}

// Dense tensor extents, rank 1..4. Rank-4 tensors are interpreted N,C,H,W.
class Shape {
public:
    Shape() : rank_(0), d_{0, 0, 0, 0} {}
    Shape(std::initializer_list<int64_t> dims) : rank_(0), d_{0, 0, 0, 0} {
        check<ShapeError>(dims.size() >= 1 && dims.size() <= 4,
                          "shape rank must be 1..4, got ", dims.size());
        for (int64_t v : dims) {
            check<ShapeError>(v >= 0, "negative extent in shape");
            d_[rank_++] = v;
        }
    }

    int rank() const { return rank_; }
    int64_t dim(int i) const { return d_[static_cast<size_t>(i)]; }
    int64_t operator[](int i) const { return d_[static_cast<size_t>(i)]; }

    int64_t numel() const {
        int64_t n = 1;
        for (int i = 0; i < rank_; ++i) n *= d_[static_cast<size_t>(i)];
        return rank_ == 0 ? 0 : n;
    }

    bool operator==(const Shape& o) const {
        if (rank_ != o.rank_) return false;
        for (int i = 0; i < rank_; ++i)
            if (d_[static_cast<size_t>(i)] != o.d_[static_cast<size_t>(i)]) return false;
        return true;
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        std::string s = "[";
        for (int i = 0; i < rank_; ++i) {
            if (i) s += "x";
            s += std::to_string(d_[static_cast<size_t>(i)]);
        }
        return s + "]";
    }

private:
    int rank_;
    std::array<int64_t, 4> d_;
};

}  // namespace prfnet
