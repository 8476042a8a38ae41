#pragma once

#include <functional>
#include <vector>

#include "prfnet/tensor.hpp"

namespace prfnet {

// Gradient tape: the ordered record of one forward computation. Ops append a
// backward closure as they execute, so the list is topologically ordered by
// construction; backward() replays it once, in reverse. A tape is single-use
// until reset().
template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape*& active() {
        thread_local Tape* current = nullptr;
        return current;
    }

    void record(std::function<void()> backward_fn) {
        ops_.push_back(std::move(backward_fn));
    }

    size_t size() const { return ops_.size(); }

    // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
    // recorded input. Closures are released as they run so activation
    // storage is freed during the sweep.
    void backward(Tensor<T>& loss) {
        check(!used_, "backward() on a consumed tape; reset() and re-record the forward pass");
        check<ShapeError>(loss.numel() == 1, "backward() needs a scalar loss, got ",
                          loss.shape().str());
        used_ = true;
        loss.ensure_grad();
        loss.grad()[0] += T(1);
        for (size_t i = ops_.size(); i-- > 0;) {
            ops_[i]();
            ops_[i] = nullptr;
        }
    }

    void reset() {
        ops_.clear();
        used_ = false;
    }

private:
    std::vector<std::function<void()>> ops_;
    bool used_ = false;
};

// Activates a tape for the current scope.
template <typename T>
class TapeScope {
public:
    explicit TapeScope(Tape<T>& tape) : prev_(Tape<T>::active()) {
        Tape<T>::active() = &tape;
    }
    ~TapeScope() { Tape<T>::active() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<T>* prev_;
};

// Suspends recording (frozen submodules, pure evaluation inside training).
template <typename T>
class TapePause {
public:
    TapePause() : prev_(Tape<T>::active()) { Tape<T>::active() = nullptr; }
    ~TapePause() { Tape<T>::active() = prev_; }
    TapePause(const TapePause&) = delete;
    TapePause& operator=(const TapePause&) = delete;

private:
    Tape<T>* prev_;
};

}  // namespace prfnet
