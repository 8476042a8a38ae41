#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "prfnet/rng.hpp"
#include "prfnet/tensor.hpp"

namespace prfnet {

// A trainable tensor with a stable path-style name. Frozen parameters are
// skipped by the optimizer and carry no gradient while frozen.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    bool frozen = false;
};

// Flat registry of every parameter and state buffer of a model, in
// construction order. The order is deterministic, which is what makes
// checkpoints byte-stable.
template <typename T>
class ParameterStore {
public:
    // Returns a handle sharing the registered storage.
    Tensor<T> add(const std::string& name, Tensor<T> t) {
        check(param_index_.find(name) == param_index_.end() &&
                  buffer_index_.find(name) == buffer_index_.end(),
              "duplicate parameter name: ", name);
        t.set_requires_grad(true);
        param_index_[name] = params_.size();
        params_.push_back(Parameter<T>{name, t, false});
        return t;
    }

    // Non-trainable state (BN running stats).
    Tensor<T> add_buffer(const std::string& name, Tensor<T> t) {
        check(param_index_.find(name) == param_index_.end() &&
                  buffer_index_.find(name) == buffer_index_.end(),
              "duplicate buffer name: ", name);
        buffer_index_[name] = buffers_.size();
        buffers_.push_back({name, t});
        return t;
    }

    bool has(const std::string& name) const {
        return param_index_.count(name) > 0 || buffer_index_.count(name) > 0;
    }

    Parameter<T>& param(const std::string& name) {
        auto it = param_index_.find(name);
        check(it != param_index_.end(), "unknown parameter: ", name);
        return params_[it->second];
    }

    Tensor<T>& tensor(const std::string& name) {
        auto it = param_index_.find(name);
        if (it != param_index_.end()) return params_[it->second].value;
        auto bit = buffer_index_.find(name);
        check(bit != buffer_index_.end(), "unknown tensor: ", name);
        return buffers_[bit->second].second;
    }

    std::vector<Parameter<T>>& params() { return params_; }
    const std::vector<Parameter<T>>& params() const { return params_; }
    std::vector<std::pair<std::string, Tensor<T>>>& buffers() { return buffers_; }
    const std::vector<std::pair<std::string, Tensor<T>>>& buffers() const { return buffers_; }

    // Every named tensor (params then buffers) in registration order.
    std::vector<std::pair<std::string, Tensor<T>>> named_tensors() const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        out.reserve(params_.size() + buffers_.size());
        for (const auto& p : params_) out.emplace_back(p.name, p.value);
        for (const auto& b : buffers_) out.emplace_back(b.first, b.second);
        return out;
    }

    void set_frozen(const std::string& prefix, bool frozen) {
        for (auto& p : params_)
            if (p.name.rfind(prefix, 0) == 0) p.frozen = frozen;
    }

    int64_t count_values(const std::string& prefix = "") const {
        int64_t n = 0;
        for (const auto& p : params_)
            if (p.name.rfind(prefix, 0) == 0) n += p.value.numel();
        return n;
    }

    void clear_grads() {
        for (auto& p : params_) p.value.clear_grad();
    }

private:
    std::vector<Parameter<T>> params_;
    std::vector<std::pair<std::string, Tensor<T>>> buffers_;
    std::unordered_map<std::string, size_t> param_index_;
    std::unordered_map<std::string, size_t> buffer_index_;
};

// He-normal fan-in init for conv/linear weights feeding ReLU stacks.
template <typename T>
Tensor<T> init_he_normal(const Shape& shape, int64_t fan_in, Rng& rng) {
    Tensor<T> t = Tensor<T>::zeros(shape);
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = static_cast<T>(rng.normal(0.0, stddev));
    return t;
}

// Plain SGD. Momentum and weight decay default off; they exist as config
// switches only. Gradients are consumed by the step: every non-frozen
// parameter must have one, and all are cleared afterwards.
template <typename T>
struct Sgd {
    T momentum = T(0);
    T weight_decay = T(0);

    void step(ParameterStore<T>& store, T lr) {
        check<ValueError>(lr > T(0), "sgd step needs lr > 0");
        for (auto& p : store.params()) {
            if (p.frozen) {
                p.value.clear_grad();
                continue;
            }
            check(p.value.has_grad(), "missing gradient on non-frozen parameter ", p.name);
            T* v = p.value.data();
            const T* g = p.value.grad();
            const int64_t n = p.value.numel();
            if (momentum > T(0)) {
                auto& vel = velocity_[p.name];
                if (vel.empty()) vel.assign(static_cast<size_t>(n), T(0));
                for (int64_t i = 0; i < n; ++i) {
                    T grad = g[i] + weight_decay * v[i];
                    vel[static_cast<size_t>(i)] = momentum * vel[static_cast<size_t>(i)] + grad;
                    v[i] -= lr * vel[static_cast<size_t>(i)];
                }
            } else if (weight_decay > T(0)) {
                for (int64_t i = 0; i < n; ++i) v[i] -= lr * (g[i] + weight_decay * v[i]);
            } else {
                for (int64_t i = 0; i < n; ++i) v[i] -= lr * g[i];
            }
            p.value.clear_grad();
        }
    }

private:
    std::unordered_map<std::string, std::vector<T>> velocity_;
};

// Single-step convenience used by tests: p <- p - lr * grad.
template <typename T>
void sgd_step(ParameterStore<T>& store, T lr) {
    Sgd<T>{}.step(store, lr);
}

}  // namespace prfnet
