#pragma once

#include <optional>
#include <vector>

#include "prfnet/conv.hpp"
#include "prfnet/gradcheck.hpp"
#include "prfnet/ops.hpp"
#include "prfnet/parameter.hpp"

namespace prfnet {

// ---------------------------------------------------------------------------
// Thin layer wrappers: create parameters under a name prefix, forward through
// the functional ops. Conv weights are He-normal, biases/beta zero, gamma one.
// ---------------------------------------------------------------------------

template <typename T>
struct Conv2dLayer {
    Tensor<T> weight;
    std::optional<Tensor<T>> bias;
    int64_t stride = 1;
    int64_t pad = 0;

    Conv2dLayer() = default;
    Conv2dLayer(ParameterStore<T>& store, Rng& rng, const std::string& prefix, int64_t cin,
                int64_t cout, int64_t k, int64_t stride_, int64_t pad_, bool with_bias)
        : stride(stride_), pad(pad_) {
        weight = store.add(prefix + ".weight",
                           init_he_normal<T>({cout, cin, k, k}, cin * k * k, rng));
        if (with_bias) bias = store.add(prefix + ".bias", Tensor<T>::zeros({cout}));
    }

    Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, pad); }
};

template <typename T>
struct BatchNorm2dLayer {
    Tensor<T> gamma;
    Tensor<T> beta;
    BnStats<T> stats;
    T momentum = T(0.1);
    T eps = T(1e-5);

    BatchNorm2dLayer() = default;
    BatchNorm2dLayer(ParameterStore<T>& store, const std::string& prefix, int64_t channels) {
        gamma = store.add(prefix + ".gamma", Tensor<T>::full({channels}, T(1)));
        beta = store.add(prefix + ".beta", Tensor<T>::zeros({channels}));
        stats = BnStats<T>::make(channels);
        store.add_buffer(prefix + ".running_mean", stats.mean);
        store.add_buffer(prefix + ".running_var", stats.var);
        store.add_buffer(prefix + ".count", stats.count);
    }

    Tensor<T> forward(const Tensor<T>& x, bool train) {
        return batchnorm2d(x, gamma, beta, stats, train ? BnMode::Train : BnMode::Eval, momentum,
                           eps);
    }

    // Fused relu(bn(x)); same values as forward() followed by relu().
    Tensor<T> forward_relu(const Tensor<T>& x, bool train) {
        return batchnorm2d_relu(x, gamma, beta, stats, train ? BnMode::Train : BnMode::Eval,
                                momentum, eps);
    }
};

template <typename T>
struct LinearLayer {
    Tensor<T> weight;
    Tensor<T> bias;

    LinearLayer() = default;
    LinearLayer(ParameterStore<T>& store, Rng& rng, const std::string& prefix, int64_t din,
                int64_t dout) {
        weight = store.add(prefix + ".weight", init_he_normal<T>({dout, din}, din, rng));
        bias = store.add(prefix + ".bias", Tensor<T>::zeros({dout}));
    }

    Tensor<T> forward(const Tensor<T>& x) const { return linear(x, weight, bias); }
};

// ---------------------------------------------------------------------------
// Block configuration shared by the residual variants.
// ---------------------------------------------------------------------------

struct BlockConfig {
    int64_t in_channels = 0;
    int64_t mid_channels = 0;
    int64_t out_channels = 0;
    int64_t stride = 1;      // 1 or 2
    int64_t res2net_scale = 4;
    int64_t se_reduction = 4;

    void validate() const {
        check<ValueError>(in_channels >= 1 && mid_channels >= 1 && out_channels >= 1,
                          "block channels must be positive");
        check<ValueError>(stride == 1 || stride == 2, "block stride must be 1 or 2, got ", stride);
        check<ValueError>(res2net_scale >= 2, "res2net scale must be >= 2, got ", res2net_scale);
        check<ValueError>(mid_channels % res2net_scale == 0, "mid_channels ", mid_channels,
                          " not divisible by scale ", res2net_scale);
        check<ValueError>(se_reduction >= 1 && out_channels >= se_reduction,
                          "need out_channels >= se_reduction for a nonempty squeeze");
    }

    bool needs_projection() const { return stride != 1 || in_channels != out_channels; }
};

// ---------------------------------------------------------------------------
// Squeeze-and-excitation gate: gap -> fc(C -> C/r) -> relu -> fc(C/r -> C)
// -> sigmoid, applied as a per-channel scale.
// ---------------------------------------------------------------------------

template <typename T>
struct SeBlock {
    LinearLayer<T> fc1;
    LinearLayer<T> fc2;

    SeBlock() = default;
    SeBlock(ParameterStore<T>& store, Rng& rng, const std::string& prefix, int64_t channels,
            int64_t reduction) {
        check<ValueError>(channels >= reduction, "SE block needs C >= r, got C=", channels,
                          " r=", reduction);
        const int64_t hidden = channels / reduction;
        fc1 = LinearLayer<T>(store, rng, prefix + ".fc1", channels, hidden);
        fc2 = LinearLayer<T>(store, rng, prefix + ".fc2", hidden, channels);
    }

    Tensor<T> excitation(const Tensor<T>& x) const {
        return sigmoid(fc2.forward(relu(fc1.forward(global_avg_pool(x)))));
    }

    Tensor<T> forward(const Tensor<T>& x) const { return scale_channels(x, excitation(x)); }
};

namespace detail {

// Projection shortcut used when the skip path changes shape.
template <typename T>
struct Projection {
    Conv2dLayer<T> conv;
    BatchNorm2dLayer<T> bn;

    Projection(ParameterStore<T>& store, Rng& rng, const std::string& prefix,
               const BlockConfig& cfg)
        : conv(store, rng, prefix + ".conv", cfg.in_channels, cfg.out_channels, 1, cfg.stride, 0,
               false),
          bn(store, prefix + ".bn", cfg.out_channels) {}

    Tensor<T> forward(const Tensor<T>& x, bool train) { return bn.forward(conv.forward(x), train); }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Classic ResNet bottleneck: 1x1 -> 3x3 (stride) -> 1x1, BN+ReLU between,
// skip added before the final ReLU.
// ---------------------------------------------------------------------------

template <typename T>
class BottleneckBlock {
public:
    BottleneckBlock(ParameterStore<T>& store, Rng& rng, const std::string& prefix,
                    const BlockConfig& cfg)
        : cfg_(cfg),
          conv1_(store, rng, prefix + ".conv1", cfg.in_channels, cfg.mid_channels, 1, 1, 0, false),
          bn1_(store, prefix + ".bn1", cfg.mid_channels),
          conv2_(store, rng, prefix + ".conv2", cfg.mid_channels, cfg.mid_channels, 3, cfg.stride,
                 1, false),
          bn2_(store, prefix + ".bn2", cfg.mid_channels),
          conv3_(store, rng, prefix + ".conv3", cfg.mid_channels, cfg.out_channels, 1, 1, 0, false),
          bn3_(store, prefix + ".bn3", cfg.out_channels) {
        cfg.validate();
        if (cfg.needs_projection()) proj_.emplace(store, rng, prefix + ".proj", cfg);
    }

    Tensor<T> forward(const Tensor<T>& x, bool train) {
        check<ShapeError>(x.shape().dim(1) == cfg_.in_channels, "bottleneck expects ",
                          cfg_.in_channels, " input channels, got ", x.shape().dim(1));
        Tensor<T> r = bn1_.forward_relu(conv1_.forward(x), train);
        r = bn2_.forward_relu(conv2_.forward(r), train);
        r = bn3_.forward(conv3_.forward(r), train);
        Tensor<T> skip = proj_ ? proj_->forward(x, train) : x;
        return add_relu(r, skip);
    }

    const BlockConfig& config() const { return cfg_; }

private:
    BlockConfig cfg_;
    Conv2dLayer<T> conv1_;
    BatchNorm2dLayer<T> bn1_;
    Conv2dLayer<T> conv2_;
    BatchNorm2dLayer<T> bn2_;
    Conv2dLayer<T> conv3_;
    BatchNorm2dLayer<T> bn3_;
    std::optional<detail::Projection<T>> proj_;
};

// ---------------------------------------------------------------------------
// Res2Net block, optionally with an SE gate on the residual branch.
//
// After the first 1x1 conv the mid channels split into s equal groups. At
// stride 1 the groups chain hierarchically: y1 = x1, yi = conv3x3(xi + y_{i-1}).
// At stride 2 the hierarchical addition is not shape-compatible, so each group
// is convolved independently and the first group is 2x2-average-pooled; this
// follows the reference Res2Net design for downsampling blocks. Each group
// conv is followed by BN + ReLU.
// ---------------------------------------------------------------------------

template <typename T>
class Res2NetBlock {
public:
    Res2NetBlock(ParameterStore<T>& store, Rng& rng, const std::string& prefix,
                 const BlockConfig& cfg, bool with_se)
        : cfg_(cfg),
          conv1_(store, rng, prefix + ".conv1", cfg.in_channels, cfg.mid_channels, 1, 1, 0, false),
          bn1_(store, prefix + ".bn1", cfg.mid_channels) {
        cfg.validate();
        const int64_t gw = cfg.mid_channels / cfg.res2net_scale;
        for (int64_t i = 2; i <= cfg.res2net_scale; ++i) {
            const std::string gp = prefix + ".group" + std::to_string(i);
            gconv_.emplace_back(store, rng, gp + ".conv", gw, gw, 3, cfg.stride, 1, false);
            gbn_.emplace_back(store, gp + ".bn", gw);
        }
        conv3_ = Conv2dLayer<T>(store, rng, prefix + ".conv3", cfg.mid_channels, cfg.out_channels,
                                1, 1, 0, false);
        bn3_ = BatchNorm2dLayer<T>(store, prefix + ".bn3", cfg.out_channels);
        if (with_se) se_.emplace(store, rng, prefix + ".se", cfg.out_channels, cfg.se_reduction);
        if (cfg.needs_projection()) proj_.emplace(store, rng, prefix + ".proj", cfg);
    }

    Tensor<T> forward(const Tensor<T>& x, bool train) {
        Tensor<T> r = bn3_.forward(conv3_.forward(group_chain(x, train)), train);
        Tensor<T> skip = proj_ ? proj_->forward(x, train) : x;
        if (se_) return scale_channels_add_relu(r, se_->excitation(r), skip);
        return add_relu(r, skip);
    }

    // The hierarchical group outputs y1..ys after re-concatenation; exposed so
    // the receptive-field behaviour can be probed mid-block.
    Tensor<T> group_chain(const Tensor<T>& x, bool train) {
        check<ShapeError>(x.shape().dim(1) == cfg_.in_channels, "res2net block expects ",
                          cfg_.in_channels, " input channels, got ", x.shape().dim(1));
        Tensor<T> mid = bn1_.forward_relu(conv1_.forward(x), train);
        const int64_t s = cfg_.res2net_scale;
        const int64_t gw = cfg_.mid_channels / s;
        std::vector<Tensor<T>> ys;
        ys.reserve(static_cast<size_t>(s));
        for (int64_t i = 0; i < s; ++i) {
            Tensor<T> xi = slice_channels(mid, i * gw, gw);
            if (i == 0) {
                ys.push_back(cfg_.stride == 1 ? xi : avg_pool2x2(xi));
            } else {
                Tensor<T> gin = (cfg_.stride == 1) ? add(xi, ys.back()) : xi;
                ys.push_back(gbn_[static_cast<size_t>(i - 1)].forward_relu(
                    gconv_[static_cast<size_t>(i - 1)].forward(gin), train));
            }
        }
        Tensor<T> merged = ys[0];
        for (int64_t i = 1; i < s; ++i) merged = concat_channels(merged, ys[static_cast<size_t>(i)]);
        return merged;
    }

    const BlockConfig& config() const { return cfg_; }
    bool has_se() const { return se_.has_value(); }
    SeBlock<T>& se() { return *se_; }

private:
    BlockConfig cfg_;
    Conv2dLayer<T> conv1_;
    BatchNorm2dLayer<T> bn1_;
    std::vector<Conv2dLayer<T>> gconv_;
    std::vector<BatchNorm2dLayer<T>> gbn_;
    Conv2dLayer<T> conv3_;
    BatchNorm2dLayer<T> bn3_;
    std::optional<SeBlock<T>> se_;
    std::optional<detail::Projection<T>> proj_;
};

// SE_Res2Net: Res2Net residual path with channel attention before the skip.
template <typename T>
class SeRes2NetBlock : public Res2NetBlock<T> {
public:
    SeRes2NetBlock(ParameterStore<T>& store, Rng& rng, const std::string& prefix,
                   const BlockConfig& cfg)
        : Res2NetBlock<T>(store, rng, prefix, cfg, /*with_se=*/true) {}
};

}  // namespace prfnet
