#pragma once

#include <array>

#include "prfnet/backbone.hpp"

namespace prfnet {

// Per-level feature difference maps. diffs[i] carries diffa in its first
// half of channels and diffb in the second half.
template <typename T>
struct DiffPyramid {
    std::array<Tensor<T>, 4> diffa;
    std::array<Tensor<T>, 4> diffb;
    std::array<Tensor<T>, 4> diffs;
};

// Cross subtraction: one learned 3x3 channel-preserving conv per level,
// shared between the A and B branches (sharing is what makes an A/B swap an
// exact permutation of the concatenated halves), applied to the raw feature
// differences, then channel concatenation.
template <typename T>
class CrossSubtraction {
public:
    CrossSubtraction(ParameterStore<T>& store, Rng& rng, const std::array<int64_t, 4>& channels,
                     const std::string& prefix = "head")
        : channels_(channels) {
        for (int lvl = 0; lvl < 4; ++lvl)
            convs_[static_cast<size_t>(lvl)] =
                Conv2dLayer<T>(store, rng, cat(prefix, ".diff_conv", lvl + 1),
                               channels[static_cast<size_t>(lvl)],
                               channels[static_cast<size_t>(lvl)], 3, 1, 1, true);
    }

    DiffPyramid<T> forward(const FeaturePyramid<T>& ref, const FeaturePyramid<T>& dis_a,
                           const FeaturePyramid<T>& dis_b) const {
        DiffPyramid<T> out;
        for (size_t lvl = 0; lvl < 4; ++lvl) {
            check<ShapeError>(ref.levels[lvl].shape() == dis_a.levels[lvl].shape() &&
                                  ref.levels[lvl].shape() == dis_b.levels[lvl].shape(),
                              "pyramid level ", lvl + 1, " shape mismatch");
            out.diffa[lvl] = convs_[lvl].forward(sub(ref.levels[lvl], dis_a.levels[lvl]));
            out.diffb[lvl] = convs_[lvl].forward(sub(ref.levels[lvl], dis_b.levels[lvl]));
            out.diffs[lvl] = concat_channels(out.diffa[lvl], out.diffb[lvl]);
        }
        return out;
    }

private:
    std::array<int64_t, 4> channels_;
    std::array<Conv2dLayer<T>, 4> convs_;
};

template <typename T>
struct FusionResult {
    Tensor<T> fused;                  // F_fusion at level-1 resolution
    std::array<Tensor<T>, 3> weights; // w4, w3, w2 after upsampling
};

// Progressive feature fusion. The weight path is conv(3x3, C->C) ->
// channel mean -> sigmoid -> 2x nearest upsample; deeper fused maps gate
// shallower difference maps through a channel-broadcast hadamard product.
// In cascaded mode (default) weights come from the already-fused deeper map;
// the literal non-cascaded reading takes them from the raw difference maps.
template <typename T>
class ProgressiveFusion {
public:
    ProgressiveFusion(ParameterStore<T>& store, Rng& rng, const std::array<int64_t, 4>& channels,
                      bool cascaded, const std::string& prefix = "head")
        : cascaded_(cascaded) {
        // One weight conv per fused level 4..2, operating on 2*C_i channels.
        for (int lvl = 3; lvl >= 1; --lvl)
            convs_[static_cast<size_t>(lvl - 1)] =
                Conv2dLayer<T>(store, rng, cat(prefix, ".fuse", lvl + 1, ".conv"),
                               2 * channels[static_cast<size_t>(lvl)],
                               2 * channels[static_cast<size_t>(lvl)], 3, 1, 1, true);
    }

    // conv -> channel mean -> sigmoid -> 2x upsample, in that order.
    Tensor<T> fusion_weight(const Tensor<T>& f, int level_1based) const {
        const auto& conv = convs_[static_cast<size_t>(level_1based - 2)];
        return upsample2x_nearest(sigmoid(channel_mean(conv.forward(f))));
    }

    FusionResult<T> forward(const DiffPyramid<T>& d) const {
        for (size_t lvl = 0; lvl < 4; ++lvl)
            check<ShapeError>(d.diffs[lvl].defined(), "missing diff pyramid level ", lvl + 1);
        FusionResult<T> out;
        Tensor<T> fused = d.diffs[3];  // F'4 = F_diffs4
        for (int lvl = 3; lvl >= 1; --lvl) {
            const Tensor<T>& weight_src = cascaded_ ? fused : d.diffs[static_cast<size_t>(lvl)];
            Tensor<T> w = fusion_weight(weight_src, lvl + 1);
            out.weights[static_cast<size_t>(3 - lvl)] = w;
            fused = hadamard(w, d.diffs[static_cast<size_t>(lvl - 1)]);
        }
        out.fused = fused;
        return out;
    }

    bool cascaded() const { return cascaded_; }

private:
    bool cascaded_ = true;
    std::array<Conv2dLayer<T>, 3> convs_;  // [0]=fuse4, [1]=fuse3, [2]=fuse2
};

template <typename T>
struct HeadOutput {
    Tensor<T> logit;  // [N]-shaped pre-sigmoid score
    Tensor<T> q;      // [N]-shaped probability that B is closer
};

// Global average pool -> hidden linear -> ReLU -> linear(1) -> sigmoid.
template <typename T>
class MlpHead {
public:
    MlpHead(ParameterStore<T>& store, Rng& rng, int64_t in_channels, int64_t hidden,
            const std::string& prefix = "head")
        : fc1_(store, rng, prefix + ".mlp.fc1", in_channels, hidden),
          fc2_(store, rng, prefix + ".mlp.fc2", hidden, 1) {}

    HeadOutput<T> forward(const Tensor<T>& fused) const {
        Tensor<T> pooled = global_avg_pool(fused);
        Tensor<T> logit2d = fc2_.forward(relu(fc1_.forward(pooled)));  // N,1
        // Flatten N,1 -> N for the loss surface.
        Tensor<T> logit = reshape_to_vector(logit2d);
        return {logit, sigmoid(logit)};
    }

private:
    // N,1 -> [N] view-copy with pass-through gradient.
    static Tensor<T> reshape_to_vector(const Tensor<T>& x) {
        check<ShapeError>(x.shape().rank() == 2 && x.shape().dim(1) == 1,
                          "expected N,1 logits, got ", x.shape().str());
        Tensor<T> out = Tensor<T>::from({x.shape().dim(0)}, x.values());
        if (detail::recording<T>({&x})) {
            Tensor<T> xi = x;
            detail::mark(out, {&xi});
            Tape<T>::active()->record([xi, out]() mutable {
                const T* g = out.grad();
                T* gx = xi.grad();
                for (int64_t i = 0; i < out.numel(); ++i) gx[i] += g[i];
            });
        }
        return out;
    }

    LinearLayer<T> fc1_;
    LinearLayer<T> fc2_;
};

}  // namespace prfnet
