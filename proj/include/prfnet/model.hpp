#pragma once

#include <memory>

#include "prfnet/head.hpp"

namespace prfnet {

struct ModelConfig {
    BackboneConfig backbone;
    int64_t mlp_hidden = 32;
    bool fusion_cascaded = true;

    static ModelConfig toy() { return ModelConfig{}; }

    static ModelConfig full() {
        ModelConfig c;
        c.backbone = BackboneConfig::full();
        c.mlp_hidden = 128;
        return c;
    }
};

// The full comparator: shared backbone, cross subtraction, progressive
// fusion, MLP scorer. q is the probability that image B is the one closer
// to the reference.
template <typename T>
class PrfNet {
public:
    PrfNet(const ModelConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
        Rng rng(init_seed);
        backbone_ = std::make_unique<Backbone<T>>(store_, rng, cfg.backbone);
        cross_ = std::make_unique<CrossSubtraction<T>>(store_, rng, cfg.backbone.stage_widths);
        fusion_ = std::make_unique<ProgressiveFusion<T>>(store_, rng, cfg.backbone.stage_widths,
                                                         cfg.fusion_cascaded);
        head_ = std::make_unique<MlpHead<T>>(store_, rng, 2 * cfg.backbone.stage_widths[0],
                                             cfg.mlp_hidden);
    }

    // Scores a batch of triplets. `train` drives BN mode and is what the tape
    // records; `backbone_frozen` runs the feature extractor outside the tape
    // in eval mode (the fine-stage contract: no gradients, no stat updates).
    HeadOutput<T> forward_batch(const Tensor<T>& ref, const Tensor<T>& dis_a,
                                const Tensor<T>& dis_b, bool train, bool backbone_frozen = false) {
        std::array<FeaturePyramid<T>, 3> pyr;
        if (backbone_frozen) {
            TapePause<T> pause;
            pyr = backbone_->extract_triplet(ref, dis_a, dis_b, /*train=*/false);
        } else {
            pyr = backbone_->extract_triplet(ref, dis_a, dis_b, train);
        }
        DiffPyramid<T> diffs = cross_->forward(pyr[0], pyr[1], pyr[2]);
        FusionResult<T> fused = fusion_->forward(diffs);
        return head_->forward(fused.fused);
    }

    // Single triplet convenience: images are 3,H,W.
    T score_triplet(const Tensor<T>& ref, const Tensor<T>& dis_a, const Tensor<T>& dis_b) {
        auto lift = [](const Tensor<T>& img) {
            check<ShapeError>(img.shape().rank() == 3, "expected 3,H,W image, got ",
                              img.shape().str());
            return Tensor<T>::from(
                {1, img.shape().dim(0), img.shape().dim(1), img.shape().dim(2)}, img.values());
        };
        HeadOutput<T> out =
            forward_batch(lift(ref), lift(dis_a), lift(dis_b), /*train=*/false);
        return out.q.at(static_cast<int64_t>(0));
    }

    ParameterStore<T>& store() { return store_; }
    const ModelConfig& config() const { return cfg_; }
    Backbone<T>& backbone() { return *backbone_; }
    CrossSubtraction<T>& cross_subtraction() { return *cross_; }
    ProgressiveFusion<T>& fusion() { return *fusion_; }
    MlpHead<T>& mlp_head() { return *head_; }

    void set_backbone_frozen(bool frozen) { store_.set_frozen("backbone.", frozen); }

private:
    ModelConfig cfg_;
    ParameterStore<T> store_;
    std::unique_ptr<Backbone<T>> backbone_;
    std::unique_ptr<CrossSubtraction<T>> cross_;
    std::unique_ptr<ProgressiveFusion<T>> fusion_;
    std::unique_ptr<MlpHead<T>> head_;
};

}  // namespace prfnet
