#pragma once

#include <array>
#include <vector>

#include "prfnet/blocks.hpp"

namespace prfnet {

// Widths/counts of the four-stage SE_Res2Net feature extractor. The default
// block plan is 3,4,6,3; the stem is a 7x7 stride-2 conv and stage 1 keeps
// stride 1 so the first pyramid level sits at a downsampling ratio of 2
// (there is no stem max-pool). Cumulative strides are then 2,4,8,16.
struct BackboneConfig {
    int64_t stem_width = 8;
    std::array<int64_t, 4> stage_widths = {32, 64, 128, 256};
    std::array<int64_t, 4> block_counts = {3, 4, 6, 3};
    std::array<int64_t, 4> stage_strides = {1, 2, 2, 2};
    int64_t res2net_scale = 4;
    int64_t se_reduction = 4;

    static BackboneConfig toy() { return BackboneConfig{}; }

    static BackboneConfig full() {
        BackboneConfig c;
        c.stem_width = 64;
        c.stage_widths = {256, 512, 1024, 2048};
        c.se_reduction = 16;
        return c;
    }

    void validate() const {
        check<ValueError>(stem_width >= 1, "stem width must be positive");
        for (int i = 0; i < 4; ++i) {
            check<ValueError>(stage_widths[static_cast<size_t>(i)] >= 1 &&
                                  block_counts[static_cast<size_t>(i)] >= 1,
                              "stage widths/counts must be positive");
            check<ValueError>(stage_strides[static_cast<size_t>(i)] == 1 ||
                                  stage_strides[static_cast<size_t>(i)] == 2,
                              "stage strides must be 1 or 2");
        }
        for (int i = 1; i < 4; ++i)
            check<ValueError>(stage_widths[static_cast<size_t>(i)] ==
                                  2 * stage_widths[static_cast<size_t>(i - 1)],
                              "stage widths must double per stage");
    }

    int64_t cumulative_stride(int stage_1based) const {
        int64_t s = 2;  // stem
        for (int i = 0; i < stage_1based; ++i) s *= stage_strides[static_cast<size_t>(i)];
        return s;
    }

    int64_t max_stride() const { return cumulative_stride(4); }

    int64_t mid_width(int stage) const { return stage_widths[static_cast<size_t>(stage)] / 4; }
};

// The four per-stage feature maps of one batch of images, deepest last.
template <typename T>
struct FeaturePyramid {
    std::array<Tensor<T>, 4> levels;
    std::array<int64_t, 4> strides = {0, 0, 0, 0};
    std::array<int64_t, 4> channels = {0, 0, 0, 0};

    int64_t batch() const { return levels[0].shape().dim(0); }
};

// Shared-weight feature extractor. One instance serves all three images of a
// triplet; during training the triplet is pushed through as a single fused
// batch so batch-norm statistics are common to O, A and B.
template <typename T>
class Backbone {
public:
    Backbone(ParameterStore<T>& store, Rng& rng, const BackboneConfig& cfg,
             const std::string& prefix = "backbone")
        : cfg_(cfg),
          stem_conv_(store, rng, prefix + ".stem.conv", 3, cfg.stem_width, 7, 2, 3, false),
          stem_bn_(store, prefix + ".stem.bn", cfg.stem_width) {
        cfg.validate();
        int64_t in_ch = cfg.stem_width;
        for (int stage = 0; stage < 4; ++stage) {
            const int64_t width = cfg.stage_widths[static_cast<size_t>(stage)];
            std::vector<SeRes2NetBlock<T>> blocks;
            for (int64_t b = 0; b < cfg.block_counts[static_cast<size_t>(stage)]; ++b) {
                BlockConfig bc;
                bc.in_channels = (b == 0) ? in_ch : width;
                bc.mid_channels = cfg.mid_width(stage);
                bc.out_channels = width;
                bc.stride = (b == 0) ? cfg.stage_strides[static_cast<size_t>(stage)] : 1;
                bc.res2net_scale = cfg.res2net_scale;
                bc.se_reduction = cfg.se_reduction;
                blocks.emplace_back(store, rng,
                                    cat(prefix, ".stage", stage + 1, ".block", b), bc);
            }
            stages_.push_back(std::move(blocks));
            in_ch = width;
        }
    }

    // image: N,3,H,W with H and W divisible by the max cumulative stride.
    FeaturePyramid<T> extract_pyramid(const Tensor<T>& image, bool train) {
        check<ShapeError>(image.shape().rank() == 4 && image.shape().dim(1) == 3,
                          "backbone expects N,3,H,W, got ", image.shape().str());
        const int64_t ms = cfg_.max_stride();
        check<ShapeError>(image.shape().dim(2) % ms == 0 && image.shape().dim(3) % ms == 0,
                          "image extents ", image.shape().str(), " must be divisible by ", ms);
        Tensor<T> x = relu(stem_bn_.forward(stem_conv_.forward(image), train));
        FeaturePyramid<T> pyr;
        for (int stage = 0; stage < 4; ++stage) {
            for (auto& block : stages_[static_cast<size_t>(stage)]) x = block.forward(x, train);
            pyr.levels[static_cast<size_t>(stage)] = x;
            pyr.strides[static_cast<size_t>(stage)] = cfg_.cumulative_stride(stage + 1);
            pyr.channels[static_cast<size_t>(stage)] = cfg_.stage_widths[static_cast<size_t>(stage)];
        }
        return pyr;
    }

    // Runs O,A,B through the shared weights as one fused batch of 3N images,
    // then splits per level. In train mode this makes BN statistics common to
    // the whole triplet, so A == O implies identical features.
    std::array<FeaturePyramid<T>, 3> extract_triplet(const Tensor<T>& ref, const Tensor<T>& dis_a,
                                                     const Tensor<T>& dis_b, bool train) {
        check<ShapeError>(ref.shape() == dis_a.shape() && ref.shape() == dis_b.shape(),
                          "triplet images disagree in shape: ", ref.shape().str(), " ",
                          dis_a.shape().str(), " ", dis_b.shape().str());
        const int64_t n = ref.shape().dim(0);
        Tensor<T> fused = concat_batch<T>({ref, dis_a, dis_b});
        FeaturePyramid<T> all = extract_pyramid(fused, train);
        std::array<FeaturePyramid<T>, 3> out;
        for (int img = 0; img < 3; ++img) {
            out[static_cast<size_t>(img)].strides = all.strides;
            out[static_cast<size_t>(img)].channels = all.channels;
            for (int lvl = 0; lvl < 4; ++lvl)
                out[static_cast<size_t>(img)].levels[static_cast<size_t>(lvl)] =
                    slice_batch(all.levels[static_cast<size_t>(lvl)], img * n, n);
        }
        return out;
    }

    const BackboneConfig& config() const { return cfg_; }

private:
    BackboneConfig cfg_;
    Conv2dLayer<T> stem_conv_;
    BatchNorm2dLayer<T> stem_bn_;
    std::vector<std::vector<SeRes2NetBlock<T>>> stages_;
};

}  // namespace prfnet
