#pragma once

#include <memory>
#include <string>
#include <vector>

#include "teocc/grid.hpp"
#include "teocc/nn.hpp"

namespace teocc {
namespace fusionhead {

/// Per-voxel class logits.
template <typename T>
struct OccupancyPrediction {
    GridSpec spec;
    Tensor<T> logits;  // (num_classes, nx, ny, nz)

    int num_classes() const { return logits.dim(0); }
};

/// Argmax over the class axis.
template <typename T>
OccupancyLabelGrid argmax_labels(const OccupancyPrediction<T>& pred) {
    OccupancyLabelGrid out = OccupancyLabelGrid::zeros(pred.spec);
    const int k = pred.num_classes();
    const std::int64_t v = pred.spec.num_voxels();
    for (std::int64_t i = 0; i < v; ++i) {
        int best = 0;
        T best_val = pred.logits[i];
        for (int c = 1; c < k; ++c) {
            const T val = pred.logits[std::int64_t(c) * v + i];
            if (val > best_val) {
                best_val = val;
                best = c;
            }
        }
        out.labels[i] = best;
    }
    return out;
}

/// One radar-camera fusion layer: channel concat -> 3D conv -> norm -> ReLU.
/// The model owns three independent instances (main, long, short).
template <typename T>
struct FusionLayer {
    nn::ConvNormAct3d<T> block;

    FusionLayer() = default;
    FusionLayer(nn::ParamRegistry<T>& reg, nn::Initializer<T>& init, const std::string& name,
                const std::string& group, int c_img, int c_radar, int c_fused)
        : block(reg, init, name, group, c_img + c_radar, c_fused, 3, 1) {}

    ag::VarPtr<T> operator()(const ag::VarPtr<T>& img_feat, const ag::VarPtr<T>& radar_feat) const {
        if (img_feat->value.shape().size() != 4 || radar_feat->value.shape().size() != 4)
            throw std::invalid_argument("fuse: expected (C,nx,ny,nz) grids");
        for (int a = 1; a < 4; ++a)
            if (img_feat->value.shape()[static_cast<std::size_t>(a)] !=
                radar_feat->value.shape()[static_cast<std::size_t>(a)])
                throw std::invalid_argument("fuse: image and radar grids have different dims");
        return block(ag::concat_channels<T>({img_feat, radar_feat}));
    }
};

/// Shared occupancy head: per-voxel MLP C_fused -> H -> num_classes with one
/// ReLU. Exactly one shared instance scores the main branch and both pseudo
/// features.
template <typename T>
struct OccHead {
    ag::VarPtr<T> w1, b1, w2, b2;

    OccHead() = default;
    OccHead(nn::ParamRegistry<T>& reg, nn::Initializer<T>& init, const std::string& name,
            const std::string& group, int c_fused, int hidden, int num_classes) {
        w1 = reg.create(name + ".w1", group, init.kaiming({hidden, c_fused}, c_fused));
        b1 = reg.create(name + ".b1", group, init.zeros({hidden}));
        w2 = reg.create(name + ".w2", group, init.kaiming({num_classes, hidden}, hidden));
        b2 = reg.create(name + ".b2", group, init.zeros({num_classes}));
    }

    ag::VarPtr<T> operator()(const ag::VarPtr<T>& feat) const {
        return ag::linear_pointwise(ag::relu(ag::linear_pointwise(feat, w1, b1)), w2, b2);
    }
};

/// Mean per-voxel cross-entropy of the prediction against labels.
template <typename T>
double occ_loss(const OccupancyPrediction<T>& pred, const OccupancyLabelGrid& gt,
                const std::vector<double>& class_weights = {}) {
    if (!(pred.spec == gt.spec)) throw std::invalid_argument("occ_loss: mismatched grid specs");
    auto logits = ag::make_var(pred.logits);
    auto labels = std::make_shared<const Tensor<std::int32_t>>(gt.labels);
    std::shared_ptr<const std::vector<double>> w;
    if (!class_weights.empty()) w = std::make_shared<const std::vector<double>>(class_weights);
    return static_cast<double>(ag::cross_entropy_mean(logits, labels, w)->value[0]);
}

enum class LossMode { Train, Infer };

/// Overall objective: in training the three occupancy losses add up; at
/// inference the temporal-enhancement terms are dropped entirely.
inline double total_loss(double l_main, double l_long, double l_short, LossMode mode,
                         double w_main = 1.0, double w_long = 1.0, double w_short = 1.0) {
    if (mode == LossMode::Infer) return w_main * l_main;
    return w_main * l_main + w_long * l_long + w_short * l_short;
}

}  // namespace fusionhead
}  // namespace teocc
