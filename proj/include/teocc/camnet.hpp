#pragma once

#include <array>
#include <memory>
#include <vector>

#include "teocc/grid.hpp"
#include "teocc/nn.hpp"
#include "teocc/sim.hpp"

namespace teocc {
namespace camnet {

/// 2D features at a fixed downsample of the camera resolution.
template <typename T>
struct ImageFeatureMap {
    int channels = 0;
    Tensor<T> data;  // (channels, h, w)
};

/// Categorical depth: strictly increasing bin centers plus per-pixel bin
/// probabilities that sum to one.
template <typename T>
struct DepthDistribution {
    std::vector<double> bins;  // D depth values, meters
    Tensor<T> probs;           // (D, h, w)
};

inline std::vector<double> depth_bin_centers(double depth_min, double depth_max, int bins) {
    if (!(depth_max > depth_min) || bins < 1)
        throw std::invalid_argument("depth bins: need depth_max > depth_min and bins >= 1");
    std::vector<double> c(static_cast<std::size_t>(bins));
    const double step = (depth_max - depth_min) / bins;
    for (int i = 0; i < bins; ++i) c[static_cast<std::size_t>(i)] = depth_min + (i + 0.5) * step;
    return c;
}

/// Nearest depth bin for a metric depth, clamped to the bin range.
inline int depth_bin_of(double depth, double depth_min, double depth_max, int bins) {
    const double step = (depth_max - depth_min) / bins;
    const int i = static_cast<int>(std::floor((depth - depth_min) / step));
    return std::max(0, std::min(bins - 1, i));
}

template <typename T>
struct ConvNormAct2d {
    nn::Conv2dLayer<T> conv;
    nn::GroupNormLayer<T> norm;

    ConvNormAct2d() = default;
    ConvNormAct2d(nn::ParamRegistry<T>& reg, nn::Initializer<T>& init, const std::string& name,
                  const std::string& group, int ci, int co, int stride)
        : conv(reg, init, name + ".conv", group, ci, co, 3, stride),
          norm(reg, init, name + ".norm", group, co) {}

    ag::VarPtr<T> operator()(const ag::VarPtr<T>& x) const {
        return ag::relu(norm(conv(x)));
    }
};

/// Small strided conv encoder: three conv+norm+ReLU blocks at strides 2,1,2,
/// and a 1x1 depth head over the final feature map. Produces features at 1/4
/// resolution and a softmaxed depth distribution over D bins.
template <typename T>
struct ImageEncoder {
    ConvNormAct2d<T> block1, block2, block3;
    ag::VarPtr<T> depth_w, depth_b;
    int in_h = 0, in_w = 0, depth_bins = 0, c_img = 0;

    ImageEncoder() = default;
    ImageEncoder(nn::ParamRegistry<T>& reg, nn::Initializer<T>& init, const std::string& group,
                 int image_h, int image_w, int c1, int c2, int c_out, int bins)
        : block1(reg, init, "encoder.block1", group, 2, c1, 2),
          block2(reg, init, "encoder.block2", group, c1, c2, 1),
          block3(reg, init, "encoder.block3", group, c2, c_out, 2),
          in_h(image_h),
          in_w(image_w),
          depth_bins(bins),
          c_img(c_out) {
        depth_w = reg.create("encoder.depth.w", group,
                             init.kaiming({bins, c_out, 1, 1}, c_out));
        depth_b = reg.create("encoder.depth.b", group, init.zeros({bins}));
    }

    /// image (2, H, W) -> {features (C_img, H/4, W/4), depth probs (D, H/4, W/4)}.
    std::pair<ag::VarPtr<T>, ag::VarPtr<T>> operator()(const ag::VarPtr<T>& image) const {
        const auto& s = image->value.shape();
        if (s.size() != 3 || s[0] != 2 || s[1] != in_h || s[2] != in_w)
            throw std::invalid_argument("encode_image: expected image (2," +
                                        std::to_string(in_h) + "," + std::to_string(in_w) +
                                        "), got " + shape_str(s));
        auto h = block3(block2(block1(image)));
        auto logits = ag::conv2d(h, depth_w, depth_b, 1);
        return {h, ag::softmax_channels(logits)};
    }
};

// ---------------------------------------------------------------------------
// Camera-to-voxel geometry
// ---------------------------------------------------------------------------

/// Precomputes which voxel every (pixel, depth bin) unprojects into. Depth is
/// planar (along the optical axis); pixels are taken at feature-map centers.
inline nn::LiftPlan make_lift_plan(const sim::CameraModel& cam, const GridSpec& spec, int feat_h,
                                   int feat_w, const std::vector<double>& bins) {
    cam.validate();
    nn::LiftPlan plan;
    plan.feat_h = feat_h;
    plan.feat_w = feat_w;
    plan.depth_bins = static_cast<int>(bins.size());
    plan.num_voxels = spec.num_voxels();
    plan.voxel_of.assign(static_cast<std::size_t>(plan.depth_bins) * feat_h * feat_w, -1);
    const double sx = static_cast<double>(cam.width) / feat_w;
    const double sy = static_cast<double>(cam.height) / feat_h;
    for (int d = 0; d < plan.depth_bins; ++d)
        for (int v = 0; v < feat_h; ++v)
            for (int u = 0; u < feat_w; ++u) {
                const double px = (u + 0.5) * sx;
                const double py = (v + 0.5) * sy;
                const double depth = bins[static_cast<std::size_t>(d)];
                const Vec3 p_cam = {depth * (px - cam.cx) / cam.fx,
                                    depth * (py - cam.cy) / cam.fy, depth};
                const Vec3 p_ego = cam.extrinsic.apply(p_cam);
                if (auto idx = voxel_index(spec, p_ego)) {
                    plan.voxel_of[(static_cast<std::size_t>(d) * feat_h + v) * feat_w + u] =
                        static_cast<std::int32_t>(
                            (std::int64_t((*idx)[0]) * spec.dims[1] + (*idx)[1]) * spec.dims[2] +
                            (*idx)[2]);
                }
            }
    return plan;
}

// ---------------------------------------------------------------------------
// Value-level surface (used by tests and tools; the model wraps the same
// kernels with autograd)
// ---------------------------------------------------------------------------

/// Splat features through the depth distribution into the frame's ego grid.
template <typename T>
VoxelFeatureGrid<T> lift_splat(const ImageFeatureMap<T>& feat, const DepthDistribution<T>& depth,
                               const sim::CameraModel& cam, const EgoPose& ego_pose,
                               const GridSpec& spec) {
    ego_pose.validate();
    const auto& fs = feat.data.shape();
    const auto& ps = depth.probs.shape();
    if (fs.size() != 3 || ps.size() != 3 || fs[1] != ps[1] || fs[2] != ps[2] ||
        ps[0] != static_cast<int>(depth.bins.size()))
        throw std::invalid_argument("lift_splat: inconsistent feature/depth shapes");
    const nn::LiftPlan plan = make_lift_plan(cam, spec, fs[1], fs[2], depth.bins);
    VoxelFeatureGrid<T> out = VoxelFeatureGrid<T>::zeros(spec, fs[0]);
    nn::lift_splat_forward(feat.data.data(), depth.probs.data(), fs[0], plan, out.data.data());
    return out;
}

/// Sum of per-camera lifted grids.
template <typename T>
VoxelFeatureGrid<T> multi_view_lift(const std::vector<VoxelFeatureGrid<T>>& per_camera) {
    if (per_camera.empty()) throw std::invalid_argument("multi_view_lift: no cameras");
    VoxelFeatureGrid<T> out = per_camera[0];
    for (std::size_t i = 1; i < per_camera.size(); ++i) {
        if (!(per_camera[i].spec == out.spec) || per_camera[i].channels != out.channels)
            throw std::invalid_argument("multi_view_lift: mismatched grids");
        for (std::int64_t j = 0; j < out.data.numel(); ++j)
            out.data[j] += per_camera[i].data[j];
    }
    return out;
}

/// Resample a historical grid at the current frame's voxel centers
/// (trilinear, zero outside).
template <typename T>
VoxelFeatureGrid<T> warp_to_current(const VoxelFeatureGrid<T>& v, const EgoPose& pose_src,
                                    const EgoPose& pose_cur) {
    pose_src.validate();
    pose_cur.validate();
    const nn::SamplePlan plan = nn::make_warp_plan(v.spec, pose_src, pose_cur);
    VoxelFeatureGrid<T> out = VoxelFeatureGrid<T>::zeros(v.spec, v.channels);
    nn::sample_forward(v.data.data(), v.channels, plan, out.data.data());
    return out;
}

}  // namespace camnet
}  // namespace teocc
