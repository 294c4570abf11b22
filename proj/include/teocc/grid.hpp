#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "teocc/tensor.hpp"

namespace teocc {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<double, 9>;  // row-major

inline Vec3 mat3_apply(const Mat3& m, const Vec3& v) {
    return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
            m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
            m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}

inline Mat3 mat3_mul(const Mat3& a, const Mat3& b) {
    Mat3 r{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0;
            for (int k = 0; k < 3; ++k) s += a[i * 3 + k] * b[k * 3 + j];
            r[i * 3 + j] = s;
        }
    return r;
}

inline Mat3 mat3_transpose(const Mat3& a) {
    return {a[0], a[3], a[6], a[1], a[4], a[7], a[2], a[5], a[8]};
}

inline Mat3 mat3_identity() { return {1, 0, 0, 0, 1, 0, 0, 0, 1}; }

inline Mat3 rot_z(double yaw) {
    const double c = std::cos(yaw), s = std::sin(yaw);
    return {c, -s, 0, s, c, 0, 0, 0, 1};
}

/// Geometry of the voxel volume: metric ranges, per-axis voxel size and the
/// integer grid dimensions they imply.
struct GridSpec {
    std::array<double, 2> x_range{};
    std::array<double, 2> y_range{};
    std::array<double, 2> z_range{};
    Vec3 voxel_size{};
    std::array<int, 3> dims{};

    double range_min(int axis) const {
        return axis == 0 ? x_range[0] : axis == 1 ? y_range[0] : z_range[0];
    }
    double range_max(int axis) const {
        return axis == 0 ? x_range[1] : axis == 1 ? y_range[1] : z_range[1];
    }
    std::int64_t num_voxels() const {
        return std::int64_t(dims[0]) * dims[1] * dims[2];
    }
    bool operator==(const GridSpec& o) const {
        return x_range == o.x_range && y_range == o.y_range && z_range == o.z_range &&
               voxel_size == o.voxel_size && dims == o.dims;
    }
};

/// Builds a GridSpec, rejecting extents that are not whole multiples of the
/// voxel size (to within 1e-9 m).
inline GridSpec make_grid_spec(std::array<double, 2> x_range, std::array<double, 2> y_range,
                               std::array<double, 2> z_range, Vec3 voxel_size) {
    GridSpec spec{x_range, y_range, z_range, voxel_size, {}};
    for (int a = 0; a < 3; ++a) {
        const double lo = spec.range_min(a), hi = spec.range_max(a), vs = voxel_size[a];
        if (!(vs > 0)) throw std::invalid_argument("make_grid_spec: voxel size must be positive");
        if (!(hi > lo)) throw std::invalid_argument("make_grid_spec: empty range on axis " + std::to_string(a));
        const double extent = hi - lo;
        const double n = extent / vs;
        const double rounded = std::round(n);
        if (std::abs(n - rounded) * vs > 1e-9 || rounded < 1) {
            throw std::invalid_argument("make_grid_spec: extent " + std::to_string(extent) +
                                        " on axis " + std::to_string(a) +
                                        " is not divisible by voxel size " + std::to_string(vs));
        }
        spec.dims[static_cast<std::size_t>(a)] = static_cast<int>(rounded);
    }
    return spec;
}

inline GridSpec make_grid_spec(std::array<double, 2> x_range, std::array<double, 2> y_range,
                               std::array<double, 2> z_range, double voxel_size) {
    return make_grid_spec(x_range, y_range, z_range, Vec3{voxel_size, voxel_size, voxel_size});
}

/// Voxel containing the point under half-open intervals; points on the max
/// boundary are out of range. Out-of-range is a value, not an error.
inline std::optional<std::array<int, 3>> voxel_index(const GridSpec& spec, const Vec3& p) {
    std::array<int, 3> idx{};
    for (int a = 0; a < 3; ++a) {
        const double rel = (p[static_cast<std::size_t>(a)] - spec.range_min(a)) /
                           spec.voxel_size[static_cast<std::size_t>(a)];
        const int i = static_cast<int>(std::floor(rel));
        if (i < 0 || i >= spec.dims[static_cast<std::size_t>(a)]) return std::nullopt;
        idx[static_cast<std::size_t>(a)] = i;
    }
    return idx;
}

inline Vec3 voxel_center(const GridSpec& spec, int i, int j, int k) {
    return {spec.x_range[0] + (i + 0.5) * spec.voxel_size[0],
            spec.y_range[0] + (j + 0.5) * spec.voxel_size[1],
            spec.z_range[0] + (k + 0.5) * spec.voxel_size[2]};
}

/// Semantic classes. Index 0 is always the free class.
struct SemanticLabelSet {
    std::vector<std::string> names;

    int num_classes() const { return static_cast<int>(names.size()); }

    void validate() const {
        if (names.size() < 2) throw std::invalid_argument("SemanticLabelSet: need >= 2 classes");
        if (names[0] != "free") throw std::invalid_argument("SemanticLabelSet: class 0 must be 'free'");
        for (std::size_t i = 0; i < names.size(); ++i)
            for (std::size_t j = i + 1; j < names.size(); ++j)
                if (names[i] == names[j])
                    throw std::invalid_argument("SemanticLabelSet: duplicate class name " + names[i]);
    }

    static SemanticLabelSet desk_default() {
        return SemanticLabelSet{{"free", "ground", "building", "barrier", "car", "pedestrian"}};
    }
};

/// Per-voxel semantic class labels on a grid.
struct OccupancyLabelGrid {
    GridSpec spec;
    Tensor<std::int32_t> labels;  // (nx, ny, nz)

    static OccupancyLabelGrid zeros(const GridSpec& spec) {
        return {spec, Tensor<std::int32_t>({spec.dims[0], spec.dims[1], spec.dims[2]})};
    }

    std::int32_t& at(int i, int j, int k) {
        return labels[(std::int64_t(i) * spec.dims[1] + j) * spec.dims[2] + k];
    }
    std::int32_t at(int i, int j, int k) const {
        return labels[(std::int64_t(i) * spec.dims[1] + j) * spec.dims[2] + k];
    }
};

/// Dense feature volume over a grid, laid out (channels, nx, ny, nz).
template <typename T>
struct VoxelFeatureGrid {
    GridSpec spec;
    int channels = 0;
    Tensor<T> data;

    static VoxelFeatureGrid zeros(const GridSpec& spec, int channels) {
        return {spec, channels, Tensor<T>({channels, spec.dims[0], spec.dims[1], spec.dims[2]})};
    }
};

/// Rigid ego pose in the world frame.
struct EgoPose {
    Mat3 rotation = mat3_identity();
    Vec3 translation{0, 0, 0};
    int timestamp = 0;

    Vec3 apply(const Vec3& p) const {
        Vec3 r = mat3_apply(rotation, p);
        return {r[0] + translation[0], r[1] + translation[1], r[2] + translation[2]};
    }

    void validate(double tol = 1e-6) const {
        const Mat3 rtr = mat3_mul(mat3_transpose(rotation), rotation);
        const Mat3 eye = mat3_identity();
        for (int i = 0; i < 9; ++i)
            if (std::abs(rtr[i] - eye[i]) > tol)
                throw std::invalid_argument("EgoPose: rotation is not orthonormal");
        const double det =
            rotation[0] * (rotation[4] * rotation[8] - rotation[5] * rotation[7]) -
            rotation[1] * (rotation[3] * rotation[8] - rotation[5] * rotation[6]) +
            rotation[2] * (rotation[3] * rotation[7] - rotation[4] * rotation[6]);
        if (std::abs(det - 1.0) > tol) throw std::invalid_argument("EgoPose: det(R) != +1");
    }
};

inline EgoPose compose_pose(const EgoPose& a, const EgoPose& b) {
    EgoPose r;
    r.rotation = mat3_mul(a.rotation, b.rotation);
    const Vec3 t = mat3_apply(a.rotation, b.translation);
    r.translation = {t[0] + a.translation[0], t[1] + a.translation[1], t[2] + a.translation[2]};
    r.timestamp = b.timestamp;
    return r;
}

inline EgoPose invert_pose(const EgoPose& a) {
    EgoPose r;
    r.rotation = mat3_transpose(a.rotation);
    const Vec3 t = mat3_apply(r.rotation, a.translation);
    r.translation = {-t[0], -t[1], -t[2]};
    r.timestamp = a.timestamp;
    return r;
}

enum class FlipAxis { X = 0, Y = 1 };

namespace detail {

template <typename T>
Tensor<T> flip_spatial(const Tensor<T>& t, int spatial_axis_offset, FlipAxis axis) {
    // spatial_axis_offset: index of the nx axis within the tensor shape.
    const auto& s = t.shape();
    const int ax = spatial_axis_offset + static_cast<int>(axis);
    Tensor<T> out(s);
    std::int64_t outer = 1, mid = 1, inner = 1;
    for (int i = 0; i < ax; ++i) outer *= s[static_cast<std::size_t>(i)];
    mid = s[static_cast<std::size_t>(ax)];
    for (std::size_t i = static_cast<std::size_t>(ax) + 1; i < s.size(); ++i) inner *= s[i];
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t m = 0; m < mid; ++m) {
            const T* src = t.data() + (o * mid + m) * inner;
            T* dst = out.data() + (o * mid + (mid - 1 - m)) * inner;
            std::memcpy(dst, src, sizeof(T) * static_cast<std::size_t>(inner));
        }
    return out;
}

}  // namespace detail

/// Horizontal flip of a label grid. Flipping z is rejected.
inline OccupancyLabelGrid flip_grid(const OccupancyLabelGrid& g, FlipAxis axis) {
    return {g.spec, detail::flip_spatial(g.labels, 0, axis)};
}

template <typename T>
VoxelFeatureGrid<T> flip_grid(const VoxelFeatureGrid<T>& g, FlipAxis axis) {
    return {g.spec, g.channels, detail::flip_spatial(g.data, 1, axis)};
}

inline FlipAxis parse_flip_axis(const std::string& s) {
    if (s == "x") return FlipAxis::X;
    if (s == "y") return FlipAxis::Y;
    throw std::invalid_argument("flip axis must be 'x' or 'y', got '" + s + "'");
}

/// Pooled per-class confusion counts. IoU_c = tp / (pred + gt - tp).
struct ConfusionCounts {
    std::vector<std::int64_t> tp;
    std::vector<std::int64_t> pred_count;
    std::vector<std::int64_t> gt_count;

    explicit ConfusionCounts(int num_classes = 0)
        : tp(static_cast<std::size_t>(num_classes), 0),
          pred_count(static_cast<std::size_t>(num_classes), 0),
          gt_count(static_cast<std::size_t>(num_classes), 0) {}

    int num_classes() const { return static_cast<int>(tp.size()); }

    void accumulate(const OccupancyLabelGrid& pred, const OccupancyLabelGrid& gt) {
        if (!(pred.spec == gt.spec))
            throw std::invalid_argument("ConfusionCounts: mismatched grid specs");
        const int k = num_classes();
        const std::int64_t n = pred.labels.numel();
        for (std::int64_t i = 0; i < n; ++i) {
            const std::int32_t p = pred.labels[i];
            const std::int32_t g = gt.labels[i];
            if (p < 0 || p >= k || g < 0 || g >= k)
                throw std::invalid_argument("ConfusionCounts: label out of range");
            ++pred_count[static_cast<std::size_t>(p)];
            ++gt_count[static_cast<std::size_t>(g)];
            if (p == g) ++tp[static_cast<std::size_t>(p)];
        }
    }

    std::int64_t union_count(int c) const {
        return pred_count[static_cast<std::size_t>(c)] + gt_count[static_cast<std::size_t>(c)] -
               tp[static_cast<std::size_t>(c)];
    }
};

struct IouResult {
    std::vector<double> iou;      // valid where present[c]
    std::vector<bool> present;    // union nonempty
};

inline IouResult iou_from_counts(const ConfusionCounts& c) {
    IouResult r;
    const int k = c.num_classes();
    r.iou.assign(static_cast<std::size_t>(k), 0.0);
    r.present.assign(static_cast<std::size_t>(k), false);
    for (int i = 0; i < k; ++i) {
        const std::int64_t u = c.union_count(i);
        if (u > 0) {
            r.present[static_cast<std::size_t>(i)] = true;
            r.iou[static_cast<std::size_t>(i)] =
                static_cast<double>(c.tp[static_cast<std::size_t>(i)]) / static_cast<double>(u);
        }
    }
    return r;
}

/// Mean IoU over classes with nonempty union.
inline double miou_from_counts(const ConfusionCounts& c) {
    const IouResult r = iou_from_counts(c);
    double sum = 0;
    int n = 0;
    for (int i = 0; i < c.num_classes(); ++i) {
        if (r.present[static_cast<std::size_t>(i)]) {
            sum += r.iou[static_cast<std::size_t>(i)];
            ++n;
        }
    }
    if (n == 0) throw std::invalid_argument("miou: no class has a nonempty union");
    return sum / n;
}

inline IouResult per_class_iou(const OccupancyLabelGrid& pred, const OccupancyLabelGrid& gt,
                               int num_classes) {
    ConfusionCounts c(num_classes);
    c.accumulate(pred, gt);
    return iou_from_counts(c);
}

inline double miou(const OccupancyLabelGrid& pred, const OccupancyLabelGrid& gt, int num_classes) {
    ConfusionCounts c(num_classes);
    c.accumulate(pred, gt);
    return miou_from_counts(c);
}

}  // namespace teocc
