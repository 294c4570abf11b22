#pragma once

#include <algorithm>
#include <array>
#include <map>
#include <memory>
#include <numeric>
#include <vector>

#include "teocc/grid.hpp"
#include "teocc/nn.hpp"
#include "teocc/rng.hpp"
#include "teocc/sim.hpp"

namespace teocc {
namespace radarnet {

inline constexpr int kPointFeatureDim = 8;  // x, y, z, rv, intensity, dx, dy, dz

/// Radar points binned into voxel cells, with per-cell fixed-capacity point
/// slots. Augmented point features append the offset from the cell center.
template <typename T>
struct PillarBuffer {
    GridSpec spec;
    int max_points = 0;                       // P
    std::vector<std::int64_t> cell_index;     // linear voxel index, unique, sorted
    std::vector<int> counts;                  // points kept per cell, <= P
    Tensor<T> points;                         // (ncells, P, kPointFeatureDim)

    int num_cells() const { return static_cast<int>(cell_index.size()); }
};

/// Bin a cloud into pillars. Points are visited in a seeded shuffled order and
/// cells keep the first P arrivals, so truncation carries no input-order bias.
/// Out-of-range points are dropped.
template <typename T>
PillarBuffer<T> voxelize_radar(const sim::RadarPointCloud& cloud, const GridSpec& spec,
                               int max_points, Rng& rng) {
    if (max_points < 1) throw std::invalid_argument("voxelize_radar: max_points must be >= 1");
    PillarBuffer<T> buf;
    buf.spec = spec;
    buf.max_points = max_points;

    const int n = cloud.size();
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);

    struct CellAcc {
        std::int64_t index;
        std::vector<std::array<double, kPointFeatureDim>> pts;
    };
    std::vector<CellAcc> cells;
    std::map<std::int64_t, std::size_t> by_index;

    for (int oi : order) {
        const float* row = cloud.points.data() + std::int64_t(oi) * 5;
        const Vec3 p = {row[0], row[1], row[2]};
        const auto idx = voxel_index(spec, p);
        if (!idx) continue;
        const std::int64_t lin =
            (std::int64_t((*idx)[0]) * spec.dims[1] + (*idx)[1]) * spec.dims[2] + (*idx)[2];
        auto it = by_index.find(lin);
        if (it == by_index.end()) {
            by_index[lin] = cells.size();
            cells.push_back({lin, {}});
            it = by_index.find(lin);
        }
        auto& acc = cells[it->second];
        if (static_cast<int>(acc.pts.size()) >= max_points) continue;  // truncate
        const Vec3 center = voxel_center(spec, (*idx)[0], (*idx)[1], (*idx)[2]);
        acc.pts.push_back({row[0], row[1], row[2], row[3], row[4], p[0] - center[0],
                           p[1] - center[1], p[2] - center[2]});
    }

    std::sort(cells.begin(), cells.end(),
              [](const CellAcc& a, const CellAcc& b) { return a.index < b.index; });

    const int ncells = static_cast<int>(cells.size());
    buf.points = Tensor<T>({ncells, max_points, kPointFeatureDim});
    for (int i = 0; i < ncells; ++i) {
        buf.cell_index.push_back(cells[static_cast<std::size_t>(i)].index);
        const auto& pts = cells[static_cast<std::size_t>(i)].pts;
        buf.counts.push_back(static_cast<int>(pts.size()));
        for (std::size_t s = 0; s < pts.size(); ++s)
            for (int f = 0; f < kPointFeatureDim; ++f)
                buf.points[(std::int64_t(i) * max_points + static_cast<std::int64_t>(s)) *
                               kPointFeatureDim +
                           f] = static_cast<T>(pts[s][static_cast<std::size_t>(f)]);
    }
    return buf;
}

/// Simplified PointNet over each cell: shared linear + ReLU per point, then a
/// channel-wise max over the cell's points. Parameters live in the registry.
template <typename T>
struct CellFeaturizer {
    ag::VarPtr<T> w, b;
    int channels = 0;

    CellFeaturizer() = default;
    CellFeaturizer(nn::ParamRegistry<T>& reg, nn::Initializer<T>& init, const std::string& group,
                   int c_radar)
        : channels(c_radar) {
        w = reg.create("radar.pointnet.w", group,
                       init.kaiming({c_radar, kPointFeatureDim}, kPointFeatureDim));
        b = reg.create("radar.pointnet.b", group, init.zeros({c_radar}));
    }

    ag::VarPtr<T> operator()(const PillarBuffer<T>& buf) const {
        auto pts = std::make_shared<const Tensor<T>>(buf.points);
        auto counts = std::make_shared<const std::vector<int>>(buf.counts);
        return ag::pointnet_max(pts, counts, w, b);
    }
};

/// Value-level featurization against explicit parameters.
template <typename T>
Tensor<T> featurize_cells(const PillarBuffer<T>& buf, const Tensor<T>& w, const Tensor<T>& b) {
    auto wv = ag::make_var(w);
    auto bv = ag::make_var(b);
    auto pts = std::make_shared<const Tensor<T>>(buf.points);
    auto counts = std::make_shared<const std::vector<int>>(buf.counts);
    return ag::pointnet_max(pts, counts, wv, bv)->value;
}

/// Dense (C_r, nx, ny, nz) grid with feature vectors at occupied cells.
template <typename T>
VoxelFeatureGrid<T> scatter_to_grid(const Tensor<T>& cell_features, const PillarBuffer<T>& buf) {
    auto fv = ag::make_var(cell_features);
    auto idx = std::make_shared<const std::vector<std::int64_t>>(buf.cell_index);
    auto var = ag::scatter_cells(fv, idx, buf.spec.dims);
    VoxelFeatureGrid<T> out;
    out.spec = buf.spec;
    out.channels = cell_features.dim(1);
    out.data = var->value;
    return out;
}

}  // namespace radarnet
}  // namespace teocc
