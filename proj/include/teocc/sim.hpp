#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "teocc/config.hpp"
#include "teocc/grid.hpp"
#include "teocc/rng.hpp"
#include "teocc/tensor.hpp"
#include "teocc/tensor_io.hpp"

namespace teocc {
namespace sim {

// ---------------------------------------------------------------------------
// Scene model
// ---------------------------------------------------------------------------

/// Upright box with yaw, constant velocity, and a semantic class.
struct SceneObject {
    int class_id = 0;          // never 0 (free)
    Vec3 center{0, 0, 0};      // box center, meters
    Vec3 size{1, 1, 1};        // full extents, meters
    double yaw = 0;            // rad, about +z
    Vec3 velocity{0, 0, 0};    // m/s, zero for static objects

    void validate() const {
        if (class_id == 0) throw std::invalid_argument("SceneObject: class_id must be nonzero");
        for (double s : size)
            if (!(s > 0)) throw std::invalid_argument("SceneObject: size must be positive");
    }
};

inline SceneObject object_at_time(const SceneObject& o, double t) {
    SceneObject r = o;
    for (int a = 0; a < 3; ++a)
        r.center[static_cast<std::size_t>(a)] += o.velocity[static_cast<std::size_t>(a)] * t;
    return r;
}

/// Is the point inside the yawed box?
inline bool box_contains(const SceneObject& o, const Vec3& p) {
    const double c = std::cos(-o.yaw), s = std::sin(-o.yaw);
    const double dx = p[0] - o.center[0], dy = p[1] - o.center[1], dz = p[2] - o.center[2];
    const double lx = c * dx - s * dy;
    const double ly = s * dx + c * dy;
    return std::abs(lx) <= 0.5 * o.size[0] && std::abs(ly) <= 0.5 * o.size[1] &&
           std::abs(dz) <= 0.5 * o.size[2];
}

/// Pinhole camera: intrinsics in pixels, extrinsic pose of the camera in the
/// ego frame (camera axes: x right, y down, z forward).
struct CameraModel {
    double fx = 0, fy = 0, cx = 0, cy = 0;
    int height = 0, width = 0;
    EgoPose extrinsic;

    void validate() const {
        if (!(fx > 0) || !(fy > 0)) throw std::invalid_argument("CameraModel: focal must be > 0");
        if (height <= 0 || width <= 0) throw std::invalid_argument("CameraModel: empty image");
        if (cx < 0 || cx > width || cy < 0 || cy > height)
            throw std::invalid_argument("CameraModel: principal point outside image");
    }
};

/// Points in the ego frame with (x, y, z, radial velocity, intensity) rows.
struct RadarPointCloud {
    Tensor<float> points{std::vector<int>{0, 5}};

    int size() const { return points.dim(0); }
};

struct Frame {
    int timestamp = 0;
    EgoPose ego_pose;                    // ego -> world
    std::vector<Tensor<float>> images;   // per camera, (2, H, W): semantic id + depth
    RadarPointCloud radar;               // ego frame
    OccupancyLabelGrid gt_occupancy;     // ego frame
};

struct Episode {
    GridSpec grid;
    SemanticLabelSet labels;
    std::vector<CameraModel> cameras;
    double frame_interval = 0.5;
    std::uint64_t seed = 0;
    std::string config_echo;
    std::vector<Frame> frames;
};

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

struct SimConfig {
    GridSpec grid = make_grid_spec({-10, 10}, {-10, 10}, {-0.8, 2.4}, 0.4);
    SemanticLabelSet labels = SemanticLabelSet::desk_default();
    int frame_count = 12;
    double frame_interval = 0.5;

    int num_cameras = 4;
    int image_height = 32;
    int image_width = 64;
    double camera_height = 1.6;
    double camera_pitch_deg = 12.0;
    double focal_px = 32.0;

    double ego_speed = 0.8;      // m/s along heading
    double ego_yaw_rate = 0.0;   // rad/s

    int static_min = 2, static_max = 4;
    int dynamic_min = 1, dynamic_max = 3;
    double speed_min = 0.5, speed_max = 2.0;
    double ground_height = 0.0;
    double placement_margin = 1.2;

    double image_depth_noise = 0.0;
    double pixel_dropout = 0.0;

    int radar_points_min = 3, radar_points_max = 8;
    double radar_noise_sigma = 0.05;
    double radar_dropout = 0.0;
    double radar_surface_margin = 0.4;

    std::string echo;  // original config text, recorded for provenance

    void validate() const {
        labels.validate();
        if (frame_count < 2) throw std::invalid_argument("sim: frame_count must be >= 2");
        if (!(frame_interval > 0)) throw std::invalid_argument("sim: frame_interval must be > 0");
        if (num_cameras < 1) throw std::invalid_argument("sim: need at least one camera");
        if (static_min > static_max || dynamic_min > dynamic_max || static_min < 0 ||
            dynamic_min < 0)
            throw std::invalid_argument("sim: bad object count range");
        if (radar_points_min > radar_points_max || radar_points_min < 0)
            throw std::invalid_argument("sim: bad radar point range");
    }
};

inline GridSpec grid_from_config(const ConfigMap& cfg) {
    const auto xr = cfg.get_doubles("grid_x_range", {-10, 10});
    const auto yr = cfg.get_doubles("grid_y_range", {-10, 10});
    const auto zr = cfg.get_doubles("grid_z_range", {-0.8, 2.4});
    const auto vs = cfg.get_doubles("voxel_size", {0.4});
    if (xr.size() != 2 || yr.size() != 2 || zr.size() != 2)
        throw std::invalid_argument("grid ranges must have two entries");
    Vec3 v;
    if (vs.size() == 1)
        v = {vs[0], vs[0], vs[0]};
    else if (vs.size() == 3)
        v = {vs[0], vs[1], vs[2]};
    else
        throw std::invalid_argument("voxel_size must have 1 or 3 entries");
    return make_grid_spec({xr[0], xr[1]}, {yr[0], yr[1]}, {zr[0], zr[1]}, v);
}

inline SimConfig sim_config_from(const ConfigMap& cfg) {
    SimConfig c;
    c.grid = grid_from_config(cfg);
    c.frame_count = cfg.get_int("frame_count", c.frame_count);
    c.frame_interval = cfg.get_double("frame_interval", c.frame_interval);
    c.num_cameras = cfg.get_int("cameras", c.num_cameras);
    c.image_height = cfg.get_int("image_height", c.image_height);
    c.image_width = cfg.get_int("image_width", c.image_width);
    c.camera_height = cfg.get_double("camera_height", c.camera_height);
    c.camera_pitch_deg = cfg.get_double("camera_pitch_deg", c.camera_pitch_deg);
    c.focal_px = cfg.get_double("focal_px", c.focal_px);
    c.ego_speed = cfg.get_double("ego_speed", c.ego_speed);
    c.ego_yaw_rate = cfg.get_double("ego_yaw_rate", c.ego_yaw_rate);
    c.static_min = cfg.get_int("static_objects_min", c.static_min);
    c.static_max = cfg.get_int("static_objects_max", c.static_max);
    c.dynamic_min = cfg.get_int("dynamic_objects_min", c.dynamic_min);
    c.dynamic_max = cfg.get_int("dynamic_objects_max", c.dynamic_max);
    c.speed_min = cfg.get_double("object_speed_min", c.speed_min);
    c.speed_max = cfg.get_double("object_speed_max", c.speed_max);
    c.ground_height = cfg.get_double("ground_height", c.ground_height);
    c.placement_margin = cfg.get_double("placement_margin", c.placement_margin);
    c.image_depth_noise = cfg.get_double("image_depth_noise", c.image_depth_noise);
    c.pixel_dropout = cfg.get_double("pixel_dropout", c.pixel_dropout);
    c.radar_points_min = cfg.get_int("radar_points_min", c.radar_points_min);
    c.radar_points_max = cfg.get_int("radar_points_max", c.radar_points_max);
    c.radar_noise_sigma = cfg.get_double("radar_noise_sigma", c.radar_noise_sigma);
    c.radar_dropout = cfg.get_double("radar_dropout", c.radar_dropout);
    c.radar_surface_margin = cfg.get_double("radar_surface_margin", c.radar_surface_margin);
    c.echo = cfg.text();
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Rasterization
// ---------------------------------------------------------------------------

/// Label each voxel by the first listed object whose box contains its center,
/// else ground below ground_height, else free. Objects and spec must share a
/// coordinate frame.
inline OccupancyLabelGrid rasterize_occupancy(const std::vector<SceneObject>& objects,
                                              double ground_height, const GridSpec& spec) {
    OccupancyLabelGrid grid = OccupancyLabelGrid::zeros(spec);
    for (int i = 0; i < spec.dims[0]; ++i)
        for (int j = 0; j < spec.dims[1]; ++j)
            for (int k = 0; k < spec.dims[2]; ++k) {
                const Vec3 c = voxel_center(spec, i, j, k);
                std::int32_t label = 0;
                for (const auto& o : objects)
                    if (box_contains(o, c)) {
                        label = o.class_id;
                        break;
                    }
                if (label == 0 && c[2] < ground_height) label = 1;
                grid.at(i, j, k) = label;
            }
    return grid;
}

// ---------------------------------------------------------------------------
// Toy renderer
// ---------------------------------------------------------------------------

namespace detail {

/// Slab-method ray/box test in the box's yaw frame. Returns entry distance.
inline std::optional<double> ray_box(const SceneObject& o, const Vec3& origin, const Vec3& dir) {
    const double c = std::cos(-o.yaw), s = std::sin(-o.yaw);
    const Vec3 ro = {c * (origin[0] - o.center[0]) - s * (origin[1] - o.center[1]),
                     s * (origin[0] - o.center[0]) + c * (origin[1] - o.center[1]),
                     origin[2] - o.center[2]};
    const Vec3 rd = {c * dir[0] - s * dir[1], s * dir[0] + c * dir[1], dir[2]};
    double tmin = 1e-6, tmax = 1e30;
    for (int a = 0; a < 3; ++a) {
        const double half = 0.5 * o.size[static_cast<std::size_t>(a)];
        const double olo = ro[static_cast<std::size_t>(a)], d = rd[static_cast<std::size_t>(a)];
        if (std::abs(d) < 1e-12) {
            if (olo < -half || olo > half) return std::nullopt;
        } else {
            double t0 = (-half - olo) / d, t1 = (half - olo) / d;
            if (t0 > t1) std::swap(t0, t1);
            tmin = std::max(tmin, t0);
            tmax = std::min(tmax, t1);
            if (tmin > tmax) return std::nullopt;
        }
    }
    return tmin;
}

}  // namespace detail

/// Per-pixel ray cast against the boxes and ground plane. Channel 0 carries
/// the class id of the nearest hit (0 for sky), channel 1 the Euclidean hit
/// distance in meters (0 for sky).
inline Tensor<float> render_camera(const std::vector<SceneObject>& objects, double ground_height,
                                   const CameraModel& cam, const EgoPose& ego_pose) {
    cam.validate();
    const EgoPose cam_to_world = compose_pose(ego_pose, cam.extrinsic);
    const Vec3 origin = cam_to_world.translation;
    Tensor<float> img({2, cam.height, cam.width});
    for (int v = 0; v < cam.height; ++v)
        for (int u = 0; u < cam.width; ++u) {
            const double xn = (u + 0.5 - cam.cx) / cam.fx;
            const double yn = (v + 0.5 - cam.cy) / cam.fy;
            Vec3 d = mat3_apply(cam_to_world.rotation, Vec3{xn, yn, 1.0});
            const double norm = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
            d = {d[0] / norm, d[1] / norm, d[2] / norm};
            double best_t = 1e30;
            int best_cls = 0;
            for (const auto& o : objects)
                if (auto t = detail::ray_box(o, origin, d))
                    if (*t < best_t) {
                        best_t = *t;
                        best_cls = o.class_id;
                    }
            if (std::abs(d[2]) > 1e-12) {
                const double t = (ground_height - origin[2]) / d[2];
                if (t > 1e-6 && t < best_t) {
                    best_t = t;
                    best_cls = 1;
                }
            }
            const std::int64_t p = std::int64_t(v) * cam.width + u;
            if (best_cls != 0) {
                img[p] = static_cast<float>(best_cls);
                img[std::int64_t(cam.height) * cam.width + p] = static_cast<float>(best_t);
            }
        }
    return img;
}

/// First non-free, non-ground voxel along a ray, via Amanatides-Woo grid
/// traversal. Used to cross-check renders against rasterized occupancy.
inline std::optional<std::int32_t> first_object_voxel_along_ray(const OccupancyLabelGrid& grid,
                                                                const Vec3& origin,
                                                                const Vec3& dir,
                                                                double max_range = 1e3) {
    const GridSpec& spec = grid.spec;
    Vec3 p = origin;
    // Step to the grid boundary first if the origin is outside.
    auto idx = voxel_index(spec, p);
    double t = 0;
    if (!idx) {
        double t_enter = 0;
        for (int a = 0; a < 3; ++a) {
            const double d = dir[static_cast<std::size_t>(a)];
            const double lo = spec.range_min(a), hi = spec.range_max(a);
            const double o = origin[static_cast<std::size_t>(a)];
            if (std::abs(d) < 1e-12) {
                if (o < lo || o >= hi) return std::nullopt;
            } else {
                double t0 = (lo - o) / d, t1 = (hi - o) / d;
                if (t0 > t1) std::swap(t0, t1);
                t_enter = std::max(t_enter, t0);
            }
        }
        t = t_enter + 1e-9;
        p = {origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]};
        idx = voxel_index(spec, p);
        if (!idx) return std::nullopt;
    }
    std::array<int, 3> i = *idx;
    std::array<int, 3> step{};
    Vec3 t_next{}, t_delta{};
    for (int a = 0; a < 3; ++a) {
        const double d = dir[static_cast<std::size_t>(a)];
        const double vs = spec.voxel_size[static_cast<std::size_t>(a)];
        if (std::abs(d) < 1e-12) {
            step[static_cast<std::size_t>(a)] = 0;
            t_next[static_cast<std::size_t>(a)] = 1e30;
            t_delta[static_cast<std::size_t>(a)] = 1e30;
        } else {
            step[static_cast<std::size_t>(a)] = d > 0 ? 1 : -1;
            const double edge = spec.range_min(a) +
                                (i[static_cast<std::size_t>(a)] + (d > 0 ? 1 : 0)) * vs;
            t_next[static_cast<std::size_t>(a)] =
                t + (edge - p[static_cast<std::size_t>(a)]) / d;
            t_delta[static_cast<std::size_t>(a)] = vs / std::abs(d);
        }
    }
    while (t < max_range) {
        const std::int32_t lbl = grid.at(i[0], i[1], i[2]);
        if (lbl != 0 && lbl != 1) return lbl;
        int a = 0;
        if (t_next[1] < t_next[a]) a = 1;
        if (t_next[2] < t_next[a]) a = 2;
        t = t_next[static_cast<std::size_t>(a)];
        t_next[static_cast<std::size_t>(a)] += t_delta[static_cast<std::size_t>(a)];
        i[static_cast<std::size_t>(a)] += step[static_cast<std::size_t>(a)];
        if (i[static_cast<std::size_t>(a)] < 0 ||
            i[static_cast<std::size_t>(a)] >= spec.dims[static_cast<std::size_t>(a)])
            return std::nullopt;
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Radar
// ---------------------------------------------------------------------------

/// Sparse returns from object surfaces: positions with Gaussian jitter, radial
/// velocity as the projection of the object velocity on the line of sight,
/// and a random intensity. Points are expressed in the ego frame.
inline RadarPointCloud sample_radar(const std::vector<SceneObject>& objects,
                                    const SimConfig& cfg, const EgoPose& ego_pose, Rng& rng) {
    const EgoPose world_to_ego = invert_pose(ego_pose);
    const Vec3 sensor = ego_pose.translation;
    std::vector<std::array<float, 5>> rows;
    for (const auto& o : objects) {
        const int n = cfg.radar_points_min +
                      static_cast<int>(rng.uniform_int(cfg.radar_points_max - cfg.radar_points_min + 1));
        for (int s = 0; s < n; ++s) {
            // Pick a side or top face (radar does not see the underside),
            // then a point inset from the face edges.
            const int face = static_cast<int>(rng.uniform_int(5));
            Vec3 local{};
            const auto span = [&](int axis) {
                const double half = 0.5 * o.size[static_cast<std::size_t>(axis)];
                const double m = std::min(cfg.radar_surface_margin, half * 0.9);
                return rng.uniform(-(half - m), half - m);
            };
            switch (face) {
                case 0: local = {+0.5 * o.size[0], span(1), span(2)}; break;
                case 1: local = {-0.5 * o.size[0], span(1), span(2)}; break;
                case 2: local = {span(0), +0.5 * o.size[1], span(2)}; break;
                case 3: local = {span(0), -0.5 * o.size[1], span(2)}; break;
                default: local = {span(0), span(1), +0.5 * o.size[2]}; break;
            }
            const double c = std::cos(o.yaw), sn = std::sin(o.yaw);
            Vec3 world = {o.center[0] + c * local[0] - sn * local[1],
                          o.center[1] + sn * local[0] + c * local[1], o.center[2] + local[2]};
            const bool dropped = rng.bernoulli(cfg.radar_dropout);
            Vec3 noise = {rng.normal(0, cfg.radar_noise_sigma),
                          rng.normal(0, cfg.radar_noise_sigma),
                          rng.normal(0, cfg.radar_noise_sigma)};
            const double intensity = rng.uniform(0.5, 1.0);
            if (dropped) continue;
            world = {world[0] + noise[0], world[1] + noise[1], world[2] + noise[2]};
            Vec3 los = {world[0] - sensor[0], world[1] - sensor[1], world[2] - sensor[2]};
            const double len = std::sqrt(los[0] * los[0] + los[1] * los[1] + los[2] * los[2]);
            double rv = 0;
            if (len > 1e-9)
                rv = (o.velocity[0] * los[0] + o.velocity[1] * los[1] + o.velocity[2] * los[2]) /
                     len;
            const Vec3 ego_pt = world_to_ego.apply(world);
            rows.push_back({static_cast<float>(ego_pt[0]), static_cast<float>(ego_pt[1]),
                            static_cast<float>(ego_pt[2]), static_cast<float>(rv),
                            static_cast<float>(intensity)});
        }
    }
    RadarPointCloud cloud;
    cloud.points = Tensor<float>({static_cast<int>(rows.size()), 5});
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (int f = 0; f < 5; ++f) cloud.points[std::int64_t(i) * 5 + f] = rows[i][static_cast<std::size_t>(f)];
    return cloud;
}

// ---------------------------------------------------------------------------
// Episode generation
// ---------------------------------------------------------------------------

inline std::vector<CameraModel> build_camera_rig(const SimConfig& cfg) {
    std::vector<CameraModel> rig;
    const double pitch = cfg.camera_pitch_deg * M_PI / 180.0;
    for (int i = 0; i < cfg.num_cameras; ++i) {
        const double yaw = 2.0 * M_PI * i / cfg.num_cameras;
        CameraModel cam;
        cam.fx = cam.fy = cfg.focal_px;
        cam.cx = cfg.image_width / 2.0;
        cam.cy = cfg.image_height / 2.0;
        cam.width = cfg.image_width;
        cam.height = cfg.image_height;
        const Vec3 fwd = {std::cos(pitch) * std::cos(yaw), std::cos(pitch) * std::sin(yaw),
                          -std::sin(pitch)};
        Vec3 right = {fwd[1], -fwd[0], 0};
        const double rn = std::sqrt(right[0] * right[0] + right[1] * right[1]);
        right = {right[0] / rn, right[1] / rn, 0};
        const Vec3 down = {fwd[1] * right[2] - fwd[2] * right[1],
                           fwd[2] * right[0] - fwd[0] * right[2],
                           fwd[0] * right[1] - fwd[1] * right[0]};
        cam.extrinsic.rotation = {right[0], down[0], fwd[0],  //
                                  right[1], down[1], fwd[1],  //
                                  right[2], down[2], fwd[2]};
        cam.extrinsic.translation = {0, 0, cfg.camera_height};
        cam.extrinsic.validate();
        rig.push_back(cam);
    }
    return rig;
}

namespace detail {

struct ClassTemplate {
    int class_id;
    Vec3 base_size;
    double jitter;
    bool dynamic;
};

inline const std::vector<ClassTemplate>& class_templates() {
    static const std::vector<ClassTemplate> t = {
        {2, {2.5, 2.5, 2.2}, 0.30, false},  // building
        {3, {1.6, 0.35, 1.0}, 0.25, false},  // barrier
        {4, {3.2, 1.7, 1.5}, 0.15, true},    // car
        {5, {0.5, 0.5, 1.7}, 0.10, true},    // pedestrian
    };
    return t;
}

inline SceneObject sample_object(const ClassTemplate& tpl, const SimConfig& cfg, Rng& rng) {
    SceneObject o;
    o.class_id = tpl.class_id;
    for (int a = 0; a < 3; ++a)
        o.size[static_cast<std::size_t>(a)] =
            tpl.base_size[static_cast<std::size_t>(a)] * rng.uniform(1 - tpl.jitter, 1 + tpl.jitter);
    const double mx = cfg.placement_margin + 0.5 * std::max(o.size[0], o.size[1]);
    const double lo_x = cfg.grid.x_range[0] + mx, hi_x = cfg.grid.x_range[1] - mx;
    const double lo_y = cfg.grid.y_range[0] + mx, hi_y = cfg.grid.y_range[1] - mx;
    if (lo_x >= hi_x || lo_y >= hi_y)
        throw std::invalid_argument("generate_episode: objects cannot fit in the grid "
                                    "(placement region is empty)");
    o.center = {rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y),
                cfg.ground_height + 0.5 * o.size[2]};
    o.yaw = rng.uniform(0, 2 * M_PI);
    if (tpl.dynamic) {
        const double speed = rng.uniform(cfg.speed_min, cfg.speed_max) *
                             (tpl.class_id == 5 ? 0.5 : 1.0);
        const double heading = rng.uniform(0, 2 * M_PI);
        o.velocity = {speed * std::cos(heading), speed * std::sin(heading), 0};
    }
    return o;
}

}  // namespace detail

/// Deterministic procedural episode: ego on a smooth arc, static and constant-
/// velocity dynamic boxes, per-frame renders, radar, and occupancy labels.
inline Episode generate_episode(const SimConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng root(seed);
    Rng rng_scene = root.fork("scene");
    Rng rng_noise = root.fork("imagenoise");
    Rng rng_radar = root.fork("radar");

    Episode ep;
    ep.grid = cfg.grid;
    ep.labels = cfg.labels;
    ep.cameras = build_camera_rig(cfg);
    ep.frame_interval = cfg.frame_interval;
    ep.seed = seed;
    ep.config_echo = cfg.echo;

    // Scene content.
    const auto& templates = detail::class_templates();
    std::vector<SceneObject> objects;
    const int n_static =
        cfg.static_min + static_cast<int>(rng_scene.uniform_int(cfg.static_max - cfg.static_min + 1));
    const int n_dynamic = cfg.dynamic_min +
                          static_cast<int>(rng_scene.uniform_int(cfg.dynamic_max - cfg.dynamic_min + 1));
    for (int i = 0; i < n_static; ++i) {
        const auto& tpl = templates[static_cast<std::size_t>(rng_scene.uniform_int(2))];
        objects.push_back(detail::sample_object(tpl, cfg, rng_scene));
    }
    for (int i = 0; i < n_dynamic; ++i) {
        const auto& tpl = templates[static_cast<std::size_t>(2 + rng_scene.uniform_int(2))];
        objects.push_back(detail::sample_object(tpl, cfg, rng_scene));
    }
    for (const auto& o : objects) o.validate();

    // Ego trajectory: piecewise-constant heading integration of a gentle arc,
    // centered so the midpoint of the drive sits at the world origin.
    std::vector<EgoPose> poses;
    {
        Vec3 pos = {-0.5 * cfg.ego_speed * cfg.frame_interval * (cfg.frame_count - 1), 0, 0};
        double yaw = 0;
        for (int t = 0; t < cfg.frame_count; ++t) {
            EgoPose p;
            p.rotation = rot_z(yaw);
            p.translation = pos;
            p.timestamp = t;
            poses.push_back(p);
            pos[0] += cfg.ego_speed * cfg.frame_interval * std::cos(yaw);
            pos[1] += cfg.ego_speed * cfg.frame_interval * std::sin(yaw);
            yaw += cfg.ego_yaw_rate * cfg.frame_interval;
        }
    }

    for (int t = 0; t < cfg.frame_count; ++t) {
        Frame fr;
        fr.timestamp = t;
        fr.ego_pose = poses[static_cast<std::size_t>(t)];
        const double time = t * cfg.frame_interval;

        std::vector<SceneObject> world_objs;
        for (const auto& o : objects) world_objs.push_back(object_at_time(o, time));

        // Ground truth in the ego frame. Ego motion is planar (pure yaw), so
        // boxes stay upright in ego coordinates.
        const EgoPose world_to_ego = invert_pose(fr.ego_pose);
        std::vector<SceneObject> ego_objs = world_objs;
        const double ego_yaw = std::atan2(fr.ego_pose.rotation[3], fr.ego_pose.rotation[0]);
        for (auto& o : ego_objs) {
            o.center = world_to_ego.apply(o.center);
            o.yaw -= ego_yaw;
        }
        fr.gt_occupancy = rasterize_occupancy(ego_objs, cfg.ground_height, cfg.grid);

        for (const auto& cam : ep.cameras) {
            Tensor<float> img = render_camera(world_objs, cfg.ground_height, cam, fr.ego_pose);
            if (cfg.image_depth_noise > 0 || cfg.pixel_dropout > 0) {
                const std::int64_t px = std::int64_t(cam.height) * cam.width;
                for (std::int64_t p = 0; p < px; ++p) {
                    const double jitter = rng_noise.normal(0, 1);
                    const bool drop = rng_noise.bernoulli(cfg.pixel_dropout);
                    if (drop) {
                        img[p] = 0;
                        img[px + p] = 0;
                    } else if (img[px + p] > 0 && cfg.image_depth_noise > 0) {
                        img[px + p] = std::max(
                            0.0f, img[px + p] + static_cast<float>(cfg.image_depth_noise * jitter));
                    }
                }
            }
            fr.images.push_back(std::move(img));
        }

        fr.radar = sample_radar(world_objs, cfg, fr.ego_pose, rng_radar);
        ep.frames.push_back(std::move(fr));
    }
    return ep;
}

// ---------------------------------------------------------------------------
// Dataset serialization
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json pose_to_json(const EgoPose& p) {
    return {{"rotation", p.rotation}, {"translation", p.translation}, {"timestamp", p.timestamp}};
}

inline EgoPose pose_from_json(const nlohmann::json& j) {
    EgoPose p;
    const auto r = j.at("rotation").get<std::vector<double>>();
    const auto t = j.at("translation").get<std::vector<double>>();
    if (r.size() != 9 || t.size() != 3)
        throw std::runtime_error("manifest: malformed pose (rotation needs 9 entries, translation 3)");
    std::copy(r.begin(), r.end(), p.rotation.begin());
    std::copy(t.begin(), t.end(), p.translation.begin());
    p.timestamp = j.at("timestamp").get<int>();
    return p;
}

inline std::string frame_tag(int t) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "frame_%03d", t);
    return buf;
}

}  // namespace detail

inline constexpr int kEpisodeFormatVersion = 1;

inline void save_episode(const Episode& ep, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json m;
    m["format"] = "teocc-episode";
    m["version"] = kEpisodeFormatVersion;
    m["seed"] = ep.seed;
    m["frame_count"] = ep.frames.size();
    m["frame_interval"] = ep.frame_interval;
    m["config"] = ep.config_echo;
    m["grid"] = {{"x_range", ep.grid.x_range},
                 {"y_range", ep.grid.y_range},
                 {"z_range", ep.grid.z_range},
                 {"voxel_size", ep.grid.voxel_size}};
    m["labels"] = ep.labels.names;
    nlohmann::json cams = nlohmann::json::array();
    for (const auto& c : ep.cameras)
        cams.push_back({{"fx", c.fx},
                        {"fy", c.fy},
                        {"cx", c.cx},
                        {"cy", c.cy},
                        {"height", c.height},
                        {"width", c.width},
                        {"extrinsic", detail::pose_to_json(c.extrinsic)}});
    m["cameras"] = cams;
    nlohmann::json frames = nlohmann::json::array();
    for (const auto& fr : ep.frames) {
        frames.push_back({{"timestamp", fr.timestamp},
                          {"pose", detail::pose_to_json(fr.ego_pose)},
                          {"radar_points", fr.radar.size()}});
        const std::string tag = detail::frame_tag(fr.timestamp);
        for (std::size_t c = 0; c < fr.images.size(); ++c)
            teoc::write_file(dir + "/" + tag + "_cam" + std::to_string(c) + ".teoc",
                             fr.images[c]);
        teoc::write_file(dir + "/" + tag + "_radar.teoc", fr.radar.points);
        teoc::write_file(dir + "/" + tag + "_labels.teoc", fr.gt_occupancy.labels);
    }
    m["frames"] = frames;
    std::ofstream out(dir + "/manifest.json");
    if (!out) throw std::runtime_error("save_episode: cannot write " + dir + "/manifest.json");
    out << m.dump(2) << "\n";
}

inline Episode load_episode(const std::string& dir) {
    std::ifstream in(dir + "/manifest.json");
    if (!in) throw std::runtime_error("load_episode: cannot open " + dir + "/manifest.json");
    nlohmann::json m;
    try {
        in >> m;
    } catch (const std::exception& e) {
        throw std::runtime_error("load_episode: " + dir + "/manifest.json: " + e.what());
    }
    if (m.value("format", "") != "teocc-episode")
        throw std::runtime_error("load_episode: " + dir + ": not a teocc episode manifest");
    if (m.at("version").get<int>() != kEpisodeFormatVersion)
        throw std::runtime_error("load_episode: " + dir + ": unknown manifest version " +
                                 std::to_string(m.at("version").get<int>()));
    Episode ep;
    const auto& g = m.at("grid");
    const auto xr = g.at("x_range").get<std::array<double, 2>>();
    const auto yr = g.at("y_range").get<std::array<double, 2>>();
    const auto zr = g.at("z_range").get<std::array<double, 2>>();
    const auto vs = g.at("voxel_size").get<Vec3>();
    ep.grid = make_grid_spec(xr, yr, zr, vs);
    ep.labels.names = m.at("labels").get<std::vector<std::string>>();
    ep.labels.validate();
    for (const auto& c : m.at("cameras")) {
        CameraModel cam;
        cam.fx = c.at("fx").get<double>();
        cam.fy = c.at("fy").get<double>();
        cam.cx = c.at("cx").get<double>();
        cam.cy = c.at("cy").get<double>();
        cam.height = c.at("height").get<int>();
        cam.width = c.at("width").get<int>();
        cam.extrinsic = detail::pose_from_json(c.at("extrinsic"));
        cam.validate();
        ep.cameras.push_back(cam);
    }
    ep.frame_interval = m.at("frame_interval").get<double>();
    ep.seed = m.at("seed").get<std::uint64_t>();
    ep.config_echo = m.value("config", "");
    const auto& frames = m.at("frames");
    if (frames.size() != m.at("frame_count").get<std::size_t>())
        throw std::runtime_error("load_episode: " + dir + ": frame_count does not match frames");
    for (const auto& fj : frames) {
        Frame fr;
        fr.timestamp = fj.at("timestamp").get<int>();
        fr.ego_pose = detail::pose_from_json(fj.at("pose"));
        fr.ego_pose.validate();
        const std::string tag = detail::frame_tag(fr.timestamp);
        for (std::size_t c = 0; c < ep.cameras.size(); ++c) {
            Tensor<float> img = teoc::read_file<float>(dir + "/" + tag + "_cam" +
                                                       std::to_string(c) + ".teoc");
            if (img.rank() != 3 || img.dim(0) != 2 || img.dim(1) != ep.cameras[c].height ||
                img.dim(2) != ep.cameras[c].width)
                throw std::runtime_error("load_episode: " + tag + "_cam" + std::to_string(c) +
                                         ".teoc: unexpected image shape " +
                                         shape_str(img.shape()));
            fr.images.push_back(std::move(img));
        }
        fr.radar.points = teoc::read_file<float>(dir + "/" + tag + "_radar.teoc");
        if (fr.radar.points.rank() != 2 || fr.radar.points.dim(1) != 5)
            throw std::runtime_error("load_episode: " + tag + "_radar.teoc: expected (n,5) points");
        if (fr.radar.size() != fj.at("radar_points").get<int>())
            throw std::runtime_error("load_episode: " + tag +
                                     "_radar.teoc: point count does not match manifest");
        fr.gt_occupancy.spec = ep.grid;
        fr.gt_occupancy.labels = teoc::read_file<std::int32_t>(dir + "/" + tag + "_labels.teoc");
        if (fr.gt_occupancy.labels.rank() != 3 ||
            fr.gt_occupancy.labels.dim(0) != ep.grid.dims[0] ||
            fr.gt_occupancy.labels.dim(1) != ep.grid.dims[1] ||
            fr.gt_occupancy.labels.dim(2) != ep.grid.dims[2])
            throw std::runtime_error("load_episode: " + tag + "_labels.teoc: unexpected label shape");
        for (std::int64_t i = 0; i < fr.gt_occupancy.labels.numel(); ++i) {
            const auto l = fr.gt_occupancy.labels[i];
            if (l < 0 || l >= ep.labels.num_classes())
                throw std::runtime_error("load_episode: " + tag + "_labels.teoc: label " +
                                         std::to_string(l) + " out of range");
        }
        ep.frames.push_back(std::move(fr));
    }
    return ep;
}

inline bool episode_equal(const Episode& a, const Episode& b) {
    if (!(a.grid == b.grid) || a.labels.names != b.labels.names ||
        a.cameras.size() != b.cameras.size() || a.frames.size() != b.frames.size() ||
        a.frame_interval != b.frame_interval || a.seed != b.seed ||
        a.config_echo != b.config_echo)
        return false;
    for (std::size_t c = 0; c < a.cameras.size(); ++c) {
        const auto& ca = a.cameras[c];
        const auto& cb = b.cameras[c];
        if (ca.fx != cb.fx || ca.fy != cb.fy || ca.cx != cb.cx || ca.cy != cb.cy ||
            ca.height != cb.height || ca.width != cb.width ||
            ca.extrinsic.rotation != cb.extrinsic.rotation ||
            ca.extrinsic.translation != cb.extrinsic.translation)
            return false;
    }
    for (std::size_t f = 0; f < a.frames.size(); ++f) {
        const auto& fa = a.frames[f];
        const auto& fb = b.frames[f];
        if (fa.timestamp != fb.timestamp || fa.ego_pose.rotation != fb.ego_pose.rotation ||
            fa.ego_pose.translation != fb.ego_pose.translation)
            return false;
        if (fa.images.size() != fb.images.size()) return false;
        for (std::size_t c = 0; c < fa.images.size(); ++c)
            if (!tensor_equal(fa.images[c], fb.images[c])) return false;
        if (!tensor_equal(fa.radar.points, fb.radar.points)) return false;
        if (!tensor_equal(fa.gt_occupancy.labels, fb.gt_occupancy.labels)) return false;
    }
    return true;
}

/// Episode subdirectories of a dataset directory, in index order.
inline std::vector<std::string> list_episode_dirs(const std::string& dataset_dir) {
    namespace fs = std::filesystem;
    std::vector<std::string> dirs;
    if (!fs::exists(dataset_dir))
        throw std::runtime_error("dataset directory does not exist: " + dataset_dir);
    for (const auto& e : fs::directory_iterator(dataset_dir))
        if (e.is_directory() && fs::exists(e.path() / "manifest.json"))
            dirs.push_back(e.path().string());
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty())
        throw std::runtime_error("no episodes found under " + dataset_dir);
    return dirs;
}

}  // namespace sim
}  // namespace teocc
