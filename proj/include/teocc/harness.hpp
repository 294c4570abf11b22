#pragma once

#include <chrono>
#include <cstring>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "teocc/model.hpp"
#include "teocc/parallel.hpp"
#include "teocc/stats.hpp"

namespace teocc {
namespace harness {

using Scalar = float;

inline double now_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
    ModelConfig model;
    std::string data_dir;
    std::string val_dir;
    double lr = 1e-3;
    int steps = 2000;
    int batch_size = 2;
    bool cosine_decay = true;
    double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
    bool flip_aug = false;
    std::uint64_t seed = 1;
    int eval_every = 0;    // 0 = final evaluation only
    int eval_episodes = 0; // 0 = all validation episodes
    int threads = 1;       // 0 = hardware concurrency
    double w_main = 1.0, w_long = 1.0, w_short = 1.0;

    void validate() const {
        model.validate();
        if (steps < 1 || batch_size < 1) throw std::invalid_argument("train: steps/batch_size must be >= 1");
        if (!(lr > 0)) throw std::invalid_argument("train: lr must be positive");
    }
};

inline TrainConfig train_config_from(const ConfigMap& cfg) {
    TrainConfig t;
    t.model = model_config_from(cfg);
    t.data_dir = cfg.get_string("data_dir", "");
    t.val_dir = cfg.get_string("val_dir", "");
    t.lr = cfg.get_double("lr", t.lr);
    t.steps = cfg.get_int("steps", t.steps);
    t.batch_size = cfg.get_int("batch_size", t.batch_size);
    t.cosine_decay = cfg.get_bool("cosine_decay", t.cosine_decay);
    t.adam_beta1 = cfg.get_double("adam_beta1", t.adam_beta1);
    t.adam_beta2 = cfg.get_double("adam_beta2", t.adam_beta2);
    t.adam_eps = cfg.get_double("adam_eps", t.adam_eps);
    t.flip_aug = cfg.get_bool("flip_aug", t.flip_aug);
    t.seed = static_cast<std::uint64_t>(cfg.get_int64("seed", static_cast<long long>(t.seed)));
    t.eval_every = cfg.get_int("eval_every", t.eval_every);
    t.eval_episodes = cfg.get_int("eval_episodes", t.eval_episodes);
    t.threads = cfg.get_int("threads", t.threads);
    t.w_main = cfg.get_double("loss_weight_main", t.w_main);
    t.w_long = cfg.get_double("loss_weight_long", t.w_long);
    t.w_short = cfg.get_double("loss_weight_short", t.w_short);
    t.validate();
    return t;
}

/// Serializes the resolved configuration back to config text. This is the
/// checkpoint's config echo; parsing it with train_config_from reproduces the
/// exact configuration.
inline std::string train_config_to_text(const TrainConfig& t) {
    std::ostringstream o;
    o.precision(17);
    const auto& m = t.model;
    o << "# resolved teocc training configuration\n";
    o << "grid_x_range = " << m.grid.x_range[0] << " " << m.grid.x_range[1] << "\n";
    o << "grid_y_range = " << m.grid.y_range[0] << " " << m.grid.y_range[1] << "\n";
    o << "grid_z_range = " << m.grid.z_range[0] << " " << m.grid.z_range[1] << "\n";
    o << "voxel_size = " << m.grid.voxel_size[0] << " " << m.grid.voxel_size[1] << " "
      << m.grid.voxel_size[2] << "\n";
    o << "num_classes = " << m.num_classes << "\n";
    o << "cameras = " << m.num_cameras << "\n";
    o << "image_height = " << m.image_h << "\n";
    o << "image_width = " << m.image_w << "\n";
    o << "encoder_c1 = " << m.enc_c1 << "\n";
    o << "encoder_c2 = " << m.enc_c2 << "\n";
    o << "c_img = " << m.c_img << "\n";
    o << "depth_bins = " << m.depth_bins << "\n";
    o << "depth_min = " << m.depth_min << "\n";
    o << "depth_max = " << m.depth_max << "\n";
    o << "c_radar = " << m.c_radar << "\n";
    o << "radar_max_points = " << m.radar_max_points << "\n";
    o << "c_fused = " << m.c_fused << "\n";
    o << "head_hidden = " << m.head_hidden << "\n";
    o << "history_frames = " << m.history << "\n";
    o << "resnet_channels = " << m.resnet_channels[0] << " " << m.resnet_channels[1] << " "
      << m.resnet_channels[2] << "\n";
    o << "resnet_blocks = " << m.resnet_blocks << "\n";
    o << "short_hidden = " << m.short_hidden << "\n";
    o << "main_blocks = " << m.main_blocks << "\n";
    o << "use_radar = " << (m.use_radar ? "true" : "false") << "\n";
    o << "use_long = " << (m.use_long ? "true" : "false") << "\n";
    o << "use_short = " << (m.use_short ? "true" : "false") << "\n";
    o << "random_mask = " << (m.random_mask ? "true" : "false") << "\n";
    o << "shared_head = " << (m.shared_head ? "true" : "false") << "\n";
    o << "fused_decoders = " << (m.fused_decoders ? "true" : "false") << "\n";
    o << "depth_loss = " << (m.depth_loss ? "true" : "false") << "\n";
    o << "depth_loss_weight = " << m.depth_loss_weight << "\n";
    if (!m.class_weights.empty()) {
        o << "class_weighting = true\n";
        o << "class_weights =";
        for (double w : m.class_weights) o << " " << w;
        o << "\n";
    }
    o << "data_dir = " << t.data_dir << "\n";
    o << "val_dir = " << t.val_dir << "\n";
    o << "lr = " << t.lr << "\n";
    o << "steps = " << t.steps << "\n";
    o << "batch_size = " << t.batch_size << "\n";
    o << "cosine_decay = " << (t.cosine_decay ? "true" : "false") << "\n";
    o << "adam_beta1 = " << t.adam_beta1 << "\n";
    o << "adam_beta2 = " << t.adam_beta2 << "\n";
    o << "adam_eps = " << t.adam_eps << "\n";
    o << "flip_aug = " << (t.flip_aug ? "true" : "false") << "\n";
    o << "seed = " << t.seed << "\n";
    o << "eval_every = " << t.eval_every << "\n";
    o << "eval_episodes = " << t.eval_episodes << "\n";
    o << "threads = " << t.threads << "\n";
    o << "loss_weight_main = " << t.w_main << "\n";
    o << "loss_weight_long = " << t.w_long << "\n";
    o << "loss_weight_short = " << t.w_short << "\n";
    return o.str();
}

// ---------------------------------------------------------------------------
// Dataset access
// ---------------------------------------------------------------------------

struct Dataset {
    std::vector<sim::Episode> episodes;

    struct Window {
        int episode = 0;
        int t = 0;  // index of the current frame; the window is [t-N, t]
    };

    std::vector<Window> windows_for(int history) const {
        std::vector<Window> ws;
        for (std::size_t e = 0; e < episodes.size(); ++e)
            for (int t = history; t < static_cast<int>(episodes[e].frames.size()); ++t)
                ws.push_back({static_cast<int>(e), t});
        if (ws.empty())
            throw std::runtime_error("dataset: no training windows (episodes shorter than N+1?)");
        return ws;
    }

    std::vector<const sim::Frame*> window_frames(const Window& w, int history) const {
        std::vector<const sim::Frame*> out;
        const auto& ep = episodes[static_cast<std::size_t>(w.episode)];
        for (int i = w.t - history; i <= w.t; ++i)
            out.push_back(&ep.frames[static_cast<std::size_t>(i)]);
        return out;
    }
};

inline Dataset load_dataset(const std::string& dir) {
    Dataset d;
    for (const auto& ep_dir : sim::list_episode_dirs(dir))
        d.episodes.push_back(sim::load_episode(ep_dir));
    return d;
}

/// The dataset is authoritative for geometry and labels; the config must
/// agree with the grid it declares.
inline void resolve_model_from_dataset(ModelConfig& m, const Dataset& d) {
    const auto& ep = d.episodes.at(0);
    if (!(ep.grid == m.grid))
        throw std::invalid_argument("config grid does not match the dataset grid");
    m.num_classes = ep.labels.num_classes();
    m.num_cameras = static_cast<int>(ep.cameras.size());
    m.image_h = ep.cameras.at(0).height;
    m.image_w = ep.cameras.at(0).width;
    if (!m.class_weights.empty() && static_cast<int>(m.class_weights.size()) != m.num_classes)
        throw std::invalid_argument("class_weights size must match the dataset label count");
}

// ---------------------------------------------------------------------------
// Train step
// ---------------------------------------------------------------------------

struct StepLosses {
    double main = 0, lng = 0, shrt = 0, depth = 0, total = 0;
};

/// One batch item, with the stochastic choices made explicit so tests can pin
/// them.
struct BatchItem {
    const sim::Episode* episode = nullptr;
    int t = 0;
    std::optional<FlipAxis> flip;
    int mask_k = -1;  // -1 when the TE branch is off
};

namespace detail {

inline std::shared_ptr<const Tensor<std::int32_t>> labels_of(const sim::Frame& frame,
                                                             std::optional<FlipAxis> flip) {
    if (!flip) return std::make_shared<const Tensor<std::int32_t>>(frame.gt_occupancy.labels);
    return std::make_shared<const Tensor<std::int32_t>>(
        flip_grid(frame.gt_occupancy, *flip).labels);
}

template <typename T>
ag::VarPtr<T> mean_of(const std::vector<ag::VarPtr<T>>& terms) {
    return ag::scale(ag::add_n(terms), 1.0 / static_cast<double>(terms.size()));
}

/// -log(probs[target]) averaged over pixels; auxiliary depth supervision.
template <typename T>
ag::VarPtr<T> depth_nll(const ag::VarPtr<T>& probs,
                        std::shared_ptr<const std::vector<int>> targets) {
    const auto& s = probs->value.shape();
    const int bins = s[0];
    const std::int64_t pixels = std::int64_t(s[1]) * s[2];
    if (static_cast<std::int64_t>(targets->size()) != pixels)
        throw std::invalid_argument("depth_nll: target count mismatch");
    const double eps = 1e-12;
    double loss = 0;
    for (std::int64_t p = 0; p < pixels; ++p) {
        const int tb = (*targets)[static_cast<std::size_t>(p)];
        if (tb < 0) continue;  // sky pixels carry no depth supervision
        if (tb >= bins) throw std::invalid_argument("depth_nll: target bin out of range");
        loss -= std::log(std::max(static_cast<double>(probs->value[std::int64_t(tb) * pixels + p]), eps));
    }
    loss /= static_cast<double>(pixels);
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(loss));
    return ag::make_op<T>(std::move(out), {probs}, [probs, targets, bins, pixels, eps](ag::Var<T>& self) {
        if (T* gp = ag::grad_sink(probs)) {
            const double g = static_cast<double>(self.grad[0]) / static_cast<double>(pixels);
            for (std::int64_t p = 0; p < pixels; ++p) {
                const int tb = (*targets)[static_cast<std::size_t>(p)];
                if (tb < 0) continue;
                const double pv =
                    std::max(static_cast<double>(probs->value[std::int64_t(tb) * pixels + p]), eps);
                gp[std::int64_t(tb) * pixels + p] -= static_cast<T>(g / pv);
            }
        }
    });
}

/// Depth-bin targets for a camera image at feature resolution: the rendered
/// depth at each feature-pixel center, or -1 for sky.
inline std::shared_ptr<const std::vector<int>> depth_targets(const Tensor<float>& image, int feat_h,
                                                             int feat_w, double depth_min,
                                                             double depth_max, int bins) {
    const int h = image.dim(1), w = image.dim(2);
    auto out = std::make_shared<std::vector<int>>(static_cast<std::size_t>(feat_h) * feat_w, -1);
    for (int v = 0; v < feat_h; ++v)
        for (int u = 0; u < feat_w; ++u) {
            const int py = std::min(h - 1, static_cast<int>((v + 0.5) * h / feat_h));
            const int px = std::min(w - 1, static_cast<int>((u + 0.5) * w / feat_w));
            const float d = image[std::int64_t(h) * w + std::int64_t(py) * w + px];
            if (d > 0)
                (*out)[static_cast<std::size_t>(v) * feat_w + u] =
                    camnet::depth_bin_of(d, depth_min, depth_max, bins);
        }
    return out;
}

}  // namespace detail

/// Forward/backward/update for one batch with all random choices pinned.
/// Returns the batch-averaged loss components.
template <typename T>
StepLosses train_step_impl(TeoccModel<T>& model, nn::Adam<T>& opt,
                           const std::vector<BatchItem>& batch, const TrainConfig& cfg,
                           double lr_now, Rng& radar_rng) {
    const ModelConfig& mc = model.cfg;
    const int N = mc.history;
    std::vector<ag::VarPtr<T>> terms_main, terms_long, terms_short, terms_depth;
    auto class_w = mc.class_weights.empty()
                       ? nullptr
                       : std::make_shared<const std::vector<double>>(mc.class_weights);

    for (const auto& item : batch) {
        const auto& ep = *item.episode;
        if (item.t < N || item.t >= static_cast<int>(ep.frames.size()))
            throw std::invalid_argument("train_step: window needs N+1 consecutive frames");
        if (mc.te_enabled() && (item.mask_k < 1 || item.mask_k > N - 1))
            throw std::invalid_argument("train_step: mask offset k out of {1..N-1}");
        std::vector<const sim::Frame*> window;
        for (int i = item.t - N; i <= item.t; ++i)
            window.push_back(&ep.frames[static_cast<std::size_t>(i)]);

        std::vector<ag::VarPtr<T>> depth_probs;
        std::vector<ag::VarPtr<T>> lifted;
        for (std::size_t i = 0; i < window.size(); ++i)
            lifted.push_back(model.lift_frame(
                *window[i],
                (mc.depth_loss && static_cast<int>(i) == N) ? &depth_probs : nullptr));

        // Main branch at frame t.
        auto seq_t = model.align_sequence(lifted, window, N, item.flip);
        auto radar_t = model.radar_grid(window.back()->radar, radar_rng, item.flip);
        auto logits_t = model.main_logits(seq_t, radar_t);
        terms_main.push_back(
            ag::cross_entropy_mean(logits_t, detail::labels_of(*window.back(), item.flip), class_w));

        // Temporal enhancement branch at frame t-k.
        if (mc.te_enabled()) {
            const int masked = N - item.mask_k;
            auto seq_tk = model.align_sequence(lifted, window, masked, item.flip);
            auto radar_tk = model.radar_grid(window[static_cast<std::size_t>(masked)]->radar,
                                             radar_rng, item.flip);
            auto te = model.te_logits(seq_tk, masked, radar_tk);
            auto labels_tk = detail::labels_of(*window[static_cast<std::size_t>(masked)], item.flip);
            if (te.lng) terms_long.push_back(ag::cross_entropy_mean(te.lng, labels_tk, class_w));
            if (te.shrt) terms_short.push_back(ag::cross_entropy_mean(te.shrt, labels_tk, class_w));
        }

        if (mc.depth_loss) {
            const int fh = (mc.image_h + 3) / 4, fw = (mc.image_w + 3) / 4;
            for (std::size_t c = 0; c < depth_probs.size(); ++c) {
                auto targets = detail::depth_targets(window.back()->images[c], fh, fw, mc.depth_min,
                                                     mc.depth_max, mc.depth_bins);
                terms_depth.push_back(detail::depth_nll(depth_probs[c], targets));
            }
        }
    }

    StepLosses out;
    auto l_main = detail::mean_of(terms_main);
    out.main = static_cast<double>(l_main->value[0]);
    ag::VarPtr<T> total = ag::scale(l_main, cfg.w_main);
    if (!terms_long.empty()) {
        auto l = detail::mean_of(terms_long);
        out.lng = static_cast<double>(l->value[0]);
        total = ag::add(total, ag::scale(l, cfg.w_long));
    }
    if (!terms_short.empty()) {
        auto l = detail::mean_of(terms_short);
        out.shrt = static_cast<double>(l->value[0]);
        total = ag::add(total, ag::scale(l, cfg.w_short));
    }
    if (!terms_depth.empty()) {
        auto l = detail::mean_of(terms_depth);
        out.depth = static_cast<double>(l->value[0]);
        total = ag::add(total, ag::scale(l, model.cfg.depth_loss_weight));
    }
    out.total = static_cast<double>(total->value[0]);

    ag::backward(total);
    opt.step(lr_now);
    opt.zero_grad();
    return out;
}

/// Samples a batch (windows, flips, mask offsets) from the step RNG and runs
/// the update.
template <typename T>
StepLosses train_step(TeoccModel<T>& model, nn::Adam<T>& opt, const Dataset& data,
                      const std::vector<Dataset::Window>& windows, const TrainConfig& cfg,
                      double lr_now, Rng& rng) {
    std::vector<BatchItem> batch;
    for (int b = 0; b < cfg.batch_size; ++b) {
        const auto& w = windows[static_cast<std::size_t>(
            rng.uniform_int(static_cast<std::int64_t>(windows.size())))];
        BatchItem item;
        item.episode = &data.episodes[static_cast<std::size_t>(w.episode)];
        item.t = w.t;
        if (cfg.flip_aug && rng.bernoulli(0.5))
            item.flip = rng.bernoulli(0.5) ? FlipAxis::X : FlipAxis::Y;
        if (model.cfg.te_enabled())
            item.mask_k = model.cfg.random_mask
                              ? tempenh::select_mask_index(model.cfg.history, rng).k
                              : tempenh::fixed_mask_index(model.cfg.history).k;
        batch.push_back(item);
    }
    return train_step_impl(model, opt, batch, cfg, lr_now, rng);
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct StepRecord {
    int step = 0;
    StepLosses losses;
    double lr = 0;
    double wall_ms = 0;
    double val_miou = -1;  // <0 when no evaluation ran at this step
};

struct MetricsReport {
    std::vector<double> per_class_iou;
    std::vector<bool> class_present;
    double miou = 0;
    std::int64_t eval_windows = 0;
    std::vector<StepRecord> curve;
    double train_wall_ms = 0;
    double eval_wall_ms = 0;
    std::int64_t train_peak_bytes = 0;
};

/// Micro-averaged evaluation: confusion counts pooled over all windows, then
/// per-class IoU and the mean over classes with nonempty union.
template <typename T>
MetricsReport evaluate(TeoccModel<T>& model, const Dataset& data, int max_episodes = 0) {
    if (data.episodes.empty()) throw std::invalid_argument("evaluate: empty dataset");
    const int N = model.cfg.history;
    ConfusionCounts counts(model.cfg.num_classes);
    MetricsReport r;
    const double start = now_ms();
    const std::size_t n_eps = max_episodes > 0
                                  ? std::min<std::size_t>(data.episodes.size(),
                                                          static_cast<std::size_t>(max_episodes))
                                  : data.episodes.size();
    for (std::size_t e = 0; e < n_eps; ++e) {
        const auto& ep = data.episodes[e];
        for (int t = N; t < static_cast<int>(ep.frames.size()); ++t) {
            std::vector<const sim::Frame*> window;
            for (int i = t - N; i <= t; ++i) window.push_back(&ep.frames[static_cast<std::size_t>(i)]);
            auto pred = model.infer(window);
            counts.accumulate(fusionhead::argmax_labels(pred),
                              ep.frames[static_cast<std::size_t>(t)].gt_occupancy);
            ++r.eval_windows;
        }
    }
    const IouResult iou = iou_from_counts(counts);
    r.per_class_iou = iou.iou;
    r.class_present = iou.present;
    r.miou = miou_from_counts(counts);
    r.eval_wall_ms = now_ms() - start;
    return r;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

inline constexpr const char* kCheckpointMagic = "TEOCCKPT v1\n";

template <typename T>
void save_checkpoint(const TeoccModel<T>& model, const TrainConfig& cfg, std::int64_t step,
                     std::uint64_t rng_state, const std::string& path) {
    nlohmann::json j;
    j["format"] = "teocc-checkpoint";
    j["version"] = 1;
    j["step"] = step;
    j["rng_state"] = std::to_string(rng_state);
    j["config"] = train_config_to_text(cfg);
    nlohmann::json plist = nlohmann::json::array();
    for (const auto& e : model.params.entries())
        plist.push_back({{"name", e.name}, {"group", e.group}, {"shape", e.var->value.shape()}});
    j["params"] = plist;
    const std::string header = j.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
    f.write(kCheckpointMagic, static_cast<std::streamsize>(std::strlen(kCheckpointMagic)));
    const std::uint32_t len = static_cast<std::uint32_t>(header.size());
    char lenb[4] = {static_cast<char>(len & 0xff), static_cast<char>((len >> 8) & 0xff),
                    static_cast<char>((len >> 16) & 0xff), static_cast<char>((len >> 24) & 0xff)};
    f.write(lenb, 4);
    f.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& e : model.params.entries()) {
        Tensor<float> as_f32(e.var->value.shape());
        for (std::int64_t i = 0; i < as_f32.numel(); ++i)
            as_f32[i] = static_cast<float>(e.var->value[i]);
        const std::string blob = teoc::encode(as_f32);
        f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    }
    if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

struct LoadedCheckpoint {
    TrainConfig config;
    std::shared_ptr<TeoccModel<Scalar>> model;
    std::int64_t step = 0;
    std::uint64_t rng_state = 0;
};

/// Rebuilds the model from the checkpoint's config echo; the camera rig comes
/// from the dataset the checkpoint is used against.
inline LoadedCheckpoint load_checkpoint(const std::string& path,
                                        const std::vector<sim::CameraModel>& rig) {
    const std::string data = teoc::read_all(path);
    const std::size_t magic_len = std::strlen(kCheckpointMagic);
    if (data.size() < magic_len + 4 || data.compare(0, magic_len, kCheckpointMagic) != 0)
        throw std::runtime_error("load_checkpoint: " + path + " is not a teocc checkpoint");
    const auto* u = reinterpret_cast<const unsigned char*>(data.data()) + magic_len;
    const std::uint32_t len = static_cast<std::uint32_t>(u[0]) | (static_cast<std::uint32_t>(u[1]) << 8) |
                              (static_cast<std::uint32_t>(u[2]) << 16) |
                              (static_cast<std::uint32_t>(u[3]) << 24);
    std::size_t off = magic_len + 4;
    if (data.size() < off + len) throw std::runtime_error("load_checkpoint: truncated header");
    nlohmann::json j = nlohmann::json::parse(data.substr(off, len));
    off += len;
    if (j.at("version").get<int>() != 1)
        throw std::runtime_error("load_checkpoint: unsupported checkpoint version");

    LoadedCheckpoint out;
    out.step = j.at("step").get<std::int64_t>();
    out.rng_state = std::stoull(j.at("rng_state").get<std::string>());
    out.config = train_config_from(
        ConfigMap::parse(j.at("config").get<std::string>(), path + ":config"));
    out.model = std::make_shared<TeoccModel<Scalar>>(out.config.model, rig, /*init_seed=*/0);

    const auto& plist = j.at("params");
    auto& entries = out.model->params.entries();
    if (plist.size() != entries.size())
        throw std::runtime_error("load_checkpoint: parameter list does not match the architecture");
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const std::string name = plist[i].at("name").get<std::string>();
        if (name != entries[i].name)
            throw std::runtime_error("load_checkpoint: parameter order mismatch at " + name);
        Tensor<float> t = teoc::decode<float>(data, off, name);
        if (!(t.shape() == entries[i].var->value.shape()))
            throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
        for (std::int64_t k = 0; k < t.numel(); ++k)
            entries[i].var->value[k] = static_cast<Scalar>(t[k]);
    }
    if (off != data.size())
        throw std::runtime_error("load_checkpoint: trailing bytes after parameters");
    return out;
}

// ---------------------------------------------------------------------------
// Training driver
// ---------------------------------------------------------------------------

struct TrainResult {
    MetricsReport report;
    std::shared_ptr<TeoccModel<Scalar>> model;
    std::uint64_t final_rng_state = 0;
    std::string checkpoint_path;
};

inline double lr_at(const TrainConfig& cfg, int step) {
    if (!cfg.cosine_decay) return cfg.lr;
    const double progress = static_cast<double>(step) / std::max(1, cfg.steps);
    return cfg.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

/// Full training run: deterministic in (config, seed). Writes metrics.ndjson
/// and checkpoint.teockpt under out_dir when given.
inline TrainResult run_training(const TrainConfig& cfg_in, const std::string& out_dir = "",
                                bool quiet = true) {
    TrainConfig cfg = cfg_in;
    cfg.validate();
    set_thread_count(cfg.threads);
    if (cfg.data_dir.empty()) throw std::invalid_argument("run_training: data_dir is required");
    Dataset train_data = load_dataset(cfg.data_dir);
    resolve_model_from_dataset(cfg.model, train_data);
    std::optional<Dataset> val_data;
    if (!cfg.val_dir.empty()) val_data = load_dataset(cfg.val_dir);

    Rng root(cfg.seed);
    Rng rng_init = root.fork("init");
    Rng rng_steps = root.fork("steps");

    TrainResult result;
    result.model = std::make_shared<TeoccModel<Scalar>>(cfg.model, train_data.episodes[0].cameras,
                                                        rng_init.next_u64());
    auto& model = *result.model;
    nn::Adam<Scalar> opt(&model.params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    const auto windows = train_data.windows_for(cfg.model.history);

    std::ofstream metrics;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        metrics.open(out_dir + "/metrics.ndjson", std::ios::trunc);
        if (!metrics) throw std::runtime_error("run_training: cannot write metrics under " + out_dir);
    }

    mem::reset_peak();
    const double t0 = now_ms();
    for (int step = 0; step < cfg.steps; ++step) {
        const double lr_now = lr_at(cfg, step);
        StepRecord rec;
        rec.step = step;
        rec.lr = lr_now;
        rec.losses = train_step(model, opt, train_data, windows, cfg, lr_now, rng_steps);
        rec.wall_ms = now_ms() - t0;
        if (cfg.eval_every > 0 && val_data && (step + 1) % cfg.eval_every == 0)
            rec.val_miou = evaluate(model, *val_data, cfg.eval_episodes).miou;
        if (metrics.is_open()) {
            nlohmann::json j = {{"step", rec.step},
                                {"loss_main", rec.losses.main},
                                {"loss_long", rec.losses.lng},
                                {"loss_short", rec.losses.shrt},
                                {"loss_total", rec.losses.total},
                                {"lr", rec.lr},
                                {"wall_ms", rec.wall_ms},
                                {"peak_mem_bytes", mem::peak_bytes().load()}};
            if (rec.val_miou >= 0) j["miou"] = rec.val_miou;
            metrics << j.dump() << "\n";
        }
        if (!quiet && (step % 25 == 0 || step + 1 == cfg.steps))
            std::fprintf(stderr, "step %4d  loss %.4f (main %.4f long %.4f short %.4f)  lr %.2e\n",
                         step, rec.losses.total, rec.losses.main, rec.losses.lng, rec.losses.shrt,
                         lr_now);
        result.report.curve.push_back(rec);
    }
    result.report.train_wall_ms = now_ms() - t0;
    result.report.train_peak_bytes = mem::peak_bytes().load();
    result.final_rng_state = rng_steps.state();

    if (val_data) {
        MetricsReport final_eval = evaluate(model, *val_data);
        result.report.per_class_iou = final_eval.per_class_iou;
        result.report.class_present = final_eval.class_present;
        result.report.miou = final_eval.miou;
        result.report.eval_windows = final_eval.eval_windows;
        result.report.eval_wall_ms = final_eval.eval_wall_ms;
        if (metrics.is_open()) {
            nlohmann::json j = {{"step", cfg.steps},
                                {"miou", final_eval.miou},
                                {"per_class_iou", final_eval.per_class_iou},
                                {"wall_ms", result.report.train_wall_ms},
                                {"peak_mem_bytes", result.report.train_peak_bytes}};
            metrics << j.dump() << "\n";
        }
    }

    if (!out_dir.empty()) {
        result.checkpoint_path = out_dir + "/checkpoint.teockpt";
        save_checkpoint(model, cfg, cfg.steps, rng_steps.state(), result.checkpoint_path);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Ablation runner
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& ablation_variant_names() {
    static const std::vector<std::string> names = {
        "baseline",      "long",           "long-short", "long-short-random",
        "fused-decoders", "separate-head", "radar"};
    return names;
}

/// Flag assignment for each named variant, applied on top of the base config.
inline void apply_variant(TrainConfig& cfg, const std::string& name) {
    auto& m = cfg.model;
    m.use_long = false;
    m.use_short = false;
    m.random_mask = false;
    m.shared_head = true;
    m.fused_decoders = false;
    if (name == "baseline") {
    } else if (name == "long") {
        m.use_long = true;
    } else if (name == "long-short") {
        m.use_long = m.use_short = true;
    } else if (name == "long-short-random") {
        m.use_long = m.use_short = m.random_mask = true;
    } else if (name == "fused-decoders") {
        m.use_long = m.use_short = true;
        m.fused_decoders = true;
    } else if (name == "separate-head") {
        m.use_long = m.use_short = true;
        m.shared_head = false;
    } else if (name == "radar") {
        m.use_long = m.use_short = m.random_mask = true;
        m.use_radar = true;
    } else {
        throw std::invalid_argument("unknown ablation variant '" + name + "'");
    }
}

struct VariantResult {
    std::string name;
    std::vector<double> mious;  // one per seed
    SampleSummary summary;
};

struct AblationReport {
    std::vector<VariantResult> variants;
    int seeds = 0;
    double wall_ms = 0;

    const VariantResult* find(const std::string& name) const {
        for (const auto& v : variants)
            if (v.name == name) return &v;
        return nullptr;
    }

    nlohmann::json to_json() const {
        nlohmann::json out;
        out["seeds"] = seeds;
        out["wall_ms"] = wall_ms;
        nlohmann::json vs = nlohmann::json::array();
        for (const auto& v : variants)
            vs.push_back({{"name", v.name},
                          {"miou", v.mious},
                          {"mean", v.summary.mean},
                          {"spread", v.summary.spread}});
        out["variants"] = vs;
        return out;
    }
};

/// Trains every requested variant with `seeds` seeds on the base config's
/// datasets and reports validation mIoU per run.
inline AblationReport run_ablation(const TrainConfig& base, const std::vector<std::string>& names,
                                   int seeds,
                                   const std::function<void(const std::string&)>& log = {}) {
    if (seeds < 1) throw std::invalid_argument("run_ablation: seeds must be >= 1");
    if (base.val_dir.empty())
        throw std::invalid_argument("run_ablation: the base config needs a val_dir");
    AblationReport report;
    report.seeds = seeds;
    const double t0 = now_ms();
    for (const auto& name : names) {
        VariantResult vr;
        vr.name = name;
        for (int s = 0; s < seeds; ++s) {
            TrainConfig cfg = base;
            apply_variant(cfg, name);
            cfg.seed = base.seed + static_cast<std::uint64_t>(s);
            TrainResult tr = run_training(cfg);
            vr.mious.push_back(tr.report.miou);
            if (log) {
                std::ostringstream msg;
                msg.precision(4);
                msg << name << " seed " << cfg.seed << ": val mIoU " << std::fixed
                    << tr.report.miou;
                log(msg.str());
            }
        }
        vr.summary = summarize(vr.mious);
        report.variants.push_back(std::move(vr));
    }
    report.wall_ms = now_ms() - t0;
    return report;
}

// ---------------------------------------------------------------------------
// Overhead measurement
// ---------------------------------------------------------------------------

struct OverheadReport {
    double te_on_ms = 0, te_off_ms = 0;
    std::int64_t te_on_peak = 0, te_off_peak = 0;
    int steps = 0;
    double time_ratio() const { return te_on_ms / te_off_ms; }
    double mem_ratio() const {
        return static_cast<double>(te_on_peak) / static_cast<double>(te_off_peak);
    }
};

/// Wall-clock and peak live tensor bytes around the train loop, with the
/// temporal enhancement branch on vs off on otherwise identical configs.
inline OverheadReport measure_overhead(const TrainConfig& base, int steps) {
    OverheadReport rep;
    rep.steps = steps;
    for (int phase = 0; phase < 2; ++phase) {
        TrainConfig cfg = base;
        cfg.steps = steps;
        cfg.eval_every = 0;
        cfg.model.use_long = cfg.model.use_short = (phase == 0);
        if (phase == 0) cfg.model.random_mask = base.model.random_mask;
        cfg.validate();
        set_thread_count(cfg.threads);
        Dataset data = load_dataset(cfg.data_dir);
        resolve_model_from_dataset(cfg.model, data);
        Rng root(cfg.seed);
        Rng rng_init = root.fork("init");
        Rng rng_steps = root.fork("steps");
        TeoccModel<Scalar> model(cfg.model, data.episodes[0].cameras, rng_init.next_u64());
        nn::Adam<Scalar> opt(&model.params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        const auto windows = data.windows_for(cfg.model.history);
        // One untimed warmup step so allocator effects hit both phases equally.
        train_step(model, opt, data, windows, cfg, lr_at(cfg, 0), rng_steps);
        mem::reset_peak();
        const double t0 = now_ms();
        for (int s = 0; s < steps; ++s)
            train_step(model, opt, data, windows, cfg, lr_at(cfg, s), rng_steps);
        const double elapsed = now_ms() - t0;
        if (phase == 0) {
            rep.te_on_ms = elapsed;
            rep.te_on_peak = mem::peak_bytes().load();
        } else {
            rep.te_off_ms = elapsed;
            rep.te_off_peak = mem::peak_bytes().load();
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Voxel export and prediction files
// ---------------------------------------------------------------------------

inline const std::vector<std::array<int, 3>>& class_palette() {
    static const std::vector<std::array<int, 3>> p = {
        {128, 128, 128},  // ground
        {214, 112, 58},   // building
        {255, 214, 0},    // barrier
        {0, 122, 255},    // car
        {255, 61, 99},    // pedestrian
        {89, 178, 89},    {160, 89, 178}, {60, 180, 190}, {230, 140, 180},
        {120, 120, 40},   {40, 90, 160},  {200, 80, 30},  {90, 200, 140},
        {170, 170, 220},  {100, 60, 20},  {20, 140, 100},
    };
    return p;
}

inline std::array<int, 3> class_color(int class_id) {
    const auto& p = class_palette();
    return p[static_cast<std::size_t>((class_id - 1) % static_cast<int>(p.size()))];
}

/// ASCII point cloud of occupied voxel centers:
///   teocc-voxels v1 count=<n>
///   x y z class_id r g b
inline void export_voxels(const OccupancyLabelGrid& grid, const std::string& path) {
    std::int64_t count = 0;
    for (std::int64_t i = 0; i < grid.labels.numel(); ++i)
        if (grid.labels[i] != 0) ++count;
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("export_voxels: cannot open " + path);
    f << "teocc-voxels v1 count=" << count << "\n";
    char line[160];
    for (int i = 0; i < grid.spec.dims[0]; ++i)
        for (int j = 0; j < grid.spec.dims[1]; ++j)
            for (int k = 0; k < grid.spec.dims[2]; ++k) {
                const std::int32_t cls = grid.at(i, j, k);
                if (cls == 0) continue;
                const Vec3 c = voxel_center(grid.spec, i, j, k);
                const auto rgb = class_color(cls);
                std::snprintf(line, sizeof(line), "%.4f %.4f %.4f %d %d %d %d\n", c[0], c[1], c[2],
                              cls, rgb[0], rgb[1], rgb[2]);
                f << line;
            }
    if (!f) throw std::runtime_error("export_voxels: write failed for " + path);
}

template <typename T>
void export_voxels(const fusionhead::OccupancyPrediction<T>& pred, const std::string& path) {
    export_voxels(fusionhead::argmax_labels(pred), path);
}

struct VoxelRecord {
    Vec3 xyz;
    int class_id;
    std::array<int, 3> rgb;
};

inline std::vector<VoxelRecord> parse_voxel_export(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("parse_voxel_export: cannot open " + path);
    std::string header;
    std::getline(f, header);
    std::int64_t count = -1;
    if (std::sscanf(header.c_str(), "teocc-voxels v1 count=%lld", (long long*)&count) != 1)
        throw std::runtime_error("parse_voxel_export: bad header '" + header + "'");
    std::vector<VoxelRecord> out;
    VoxelRecord r;
    while (f >> r.xyz[0] >> r.xyz[1] >> r.xyz[2] >> r.class_id >> r.rgb[0] >> r.rgb[1] >>
           r.rgb[2])
        out.push_back(r);
    if (static_cast<std::int64_t>(out.size()) != count)
        throw std::runtime_error("parse_voxel_export: header count " + std::to_string(count) +
                                 " does not match " + std::to_string(out.size()) + " records");
    return out;
}

inline constexpr const char* kPredictionMagic = "TEOCPRED v1\n";

template <typename T>
void save_prediction(const fusionhead::OccupancyPrediction<T>& pred,
                     const std::vector<std::string>& label_names, const std::string& path) {
    nlohmann::json j;
    j["format"] = "teocc-prediction";
    j["version"] = 1;
    j["grid"] = {{"x_range", pred.spec.x_range},
                 {"y_range", pred.spec.y_range},
                 {"z_range", pred.spec.z_range},
                 {"voxel_size", pred.spec.voxel_size}};
    j["labels"] = label_names;
    const std::string header = j.dump();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("save_prediction: cannot open " + path);
    f.write(kPredictionMagic, static_cast<std::streamsize>(std::strlen(kPredictionMagic)));
    const std::uint32_t len = static_cast<std::uint32_t>(header.size());
    const char lenb[4] = {static_cast<char>(len & 0xff), static_cast<char>((len >> 8) & 0xff),
                          static_cast<char>((len >> 16) & 0xff),
                          static_cast<char>((len >> 24) & 0xff)};
    f.write(lenb, 4);
    f.write(header.data(), static_cast<std::streamsize>(header.size()));
    Tensor<float> logits(pred.logits.shape());
    for (std::int64_t i = 0; i < logits.numel(); ++i)
        logits[i] = static_cast<float>(pred.logits[i]);
    const std::string blob = teoc::encode(logits);
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

struct LoadedPrediction {
    fusionhead::OccupancyPrediction<float> pred;
    std::vector<std::string> label_names;
};

inline LoadedPrediction load_prediction(const std::string& path) {
    const std::string data = teoc::read_all(path);
    const std::size_t magic_len = std::strlen(kPredictionMagic);
    if (data.size() < magic_len + 4 || data.compare(0, magic_len, kPredictionMagic) != 0)
        throw std::runtime_error("load_prediction: " + path + " is not a teocc prediction file");
    const auto* u = reinterpret_cast<const unsigned char*>(data.data()) + magic_len;
    const std::uint32_t len = static_cast<std::uint32_t>(u[0]) |
                              (static_cast<std::uint32_t>(u[1]) << 8) |
                              (static_cast<std::uint32_t>(u[2]) << 16) |
                              (static_cast<std::uint32_t>(u[3]) << 24);
    std::size_t off = magic_len + 4;
    nlohmann::json j = nlohmann::json::parse(data.substr(off, len));
    off += len;
    LoadedPrediction out;
    const auto& g = j.at("grid");
    out.pred.spec = make_grid_spec(g.at("x_range").get<std::array<double, 2>>(),
                                   g.at("y_range").get<std::array<double, 2>>(),
                                   g.at("z_range").get<std::array<double, 2>>(),
                                   g.at("voxel_size").get<Vec3>());
    out.label_names = j.at("labels").get<std::vector<std::string>>();
    out.pred.logits = teoc::decode<float>(data, off, path);
    if (off != data.size())
        throw std::runtime_error("load_prediction: trailing bytes in " + path);
    return out;
}

}  // namespace harness
}  // namespace teocc
