#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "teocc/camnet.hpp"
#include "teocc/config.hpp"
#include "teocc/fusionhead.hpp"
#include "teocc/radarnet.hpp"
#include "teocc/sim.hpp"
#include "teocc/tempenh.hpp"

namespace teocc {

struct ModelConfig {
    GridSpec grid = make_grid_spec({-10, 10}, {-10, 10}, {-0.8, 2.4}, 0.4);
    int num_classes = 6;
    int num_cameras = 4;
    int image_h = 32, image_w = 64;

    int enc_c1 = 16, enc_c2 = 32, c_img = 32;
    int depth_bins = 16;
    double depth_min = 1.0, depth_max = 17.0;

    int c_radar = 16;
    int radar_max_points = 8;

    int c_fused = 64;
    int head_hidden = 64;

    int history = 5;  // N
    std::array<int, 3> resnet_channels{32, 64, 128};
    int resnet_blocks = 2;
    int short_hidden = 32;
    int main_blocks = 2;

    bool use_radar = true;
    bool use_long = true;
    bool use_short = true;
    bool random_mask = true;
    bool shared_head = true;
    bool fused_decoders = false;

    bool depth_loss = false;
    double depth_loss_weight = 0.05;
    std::vector<double> class_weights;  // empty = unweighted loss

    bool te_enabled() const { return use_long || use_short; }

    void validate() const {
        if (history < 0) throw std::invalid_argument("model: history must be >= 0");
        if (te_enabled() && history < 2)
            throw std::invalid_argument(
                "model: the temporal enhancement branch needs history >= 2");
        if (num_classes < 2) throw std::invalid_argument("model: need >= 2 classes");
        if (c_img < 1 || c_radar < 1 || c_fused < 1)
            throw std::invalid_argument("model: channel widths must be positive");
        if (!class_weights.empty() &&
            static_cast<int>(class_weights.size()) != num_classes)
            throw std::invalid_argument("model: class_weights size must equal num_classes");
    }
};

inline ModelConfig model_config_from(const ConfigMap& cfg) {
    ModelConfig m;
    m.grid = sim::grid_from_config(cfg);
    m.num_classes = cfg.get_int("num_classes", m.num_classes);
    m.num_cameras = cfg.get_int("cameras", m.num_cameras);
    m.image_h = cfg.get_int("image_height", m.image_h);
    m.image_w = cfg.get_int("image_width", m.image_w);
    m.enc_c1 = cfg.get_int("encoder_c1", m.enc_c1);
    m.enc_c2 = cfg.get_int("encoder_c2", m.enc_c2);
    m.c_img = cfg.get_int("c_img", m.c_img);
    m.depth_bins = cfg.get_int("depth_bins", m.depth_bins);
    m.depth_min = cfg.get_double("depth_min", m.depth_min);
    m.depth_max = cfg.get_double("depth_max", m.depth_max);
    m.c_radar = cfg.get_int("c_radar", m.c_radar);
    m.radar_max_points = cfg.get_int("radar_max_points", m.radar_max_points);
    m.c_fused = cfg.get_int("c_fused", m.c_fused);
    m.head_hidden = cfg.get_int("head_hidden", m.head_hidden);
    m.history = cfg.get_int("history_frames", m.history);
    const auto rc = cfg.get_ints("resnet_channels",
                                 {m.resnet_channels[0], m.resnet_channels[1], m.resnet_channels[2]});
    if (rc.size() != 3) throw std::invalid_argument("resnet_channels needs three entries");
    m.resnet_channels = {rc[0], rc[1], rc[2]};
    m.resnet_blocks = cfg.get_int("resnet_blocks", m.resnet_blocks);
    m.short_hidden = cfg.get_int("short_hidden", m.short_hidden);
    m.main_blocks = cfg.get_int("main_blocks", m.main_blocks);
    m.use_radar = cfg.get_bool("use_radar", m.use_radar);
    m.use_long = cfg.get_bool("use_long", m.use_long);
    m.use_short = cfg.get_bool("use_short", m.use_short);
    m.random_mask = cfg.get_bool("random_mask", m.random_mask);
    m.shared_head = cfg.get_bool("shared_head", m.shared_head);
    m.fused_decoders = cfg.get_bool("fused_decoders", m.fused_decoders);
    m.depth_loss = cfg.get_bool("depth_loss", m.depth_loss);
    m.depth_loss_weight = cfg.get_double("depth_loss_weight", m.depth_loss_weight);
    if (cfg.get_bool("class_weighting", false))
        m.class_weights = cfg.get_doubles("class_weights", {});
    m.validate();
    return m;
}

template <typename T>
Tensor<T> tensor_cast(const Tensor<float>& t) {
    Tensor<T> out(t.shape());
    for (std::int64_t i = 0; i < t.numel(); ++i) out[i] = static_cast<T>(t[i]);
    return out;
}

/// The full network: shared image/radar encoders, the temporal main branch,
/// and the training-only temporal enhancement branch. Parameter groups make
/// the TE-only surface explicit so branch-removal can be checked structurally.
template <typename T>
class TeoccModel {
public:
    ModelConfig cfg;
    std::vector<sim::CameraModel> cameras;
    nn::ParamRegistry<T> params;

    camnet::ImageEncoder<T> encoder;
    radarnet::CellFeaturizer<T> radar_encoder;
    nn::ConvNormAct3d<T> main_merge;
    std::vector<tempenh::BasicBlock3d<T>> main_blocks;
    fusionhead::FusionLayer<T> fuse_main, fuse_long, fuse_short;
    fusionhead::OccHead<T> head, aux_head;
    tempenh::LongTermDecoder<T> long_dec;
    tempenh::ShortTermDecoder<T> short_dec;
    nn::Conv3dLayer<T> te_merge;

    std::vector<std::shared_ptr<const nn::LiftPlan>> lift_plans;
    std::vector<double> depth_bins;

    TeoccModel(ModelConfig config, std::vector<sim::CameraModel> rig, std::uint64_t init_seed)
        : cfg(std::move(config)), cameras(std::move(rig)) {
        cfg.validate();
        if (static_cast<int>(cameras.size()) != cfg.num_cameras)
            throw std::invalid_argument("model: camera rig size does not match config");
        for (const auto& c : cameras) {
            c.validate();
            if (c.height != cfg.image_h || c.width != cfg.image_w)
                throw std::invalid_argument("model: camera image size does not match config");
        }
        nn::Initializer<T> init(init_seed);
        encoder = camnet::ImageEncoder<T>(params, init, "encoder", cfg.image_h, cfg.image_w,
                                          cfg.enc_c1, cfg.enc_c2, cfg.c_img, cfg.depth_bins);
        radar_encoder = radarnet::CellFeaturizer<T>(params, init, "radar", cfg.c_radar);
        main_merge = nn::ConvNormAct3d<T>(params, init, "main.merge", "main",
                                          (cfg.history + 1) * cfg.c_img, cfg.c_img, 3, 1);
        for (int b = 0; b < cfg.main_blocks; ++b)
            main_blocks.emplace_back(params, init, "main.block" + std::to_string(b + 1), "main",
                                     cfg.c_img, cfg.c_img, 1);
        fuse_main = fusionhead::FusionLayer<T>(params, init, "fusion_main", "fusion_main",
                                               cfg.c_img, cfg.c_radar, cfg.c_fused);
        fuse_long = fusionhead::FusionLayer<T>(params, init, "fusion_long", "fusion_long",
                                               cfg.c_img, cfg.c_radar, cfg.c_fused);
        fuse_short = fusionhead::FusionLayer<T>(params, init, "fusion_short", "fusion_short",
                                                cfg.c_img, cfg.c_radar, cfg.c_fused);
        head = fusionhead::OccHead<T>(params, init, "head", "head", cfg.c_fused, cfg.head_hidden,
                                      cfg.num_classes);
        aux_head = fusionhead::OccHead<T>(params, init, "aux_head", "aux_head", cfg.c_fused,
                                          cfg.head_hidden, cfg.num_classes);
        const int n_te_frames = std::max(cfg.history, 1);
        long_dec = tempenh::LongTermDecoder<T>(params, init, "te_long",
                                               n_te_frames * cfg.c_img + cfg.c_radar,
                                               cfg.resnet_channels, cfg.resnet_blocks, cfg.c_img);
        short_dec = tempenh::ShortTermDecoder<T>(params, init, "te_short",
                                                 2 * cfg.c_img + cfg.c_radar, cfg.short_hidden,
                                                 cfg.c_img);
        te_merge = nn::Conv3dLayer<T>(params, init, "te_merge", "te_merge", 2 * cfg.c_img,
                                      cfg.c_img, 1, 1);
        depth_bins = camnet::depth_bin_centers(cfg.depth_min, cfg.depth_max, cfg.depth_bins);
        for (const auto& cam : cameras) {
            const int fh = (cfg.image_h + 3) / 4, fw = (cfg.image_w + 3) / 4;
            lift_plans.push_back(std::make_shared<const nn::LiftPlan>(
                camnet::make_lift_plan(cam, cfg.grid, fh, fw, depth_bins)));
        }
    }

    static const std::vector<std::string>& te_only_groups() {
        static const std::vector<std::string> g = {"te_long", "te_short",   "fusion_long",
                                                   "fusion_short", "te_merge", "aux_head"};
        return g;
    }

    static bool is_te_only(const std::string& group) {
        for (const auto& g : te_only_groups())
            if (g == group) return true;
        return false;
    }

    // -- frame-level pieces ---------------------------------------------------

    /// Encode all cameras of a frame and splat into the frame's own ego grid.
    /// Optionally collects the per-camera depth distributions.
    ag::VarPtr<T> lift_frame(const sim::Frame& frame,
                             std::vector<ag::VarPtr<T>>* depth_probs_out = nullptr) {
        if (frame.images.size() != cameras.size())
            throw std::invalid_argument("lift_frame: camera count mismatch");
        std::vector<ag::VarPtr<T>> lifted;
        for (std::size_t c = 0; c < cameras.size(); ++c) {
            auto img = ag::make_var(tensor_cast<T>(frame.images[c]));
            auto [feat, probs] = encoder(img);
            if (depth_probs_out) depth_probs_out->push_back(probs);
            lifted.push_back(ag::lift_splat(feat, probs, lift_plans[c], cfg.grid.dims));
        }
        return ag::add_n(lifted);
    }

    /// Warp per-frame lifted features into the target frame's ego coordinates
    /// (identity for the target itself), then apply the optional flip.
    std::vector<ag::VarPtr<T>> align_sequence(const std::vector<ag::VarPtr<T>>& lifted,
                                              const std::vector<const sim::Frame*>& frames,
                                              int target,
                                              std::optional<FlipAxis> flip = std::nullopt) {
        if (lifted.size() != frames.size())
            throw std::invalid_argument("align_sequence: size mismatch");
        std::vector<ag::VarPtr<T>> out;
        for (std::size_t i = 0; i < lifted.size(); ++i) {
            ag::VarPtr<T> v = lifted[i];
            if (static_cast<int>(i) != target) {
                auto plan = std::make_shared<const nn::SamplePlan>(nn::make_warp_plan(
                    cfg.grid, frames[i]->ego_pose,
                    frames[static_cast<std::size_t>(target)]->ego_pose));
                v = ag::sample(v, plan);
            }
            if (flip) v = ag::flip(v, *flip);
            out.push_back(v);
        }
        return out;
    }

    /// Radar voxel features for one frame. Zeros in camera-only mode and for
    /// empty clouds.
    ag::VarPtr<T> radar_grid(const sim::RadarPointCloud& cloud, Rng& rng,
                             std::optional<FlipAxis> flip = std::nullopt) {
        const auto zeros = [&] {
            return ag::make_var(Tensor<T>(
                {cfg.c_radar, cfg.grid.dims[0], cfg.grid.dims[1], cfg.grid.dims[2]}));
        };
        if (!cfg.use_radar) return zeros();
        auto buf = radarnet::voxelize_radar<T>(cloud, cfg.grid, cfg.radar_max_points, rng);
        if (buf.num_cells() == 0) return zeros();
        auto cell_feats = radar_encoder(buf);
        auto idx = std::make_shared<const std::vector<std::int64_t>>(buf.cell_index);
        auto g = ag::scatter_cells(cell_feats, idx, cfg.grid.dims);
        if (flip) g = ag::flip(g, *flip);
        return g;
    }

    // -- branches -------------------------------------------------------------

    /// Temporal aggregation of the aligned sequence plus the small voxel
    /// encoder; this is the baseline's feature path.
    ag::VarPtr<T> main_feature(const std::vector<ag::VarPtr<T>>& seq_at_t) {
        if (static_cast<int>(seq_at_t.size()) != cfg.history + 1)
            throw std::invalid_argument("main_feature: expected N+1 aligned frames");
        auto h = main_merge(ag::concat_channels(seq_at_t));
        for (const auto& block : main_blocks) h = block(h);
        return h;
    }

    ag::VarPtr<T> main_logits(const std::vector<ag::VarPtr<T>>& seq_at_t,
                              const ag::VarPtr<T>& radar_t) {
        return head(fuse_main(main_feature(seq_at_t), radar_t));
    }

    /// Long-term pseudo feature: remaining frames in temporal order + radar.
    ag::VarPtr<T> long_pseudo(const std::vector<ag::VarPtr<T>>& seq_at_tk, int masked_index,
                              const ag::VarPtr<T>& radar_tk) {
        std::vector<ag::VarPtr<T>> in;
        for (std::size_t i = 0; i < seq_at_tk.size(); ++i)
            if (static_cast<int>(i) != masked_index) in.push_back(seq_at_tk[i]);
        in.push_back(radar_tk);
        return long_dec(ag::concat_channels(in));
    }

    /// Short-term pseudo feature from the two adjacent frames + radar.
    ag::VarPtr<T> short_pseudo(const std::vector<ag::VarPtr<T>>& seq_at_tk, int masked_index,
                               const ag::VarPtr<T>& radar_tk) {
        if (masked_index < 1 || masked_index + 1 >= static_cast<int>(seq_at_tk.size()))
            throw std::invalid_argument("short_pseudo: masked frame has no adjacent neighbors");
        return short_dec(ag::concat_channels<T>(
            {seq_at_tk[static_cast<std::size_t>(masked_index - 1)],
             seq_at_tk[static_cast<std::size_t>(masked_index + 1)], radar_tk}));
    }

    struct TeLogits {
        ag::VarPtr<T> lng;   // null when the long branch is off
        ag::VarPtr<T> shrt;  // null when the short branch is off or decoders are fused
    };

    /// Scores of the temporal-enhancement branch for the masked frame.
    TeLogits te_logits(const std::vector<ag::VarPtr<T>>& seq_at_tk, int masked_index,
                       const ag::VarPtr<T>& radar_tk) {
        const auto& scorer = cfg.shared_head ? head : aux_head;
        TeLogits out;
        ag::VarPtr<T> v_long, v_short;
        if (cfg.use_long) v_long = long_pseudo(seq_at_tk, masked_index, radar_tk);
        if (cfg.use_short) v_short = short_pseudo(seq_at_tk, masked_index, radar_tk);
        if (cfg.fused_decoders && v_long && v_short) {
            auto merged = te_merge(ag::concat_channels<T>({v_long, v_short}));
            out.lng = scorer(fuse_long(merged, radar_tk));
            return out;
        }
        if (v_long) out.lng = scorer(fuse_long(v_long, radar_tk));
        if (v_short) out.shrt = scorer(fuse_short(v_short, radar_tk));
        return out;
    }

    // -- inference ------------------------------------------------------------

    /// Main-branch logits for the last frame of the window. Executes no
    /// temporal-enhancement op, so TE-only parameters cannot influence it.
    /// Pure function of (parameters, window): no tape, fixed internal seeds.
    fusionhead::OccupancyPrediction<T> infer(const std::vector<const sim::Frame*>& window) {
        if (static_cast<int>(window.size()) != cfg.history + 1)
            throw std::invalid_argument("infer: need exactly N+1 consecutive frames");
        ag::NoGradGuard no_grad;
        Rng radar_rng(0x7e0ccu);
        std::vector<ag::VarPtr<T>> lifted;
        for (const auto* f : window) lifted.push_back(lift_frame(*f));
        auto seq = align_sequence(lifted, window, cfg.history);
        auto radar_t = radar_grid(window.back()->radar, radar_rng);
        auto logits = main_logits(seq, radar_t);
        return {cfg.grid, logits->value};
    }
};

}  // namespace teocc
