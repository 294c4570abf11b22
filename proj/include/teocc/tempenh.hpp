#pragma once

#include <array>
#include <memory>
#include <vector>

#include "teocc/nn.hpp"
#include "teocc/rng.hpp"

namespace teocc {
namespace tempenh {

/// Which historical frame is dropped. k is the offset from the current frame;
/// both neighbors t-k-1 and t-k+1 must exist, so 1 <= k <= N-1.
struct MaskChoice {
    int k = 1;
    int sequence_index = 0;  // index of V_{t-k} in [V_{t-N}, ..., V_t]
};

/// Uniform draw of the masked offset from {1, ..., N-1}.
inline MaskChoice select_mask_index(int history, Rng& rng) {
    if (history < 2)
        throw std::invalid_argument("select_mask_index: need at least 2 history frames");
    MaskChoice m;
    m.k = 1 + static_cast<int>(rng.uniform_int(history - 1));
    m.sequence_index = history - m.k;
    return m;
}

inline MaskChoice fixed_mask_index(int history) {
    if (history < 2)
        throw std::invalid_argument("fixed_mask_index: need at least 2 history frames");
    return MaskChoice{1, history - 1};
}

/// Residual block: conv3(s) -> norm -> ReLU -> conv3(1) -> norm, skip with a
/// 1x1x1 projection when the shape changes, final ReLU.
template <typename T>
struct BasicBlock3d {
    nn::Conv3dLayer<T> conv1;
    nn::GroupNormLayer<T> norm1;
    nn::Conv3dLayer<T> conv2;
    nn::GroupNormLayer<T> norm2;
    bool has_proj = false;
    nn::Conv3dLayer<T> proj;

    BasicBlock3d() = default;
    BasicBlock3d(nn::ParamRegistry<T>& reg, nn::Initializer<T>& init, const std::string& name,
                 const std::string& group, int ci, int co, int stride)
        : conv1(reg, init, name + ".conv1", group, ci, co, 3, stride),
          norm1(reg, init, name + ".norm1", group, co),
          conv2(reg, init, name + ".conv2", group, co, co, 3, 1),
          norm2(reg, init, name + ".norm2", group, co),
          has_proj(stride != 1 || ci != co) {
        if (has_proj) proj = nn::Conv3dLayer<T>(reg, init, name + ".proj", group, ci, co, 1, stride);
    }

    ag::VarPtr<T> operator()(const ag::VarPtr<T>& x) const {
        auto h = ag::relu(norm1(conv1(x)));
        h = norm2(conv2(h));
        auto skip = has_proj ? proj(x) : x;
        return ag::relu(ag::add(h, skip));
    }
};

/// Three stages at strides (1, 2, 2); every stage is a run of BasicBlocks.
/// Returns the per-stage outputs at full, half, and quarter resolution.
template <typename T>
struct ResNet3d {
    std::vector<std::vector<BasicBlock3d<T>>> stages;

    ResNet3d() = default;
    ResNet3d(nn::ParamRegistry<T>& reg, nn::Initializer<T>& init, const std::string& name,
             const std::string& group, int c_in, const std::array<int, 3>& channels,
             int blocks_per_stage) {
        if (blocks_per_stage < 1) throw std::invalid_argument("ResNet3d: need >= 1 block per stage");
        const std::array<int, 3> strides{1, 2, 2};
        int ci = c_in;
        for (int s = 0; s < 3; ++s) {
            std::vector<BasicBlock3d<T>> stage;
            for (int b = 0; b < blocks_per_stage; ++b) {
                const int stride = (b == 0) ? strides[static_cast<std::size_t>(s)] : 1;
                const int cin = (b == 0) ? ci : channels[static_cast<std::size_t>(s)];
                stage.emplace_back(reg, init,
                                   name + ".stage" + std::to_string(s + 1) + ".block" +
                                       std::to_string(b + 1),
                                   group, cin, channels[static_cast<std::size_t>(s)], stride);
            }
            stages.push_back(std::move(stage));
            ci = channels[static_cast<std::size_t>(s)];
        }
    }

    std::array<ag::VarPtr<T>, 3> operator()(const ag::VarPtr<T>& x) const {
        const auto& s = x->value.shape();
        for (int a = 1; a <= 3; ++a)
            if (s[static_cast<std::size_t>(a)] < 4)
                throw std::invalid_argument(
                    "resnet3d: spatial dim " + std::to_string(s[static_cast<std::size_t>(a)]) +
                    " too small for two halvings (need >= 4)");
        std::array<ag::VarPtr<T>, 3> outs;
        ag::VarPtr<T> h = x;
        for (std::size_t st = 0; st < 3; ++st) {
            for (const auto& block : stages[st]) h = block(h);
            outs[st] = h;
        }
        return outs;
    }
};

/// Trilinearly upsample the coarser scales to full resolution, concatenate,
/// and fuse with one conv+norm+ReLU down to the output width.
template <typename T>
struct Fpn3d {
    nn::ConvNormAct3d<T> fuse;

    Fpn3d() = default;
    Fpn3d(nn::ParamRegistry<T>& reg, nn::Initializer<T>& init, const std::string& name,
          const std::string& group, const std::array<int, 3>& channels, int c_out)
        : fuse(reg, init, name + ".fuse", group, channels[0] + channels[1] + channels[2], c_out, 3,
               1) {}

    ag::VarPtr<T> operator()(const std::array<ag::VarPtr<T>, 3>& scales) const {
        const auto dims_of = [](const ag::VarPtr<T>& v) {
            const auto& s = v->value.shape();
            return std::array<int, 3>{s[1], s[2], s[3]};
        };
        const std::array<int, 3> full = dims_of(scales[0]);
        std::array<int, 3> expect_half{}, expect_quarter{};
        for (int a = 0; a < 3; ++a) {
            expect_half[static_cast<std::size_t>(a)] = (full[static_cast<std::size_t>(a)] + 1) / 2;
            expect_quarter[static_cast<std::size_t>(a)] =
                (expect_half[static_cast<std::size_t>(a)] + 1) / 2;
        }
        if (dims_of(scales[1]) != expect_half || dims_of(scales[2]) != expect_quarter)
            throw std::invalid_argument("fpn3d: scales are not ceil-halvings of the full grid");
        auto up_half = ag::sample(
            scales[1], std::make_shared<nn::SamplePlan>(nn::make_upsample_plan(expect_half, full)));
        auto up_quarter = ag::sample(
            scales[2],
            std::make_shared<nn::SamplePlan>(nn::make_upsample_plan(expect_quarter, full)));
        return fuse(ag::concat_channels<T>({scales[0], up_half, up_quarter}));
    }
};

/// Long-term temporal decoder: ResNet-3D over the concatenated remaining
/// frames + radar, then FPN-3D back to full resolution and C_img channels.
template <typename T>
struct LongTermDecoder {
    ResNet3d<T> resnet;
    Fpn3d<T> fpn;

    LongTermDecoder() = default;
    LongTermDecoder(nn::ParamRegistry<T>& reg, nn::Initializer<T>& init, const std::string& group,
                    int c_in, const std::array<int, 3>& channels, int blocks, int c_out)
        : resnet(reg, init, "te_long.resnet", group, c_in, channels, blocks),
          fpn(reg, init, "te_long.fpn", group, channels, c_out) {}

    ag::VarPtr<T> operator()(const ag::VarPtr<T>& x) const { return fpn(resnet(x)); }
};

/// Short-term temporal decoder: two 3D convolutions with a ReLU between.
template <typename T>
struct ShortTermDecoder {
    nn::Conv3dLayer<T> conv1, conv2;

    ShortTermDecoder() = default;
    ShortTermDecoder(nn::ParamRegistry<T>& reg, nn::Initializer<T>& init, const std::string& group,
                     int c_in, int hidden, int c_out)
        : conv1(reg, init, "te_short.conv1", group, c_in, hidden, 3, 1),
          conv2(reg, init, "te_short.conv2", group, hidden, c_out, 3, 1) {}

    ag::VarPtr<T> operator()(const ag::VarPtr<T>& x) const { return conv2(ag::relu(conv1(x))); }
};

}  // namespace tempenh
}  // namespace teocc
