#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "teocc/autograd.hpp"
#include "teocc/nn_kernels.hpp"
#include "teocc/rng.hpp"

namespace teocc {
namespace ag {

// ---------------------------------------------------------------------------
// Kernel-backed ops
// ---------------------------------------------------------------------------

/// 3D convolution. x (Ci,X,Y,Z), w (Co,Ci,k,k,k), b (Co). Ceil-mode output
/// with symmetric zero padding.
template <typename T>
VarPtr<T> conv3d(const VarPtr<T>& x, const VarPtr<T>& w, const VarPtr<T>& b, int stride) {
    const auto& xs = x->value.shape();
    const auto& ws = w->value.shape();
    if (xs.size() != 4 || ws.size() != 5)
        throw std::invalid_argument("conv3d: expected x (Ci,X,Y,Z), w (Co,Ci,k,k,k)");
    if (xs[0] != ws[1])
        throw std::invalid_argument("conv3d: input channels " + std::to_string(xs[0]) +
                                    " do not match weight channels " + std::to_string(ws[1]));
    const nn::ConvGeom g = nn::conv_geom(xs[0], ws[0], {ws[2], ws[3], ws[4]},
                                         {stride, stride, stride}, {xs[1], xs[2], xs[3]});
    Tensor<T> y({g.co, g.out[0], g.out[1], g.out[2]});
    nn::conv3d_forward(x->value.data(), w->value.data(), b->value.data(), g, y.data());
    return make_op<T>(std::move(y), {x, w, b}, [x, w, b, g](Var<T>& self) {
        nn::conv3d_backward(x->value.data(), w->value.data(), g, self.grad.data(), grad_sink(x),
                            grad_sink(w), grad_sink(b));
    });
}

/// 2D convolution expressed through the 3D kernel with a unit z axis.
template <typename T>
VarPtr<T> conv2d(const VarPtr<T>& x, const VarPtr<T>& w, const VarPtr<T>& b, int stride) {
    const auto& xs = x->value.shape();
    const auto& ws = w->value.shape();
    if (xs.size() != 3 || ws.size() != 4)
        throw std::invalid_argument("conv2d: expected x (Ci,H,W), w (Co,Ci,kh,kw)");
    if (xs[0] != ws[1]) throw std::invalid_argument("conv2d: channel mismatch");
    const nn::ConvGeom g =
        nn::conv_geom(xs[0], ws[0], {ws[2], ws[3], 1}, {stride, stride, 1}, {xs[1], xs[2], 1});
    Tensor<T> y({g.co, g.out[0], g.out[1]});
    nn::conv3d_forward(x->value.data(), w->value.data(), b->value.data(), g, y.data());
    return make_op<T>(std::move(y), {x, w, b}, [x, w, b, g](Var<T>& self) {
        nn::conv3d_backward(x->value.data(), w->value.data(), g, self.grad.data(), grad_sink(x),
                            grad_sink(w), grad_sink(b));
    });
}

template <typename T>
VarPtr<T> group_norm(const VarPtr<T>& x, const VarPtr<T>& gamma, const VarPtr<T>& beta,
                     int groups, double eps = 1e-5) {
    const auto& xs = x->value.shape();
    const int channels = xs[0];
    std::int64_t spatial = 1;
    for (std::size_t i = 1; i < xs.size(); ++i) spatial *= xs[i];
    if (gamma->value.numel() != channels || beta->value.numel() != channels)
        throw std::invalid_argument("group_norm: affine parameter size mismatch");
    Tensor<T> y(xs);
    auto stats = std::make_shared<std::vector<double>>(static_cast<std::size_t>(2 * groups));
    nn::group_norm_forward(x->value.data(), gamma->value.data(), beta->value.data(), channels,
                           spatial, groups, eps, y.data(), stats->data(), stats->data() + groups);
    return make_op<T>(std::move(y), {x, gamma, beta},
                      [x, gamma, beta, groups, channels, spatial, stats](Var<T>& self) {
                          nn::group_norm_backward(x->value.data(), gamma->value.data(), channels,
                                                  spatial, groups, stats->data(),
                                                  stats->data() + groups, self.grad.data(),
                                                  grad_sink(x), grad_sink(gamma), grad_sink(beta));
                      });
}

/// Softmax over axis 0 (the channel/bin axis).
template <typename T>
VarPtr<T> softmax_channels(const VarPtr<T>& x) {
    const auto& xs = x->value.shape();
    const int channels = xs[0];
    std::int64_t spatial = 1;
    for (std::size_t i = 1; i < xs.size(); ++i) spatial *= xs[i];
    Tensor<T> y(xs);
    nn::softmax_channels_forward(x->value.data(), channels, spatial, y.data());
    return make_op<T>(std::move(y), {x}, [x, channels, spatial](Var<T>& self) {
        if (T* gx = grad_sink(x))
            nn::softmax_channels_backward(self.value.data(), channels, spatial, self.grad.data(),
                                          gx);
    });
}

/// Pointwise linear map over columns: x (Ci, spatial...) -> (Co, spatial...).
template <typename T>
VarPtr<T> linear_pointwise(const VarPtr<T>& x, const VarPtr<T>& w, const VarPtr<T>& b) {
    const auto& xs = x->value.shape();
    const auto& ws = w->value.shape();
    if (ws.size() != 2 || xs.empty() || xs[0] != ws[1])
        throw std::invalid_argument("linear_pointwise: shape mismatch");
    const int ci = ws[1], co = ws[0];
    std::int64_t cols = 1;
    for (std::size_t i = 1; i < xs.size(); ++i) cols *= xs[i];
    std::vector<int> out_shape = xs;
    out_shape[0] = co;
    Tensor<T> y(out_shape);
    {
        nn::ECMap<T> wm(w->value.data(), co, ci);
        nn::ECMap<T> xm(x->value.data(), ci, cols);
        nn::EMap<T> ym(y.data(), co, cols);
        ym.noalias() = wm * xm;
        for (int c = 0; c < co; ++c) ym.row(c).array() += static_cast<T>(b->value[c]);
    }
    return make_op<T>(std::move(y), {x, w, b}, [x, w, b, ci, co, cols](Var<T>& self) {
        nn::ECMap<T> gym(self.grad.data(), co, cols);
        if (T* gw = grad_sink(w)) {
            nn::ECMap<T> xm(x->value.data(), ci, cols);
            nn::EMap<T>(gw, co, ci).noalias() += gym * xm.transpose();
        }
        if (T* gb = grad_sink(b)) {
            for (int c = 0; c < co; ++c) gb[c] += gym.row(c).sum();
        }
        if (T* gx = grad_sink(x)) {
            nn::ECMap<T> wm(w->value.data(), co, ci);
            nn::EMap<T>(gx, ci, cols).noalias() += wm.transpose() * gym;
        }
    });
}

/// Trilinear gather through a precomputed plan (warp or upsample).
template <typename T>
VarPtr<T> sample(const VarPtr<T>& x, std::shared_ptr<const nn::SamplePlan> plan) {
    const auto& xs = x->value.shape();
    if (xs.size() != 4) throw std::invalid_argument("sample: expected (C,X,Y,Z)");
    const int channels = xs[0];
    if (std::int64_t(xs[1]) * xs[2] * xs[3] != plan->in_voxels)
        throw std::invalid_argument("sample: plan does not match input dims");
    Tensor<T> y({channels, plan->out_dims[0], plan->out_dims[1], plan->out_dims[2]});
    nn::sample_forward(x->value.data(), channels, *plan, y.data());
    return make_op<T>(std::move(y), {x}, [x, plan, channels](Var<T>& self) {
        if (T* gx = grad_sink(x)) nn::sample_backward(*plan, channels, self.grad.data(), gx);
    });
}

/// Depth-distribution splat: feat (C,h,w) and probs (D,h,w) scatter into the
/// voxel grid through the camera plan. Accumulation is summation.
template <typename T>
VarPtr<T> lift_splat(const VarPtr<T>& feat, const VarPtr<T>& probs,
                     std::shared_ptr<const nn::LiftPlan> plan,
                     const std::array<int, 3>& grid_dims) {
    const auto& fs = feat->value.shape();
    const auto& ps = probs->value.shape();
    if (fs.size() != 3 || ps.size() != 3 || fs[1] != plan->feat_h || fs[2] != plan->feat_w ||
        ps[0] != plan->depth_bins || ps[1] != plan->feat_h || ps[2] != plan->feat_w)
        throw std::invalid_argument("lift_splat: shapes do not match the camera plan");
    if (std::int64_t(grid_dims[0]) * grid_dims[1] * grid_dims[2] != plan->num_voxels)
        throw std::invalid_argument("lift_splat: grid dims do not match the camera plan");
    const int channels = fs[0];
    Tensor<T> y({channels, grid_dims[0], grid_dims[1], grid_dims[2]});
    nn::lift_splat_forward(feat->value.data(), probs->value.data(), channels, *plan, y.data());
    return make_op<T>(std::move(y), {feat, probs}, [feat, probs, plan, channels](Var<T>& self) {
        nn::lift_splat_backward(feat->value.data(), probs->value.data(), channels, *plan,
                                self.grad.data(), grad_sink(feat), grad_sink(probs));
    });
}

/// Places per-cell feature vectors into a dense zero grid. Cell indices must
/// be unique.
template <typename T>
VarPtr<T> scatter_cells(const VarPtr<T>& cell_feat,
                        std::shared_ptr<const std::vector<std::int64_t>> cell_index,
                        const std::array<int, 3>& dims) {
    const auto& fs = cell_feat->value.shape();
    if (fs.size() != 2 || static_cast<std::size_t>(fs[0]) != cell_index->size())
        throw std::invalid_argument("scatter_cells: cell count mismatch");
    const int n = fs[0], channels = fs[1];
    const std::int64_t vg = std::int64_t(dims[0]) * dims[1] * dims[2];
    {
        std::vector<std::int64_t> sorted(*cell_index);
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i + 1 < sorted.size(); ++i)
            if (sorted[i] == sorted[i + 1])
                throw std::invalid_argument("scatter_cells: duplicate cell index " +
                                            std::to_string(sorted[i]));
        for (std::int64_t v : sorted)
            if (v < 0 || v >= vg)
                throw std::invalid_argument("scatter_cells: cell index out of range");
    }
    Tensor<T> y({channels, dims[0], dims[1], dims[2]});
    for (int i = 0; i < n; ++i) {
        const std::int64_t v = (*cell_index)[static_cast<std::size_t>(i)];
        for (int c = 0; c < channels; ++c)
            y[std::int64_t(c) * vg + v] = cell_feat->value[std::int64_t(i) * channels + c];
    }
    return make_op<T>(std::move(y), {cell_feat},
                      [cell_feat, cell_index, n, channels, vg](Var<T>& self) {
                          T* gx = grad_sink(cell_feat);
                          if (!gx) return;
                          for (int i = 0; i < n; ++i) {
                              const std::int64_t v = (*cell_index)[static_cast<std::size_t>(i)];
                              for (int c = 0; c < channels; ++c)
                                  gx[std::int64_t(i) * channels + c] +=
                                      self.grad[std::int64_t(c) * vg + v];
                          }
                      });
}

/// Simplified PointNet cell encoder: shared linear + ReLU per point, max-pool
/// over the points of each cell. Empty cells yield zeros.
/// points (ncells, P, F) is plain data; gradients flow to w/b only.
template <typename T>
VarPtr<T> pointnet_max(std::shared_ptr<const Tensor<T>> points,
                       std::shared_ptr<const std::vector<int>> counts, const VarPtr<T>& w,
                       const VarPtr<T>& b) {
    const auto& ps = points->shape();
    const auto& ws = w->value.shape();
    if (ps.size() != 3 || ws.size() != 2 || ws[1] != ps[2])
        throw std::invalid_argument("pointnet_max: shape mismatch");
    const int ncells = ps[0], slots = ps[1], fdim = ps[2], channels = ws[0];
    if (static_cast<std::size_t>(ncells) != counts->size())
        throw std::invalid_argument("pointnet_max: counts size mismatch");
    Tensor<T> y({ncells, channels});
    auto argmax = std::make_shared<std::vector<std::int32_t>>(
        static_cast<std::size_t>(ncells) * channels, -1);
    for (int i = 0; i < ncells; ++i) {
        const int cnt = (*counts)[static_cast<std::size_t>(i)];
        for (int c = 0; c < channels; ++c) {
            T best = T(0);
            std::int32_t best_slot = -1;
            for (int s = 0; s < cnt && s < slots; ++s) {
                const T* pt = points->data() + (std::int64_t(i) * slots + s) * fdim;
                double pre = static_cast<double>(b->value[c]);
                for (int f = 0; f < fdim; ++f)
                    pre += static_cast<double>(w->value[std::int64_t(c) * fdim + f]) *
                           static_cast<double>(pt[f]);
                const T post = pre > 0 ? static_cast<T>(pre) : T(0);
                if (post > best) {
                    best = post;
                    best_slot = s;
                }
            }
            y[std::int64_t(i) * channels + c] = best;
            (*argmax)[static_cast<std::size_t>(std::int64_t(i) * channels + c)] = best_slot;
        }
    }
    return make_op<T>(std::move(y), {w, b},
                      [points, w, b, argmax, ncells, slots, fdim, channels](Var<T>& self) {
                          T* gw = grad_sink(w);
                          T* gb = grad_sink(b);
                          for (int i = 0; i < ncells; ++i)
                              for (int c = 0; c < channels; ++c) {
                                  const std::int32_t s = (*argmax)[static_cast<std::size_t>(
                                      std::int64_t(i) * channels + c)];
                                  if (s < 0) continue;  // empty cell or all-negative activations
                                  const T g = self.grad[std::int64_t(i) * channels + c];
                                  if (g == T(0)) continue;
                                  const T* pt =
                                      points->data() + (std::int64_t(i) * slots + s) * fdim;
                                  if (gw)
                                      for (int f = 0; f < fdim; ++f)
                                          gw[std::int64_t(c) * fdim + f] += g * pt[f];
                                  if (gb) gb[c] += g;
                              }
                      });
}

/// Mean cross-entropy of softmaxed logits against integer labels.
/// logits (K, spatial...), labels (spatial...). Optional per-class weights
/// switch the mean to a weight-normalized mean.
template <typename T>
VarPtr<T> cross_entropy_mean(const VarPtr<T>& logits,
                             std::shared_ptr<const Tensor<std::int32_t>> labels,
                             std::shared_ptr<const std::vector<double>> class_weights = nullptr) {
    const auto& ls = logits->value.shape();
    const int k = ls[0];
    std::int64_t spatial = 1;
    for (std::size_t i = 1; i < ls.size(); ++i) spatial *= ls[i];
    if (labels->numel() != spatial)
        throw std::invalid_argument("cross_entropy: label count " +
                                    std::to_string(labels->numel()) +
                                    " does not match logit columns " + std::to_string(spatial));
    if (class_weights && static_cast<int>(class_weights->size()) != k)
        throw std::invalid_argument("cross_entropy: class weight size mismatch");
    double loss = 0, wsum = 0;
    for (std::int64_t v = 0; v < spatial; ++v) {
        const std::int32_t lbl = (*labels)[v];
        if (lbl < 0 || lbl >= k)
            throw std::invalid_argument("cross_entropy: label " + std::to_string(lbl) +
                                        " out of range [0," + std::to_string(k) + ")");
        double m = -1e300;
        for (int c = 0; c < k; ++c)
            m = std::max(m, static_cast<double>(logits->value[std::int64_t(c) * spatial + v]));
        double s = 0;
        for (int c = 0; c < k; ++c)
            s += std::exp(static_cast<double>(logits->value[std::int64_t(c) * spatial + v]) - m);
        const double lse = m + std::log(s);
        const double wv = class_weights ? (*class_weights)[static_cast<std::size_t>(lbl)] : 1.0;
        loss += wv * (lse - static_cast<double>(logits->value[std::int64_t(lbl) * spatial + v]));
        wsum += wv;
    }
    if (wsum <= 0) throw std::invalid_argument("cross_entropy: zero total weight");
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(loss / wsum));
    return make_op<T>(std::move(out), {logits},
                      [logits, labels, class_weights, k, spatial, wsum](Var<T>& self) {
                          T* gx = grad_sink(logits);
                          if (!gx) return;
                          const double gscale = static_cast<double>(self.grad[0]) / wsum;
                          for (std::int64_t v = 0; v < spatial; ++v) {
                              const std::int32_t lbl = (*labels)[v];
                              const double wv =
                                  class_weights ? (*class_weights)[static_cast<std::size_t>(lbl)]
                                                : 1.0;
                              double m = -1e300;
                              for (int c = 0; c < k; ++c)
                                  m = std::max(m, static_cast<double>(
                                                      logits->value[std::int64_t(c) * spatial + v]));
                              double s = 0;
                              for (int c = 0; c < k; ++c)
                                  s += std::exp(static_cast<double>(
                                                    logits->value[std::int64_t(c) * spatial + v]) -
                                                m);
                              for (int c = 0; c < k; ++c) {
                                  const double p =
                                      std::exp(static_cast<double>(
                                                   logits->value[std::int64_t(c) * spatial + v]) -
                                               m) /
                                      s;
                                  const double target = (c == lbl) ? 1.0 : 0.0;
                                  gx[std::int64_t(c) * spatial + v] +=
                                      static_cast<T>(gscale * wv * (p - target));
                              }
                          }
                      });
}

}  // namespace ag

// ---------------------------------------------------------------------------
// Parameter registry, initialization, optimizer
// ---------------------------------------------------------------------------

namespace nn {

template <typename T>
struct ParamEntry {
    std::string name;
    std::string group;
    ag::VarPtr<T> var;
    Tensor<T> adam_m;
    Tensor<T> adam_v;
};

/// Owns every learnable tensor of a model, keyed by name and tagged with a
/// parameter group. Group tags drive the branch-isolation checks and the
/// checkpoint layout.
template <typename T>
class ParamRegistry {
public:
    ag::VarPtr<T> create(const std::string& name, const std::string& group, Tensor<T> init) {
        for (const auto& e : entries_)
            if (e.name == name) throw std::invalid_argument("duplicate parameter name " + name);
        ParamEntry<T> e;
        e.name = name;
        e.group = group;
        e.var = ag::make_param(std::move(init));
        e.adam_m = Tensor<T>(e.var->value.shape());
        e.adam_v = Tensor<T>(e.var->value.shape());
        entries_.push_back(std::move(e));
        return entries_.back().var;
    }

    std::vector<ParamEntry<T>>& entries() { return entries_; }
    const std::vector<ParamEntry<T>>& entries() const { return entries_; }

    const ParamEntry<T>& find(const std::string& name) const {
        for (const auto& e : entries_)
            if (e.name == name) return e;
        throw std::invalid_argument("unknown parameter " + name);
    }

    std::int64_t total_count() const {
        std::int64_t n = 0;
        for (const auto& e : entries_) n += e.var->value.numel();
        return n;
    }

    void zero_grads() {
        for (auto& e : entries_) {
            if (e.var->grad.same_shape(e.var->value))
                e.var->grad.fill(T(0));
            e.var->grad_ready = false;
        }
    }

private:
    std::vector<ParamEntry<T>> entries_;
};

template <typename T>
struct Initializer {
    Rng rng;

    explicit Initializer(std::uint64_t seed) : rng(seed) {}

    Tensor<T> kaiming(std::vector<int> shape, std::int64_t fan_in) {
        Tensor<T> t(std::move(shape));
        const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (std::int64_t i = 0; i < t.numel(); ++i)
            t[i] = static_cast<T>(rng.normal(0.0, std));
        return t;
    }

    Tensor<T> zeros(std::vector<int> shape) { return Tensor<T>(std::move(shape)); }

    Tensor<T> ones(std::vector<int> shape) { return Tensor<T>::full(std::move(shape), T(1)); }
};

/// Adam with optional cosine decay handled by the caller through `lr`.
/// Parameters whose gradient never materialized this step are left untouched,
/// so disabled branches cannot drift.
template <typename T>
class Adam {
public:
    Adam(ParamRegistry<T>* reg, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : reg_(reg), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (auto& e : reg_->entries()) {
            if (!e.var->grad_ready) continue;
            const std::int64_t n = e.var->value.numel();
            for (std::int64_t i = 0; i < n; ++i) {
                const double g = static_cast<double>(e.var->grad[i]);
                const double m = beta1_ * static_cast<double>(e.adam_m[i]) + (1 - beta1_) * g;
                const double v = beta2_ * static_cast<double>(e.adam_v[i]) + (1 - beta2_) * g * g;
                e.adam_m[i] = static_cast<T>(m);
                e.adam_v[i] = static_cast<T>(v);
                const double mhat = m / bc1;
                const double vhat = v / bc2;
                e.var->value[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

    void zero_grad() { reg_->zero_grads(); }

    std::int64_t steps_taken() const { return t_; }

private:
    ParamRegistry<T>* reg_;
    double beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Layer building blocks
// ---------------------------------------------------------------------------

template <typename T>
struct Conv2dLayer {
    ag::VarPtr<T> w, b;
    int stride = 1;

    Conv2dLayer() = default;
    Conv2dLayer(ParamRegistry<T>& reg, Initializer<T>& init, const std::string& name,
                const std::string& group, int ci, int co, int k, int stride_)
        : stride(stride_) {
        w = reg.create(name + ".w", group, init.kaiming({co, ci, k, k}, std::int64_t(ci) * k * k));
        b = reg.create(name + ".b", group, init.zeros({co}));
    }

    ag::VarPtr<T> operator()(const ag::VarPtr<T>& x) const { return ag::conv2d(x, w, b, stride); }
};

template <typename T>
struct Conv3dLayer {
    ag::VarPtr<T> w, b;
    int stride = 1;

    Conv3dLayer() = default;
    Conv3dLayer(ParamRegistry<T>& reg, Initializer<T>& init, const std::string& name,
                const std::string& group, int ci, int co, int k, int stride_)
        : stride(stride_) {
        w = reg.create(name + ".w", group,
                       init.kaiming({co, ci, k, k, k}, std::int64_t(ci) * k * k * k));
        b = reg.create(name + ".b", group, init.zeros({co}));
    }

    ag::VarPtr<T> operator()(const ag::VarPtr<T>& x) const { return ag::conv3d(x, w, b, stride); }
};

template <typename T>
struct GroupNormLayer {
    ag::VarPtr<T> gamma, beta;
    int groups = 1;

    GroupNormLayer() = default;
    GroupNormLayer(ParamRegistry<T>& reg, Initializer<T>& init, const std::string& name,
                   const std::string& group, int channels)
        : groups(norm_groups_for(channels)) {
        gamma = reg.create(name + ".gamma", group, init.ones({channels}));
        beta = reg.create(name + ".beta", group, init.zeros({channels}));
    }

    ag::VarPtr<T> operator()(const ag::VarPtr<T>& x) const {
        return ag::group_norm(x, gamma, beta, groups);
    }
};

/// conv3d -> norm -> ReLU, the fusion-layer/FPN building block.
template <typename T>
struct ConvNormAct3d {
    Conv3dLayer<T> conv;
    GroupNormLayer<T> norm;

    ConvNormAct3d() = default;
    ConvNormAct3d(ParamRegistry<T>& reg, Initializer<T>& init, const std::string& name,
                  const std::string& group, int ci, int co, int k, int stride)
        : conv(reg, init, name + ".conv", group, ci, co, k, stride),
          norm(reg, init, name + ".norm", group, co) {}

    ag::VarPtr<T> operator()(const ag::VarPtr<T>& x) const { return ag::relu(norm(conv(x))); }
};

}  // namespace nn
}  // namespace teocc
