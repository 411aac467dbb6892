#pragma once

// The full detection pipeline: a Siamese two-stream encoder shared between
// RGB and depth, dynamic message propagation on the two coarsest distinct
// levels, channel compression, cross-modal fusion, a densely linked
// feature-fusion decoder, and three sigmoid heads (full-resolution final map
// plus two coarse global maps). Includes the composite training loss and the
// optimizer step.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "dmpnet/adam.hpp"
#include "dmpnet/dmp.hpp"
#include "dmpnet/ops.hpp"
#include "dmpnet/rng.hpp"

namespace dmpnet {

// denominators of the six side-output scales relative to the input
inline constexpr std::array<int, 6> kLevelScaleDenom = {1, 2, 4, 8, 16, 16};

struct NetworkConfig {
    int input_size = 64;
    std::array<int, 6> encoder_widths = {8, 12, 16, 16, 16, 16};
    int fcc_channels = 16;               // unified channel count after compression
    std::vector<int> dmp_levels = {4, 5};  // encoder levels refined by message passing
    DmpConfig dmp;                       // placement-independent settings; channels
                                         // are taken from the host level's width
    enum class Lambda { automatic, fixed };
    Lambda lambda_mode = Lambda::automatic;
    float lambda_fixed = 256.f;
    enum class Modality { both, rgb_only, depth_only };
    Modality modality = Modality::both;

    int level_size(int level) const { return input_size / kLevelScaleDenom[level - 1]; }

    DmpConfig dmp_config_for(int level) const {
        DmpConfig c = dmp;
        c.channels = encoder_widths[level - 1];
        return c;
    }

    float lambda_for(int full_h, int global_h) const {
        if (lambda_mode == Lambda::fixed) return lambda_fixed;
        const float ratio = static_cast<float>(full_h) / static_cast<float>(global_h);
        return ratio * ratio;
    }

    void validate() const {
        require(input_size >= 16 && input_size % 16 == 0,
                "network: input_size must be a positive multiple of 16, got " +
                    std::to_string(input_size));
        for (int w : encoder_widths)
            require(w >= 1, "network: encoder widths must be positive");
        require(fcc_channels >= 4 && fcc_channels % 4 == 0,
                "network: fcc_channels must be a positive multiple of 4, got " +
                    std::to_string(fcc_channels));
        for (int l : dmp_levels)
            require(l >= 1 && l <= 6, "network: dmp level " + std::to_string(l) +
                                          " outside 1..6");
        for (int l : dmp.depth_levels)
            require(l >= 1 && l <= 6, "network: dmp depth level " + std::to_string(l) +
                                          " outside 1..6");
        // Message passing mixes the host level's RGB features with every listed
        // depth level's features in one channel space, so those widths must agree.
        for (int l : dmp_levels) {
            const int c = encoder_widths[l - 1];
            for (int d : dmp.depth_levels)
                require(encoder_widths[d - 1] == c,
                        "network: dmp at level " + std::to_string(l) + " (width " +
                            std::to_string(c) + ") uses depth level " +
                            std::to_string(d) + " of width " +
                            std::to_string(encoder_widths[d - 1]) +
                            "; these widths must be equal");
            dmp_config_for(l).validate();
        }
    }
};

template <class S>
struct ConvParamT {
    Tensor<S> w, b;
};

template <class S>
struct NetworkParamsT {
    // shared encoder (Siamese): two 3x3 convs per level
    std::vector<ConvParamT<S>> encoder_conv1, encoder_conv2;  // six each
    // 1x1 channel compression per level and stream; depth entries exist only
    // for levels outside the message-passing set (those levels' depth features
    // enter through the DMP instead)
    std::vector<ConvParamT<S>> fcc_rgb;                 // six
    std::vector<std::optional<ConvParamT<S>>> fcc_depth;  // six, sparse
    std::vector<DmpParamsT<S>> dmps;  // parallel to cfg.dmp_levels
    // feature-fusion block: four branch convs per level
    std::vector<ConvParamT<S>> ff_b1, ff_b3, ff_b5, ff_pool;  // six each
    ConvParamT<S> head_rgb, head_depth, head_final;
};

using NetworkParamsF = NetworkParamsT<float>;

namespace detail {

template <class S>
ConvParamT<S> zero_conv(int out_c, int in_c, int k) {
    ConvParamT<S> p{Tensor<S>::zeros(Shape{out_c, in_c, k, k}),
                    Tensor<S>::zeros(Shape{1, out_c, 1, 1})};
    p.w.set_requires_grad(true);
    p.b.set_requires_grad(true);
    return p;
}

inline bool is_dmp_level(const NetworkConfig& cfg, int level) {
    for (int l : cfg.dmp_levels)
        if (l == level) return true;
    return false;
}

}  // namespace detail

// Zero-valued parameters of the right shapes with gradient buffers attached.
template <class S>
NetworkParamsT<S> make_network_params(const NetworkConfig& cfg) {
    cfg.validate();
    NetworkParamsT<S> p;
    for (int l = 1; l <= 6; ++l) {
        const int in_c = l == 1 ? 3 : cfg.encoder_widths[l - 2];
        const int out_c = cfg.encoder_widths[l - 1];
        p.encoder_conv1.push_back(detail::zero_conv<S>(out_c, in_c, 3));
        p.encoder_conv2.push_back(detail::zero_conv<S>(out_c, out_c, 3));
        p.fcc_rgb.push_back(detail::zero_conv<S>(cfg.fcc_channels, out_c, 1));
        if (detail::is_dmp_level(cfg, l))
            p.fcc_depth.push_back(std::nullopt);
        else
            p.fcc_depth.push_back(detail::zero_conv<S>(cfg.fcc_channels, out_c, 1));
        const int quarter = cfg.fcc_channels / 4;
        p.ff_b1.push_back(detail::zero_conv<S>(quarter, cfg.fcc_channels, 1));
        p.ff_b3.push_back(detail::zero_conv<S>(quarter, cfg.fcc_channels, 3));
        p.ff_b5.push_back(detail::zero_conv<S>(quarter, cfg.fcc_channels, 5));
        p.ff_pool.push_back(detail::zero_conv<S>(quarter, cfg.fcc_channels, 1));
    }
    for (int l : cfg.dmp_levels) p.dmps.push_back(make_dmp_params<S>(cfg.dmp_config_for(l)));
    p.head_rgb = detail::zero_conv<S>(1, cfg.encoder_widths[5], 1);
    p.head_depth = detail::zero_conv<S>(1, cfg.encoder_widths[5], 1);
    p.head_final = detail::zero_conv<S>(1, cfg.fcc_channels, 1);
    return p;
}

// Visits every parameter with its stable checkpoint name, in a fixed order.
template <class S, class F>
void visit_params(NetworkParamsT<S>& p, const NetworkConfig& cfg, F&& f) {
    for (int l = 1; l <= 6; ++l) {
        const std::string lv = "encoder.l" + std::to_string(l);
        f(lv + ".conv1.weight", p.encoder_conv1[l - 1].w);
        f(lv + ".conv1.bias", p.encoder_conv1[l - 1].b);
        f(lv + ".conv2.weight", p.encoder_conv2[l - 1].w);
        f(lv + ".conv2.bias", p.encoder_conv2[l - 1].b);
    }
    for (int l = 1; l <= 6; ++l) {
        const std::string lv = "l" + std::to_string(l);
        f("fcc.rgb." + lv + ".weight", p.fcc_rgb[l - 1].w);
        f("fcc.rgb." + lv + ".bias", p.fcc_rgb[l - 1].b);
        if (p.fcc_depth[l - 1]) {
            f("fcc.depth." + lv + ".weight", p.fcc_depth[l - 1]->w);
            f("fcc.depth." + lv + ".bias", p.fcc_depth[l - 1]->b);
        }
    }
    for (std::size_t i = 0; i < cfg.dmp_levels.size(); ++i)
        visit_dmp_params(p.dmps[i], cfg.dmp_config_for(cfg.dmp_levels[i]),
                         "dmp.l" + std::to_string(cfg.dmp_levels[i]) + ".", f);
    for (int l = 1; l <= 6; ++l) {
        const std::string lv = "ff.l" + std::to_string(l);
        f(lv + ".branch1.weight", p.ff_b1[l - 1].w);
        f(lv + ".branch1.bias", p.ff_b1[l - 1].b);
        f(lv + ".branch3.weight", p.ff_b3[l - 1].w);
        f(lv + ".branch3.bias", p.ff_b3[l - 1].b);
        f(lv + ".branch5.weight", p.ff_b5[l - 1].w);
        f(lv + ".branch5.bias", p.ff_b5[l - 1].b);
        f(lv + ".pool.weight", p.ff_pool[l - 1].w);
        f(lv + ".pool.bias", p.ff_pool[l - 1].b);
    }
    f("head.rgb.weight", p.head_rgb.w);
    f("head.rgb.bias", p.head_rgb.b);
    f("head.depth.weight", p.head_depth.w);
    f("head.depth.bias", p.head_depth.b);
    f("head.final.weight", p.head_final.w);
    f("head.final.bias", p.head_final.b);
}

// Kaiming-uniform fan-in initialization for convolution kernels, zeros for
// biases. Walk, affinity and weight kernels of the message-passing modules
// and the gates alpha start at zero, so those modules begin as exact
// identities. Note that the zero start is also a stationary point: with the
// gate and the message both zero, none of those kernels receives gradient,
// so plain training keeps the message path inert.
template <class S>
void init_network_params(NetworkParamsT<S>& p, const NetworkConfig& cfg,
                         std::uint64_t seed) {
    Rng rng(seed);
    visit_params(p, cfg, [&](const std::string& name, Tensor<S>& t) {
        const bool is_dmp = name.rfind("dmp.", 0) == 0;
        const bool is_fuse = is_dmp && name.find(".fuse.") != std::string::npos;
        const bool is_bias = name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0;
        const bool is_alpha = name.size() >= 6 && name.compare(name.size() - 6, 6, ".alpha") == 0;
        if (is_bias || is_alpha || (is_dmp && !is_fuse)) {
            for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = S(0);
            return;
        }
        const Shape s = t.shape();
        const double fan_in = static_cast<double>(s.c) * s.h * s.w;
        const double bound = std::sqrt(6.0 / fan_in);
        for (std::int64_t i = 0; i < t.numel(); ++i)
            t.data()[i] = static_cast<S>(rng.uniform(-bound, bound));
    });
}

// ---------------------------------------------------------------------------
// forward pieces

// Six side outputs from one 3-channel stream; levels downsample by two when
// entering levels 2..5 and keep the previous extent entering level 6.
template <class S>
std::vector<Tensor<S>> encoder_forward(const Tensor<S>& image,
                                       const NetworkParamsT<S>& p,
                                       const NetworkConfig& cfg) {
    const Shape is = image.shape();
    require(is.c == 3, "encoder: expected a 3-channel input, got " + std::to_string(is.c));
    require(is.h == cfg.input_size && is.w == cfg.input_size,
            "encoder: input is " + std::to_string(is.h) + "x" + std::to_string(is.w) +
                " but the configured size is " + std::to_string(cfg.input_size));

    std::vector<Tensor<S>> sides;
    Tensor<S> h = image;
    for (int l = 1; l <= 6; ++l) {
        if (l >= 2 && l <= 5) h = maxpool2d(h, 2, 2);
        h = relu(conv2d(h, p.encoder_conv1[l - 1].w, p.encoder_conv1[l - 1].b, {.padding = 1}));
        h = relu(conv2d(h, p.encoder_conv2[l - 1].w, p.encoder_conv2[l - 1].b, {.padding = 1}));
        sides.push_back(h);
    }
    return sides;
}

// 1x1 compression to the unified channel count, relu-activated.
template <class S>
Tensor<S> fcc_forward(const Tensor<S>& x, const ConvParamT<S>& k) {
    return relu(conv2d(x, k.w, k.b));
}

// elementwise a + b + a*b
template <class S>
Tensor<S> cross_modal_fuse(const Tensor<S>& a, const Tensor<S>& b) {
    return add(add(a, b), mul(a, b));
}

// Four parallel branches (1x1, 3x3, 5x5, 3x3-maxpool + 1x1), each to a
// quarter of the channels with relu, concatenated back together.
template <class S>
Tensor<S> ff_forward(const Tensor<S>& x, const NetworkParamsT<S>& p, int level) {
    const int i = level - 1;
    Tensor<S> b1 = relu(conv2d(x, p.ff_b1[i].w, p.ff_b1[i].b));
    Tensor<S> b3 = relu(conv2d(x, p.ff_b3[i].w, p.ff_b3[i].b, {.padding = 1}));
    Tensor<S> b5 = relu(conv2d(x, p.ff_b5[i].w, p.ff_b5[i].b, {.padding = 2}));
    Tensor<S> bp = relu(conv2d(maxpool2d(x, 3, 1, 1), p.ff_pool[i].w, p.ff_pool[i].b));
    return concat_channels<S>({b1, b3, b5, bp});
}

// Brings a feature map to the target extent: stride-matched max pooling when
// shrinking, bilinear interpolation when growing.
template <class S>
Tensor<S> align_spatial(const Tensor<S>& x, int th, int tw) {
    const Shape s = x.shape();
    if (s.h == th && s.w == tw) return x;
    if (s.h > th) {
        require(s.h % th == 0 && s.w % tw == 0 && s.h / th == s.w / tw,
                "align: cannot pool " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                    " down to " + std::to_string(th) + "x" + std::to_string(tw));
        const int f = s.h / th;
        return maxpool2d(x, f, f);
    }
    return resize_bilinear(x, th, tw);
}

template <class S>
struct PredictionT {
    Tensor<S> s_final;  // full resolution
    Tensor<S> s_rgb;    // coarsest resolution
    Tensor<S> s_depth;  // coarsest resolution
};

template <class S>
struct NetworkTraceT {
    std::vector<Tensor<S>> rgb_sides, depth_sides;  // six each
    std::vector<Tensor<S>> fused;                   // six, per-level decoder inputs
    std::vector<Tensor<S>> ff_out;                  // six
};

template <class S>
PredictionT<S> predict(const Tensor<S>& rgb, const Tensor<S>& depth3,
                       const NetworkParamsT<S>& p, const NetworkConfig& cfg,
                       NetworkTraceT<S>* trace = nullptr) {
    require(rgb.shape() == depth3.shape(),
            "predict: rgb shape " + rgb.shape().str() + " vs depth shape " +
                depth3.shape().str());

    // modality ablations replace the unused stream with a mid-gray constant
    Tensor<S> rgb_in = rgb, depth_in = depth3;
    if (cfg.modality == NetworkConfig::Modality::rgb_only)
        depth_in = Tensor<S>::full(depth3.shape(), S(0.5));
    if (cfg.modality == NetworkConfig::Modality::depth_only)
        rgb_in = Tensor<S>::full(rgb.shape(), S(0.5));

    std::vector<Tensor<S>> rgb_sides = encoder_forward(rgb_in, p, cfg);
    std::vector<Tensor<S>> depth_sides = encoder_forward(depth_in, p, cfg);

    // per-level decoder inputs
    std::vector<Tensor<S>> fused;
    for (int l = 1; l <= 6; ++l) {
        if (detail::is_dmp_level(cfg, l)) {
            std::size_t di = 0;
            while (cfg.dmp_levels[di] != l) ++di;
            const DmpConfig dcfg = cfg.dmp_config_for(l);
            const int sz = cfg.level_size(l);
            std::vector<Tensor<S>> aligned;
            for (int d : dcfg.depth_levels)
                aligned.push_back(align_spatial(depth_sides[d - 1], sz, sz));
            Tensor<S> refined = dmp_forward(rgb_sides[l - 1], aligned, p.dmps[di], dcfg);
            fused.push_back(fcc_forward(refined, p.fcc_rgb[l - 1]));
        } else {
            Tensor<S> a = fcc_forward(rgb_sides[l - 1], p.fcc_rgb[l - 1]);
            Tensor<S> b = fcc_forward(depth_sides[l - 1], *p.fcc_depth[l - 1]);
            fused.push_back(cross_modal_fuse(a, b));
        }
    }

    // densely linked decoder, coarsest level first; every level receives the
    // sum of its own fused features and all coarser refined outputs
    std::vector<Tensor<S>> ff_out(6, Tensor<S>(Shape{1, 1, 1, 1}));
    for (int l = 6; l >= 1; --l) {
        Tensor<S> in = fused[l - 1];
        const int sz = cfg.level_size(l);
        for (int coarser = l + 1; coarser <= 6; ++coarser)
            in = add(in, resize_bilinear(ff_out[coarser - 1], sz, sz));
        ff_out[l - 1] = ff_forward(in, p, l);
    }

    PredictionT<S> out{
        sigmoid(conv2d(ff_out[0], p.head_final.w, p.head_final.b)),
        sigmoid(conv2d(rgb_sides[5], p.head_rgb.w, p.head_rgb.b)),
        sigmoid(conv2d(depth_sides[5], p.head_depth.w, p.head_depth.b)),
    };
    if (trace) {
        trace->rgb_sides = std::move(rgb_sides);
        trace->depth_sides = std::move(depth_sides);
        trace->fused = std::move(fused);
        trace->ff_out = std::move(ff_out);
    }
    return out;
}

// ---------------------------------------------------------------------------
// losses

inline constexpr float kBceEps = 1e-7f;

// Cross-entropy summed (not averaged) over pixels; probabilities clamped to
// [eps, 1-eps]. Targets may be soft after downsampling.
template <class S>
Tensor<S> loss_bce(const Tensor<S>& pred, const Tensor<S>& target) {
    require(pred.shape() == target.shape(),
            "loss_bce: prediction shape " + pred.shape().str() + " vs target " +
                target.shape().str());
    const S eps = static_cast<S>(kBceEps);
    Tensor<S> p = clamp(pred, eps, S(1) - eps);
    Tensor<S> pos = mul(target, log(p));
    Tensor<S> one_minus_t = add_scalar(mul_scalar(target, S(-1)), S(1));
    Tensor<S> one_minus_p = add_scalar(mul_scalar(p, S(-1)), S(1));
    Tensor<S> neg = mul(one_minus_t, log(one_minus_p));
    return mul_scalar(sum_all(add(pos, neg)), S(-1));
}

template <class S>
struct LossTermsT {
    Tensor<S> total;
    S final_term, global_term, lambda;
};

// total = L(S_f, G) + lambda * (L(S_r, G_small) + L(S_d, G_small)), with
// G_small the average-pooled ground truth at the global maps' extent and
// lambda the squared resolution ratio unless fixed in the config.
template <class S>
LossTermsT<S> loss_total(const PredictionT<S>& pred, const Tensor<S>& gt,
                         const NetworkConfig& cfg) {
    const Shape gs = gt.shape(), rs = pred.s_rgb.shape();
    require(gs.h == pred.s_final.shape().h && gs.w == pred.s_final.shape().w,
            "loss: ground truth extents " + gs.str() + " do not match the final map " +
                pred.s_final.shape().str());
    require(gs.h % rs.h == 0, "loss: ground truth height " + std::to_string(gs.h) +
                                  " not divisible by global map height " +
                                  std::to_string(rs.h));
    const int factor = gs.h / rs.h;
    Tensor<S> gt_small = factor == 1 ? gt : avgpool2d(gt, factor, factor);

    Tensor<S> l_final = loss_bce(pred.s_final, gt);
    Tensor<S> l_global = add(loss_bce(pred.s_rgb, gt_small), loss_bce(pred.s_depth, gt_small));
    const S lambda = static_cast<S>(cfg.lambda_for(gs.h, rs.h));
    Tensor<S> total = add(l_final, mul_scalar(l_global, lambda));
    return {total, l_final.data()[0], l_global.data()[0], lambda};
}

// ---------------------------------------------------------------------------
// training

struct StepStats {
    float loss_total = 0.f, loss_final = 0.f, loss_global = 0.f;
};

// One optimization step on one (rgb, depth, gt) triple.
inline StepStats train_step(const TensorF& rgb, const TensorF& depth3, const TensorF& gt,
                            NetworkParamsF& params, const NetworkConfig& cfg, Adam& opt) {
    Tape<float> tape;
    StepStats stats;
    {
        TapeScope<float> scope(tape);
        PredictionT<float> pred = predict(rgb, depth3, params, cfg);
        LossTermsT<float> loss = loss_total(pred, gt, cfg);
        stats.loss_total = loss.total.data()[0];
        stats.loss_final = loss.final_term;
        stats.loss_global = loss.global_term;
        require(std::isfinite(stats.loss_total),
                "train_step: non-finite loss (final " + std::to_string(stats.loss_final) +
                    ", global " + std::to_string(stats.loss_global) + ")");
        tape.backward(loss.total);
    }
    std::vector<std::pair<std::string, TensorF>> named;
    visit_params(params, cfg, [&](const std::string& name, TensorF& t) {
        named.emplace_back(name, t);
    });
    opt.step(named);
    return stats;
}

}  // namespace dmpnet
