#pragma once

// Dynamic message propagation over RGB and depth feature graphs.
//
// Each spatial location i is a graph node with the nine-neighborhood
// receptive set R. Walk kernels predict a continuous 2-D offset per node of
// R, so the neighborhood is sampled at deformed, fractional locations via
// bilinear interpolation. Depth features generate per-node affinity vectors
// (one scalar per channel group) and per-node scalar weights; the message at
// i is the affinity- and weight-scaled sum of the sampled neighbor features
// over all nodes and depth levels. The update is a gated residual
// (relu(h + alpha * m)) or a 1x1 convolution over [h, m].

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "dmpnet/ops.hpp"
#include "dmpnet/tensor.hpp"

namespace dmpnet {

// The nine neighborhood offsets in row-major order; index j of every
// K-indexed tensor in this module refers to this enumeration.
inline constexpr int kSampleCount = 9;
inline constexpr std::array<std::array<int, 2>, kSampleCount> kReceptiveSet = {{
    {-1, -1}, {-1, 0}, {-1, 1},
    {0, -1},  {0, 0},  {0, 1},
    {1, -1},  {1, 0},  {1, 1},
}};

struct DmpConfig {
    int channels = 16;       // C: feature channels entering the module
    int sample_count = 9;    // K: size of the receptive set (fixed at 9)
    int group_count = 4;     // G: contiguous channel groups scaled by affinities
    std::vector<int> depth_levels = {3, 4, 5};  // encoder levels feeding depth nodes
    int iterations = 1;                         // T
    std::vector<float> level_weights;           // beta per depth level; empty = all 1
    enum class Fuse { residual, concat };
    Fuse fuse_mode = Fuse::residual;
    bool softmax_affinity = false;  // optional per-group softmax over the K nodes

    int level_count() const { return static_cast<int>(depth_levels.size()); }

    float beta(int level_idx) const {
        return level_weights.empty() ? 1.f : level_weights[level_idx];
    }

    void validate() const {
        require(sample_count == kSampleCount,
                "dmp: sample_count must be 9 (the fixed 3x3 receptive set), got " +
                    std::to_string(sample_count));
        require(channels >= 1 && group_count >= 1 && channels % group_count == 0,
                "dmp: channels " + std::to_string(channels) +
                    " not divisible by group_count " + std::to_string(group_count));
        require(iterations >= 1, "dmp: iterations must be >= 1");
        require(!depth_levels.empty(), "dmp: depth_levels must not be empty");
        require(level_weights.empty() ||
                    level_weights.size() == depth_levels.size(),
                "dmp: level_weights count " + std::to_string(level_weights.size()) +
                    " does not match depth level count " +
                    std::to_string(depth_levels.size()));
    }
};

template <class S>
struct DmpParamsT {
    // walk kernels: 3x3 convs producing 2K offset channels, pairs
    // (2j, 2j+1) = (row, col) walk for node j
    Tensor<S> rgb_walk_w, rgb_walk_b;
    std::vector<Tensor<S>> depth_walk_w, depth_walk_b;  // one per depth level
    // affinity (K*G channels) and node-weight (K channels) kernels per level
    std::vector<Tensor<S>> affinity_w, affinity_b;
    std::vector<Tensor<S>> weight_w, weight_b;
    Tensor<S> alpha;  // residual message gate, scalar
    // concat mode only: 1x1 fuse conv from 2C to C
    std::optional<Tensor<S>> fuse_w, fuse_b;
};

using DmpParamsF = DmpParamsT<float>;

// All-zero parameters of the right shapes, ready for gradient tracking.
// With these values the module is an exact identity in residual mode.
template <class S>
DmpParamsT<S> make_dmp_params(const DmpConfig& cfg) {
    cfg.validate();
    const int C = cfg.channels, K = cfg.sample_count, G = cfg.group_count;
    auto grad_zeros = [](Shape s) {
        Tensor<S> t = Tensor<S>::zeros(s);
        t.set_requires_grad(true);
        return t;
    };
    DmpParamsT<S> p;
    p.rgb_walk_w = grad_zeros(Shape{2 * K, C, 3, 3});
    p.rgb_walk_b = grad_zeros(Shape{1, 2 * K, 1, 1});
    for (int l = 0; l < cfg.level_count(); ++l) {
        p.depth_walk_w.push_back(grad_zeros(Shape{2 * K, C, 3, 3}));
        p.depth_walk_b.push_back(grad_zeros(Shape{1, 2 * K, 1, 1}));
        p.affinity_w.push_back(grad_zeros(Shape{K * G, C, 3, 3}));
        p.affinity_b.push_back(grad_zeros(Shape{1, K * G, 1, 1}));
        p.weight_w.push_back(grad_zeros(Shape{K, C, 3, 3}));
        p.weight_b.push_back(grad_zeros(Shape{1, K, 1, 1}));
    }
    p.alpha = grad_zeros(Shape{1, 1, 1, 1});
    if (cfg.fuse_mode == DmpConfig::Fuse::concat) {
        p.fuse_w = grad_zeros(Shape{C, 2 * C, 1, 1});
        p.fuse_b = grad_zeros(Shape{1, C, 1, 1});
    }
    return p;
}

// Visits every parameter tensor with a stable name, e.g. prefix
// "dmp.l4." yields "dmp.l4.affinity.l5.weight". Order is deterministic.
template <class S, class F>
void visit_dmp_params(DmpParamsT<S>& p, const DmpConfig& cfg,
                      const std::string& prefix, F&& f) {
    f(prefix + "rgb_walk.weight", p.rgb_walk_w);
    f(prefix + "rgb_walk.bias", p.rgb_walk_b);
    for (int l = 0; l < cfg.level_count(); ++l) {
        const std::string lv = "l" + std::to_string(cfg.depth_levels[l]);
        f(prefix + "depth_walk." + lv + ".weight", p.depth_walk_w[l]);
        f(prefix + "depth_walk." + lv + ".bias", p.depth_walk_b[l]);
        f(prefix + "affinity." + lv + ".weight", p.affinity_w[l]);
        f(prefix + "affinity." + lv + ".bias", p.affinity_b[l]);
        f(prefix + "weight." + lv + ".weight", p.weight_w[l]);
        f(prefix + "weight." + lv + ".bias", p.weight_b[l]);
    }
    f(prefix + "alpha", p.alpha);
    if (p.fuse_w) {
        f(prefix + "fuse.weight", *p.fuse_w);
        f(prefix + "fuse.bias", *p.fuse_b);
    }
}

// Raw 3x3 conv producing the walk field; channel pairs (2j, 2j+1) hold the
// (row, col) walk of receptive node j.
template <class S>
Tensor<S> compute_walks(const Tensor<S>& features, const Tensor<S>& kernel,
                        const Tensor<S>& bias) {
    require(kernel.shape().n == 2 * kSampleCount,
            "compute_walks: kernel produces " + std::to_string(kernel.shape().n) +
                " channels, expected " + std::to_string(2 * kSampleCount));
    return conv2d(features, kernel, bias, {.padding = 1});
}

// Reads features at the deformed neighborhood: node j of location (y, x) is
// sampled at (y, x) + R[j] + walk_j, bilinearly with zero padding. Output
// channels are node-major: channel j*C + c.
template <class S>
Tensor<S> sample_nodes(const Tensor<S>& features, const Tensor<S>& walks) {
    const Shape fs = features.shape(), ws = walks.shape();
    require(ws.c == 2 * kSampleCount,
            "sample_nodes: walk field has " + std::to_string(ws.c) +
                " channels, expected " + std::to_string(2 * kSampleCount));
    require(ws.n == fs.n && ws.h == fs.h && ws.w == fs.w,
            "sample_nodes: walk extents " + ws.str() + " do not match features " +
                fs.str());

    std::vector<Tensor<S>> nodes;
    nodes.reserve(kSampleCount);
    for (int j = 0; j < kSampleCount; ++j) {
        Tensor<S> base(Shape{fs.n, 2, fs.h, fs.w});
        for (int n = 0; n < fs.n; ++n)
            for (int y = 0; y < fs.h; ++y)
                for (int x = 0; x < fs.w; ++x) {
                    base.at(n, 0, y, x) = static_cast<S>(y + kReceptiveSet[j][0]);
                    base.at(n, 1, y, x) = static_cast<S>(x + kReceptiveSet[j][1]);
                }
        Tensor<S> coords = add(slice_channels(walks, 2 * j, 2), base);
        nodes.push_back(grid_sample(features, coords));
    }
    return concat_channels(nodes);
}

// Affinity (K*G channels, node-major: channel j*G + g) and node weights
// (K channels) from a depth feature map. Raw conv outputs.
template <class S>
std::pair<Tensor<S>, Tensor<S>> depth_affinity_weights(
    const Tensor<S>& depth_features, const Tensor<S>& affinity_kernel,
    const Tensor<S>& affinity_bias, const Tensor<S>& weight_kernel,
    const Tensor<S>& weight_bias, int group_count) {
    require(affinity_kernel.shape().n == kSampleCount * group_count,
            "depth_affinity_weights: affinity kernel produces " +
                std::to_string(affinity_kernel.shape().n) + " channels, expected " +
                std::to_string(kSampleCount * group_count));
    require(weight_kernel.shape().n == kSampleCount,
            "depth_affinity_weights: weight kernel produces " +
                std::to_string(weight_kernel.shape().n) + " channels, expected " +
                std::to_string(kSampleCount));
    return {conv2d(depth_features, affinity_kernel, affinity_bias, {.padding = 1}),
            conv2d(depth_features, weight_kernel, weight_bias, {.padding = 1})};
}

// Softmax over the K nodes separately for every group channel g, batch item
// and location. Input layout is the affinity layout [N, K*G, H, W].
template <class S>
Tensor<S> softmax_groups(const Tensor<S>& a, int group_count) {
    const Shape as = a.shape();
    require(as.c == kSampleCount * group_count,
            "softmax_groups: " + std::to_string(as.c) + " channels but expected " +
                std::to_string(kSampleCount * group_count));
    const int G = group_count;
    const std::int64_t plane = static_cast<std::int64_t>(as.h) * as.w;
    const std::int64_t item = static_cast<std::int64_t>(as.c) * plane;

    Tensor<S> out(as);
    for (int n = 0; n < as.n; ++n)
        for (int g = 0; g < G; ++g)
            for (std::int64_t i = 0; i < plane; ++i) {
                S mx = a.data()[n * item + g * plane + i];
                for (int j = 1; j < kSampleCount; ++j)
                    mx = std::max(mx, a.data()[n * item + (j * G + g) * plane + i]);
                S denom = S(0);
                for (int j = 0; j < kSampleCount; ++j) {
                    const std::int64_t idx = n * item + (j * G + g) * plane + i;
                    const S e = std::exp(a.data()[idx] - mx);
                    out.data()[idx] = e;
                    denom += e;
                }
                for (int j = 0; j < kSampleCount; ++j)
                    out.data()[n * item + (j * G + g) * plane + i] /= denom;
            }

    if (auto* tape = detail::taping_for<S>({&a})) {
        out.set_requires_grad(true);
        tape->watch(a);
        tape->watch(out);
        auto ov = out.values_ptr();
        auto ag = a.grad_ptr(), og = out.grad_ptr();
        const int batch = as.n;
        tape->record([ov, ag, og, plane, item, batch, G] {
            for (int n = 0; n < batch; ++n)
                for (int g = 0; g < G; ++g)
                    for (std::int64_t i = 0; i < plane; ++i) {
                        S dot = S(0);
                        for (int j = 0; j < kSampleCount; ++j) {
                            const std::int64_t idx = n * item + (j * G + g) * plane + i;
                            dot += (*og)[idx] * (*ov)[idx];
                        }
                        for (int j = 0; j < kSampleCount; ++j) {
                            const std::int64_t idx = n * item + (j * G + g) * plane + i;
                            (*ag)[idx] += (*ov)[idx] * ((*og)[idx] - dot);
                        }
                    }
        });
    }
    return out;
}

// The message: at every location, sum over depth levels l and nodes j of
//   beta_l * A_l[j, g(c)] * sampled_l[j, c] * W_l[j]
// where g(c) = c / (C/G) indexes the contiguous channel group of c.
template <class S>
Tensor<S> message(const std::vector<Tensor<S>>& sampled,
                  const std::vector<Tensor<S>>& affinity,
                  const std::vector<Tensor<S>>& node_weight,
                  const std::vector<S>& beta, int channels, int group_count) {
    const int L = static_cast<int>(sampled.size());
    require(L >= 1, "message: no levels");
    require(static_cast<int>(affinity.size()) == L &&
                static_cast<int>(node_weight.size()) == L &&
                static_cast<int>(beta.size()) == L,
            "message: per-level input counts disagree");
    const int C = channels, G = group_count, K = kSampleCount;
    require(C % G == 0, "message: channels " + std::to_string(C) +
                            " not divisible by groups " + std::to_string(G));
    const int group_size = C / G;

    const Shape s0 = sampled[0].shape();
    const int N = s0.n, H = s0.h, W = s0.w;
    for (int l = 0; l < L; ++l) {
        require(sampled[l].shape() == Shape{N, K * C, H, W},
                "message: sampled level " + std::to_string(l) + " has shape " +
                    sampled[l].shape().str() + ", expected " +
                    Shape{N, K * C, H, W}.str());
        require(affinity[l].shape() == Shape{N, K * G, H, W},
                "message: affinity level " + std::to_string(l) + " has shape " +
                    affinity[l].shape().str() + ", expected " +
                    Shape{N, K * G, H, W}.str());
        require(node_weight[l].shape() == Shape{N, K, H, W},
                "message: node weights level " + std::to_string(l) + " has shape " +
                    node_weight[l].shape().str() + ", expected " +
                    Shape{N, K, H, W}.str());
    }

    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    Tensor<S> out = Tensor<S>::zeros(Shape{N, C, H, W});

    for (int l = 0; l < L; ++l) {
        const S b = beta[l];
        if (b == S(0)) continue;
        for (int n = 0; n < N; ++n) {
            const S* sp = sampled[l].data() + static_cast<std::int64_t>(n) * K * C * plane;
            const S* ap = affinity[l].data() + static_cast<std::int64_t>(n) * K * G * plane;
            const S* wp = node_weight[l].data() + static_cast<std::int64_t>(n) * K * plane;
            S* op = out.data() + static_cast<std::int64_t>(n) * C * plane;
            for (int j = 0; j < K; ++j)
                for (int c = 0; c < C; ++c) {
                    const S* arow = ap + (static_cast<std::int64_t>(j) * G + c / group_size) * plane;
                    const S* srow = sp + (static_cast<std::int64_t>(j) * C + c) * plane;
                    const S* wrow = wp + static_cast<std::int64_t>(j) * plane;
                    S* orow = op + static_cast<std::int64_t>(c) * plane;
                    for (std::int64_t i = 0; i < plane; ++i)
                        orow[i] += b * arow[i] * srow[i] * wrow[i];
                }
        }
    }

    bool any_grad = false;
    for (int l = 0; l < L; ++l)
        any_grad = any_grad || sampled[l].requires_grad() ||
                   affinity[l].requires_grad() || node_weight[l].requires_grad();
    Tape<S>* tape = Tape<S>::active();
    if (tape && any_grad) {
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<typename Tensor<S>::Storage>> sv, av, wv, sg, ag, wg;
        for (int l = 0; l < L; ++l) {
            tape->watch(sampled[l]);
            tape->watch(affinity[l]);
            tape->watch(node_weight[l]);
            sv.push_back(sampled[l].values_ptr());
            av.push_back(affinity[l].values_ptr());
            wv.push_back(node_weight[l].values_ptr());
            sg.push_back(sampled[l].grad_ptr());
            ag.push_back(affinity[l].grad_ptr());
            wg.push_back(node_weight[l].grad_ptr());
        }
        tape->watch(out);
        auto og = out.grad_ptr();
        tape->record([=] {
            for (int l = 0; l < L; ++l) {
                const S b = beta[l];
                if (b == S(0)) continue;
                for (int n = 0; n < N; ++n) {
                    const std::int64_t so = static_cast<std::int64_t>(n) * K * C * plane;
                    const std::int64_t ao = static_cast<std::int64_t>(n) * K * G * plane;
                    const std::int64_t wo = static_cast<std::int64_t>(n) * K * plane;
                    const std::int64_t oo = static_cast<std::int64_t>(n) * C * plane;
                    for (int j = 0; j < K; ++j)
                        for (int c = 0; c < C; ++c) {
                            const std::int64_t ai = ao + (static_cast<std::int64_t>(j) * G + c / group_size) * plane;
                            const std::int64_t si = so + (static_cast<std::int64_t>(j) * C + c) * plane;
                            const std::int64_t wi = wo + static_cast<std::int64_t>(j) * plane;
                            const std::int64_t oi = oo + static_cast<std::int64_t>(c) * plane;
                            for (std::int64_t i = 0; i < plane; ++i) {
                                const S go = b * (*og)[oi + i];
                                const S a_ = (*av[l])[ai + i];
                                const S s_ = (*sv[l])[si + i];
                                const S w_ = (*wv[l])[wi + i];
                                if (sg[l]) (*sg[l])[si + i] += go * a_ * w_;
                                if (ag[l]) (*ag[l])[ai + i] += go * s_ * w_;
                                if (wg[l]) (*wg[l])[wi + i] += go * a_ * s_;
                            }
                        }
                }
            }
        });
    }
    return out;
}

// Feature update from the accumulated message.
template <class S>
Tensor<S> update(const Tensor<S>& h, const Tensor<S>& m, const DmpParamsT<S>& params,
                 const DmpConfig& cfg) {
    require(h.shape() == m.shape(), "update: feature shape " + h.shape().str() +
                                        " vs message shape " + m.shape().str());
    if (cfg.fuse_mode == DmpConfig::Fuse::residual)
        return relu(add(h, scale_by(m, params.alpha)));
    require(params.fuse_w.has_value(), "update: concat mode without fuse kernel");
    return conv2d(concat_channels<S>({h, m}), *params.fuse_w, *params.fuse_b);
}

// Captured intermediates of the final iteration, for inspection and tests.
template <class S>
struct DmpTraceT {
    std::vector<Tensor<S>> walks;    // per level: combined walk field
    std::vector<Tensor<S>> sampled;  // per level: deformed neighborhoods
    std::vector<Tensor<S>> affinity;
    std::vector<Tensor<S>> node_weight;
    std::optional<Tensor<S>> message;
};

using DmpTraceF = DmpTraceT<float>;

// Full module: T iterations of walk -> sample -> affinity/weight -> message
// -> update. Depth features must already be aligned to the RGB extents.
// The sampling walk for depth level l is the sum of the RGB-predicted field
// (recomputed from the current state each iteration) and the static
// level-l depth-predicted field, so every depth level contributes its own
// sampling geometry over the same RGB map.
template <class S>
Tensor<S> dmp_forward(const Tensor<S>& rgb_features,
                      const std::vector<Tensor<S>>& depth_features,
                      const DmpParamsT<S>& params, const DmpConfig& cfg,
                      DmpTraceT<S>* trace = nullptr) {
    cfg.validate();
    const Shape rs = rgb_features.shape();
    require(rs.c == cfg.channels,
            "dmp_forward: rgb features have " + std::to_string(rs.c) +
                " channels, config expects " + std::to_string(cfg.channels));
    require(static_cast<int>(depth_features.size()) == cfg.level_count(),
            "dmp_forward: got " + std::to_string(depth_features.size()) +
                " depth levels, config expects " + std::to_string(cfg.level_count()));
    for (int l = 0; l < cfg.level_count(); ++l)
        require(depth_features[l].shape() == rs,
                "dmp_forward: depth level " + std::to_string(cfg.depth_levels[l]) +
                    " has shape " + depth_features[l].shape().str() +
                    ", expected aligned " + rs.str());

    const int L = cfg.level_count();
    std::vector<S> beta(L);
    for (int l = 0; l < L; ++l) beta[l] = static_cast<S>(cfg.beta(l));

    // depth-side quantities do not depend on the iterated state
    std::vector<Tensor<S>> depth_walks, affin, node_w;
    for (int l = 0; l < L; ++l) {
        depth_walks.push_back(
            compute_walks(depth_features[l], params.depth_walk_w[l], params.depth_walk_b[l]));
        auto [a, w] = depth_affinity_weights(depth_features[l], params.affinity_w[l],
                                             params.affinity_b[l], params.weight_w[l],
                                             params.weight_b[l], cfg.group_count);
        if (cfg.softmax_affinity) a = softmax_groups(a, cfg.group_count);
        affin.push_back(a);
        node_w.push_back(w);
    }

    Tensor<S> h = rgb_features;
    for (int t = 0; t < cfg.iterations; ++t) {
        Tensor<S> rgb_walks = compute_walks(h, params.rgb_walk_w, params.rgb_walk_b);
        std::vector<Tensor<S>> walks, sampled;
        for (int l = 0; l < L; ++l) {
            walks.push_back(add(rgb_walks, depth_walks[l]));
            sampled.push_back(sample_nodes(h, walks[l]));
        }
        Tensor<S> m = message(sampled, affin, node_w, beta, cfg.channels, cfg.group_count);
        if (trace && t == cfg.iterations - 1) {
            trace->walks = walks;
            trace->sampled = sampled;
            trace->affinity = affin;
            trace->node_weight = node_w;
            trace->message = m;
        }
        h = update(h, m, params, cfg);
    }
    return h;
}

}  // namespace dmpnet
