#include "dmpnet/gradsuite.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "dmpnet/gradcheck.hpp"
#include "dmpnet/network.hpp"
#include "dmpnet/ops.hpp"
#include "dmpnet/rng.hpp"

namespace dmpnet {
namespace {

TensorD leaf(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    TensorD t(s);
    for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
    t.set_requires_grad(true);
    return t;
}

// values bounded away from zero, keeping relu and clamp kinks out of reach
// of the probe step
TensorD leaf_off_zero(Shape s, Rng& rng) {
    TensorD t(s);
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        const double mag = 0.1 + 0.9 * rng.uniform();
        t.data()[i] = rng.coin(0.5) ? mag : -mag;
    }
    t.set_requires_grad(true);
    return t;
}

// strictly distinct values so pooling argmaxes cannot flip under perturbation
TensorD leaf_distinct(Shape s, Rng& rng) {
    TensorD t(s);
    std::vector<std::int64_t> order(t.numel());
    for (std::int64_t i = 0; i < t.numel(); ++i) order[i] = i;
    for (std::int64_t i = t.numel() - 1; i > 0; --i)
        std::swap(order[i], order[rng.uniform_int(0, static_cast<int>(i))]);
    for (std::int64_t i = 0; i < t.numel(); ++i)
        t.data()[order[i]] = 0.05 * static_cast<double>(i) + 0.001 * rng.uniform();
    t.set_requires_grad(true);
    return t;
}

TensorD projection(Shape s, Rng& rng) {
    TensorD t(s);
    for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(-1.0, 1.0);
    return t;
}

TensorD project_sum(const TensorD& x, const TensorD& proj) { return sum_all(mul(x, proj)); }

using CheckFn = std::function<GradCheckResult(Rng&)>;

struct Check {
    const char* name;
    const char* scope;  // "ops", "dmp" or "end-to-end"
    CheckFn run;
};

// Builds a random module instance whose finite differences stay clear of the
// two kink families in the forward map: integer crossings of the bilinear
// sampling lattice and sign changes of the residual relu. The sampling
// coordinate fraction equals the combined walk value (rgb field plus depth
// field), so the combined per-channel bias is drawn directly from
// +-[0.3, 0.45] and split between the two kernels; with walk weights at
// 0.002 the conv terms move it by at most 2 * 0.002 * 4 * 9 = 0.144, which
// pins every coordinate at least 0.15 from the lattice by construction. The
// relu margin depends on the message values, so instances that land within
// 0.02 of a sign change are redrawn. The audit below reads only forward
// intermediates and never consults a gradient, so redrawing cannot mask a
// wrong derivative, it only removes points where the derivative is not well
// defined at the probe scale.
GradCheckResult check_dmp_module(Rng& rng, bool concat_softmax) {
    DmpConfig cfg;
    cfg.channels = 4;
    cfg.group_count = 2;
    cfg.depth_levels = {4, 5};
    if (concat_softmax) {
        cfg.fuse_mode = DmpConfig::Fuse::concat;
        cfg.softmax_affinity = true;
    }
    for (int attempt = 0; attempt < 50; ++attempt) {
        auto params = make_dmp_params<double>(cfg);
        auto fill = [&](TensorD& t, double scale) {
            for (std::int64_t i = 0; i < t.numel(); ++i)
                t.data()[i] = rng.uniform(-scale, scale);
        };
        fill(params.rgb_walk_w, 0.002);
        for (std::int64_t i = 0; i < params.rgb_walk_b.numel(); ++i)
            params.rgb_walk_b.data()[i] = (rng.coin(0.5) ? 1.0 : -1.0) * rng.uniform(0.1, 0.15);
        for (std::size_t l = 0; l < params.depth_walk_w.size(); ++l) {
            fill(params.depth_walk_w[l], 0.002);
            for (std::int64_t i = 0; i < params.depth_walk_b[l].numel(); ++i) {
                const double combined = (rng.coin(0.5) ? 1.0 : -1.0) * rng.uniform(0.3, 0.45);
                params.depth_walk_b[l].data()[i] = combined - params.rgb_walk_b.data()[i];
            }
            fill(params.affinity_w[l], 0.2);
            fill(params.affinity_b[l], 0.2);
            fill(params.weight_w[l], 0.2);
            fill(params.weight_b[l], 0.2);
        }
        params.alpha.data()[0] = 0.15;
        if (params.fuse_w) {
            fill(*params.fuse_w, 0.2);
            fill(*params.fuse_b, 0.1);
        }

        TensorD rgb = leaf(Shape{1, 4, 3, 3}, rng, 0.4, 1.0);
        std::vector<TensorD> depths = {leaf(Shape{1, 4, 3, 3}, rng, 0.2, 1.0),
                                       leaf(Shape{1, 4, 3, 3}, rng, 0.2, 1.0)};

        DmpTraceT<double> tr;
        dmp_forward(rgb, depths, params, cfg, &tr);
        bool clear = true;
        for (const TensorD& w : tr.walks)
            for (std::int64_t i = 0; i < w.numel() && clear; ++i) {
                const double v = w.data()[i];
                clear = std::abs(v - std::round(v)) >= 0.1;
            }
        if (cfg.fuse_mode == DmpConfig::Fuse::residual)
            for (std::int64_t i = 0; i < rgb.numel() && clear; ++i)
                clear = std::abs(rgb.data()[i] +
                                 params.alpha.data()[0] * tr.message->data()[i]) >= 0.02;
        if (!clear) continue;

        TensorD proj = projection(Shape{1, 4, 3, 3}, rng);
        std::vector<TensorD> leaves = {rgb, depths[0], depths[1]};
        visit_dmp_params(params, cfg, "", [&](const std::string&, TensorD& t) {
            leaves.push_back(t);
        });
        return check_gradients(
            [&] { return project_sum(dmp_forward(rgb, depths, params, cfg), proj); }, leaves);
    }
    require(false, "gradsuite: no margin-clear module instance in 50 draws");
    return {};
}

GradCheckResult check_end_to_end(Rng& rng) {
    NetworkConfig cfg;
    cfg.input_size = 16;
    cfg.encoder_widths = {2, 2, 2, 2, 2, 2};
    cfg.fcc_channels = 4;
    cfg.dmp.group_count = 2;
    // weight the global term at 1 instead of the resolution-derived 256: the
    // supervision path stays active, but the loss magnitude stays small
    // enough that finite-difference cancellation noise sits well under the
    // tolerance
    cfg.lambda_mode = NetworkConfig::Lambda::fixed;
    cfg.lambda_fixed = 1.0f;
    NetworkParamsT<double> p = make_network_params<double>(cfg);
    init_network_params(p, cfg, rng.next_u32());
    // jitter off the init state: zero biases put deep units exactly on the
    // relu corner, which central differences cannot straddle
    visit_params(p, cfg, [&](const std::string&, TensorD& t) {
        for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] += rng.uniform(-0.15, 0.15);
    });
    for (auto& dmp : p.dmps) {
        auto fill = [&](TensorD& t, double scale) {
            for (std::int64_t i = 0; i < t.numel(); ++i)
                t.data()[i] = rng.uniform(-scale, scale);
        };
        // combined walk bias (rgb plus depth field) drawn away from the
        // integer lattice and split, same margin scheme as check_dmp_module;
        // tiny walk kernels keep the data-dependent part of the coordinate
        // small against that margin
        fill(dmp.rgb_walk_w, 0.002);
        for (std::int64_t i = 0; i < dmp.rgb_walk_b.numel(); ++i)
            dmp.rgb_walk_b.data()[i] = (rng.coin(0.5) ? 1.0 : -1.0) * rng.uniform(0.1, 0.15);
        for (auto& t : dmp.depth_walk_w) fill(t, 0.002);
        for (auto& t : dmp.depth_walk_b)
            for (std::int64_t i = 0; i < t.numel(); ++i) {
                const double combined = (rng.coin(0.5) ? 1.0 : -1.0) * rng.uniform(0.3, 0.45);
                t.data()[i] = combined - dmp.rgb_walk_b.data()[i];
            }
        for (auto& t : dmp.affinity_w) fill(t, 0.3);
        for (auto& t : dmp.affinity_b) fill(t, 0.3);
        for (auto& t : dmp.weight_w) fill(t, 0.3);
        for (auto& t : dmp.weight_b) fill(t, 0.3);
        dmp.alpha.data()[0] = 0.15;
    }

    TensorD rgb = leaf(Shape{1, 3, 16, 16}, rng, 0.25, 0.75);
    TensorD dep = leaf(Shape{1, 3, 16, 16}, rng, 0.25, 0.75);
    TensorD gt(Shape{1, 1, 16, 16});
    for (std::int64_t i = 0; i < gt.numel(); ++i) gt.data()[i] = rng.coin(0.5) ? 1.0 : 0.0;

    // Saturated predictions poison the difference quotients: a probability
    // stored as 1 - 1e-7 is quantized at absolute epsilon, so log(1 - p)
    // carries a relative error near 1e-9 that dwarfs the quotient's signal
    // at any usable step. Halve the head kernels until every predicted
    // probability keeps a 1e-4 margin from saturation; this reads only
    // forward values, so it conditions the instance without ever looking at
    // a gradient.
    for (int guard = 0; guard < 20; ++guard) {
        const PredictionT<double> pr = predict(rgb, dep, p, cfg);
        double lo = 1.0, hi = 0.0;
        for (const TensorD* t : {&pr.s_final, &pr.s_rgb, &pr.s_depth})
            for (std::int64_t i = 0; i < t->numel(); ++i) {
                lo = std::min(lo, t->data()[i]);
                hi = std::max(hi, t->data()[i]);
            }
        if (lo >= 1e-4 && hi <= 1.0 - 1e-4) break;
        for (auto* head : {&p.head_rgb, &p.head_depth, &p.head_final}) {
            for (std::int64_t i = 0; i < head->w.numel(); ++i) head->w.data()[i] *= 0.5;
            for (std::int64_t i = 0; i < head->b.numel(); ++i) head->b.data()[i] *= 0.5;
        }
    }

    std::vector<TensorD> leaves = {rgb, dep};
    visit_params(p, cfg, [&](const std::string& name, TensorD& t) {
        for (const char* pick : {"encoder.l1.conv1.weight", "fcc.rgb.l4.weight",
                                 "dmp.l4.affinity.l5.weight", "dmp.l5.alpha",
                                 "ff.l1.branch5.weight", "head.final.weight"})
            if (name == pick) leaves.push_back(t);
    });
    // Elementwise finite differences over a deep relu composition meet its
    // genuine nonsmoothness: among thousands of probes, some instance parks
    // a unit so close to a corner that every practical step straddles it,
    // and the two-sided quotient then averages the two one-sided slopes no
    // matter how small the step. Such corners are identified from the
    // analytic side alone: if the tape gradient itself jumps across the
    // probe window by at least the observed discrepancy, the quotient at
    // this element measures the corner, not backward correctness, and the
    // element is skipped. A defective backward disagrees without any such
    // jump and still fails, here and on every other element it corrupts.
    const auto fn = [&] { return loss_total(predict(rgb, dep, p, cfg), gt, cfg).total; };
    auto tape_grads = [&] {
        std::vector<std::vector<double>> g;
        Tape<double> tape;
        TapeScope<double> scope(tape);
        tape.backward(fn());
        for (const auto& l : leaves) g.push_back(l.grad());
        return g;
    };
    const std::vector<std::vector<double>> grads = tape_grads();
    const double step = 1e-5, jump_probe = 3e-5;

    GradCheckResult out;
    for (std::size_t k = 0; k < leaves.size(); ++k) {
        TensorD l = leaves[k];
        for (std::int64_t i = 0; i < l.numel(); ++i) {
            const double saved = l.data()[i];
            l.data()[i] = saved + step;
            const double up = fn().data()[0];
            l.data()[i] = saved - step;
            const double down = fn().data()[0];
            l.data()[i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double a = grads[k][i];
            const double err = std::abs(a - numeric) /
                               std::max({1.0, std::abs(a), std::abs(numeric)});
            if (err > 1e-4) {
                l.data()[i] = saved + jump_probe;
                const double g_up = tape_grads()[k][i];
                l.data()[i] = saved - jump_probe;
                const double g_down = tape_grads()[k][i];
                l.data()[i] = saved;
                if (std::abs(g_up - g_down) >= std::abs(a - numeric)) continue;
            }
            if (err >= out.max_rel_err) {
                out.max_rel_err = err;
                out.worst = "leaf " + std::to_string(k) + " elem " + std::to_string(i) +
                            ": analytic " + std::to_string(a) + " vs fd " +
                            std::to_string(numeric);
            }
        }
    }
    return out;
}

std::vector<Check> all_checks() {
    const Shape grid{1, 4, 6, 6};
    std::vector<Check> checks;
    auto add_op = [&](const char* name, CheckFn fn) {
        checks.push_back({name, "ops", std::move(fn)});
    };

    add_op("add_sub_mul", [grid](Rng& rng) {
        TensorD a = leaf(grid, rng), b = leaf(grid, rng);
        TensorD proj = projection(grid, rng);
        return check_gradients(
            [&] { return project_sum(add(mul(a, b), sub(a, b)), proj); }, {a, b});
    });
    add_op("scalar_ops_and_scale", [grid](Rng& rng) {
        TensorD x = leaf(grid, rng);
        TensorD alpha = leaf(Shape{1, 1, 1, 1}, rng);
        TensorD proj = projection(grid, rng);
        return check_gradients(
            [&] {
                return project_sum(scale_by(add_scalar(mul_scalar(x, 1.7), -0.3), alpha), proj);
            },
            {x, alpha});
    });
    add_op("relu", [grid](Rng& rng) {
        TensorD x = leaf_off_zero(grid, rng);
        TensorD proj = projection(grid, rng);
        return check_gradients([&] { return project_sum(relu(x), proj); }, {x});
    });
    add_op("sigmoid_log", [grid](Rng& rng) {
        TensorD x = leaf(grid, rng, 0.5, 2.0);
        TensorD proj = projection(grid, rng);
        return check_gradients([&] { return project_sum(log(sigmoid(x)), proj); }, {x});
    });
    add_op("clamp", [grid](Rng& rng) {
        // exercise both the pass-through and the saturated branch, with a
        // 0.05 margin from the clamp bounds where the kinks live
        TensorD x(grid);
        for (std::int64_t i = 0; i < x.numel(); ++i) {
            const double mag =
                rng.coin(0.5) ? rng.uniform(0.1, 0.85) : rng.uniform(0.95, 1.25);
            x.data()[i] = rng.coin(0.5) ? mag : -mag;
        }
        x.set_requires_grad(true);
        TensorD proj = projection(grid, rng);
        return check_gradients([&] { return project_sum(clamp(x, -0.9, 0.9), proj); }, {x});
    });
    add_op("conv2d_stride_pad_bias", [grid](Rng& rng) {
        TensorD x = leaf(grid, rng);
        TensorD w = leaf(Shape{3, 4, 3, 3}, rng);
        TensorD b = leaf(Shape{1, 3, 1, 1}, rng);
        TensorD proj = projection(Shape{1, 3, 3, 3}, rng);
        return check_gradients(
            [&] {
                return project_sum(conv2d(x, w, b, {.stride = 2, .padding = 1}), proj);
            },
            {x, w, b});
    });
    add_op("conv2d_dilated", [grid](Rng& rng) {
        TensorD x = leaf(grid, rng);
        TensorD w = leaf(Shape{2, 4, 3, 3}, rng);
        TensorD proj = projection(Shape{1, 2, 2, 2}, rng);
        return check_gradients(
            [&] { return project_sum(conv2d(x, w, {.dilation = 2}), proj); }, {x, w});
    });
    add_op("grid_sample", [grid](Rng& rng) {
        TensorD x = leaf(grid, rng);
        TensorD coords(Shape{1, 2, 3, 4});
        for (int i = 0; i < 12; ++i) {
            coords.data()[i] = rng.uniform_int(0, 4) + rng.uniform(0.25, 0.75);
            coords.data()[12 + i] = rng.uniform_int(0, 4) + rng.uniform(0.25, 0.75);
        }
        coords.set_requires_grad(true);
        TensorD proj = projection(Shape{1, 4, 3, 4}, rng);
        return check_gradients(
            [&] { return project_sum(grid_sample(x, coords), proj); }, {x, coords});
    });
    add_op("maxpool2d", [grid](Rng& rng) {
        TensorD x = leaf_distinct(grid, rng);
        TensorD proj = projection(Shape{1, 4, 3, 3}, rng);
        return check_gradients([&] { return project_sum(maxpool2d(x, 2, 2), proj); }, {x});
    });
    add_op("maxpool2d_padded", [grid](Rng& rng) {
        TensorD x = leaf_distinct(grid, rng);
        TensorD proj = projection(grid, rng);
        return check_gradients([&] { return project_sum(maxpool2d(x, 3, 1, 1), proj); }, {x});
    });
    add_op("avgpool2d", [grid](Rng& rng) {
        TensorD x = leaf(grid, rng);
        TensorD proj = projection(Shape{1, 4, 3, 3}, rng);
        return check_gradients([&] { return project_sum(avgpool2d(x, 2, 2), proj); }, {x});
    });
    add_op("resize_bilinear_up", [grid](Rng& rng) {
        TensorD x = leaf(grid, rng);
        TensorD proj = projection(Shape{1, 4, 9, 11}, rng);
        return check_gradients(
            [&] { return project_sum(resize_bilinear(x, 9, 11), proj); }, {x});
    });
    add_op("resize_bilinear_down", [grid](Rng& rng) {
        TensorD x = leaf(grid, rng);
        TensorD proj = projection(Shape{1, 4, 3, 4}, rng);
        return check_gradients(
            [&] { return project_sum(resize_bilinear(x, 3, 4), proj); }, {x});
    });
    add_op("concat_slice", [](Rng& rng) {
        TensorD a = leaf(Shape{1, 2, 6, 6}, rng), b = leaf(Shape{1, 3, 6, 6}, rng);
        TensorD proj = projection(Shape{1, 2, 6, 6}, rng);
        return check_gradients(
            [&] {
                return project_sum(slice_channels(concat_channels<double>({a, b}), 1, 2), proj);
            },
            {a, b});
    });
    add_op("softmax_groups", [](Rng& rng) {
        TensorD x = leaf(Shape{1, 18, 3, 3}, rng);  // nine nodes, two groups
        TensorD proj = projection(Shape{1, 18, 3, 3}, rng);
        return check_gradients([&] { return project_sum(softmax_groups(x, 2), proj); }, {x});
    });
    add_op("sum_all", [grid](Rng& rng) {
        TensorD x = leaf(grid, rng);
        return check_gradients([&] { return sum_all(mul(x, x)); }, {x});
    });

    checks.push_back({"dmp_module", "dmp", [](Rng& rng) { return check_dmp_module(rng, false); }});
    checks.push_back(
        {"dmp_concat_softmax", "dmp", [](Rng& rng) { return check_dmp_module(rng, true); }});
    checks.push_back({"network_loss", "end-to-end", check_end_to_end});
    return checks;
}

}  // namespace

std::vector<GradSuiteEntry> run_grad_suite(const std::string& scope, std::uint64_t seed,
                                           int seeds_per_check, double tolerance) {
    require(seeds_per_check >= 1, "gradsuite: need at least one seed per check");
    std::vector<Check> checks = all_checks();
    std::vector<GradSuiteEntry> results;
    bool matched = false;
    for (const Check& check : checks) {
        if (scope != "all" && scope != check.scope && scope != check.name) continue;
        matched = true;
        GradSuiteEntry entry;
        entry.name = check.name;
        for (int i = 0; i < seeds_per_check; ++i) {
            Rng rng(seed + static_cast<std::uint64_t>(i) * 7919);
            GradCheckResult r = check.run(rng);
            if (r.max_rel_err >= entry.max_rel_err) {
                entry.max_rel_err = r.max_rel_err;
                entry.worst = std::move(r.worst);
            }
        }
        entry.passed = entry.max_rel_err <= tolerance;
        results.push_back(std::move(entry));
    }
    require(matched, "gradsuite: unknown scope '" + scope +
                         "' (use ops, dmp, end-to-end, all, or an op name)");
    return results;
}

}  // namespace dmpnet
