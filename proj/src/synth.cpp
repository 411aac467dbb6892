#include "dmpnet/synth.hpp"

#include <algorithm>
#include <cmath>

#include "dmpnet/common.hpp"

namespace dmpnet {
namespace {

struct Blob {
    bool ellipse;
    double cy, cx, ry, rx;  // center and half-extents in pixels

    bool covers(int r, int c) const {
        const double dy = (r - cy) / ry, dx = (c - cx) / rx;
        return ellipse ? dy * dy + dx * dx <= 1.0
                       : std::fabs(r - cy) <= ry && std::fabs(c - cx) <= rx;
    }
};

Blob random_blob(Rng& rng, int size, double min_frac, double max_frac, bool center_safe) {
    Blob b;
    b.ellipse = rng.coin(0.5);
    b.ry = std::max(3.0, rng.uniform(min_frac, max_frac) * size);
    b.rx = std::max(3.0, rng.uniform(min_frac, max_frac) * size);
    const double lo = center_safe ? 0.3 : 0.0;
    const double hi = center_safe ? 0.7 : 1.0;
    b.cy = rng.uniform(lo, hi) * size;
    b.cx = rng.uniform(lo, hi) * size;
    return b;
}

// a far-band luminance or depth sample shared by background and clutter
double far_depth(Rng& rng) { return rng.uniform(0.08, 0.28); }
double base_luminance(Rng& rng) { return rng.uniform(0.15, 0.45); }

void paint_color(TensorF& rgb, const Blob* blob, double lum, double jitter, Rng& rng) {
    double chan[3];
    for (double& c : chan) c = std::clamp(lum + rng.uniform(-jitter, jitter), 0.0, 1.0);
    const Shape s = rgb.shape();
    for (int r = 0; r < s.h; ++r)
        for (int c = 0; c < s.w; ++c) {
            if (blob && !blob->covers(r, c)) continue;
            for (int k = 0; k < 3; ++k)
                rgb.data()[rgb.index(0, k, r, c)] = static_cast<float>(chan[k]);
        }
}

void paint_plane(TensorF& map, const Blob* blob, double value) {
    const Shape s = map.shape();
    for (int r = 0; r < s.h; ++r)
        for (int c = 0; c < s.w; ++c) {
            if (blob && !blob->covers(r, c)) continue;
            map.data()[map.index(0, 0, r, c)] = static_cast<float>(value);
        }
}

}  // namespace

void SynthConfig::validate() const {
    require(image_size >= 16 && image_size % 16 == 0,
            "synth: image_size must be a positive multiple of 16, got " +
                std::to_string(image_size));
    require(n_train >= 1 && n_test >= 1, "synth: need at least one sample per split");
    require(shapes_min >= 0 && shapes_max >= shapes_min, "synth: bad shapes-per-scene range");
    for (float v : {depth_contrast, rgb_contrast, clutter})
        require(v >= 0.f && v <= 1.f, "synth: contrast and clutter values must lie in [0,1]");
}

Sample synth_scene(const SynthConfig& cfg, Rng& rng, const std::string& id) {
    const int size = cfg.image_size;
    Sample s;
    s.id = id;
    s.rgb = TensorF(Shape{1, 3, size, size});
    s.depth = TensorF(Shape{1, 1, size, size});
    s.gt = TensorF(Shape{1, 1, size, size});

    const double spread = 0.1 * (0.5 + cfg.clutter);
    paint_color(s.rgb, nullptr, base_luminance(rng), spread, rng);
    paint_plane(s.depth, nullptr, far_depth(rng));

    const int clutter_count = rng.uniform_int(cfg.shapes_min, cfg.shapes_max);
    for (int i = 0; i < clutter_count; ++i) {
        const Blob b = random_blob(rng, size, 0.08, 0.35, false);
        const double lum = base_luminance(rng) + rng.uniform(0.0, 0.15) * cfg.clutter;
        paint_color(s.rgb, &b, lum, spread, rng);
        paint_plane(s.depth, &b, std::clamp(far_depth(rng) + rng.uniform(-0.06, 0.06), 0.0, 1.0));
    }

    // the salient foreground: drawn last so it occludes any clutter
    const Blob fg = random_blob(rng, size, 0.12, 0.22, true);
    const double rc = cfg.rgb_contrast, dc = cfg.depth_contrast;
    const double fg_lum = (1.0 - rc) * base_luminance(rng) + rc * 0.875;
    const double fg_depth = (1.0 - dc) * far_depth(rng) + dc * rng.uniform(0.78, 0.92);
    paint_color(s.rgb, &fg, fg_lum, 0.05, rng);
    paint_plane(s.depth, &fg, fg_depth);
    paint_plane(s.gt, &fg, 1.0);

    // mild pixel noise, scaled by the clutter level
    const double rgb_noise = 0.02 * (0.5 + cfg.clutter);
    const double depth_noise = 0.015 * (0.5 + cfg.clutter);
    for (std::int64_t i = 0; i < s.rgb.numel(); ++i)
        s.rgb.data()[i] = static_cast<float>(
            std::clamp(s.rgb.data()[i] + rng.uniform(-rgb_noise, rgb_noise), 0.0, 1.0));
    for (std::int64_t i = 0; i < s.depth.numel(); ++i)
        s.depth.data()[i] = static_cast<float>(
            std::clamp(s.depth.data()[i] + rng.uniform(-depth_noise, depth_noise), 0.0, 1.0));
    return s;
}

void synth_generate(const SynthConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    const struct {
        const char* name;
        int count;
        std::uint64_t stream;
    } splits[] = {{"train", cfg.n_train, cfg.seed},
                  {"test", cfg.n_test, cfg.seed ^ 0x9e3779b97f4a7c15ull}};
    for (const auto& split : splits) {
        Rng rng(split.stream);
        const std::string dir = out_dir + "/" + split.name;
        std::vector<std::string> ids;
        for (int i = 0; i < split.count; ++i) {
            char id[32];
            std::snprintf(id, sizeof id, "%s_%04d", split.name, i);
            ids.emplace_back(id);
            save_sample(dir, synth_scene(cfg, rng, ids.back()));
        }
        write_manifest(dir, ids);
    }
}

}  // namespace dmpnet
