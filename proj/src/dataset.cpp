#include "dmpnet/dataset.hpp"

#include <filesystem>
#include <fstream>

#include "dmpnet/common.hpp"
#include "dmpnet/netpbm.hpp"
#include "dmpnet/ops.hpp"

namespace dmpnet {

namespace fs = std::filesystem;

std::vector<std::string> read_manifest(const std::string& dir) {
    const fs::path path = fs::path(dir) / "manifest.txt";
    std::ifstream in(path);
    require(in.good(), "dataset: cannot open " + path.string());
    std::vector<std::string> ids;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (!line.empty()) ids.push_back(line);
    }
    require(!ids.empty(), "dataset: empty manifest in " + dir);
    return ids;
}

std::vector<Sample> load_dataset(const std::string& dir, bool need_gt) {
    const std::vector<std::string> ids = read_manifest(dir);
    const bool have_gt = need_gt || fs::is_directory(fs::path(dir) / "gt");
    std::vector<Sample> samples;
    samples.reserve(ids.size());
    for (const std::string& id : ids) {
        Sample s;
        s.id = id;
        s.rgb = load_ppm((fs::path(dir) / "rgb" / (id + ".ppm")).string());
        s.depth = load_pgm((fs::path(dir) / "depth" / (id + ".pgm")).string());
        require(s.rgb.shape().h == s.depth.shape().h && s.rgb.shape().w == s.depth.shape().w,
                "dataset: rgb and depth extents differ for " + id);
        if (have_gt) {
            s.gt = load_pgm((fs::path(dir) / "gt" / (id + ".pgm")).string());
            require(s.gt.shape().h == s.rgb.shape().h && s.gt.shape().w == s.rgb.shape().w,
                    "dataset: gt extents differ for " + id);
            for (std::int64_t i = 0; i < s.gt.numel(); ++i)
                require(s.gt.data()[i] == 0.f || s.gt.data()[i] == 1.f,
                        "dataset: non-binary ground truth for " + id);
        }
        samples.push_back(std::move(s));
    }
    return samples;
}

void save_sample(const std::string& dir, const Sample& sample) {
    for (const char* sub : {"rgb", "depth", "gt"})
        fs::create_directories(fs::path(dir) / sub);
    save_ppm((fs::path(dir) / "rgb" / (sample.id + ".ppm")).string(), sample.rgb);
    save_pgm((fs::path(dir) / "depth" / (sample.id + ".pgm")).string(), sample.depth);
    save_pgm((fs::path(dir) / "gt" / (sample.id + ".pgm")).string(), sample.gt);
}

void write_manifest(const std::string& dir, const std::vector<std::string>& ids) {
    fs::create_directories(dir);
    const fs::path path = fs::path(dir) / "manifest.txt";
    std::ofstream out(path, std::ios::trunc);
    require(out.good(), "dataset: cannot write " + path.string());
    for (const std::string& id : ids) out << id << "\n";
    require(out.good(), "dataset: write failed for " + path.string());
}

TensorF replicate3(const TensorF& depth) {
    const Shape s = depth.shape();
    require(s.c == 1, "replicate3: expected one channel, got " + std::to_string(s.c));
    TensorF out(Shape{s.n, 3, s.h, s.w});
    const std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < 3; ++c)
            std::copy_n(depth.data() + depth.index(n, 0, 0, 0), plane,
                        out.data() + out.index(n, c, 0, 0));
    return out;
}

Sample augment_sample(const Sample& sample, Rng& rng) {
    Sample out = sample;
    if (rng.coin(0.5)) {
        out.rgb = flip_horizontal(out.rgb);
        out.depth = flip_horizontal(out.depth);
        out.gt = flip_horizontal(out.gt);
    }
    const int h = out.rgb.shape().h, w = out.rgb.shape().w;
    const double scale = rng.uniform(0.9, 1.0);
    const int ch = std::max(1, static_cast<int>(std::lround(h * scale)));
    const int cw = std::max(1, static_cast<int>(std::lround(w * scale)));
    if (ch == h && cw == w) return out;
    const int r0 = rng.uniform_int(0, h - ch);
    const int c0 = rng.uniform_int(0, w - cw);
    out.rgb = resize_bilinear(crop(out.rgb, r0, c0, ch, cw), h, w);
    out.depth = resize_bilinear(crop(out.depth, r0, c0, ch, cw), h, w);
    out.gt = resize_nearest(crop(out.gt, r0, c0, ch, cw), h, w);
    return out;
}

}  // namespace dmpnet
