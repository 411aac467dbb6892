#include "dmpnet/netpbm.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <vector>

#include "dmpnet/common.hpp"

namespace dmpnet {
namespace {

// Reads one header token, skipping whitespace and '#' comment lines.
std::string next_token(std::istream& in, const std::string& path) {
    int ch = in.get();
    while (ch != EOF) {
        if (ch == '#') {
            while (ch != EOF && ch != '\n') ch = in.get();
        } else if (!std::isspace(ch)) {
            break;
        }
        ch = in.get();
    }
    require(ch != EOF, "netpbm: truncated header in " + path);
    std::string tok;
    while (ch != EOF && !std::isspace(ch) && ch != '#') {
        tok.push_back(static_cast<char>(ch));
        ch = in.get();
    }
    if (ch == '#') in.unget();
    return tok;
}

int parse_dim(const std::string& tok, const std::string& what, const std::string& path) {
    require(!tok.empty() && tok.find_first_not_of("0123456789") == std::string::npos,
            "netpbm: malformed " + what + " '" + tok + "' in " + path);
    const long v = std::stol(tok);
    require(v > 0 && v <= 1 << 20, "netpbm: unreasonable " + what + " in " + path);
    return static_cast<int>(v);
}

TensorF load_any(const std::string& path, const char* magic, int channels) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "netpbm: cannot open " + path);
    require(next_token(in, path) == magic,
            "netpbm: " + path + " is not a binary " + magic + " file");
    const int w = parse_dim(next_token(in, path), "width", path);
    const int h = parse_dim(next_token(in, path), "height", path);
    const int maxval = parse_dim(next_token(in, path), "maxval", path);
    require(maxval == 255, "netpbm: unsupported maxval " + std::to_string(maxval) + " in " +
                               path + " (only 255 is handled)");
    // the header ends with exactly one whitespace byte before the payload

    const std::size_t count = static_cast<std::size_t>(w) * h * channels;
    std::vector<std::uint8_t> raw(count);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(count));
    require(static_cast<std::size_t>(in.gcount()) == count,
            "netpbm: truncated payload in " + path);

    TensorF out(Shape{1, channels, h, w});
    float* dst = out.data();
    for (int r = 0; r < h; ++r)
        for (int col = 0; col < w; ++col)
            for (int c = 0; c < channels; ++c)
                dst[out.index(0, c, r, col)] =
                    static_cast<float>(raw[(static_cast<std::size_t>(r) * w + col) * channels + c]) /
                    255.f;
    return out;
}

void save_any(const std::string& path, const TensorF& image, const char* magic, int channels) {
    const Shape s = image.shape();
    require(s.n == 1 && s.c == channels,
            "netpbm: expected a [1," + std::to_string(channels) + ",H,W] tensor, got " + s.str());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), "netpbm: cannot write " + path);
    out << magic << "\n" << s.w << " " << s.h << "\n255\n";

    std::vector<std::uint8_t> raw(static_cast<std::size_t>(s.h) * s.w * channels);
    const float* src = image.data();
    for (int r = 0; r < s.h; ++r)
        for (int col = 0; col < s.w; ++col)
            for (int c = 0; c < channels; ++c) {
                float v = src[image.index(0, c, r, col)];
                v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
                raw[(static_cast<std::size_t>(r) * s.w + col) * channels + c] =
                    static_cast<std::uint8_t>(std::floor(v * 255.f + 0.5f));
            }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    require(out.good(), "netpbm: write failed for " + path);
}

}  // namespace

TensorF load_ppm(const std::string& path) { return load_any(path, "P6", 3); }
TensorF load_pgm(const std::string& path) { return load_any(path, "P5", 1); }

void save_ppm(const std::string& path, const TensorF& image) { save_any(path, image, "P6", 3); }
void save_pgm(const std::string& path, const TensorF& image) { save_any(path, image, "P5", 1); }

}  // namespace dmpnet
