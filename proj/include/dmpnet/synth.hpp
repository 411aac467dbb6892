#pragma once

// Deterministic synthetic RGB-D scenes: a cluttered far background and one
// salient near-depth foreground shape whose visibility in color and in depth
// is controlled independently. At rgb_contrast 0 the object's color is drawn
// from the background distribution and only depth gives it away; at
// depth_contrast 0 the opposite holds.

#include <string>

#include "dmpnet/dataset.hpp"
#include "dmpnet/rng.hpp"

namespace dmpnet {

struct SynthConfig {
    int image_size = 64;
    int n_train = 200;
    int n_test = 50;
    int shapes_min = 4, shapes_max = 8;  // background clutter shapes per scene
    float depth_contrast = 0.9f;         // 0 = object depth blends in, 1 = clearly near
    float rgb_contrast = 0.2f;           // 0 = object color blends in, 1 = clearly bright
    float clutter = 0.5f;                // color spread and pixel noise of the background
    std::uint64_t seed = 1;

    void validate() const;
};

// One scene from the given stream; gt is the foreground shape mask.
Sample synth_scene(const SynthConfig& cfg, Rng& rng, const std::string& id);

// Writes <out_dir>/train and <out_dir>/test datasets with disjoint streams.
void synth_generate(const SynthConfig& cfg, const std::string& out_dir);

}  // namespace dmpnet
