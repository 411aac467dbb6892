#pragma once

// On-disk dataset layout and loading. A dataset directory holds rgb/<id>.ppm,
// depth/<id>.pgm, gt/<id>.pgm and a manifest.txt listing ids one per line.
// Depth is stored near=bright: larger values are closer to the camera.

#include <string>
#include <vector>

#include "dmpnet/rng.hpp"
#include "dmpnet/tensor.hpp"

namespace dmpnet {

struct Sample {
    TensorF rgb;    // [1,3,S,S] in [0,1]
    TensorF depth;  // [1,1,S,S] in [0,1]
    TensorF gt;     // [1,1,S,S] strictly binary; empty tensor if not loaded
    std::string id;
};

std::vector<std::string> read_manifest(const std::string& dir);

// Loads every manifest entry. All three maps must share extents and the
// ground truth must be strictly binary; violations fail loudly. With
// need_gt=false a missing gt directory is tolerated (inference input).
std::vector<Sample> load_dataset(const std::string& dir, bool need_gt = true);

// Writes one sample into the layout, creating subdirectories as needed.
// The manifest is written separately once all ids are known.
void save_sample(const std::string& dir, const Sample& sample);
void write_manifest(const std::string& dir, const std::vector<std::string>& ids);

// [1,1,H,W] -> [1,3,H,W] by channel replication, for the depth encoder stream.
TensorF replicate3(const TensorF& depth);

// Training-time augmentation: coin-flip horizontal mirror and a random
// 90..100% crop resized back to the full extent (nearest for the mask, so it
// stays binary).
Sample augment_sample(const Sample& sample, Rng& rng);

}  // namespace dmpnet
