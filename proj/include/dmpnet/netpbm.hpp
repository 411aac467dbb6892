#pragma once

// Binary Netpbm images as the interchange format: P6 (PPM) for color, P5
// (PGM) for single-channel maps. Fixed 8-bit depth, values scaled to [0,1]
// in memory. Saving rounds half-up, so an 8-bit-representable tensor
// round-trips bit-exactly.

#include <string>

#include "dmpnet/tensor.hpp"

namespace dmpnet {

TensorF load_ppm(const std::string& path);  // [1,3,H,W]
TensorF load_pgm(const std::string& path);  // [1,1,H,W]

void save_ppm(const std::string& path, const TensorF& image);
void save_pgm(const std::string& path, const TensorF& image);

}  // namespace dmpnet
