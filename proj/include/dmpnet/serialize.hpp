#pragma once

// Binary tensor persistence. A single tensor is stored as a DMPT record:
// magic "DMPT", version byte, dimension-count byte, little-endian u32
// extents, then the row-major payload as little-endian 32-bit floats.
// A checkpoint is a DMPC container of named DMPT records; loading is
// all-or-nothing, so a bad file never leaves partially updated parameters.

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "dmpnet/network.hpp"
#include "dmpnet/tensor.hpp"

namespace dmpnet {

void save_tensor(std::ostream& out, const TensorF& t);
TensorF load_tensor(std::istream& in, const std::string& context);

void save_tensor_file(const std::string& path, const TensorF& t);
TensorF load_tensor_file(const std::string& path);

using NamedTensors = std::vector<std::pair<std::string, TensorF>>;

void save_container(const std::string& path, const NamedTensors& entries);
NamedTensors load_container(const std::string& path);

void save_checkpoint(const std::string& path, NetworkParamsF& params,
                     const NetworkConfig& cfg);
void load_checkpoint(const std::string& path, NetworkParamsF& params,
                     const NetworkConfig& cfg);

}  // namespace dmpnet
