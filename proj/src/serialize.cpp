#include "dmpnet/serialize.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "dmpnet/common.hpp"

static_assert(std::endian::native == std::endian::little,
              "serialization writes raw little-endian words");

namespace dmpnet {
namespace {

constexpr char kTensorMagic[4] = {'D', 'M', 'P', 'T'};
constexpr char kContainerMagic[4] = {'D', 'M', 'P', 'C'};
constexpr std::uint8_t kVersion = 1;

void write_bytes(std::ostream& out, const void* p, std::size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void read_bytes(std::istream& in, void* p, std::size_t n, const std::string& context) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    require(static_cast<std::size_t>(in.gcount()) == n, context + ": truncated file");
}

void write_u32(std::ostream& out, std::uint32_t v) { write_bytes(out, &v, 4); }

std::uint32_t read_u32(std::istream& in, const std::string& context) {
    std::uint32_t v = 0;
    read_bytes(in, &v, 4, context);
    return v;
}

}  // namespace

void save_tensor(std::ostream& out, const TensorF& t) {
    const Shape s = t.shape();
    write_bytes(out, kTensorMagic, 4);
    const std::uint8_t header[2] = {kVersion, 4};
    write_bytes(out, header, 2);
    for (int d : {s.n, s.c, s.h, s.w}) write_u32(out, static_cast<std::uint32_t>(d));
    write_bytes(out, t.data(), sizeof(float) * static_cast<std::size_t>(t.numel()));
}

TensorF load_tensor(std::istream& in, const std::string& context) {
    char magic[4];
    read_bytes(in, magic, 4, context);
    require(std::memcmp(magic, kTensorMagic, 4) == 0, context + ": corrupt tensor magic");
    std::uint8_t header[2];
    read_bytes(in, header, 2, context);
    require(header[0] == kVersion, context + ": tensor version " +
                                       std::to_string(header[0]) + " unsupported (want " +
                                       std::to_string(kVersion) + ")");
    const int ndim = header[1];
    require(ndim >= 1 && ndim <= 4,
            context + ": tensor rank " + std::to_string(ndim) + " unsupported");

    // ranks below four fill in leading unit extents
    int dims[4] = {1, 1, 1, 1};
    for (int i = 0; i < ndim; ++i) {
        const std::uint32_t e = read_u32(in, context);
        require(e >= 1 && e <= (1u << 24), context + ": unreasonable tensor extent " +
                                               std::to_string(e));
        dims[4 - ndim + i] = static_cast<int>(e);
    }
    TensorF t(Shape{dims[0], dims[1], dims[2], dims[3]});
    read_bytes(in, t.data(), sizeof(float) * static_cast<std::size_t>(t.numel()), context);
    return t;
}

void save_tensor_file(const std::string& path, const TensorF& t) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), "tensor: cannot write " + path);
    save_tensor(out, t);
    require(out.good(), "tensor: write failed for " + path);
}

TensorF load_tensor_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "tensor: cannot open " + path);
    return load_tensor(in, path);
}

void save_container(const std::string& path, const NamedTensors& entries) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), "checkpoint: cannot write " + path);
    write_bytes(out, kContainerMagic, 4);
    write_bytes(out, &kVersion, 1);
    write_u32(out, static_cast<std::uint32_t>(entries.size()));
    for (const auto& [name, tensor] : entries) {
        write_u32(out, static_cast<std::uint32_t>(name.size()));
        write_bytes(out, name.data(), name.size());
        save_tensor(out, tensor);
    }
    require(out.good(), "checkpoint: write failed for " + path);
}

NamedTensors load_container(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "checkpoint: cannot open " + path);
    char magic[4];
    read_bytes(in, magic, 4, path);
    require(std::memcmp(magic, kContainerMagic, 4) == 0, path + ": corrupt container magic");
    std::uint8_t version = 0;
    read_bytes(in, &version, 1, path);
    require(version == kVersion, path + ": container version " + std::to_string(version) +
                                     " unsupported (want " + std::to_string(kVersion) + ")");
    const std::uint32_t count = read_u32(in, path);
    require(count <= (1u << 20), path + ": unreasonable entry count");

    NamedTensors entries;
    entries.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t len = read_u32(in, path);
        require(len >= 1 && len <= 4096, path + ": unreasonable name length");
        std::string name(len, '\0');
        read_bytes(in, name.data(), len, path);
        for (const auto& [seen, t] : entries)
            require(seen != name, path + ": name collision for '" + name + "'");
        entries.emplace_back(std::move(name), load_tensor(in, path));
    }
    return entries;
}

void save_checkpoint(const std::string& path, NetworkParamsF& params,
                     const NetworkConfig& cfg) {
    NamedTensors entries;
    visit_params(params, cfg, [&](const std::string& name, TensorF& t) {
        entries.emplace_back(name, t);
    });
    save_container(path, entries);
}

void load_checkpoint(const std::string& path, NetworkParamsF& params,
                     const NetworkConfig& cfg) {
    NamedTensors entries = load_container(path);
    std::map<std::string, const TensorF*> by_name;
    for (const auto& [name, t] : entries) by_name.emplace(name, &t);

    // validate everything against the expected parameter set before touching
    // any parameter, so a bad file cannot leave a half-loaded model
    std::string unknown, missing, mismatched;
    visit_params(params, cfg, [&](const std::string& name, TensorF& t) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            missing += missing.empty() ? name : ", " + name;
            return;
        }
        if (!(it->second->shape() == t.shape()))
            mismatched += (mismatched.empty() ? name : ", " + name) + " (file " +
                          it->second->shape().str() + ", model " + t.shape().str() + ")";
        by_name.erase(it);
    });
    for (const auto& [name, t] : by_name) unknown += unknown.empty() ? name : ", " + name;
    require(unknown.empty(), path + ": unknown parameter names: " + unknown);
    require(missing.empty(), path + ": missing parameters: " + missing);
    require(mismatched.empty(), path + ": shape mismatches: " + mismatched);

    std::map<std::string, const TensorF*> commit;
    for (const auto& [name, t] : entries) commit.emplace(name, &t);
    visit_params(params, cfg, [&](const std::string& name, TensorF& t) {
        const TensorF* src = commit.at(name);
        std::memcpy(t.data(), src->data(), sizeof(float) * static_cast<std::size_t>(t.numel()));
    });
}

}  // namespace dmpnet
