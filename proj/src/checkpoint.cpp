#include "repq/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace repq {

namespace {

void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

void write_str(std::ostream& os, const std::string& s) {
    write_u32(os, uint32_t(s.size()));
    os.write(s.data(), std::streamsize(s.size()));
}

std::string read_str(std::istream& is) {
    uint32_t n = read_u32(is);
    if (n > (1u << 20)) throw std::runtime_error("checkpoint: implausible string length");
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return s;
}

void write_f32(std::ostream& os, float f) { write_u32(os, std::bit_cast<uint32_t>(f)); }
float read_f32(std::istream& is) { return std::bit_cast<float>(read_u32(is)); }

}  // namespace

void Checkpoint::put(const std::string& name, const Shape& shape,
                     const std::vector<float>& data) {
    require(numel_of(shape) == int64_t(data.size()),
            "checkpoint: shape/data mismatch for entry " + name);
    entries[name] = {shape, data};
}

const std::pair<Shape, std::vector<float>>& Checkpoint::get(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end()) throw std::runtime_error("checkpoint: missing entry " + name);
    return it->second;
}

void Checkpoint::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    os.write("RQCP", 4);
    write_u32(os, version);
    write_str(os, model_name);
    write_str(os, stage);
    write_str(os, arch);
    write_u32(os, uint32_t(entries.size()));
    for (const auto& [name, entry] : entries) {
        write_str(os, name);
        write_u32(os, uint32_t(entry.first.size()));
        for (int64_t d : entry.first) write_u32(os, uint32_t(d));
        for (float f : entry.second) write_f32(os, f);
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "RQCP", 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    Checkpoint ck;
    ck.version = read_u32(is);
    if (ck.version != 1) throw std::runtime_error("checkpoint: unsupported version");
    ck.model_name = read_str(is);
    ck.stage = read_str(is);
    ck.arch = read_str(is);
    uint32_t count = read_u32(is);
    for (uint32_t i = 0; i < count; ++i) {
        std::string name = read_str(is);
        uint32_t rank = read_u32(is);
        if (rank > 8) throw std::runtime_error("checkpoint: implausible rank");
        Shape shape(rank);
        for (auto& d : shape) d = read_u32(is);
        std::vector<float> data(size_t(numel_of(shape)));
        for (auto& f : data) f = read_f32(is);
        ck.entries[name] = {std::move(shape), std::move(data)};
    }
    return ck;
}

}  // namespace repq
