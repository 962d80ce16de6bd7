#pragma once

#include <map>
#include <string>
#include <vector>

#include "repq/common.hpp"

namespace repq {

// Flat key -> tensor map with shape headers. Serialized little-endian:
//   "RQCP" | u32 version | model | stage | arch | u32 count
//   per entry: name | u32 rank | u32 dims[rank] | f32 data[numel]
// where strings are u32 length + bytes.
struct Checkpoint {
    uint32_t version = 1;
    std::string model_name;
    std::string stage;  // "fp" | "qat"
    std::string arch;   // "plain" | "reparam" | "merged"
    std::map<std::string, std::pair<Shape, std::vector<float>>> entries;

    void put(const std::string& name, const Shape& shape, const std::vector<float>& data);
    const std::pair<Shape, std::vector<float>>& get(const std::string& name) const;
    bool has(const std::string& name) const { return entries.count(name) != 0; }

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
};

}  // namespace repq
