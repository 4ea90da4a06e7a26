#pragma once

// Tensor container file:
//
//   bytes 0..7   magic "RBNSTNSR"
//   bytes 8..15  header length H (u64, little-endian)
//   next H bytes JSON header:
//                {"format":"robnas-tensors/1","dtype":"f64le",
//                 "tensors":[{"name":..,"shape":[..],"offset":..,"count":..}],
//                 "meta":{..}}
//   remainder    raw little-endian float64 values; `offset` is in bytes from
//                the start of this data section
//
// Used for weight checkpoints and for the dataset cache.

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "robnas/tensor.hpp"

namespace robnas {

struct NamedTensor {
    std::string name;
    Tensor value;
};

struct TensorFile {
    std::vector<NamedTensor> tensors;
    nlohmann::json meta = nlohmann::json::object();

    const Tensor& at(const std::string& name) const;
    bool contains(const std::string& name) const;
};

void save_tensors(const std::filesystem::path& path, const TensorFile& file);
TensorFile load_tensors(const std::filesystem::path& path);

}  // namespace robnas
