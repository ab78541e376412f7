#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "marcos/config.hpp"
#include "marcos/params.hpp"

namespace marcos {

// Self-describing tensor container: magic, format version, a JSON header
// carrying caller metadata plus the tensor directory, then raw float64 data
// in directory order. Loading against a mismatched directory is a hard error.
struct NamedTensors {
    nlohmann::json meta;
    std::vector<std::pair<std::string, Mat<Real>>> tensors;

    const Mat<Real>* find(const std::string& name) const {
        for (const auto& [n, m] : tensors)
            if (n == name) return &m;
        return nullptr;
    }
};

void write_tensor_file(const std::string& path, const nlohmann::json& meta,
                       const std::vector<std::pair<std::string, const Mat<Real>*>>& tensors);

NamedTensors read_tensor_file(const std::string& path);

std::uint64_t file_hash(const std::string& path);

}  // namespace marcos
