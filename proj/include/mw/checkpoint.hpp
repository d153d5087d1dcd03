#pragma once

// Checkpoint layout: one little-endian fp32 file per tensor
// ("WPT0", rank u8, extents u32[rank], data) plus manifest.json mapping
// parameter names to files.

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "mw/autograd.hpp"

namespace mw {

void write_tensor_file(const std::filesystem::path& path, const Tensor<float>& t);
Tensor<float> read_tensor_file(const std::filesystem::path& path);

// meta is stored verbatim under "meta" in the manifest.
void save_checkpoint(const std::filesystem::path& dir, const std::vector<const Param<float>*>& params,
                     const std::string& config_hash, const nlohmann::json& meta = nlohmann::json::object());

// Fills every listed parameter by name; throws std::runtime_error for a
// missing name or ShapeError for an extent mismatch. Returns the manifest.
nlohmann::json load_checkpoint(const std::filesystem::path& dir, const std::vector<Param<float>*>& params);

nlohmann::json read_manifest(const std::filesystem::path& dir);

}  // namespace mw
