#pragma once

#include <filesystem>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "forenx/config.hpp"
#include "forenx/model.hpp"

namespace forenx {

struct AdapterRecord {
    std::string module;  // e.g. "lm.blocks.0.q_proj"
    int rank = 0;
    double alpha = 0.0;
    double dropout = 0.0;
};

struct CheckpointInfo {
    int stage = 0;
    std::string fingerprint;
    ModelConfig config;
    std::vector<AdapterRecord> adapters;
    std::vector<std::string> tensor_names;
};

/// Single-file archive: 8-byte magic, format version, JSON header (config, tokenizer,
/// adapters, tensor table), then raw little-endian doubles. Written to a temporary file
/// and renamed into place so readers never see a partial checkpoint.
void save_checkpoint(const ForenxModel& model, int stage, const std::filesystem::path& file);

CheckpointInfo read_checkpoint_info(const std::filesystem::path& file);

/// Rebuilds the model, its adapters and all tensors. Any missing, extra or mis-shaped
/// tensor is an error.
std::unique_ptr<ForenxModel> load_checkpoint(const std::filesystem::path& file,
                                             CheckpointInfo* info = nullptr);

/// Overwrites the tensors of `groups` in an existing model from a checkpoint. Every such
/// tensor of the model must be present in the file with the same shape.
void load_groups(ForenxModel& model, const std::filesystem::path& file,
                 const std::set<ParamGroup>& groups);

/// Writes `content` to a sibling temporary file, then renames it over `file`.
void write_file_atomic(const std::filesystem::path& file, const std::string& content);

}  // namespace forenx
