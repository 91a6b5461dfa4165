#pragma once

// Versioned binary checkpoints: a JSON manifest (config, seed, progress,
// history) followed by named float64 tensors for parameters and optimizer
// moments. Loading restores every value bit for bit.

#include "cgdetr/train.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <memory>

namespace cgdetr::checkpoint {

inline constexpr std::uint32_t kVersion = 1;

void save(const std::filesystem::path& path, const Trainer& trainer);

/// Rebuilds the trainer from the embedded manifest and restores all tensors.
/// Throws IoError on a malformed file, ShapeError on a layout mismatch.
std::unique_ptr<Trainer> load(const std::filesystem::path& path);

/// The embedded manifest only.
nlohmann::json read_manifest(const std::filesystem::path& path);

}  // namespace cgdetr::checkpoint
