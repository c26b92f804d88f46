#pragma once

#include <filesystem>

#include "polyseg/models.hpp"

namespace polyseg {

/// Single self-describing file: magic, JSON header (config + tensor manifest),
/// then raw little-endian float64 payload. Round-trips bit-exactly.
void save_checkpoint(const std::filesystem::path& path, const Model& model);

/// Throws LoadError on missing/corrupt files.
Model load_checkpoint(const std::filesystem::path& path);

} // namespace polyseg
