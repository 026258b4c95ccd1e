#pragma once

#include <stdexcept>
#include <string>

#include "diffwin/model.hpp"

// Checkpoint files: one JSON header line (version, model config, tensor
// directory with byte offsets) followed by raw little-endian 64-bit floats.

namespace diffwin::checkpoint {

inline constexpr const char* kVersion = "diffwin-ckpt-v1";

// Unreadable / unwritable files.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Wrong version, corrupt header, or tensor directory mismatch.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void save(const std::string& path, const model::Model& m);
model::Model load(const std::string& path);

}  // namespace diffwin::checkpoint
