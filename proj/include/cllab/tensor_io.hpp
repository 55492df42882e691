#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "cllab/tensor.hpp"

namespace cllab {

/// Named-tensor directory format shared by checkpoints, adapters and MOE
/// banks: a manifest.json listing {name, shape, dtype, file, byte_len} plus
/// one raw little-endian row-major blob per tensor, no header.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void write_tensor_dir(const std::filesystem::path& dir, const NamedTensors& tensors);

/// Loads and validates a tensor directory. Manifest entries are checked
/// against blob sizes; mismatches raise FormatError naming the tensor.
NamedTensors read_tensor_dir(const std::filesystem::path& dir);

// Small JSON-file helpers used by every on-disk artifact.
void write_text_file(const std::filesystem::path& p, const std::string& text);
std::string read_text_file(const std::filesystem::path& p);

}  // namespace cllab
