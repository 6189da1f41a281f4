#pragma once

#include <string>

#include "agrikd/models.hpp"

namespace agrikd {

// Self-describing binary container (little-endian, magic "AGKD1"):
//   magic[5] | u64 entry count | per entry:
//   u32 name length | name bytes | u32 rank | u64 dims... | f64 row-major values
std::string checkpoint_bytes(const NamedParams& params);
void save_checkpoint(const std::string& path, const NamedParams& params);
NamedParams load_checkpoint(const std::string& path);

/// Copies values from a loaded checkpoint into live parameters; names and
/// shapes must match exactly.
void restore_parameters(const NamedParams& target, const NamedParams& source);

}  // namespace agrikd
