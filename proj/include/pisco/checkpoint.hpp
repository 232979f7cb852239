#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pisco/autograd.hpp"

namespace pisco {
inline namespace PISCO_ABI {

// Layout: "PSCO", u32 version, then until end of file one record per tensor:
// u32 name length, UTF-8 name, u32 rank, rank x u64 dims, f32 payload.
// All integers and floats are little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
};

void save_checkpoint(const std::filesystem::path& path, std::span<const Parameter* const> params);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);
/// Copy stored values into params by name. Every param must be present with
/// a matching shape.
void load_checkpoint(const std::filesystem::path& path, std::span<Parameter* const> params);

}  // namespace PISCO_ABI
}  // namespace pisco
