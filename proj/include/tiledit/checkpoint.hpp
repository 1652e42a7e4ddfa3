#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "tiledit/diffusion.hpp"
#include "tiledit/dit.hpp"

namespace tiledit {

class CheckpointError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ToyDiT model;
  DiffusionSchedule schedule;
};

/// Binary layout: "EVDT", u32 version, u64 metadata length, JSON metadata,
/// then every tensor as little-endian doubles in metadata order. All
/// integers are little-endian.
///
/// Layer masks are written as separate mask files next to the checkpoint
/// (`<file>.mask<j>.json`) and referenced by relative name.
void save_checkpoint(const std::string& path, const ToyDiT& m, const DiffusionSchedule& s);
Checkpoint load_checkpoint(const std::string& path);

/// Paths of the mask files that save_checkpoint writes for `path`.
std::vector<std::string> checkpoint_mask_paths(const std::string& path, std::size_t layers);

}  // namespace tiledit
