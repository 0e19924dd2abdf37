#pragma once

#include <filesystem>
#include <string>

#include "mdd/denoiser.hpp"
#include "mdd/io.hpp"
#include "mdd/schedule.hpp"

namespace mdd {

inline constexpr char kCheckpointMagic[4] = {'M', 'D', 'D', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// A trained model with the schedule it was trained under and free-form
// run metadata (scheme, seeds, data shapes).
struct Checkpoint {
  DenoiserModel<float> model;
  NoiseSchedule schedule;
  KeyValues metadata;
};

// Layout: magic "MDDC", u32 version, u32-length metadata text (key=value
// lines), u32 parameter count, then per parameter: u32-length name, u32 rank,
// u32 dims, little-endian float32 values.
std::string encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mdd
