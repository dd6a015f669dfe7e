#pragma once

// Binary checkpoint container.
//
//   magic "FSFCKPT\0" | u32 format version | u64 header length | header (JSON, UTF-8)
//   u32 section count, then per section:
//     u32 name length | name | u64 step | u32 entry count, then per entry:
//       u32 name length | name | u64 rows | u64 cols | rows*cols little-endian f64
//
// Sections: "params" (always), "ema" and "adam.m"/"adam.v" (optional).
// Adam hyperparameters and the model architecture live in the header.

#include "fsf/params.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>

namespace fsf {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json header = nlohmann::json::object();
  ParamStore params;
  std::optional<EmaState> ema;
  std::optional<AdamState> adam;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace fsf
