#pragma once

#include <filesystem>
#include <string>

#include "fss/decoder.h"

namespace fss {

// Canonical (sorted-key, compact) JSON of a decoder configuration.
std::string config_to_json(const DecoderConfig& config);
// Parses a JSON object; absent fields keep their defaults. ConfigError on bad input.
DecoderConfig config_from_json(const std::string& text);

struct Checkpoint {
  DecoderConfig config;
  DecoderParams params;
};

// Writes one FMTC file per parameter plus manifest.json listing the config
// and the name -> file mapping. Float payloads round-trip bit-exactly.
void save_checkpoint(const std::filesystem::path& dir, const DecoderParams& params,
                     const DecoderConfig& config);

// Loads and checks that every tensor has the dims the config implies.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace fss
