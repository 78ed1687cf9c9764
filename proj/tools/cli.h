#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "fss/decoder.h"

namespace fss::cli {

// Every knob of a run. A JSON config file uses these field names (decoder
// fields flattened in), and explicit flags override it.
struct RunConfig {
  DecoderConfig decoder;
  std::string manifest;
  int fold = 0;
  std::string dataset_style = "synthetic";
  std::size_t k = 1;
  std::size_t iterations = 300;
  double lr = 0.001;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::string out = ".";
  std::size_t episodes = 1000;
  std::string checkpoint;
  std::size_t episode_pool = 0;
  std::size_t episode = 0;
  std::size_t classes = 8;
  std::size_t images_per_class = 8;

  // ConfigError on out-of-range values.
  void validate() const;
};

// Overlays the fields present in a JSON object. ConfigError on unknown keys
// or wrong types.
void apply_config_json(RunConfig& config, const std::string& json_text);

// Canonical JSON of the fields that influence results. Paths and the worker
// count are left out, so the hash is stable across machines and threads.
std::string result_config_json(const RunConfig& config);

// Entry point of the `fss` executable. Returns the process exit code:
// 0 ok, 1 usage or configuration error, 2 data or format error, 3 numeric
// failure.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace fss::cli
