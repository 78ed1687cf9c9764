#include "fss/checkpoint.h"

#include <algorithm>
#include <fstream>

#include "fss/container.h"
#include "json.hpp"

namespace fss {

using nlohmann::json;

namespace {

json config_object(const DecoderConfig& c) {
  return json{{"d", c.d},
              {"gn_groups", c.gn_groups},
              {"num_dscm", c.num_dscm},
              {"dscm_repeats", c.dscm_repeats},
              {"support_stride", c.support_stride},
              {"fusion", fusion_name(c.fusion)},
              {"m", c.m},
              {"use_text", c.use_text}};
}

DecoderConfig config_from_object(const json& j) {
  if (!j.is_object()) throw ConfigError("decoder config must be a JSON object");
  DecoderConfig c;
  try {
    if (j.contains("d")) c.d = j.at("d").get<std::size_t>();
    if (j.contains("gn_groups")) c.gn_groups = j.at("gn_groups").get<std::size_t>();
    if (j.contains("num_dscm")) c.num_dscm = j.at("num_dscm").get<std::size_t>();
    if (j.contains("dscm_repeats")) c.dscm_repeats = j.at("dscm_repeats").get<std::size_t>();
    if (j.contains("support_stride")) c.support_stride = j.at("support_stride").get<int>();
    if (j.contains("fusion")) c.fusion = parse_fusion(j.at("fusion").get<std::string>());
    if (j.contains("m")) c.m = j.at("m").get<int>();
    if (j.contains("use_text")) c.use_text = j.at("use_text").get<bool>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad decoder config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace

std::string config_to_json(const DecoderConfig& config) { return config_object(config).dump(); }

DecoderConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_object(j);
}

void save_checkpoint(const std::filesystem::path& dir, const DecoderParams& params,
                     const DecoderConfig& config) {
  std::filesystem::create_directories(dir);
  json tensors = json::array();
  for (const auto& p : params.tensors()) {
    const std::string file = p.name + ".fmtc";
    io::write_tensor(dir / file, p.value, io::DType::kF32);
    tensors.push_back(json{{"name", p.name}, {"file", file}, {"dims", p.value.dims()}});
  }
  const json manifest{{"format", "fss-checkpoint"},
                      {"version", 1},
                      {"config", config_object(config)},
                      {"tensors", tensors}};
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw DataError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw DataError("checkpoint manifest not found: " + path.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("checkpoint manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  if (manifest.value("format", "") != "fss-checkpoint") {
    throw DataError(path.string() + " is not a checkpoint manifest");
  }
  Checkpoint ck;
  ck.config = config_from_object(manifest.at("config"));
  // The expected layout comes from a fresh init of the same config.
  const DecoderParams expected = init_params<float>(ck.config, 0);
  const json& tensors = manifest.at("tensors");
  if (!tensors.is_array() || tensors.size() != expected.tensors().size()) {
    throw DataError("checkpoint lists " + std::to_string(tensors.size()) + " tensors, config needs " +
                    std::to_string(expected.tensors().size()));
  }
  for (const auto& ref : expected.tensors()) {
    const auto it = std::find_if(tensors.begin(), tensors.end(), [&](const json& t) {
      return t.value("name", "") == ref.name;
    });
    if (it == tensors.end()) throw DataError("checkpoint is missing parameter " + ref.name);
    Tensor value = io::read_tensor(dir / it->at("file").get<std::string>());
    if (value.dims() != ref.value.dims()) {
      throw DataError("parameter " + ref.name + " has dims " + shape_string(value.dims()) +
                      ", expected " + shape_string(ref.value.dims()));
    }
    ck.params.add(ref.name, std::move(value));
  }
  return ck;
}

}  // namespace fss
