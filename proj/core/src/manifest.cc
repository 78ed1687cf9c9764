#include "fss/manifest.h"

#include <fstream>
#include <sstream>

#include "fss/container.h"
#include "fss/kernels.h"
#include "json.hpp"

namespace fss {

using nlohmann::json;

namespace {

std::map<int, std::string> parse_id_map(const json& j, const char* what) {
  if (!j.is_object()) throw DataError(std::string("manifest field '") + what + "' must be an object");
  std::map<int, std::string> out;
  for (const auto& [k, v] : j.items()) {
    std::size_t used = 0;
    int id = 0;
    try {
      id = std::stoi(k, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != k.size() || id < 0) {
      throw DataError(std::string("manifest '") + what + "' key '" + k + "' is not a class id");
    }
    out.emplace(id, v.get<std::string>());
  }
  return out;
}

json id_map(const std::map<int, std::string>& m) {
  json j = json::object();
  for (const auto& [k, v] : m) j[std::to_string(k)] = v;
  return j;
}

[[noreturn]] void record_error(const ManifestRecord& r, const std::string& what) {
  throw DataError("manifest record '" + r.image_id + "': " + what);
}

}  // namespace

Manifest Manifest::parse(const std::string& json_text, std::filesystem::path base_dir) {
  Manifest m;
  m.base_dir = std::move(base_dir);
  try {
    const json j = json::parse(json_text);
    m.dataset_id = j.at("dataset_id").get<std::string>();
    const json& g = j.at("grid");
    m.grid.h = g.at("h").get<std::size_t>();
    m.grid.w = g.at("w").get<std::size_t>();
    m.grid.c = g.at("c").get<std::size_t>();
    m.grid.layers = g.value("layers", kNumLayers);
    m.grid.c_vl = g.value("c_vl", std::size_t{0});
    m.classes = parse_id_map(j.at("classes"), "classes");
    if (j.contains("text_embeddings")) {
      m.text_embeddings = parse_id_map(j.at("text_embeddings"), "text_embeddings");
    }
    for (const json& r : j.at("records")) {
      ManifestRecord rec;
      rec.image_id = r.at("image_id").get<std::string>();
      rec.class_ids = r.at("class_ids").get<std::vector<int>>();
      rec.feature_path = r.at("feature_path").get<std::string>();
      if (r.contains("vl_feature_path") && !r.at("vl_feature_path").is_null()) {
        rec.vl_feature_path = r.at("vl_feature_path").get<std::string>();
      }
      rec.mask_path = r.at("mask_path").get<std::string>();
      m.records.push_back(std::move(rec));
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed manifest: ") + e.what());
  }
  if (m.grid.layers != kNumLayers) {
    throw DataError("manifest declares " + std::to_string(m.grid.layers) + " layers, 12 required");
  }
  if (m.grid.h == 0 || m.grid.w == 0 || m.grid.c == 0) throw DataError("manifest grid has a zero extent");
  for (const auto& r : m.records) {
    if (r.class_ids.empty()) record_error(r, "no class ids");
    for (int id : r.class_ids) {
      if (!m.classes.count(id)) record_error(r, "unknown class id " + std::to_string(id));
    }
  }
  return m;
}

Manifest Manifest::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("manifest not found: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.parent_path());
}

std::string Manifest::to_json() const {
  json records_j = json::array();
  for (const auto& r : records) {
    json rj{{"image_id", r.image_id},
            {"class_ids", r.class_ids},
            {"feature_path", r.feature_path},
            {"mask_path", r.mask_path}};
    if (r.vl_feature_path) rj["vl_feature_path"] = *r.vl_feature_path;
    records_j.push_back(std::move(rj));
  }
  const json j{{"dataset_id", dataset_id},
               {"grid", {{"h", grid.h}, {"w", grid.w}, {"c", grid.c}, {"layers", grid.layers}, {"c_vl", grid.c_vl}}},
               {"classes", id_map(classes)},
               {"records", records_j},
               {"text_embeddings", id_map(text_embeddings)}};
  return j.dump(2) + "\n";
}

void Manifest::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write manifest " + path.string());
  out << to_json();
}

void Manifest::validate() const {
  auto header = [&](const ManifestRecord& r, const std::string& rel) {
    const auto p = resolve(rel);
    if (!std::filesystem::exists(p)) record_error(r, "missing file " + p.string());
    try {
      return io::read_tensor_header(p);
    } catch (const FormatError& e) {
      record_error(r, e.what());
    }
  };
  const Shape feature_dims{grid.layers, grid.h, grid.w, grid.c};
  for (const auto& r : records) {
    const auto fh = header(r, r.feature_path);
    if (fh.dims != feature_dims) {
      record_error(r, "feature dims " + shape_string(fh.dims) + " disagree with grid " +
                          shape_string(feature_dims));
    }
    if (r.vl_feature_path) {
      const auto vh = header(r, *r.vl_feature_path);
      const Shape want{grid.h, grid.w, grid.c_vl};
      if (vh.dims != want) {
        record_error(r, "VL feature dims " + shape_string(vh.dims) + ", expected " + shape_string(want));
      }
    } else if (has_vl()) {
      record_error(r, "grid declares VL features but the record has none");
    }
    const auto mh = header(r, r.mask_path);
    const bool ok = (mh.dims.size() == 3 && mh.dims[0] == r.class_ids.size()) ||
                    (mh.dims.size() == 2 && r.class_ids.size() == 1);
    if (!ok) record_error(r, "mask dims " + shape_string(mh.dims) + " do not match its class list");
  }
  for (const auto& [id, rel] : text_embeddings) {
    if (!classes.count(id)) throw DataError("text embedding for unknown class " + std::to_string(id));
    const auto p = resolve(rel);
    if (!std::filesystem::exists(p)) throw DataError("missing text embedding file " + p.string());
    const auto th = io::read_tensor_header(p);
    if (th.dims != Shape{grid.c_vl}) {
      throw DataError("text embedding of class " + std::to_string(id) + " has dims " +
                      shape_string(th.dims) + ", expected [" + std::to_string(grid.c_vl) + "]");
    }
  }
}

std::vector<int> Manifest::class_ids() const {
  std::vector<int> ids;
  for (const auto& [id, name] : classes) ids.push_back(id);
  return ids;
}

std::vector<std::size_t> Manifest::records_with(int class_id) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    for (int id : records[i].class_ids) {
      if (id == class_id) {
        out.push_back(i);
        break;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

Tensor LoadedImage::mask_for(int class_id) const {
  for (std::size_t j = 0; j < class_ids.size(); ++j) {
    if (class_ids[j] != class_id) continue;
    const std::size_t h0 = masks.dim(1), w0 = masks.dim(2), n = h0 * w0;
    const float* src = masks.data() + j * n;
    return Tensor({h0, w0}, std::vector<float>(src, src + n));
  }
  throw DataError("image has no mask for class " + std::to_string(class_id));
}

Dataset::Dataset(Manifest manifest, std::size_t cache_capacity)
    : manifest_(std::move(manifest)), capacity_(std::max<std::size_t>(cache_capacity, 1)) {}

std::shared_ptr<const LoadedImage> Dataset::image(std::size_t record) const {
  {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = images_.find(record);
    if (it != images_.end()) return it->second;
  }
  const ManifestRecord& r = manifest_.records.at(record);
  auto img = std::make_shared<LoadedImage>();
  const Tensor feats = io::read_tensor(manifest_.resolve(r.feature_path));
  const Shape want{manifest_.grid.layers, manifest_.grid.h, manifest_.grid.w, manifest_.grid.c};
  if (feats.dims() != want) record_error(r, "feature dims " + shape_string(feats.dims()));
  img->features = FeatureStack::from_tensor(feats, manifest_.dataset_id);
  if (r.vl_feature_path) {
    Tensor vl = io::read_tensor(manifest_.resolve(*r.vl_feature_path));
    if (vl.dims() != Shape{manifest_.grid.h, manifest_.grid.w, manifest_.grid.c_vl}) {
      record_error(r, "VL feature dims " + shape_string(vl.dims()));
    }
    img->vl_features = std::move(vl);
  }
  Tensor masks = io::read_tensor(manifest_.resolve(r.mask_path));
  if (masks.rank() == 2 && r.class_ids.size() == 1) {
    masks = std::move(masks).reshaped({1, masks.dim(0), masks.dim(1)});
  }
  if (masks.rank() != 3 || masks.dim(0) != r.class_ids.size()) {
    record_error(r, "mask dims " + shape_string(masks.dims()));
  }
  kernels::expect_binary(masks, ("mask of " + r.image_id).c_str());
  img->masks = std::move(masks);
  img->class_ids = r.class_ids;

  std::lock_guard<std::mutex> lock(mu_);
  auto [it, inserted] = images_.emplace(record, std::move(img));
  if (inserted) {
    order_.push_back(record);
    while (order_.size() > capacity_) {
      images_.erase(order_.front());
      order_.pop_front();
    }
  }
  return it->second;
}

std::shared_ptr<const TextEmbedding> Dataset::text(int class_id) const {
  {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = texts_.find(class_id);
    if (it != texts_.end()) return it->second;
  }
  auto ref = manifest_.text_embeddings.find(class_id);
  if (ref == manifest_.text_embeddings.end()) {
    throw DataError("no text embedding for class " + std::to_string(class_id));
  }
  auto t = std::make_shared<TextEmbedding>();
  t->vector = io::read_tensor(manifest_.resolve(ref->second));
  t->class_id = class_id;
  auto name = manifest_.classes.find(class_id);
  if (name != manifest_.classes.end()) t->class_name = name->second;
  t->validate();
  std::lock_guard<std::mutex> lock(mu_);
  return texts_.emplace(class_id, std::move(t)).first->second;
}

}  // namespace fss
