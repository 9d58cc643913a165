#include "advseg/volume.hpp"

#include "raw_io.hpp"

namespace advseg {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Domain d) { return d == Domain::source ? "S" : "T"; }

Domain domain_from_string(std::string_view s) {
  if (s == "S") return Domain::source;
  if (s == "T") return Domain::target;
  throw ConfigError("domain must be \"S\" or \"T\", got \"" + std::string(s) + "\"");
}

Extent3 CaseRecord::extent() const {
  if (image.rank() != 4) throw ShapeError("case image must be [C,X,Y,Z], got " + to_string(image.shape()));
  return {image.extent(1), image.extent(2), image.extent(3)};
}

void CaseRecord::validate() const {
  const Extent3 e = extent();
  if (labels && labels->extent != e) {
    throw ShapeError("case " + id + ": label extent " + to_string(labels->extent) + " != image extent " + to_string(e));
  }
  if (mask && mask->extent != e) {
    throw ShapeError("case " + id + ": mask extent " + to_string(mask->extent) + " != image extent " + to_string(e));
  }
}

namespace {

fs::path raw_path(const fs::path& sidecar) {
  fs::path p = sidecar;
  return p.replace_extension(".raw");
}

json sidecar(const Shape& shape, std::string_view dtype, Domain domain) {
  return {{"shape", shape}, {"dtype", dtype}, {"order", "row-major"}, {"domain", to_string(domain)}};
}

json read_sidecar(const fs::path& path, std::string_view dtype) {
  json j = detail::read_json(path);
  try {
    if (j.at("dtype").get<std::string>() != dtype) {
      throw IoError(path.string() + ": expected dtype " + std::string(dtype));
    }
    if (j.at("order").get<std::string>() != "row-major") throw IoError(path.string() + ": order must be row-major");
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  return j;
}

}  // namespace

void write_volume(const fs::path& stem, const Tensor<float>& image, Domain domain) {
  fs::path side = stem;
  side += ".json";
  detail::write_json(side, sidecar(image.shape(), "f32le", domain));
  detail::write_f32le(raw_path(side), image.span());
}

void write_voxel_map(const fs::path& stem, const VoxelMap& map, Domain domain) {
  fs::path side = stem;
  side += ".json";
  detail::write_json(side, sidecar(Shape(map.extent.begin(), map.extent.end()), "u8", domain));
  detail::write_u8(raw_path(side), map.values);
}

Tensor<float> read_volume(const fs::path& path) {
  const json j = read_sidecar(path, "f32le");
  const auto shape = j.at("shape").get<Shape>();
  if (shape.size() != 4) throw IoError(path.string() + ": image shape must be [C,X,Y,Z]");
  auto values = detail::read_f32le(raw_path(path), static_cast<std::size_t>(numel(shape)));
  return Tensor<float>(shape, Eigen::Map<const Eigen::ArrayXf>(values.data(), static_cast<Index>(values.size())));
}

VoxelMap read_voxel_map(const fs::path& path) {
  const json j = read_sidecar(path, "u8");
  auto shape = j.at("shape").get<Shape>();
  if (shape.size() == 4 && shape[0] == 1) shape.erase(shape.begin());
  if (shape.size() != 3) throw IoError(path.string() + ": label shape must be [X,Y,Z]");
  VoxelMap m({shape[0], shape[1], shape[2]});
  auto bytes = detail::read_bytes(raw_path(path));
  if (static_cast<Index>(bytes.size()) != m.size()) throw IoError(raw_path(path).string() + ": size mismatch");
  std::copy(bytes.begin(), bytes.end(), m.values.begin());
  return m;
}

void write_manifest(const fs::path& path, const DatasetManifest& manifest) {
  json list = json::array();
  for (const auto& c : manifest.cases) {
    list.push_back({{"case_id", c.case_id},
                    {"image", c.image},
                    {"labels", c.labels ? json(*c.labels) : json(nullptr)},
                    {"mask", c.mask ? json(*c.mask) : json(nullptr)},
                    {"domain", to_string(c.domain)}});
  }
  detail::write_json(path, list);
}

DatasetManifest read_manifest(const fs::path& path) {
  const json list = detail::read_json(path);
  if (!list.is_array()) throw IoError(path.string() + ": manifest must be a JSON list");
  DatasetManifest m;
  m.base_dir = path.parent_path();
  auto optional_path = [](const json& v) -> std::optional<std::string> {
    if (v.is_null()) return std::nullopt;
    return v.get<std::string>();
  };
  try {
    for (const auto& e : list) {
      m.cases.push_back({e.at("case_id").get<std::string>(), e.at("image").get<std::string>(),
                         optional_path(e.value("labels", json(nullptr))), optional_path(e.value("mask", json(nullptr))),
                         domain_from_string(e.at("domain").get<std::string>())});
    }
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  return m;
}

std::vector<CaseRecord> load_cases(const DatasetManifest& manifest, LabelAccess access) {
  std::vector<CaseRecord> cases;
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : manifest.base_dir / p; };
  for (const auto& e : manifest.cases) {
    CaseRecord c;
    c.id = e.case_id;
    c.domain = e.domain;
    c.image = read_volume(resolve(e.image));
    if (access == LabelAccess::read && e.labels) c.labels = read_voxel_map(resolve(*e.labels));
    if (e.mask) c.mask = read_voxel_map(resolve(*e.mask));
    c.validate();
    cases.push_back(std::move(c));
  }
  return cases;
}

}  // namespace advseg
