#include "advseg/checkpoint.hpp"

#include "raw_io.hpp"

namespace advseg {

using nlohmann::json;

void save_checkpoint(const std::filesystem::path& dir, const ParameterSet<float>& params, const CheckpointInfo& info) {
  detail::ensure_dir(dir);
  json entries = json::array();
  for (const auto& p : params) {
    const std::string file = p.name + ".bin";
    detail::write_f32le(dir / file, p.value.span());
    entries.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"file", file}});
  }
  json manifest = {{"format_version", info.format_version},
                   {"momentum", info.momentum},
                   {"epoch", info.epoch},
                   {"parameters", entries}};
  detail::write_json(dir / "manifest.json", manifest);
}

CheckpointInfo load_checkpoint(const std::filesystem::path& dir, ParameterSet<float>& params) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path)) throw IoError("no checkpoint manifest at " + path.string());
  const json manifest = detail::read_json(path);
  CheckpointInfo info;
  try {
    info.format_version = manifest.at("format_version").get<int>();
    info.momentum = manifest.at("momentum").get<float>();
    info.epoch = manifest.at("epoch").get<int>();
    if (info.format_version != kCheckpointFormatVersion) {
      throw IoError("unsupported checkpoint format version " + std::to_string(info.format_version));
    }
    const auto& entries = manifest.at("parameters");
    if (entries.size() != params.size()) {
      throw IoError("checkpoint " + dir.string() + " holds " + std::to_string(entries.size()) +
                    " parameters, network has " + std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& e = entries[i];
      auto& p = params[i];
      const auto name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<Shape>();
      if (name != p.name || shape != p.value.shape()) {
        throw IoError("checkpoint parameter " + name + to_string(shape) + " does not match network parameter " +
                      p.name + to_string(p.value.shape()));
      }
      auto values = detail::read_f32le(dir / e.at("file").get<std::string>(), static_cast<std::size_t>(numel(shape)));
      p.value = Tensor<float>(shape, Eigen::Map<const Eigen::ArrayXf>(values.data(), static_cast<Index>(values.size())));
    }
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint manifest " + path.string() + ": " + e.what());
  }
  return info;
}

}  // namespace advseg
