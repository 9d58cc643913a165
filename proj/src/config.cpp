#include "advseg/config.hpp"

#include <set>

#include "raw_io.hpp"

namespace advseg {

namespace fs = std::filesystem;

namespace {

// Reads keys of one JSON object, remembering which were consumed so that
// leftovers (typos) can be reported.
class Fields {
 public:
  Fields(const Json& j, std::string context) : j_(j), ctx_(std::move(context)) {
    if (!j_.is_object()) throw ConfigError(ctx_ + ": expected a JSON object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    if (const Json* v = raw(key)) {
      try {
        out = v->get<T>();
      } catch (const Json::exception& e) {
        throw ConfigError(ctx_ + "." + key + ": " + e.what());
      }
    }
  }

  const Json* raw(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() || it->is_null() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ConfigError(ctx_ + ": unknown key \"" + item.key() + "\"");
    }
  }

  const std::string& context() const { return ctx_; }

 private:
  const Json& j_;
  std::string ctx_;
  std::set<std::string> seen_;
};

void check_version(Fields& f) {
  int version = kSpecVersion;
  f.get("spec_version", version);
  if (version != kSpecVersion) {
    throw ConfigError(f.context() + ": unsupported spec_version " + std::to_string(version));
  }
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return (path.is_absolute() ? path : fs::absolute(base / path)).lexically_normal();
}

std::optional<fs::path> optional_path(Fields& f, const char* key, const fs::path& base) {
  std::optional<std::string> s;
  if (const Json* v = f.raw(key)) {
    if (!v->is_string()) throw ConfigError(f.context() + "." + key + ": expected a path string");
    s = v->get<std::string>();
  }
  return s ? std::optional(resolve(base, *s)) : std::nullopt;
}

fs::path required_path(Fields& f, const char* key, const fs::path& base) {
  auto p = optional_path(f, key, base);
  if (!p) throw ConfigError(f.context() + ": missing \"" + key + "\"");
  return *p;
}

Json path_json(const std::optional<fs::path>& p) { return p ? Json(p->string()) : Json(nullptr); }

// A spec given inline or as a path to a JSON file.
Json inline_or_file(const Json& v, const fs::path& base) {
  if (v.is_string()) return read_json_file(resolve(base, v.get<std::string>()));
  return v;
}

}  // namespace

Json read_json_file(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("file not found: " + path.string());
  try {
    return detail::read_json(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
}

void write_json_file(const fs::path& path, const Json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  detail::write_json(path, j);
}

Json to_json(const SegmenterSpec& s) {
  return {{"spec_version", kSpecVersion}, {"in_channels", s.in_channels},     {"classes", s.classes},
          {"pathway_fms", s.pathway_fms}, {"downsample", s.downsample},       {"hidden_fms", s.hidden_fms},
          {"slope", s.slope},             {"train_extent", s.train_extent}, {"low_train_extent", s.low_train_extent}};
}

SegmenterSpec segmenter_spec_from_json(const Json& j) {
  Fields f(j, "segmenter spec");
  check_version(f);
  SegmenterSpec s;
  f.get("in_channels", s.in_channels);
  f.get("classes", s.classes);
  f.get("pathway_fms", s.pathway_fms);
  f.get("downsample", s.downsample);
  f.get("hidden_fms", s.hidden_fms);
  f.get("slope", s.slope);
  f.get("train_extent", s.train_extent);
  f.get("low_train_extent", s.low_train_extent);
  f.finish();
  s.validate();
  return s;
}

Json to_json(const DiscriminatorSpec& s) {
  return {{"spec_version", kSpecVersion},
          {"fms", s.fms},
          {"kernel", s.kernel},
          {"domain_classes", s.domain_classes},
          {"slope", s.slope}};
}

DiscriminatorSpec discriminator_spec_from_json(const Json& j) {
  Fields f(j, "discriminator spec");
  check_version(f);
  DiscriminatorSpec s;
  f.get("fms", s.fms);
  f.get("kernel", s.kernel);
  f.get("domain_classes", s.domain_classes);
  f.get("slope", s.slope);
  f.finish();
  s.validate();
  return s;
}

Json to_json(const TrainSchedule& s) {
  return {{"alpha_ramp_start", s.alpha_ramp_start},
          {"alpha_ramp_end", s.alpha_ramp_end},
          {"alpha_max", s.alpha_max},
          {"refine_start", s.refine_start},
          {"epochs", s.epochs},
          {"batches_per_epoch", s.batches_per_epoch},
          {"lr_segmenter", s.lr_segmenter},
          {"lr_decay", s.lr_decay},
          {"lr_discriminator", s.lr_discriminator},
          {"momentum", s.momentum},
          {"seg_batch", s.seg_batch},
          {"adv_batch", s.adv_batch}};
}

TrainSchedule schedule_from_json(const Json& j) {
  Fields f(j, "schedule");
  TrainSchedule s;
  f.get("alpha_ramp_start", s.alpha_ramp_start);
  f.get("alpha_ramp_end", s.alpha_ramp_end);
  f.get("alpha_max", s.alpha_max);
  f.get("refine_start", s.refine_start);
  f.get("epochs", s.epochs);
  f.get("batches_per_epoch", s.batches_per_epoch);
  f.get("lr_segmenter", s.lr_segmenter);
  f.get("lr_decay", s.lr_decay);
  f.get("lr_discriminator", s.lr_discriminator);
  f.get("momentum", s.momentum);
  f.get("seg_batch", s.seg_batch);
  f.get("adv_batch", s.adv_batch);
  f.finish();
  return s;
}

Json to_json(const SynthConfig& s) {
  Json shifts = Json::array();
  for (const auto& c : s.target_shift) shifts.push_back({{"gain", c.gain}, {"bias", c.bias}});
  return {{"extent", s.extent},
          {"channels", s.channels},
          {"source_cases", s.source_cases},
          {"target_cases", s.target_cases},
          {"source_heldout", s.source_heldout},
          {"target_heldout", s.target_heldout},
          {"lesions_min", s.lesions_min},
          {"lesions_max", s.lesions_max},
          {"radius_min", s.radius_min},
          {"radius_max", s.radius_max},
          {"lesion_channel", s.lesion_channel},
          {"lesion_offset", s.lesion_offset},
          {"aux_lesion_offset", s.aux_lesion_offset},
          {"anatomy_weight", s.anatomy_weight},
          {"anatomy_skew", s.anatomy_skew},
          {"channel_field_weight", s.channel_field_weight},
          {"noise_std", s.noise_std},
          {"field_scale", s.field_scale},
          {"shift_enabled", s.shift_enabled},
          {"target_shift", shifts},
          {"seed", s.seed}};
}

SynthConfig synth_config_from_json(const Json& j) {
  Fields f(j, "synthetic data config");
  SynthConfig s;
  f.get("extent", s.extent);
  f.get("channels", s.channels);
  f.get("source_cases", s.source_cases);
  f.get("target_cases", s.target_cases);
  f.get("source_heldout", s.source_heldout);
  f.get("target_heldout", s.target_heldout);
  f.get("lesions_min", s.lesions_min);
  f.get("lesions_max", s.lesions_max);
  f.get("radius_min", s.radius_min);
  f.get("radius_max", s.radius_max);
  f.get("lesion_channel", s.lesion_channel);
  f.get("lesion_offset", s.lesion_offset);
  f.get("aux_lesion_offset", s.aux_lesion_offset);
  f.get("anatomy_weight", s.anatomy_weight);
  f.get("anatomy_skew", s.anatomy_skew);
  f.get("channel_field_weight", s.channel_field_weight);
  f.get("noise_std", s.noise_std);
  f.get("field_scale", s.field_scale);
  f.get("shift_enabled", s.shift_enabled);
  if (const Json* v = f.raw("target_shift")) {
    if (!v->is_array()) throw ConfigError("synthetic data config.target_shift: expected a list");
    s.target_shift.clear();
    for (const auto& e : *v) {
      Fields g(e, "synthetic data config.target_shift[]");
      ChannelShift c;
      g.get("gain", c.gain);
      g.get("bias", c.bias);
      g.finish();
      s.target_shift.push_back(c);
    }
  }
  f.get("seed", s.seed);
  f.finish();
  s.validate();
  return s;
}

TapSet taps_from_json(const Json& j) {
  if (j.is_string()) return parse_taps(j.get<std::string>());
  if (!j.is_array()) throw ConfigError("taps: expected a string like \"L4,6,8,10\" or a list");
  TapSet taps;
  for (const auto& e : j) {
    Fields f(e, "taps[]");
    std::string pathway = "post-fusion";
    TapPoint t;
    f.get("pathway", pathway);
    f.get("layer", t.layer);
    f.finish();
    t.pathway = pathway_from_string(pathway);
    taps.push_back(t);
  }
  validate_taps(taps);
  return taps;
}

Json taps_to_json(const TapSet& taps) {
  const std::string text = format_taps(taps);
  if (parse_taps(text) == taps) return text;
  Json list = Json::array();
  for (const auto& t : taps) list.push_back({{"pathway", to_string(t.pathway)}, {"layer", t.layer}});
  return list;
}

std::vector<std::string> TrainRunConfig::problems() const {
  std::vector<std::string> out;
  auto need = [&](const std::optional<fs::path>& p, const char* what, bool required) {
    if (!p) {
      if (required) out.push_back(std::string("missing data.") + what);
      return;
    }
    if (!fs::exists(*p)) out.push_back(std::string("data.") + what + ": file not found: " + p->string());
  };
  need(data.source, "source", true);
  need(data.target, "target", options.mode != TrainMode::source_only);
  need(data.val_source, "val_source", false);
  need(data.val_target, "val_target", false);
  if (!options.out_dir) out.push_back("no output directory (use --out)");
  try {
    options.validate();
  } catch (const ConfigError& e) {
    out.push_back(e.what());
  }
  return out;
}

TrainRunConfig train_config_from_json(const Json& j, const fs::path& base_dir) {
  Fields f(j, "train config");
  check_version(f);
  TrainRunConfig c;
  TrainOptions& o = c.options;
  std::string mode(to_string(o.mode));
  f.get("mode", mode);
  o.mode = train_mode_from_string(mode);
  f.get("seed", o.seed);
  if (const Json* v = f.raw("segmenter")) o.segmenter = segmenter_spec_from_json(inline_or_file(*v, base_dir));
  if (const Json* v = f.raw("discriminator")) {
    o.discriminator = discriminator_spec_from_json(inline_or_file(*v, base_dir));
  }
  if (const Json* v = f.raw("taps")) o.taps = taps_from_json(*v);
  if (const Json* v = f.raw("schedule")) o.schedule = schedule_from_json(*v);
  f.get("fg_fraction", o.fg_fraction);
  f.get("grad_clip", o.grad_clip);
  f.get("adv_mask_only", o.adv_mask_only);
  f.get("val_every", o.val_every);
  f.get("val_probe_samples", o.val_probe_samples);
  f.get("tile_extent", o.tile_extent);
  f.get("checkpoint_every", o.checkpoint_every);
  o.out_dir = optional_path(f, "out", base_dir);
  if (const Json* v = f.raw("data")) {
    Fields d(*v, "train config.data");
    c.data.source = optional_path(d, "source", base_dir);
    c.data.target = optional_path(d, "target", base_dir);
    c.data.val_source = optional_path(d, "val_source", base_dir);
    c.data.val_target = optional_path(d, "val_target", base_dir);
    d.finish();
  }
  f.finish();
  return c;
}

Json to_json(const TrainRunConfig& c) {
  const TrainOptions& o = c.options;
  return {{"spec_version", kSpecVersion},
          {"mode", to_string(o.mode)},
          {"seed", o.seed},
          {"segmenter", to_json(o.segmenter)},
          {"discriminator", to_json(o.discriminator)},
          {"taps", taps_to_json(o.taps)},
          {"schedule", to_json(o.schedule)},
          {"fg_fraction", o.fg_fraction},
          {"grad_clip", o.grad_clip},
          {"adv_mask_only", o.adv_mask_only},
          {"val_every", o.val_every},
          {"val_probe_samples", o.val_probe_samples},
          {"tile_extent", o.tile_extent},
          {"checkpoint_every", o.checkpoint_every},
          {"out", path_json(o.out_dir)},
          {"data",
           {{"source", path_json(c.data.source)},
            {"target", path_json(c.data.target)},
            {"val_source", path_json(c.data.val_source)},
            {"val_target", path_json(c.data.val_target)}}}};
}

EvalRunConfig eval_config_from_json(const Json& j, const fs::path& base_dir) {
  Fields f(j, "eval config");
  EvalRunConfig c;
  c.checkpoint = required_path(f, "checkpoint", base_dir);
  c.manifest = required_path(f, "manifest", base_dir);
  f.get("tile_extent", c.tile_extent);
  f.finish();
  if (c.tile_extent < 1) throw ConfigError("eval config: tile_extent must be >= 1");
  return c;
}

Json to_json(const EvalRunConfig& c) {
  return {{"checkpoint", c.checkpoint.string()}, {"manifest", c.manifest.string()}, {"tile_extent", c.tile_extent}};
}

ProbeRunConfig probe_config_from_json(const Json& j, const fs::path& base_dir) {
  Fields f(j, "probe config");
  ProbeRunConfig c;
  c.segmenter = required_path(f, "segmenter", base_dir);
  c.discriminator = optional_path(f, "discriminator", base_dir);
  c.source = required_path(f, "source", base_dir);
  c.target = required_path(f, "target", base_dir);
  f.get("n_samples", c.n_samples);
  f.get("seed", c.seed);
  if (const Json* v = f.raw("fresh")) {
    Fields g(*v, "probe config.fresh");
    c.fresh_source = optional_path(g, "source", base_dir);
    c.fresh_target = optional_path(g, "target", base_dir);
    if (const Json* s = g.raw("discriminator")) c.fresh_spec = discriminator_spec_from_json(inline_or_file(*s, base_dir));
    if (const Json* t = g.raw("taps")) c.fresh_taps = taps_from_json(*t);
    g.get("steps", c.fresh.steps);
    g.get("batch", c.fresh.batch);
    g.get("learning_rate", c.fresh.learning_rate);
    g.get("momentum", c.fresh.momentum);
    g.get("grad_clip", c.fresh.grad_clip);
    g.finish();
  }
  f.finish();
  if (c.n_samples < 2 || c.n_samples % 2 != 0) throw ConfigError("probe: n_samples must be even and >= 2");
  if (!c.discriminator && (!c.fresh_source || !c.fresh_target)) {
    throw ConfigError("probe: give a discriminator checkpoint or fresh.source and fresh.target manifests");
  }
  return c;
}

Json to_json(const ProbeRunConfig& c) {
  return {{"segmenter", c.segmenter.string()},
          {"discriminator", path_json(c.discriminator)},
          {"source", c.source.string()},
          {"target", c.target.string()},
          {"n_samples", c.n_samples},
          {"seed", c.seed},
          {"fresh",
           {{"source", path_json(c.fresh_source)},
            {"target", path_json(c.fresh_target)},
            {"discriminator", to_json(c.fresh_spec)},
            {"taps", taps_to_json(c.fresh_taps)},
            {"steps", c.fresh.steps},
            {"batch", c.fresh.batch},
            {"learning_rate", c.fresh.learning_rate},
            {"momentum", c.fresh.momentum},
            {"grad_clip", c.fresh.grad_clip}}}};
}

}  // namespace advseg
