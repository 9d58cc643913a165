#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "advseg/config.hpp"
#include "advseg/evaluation.hpp"
#include "advseg/synthdata.hpp"
#include "advseg/training.hpp"
#include "advseg/volume.hpp"

namespace fs = std::filesystem;
using namespace advseg;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "JSON config file");
  cmd->add_option("--seed", f.seed, "Run seed (overrides the config)");
  cmd->add_option("--out", f.out, "Output directory");
}

// A run.json written by an earlier run wraps the resolved config.
Json load_config(const CommonFlags& f) {
  if (f.config.empty()) return Json::object();
  Json j = read_json_file(f.config);
  if (j.is_object() && j.contains("command") && j.contains("config")) return j.at("config");
  return j;
}

fs::path config_dir(const CommonFlags& f) {
  return f.config.empty() ? fs::current_path() : fs::absolute(fs::path(f.config)).parent_path();
}

fs::path require_out(const CommonFlags& f) {
  if (f.out.empty()) throw ConfigError("--out is required");
  return fs::absolute(f.out).lexically_normal();
}

std::vector<CaseRecord> load_split(const fs::path& manifest, LabelAccess access) {
  auto cases = load_cases(read_manifest(manifest), access);
  if (cases.empty()) throw ConfigError("manifest " + manifest.string() + " lists no cases");
  return cases;
}

void check_channels(const std::vector<CaseRecord>& cases, const SegmenterSpec& spec) {
  for (const auto& c : cases) {
    if (c.channels() != spec.in_channels) {
      throw ConfigError("case " + c.id + " has " + std::to_string(c.channels()) + " channels; the segmenter expects " +
                        std::to_string(spec.in_channels));
    }
  }
}

int cmd_gen_data(const CommonFlags& f) {
  SynthConfig cfg = synth_config_from_json(load_config(f));
  if (f.seed) cfg.seed = *f.seed;
  cfg.validate();
  const fs::path out = require_out(f);
  const SynthDatasetFiles files = generate_dataset(cfg, out);
  write_json_file(out / "run.json", {{"command", "gen-data"}, {"config", to_json(cfg)}});
  std::cout << files.manifest.string() << '\n';
  return 0;
}

struct TrainFlags {
  std::string mode;
  std::optional<double> alpha_max;
  std::string taps;
  std::optional<int> epochs;
};

int cmd_train(const CommonFlags& f, const TrainFlags& t) {
  if (f.config.empty()) throw ConfigError("train needs --config");
  Json j = load_config(f);
  TrainRunConfig rc = train_config_from_json(j, config_dir(f));
  TrainOptions& o = rc.options;
  if (f.seed) o.seed = *f.seed;
  if (!t.mode.empty()) o.mode = train_mode_from_string(t.mode);
  if (t.alpha_max) o.schedule.alpha_max = *t.alpha_max;
  if (!t.taps.empty()) o.taps = parse_taps(t.taps);
  if (t.epochs) o.schedule.epochs = *t.epochs;
  if (!f.out.empty()) o.out_dir = require_out(f);

  if (const auto problems = rc.problems(); !problems.empty()) {
    for (const auto& p : problems) std::cerr << "config error: " << p << '\n';
    return kExitConfig;
  }

  TrainData data;
  data.source = load_split(*rc.data.source, LabelAccess::read);
  if (o.mode == TrainMode::uda) data.target = load_split(*rc.data.target, LabelAccess::blind);
  if (o.mode == TrainMode::supervised_both) data.target = load_split(*rc.data.target, LabelAccess::read);
  if (rc.data.val_source) data.val_source = load_split(*rc.data.val_source, LabelAccess::read);
  if (rc.data.val_target) data.val_target = load_split(*rc.data.val_target, LabelAccess::read);
  for (const auto* set : {&data.source, &data.target, &data.val_source, &data.val_target}) check_channels(*set, o.segmenter);

  const fs::path out = *o.out_dir;
  fs::create_directories(out);
  write_json_file(out / "run.json", {{"command", "train"}, {"config", to_json(rc)}});

  const TrainResult result = train(o, data, [&](const EpochRecord& r) {
    std::fprintf(stderr, "epoch %d/%d  L_seg %.4f", r.epoch, o.schedule.epochs, r.l_seg);
    if (r.l_adv) std::fprintf(stderr, "  L_adv %.4f  alpha %.4f", *r.l_adv, r.alpha);
    if (r.val_dsc) std::fprintf(stderr, "  val_dsc %.4f", *r.val_dsc);
    if (r.disc_acc_val) std::fprintf(stderr, "  disc_acc_val %.3f", *r.disc_acc_val);
    std::fprintf(stderr, "\n");
  });
  write_history_csv(out / "metrics.csv", result.history);
  std::cout << (out / "metrics.csv").string() << '\n';
  return 0;
}

int cmd_eval(const CommonFlags& f, const std::string& checkpoint, const std::string& manifest) {
  Json j = load_config(f);
  if (!checkpoint.empty()) j["checkpoint"] = fs::absolute(checkpoint).string();
  if (!manifest.empty()) j["manifest"] = fs::absolute(manifest).string();
  const EvalRunConfig c = eval_config_from_json(j, config_dir(f));
  const fs::path out = require_out(f);
  Segmenter<float> seg = load_segmenter(c.checkpoint);
  const auto cases = load_split(c.manifest, LabelAccess::read);
  check_channels(cases, seg.spec());
  fs::create_directories(out);
  write_json_file(out / "run.json", {{"command", "eval"}, {"config", to_json(c)}});
  const auto metrics = evaluate_cases(seg, cases, c.tile_extent);
  write_metrics_csv(out / "metrics.csv", metrics);
  const MetricSummary s = summarize(metrics);
  std::printf("DSC %.4f +- %.4f  recall %.4f  precision %.4f  (%zu cases)\n", s.dsc.mean, s.dsc.std, s.recall.mean,
              s.precision.mean, metrics.size());
  return 0;
}

int cmd_probe(const CommonFlags& f, std::optional<Index> n_samples) {
  if (f.config.empty()) throw ConfigError("probe needs --config");
  Json j = load_config(f);
  if (n_samples) j["n_samples"] = *n_samples;
  if (f.seed) j["seed"] = *f.seed;
  const ProbeRunConfig c = probe_config_from_json(j, config_dir(f));
  Segmenter<float> seg = load_segmenter(c.segmenter);
  const auto source = load_split(c.source, LabelAccess::blind);
  const auto target = load_split(c.target, LabelAccess::blind);
  check_channels(source, seg.spec());
  check_channels(target, seg.spec());
  auto views = [](const std::vector<CaseRecord>& cases) {
    std::vector<UnlabelledCase> v;
    for (const auto& x : cases) v.push_back(x.unlabelled());
    return v;
  };

  std::optional<fs::path> out;
  if (!f.out.empty()) {
    out = require_out(f);
    fs::create_directories(*out);
    write_json_file(*out / "run.json", {{"command", "probe"}, {"config", to_json(c)}});
  }

  double accuracy = 0.0;
  Rng rng = make_stream(c.seed, streams::kValidation);
  if (c.discriminator) {
    LoadedDiscriminator d = load_discriminator(*c.discriminator);
    accuracy = probe_domain_accuracy(seg, d.discriminator, d.taps, views(source), views(target), c.n_samples, rng);
  } else {
    const auto fs_source = load_split(*c.fresh_source, LabelAccess::blind);
    const auto fs_target = load_split(*c.fresh_target, LabelAccess::blind);
    FreshProbeOptions opts = c.fresh;
    opts.seed = c.seed;
    Discriminator<float> probe =
        train_fresh_probe(seg, c.fresh_spec, c.fresh_taps, views(fs_source), views(fs_target), opts);
    accuracy = probe_domain_accuracy(seg, probe, c.fresh_taps, views(source), views(target), c.n_samples, rng);
  }
  if (out) write_json_file(*out / "probe.json", {{"accuracy", accuracy}, {"n_samples", c.n_samples}});
  std::printf("%.6f\n", accuracy);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial domain adaptation for 3-D lesion segmentation"};
  app.require_subcommand(1);

  CommonFlags gen_flags, train_flags, eval_flags, probe_flags;
  TrainFlags tf;
  std::string eval_checkpoint, eval_manifest;
  std::optional<Index> n_samples;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic two-domain dataset");
  add_common(gen, gen_flags);

  auto* tr = app.add_subcommand("train", "Train a segmenter (source-only, uda or supervised-both)");
  add_common(tr, train_flags);
  tr->add_option("--mode", tf.mode, "source-only | uda | supervised-both");
  tr->add_option("--alpha-max", tf.alpha_max, "Final adversarial weight");
  tr->add_option("--taps", tf.taps, "Tapped layers, e.g. L10 or L4,6,8,10");
  tr->add_option("--epochs", tf.epochs, "Number of epochs");

  auto* ev = app.add_subcommand("eval", "Dense inference and metrics over a manifest");
  add_common(ev, eval_flags);
  ev->add_option("--checkpoint", eval_checkpoint, "Segmenter checkpoint directory");
  ev->add_option("--manifest", eval_manifest, "Manifest of labelled cases");

  auto* pr = app.add_subcommand("probe", "Held-out domain classification accuracy");
  add_common(pr, probe_flags);
  pr->add_option("--n-samples", n_samples, "Number of held-out segments");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*gen) return cmd_gen_data(gen_flags);
    if (*tr) return cmd_train(train_flags, tf);
    if (*ev) return cmd_eval(eval_flags, eval_checkpoint, eval_manifest);
    if (*pr) return cmd_probe(probe_flags, n_samples);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitConfig;
}
