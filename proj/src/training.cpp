#include "advseg/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "advseg/config.hpp"

namespace advseg {

namespace fs = std::filesystem;

std::string_view to_string(TrainMode m) {
  switch (m) {
    case TrainMode::source_only: return "source-only";
    case TrainMode::uda: return "uda";
    case TrainMode::supervised_both: return "supervised-both";
  }
  return "?";
}

TrainMode train_mode_from_string(std::string_view s) {
  if (s == "source-only") return TrainMode::source_only;
  if (s == "uda") return TrainMode::uda;
  if (s == "supervised-both") return TrainMode::supervised_both;
  throw ConfigError("mode must be source-only, uda or supervised-both, got \"" + std::string(s) + "\"");
}

void TrainSchedule::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("schedule: " + what);
  };
  require(alpha_ramp_start >= 0 && alpha_ramp_end > alpha_ramp_start, "need 0 <= alpha_ramp_start < alpha_ramp_end");
  require(alpha_max >= 0.0 && std::isfinite(alpha_max), "alpha_max must be finite and >= 0");
  require(epochs >= 1, "epochs must be >= 1");
  require(alpha_ramp_end <= refine_start, "need alpha_ramp_end <= refine_start");
  require(batches_per_epoch >= 1, "batches_per_epoch must be >= 1");
  require(lr_segmenter > 0.0 && lr_discriminator > 0.0, "learning rates must be > 0");
  require(lr_decay > 0.0 && lr_decay <= 1.0, "lr_decay must lie in (0, 1]");
  require(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0, 1)");
  require(seg_batch >= 1, "seg_batch must be >= 1");
  require(adv_batch >= 2 && adv_batch % 2 == 0, "adv_batch must be even and >= 2");
}

double alpha_at(const TrainSchedule& s, int epoch) {
  if (epoch <= s.alpha_ramp_start) return 0.0;
  if (epoch >= s.alpha_ramp_end) return s.alpha_max;
  return s.alpha_max * static_cast<double>(epoch - s.alpha_ramp_start) /
         static_cast<double>(s.alpha_ramp_end - s.alpha_ramp_start);
}

LearningRates lr_at(const TrainSchedule& s, int epoch) {
  LearningRates lr{s.lr_segmenter, s.lr_discriminator};
  if (epoch > s.refine_start) lr.segmenter *= std::pow(s.lr_decay, epoch - s.refine_start);
  return lr;
}

void TrainOptions::validate() const {
  segmenter.validate();
  discriminator.validate();
  validate_taps(taps);
  schedule.validate();
  if (!(fg_fraction >= 0.0 && fg_fraction <= 1.0)) throw ConfigError("fg_fraction must lie in [0, 1]");
  if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be >= 0");
  if (val_every < 0) throw ConfigError("val_every must be >= 0");
  if (val_probe_samples < 2 || val_probe_samples % 2 != 0) {
    throw ConfigError("val_probe_samples must be even and >= 2");
  }
  if (tile_extent < 1) throw ConfigError("tile_extent must be >= 1");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
}

void write_history_csv(const fs::path& path, std::span<const EpochRecord> history) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << kHistoryHeader << '\n' << std::setprecision(9);
  auto cell = [&](const std::optional<double>& v) {
    out << ',';
    if (v) out << *v;
  };
  for (const auto& r : history) {
    out << r.epoch << ',' << r.l_seg;
    cell(r.l_adv);
    out << ',' << r.alpha << ',' << r.lr_seg;
    cell(r.lr_adv);
    cell(r.disc_acc_train);
    cell(r.disc_acc_val);
    cell(r.val_dsc);
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

TrainState::TrainState(const TrainOptions& options, bool adversarial)
    : segmenter(options.segmenter, options.seed),
      taps(options.taps),
      seg_opt(static_cast<float>(options.schedule.lr_segmenter), static_cast<float>(options.schedule.momentum)),
      grad_clip(options.grad_clip) {
  if (adversarial) {
    discriminator.emplace(options.discriminator, tap_channels(options.segmenter, taps), options.seed);
    disc_opt.emplace(static_cast<float>(options.schedule.lr_discriminator),
                     static_cast<float>(options.schedule.momentum));
  }
}

StepReport accumulate_gradients(TrainState& st, const SegBatch& seg, const AdvBatch* adv, double alpha) {
  auto& sp = st.segmenter.parameters();
  sp.zero_grad();
  if (st.discriminator) st.discriminator->parameters().zero_grad();
  StepReport report;

  if (adv) {
    if (!st.discriminator) throw Error("adversarial batch given to a run without a discriminator");
    const BatchTensors t = stack_samples(adv->samples);
    const bool coupled = alpha != 0.0;
    Graph<float> g;
    ForwardOptions opts;
    opts.logits = false;
    opts.trainable = coupled;
    const auto out = st.segmenter.forward(g, t.normal, t.low, st.taps, opts);
    const Var<float> tap_tensor = assemble_tap_tensor<float>(st.taps, out.taps, st.segmenter.spec().downsample);
    const Var<float> logits = st.discriminator->forward(g, tap_tensor);
    const Var<float> loss = domain_loss<float>(logits, t.domains);
    g.backward(loss);
    report.l_adv = loss.value()[0];
    const auto pred = domain_predictions(logits.value());
    Index correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == t.domains[i];
    report.disc_acc = static_cast<double>(correct) / static_cast<double>(pred.size());
    // Segmenter ascends L_adv.
    if (coupled) sp.scale_grad(static_cast<float>(-alpha));
  }

  const BatchTensors t = stack_samples(seg.samples);
  if (t.labels.empty()) throw Error("segmentation batch has unlabelled samples");
  Graph<float> g;
  const auto out = st.segmenter.forward(g, t.normal, t.low);
  const Var<float> loss = softmax_xent_mean<float>(out.logits, t.labels);
  g.backward(loss);
  report.l_seg = loss.value()[0];
  return report;
}

namespace {

void check_finite(const ParameterSet<float>& params) {
  for (const auto& p : params) {
    if (!p.value.all_finite()) throw NonFiniteError("sgd_step(" + p.name + ")");
  }
}

}  // namespace

StepReport train_step(TrainState& st, const SegBatch& seg, const AdvBatch* adv, double alpha,
                      const LearningRates& lr) {
  StepReport report = accumulate_gradients(st, seg, adv, alpha);
  if (st.grad_clip > 0.0) {
    clip_grad_norm(st.segmenter.parameters(), static_cast<float>(st.grad_clip));
    if (st.discriminator) clip_grad_norm(st.discriminator->parameters(), static_cast<float>(st.grad_clip));
  }
  st.seg_opt.set_learning_rate(static_cast<float>(lr.segmenter));
  st.seg_opt.step(st.segmenter.parameters());
  check_finite(st.segmenter.parameters());
  st.segmenter.parameters().zero_grad();
  if (st.discriminator && adv) {
    st.disc_opt->set_learning_rate(static_cast<float>(lr.discriminator));
    st.disc_opt->step(st.discriminator->parameters());
    check_finite(st.discriminator->parameters());
    st.discriminator->parameters().zero_grad();
  }
  return report;
}

namespace {

struct Snapshot {
  std::vector<Tensor<float>> values, velocities;

  static Snapshot take(const ParameterSet<float>& p, const SgdMomentum<float>& opt) {
    Snapshot s;
    for (const auto& x : p) s.values.push_back(x.value);
    s.velocities = opt.velocities();
    return s;
  }
  void restore(ParameterSet<float>& p, SgdMomentum<float>& opt) const {
    std::size_t i = 0;
    for (auto& x : p) x.value = values[i++];
    opt.velocities() = velocities;
  }
};

std::string epoch_dir(int epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%04d", epoch);
  return buf;
}

}  // namespace

TrainResult train(const TrainOptions& options, const TrainData& data, const EpochCallback& on_epoch) {
  options.validate();
  const TrainSchedule& sched = options.schedule;
  const bool adversarial = options.mode == TrainMode::uda;
  const bool both = options.mode == TrainMode::supervised_both;

  std::vector<const CaseRecord*> labelled;
  for (const auto& c : data.source) labelled.push_back(&c);
  if (both) {
    for (const auto& c : data.target) {
      if (!c.labels) throw ConfigError("supervised-both needs labelled target cases; " + c.id + " has none");
      labelled.push_back(&c);
    }
  }
  const SegmentGeometry geometry = SegmentGeometry::training(options.segmenter);
  const SegBatchBuilder seg_builder(labelled, geometry, both);
  std::optional<AdvBatchBuilder> adv_builder;
  if (adversarial) {
    std::vector<UnlabelledCase> s, t;
    for (const auto& c : data.source) s.push_back(c.unlabelled());
    for (const auto& c : data.target) t.push_back(c.unlabelled());
    adv_builder.emplace(std::move(s), std::move(t), geometry, options.adv_mask_only);
  }
  std::vector<UnlabelledCase> val_s, val_t;
  for (const auto& c : data.val_source) val_s.push_back(c.unlabelled());
  for (const auto& c : data.val_target) val_t.push_back(c.unlabelled());

  TrainState st(options, adversarial);
  Rng seg_rng = make_stream(options.seed, streams::kSegBatches);
  Rng adv_rng = make_stream(options.seed, streams::kAdvBatches);
  TrainResult result{{}, st.segmenter, std::nullopt, 0};

  auto save = [&](const fs::path& dir, int epoch) {
    const CheckpointInfo info{kCheckpointFormatVersion, static_cast<float>(sched.momentum), epoch};
    save_segmenter(dir / "segmenter", st.segmenter, info);
    if (st.discriminator) save_discriminator(dir / "discriminator", *st.discriminator, st.taps, info);
  };

  for (int epoch = 1; epoch <= sched.epochs; ++epoch) {
    const double alpha = adversarial ? alpha_at(sched, epoch) : 0.0;
    const LearningRates lr = lr_at(sched, epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.alpha = alpha;
    rec.lr_seg = lr.segmenter;
    double l_adv = 0.0, acc = 0.0;
    for (int b = 0; b < sched.batches_per_epoch; ++b) {
      const SegBatch seg = seg_builder.build(sched.seg_batch, options.fg_fraction, seg_rng);
      std::optional<AdvBatch> adv;
      if (adv_builder) adv = adv_builder->build(sched.adv_batch, adv_rng);
      const AdvBatch* adv_ptr = adv ? &*adv : nullptr;

      const Snapshot seg_snap = Snapshot::take(st.segmenter.parameters(), st.seg_opt);
      std::optional<Snapshot> disc_snap;
      if (st.discriminator) disc_snap = Snapshot::take(st.discriminator->parameters(), *st.disc_opt);
      StepReport rep;
      try {
        rep = train_step(st, seg, adv_ptr, alpha, lr);
      } catch (const NonFiniteError& first) {
        std::clog << "warning: non-finite value in " << first.op() << " at epoch " << epoch
                  << "; retrying the step at half learning rate\n";
        seg_snap.restore(st.segmenter.parameters(), st.seg_opt);
        if (disc_snap) disc_snap->restore(st.discriminator->parameters(), *st.disc_opt);
        try {
          rep = train_step(st, seg, adv_ptr, alpha, {lr.segmenter / 2, lr.discriminator / 2});
        } catch (const NonFiniteError& second) {
          throw TrainingDiverged(epoch, second.op());
        }
        ++result.recovered_steps;
      }
      rec.l_seg += rep.l_seg;
      if (rep.l_adv) l_adv += *rep.l_adv;
      if (rep.disc_acc) acc += *rep.disc_acc;
    }
    const double nb = sched.batches_per_epoch;
    rec.l_seg /= nb;
    if (adversarial) {
      rec.l_adv = l_adv / nb;
      rec.lr_adv = lr.discriminator;
      rec.disc_acc_train = acc / nb;
    }

    const bool validate_now = epoch == sched.epochs || (options.val_every > 0 && epoch % options.val_every == 0);
    if (validate_now) {
      if (!data.val_target.empty()) {
        const auto metrics = evaluate_cases(st.segmenter, data.val_target, options.tile_extent);
        rec.val_dsc = summarize(metrics).dsc.mean;
      }
      if (st.discriminator && !val_s.empty() && !val_t.empty()) {
        Rng val_rng = make_stream(options.seed, streams::kValidation);
        rec.disc_acc_val = probe_domain_accuracy(st.segmenter, *st.discriminator, st.taps, val_s, val_t,
                                                 options.val_probe_samples, val_rng);
      }
    }
    if (options.out_dir && options.checkpoint_every > 0 && epoch % options.checkpoint_every == 0) {
      save(*options.out_dir / "checkpoints" / epoch_dir(epoch), epoch);
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  if (options.out_dir) save(*options.out_dir, sched.epochs);
  result.segmenter = st.segmenter;
  result.discriminator = st.discriminator;
  return result;
}

void save_segmenter(const fs::path& dir, const Segmenter<float>& s, const CheckpointInfo& info) {
  save_checkpoint(dir, s.parameters(), info);
  write_json_file(dir / "spec.json", to_json(s.spec()));
}

void save_discriminator(const fs::path& dir, const Discriminator<float>& d, const TapSet& taps,
                        const CheckpointInfo& info) {
  save_checkpoint(dir, d.parameters(), info);
  write_json_file(dir / "spec.json", {{"spec_version", kSpecVersion},
                                      {"discriminator", to_json(d.spec())},
                                      {"taps", taps_to_json(taps)},
                                      {"tap_channels", d.tap_channels()}});
}

Segmenter<float> load_segmenter(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw IoError("no segmenter checkpoint in " + dir.string());
  Segmenter<float> s(segmenter_spec_from_json(read_json_file(dir / "spec.json")), 0);
  load_checkpoint(dir, s.parameters());
  return s;
}

LoadedDiscriminator load_discriminator(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw IoError("no discriminator checkpoint in " + dir.string());
  const Json j = read_json_file(dir / "spec.json");
  try {
    LoadedDiscriminator out{Discriminator<float>(discriminator_spec_from_json(j.at("discriminator")),
                                                 j.at("tap_channels").get<Index>(), 0),
                            taps_from_json(j.at("taps"))};
    load_checkpoint(dir, out.discriminator.parameters());
    return out;
  } catch (const Json::exception& e) {
    throw ConfigError(dir.string() + "/spec.json: " + e.what());
  }
}

}  // namespace advseg
