#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "advseg/checkpoint.hpp"
#include "advseg/evaluation.hpp"
#include "advseg/networks.hpp"
#include "advseg/optimizer.hpp"
#include "advseg/sampling.hpp"

namespace advseg {

enum class TrainMode { source_only, uda, supervised_both };

std::string_view to_string(TrainMode m);
TrainMode train_mode_from_string(std::string_view s);

/// Epoch-indexed schedules. Epochs are 1-based.
struct TrainSchedule {
  int alpha_ramp_start = 10;  // alpha is 0 up to and including this epoch
  int alpha_ramp_end = 35;    // alpha reaches alpha_max here
  double alpha_max = 0.05;
  int refine_start = 43;      // segmenter lr decays after this epoch
  int epochs = 50;
  int batches_per_epoch = 20;
  double lr_segmenter = 0.01;
  double lr_decay = 0.8;      // per epoch during refinement
  double lr_discriminator = 0.001;
  double momentum = 0.9;
  Index seg_batch = 10;
  Index adv_batch = 20;

  void validate() const;
  bool operator==(const TrainSchedule&) const = default;
};

/// 0 for e <= e1, linear to alpha_max at e2, then constant.
double alpha_at(const TrainSchedule& s, int epoch);

struct LearningRates {
  double segmenter = 0.0;
  double discriminator = 0.0;
};

/// Segmenter lr is base * lr_decay^(epoch - refine_start) from refine_start
/// on, base before. The discriminator lr is constant.
LearningRates lr_at(const TrainSchedule& s, int epoch);

struct TrainOptions {
  TrainMode mode = TrainMode::uda;
  SegmenterSpec segmenter;
  DiscriminatorSpec discriminator;
  TapSet taps = default_taps();
  TrainSchedule schedule;
  double fg_fraction = 0.5;
  std::uint64_t seed = 0;
  double grad_clip = 0.0;      // 0: off
  bool adv_mask_only = false;  // restrict adversarial centers to the mask
  int val_every = 5;           // 0: only after the last epoch
  Index val_probe_samples = 100;
  Index tile_extent = 25;
  int checkpoint_every = 0;    // 0: final checkpoint only
  std::optional<std::filesystem::path> out_dir;

  void validate() const;
};

/// Cases a run may use. In uda mode only label-blind views of `target` are
/// ever taken; source-only ignores `target` entirely.
struct TrainData {
  std::vector<CaseRecord> source;
  std::vector<CaseRecord> target;
  std::vector<CaseRecord> val_source;
  std::vector<CaseRecord> val_target;
};

struct EpochRecord {
  int epoch = 0;
  double l_seg = 0.0;
  std::optional<double> l_adv;
  double alpha = 0.0;
  double lr_seg = 0.0;
  std::optional<double> lr_adv;
  std::optional<double> disc_acc_train;
  std::optional<double> disc_acc_val;
  std::optional<double> val_dsc;
};

inline constexpr std::string_view kHistoryHeader =
    "epoch,L_seg,L_adv,alpha,lr_seg,lr_adv,disc_acc_train,disc_acc_val,val_dsc";

/// One row per epoch; absent values are empty cells.
void write_history_csv(const std::filesystem::path& path, std::span<const EpochRecord> history);

/// Networks, optimizers and taps of one run.
struct TrainState {
  TrainState(const TrainOptions& options, bool adversarial);

  Segmenter<float> segmenter;
  std::optional<Discriminator<float>> discriminator;
  TapSet taps;
  SgdMomentum<float> seg_opt;
  std::optional<SgdMomentum<float>> disc_opt;
  double grad_clip = 0.0;
};

struct StepReport {
  double l_seg = 0.0;
  std::optional<double> l_adv;
  std::optional<double> disc_acc;
};

/// Fills parameter gradients for one step without applying them:
/// discriminator grads = dL_adv/dθ_adv, segmenter grads = dL_seg/dθ_seg -
/// alpha * dL_adv/dθ_seg. With alpha == 0 the adversarial branch treats the
/// segmenter as constant. `adv` may be null (no discriminator update).
StepReport accumulate_gradients(TrainState& state, const SegBatch& seg, const AdvBatch* adv, double alpha);

/// accumulate_gradients, optional clipping, one optimizer step per network,
/// then zeroed gradients.
StepReport train_step(TrainState& state, const SegBatch& seg, const AdvBatch* adv, double alpha,
                      const LearningRates& lr);

struct TrainResult {
  std::vector<EpochRecord> history;
  Segmenter<float> segmenter;
  std::optional<Discriminator<float>> discriminator;
  int recovered_steps = 0;  // steps retried after a non-finite value
};

/// Raised when a step stays non-finite after the retry at half learning rate.
class TrainingDiverged : public Error {
 public:
  TrainingDiverged(int epoch, const std::string& op)
      : Error("training diverged at epoch " + std::to_string(epoch) + ": non-finite value in " + op) {}
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Full schedule. Checkpoints (when `out_dir` is set) go to
/// out/segmenter, out/discriminator and out/checkpoints/epoch_NNNN.
TrainResult train(const TrainOptions& options, const TrainData& data, const EpochCallback& on_epoch = {});

/// Checkpoint directories, with the network spec stored beside the weights.
void save_segmenter(const std::filesystem::path& dir, const Segmenter<float>& s, const CheckpointInfo& info);
void save_discriminator(const std::filesystem::path& dir, const Discriminator<float>& d, const TapSet& taps,
                        const CheckpointInfo& info);
Segmenter<float> load_segmenter(const std::filesystem::path& dir);
struct LoadedDiscriminator {
  Discriminator<float> discriminator;
  TapSet taps;
};
LoadedDiscriminator load_discriminator(const std::filesystem::path& dir);

}  // namespace advseg
