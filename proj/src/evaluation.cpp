#include "advseg/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>

#include "advseg/optimizer.hpp"

namespace advseg {

namespace fs = std::filesystem;

namespace {

Index floor_mod(Index a, Index d) { return ((a % d) + d) % d; }

Tensor<float> batched(Tensor<float> t) {
  Shape s{1};
  s.insert(s.end(), t.shape().begin(), t.shape().end());
  return Tensor<float>(std::move(s), std::move(t.array()));
}

struct TilePlan {
  Index low_extent;
  Extent3 low_center;
  Extent3 low_shift;
};

// Context patch for one tile whose normal output starts at `origin`. The
// context samples sit on the lattice of multiples of D, and the upsampled crop
// is shifted so that output voxel i of both pathways covers origin + i.
TilePlan plan_tile(const SegmenterSpec& spec, const Extent3& center, const Extent3& origin, Index out) {
  const Index d = spec.downsample, shrink = receptive_field(spec) - 1;
  TilePlan p{};
  for (int a = 0; a < 3; ++a) p.low_center[a] = center[a] - floor_mod(center[a], d);
  for (Index low = low_extent_for(spec, out + shrink, 0);; ++low) {
    const Index lo = low - shrink, half = (low - 1) / 2, up = lo * d;
    bool fits = true;
    for (int a = 0; a < 3; ++a) {
      const Index off = origin[a] - p.low_center[a] - d * (shrink / 2 - half) + (d - 1) / 2;
      if (off < 0 || off > up - out) {
        fits = false;
        break;
      }
      p.low_shift[a] = off - crop_offset(up, out);
    }
    if (fits) {
      p.low_extent = low;
      return p;
    }
  }
}

}  // namespace

DenseOutput dense_logits(Segmenter<float>& segmenter, const UnlabelledCase& c, Index tile_extent) {
  if (tile_extent < 1) throw ConfigError("tile extent must be >= 1");
  if (!c.image || c.image->rank() != 4) throw ShapeError("dense inference: case image must be [C,X,Y,Z]");
  const SegmenterSpec& spec = segmenter.spec();
  const Tensor<float>& image = *c.image;
  const Extent3 ve{image.extent(1), image.extent(2), image.extent(3)};
  const Index classes = spec.classes, v = ve[0] * ve[1] * ve[2];
  const Index out = tile_extent, normal = out + receptive_field(spec) - 1;

  DenseOutput result;
  result.logits.assign(static_cast<std::size_t>(classes * v), 0.0f);
  for (Index ox = 0; ox < ve[0]; ox += out)
    for (Index oy = 0; oy < ve[1]; oy += out)
      for (Index oz = 0; oz < ve[2]; oz += out) {
        const Extent3 origin{ox, oy, oz};
        Extent3 center;
        for (int a = 0; a < 3; ++a) center[a] = origin[a] + (normal - 1) / 2 - (normal - out) / 2;
        const TilePlan plan = plan_tile(spec, center, origin, out);
        Graph<float> g;
        ForwardOptions opts;
        opts.trainable = false;
        opts.low_shift = plan.low_shift;
        const auto fwd = segmenter.forward(g, batched(gather_patch(image, center, normal, 1)),
                                           batched(gather_patch(image, plan.low_center, plan.low_extent, spec.downsample)),
                                           {}, opts);
        const Tensor<float>& lg = fwd.logits.value();
        for (Index k = 0; k < classes; ++k)
          for (Index i = 0; i < out && ox + i < ve[0]; ++i)
            for (Index j = 0; j < out && oy + j < ve[1]; ++j)
              for (Index l = 0; l < out && oz + l < ve[2]; ++l) {
                const Index dst = k * v + ((ox + i) * ve[1] + (oy + j)) * ve[2] + (oz + l);
                result.logits[static_cast<std::size_t>(dst)] = lg[((k * out + i) * out + j) * out + l];
              }
      }

  result.labels = VoxelMap(ve);
  for (Index p = 0; p < v; ++p) {
    Index best = 0;
    for (Index k = 1; k < classes; ++k) {
      if (result.logits[static_cast<std::size_t>(k * v + p)] > result.logits[static_cast<std::size_t>(best * v + p)]) {
        best = k;
      }
    }
    result.labels.values[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(best);
  }
  return result;
}

VoxelMap dense_infer(Segmenter<float>& segmenter, const UnlabelledCase& c, Index tile_extent) {
  return dense_logits(segmenter, c, tile_extent).labels;
}

ConfusionCounts confusion_counts(const VoxelMap& prediction, const VoxelMap& truth, const VoxelMap* mask) {
  if (prediction.extent != truth.extent) {
    throw ShapeError("prediction extent " + to_string(prediction.extent) + " != label extent " + to_string(truth.extent));
  }
  if (mask && mask->extent != truth.extent) throw ShapeError("mask extent does not match labels");
  ConfusionCounts c;
  for (std::size_t i = 0; i < truth.values.size(); ++i) {
    if (mask && !mask->values[i]) continue;
    const bool p = prediction.values[i] > 0, t = truth.values[i] > 0;
    if (p && t) ++c.tp;
    else if (p) ++c.fp;
    else if (t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

CaseMetrics segmentation_metrics(const ConfusionCounts& k, std::string case_id) {
  CaseMetrics m;
  m.case_id = std::move(case_id);
  const auto tp = static_cast<double>(k.tp), fp = static_cast<double>(k.fp), fn = static_cast<double>(k.fn);
  const bool truth_empty = k.tp + k.fn == 0, pred_empty = k.tp + k.fp == 0;
  m.dsc = truth_empty && pred_empty ? 1.0 : 2.0 * tp / (2.0 * tp + fp + fn);
  m.recall = truth_empty ? 1.0 : tp / (tp + fn);
  m.precision = pred_empty ? 1.0 : tp / (tp + fp);
  if (truth_empty && !pred_empty) m.precision = 0.0;
  return m;
}

MetricSummary summarize(std::span<const CaseMetrics> cases) {
  auto stats = [&](double CaseMetrics::*field) {
    MeanStd s;
    if (cases.empty()) return s;
    for (const auto& c : cases) s.mean += c.*field;
    s.mean /= static_cast<double>(cases.size());
    for (const auto& c : cases) s.std += (c.*field - s.mean) * (c.*field - s.mean);
    s.std = std::sqrt(s.std / static_cast<double>(cases.size()));
    return s;
  };
  return {stats(&CaseMetrics::dsc), stats(&CaseMetrics::recall), stats(&CaseMetrics::precision)};
}

void write_metrics_csv(const fs::path& path, std::vector<CaseMetrics> cases) {
  std::sort(cases.begin(), cases.end(), [](const auto& a, const auto& b) { return a.case_id < b.case_id; });
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << std::setprecision(6) << std::fixed;
  out << "case_id,dsc,recall,precision\n";
  for (const auto& c : cases) out << c.case_id << ',' << c.dsc << ',' << c.recall << ',' << c.precision << '\n';
  const MetricSummary s = summarize(cases);
  out << "mean," << s.dsc.mean << ',' << s.recall.mean << ',' << s.precision.mean << '\n';
  out << "std," << s.dsc.std << ',' << s.recall.std << ',' << s.precision.std << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<CaseMetrics> evaluate_cases(Segmenter<float>& segmenter, std::span<const CaseRecord> cases,
                                        Index tile_extent) {
  std::vector<CaseMetrics> metrics;
  for (const auto& c : cases) {
    if (!c.labels) throw ConfigError("case " + c.id + " has no labels to evaluate against");
    const VoxelMap pred = dense_infer(segmenter, c.unlabelled(), tile_extent);
    metrics.push_back(segmentation_metrics(confusion_counts(pred, *c.labels, c.mask ? &*c.mask : nullptr), c.id));
  }
  std::sort(metrics.begin(), metrics.end(), [](const auto& a, const auto& b) { return a.case_id < b.case_id; });
  return metrics;
}

namespace {

// Tap tensor of a batch from the frozen segmenter.
Var<float> frozen_taps(Graph<float>& g, Segmenter<float>& segmenter, const TapSet& taps, const BatchTensors& t) {
  ForwardOptions opts;
  opts.logits = false;
  opts.trainable = false;
  const auto out = segmenter.forward(g, t.normal, t.low, taps, opts);
  return assemble_tap_tensor<float>(taps, out.taps, segmenter.spec().downsample);
}

}  // namespace

double probe_domain_accuracy(Segmenter<float>& segmenter, Discriminator<float>& discriminator, const TapSet& taps,
                             std::span<const UnlabelledCase> source, std::span<const UnlabelledCase> target,
                             Index n_samples, Rng& rng) {
  if (n_samples < 2 || n_samples % 2 != 0) throw ConfigError("probe sample count must be even and >= 2");
  AdvBatchBuilder builder({source.begin(), source.end()}, {target.begin(), target.end()},
                          SegmentGeometry::training(segmenter.spec()));
  constexpr Index kChunk = 20;
  Index correct = 0;
  for (Index done = 0; done < n_samples; done += kChunk) {
    const AdvBatch batch = builder.build(std::min(kChunk, n_samples - done), rng);
    Graph<float> g;
    const Var<float> logits = discriminator.forward(g, frozen_taps(g, segmenter, taps, stack_samples(batch.samples)), false);
    const auto pred = domain_predictions(logits.value());
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == static_cast<std::int32_t>(batch.samples[i].domain);
  }
  return static_cast<double>(correct) / static_cast<double>(n_samples);
}

Discriminator<float> train_fresh_probe(Segmenter<float>& segmenter, const DiscriminatorSpec& spec, const TapSet& taps,
                                       std::span<const UnlabelledCase> source, std::span<const UnlabelledCase> target,
                                       const FreshProbeOptions& options) {
  if (options.steps < 0) throw ConfigError("probe steps must be >= 0");
  Discriminator<float> probe(spec, tap_channels(segmenter.spec(), taps),
                             make_stream(options.seed, streams::kProbeInit)());
  AdvBatchBuilder builder({source.begin(), source.end()}, {target.begin(), target.end()},
                          SegmentGeometry::training(segmenter.spec()));
  SgdMomentum<float> opt(static_cast<float>(options.learning_rate), static_cast<float>(options.momentum));
  Rng rng = make_stream(options.seed, streams::kProbe);
  for (int step = 0; step < options.steps; ++step) {
    const AdvBatch batch = builder.build(options.batch, rng);
    Graph<float> g;
    const BatchTensors t = stack_samples(batch.samples);
    const Var<float> logits = probe.forward(g, frozen_taps(g, segmenter, taps, t));
    probe.parameters().zero_grad();
    g.backward(domain_loss<float>(logits, t.domains));
    if (options.grad_clip > 0) clip_grad_norm(probe.parameters(), static_cast<float>(options.grad_clip));
    opt.step(probe.parameters());
  }
  probe.parameters().zero_grad();
  return probe;
}

}  // namespace advseg
