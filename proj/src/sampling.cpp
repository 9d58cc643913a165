#include "advseg/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

namespace advseg {

double sorted_percentile(std::span<const float> sorted, double q) {
  if (sorted.empty()) throw Error("percentile of an empty set");
  const double rank = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return static_cast<double>(sorted[lo]) + frac * (static_cast<double>(sorted[hi]) - static_cast<double>(sorted[lo]));
}

Tensor<float> normalize_volume(const Tensor<float>& image, const VoxelMap* mask, double window) {
  if (image.rank() != 4) throw ShapeError("normalize_volume: image must be [C,X,Y,Z]");
  if (!(window >= 0.0 && window < 0.5)) throw Error("normalize_volume: window must lie in [0, 0.5)");
  const Index channels = image.extent(0), v = image.size() / std::max<Index>(channels, 1);
  std::vector<Index> inside;
  if (mask) {
    if (mask->size() != v) throw ShapeError("normalize_volume: mask extent does not match image");
    for (Index i = 0; i < v; ++i)
      if (mask->values[static_cast<std::size_t>(i)]) inside.push_back(i);
    if (inside.empty()) throw Error("normalize_volume: empty mask");
  }
  if (v == 0) throw Error("normalize_volume: empty mask");
  Tensor<float> out(image.shape());
  for (Index c = 0; c < channels; ++c) {
    auto src = Eigen::Map<const Eigen::ArrayXf>(image.data() + c * v, v);
    std::vector<float> vals;
    if (mask) {
      vals.reserve(inside.size());
      for (Index i : inside) vals.push_back(src[i]);
    } else {
      vals.assign(src.data(), src.data() + v);
    }
    std::sort(vals.begin(), vals.end());
    const auto lo = static_cast<float>(sorted_percentile(vals, window));
    const auto hi = static_cast<float>(sorted_percentile(vals, 1.0 - window));
    double mean = 0.0, sq = 0.0;
    for (float x : vals) mean += std::clamp(x, lo, hi);
    mean /= static_cast<double>(vals.size());
    for (float x : vals) sq += std::pow(std::clamp(x, lo, hi) - mean, 2);
    const double sd = std::sqrt(sq / static_cast<double>(vals.size()));
    auto dst = Eigen::Map<Eigen::ArrayXf>(out.data() + c * v, v);
    if (sd < 1e-8) {
      dst.setZero();
    } else {
      dst = ((src.max(lo).min(hi).cast<double>() - mean) / sd).cast<float>();
    }
  }
  return out;
}

Tensor<float> fill_missing_channel(const Tensor<float>& image, Index channel, float fill) {
  if (image.rank() != 4) throw ShapeError("fill_missing_channel: image must be [C,X,Y,Z]");
  if (channel < 0 || channel >= image.extent(0)) {
    throw Error("fill_missing_channel: channel " + std::to_string(channel) + " out of range");
  }
  Tensor<float> out = image;
  const Index v = image.size() / image.extent(0);
  out.array().segment(channel * v, v).setConstant(fill);
  return out;
}

SegmentGeometry SegmentGeometry::training(const SegmenterSpec& spec) {
  return {spec.train_extent, spec.low_train_extent, spec.downsample, output_extent(spec, spec.train_extent)};
}

SegmentGeometry SegmentGeometry::for_normal_extent(const SegmenterSpec& spec, Index normal_extent, Index max_shift) {
  return {normal_extent, low_extent_for(spec, normal_extent, max_shift), spec.downsample,
          output_extent(spec, normal_extent)};
}

namespace {

void check_center(const Extent3& e, const Extent3& c) {
  for (int a = 0; a < 3; ++a) {
    if (c[a] < 0 || c[a] >= e[a]) {
      throw Error("segment center " + to_string(c) + " outside volume " + to_string(e));
    }
  }
}

}  // namespace

Tensor<float> gather_patch(const Tensor<float>& image, const Extent3& center, Index extent, Index step) {
  const Index channels = image.extent(0);
  const Extent3 ve{image.extent(1), image.extent(2), image.extent(3)};
  const Index v = ve[0] * ve[1] * ve[2], half = (extent - 1) / 2;
  Tensor<float> patch({channels, extent, extent, extent});
  for (Index c = 0; c < channels; ++c) {
    for (Index i = 0; i < extent; ++i) {
      const Index x = center[0] + step * (i - half);
      if (x < 0 || x >= ve[0]) continue;
      for (Index j = 0; j < extent; ++j) {
        const Index y = center[1] + step * (j - half);
        if (y < 0 || y >= ve[1]) continue;
        for (Index k = 0; k < extent; ++k) {
          const Index z = center[2] + step * (k - half);
          if (z < 0 || z >= ve[2]) continue;
          patch[((c * extent + i) * extent + j) * extent + k] = image[c * v + (x * ve[1] + y) * ve[2] + z];
        }
      }
    }
  }
  return patch;
}

namespace {

Extent3 unflatten(Index flat, const Extent3& e) { return {flat / (e[1] * e[2]), (flat / e[2]) % e[1], flat % e[2]}; }

Index uniform_index(Index n, Rng& rng) {
  return static_cast<Index>(std::uniform_int_distribution<std::int64_t>(0, n - 1)(rng));
}

}  // namespace

SegmentSample extract_segment(const UnlabelledCase& c, const Extent3& center, const SegmentGeometry& g) {
  if (!c.image || c.image->rank() != 4) throw ShapeError("extract_segment: case image must be [C,X,Y,Z]");
  const Extent3 e{c.image->extent(1), c.image->extent(2), c.image->extent(3)};
  check_center(e, center);
  SegmentSample s;
  s.normal = gather_patch(*c.image, center, g.normal_extent, 1);
  s.low = gather_patch(*c.image, center, g.low_extent, g.downsample);
  s.domain = c.domain;
  s.case_id = c.id ? *c.id : std::string();
  s.center = center;
  return s;
}

SegmentSample extract_segment(const CaseRecord& c, const Extent3& center, const SegmentGeometry& g) {
  SegmentSample s = extract_segment(c.unlabelled(), center, g);
  if (c.labels) {
    const Index o = g.label_extent, half = (o - 1) / 2;
    VoxelMap patch({o, o, o});
    const Extent3& e = c.labels->extent;
    for (Index i = 0; i < o; ++i)
      for (Index j = 0; j < o; ++j)
        for (Index k = 0; k < o; ++k) {
          const Index x = center[0] + i - half, y = center[1] + j - half, z = center[2] + k - half;
          if (x < 0 || y < 0 || z < 0 || x >= e[0] || y >= e[1] || z >= e[2]) continue;
          patch.at(i, j, k) = c.labels->at(x, y, z);
        }
    s.labels = std::move(patch);
  }
  return s;
}

SegBatchBuilder::SegBatchBuilder(std::vector<const CaseRecord*> cases, SegmentGeometry geometry, bool domain_balanced)
    : geometry_(geometry), balanced_(domain_balanced) {
  for (const CaseRecord* c : cases) {
    if (!c->labels) continue;
    Entry e{c, {}};
    for (Index i = 0; i < c->labels->size(); ++i)
      if (c->labels->values[static_cast<std::size_t>(i)] > 0) e.foreground.push_back(i);
    by_domain_[static_cast<int>(c->domain)].push_back(entries_.size());
    entries_.push_back(std::move(e));
  }
  if (entries_.empty()) throw ConfigError("segmentation batches need at least one labelled case");
  if (balanced_ && (by_domain_[0].empty() || by_domain_[1].empty())) {
    throw ConfigError("domain-balanced segmentation batches need labelled cases from both domains");
  }
}

SegBatch SegBatchBuilder::build(Index n, double fg_fraction, Rng& rng) const {
  if (n < 1) throw ConfigError("segmentation batch size must be >= 1");
  if (!(fg_fraction >= 0.0 && fg_fraction <= 1.0)) throw ConfigError("fg_fraction must lie in [0,1]");
  const auto n_fg = static_cast<Index>(std::llround(static_cast<double>(n) * fg_fraction));
  SegBatch batch;
  for (Index i = 0; i < n; ++i) {
    std::size_t pick;
    if (balanced_) {
      const auto& pool = by_domain_[i % 2];
      pick = pool[static_cast<std::size_t>(uniform_index(static_cast<Index>(pool.size()), rng))];
    } else {
      pick = static_cast<std::size_t>(uniform_index(static_cast<Index>(entries_.size()), rng));
    }
    const Entry& e = entries_[pick];
    const Extent3 ve = e.record->extent();
    bool fg = i < n_fg;
    Index flat;
    if (fg && e.foreground.empty()) {
      std::clog << "warning: case " << e.record->id << " has no foreground; using a uniform center\n";
      ++batch.foreground_fallbacks;
      fg = false;
    }
    if (fg) {
      flat = e.foreground[static_cast<std::size_t>(uniform_index(static_cast<Index>(e.foreground.size()), rng))];
    } else {
      flat = uniform_index(ve[0] * ve[1] * ve[2], rng);
    }
    SegmentSample s = extract_segment(*e.record, unflatten(flat, ve), geometry_);
    s.foreground_centered = fg;
    batch.samples.push_back(std::move(s));
  }
  return batch;
}

SegBatch build_seg_batch(std::span<const CaseRecord> cases, Index n, double fg_fraction, const SegmentGeometry& geometry,
                         Rng& rng) {
  std::vector<const CaseRecord*> ptrs;
  for (const auto& c : cases) ptrs.push_back(&c);
  return SegBatchBuilder(std::move(ptrs), geometry).build(n, fg_fraction, rng);
}

AdvBatchBuilder::AdvBatchBuilder(std::vector<UnlabelledCase> source, std::vector<UnlabelledCase> target,
                                 SegmentGeometry geometry, bool mask_only)
    : geometry_(geometry) {
  if (source.empty()) throw ConfigError("source domain has no cases");
  if (target.empty()) throw ConfigError("target domain has no cases");
  auto fill = [&](const std::vector<UnlabelledCase>& views, std::vector<Entry>& out) {
    for (const auto& v : views) {
      Entry e{v, {}};
      if (mask_only && v.mask) {
        for (Index i = 0; i < v.mask->size(); ++i)
          if (v.mask->values[static_cast<std::size_t>(i)]) e.candidates.push_back(i);
        if (e.candidates.empty()) throw ConfigError("case " + (v.id ? *v.id : std::string()) + " has an empty mask");
      }
      out.push_back(std::move(e));
    }
  };
  fill(source, source_);
  fill(target, target_);
}

AdvBatch AdvBatchBuilder::build(Index n, Rng& rng) const {
  if (n < 2 || n % 2 != 0) throw ConfigError("adversarial batch size must be even and >= 2");
  AdvBatch batch;
  // Alternating S, T keeps the per-domain count exact for every n.
  for (Index i = 0; i < n; ++i) {
    const auto& pool = i % 2 == 0 ? source_ : target_;
    const Entry& e = pool[static_cast<std::size_t>(uniform_index(static_cast<Index>(pool.size()), rng))];
    const Extent3 ve{e.view.image->extent(1), e.view.image->extent(2), e.view.image->extent(3)};
    const Index flat = e.candidates.empty()
                           ? uniform_index(ve[0] * ve[1] * ve[2], rng)
                           : e.candidates[static_cast<std::size_t>(uniform_index(static_cast<Index>(e.candidates.size()), rng))];
    batch.samples.push_back(extract_segment(e.view, unflatten(flat, ve), geometry_));
  }
  return batch;
}

AdvBatch build_adv_batch(std::span<const UnlabelledCase> source, std::span<const UnlabelledCase> target, Index n,
                         const SegmentGeometry& geometry, Rng& rng, bool mask_only) {
  return AdvBatchBuilder({source.begin(), source.end()}, {target.begin(), target.end()}, geometry, mask_only)
      .build(n, rng);
}

BatchTensors stack_samples(std::span<const SegmentSample> samples) {
  if (samples.empty()) throw Error("stack_samples: empty batch");
  BatchTensors t;
  const Index n = static_cast<Index>(samples.size());
  auto stack = [&](auto member) {
    const Shape& s0 = (samples[0].*member).shape();
    Shape shape{n};
    shape.insert(shape.end(), s0.begin(), s0.end());
    Tensor<float> out(shape);
    const Index len = numel(s0);
    for (Index i = 0; i < n; ++i) {
      const auto& src = samples[static_cast<std::size_t>(i)].*member;
      if (src.shape() != s0) throw ShapeError("stack_samples: patch shapes differ within a batch");
      std::copy_n(src.data(), len, out.data() + i * len);
    }
    return out;
  };
  t.normal = stack(&SegmentSample::normal);
  t.low = stack(&SegmentSample::low);
  const bool labelled = std::all_of(samples.begin(), samples.end(), [](const auto& s) { return s.labels.has_value(); });
  for (const auto& s : samples) {
    t.domains.push_back(static_cast<std::int32_t>(s.domain));
    if (labelled) t.labels.insert(t.labels.end(), s.labels->values.begin(), s.labels->values.end());
  }
  return t;
}

}  // namespace advseg
