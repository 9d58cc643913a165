#include "advseg/synthdata.hpp"

#include <cmath>
#include <cstdio>

#include "advseg/rng.hpp"
#include "advseg/sampling.hpp"

namespace advseg {

namespace fs = std::filesystem;

void SynthConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("synthetic data: ") + what);
  };
  require(extent >= 8, "extent must be >= 8");
  require(channels >= 1, "channels must be >= 1");
  require(lesion_channel >= 0 && lesion_channel < channels, "lesion_channel out of range");
  require(source_cases >= 1 && target_cases >= 1, "each domain needs at least one case");
  require(source_heldout >= 0 && source_heldout < source_cases, "source_heldout must be < source_cases");
  require(target_heldout >= 0 && target_heldout < target_cases, "target_heldout must be < target_cases");
  require(lesions_min >= 0 && lesions_max >= lesions_min, "need 0 <= lesions_min <= lesions_max");
  require(radius_min > 0 && radius_max >= radius_min, "need 0 < radius_min <= radius_max");
  require(2 * radius_max < static_cast<double>(extent), "lesions must fit in the volume");
  require(noise_std >= 0 && anatomy_weight >= 0 && channel_field_weight >= 0, "weights must be >= 0");
  require(field_scale >= 1, "field_scale must be >= 1");
  require(!shift_enabled || static_cast<Index>(target_shift.size()) == channels,
          "target_shift needs one entry per channel");
}

std::string synth_case_id(Domain domain, Index index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%03lld", domain == Domain::source ? "S" : "T", static_cast<long long>(index));
  return buf;
}

namespace {

// Smooth field: trilinear interpolation of unit Gaussian noise on a grid with
// one node every `scale` voxels.
std::vector<float> smooth_field(Index n, Index scale, Rng& rng) {
  const Index g = n / scale + 2;
  std::normal_distribution<double> normal;
  std::vector<double> grid(static_cast<std::size_t>(g * g * g));
  for (auto& v : grid) v = normal(rng);
  auto node = [&](Index i, Index j, Index k) { return grid[static_cast<std::size_t>((i * g + j) * g + k)]; };
  std::vector<float> out(static_cast<std::size_t>(n * n * n));
  const double inv = 1.0 / static_cast<double>(scale);
  for (Index x = 0; x < n; ++x) {
    const double fx = static_cast<double>(x) * inv;
    const Index ix = static_cast<Index>(fx);
    const double tx = fx - static_cast<double>(ix);
    for (Index y = 0; y < n; ++y) {
      const double fy = static_cast<double>(y) * inv;
      const Index iy = static_cast<Index>(fy);
      const double ty = fy - static_cast<double>(iy);
      for (Index z = 0; z < n; ++z) {
        const double fz = static_cast<double>(z) * inv;
        const Index iz = static_cast<Index>(fz);
        const double tz = fz - static_cast<double>(iz);
        double acc = 0.0;
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b)
            for (int c = 0; c < 2; ++c) {
              const double w = (a ? tx : 1 - tx) * (b ? ty : 1 - ty) * (c ? tz : 1 - tz);
              acc += w * node(ix + a, iy + b, iz + c);
            }
        out[static_cast<std::size_t>((x * n + y) * n + z)] = static_cast<float>(acc);
      }
    }
  }
  return out;
}

}  // namespace

SynthCase generate_case(const SynthConfig& config, Domain domain, Index index) {
  config.validate();
  const Index n = config.extent, v = n * n * n, channels = config.channels;
  const std::uint64_t base = domain == Domain::source ? streams::kSynthSource : streams::kSynthTarget;
  Rng rng = make_stream(mix64(config.seed) ^ base, static_cast<std::uint64_t>(index));

  SynthCase out;
  out.id = synth_case_id(domain, index);
  out.domain = domain;
  out.clean = Tensor<float>({channels, n, n, n});
  auto anatomy = smooth_field(n, config.field_scale, rng);
  const double skew = config.anatomy_skew, rescale = 1.0 / std::sqrt(1.0 + 2.0 * skew * skew);
  for (float& a : anatomy) a = static_cast<float>((a + skew * (double(a) * a - 1.0)) * rescale);
  std::normal_distribution<double> normal;
  for (Index c = 0; c < channels; ++c) {
    const auto own = smooth_field(n, config.field_scale, rng);
    float* dst = out.clean.data() + c * v;
    for (Index i = 0; i < v; ++i) {
      const auto s = static_cast<std::size_t>(i);
      dst[i] = static_cast<float>(config.anatomy_weight * anatomy[s] + config.channel_field_weight * own[s] +
                                  config.noise_std * normal(rng));
    }
  }

  // Ellipsoidal lesions fully inside the volume.
  out.labels = VoxelMap({n, n, n});
  const int count = std::uniform_int_distribution<int>(config.lesions_min, config.lesions_max)(rng);
  std::uniform_real_distribution<double> radius(config.radius_min, config.radius_max);
  for (int l = 0; l < count; ++l) {
    double r[3], c[3];
    for (double& ri : r) ri = radius(rng);
    for (int a = 0; a < 3; ++a) {
      c[a] = std::uniform_real_distribution<double>(r[a], static_cast<double>(n - 1) - r[a])(rng);
    }
    for (Index x = 0; x < n; ++x)
      for (Index y = 0; y < n; ++y)
        for (Index z = 0; z < n; ++z) {
          const double dx = (static_cast<double>(x) - c[0]) / r[0], dy = (static_cast<double>(y) - c[1]) / r[1],
                       dz = (static_cast<double>(z) - c[2]) / r[2];
          if (dx * dx + dy * dy + dz * dz <= 1.0) out.labels.at(x, y, z) = 1;
        }
  }

  out.lesioned = out.clean;
  for (Index c = 0; c < channels; ++c) {
    const double offset = c == config.lesion_channel ? config.lesion_offset : config.aux_lesion_offset;
    float* dst = out.lesioned.data() + c * v;
    for (Index i = 0; i < v; ++i) {
      if (out.labels.values[static_cast<std::size_t>(i)]) dst[i] = static_cast<float>(dst[i] + offset);
    }
  }

  out.shifted = out.lesioned;
  if (domain == Domain::target && config.shift_enabled) {
    for (Index c = 0; c < channels; ++c) {
      const auto& s = config.target_shift[static_cast<std::size_t>(c)];
      auto seg = out.shifted.array().segment(c * v, v);
      seg = (seg.cast<double>() * s.gain + s.bias).cast<float>();
    }
  }

  out.record.id = out.id;
  out.record.domain = domain;
  out.record.image = normalize_volume(out.shifted);
  out.record.labels = out.labels;
  return out;
}

SynthDatasetFiles generate_dataset(const SynthConfig& config, const fs::path& out_dir) {
  config.validate();
  fs::create_directories(out_dir / "cases");
  DatasetManifest all, s_train, s_held, t_train, t_test;
  auto emit = [&](Domain domain, Index count, Index heldout) {
    for (Index i = 0; i < count; ++i) {
      const SynthCase c = generate_case(config, domain, i);
      const std::string stem = "cases/" + c.id;
      write_volume(out_dir / stem, c.record.image, domain);
      write_voxel_map(out_dir / (stem + "_labels"), c.labels, domain);
      ManifestEntry e{c.id, stem + ".json", stem + "_labels.json", std::nullopt, domain};
      all.cases.push_back(e);
      const bool held = i >= count - heldout;
      auto& split = domain == Domain::source ? (held ? s_held : s_train) : (held ? t_test : t_train);
      split.cases.push_back(std::move(e));
    }
  };
  emit(Domain::source, config.source_cases, config.source_heldout);
  emit(Domain::target, config.target_cases, config.target_heldout);

  SynthDatasetFiles files{out_dir / "manifest.json", out_dir / "source_train.json", out_dir / "source_heldout.json",
                          out_dir / "target_train.json", out_dir / "target_test.json"};
  write_manifest(files.manifest, all);
  write_manifest(files.source_train, s_train);
  write_manifest(files.source_heldout, s_held);
  write_manifest(files.target_train, t_train);
  write_manifest(files.target_test, t_test);
  return files;
}

}  // namespace advseg
