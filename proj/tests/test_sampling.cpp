#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <type_traits>

#include "advseg/sampling.hpp"
#include "support.hpp"

using namespace advseg;
using namespace testing_support;

namespace {

CaseRecord make_case(const std::string& id, Domain d, Index n, std::uint64_t seed, Index channels = 2) {
  CaseRecord c;
  c.id = id;
  c.domain = d;
  c.image = random_tensor<float>({channels, n, n, n}, seed);
  return c;
}

// Small segments keep the many-batch tests fast; the counting logic does not
// depend on patch size.
const SegmentGeometry kSmall{5, 3, 3, 1};

std::vector<UnlabelledCase> views(const std::vector<CaseRecord>& cases) {
  std::vector<UnlabelledCase> v;
  for (const auto& c : cases) v.push_back(c.unlabelled());
  return v;
}

double ref_percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto i = static_cast<std::size_t>(pos);
  if (i + 1 >= v.size()) return v.back();
  return v[i] + (pos - static_cast<double>(i)) * (v[i + 1] - v[i]);
}

}  // namespace

TEST(Normalize, ZeroMeanUnitStd) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Tensor<float> img = random_tensor<float>({2, 12, 12, 12}, seed, 3.0);
    img.array() += 7.0f;
    const Tensor<float> out = normalize_volume(img);
    const Index v = 12 * 12 * 12;
    for (Index c = 0; c < 2; ++c) {
      const auto ch = out.array().segment(c * v, v).cast<double>();
      const double mean = ch.mean();
      const double sd = std::sqrt((ch - mean).square().mean());
      EXPECT_LE(std::abs(mean), 1e-5);
      EXPECT_NEAR(sd, 1.0, 1e-3);
    }
  }
}

TEST(Normalize, MaskedStatisticsOnly) {
  Tensor<float> img = random_tensor<float>({1, 8, 8, 8}, 4);
  VoxelMap mask({8, 8, 8});
  for (Index i = 0; i < 256; ++i) mask.values[static_cast<std::size_t>(i)] = 1;
  for (Index i = 256; i < 512; ++i) img[i] = 1000.0f;
  const Tensor<float> out = normalize_volume(img, &mask);
  const auto in = out.array().segment(0, 256).cast<double>();
  EXPECT_LE(std::abs(in.mean()), 1e-5);
  EXPECT_NEAR(std::sqrt((in - in.mean()).square().mean()), 1.0, 1e-3);
  VoxelMap empty({8, 8, 8});
  EXPECT_THROW(normalize_volume(img, &empty), Error);
}

TEST(Normalize, ConstantChannelBecomesZero) {
  Tensor<float> img = random_tensor<float>({2, 6, 6, 6}, 5);
  img.array().segment(216, 216).setConstant(3.5f);
  const Tensor<float> out = normalize_volume(img);
  EXPECT_TRUE((out.array().segment(216, 216) == 0.0f).all());
  EXPECT_TRUE(out.array().allFinite());
}

TEST(Normalize, PercentileMatchesSortOracle) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> nd;
  std::vector<float> v(1001);
  for (auto& x : v) x = static_cast<float>(nd(rng));
  std::vector<float> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (double q : {0.0, 0.02, 0.5, 0.98, 1.0, 0.1234}) {
    std::vector<double> d(v.begin(), v.end());
    EXPECT_NEAR(sorted_percentile(sorted, q), ref_percentile(d, q), 1e-6) << q;
  }
  const std::vector<float> two{0.0f, 10.0f};
  EXPECT_DOUBLE_EQ(sorted_percentile(two, 0.25), 2.5);
}

TEST(Normalize, OutlierIsClampedBeforeStandardizing) {
  const Index n = 10;
  Tensor<float> img = random_tensor<float>({1, n, n, n}, 7);
  img[123] = 1e6f;
  const Tensor<float> out = normalize_volume(img);
  std::vector<double> vals(img.data(), img.data() + img.size());
  const double lo = ref_percentile(vals, 0.02), hi = ref_percentile(vals, 0.98);
  double mean = 0.0;
  for (double& x : vals) {
    x = std::clamp(x, lo, hi);
    mean += x;
  }
  mean /= static_cast<double>(vals.size());
  double sq = 0.0;
  for (double x : vals) sq += (x - mean) * (x - mean);
  const double sd = std::sqrt(sq / static_cast<double>(vals.size()));
  EXPECT_NEAR(out[123], (hi - mean) / sd, 1e-4);
  EXPECT_NEAR(out.array().maxCoeff(), (hi - mean) / sd, 1e-4);
  EXPECT_LT(out.array().maxCoeff(), 4.0f);
}

TEST(FillMissing, ConstantChannelOthersUntouched) {
  const Tensor<float> img = random_tensor<float>({3, 5, 5, 5}, 8);
  const Tensor<float> once = fill_missing_channel(img, 1);
  EXPECT_TRUE((once.array().segment(125, 125) == -4.0f).all());
  EXPECT_TRUE((once.array().segment(0, 125) == img.array().segment(0, 125)).all());
  EXPECT_TRUE((once.array().segment(250, 125) == img.array().segment(250, 125)).all());
  const Tensor<float> twice = fill_missing_channel(once, 1);
  EXPECT_TRUE((twice.array() == once.array()).all());
  EXPECT_THROW(fill_missing_channel(img, 3), Error);
}

TEST(ExtractSegment, DefaultExtentsAtCenter) {
  CaseRecord c = make_case("a", Domain::source, 64, 9);
  c.labels = VoxelMap({64, 64, 64});
  const SegmentGeometry g = SegmentGeometry::training(SegmenterSpec{});
  EXPECT_EQ(g.normal_extent, 25);
  EXPECT_EQ(g.low_extent, 19);
  EXPECT_EQ(g.label_extent, 9);
  const SegmentSample s = extract_segment(c, {32, 32, 32}, g);
  EXPECT_EQ(s.normal.shape(), (Shape{2, 25, 25, 25}));
  EXPECT_EQ(s.low.shape(), (Shape{2, 19, 19, 19}));
  ASSERT_TRUE(s.labels);
  EXPECT_EQ(s.labels->extent, (Extent3{9, 9, 9}));
  // Normal patch voxel i is volume voxel center + i - 12; context voxel i is
  // center + 3 * (i - 9).
  auto vol = [&](Index ch, Index x, Index y, Index z) { return c.image[((ch * 64 + x) * 64 + y) * 64 + z]; };
  EXPECT_EQ(s.normal[((1 * 25 + 0) * 25 + 12) * 25 + 24], vol(1, 20, 32, 44));
  EXPECT_EQ(s.low[((0 * 19 + 0) * 19 + 9) * 19 + 18], vol(0, 5, 32, 59));
  EXPECT_EQ(s.low[((0 * 19 + 9) * 19 + 9) * 19 + 9], vol(0, 32, 32, 32));
}

TEST(ExtractSegment, UnitDownsampleIsPlainCrop) {
  const CaseRecord c = make_case("a", Domain::source, 20, 10);
  const SegmentSample s = extract_segment(c, {10, 10, 10}, SegmentGeometry{9, 5, 1, 1});
  for (Index x = 0; x < 5; ++x)
    for (Index y = 0; y < 5; ++y)
      for (Index z = 0; z < 5; ++z) {
        EXPECT_EQ(s.low[((1 * 5 + x) * 5 + y) * 5 + z], s.normal[((1 * 9 + x + 2) * 9 + y + 2) * 9 + z + 2]);
      }
}

TEST(ExtractSegment, BorderPaddingAndLabelAlignment) {
  CaseRecord c = make_case("a", Domain::source, 16, 11, 1);
  c.labels = VoxelMap({16, 16, 16});
  c.labels->at(1, 0, 2) = 1;
  const SegmentSample s = extract_segment(c, {0, 0, 0}, SegmentGeometry::training(SegmenterSpec{}));
  // Everything at negative coordinates reads 0.
  for (Index x = 0; x < 12; ++x) EXPECT_EQ(s.normal[(x * 25 + 12) * 25 + 12], 0.0f);
  EXPECT_EQ(s.normal[(12 * 25 + 12) * 25 + 12], c.image[0]);
  // The single marked voxel lands at (p - center + 4) in the label patch.
  Index marked = 0;
  for (Index x = 0; x < 9; ++x)
    for (Index y = 0; y < 9; ++y)
      for (Index z = 0; z < 9; ++z) marked += s.labels->at(x, y, z);
  EXPECT_EQ(marked, 1);
  EXPECT_EQ(s.labels->at(5, 4, 6), 1);
  EXPECT_THROW(extract_segment(c, {16, 0, 0}, kSmall), Error);
  EXPECT_THROW(extract_segment(c, {0, -1, 0}, kSmall), Error);
}

TEST(SegBatch, ForegroundCountIsExact) {
  std::vector<CaseRecord> cases;
  for (int i = 0; i < 3; ++i) {
    CaseRecord c = make_case("c" + std::to_string(i), Domain::source, 12, 20 + i);
    c.labels = VoxelMap({12, 12, 12});
    c.labels->at(3 + i, 4, 5) = 1;
    cases.push_back(std::move(c));
  }
  Rng rng = make_stream(1, 0);
  for (Index n : {1, 2, 7, 10, 15}) {
    for (double fg : {0.0, 0.25, 0.5, 0.7, 1.0}) {
      const SegBatch b = build_seg_batch(cases, n, fg, kSmall, rng);
      ASSERT_EQ(static_cast<Index>(b.samples.size()), n);
      Index count = 0;
      for (const auto& s : b.samples) {
        ASSERT_TRUE(s.labels);
        EXPECT_EQ(s.domain, Domain::source);
        if (s.foreground_centered) {
          ++count;
          EXPECT_EQ(s.labels->at(0, 0, 0), 1);
        }
      }
      EXPECT_EQ(count, static_cast<Index>(std::llround(static_cast<double>(n) * fg))) << n << " " << fg;
    }
  }
  const SegBatch ten = build_seg_batch(cases, 10, 0.5, kSmall, rng);
  EXPECT_EQ(std::count_if(ten.samples.begin(), ten.samples.end(), [](auto& s) { return s.foreground_centered; }), 5);
}

TEST(SegBatch, EmptyForegroundFallsBackToUniform) {
  std::vector<CaseRecord> cases{make_case("e", Domain::source, 10, 30)};
  cases[0].labels = VoxelMap({10, 10, 10});
  Rng rng = make_stream(2, 0);
  const SegBatch b = build_seg_batch(cases, 10, 0.5, kSmall, rng);
  EXPECT_EQ(b.foreground_fallbacks, 5);
  for (const auto& s : b.samples) EXPECT_FALSE(s.foreground_centered);
}

TEST(SegBatch, Errors) {
  std::vector<CaseRecord> none;
  Rng rng = make_stream(3, 0);
  EXPECT_THROW(build_seg_batch(none, 10, 0.5, kSmall, rng), ConfigError);
  std::vector<CaseRecord> unlabelled{make_case("u", Domain::source, 10, 31)};
  EXPECT_THROW(build_seg_batch(unlabelled, 10, 0.5, kSmall, rng), ConfigError);
}

// Weighted sampling against a uniform-sampling oracle on a case with about 1%
// lesion voxels.
TEST(SegBatch, ForegroundEnrichmentOverUniform) {
  std::vector<CaseRecord> cases{make_case("l", Domain::source, 48, 32, 1)};
  cases[0].labels = VoxelMap({48, 48, 48});
  Index lesion = 0;
  for (Index x = 20; x < 30; ++x)
    for (Index y = 20; y < 30; ++y)
      for (Index z = 20; z < 31; ++z, ++lesion) cases[0].labels->at(x, y, z) = 1;
  EXPECT_NEAR(static_cast<double>(lesion) / (48.0 * 48 * 48), 0.01, 0.001);
  const SegmentGeometry g = SegmentGeometry::training(SegmenterSpec{});
  auto lesion_fraction = [&](double fg) {
    Rng rng = make_stream(4, 0);
    double sum = 0.0;
    Index count = 0;
    for (int b = 0; b < 1000; ++b) {
      for (const auto& s : build_seg_batch(cases, 10, fg, g, rng).samples) {
        sum += std::accumulate(s.labels->values.begin(), s.labels->values.end(), 0.0) / 729.0;
        ++count;
      }
    }
    return sum / static_cast<double>(count);
  };
  const double uniform = lesion_fraction(0.0), weighted = lesion_fraction(0.5);
  EXPECT_NEAR(uniform, 0.01, 0.005);
  EXPECT_GT(weighted, uniform);
  EXPECT_GT(weighted, 0.2);
}

TEST(SegBatch, DomainBalancedAlternates) {
  std::vector<CaseRecord> cases;
  for (int i = 0; i < 4; ++i) {
    CaseRecord c = make_case("c" + std::to_string(i), i < 3 ? Domain::source : Domain::target, 10, 40 + i);
    c.labels = VoxelMap({10, 10, 10});
    cases.push_back(std::move(c));
  }
  std::vector<const CaseRecord*> ptrs;
  for (const auto& c : cases) ptrs.push_back(&c);
  SegBatchBuilder builder(ptrs, kSmall, true);
  Rng rng = make_stream(5, 0);
  const SegBatch b = builder.build(10, 0.0, rng);
  for (std::size_t i = 0; i < b.samples.size(); ++i) {
    EXPECT_EQ(b.samples[i].domain, i % 2 == 0 ? Domain::source : Domain::target);
  }
}

TEST(AdvBatch, TenThousandBatchesAreExactlyBalanced) {
  std::vector<CaseRecord> s, t;
  for (int i = 0; i < 3; ++i) s.push_back(make_case("s" + std::to_string(i), Domain::source, 8, 50 + i, 1));
  for (int i = 0; i < 2; ++i) t.push_back(make_case("t" + std::to_string(i), Domain::target, 8, 60 + i, 1));
  AdvBatchBuilder builder(views(s), views(t), kSmall);
  Rng rng = make_stream(6, 0);
  for (int b = 0; b < 10000; ++b) {
    const AdvBatch batch = builder.build(20, rng);
    ASSERT_EQ(batch.samples.size(), 20u);
    int per[2] = {0, 0};
    for (const auto& x : batch.samples) {
      ++per[static_cast<int>(x.domain)];
      ASSERT_FALSE(x.labels);
      ASSERT_EQ(x.case_id[0], x.domain == Domain::source ? 's' : 't');
    }
    ASSERT_EQ(per[0], 10);
    ASSERT_EQ(per[1], 10);
  }
  const AdvBatch two = builder.build(2, rng);
  EXPECT_EQ(two.samples[0].domain == Domain::source, two.samples[1].domain == Domain::target);
}

TEST(AdvBatch, Errors) {
  std::vector<CaseRecord> s{make_case("s", Domain::source, 8, 70, 1)}, none;
  Rng rng = make_stream(7, 0);
  try {
    build_adv_batch(views(s), views(none), 20, kSmall, rng);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_STREQ(e.what(), "target domain has no cases");
  }
  EXPECT_THROW(build_adv_batch(views(none), views(s), 20, kSmall, rng), ConfigError);
  EXPECT_THROW(build_adv_batch(views(s), views(s), 3, kSmall, rng), ConfigError);
  EXPECT_THROW(build_adv_batch(views(s), views(s), 0, kSmall, rng), ConfigError);
}

// The builder's inputs cannot carry labels, and label maps present on the
// underlying records never change what it draws.
static_assert(!std::is_constructible_v<AdvBatchBuilder, std::vector<CaseRecord>, std::vector<CaseRecord>,
                                       SegmentGeometry>);
static_assert(!std::is_constructible_v<AdvBatchBuilder, std::vector<const CaseRecord*>,
                                       std::vector<const CaseRecord*>, SegmentGeometry>);

TEST(AdvBatch, LabelBlind) {
  std::vector<CaseRecord> s{make_case("s", Domain::source, 10, 80)}, t{make_case("t", Domain::target, 10, 81)};
  std::vector<CaseRecord> s_lab = s, t_lab = t;
  s_lab[0].labels = VoxelMap({10, 10, 10}, 1);
  t_lab[0].labels = VoxelMap({10, 10, 10}, 1);
  Rng a = make_stream(8, 0), b = make_stream(8, 0);
  const AdvBatch plain = build_adv_batch(views(s), views(t), 20, kSmall, a);
  const AdvBatch labelled = build_adv_batch(views(s_lab), views(t_lab), 20, kSmall, b);
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_EQ(plain.samples[i].center, labelled.samples[i].center);
    EXPECT_FALSE(labelled.samples[i].labels);
  }
}

TEST(AdvBatch, MaskOnlyCentersStayInMask) {
  std::vector<CaseRecord> s{make_case("s", Domain::source, 10, 90)}, t{make_case("t", Domain::target, 10, 91)};
  for (auto* c : {&s[0], &t[0]}) {
    c->mask = VoxelMap({10, 10, 10});
    c->mask->at(2, 3, 4) = 1;
    c->mask->at(7, 7, 7) = 1;
  }
  AdvBatchBuilder builder(views(s), views(t), kSmall, true);
  Rng rng = make_stream(9, 0);
  for (const auto& x : builder.build(20, rng).samples) {
    EXPECT_TRUE(x.center == (Extent3{2, 3, 4}) || x.center == (Extent3{7, 7, 7}));
  }
}

TEST(Sampling, SeededDeterminism) {
  std::vector<CaseRecord> s{make_case("s", Domain::source, 12, 100)}, t{make_case("t", Domain::target, 12, 101)};
  s[0].labels = VoxelMap({12, 12, 12});
  s[0].labels->at(6, 6, 6) = 1;
  Rng a = make_stream(10, 1), b = make_stream(10, 1);
  const SegBatch sa = build_seg_batch(s, 10, 0.5, kSmall, a), sb = build_seg_batch(s, 10, 0.5, kSmall, b);
  const AdvBatch aa = build_adv_batch(views(s), views(t), 20, kSmall, a),
                 ab = build_adv_batch(views(s), views(t), 20, kSmall, b);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(sa.samples[i].center, sb.samples[i].center);
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_EQ(aa.samples[i].center, ab.samples[i].center);
    EXPECT_TRUE((aa.samples[i].normal.array() == ab.samples[i].normal.array()).all());
  }
}

TEST(Sampling, StackSamples) {
  std::vector<CaseRecord> s{make_case("s", Domain::source, 12, 110)}, t{make_case("t", Domain::target, 12, 111)};
  Rng rng = make_stream(11, 0);
  const AdvBatch b = build_adv_batch(views(s), views(t), 4, kSmall, rng);
  const BatchTensors x = stack_samples(b.samples);
  EXPECT_EQ(x.normal.shape(), (Shape{4, 2, 5, 5, 5}));
  EXPECT_EQ(x.low.shape(), (Shape{4, 2, 3, 3, 3}));
  EXPECT_TRUE(x.labels.empty());
  EXPECT_EQ(x.domains.size(), 4u);
  EXPECT_TRUE((x.normal.array().segment(2 * 250, 250) == b.samples[2].normal.array()).all());
}
