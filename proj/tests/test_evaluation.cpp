#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "advseg/evaluation.hpp"
#include "support.hpp"

using namespace advseg;
using namespace testing_support;

namespace {

SegmenterSpec small_segmenter() {
  SegmenterSpec s;
  s.pathway_fms = {2, 2, 2, 2, 3, 3, 3, 3};
  s.hidden_fms = {4, 4};
  return s;
}

struct OracleMetrics {
  double dsc, recall, precision;
};

// Independent per-voxel counting with the stated degenerate conventions.
OracleMetrics oracle(const VoxelMap& pred, const VoxelMap& truth) {
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < truth.values.size(); ++i) {
    tp += pred.values[i] && truth.values[i];
    fp += pred.values[i] && !truth.values[i];
    fn += !pred.values[i] && truth.values[i];
  }
  const double t = tp + fn, p = tp + fp;
  if (t == 0 && p == 0) return {1, 1, 1};
  if (t == 0) return {0, 1, 0};
  if (p == 0) return {0, 0, 1};
  return {2 * tp / (t + p), tp / t, tp / p};
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Confusion, Examples) {
  VoxelMap a({2, 2, 2}), b({2, 2, 2});
  a.values = {1, 1, 0, 0, 0, 0, 0, 0};
  b.values = {1, 0, 0, 0, 0, 0, 0, 0};
  EXPECT_EQ(confusion_counts(b, a), (ConfusionCounts{1, 0, 1, 6}));
  EXPECT_EQ(confusion_counts(a, a), (ConfusionCounts{2, 0, 0, 6}));
  VoxelMap c({2, 2, 2});
  c.values = {0, 0, 1, 1, 1, 0, 0, 0};
  EXPECT_EQ(confusion_counts(c, a), (ConfusionCounts{0, 3, 2, 3}));
  VoxelMap mask({2, 2, 2});
  mask.values = {1, 1, 1, 0, 0, 0, 0, 0};
  EXPECT_EQ(confusion_counts(c, a, &mask), (ConfusionCounts{0, 1, 2, 0}));
  EXPECT_THROW(confusion_counts(VoxelMap({2, 2, 3}), a), ShapeError);
}

TEST(Metrics, Examples) {
  const CaseMetrics m = segmentation_metrics({1, 0, 1, 10}, "x");
  EXPECT_DOUBLE_EQ(m.dsc, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(m.recall, 0.5);
  EXPECT_DOUBLE_EQ(m.precision, 1.0);
  EXPECT_EQ(m.case_id, "x");
  const CaseMetrics same = segmentation_metrics({5, 0, 0, 3});
  EXPECT_EQ(same.dsc, 1.0);
  EXPECT_EQ(same.recall, 1.0);
  EXPECT_EQ(same.precision, 1.0);
}

TEST(Metrics, DegenerateConventions) {
  const CaseMetrics empty = segmentation_metrics({0, 0, 0, 8});
  EXPECT_EQ(empty.dsc, 1.0);
  EXPECT_EQ(empty.recall, 1.0);
  EXPECT_EQ(empty.precision, 1.0);
  const CaseMetrics spurious = segmentation_metrics({0, 3, 0, 5});
  EXPECT_EQ(spurious.dsc, 0.0);
  EXPECT_EQ(spurious.recall, 1.0);
  EXPECT_EQ(spurious.precision, 0.0);
  const CaseMetrics missed = segmentation_metrics({0, 0, 3, 5});
  EXPECT_EQ(missed.dsc, 0.0);
  EXPECT_EQ(missed.recall, 0.0);
  EXPECT_EQ(missed.precision, 1.0);
}

TEST(Metrics, MatchCountingOracleOnRandomPairs) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const Index n = 1 + static_cast<Index>(rng() % 6);
    const double pa = std::uniform_real_distribution<double>(0.0, 0.6)(rng);
    const double pb = trial % 10 == 0 ? 0.0 : std::uniform_real_distribution<double>(0.0, 0.6)(rng);
    const VoxelMap a = random_mask({n, n, n}, pa, rng), b = random_mask({n, n, n}, pb, rng);
    const CaseMetrics m = segmentation_metrics(confusion_counts(a, b));
    const OracleMetrics o = oracle(a, b);
    ASSERT_EQ(m.dsc, o.dsc) << trial;
    ASSERT_EQ(m.recall, o.recall) << trial;
    ASSERT_EQ(m.precision, o.precision) << trial;
    ASSERT_EQ(segmentation_metrics(confusion_counts(b, a)).dsc, m.dsc) << trial;
    ASSERT_TRUE(m.dsc >= 0 && m.dsc <= 1 && m.recall >= 0 && m.recall <= 1 && m.precision >= 0 && m.precision <= 1);
  }
}

TEST(Metrics, SummaryAndCsv) {
  std::vector<CaseMetrics> cases{{"b", 0.5, 1.0, 0.25}, {"a", 1.0, 0.5, 0.75}};
  const MetricSummary s = summarize(cases);
  EXPECT_DOUBLE_EQ(s.dsc.mean, 0.75);
  EXPECT_DOUBLE_EQ(s.dsc.std, 0.25);
  EXPECT_DOUBLE_EQ(s.recall.mean, 0.75);
  EXPECT_DOUBLE_EQ(s.precision.std, 0.25);
  TempDir dir("metrics");
  write_metrics_csv(dir.path() / "m.csv", cases);
  EXPECT_EQ(read_file(dir.path() / "m.csv"),
            "case_id,dsc,recall,precision\n"
            "a,1.000000,0.500000,0.750000\n"
            "b,0.500000,1.000000,0.250000\n"
            "mean,0.750000,0.750000,0.500000\n"
            "std,0.250000,0.250000,0.250000\n");
}

TEST(DenseInference, ShapeAndTilingInvariance) {
  Segmenter<float> seg(small_segmenter(), 3);
  CaseRecord c;
  c.id = "v";
  c.image = random_tensor<float>({2, 20, 17, 22}, 4);
  const DenseOutput big = dense_logits(seg, c.unlabelled(), 25);
  const DenseOutput small = dense_logits(seg, c.unlabelled(), 9);
  const DenseOutput odd = dense_logits(seg, c.unlabelled(), 7);
  EXPECT_EQ(big.labels.extent, (Extent3{20, 17, 22}));
  ASSERT_EQ(big.logits.size(), 2u * 20 * 17 * 22);
  float worst = 0.0f;
  for (std::size_t i = 0; i < big.logits.size(); ++i) {
    worst = std::max({worst, std::abs(big.logits[i] - small.logits[i]), std::abs(big.logits[i] - odd.logits[i])});
  }
  EXPECT_LE(worst, 1e-5f);
  EXPECT_EQ(big.labels, small.labels);
  EXPECT_EQ(dense_infer(seg, c.unlabelled(), 25), big.labels);
  EXPECT_THROW(dense_infer(seg, c.unlabelled(), 0), ConfigError);
}

// A single-voxel tile covers exactly the fields a 25^3 training segment
// centered on a lattice voxel sees.
TEST(DenseInference, AgreesWithTrainingGeometryOnLatticeVoxels) {
  Segmenter<float> seg(small_segmenter(), 5);
  CaseRecord c;
  c.id = "v";
  c.image = random_tensor<float>({2, 18, 18, 18}, 6);
  const DenseOutput dense = dense_logits(seg, c.unlabelled(), 9);
  const SegmentGeometry g = SegmentGeometry::training(seg.spec());
  for (const Extent3& p : {Extent3{9, 9, 9}, Extent3{3, 6, 12}, Extent3{0, 15, 6}}) {
    const SegmentSample s = extract_segment(c.unlabelled(), p, g);
    Graph<float> graph;
    const auto out = seg.forward(graph, s.normal, s.low, {}, {.trainable = false});
    const Index v = 18 * 18 * 18, flat = (p[0] * 18 + p[1]) * 18 + p[2];
    for (Index k = 0; k < 2; ++k) {
      EXPECT_NEAR(out.logits.value()[((k * 9 + 4) * 9 + 4) * 9 + 4], dense.logits[static_cast<std::size_t>(k * v + flat)],
                  1e-5);
    }
  }
}

TEST(DenseInference, ConstantInputGivesConstantInterior) {
  Segmenter<float> seg(small_segmenter(), 7);
  CaseRecord c;
  c.id = "z";
  c.image = Tensor<float>({2, 64, 64, 64});
  c.image.array().setConstant(1.5f);
  const DenseOutput d = dense_logits(seg, c.unlabelled(), 25);
  // Voxels whose context field (19 * 3 voxels wide) stays inside the volume.
  const Index v = 64 * 64 * 64, ref = (32 * 64 + 32) * 64 + 32;
  for (Index x = 30; x <= 34; ++x)
    for (Index y = 30; y <= 34; ++y)
      for (Index z = 30; z <= 34; ++z) {
        const Index i = (x * 64 + y) * 64 + z;
        for (Index k = 0; k < 2; ++k) {
          EXPECT_EQ(d.logits[static_cast<std::size_t>(k * v + i)], d.logits[static_cast<std::size_t>(k * v + ref)]);
        }
        EXPECT_EQ(d.labels.values[static_cast<std::size_t>(i)], d.labels.values[static_cast<std::size_t>(ref)]);
      }
  // Zero padding makes the corner differ from the interior.
  EXPECT_NE(d.logits[0], d.logits[static_cast<std::size_t>(ref)]);
}

TEST(DenseInference, EvaluateCasesSortedById) {
  Segmenter<float> seg(small_segmenter(), 8);
  std::vector<CaseRecord> cases(2);
  for (int i = 0; i < 2; ++i) {
    cases[static_cast<std::size_t>(i)].id = i == 0 ? "z" : "a";
    cases[static_cast<std::size_t>(i)].image = random_tensor<float>({2, 10, 10, 10}, 9 + i);
    cases[static_cast<std::size_t>(i)].labels = VoxelMap({10, 10, 10});
  }
  const auto m = evaluate_cases(seg, cases, 9);
  ASSERT_EQ(m.size(), 2u);
  EXPECT_EQ(m[0].case_id, "a");
  EXPECT_EQ(m[1].case_id, "z");
  cases[0].labels.reset();
  EXPECT_THROW(evaluate_cases(seg, cases, 9), ConfigError);
}

TEST(Probe, UntrainedDiscriminatorIsAtChance) {
  Segmenter<float> seg(small_segmenter(), 10);
  const TapSet taps = default_taps();
  DiscriminatorSpec ds;
  ds.fms = {3, 3, 3, 3};
  Discriminator<float> disc(ds, tap_channels(seg.spec(), taps), 11);
  std::vector<CaseRecord> s(2), t(2);
  for (int i = 0; i < 2; ++i) {
    s[static_cast<std::size_t>(i)] = {"s" + std::to_string(i), Domain::source, random_tensor<float>({2, 16, 16, 16}, 20 + i), {}, {}};
    t[static_cast<std::size_t>(i)] = {"t" + std::to_string(i), Domain::target, random_tensor<float>({2, 16, 16, 16}, 30 + i), {}, {}};
  }
  std::vector<UnlabelledCase> vs{s[0].unlabelled(), s[1].unlabelled()}, vt{t[0].unlabelled(), t[1].unlabelled()};
  Rng rng = make_stream(1, 2);
  const Index n = 200;
  const double acc = probe_domain_accuracy(seg, disc, taps, vs, vt, n, rng);
  EXPECT_LE(std::abs(acc - 0.5), 3.0 / std::sqrt(static_cast<double>(n)));
  EXPECT_THROW(probe_domain_accuracy(seg, disc, taps, vs, {}, n, rng), ConfigError);
  EXPECT_THROW(probe_domain_accuracy(seg, disc, taps, vs, vt, 3, rng), ConfigError);
}

TEST(Probe, FreshProbeIsDeterministic) {
  Segmenter<float> seg(small_segmenter(), 12);
  const TapSet taps = parse_taps("L10");
  DiscriminatorSpec ds;
  ds.fms = {2, 2, 2, 2};
  std::vector<CaseRecord> s(1), t(1);
  s[0] = {"s", Domain::source, random_tensor<float>({2, 12, 12, 12}, 40), {}, {}};
  t[0] = {"t", Domain::target, random_tensor<float>({2, 12, 12, 12}, 41), {}, {}};
  std::vector<UnlabelledCase> vs{s[0].unlabelled()}, vt{t[0].unlabelled()};
  FreshProbeOptions o;
  o.steps = 3;
  o.batch = 4;
  o.seed = 9;
  const auto a = train_fresh_probe(seg, ds, taps, vs, vt, o);
  const auto b = train_fresh_probe(seg, ds, taps, vs, vt, o);
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_TRUE((a.parameters()[i].value.array() == b.parameters()[i].value.array()).all());
  }
}
