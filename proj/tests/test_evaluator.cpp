#include <gtest/gtest.h>

#include <numeric>

#include "msrn/evaluator.hpp"
#include "msrn/synthetic.hpp"
#include "oracles.hpp"

namespace msrn {
namespace {

using Labels = std::vector<std::uint16_t>;

TEST(Confusion, AgreementIsDiagonal) {
  const Labels x{1, 2, 3, 3, 2, 1, 1};
  const auto cm = confusion_matrix(x, x, 3);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(cm.at(i, j) != 0, i == j);
}

TEST(Confusion, DirectCounting) {
  const auto cm = confusion_matrix(Labels{1, 1, 2, 2}, Labels{1, 2, 2, 2}, 2);
  EXPECT_EQ(cm, ConfusionMatrix::from_rows({{1, 1}, {0, 2}}));
}

TEST(Confusion, TotalIsConservedAcrossChunks) {
  Rng rng(3);
  Labels t(1000), p(1000);
  for (std::size_t i = 0; i < t.size(); ++i) {
    t[i] = static_cast<std::uint16_t>(1 + rng.uniform_index(4));
    p[i] = static_cast<std::uint16_t>(1 + rng.uniform_index(4));
  }
  const auto whole = confusion_matrix(t, p, 4);
  EXPECT_EQ(whole.total(), 1000u);
  ConfusionMatrix summed(4);
  for (std::size_t start = 0; start < 1000; start += 137) {
    const std::size_t n = std::min<std::size_t>(137, 1000 - start);
    summed += confusion_matrix(std::span(t).subspan(start, n), std::span(p).subspan(start, n), 4);
  }
  EXPECT_EQ(summed, whole);
}

TEST(Confusion, BadInputsAreRejected) {
  EXPECT_THROW(confusion_matrix(Labels{1, 2}, Labels{1}, 2), ShapeError);
  EXPECT_THROW(confusion_matrix(Labels{1, 3}, Labels{1, 2}, 2), DataError);
  EXPECT_THROW(confusion_matrix(Labels{0}, Labels{1}, 2), DataError);
}

TEST(Metrics, HandComputedFixture) {
  const Metrics m = metrics(ConfusionMatrix::from_rows({{50, 10}, {5, 35}}));
  EXPECT_NEAR(m.overall_accuracy, 0.85, 1e-6);
  EXPECT_NEAR(m.average_accuracy, 0.854167, 1e-6);
  EXPECT_NEAR(m.kappa, 0.693878, 1e-6);
}

TEST(Metrics, PerfectDiagonal) {
  const Metrics m = metrics(ConfusionMatrix::from_rows({{7, 0, 0}, {0, 3, 0}, {0, 0, 11}}));
  EXPECT_EQ(m.overall_accuracy, 1.0);
  EXPECT_EQ(m.average_accuracy, 1.0);
  EXPECT_EQ(m.kappa, 1.0);
}

TEST(Metrics, UniformRandomPredictionsHaveKappaNearZero) {
  Rng rng(21);
  const std::size_t n = 200000, k = 5;
  Labels t(n), p(n);
  for (std::size_t i = 0; i < n; ++i) {
    t[i] = static_cast<std::uint16_t>(1 + rng.uniform_index(k));
    p[i] = static_cast<std::uint16_t>(1 + rng.uniform_index(k));
  }
  const Metrics m = metrics(confusion_matrix(t, p, k));
  // Standard error of kappa here is about 1/sqrt(n) ~ 0.0025.
  EXPECT_LT(std::abs(m.kappa), 0.01);
  EXPECT_NEAR(m.overall_accuracy, 0.2, 0.01);
}

TEST(Metrics, DegenerateAndEmptyMatricesAreErrors) {
  EXPECT_THROW(metrics(ConfusionMatrix::from_rows({{9, 0}, {0, 0}})), DegenerateError);
  EXPECT_THROW(metrics(ConfusionMatrix(3)), DataError);
}

TEST(Metrics, EmptyRowsAreExcludedFromAverageAccuracy) {
  const Metrics m = metrics(ConfusionMatrix::from_rows({{8, 2, 0}, {0, 0, 0}, {1, 0, 4}}));
  EXPECT_EQ(m.empty_classes, std::vector<std::size_t>{1});
  EXPECT_TRUE(std::isnan(m.class_recall[1]));
  EXPECT_NEAR(m.average_accuracy, (0.8 + 0.8) / 2, 1e-15);
}

TEST(Metrics, BoundsAndPermutationInvariance) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t k = 2 + rng.uniform_index(5);
    Labels t(300), p(300);
    for (std::size_t i = 0; i < t.size(); ++i) {
      t[i] = static_cast<std::uint16_t>(1 + rng.uniform_index(k));
      p[i] = rng.uniform() < 0.6 ? t[i] : static_cast<std::uint16_t>(1 + rng.uniform_index(k));
    }
    const Metrics m = metrics(confusion_matrix(t, p, k));
    EXPECT_GE(m.overall_accuracy, 0.0);
    EXPECT_LE(m.overall_accuracy, 1.0);
    EXPECT_LE(m.average_accuracy, 1.0);
    EXPECT_LE(m.kappa, m.overall_accuracy);

    std::vector<std::uint16_t> perm(k);
    std::iota(perm.begin(), perm.end(), std::uint16_t{1});
    rng.shuffle(std::span(perm));
    Labels tp(t.size()), pp(p.size());
    for (std::size_t i = 0; i < t.size(); ++i) tp[i] = perm[t[i] - 1u], pp[i] = perm[p[i] - 1u];
    const Metrics q = metrics(confusion_matrix(tp, pp, k));
    EXPECT_DOUBLE_EQ(q.overall_accuracy, m.overall_accuracy);
    EXPECT_NEAR(q.average_accuracy, m.average_accuracy, 1e-14);
    EXPECT_NEAR(q.kappa, m.kappa, 1e-14);
  }
}

TEST(Metrics, SelfAgreementWithTwoClassesIsPerfect) {
  const Labels x{2, 1, 1, 2, 2};
  const Metrics m = metrics(confusion_matrix(x, x, 2));
  EXPECT_EQ(m.overall_accuracy, 1.0);
  EXPECT_EQ(m.average_accuracy, 1.0);
  EXPECT_EQ(m.kappa, 1.0);
}

TEST(Metrics, ReportCarriesPercentFormsAndMatrix) {
  const auto cm = ConfusionMatrix::from_rows({{50, 10}, {5, 35}});
  const auto report = metrics_to_json(cm, metrics(cm), {"a", "b"});
  EXPECT_NEAR(report.at("oa_percent").get<double>(), 85.0, 1e-12);
  EXPECT_NEAR(report.at("kappa_x100").get<double>(), 69.3878, 1e-4);
  EXPECT_EQ(report.at("per_class").size(), 2u);
  EXPECT_EQ(report.at("per_class")[1].at("name"), "b");
  EXPECT_EQ(confusion_from_json(report), cm);
}

// ---------------------------------------------------------------------------
// Split evaluation and maps, with a small untrained model

struct Fixture {
  SyntheticScene scene;
  SplitAssignment split;
  Checkpoint ckpt;
};

Fixture fixture() {
  SyntheticSpec s;
  s.height = 9;
  s.width = 11;
  s.bands = 8;
  Fixture f{make_synthetic_scene(s), {}, {}};
  for (std::size_t c = 0; c < f.scene.labels.pixels(); c += 4) f.scene.labels.labels[c] = 0;
  f.split = stratified_split(f.scene.labels, 0.2, 0.2, 1);
  ModelSpec spec;
  spec.patch_size = 5;
  spec.bands = 8;
  spec.classes = 3;
  spec.kernels = 3;
  Rng rng(9);
  f.ckpt.model = build_msrn(spec, rng);
  f.ckpt.standardization = fit_band_stats(f.scene.cube, f.split.train);
  return f;
}

TEST(EvaluateSplit, ReportIsInternallyConsistent) {
  const Fixture f = fixture();
  const Evaluation e = evaluate_split(f.ckpt, f.scene.cube, f.scene.labels, f.split, Part::Test);
  EXPECT_EQ(e.confusion.total(), f.split.test.size());
  const auto report = metrics_to_json(e.confusion, e.metrics);
  EXPECT_EQ(report.at("per_class").size(), 3u);
  const Metrics again = metrics(confusion_from_json(report));
  EXPECT_EQ(again.overall_accuracy, report.at("oa").get<double>());
  EXPECT_EQ(again.kappa, report.at("kappa").get<double>());
}

TEST(EvaluateSplit, MatchesDirectPrediction) {
  const Fixture f = fixture();
  const Evaluation e = evaluate_split(f.ckpt, f.scene.cube, f.scene.labels, f.split, Part::Train, 5);
  const HsiCube prepared = standardize(f.scene.cube, *f.ckpt.standardization);
  const auto pred = f.ckpt.model.predict(gather_patches(prepared, f.split.train, 5));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] + 1 == f.scene.labels.labels[f.split.train[i]];
  EXPECT_EQ(e.metrics.overall_accuracy, static_cast<double>(correct) / static_cast<double>(pred.size()));
}

TEST(EvaluateSplit, BandMismatchIsADimensionError) {
  const Fixture f = fixture();
  HsiCube wrong(9, 11, 7);
  EXPECT_THROW(evaluate_split(f.ckpt, wrong, f.scene.labels, f.split, Part::Val), DimensionMismatchError);
}

std::pair<std::size_t, std::size_t> ppm_size(const std::string& ppm, std::size_t& header_len) {
  std::istringstream in(ppm);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  in.get();
  EXPECT_EQ(magic, "P6");
  EXPECT_EQ(maxval, 255u);
  header_len = static_cast<std::size_t>(in.tellg());
  return {h, w};
}

TEST(RenderMap, FullSceneHasImageDimensionsAndIsReproducible) {
  const Fixture f = fixture();
  const auto dir = testing::scratch_dir("render");
  render_map(dir / "a.ppm", f.ckpt, f.scene.cube, f.scene.labels, f.scene.info, false);
  render_map(dir / "b.ppm", f.ckpt, f.scene.cube, f.scene.labels, f.scene.info, false);
  const std::string a = io::read_file(dir / "a.ppm");
  EXPECT_EQ(a, io::read_file(dir / "b.ppm"));
  std::size_t header = 0;
  const auto [h, w] = ppm_size(a, header);
  EXPECT_EQ(h, 9u);
  EXPECT_EQ(w, 11u);
  EXPECT_EQ(a.size(), header + 9 * 11 * 3);
  // Unmasked: every pixel carries a class colour.
  for (std::size_t p = 0; p < 99; ++p) {
    const Rgb rgb{static_cast<std::uint8_t>(a[header + 3 * p]), static_cast<std::uint8_t>(a[header + 3 * p + 1]),
                  static_cast<std::uint8_t>(a[header + 3 * p + 2])};
    EXPECT_NE(std::find(f.scene.info.palette.begin(), f.scene.info.palette.end(), rgb), f.scene.info.palette.end());
  }
}

TEST(RenderMap, MaskedModePaintsUnlabeledBlack) {
  const Fixture f = fixture();
  const auto dir = testing::scratch_dir("render_mask");
  render_map(dir / "m.ppm", f.ckpt, f.scene.cube, f.scene.labels, f.scene.info, true);
  const std::string img = io::read_file(dir / "m.ppm");
  std::size_t header = 0;
  ppm_size(img, header);
  for (std::size_t p = 0; p < f.scene.labels.pixels(); ++p) {
    const bool black = img[header + 3 * p] == 0 && img[header + 3 * p + 1] == 0 && img[header + 3 * p + 2] == 0;
    EXPECT_EQ(black, f.scene.labels.labels[p] == 0) << "pixel " << p;
  }
}

TEST(RenderMap, ShortPaletteNamesTheClassCount) {
  Fixture f = fixture();
  f.scene.info.palette.pop_back();
  try {
    render_map(testing::scratch_dir("render_bad") / "x.ppm", f.ckpt, f.scene.cube, f.scene.labels, f.scene.info, false);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("3 classes"), std::string::npos) << e.what();
  }
}

}  // namespace
}  // namespace msrn
