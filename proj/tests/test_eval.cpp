#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "filigrain/eval.hpp"
#include "filigrain/rng.hpp"

using namespace filigrain;

namespace {

EncodedFeatures features_from(std::vector<std::vector<double>> rows,
                              Modality m = Modality::text) {
  const int n = static_cast<int>(rows.size());
  const int d = static_cast<int>(rows.front().size());
  std::vector<double> flat;
  for (auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  EncodedFeatures f;
  f.tokens = Tensor::from_values({n, d}, std::move(flat));
  f.valid.assign(static_cast<std::size_t>(n), 1);
  f.modality = m;
  return f;
}

EncodedFeatures random_unit(Rng& rng, int n, int d,
                            Modality m = Modality::text) {
  std::vector<std::vector<double>> rows;
  for (int i = 0; i < n; ++i) {
    std::vector<double> r(static_cast<std::size_t>(d));
    double ss = 0.0;
    for (double& v : r) {
      v = rng.normal();
      ss += v * v;
    }
    for (double& v : r) v /= std::sqrt(ss);
    rows.push_back(std::move(r));
  }
  return features_from(std::move(rows), m);
}

}  // namespace

TEST_CASE("zero_shot_classify") {
  EncodedFeatures img = features_from({{1, 0}, {0, 1}}, Modality::image);
  SECTION("single class wins by default") {
    ZeroShotClass only{"thing", {features_from({{0.1, 0.1}})}};
    ZeroShotResult res = zero_shot_classify(img, {only}, true);
    CHECK(res.label == "thing");
    CHECK(res.predicted == 0);
  }
  SECTION("duplicate tokens reach the similarity bound and win") {
    ZeroShotClass twin{"twin", {features_from({{1, 0}, {0, 1}})}};
    ZeroShotClass other{"other", {features_from({{0.5, 0.5}})}};
    ZeroShotResult res = zero_shot_classify(img, {other, twin}, true);
    CHECK(res.label == "twin");
    CHECK(res.scores[1] == 1.0);
  }
  SECTION("three-class toy ranks by constructed scores") {
    ZeroShotClass a{"a", {features_from({{0.9, 0}, {0, 0.9}})}};   // 0.9
    ZeroShotClass b{"b", {features_from({{0.5, 0}, {0, 0.5}})}};   // 0.5
    ZeroShotClass c{"c", {features_from({{0.2, 0}, {0, 0.2}})}};   // 0.2
    ZeroShotResult res = zero_shot_classify(img, {a, b, c}, true);
    CHECK(res.predicted == 0);
    CHECK(res.scores[0] == Catch::Approx(0.9));
    CHECK(res.scores[1] == Catch::Approx(0.5));
    CHECK(res.scores[2] == Catch::Approx(0.2));
  }
  SECTION("ties keep the first class in input order") {
    ZeroShotClass a{"first", {features_from({{0.5, 0}})}};
    ZeroShotClass b{"second", {features_from({{0.5, 0}})}};
    CHECK(zero_shot_classify(img, {a, b}, true).label == "first");
  }
  SECTION("decision is invariant to a uniform rescale of similarities") {
    ZeroShotClass a{"a", {features_from({{0.9, 0}})}};
    ZeroShotClass b{"b", {features_from({{0.5, 0}})}};
    ZeroShotResult r1 = zero_shot_classify(img, {a, b}, true);
    ZeroShotClass a2{"a", {features_from({{0.09, 0}})}};
    ZeroShotClass b2{"b", {features_from({{0.05, 0}})}};
    ZeroShotResult r2 = zero_shot_classify(img, {a2, b2}, true);
    CHECK(r1.label == r2.label);
  }
  SECTION("empty class list throws") {
    CHECK_THROWS_AS(zero_shot_classify(img, {}, true), Error);
  }
}

TEST_CASE("retrieval_eval") {
  SECTION("gallery of one gives perfect recalls") {
    std::vector<EncodedFeatures> imgs = {features_from({{1, 0}}, Modality::image)};
    std::vector<EncodedFeatures> txts = {features_from({{1, 0}})};
    RetrievalReport r = retrieval_eval(imgs, txts, {{0}},
                                       RetrievalDirection::image_to_text, true);
    CHECK(r.r_at_1 == 1.0);
    CHECK(r.r_at_5 == 1.0);
    CHECK(r.r_at_10 == 1.0);
  }
  SECTION("diagonal construction gives R@1 = 1 in both directions") {
    std::vector<EncodedFeatures> imgs, txts;
    for (int i = 0; i < 4; ++i) {
      std::vector<double> row(4, 0.0);
      row[static_cast<std::size_t>(i)] = 1.0;
      imgs.push_back(features_from({row}, Modality::image));
      txts.push_back(features_from({row}));
    }
    std::vector<std::vector<int>> gt = {{0}, {1}, {2}, {3}};
    CHECK(retrieval_eval(imgs, txts, gt, RetrievalDirection::image_to_text, true)
              .r_at_1 == 1.0);
    CHECK(retrieval_eval(imgs, txts, gt, RetrievalDirection::text_to_image, true)
              .r_at_1 == 1.0);
  }
  SECTION("recalls are monotone in K and ranks are recorded") {
    Rng rng(3);
    std::vector<EncodedFeatures> imgs, txts;
    for (int i = 0; i < 12; ++i) {
      imgs.push_back(random_unit(rng, 3, 8, Modality::image));
      txts.push_back(random_unit(rng, 4, 8));
    }
    std::vector<std::vector<int>> gt;
    for (int i = 0; i < 12; ++i) gt.push_back({i});
    RetrievalReport r =
        retrieval_eval(imgs, txts, gt, RetrievalDirection::text_to_image, true);
    CHECK(r.r_at_1 <= r.r_at_5);
    CHECK(r.r_at_5 <= r.r_at_10);
    CHECK(r.ranks.size() == 12);
  }
  SECTION("report is invariant under consistent re-indexing") {
    Rng rng(5);
    std::vector<EncodedFeatures> imgs, txts;
    for (int i = 0; i < 6; ++i) {
      imgs.push_back(random_unit(rng, 3, 6, Modality::image));
      txts.push_back(random_unit(rng, 3, 6));
    }
    std::vector<std::vector<int>> gt;
    for (int i = 0; i < 6; ++i) gt.push_back({i});
    RetrievalReport base =
        retrieval_eval(imgs, txts, gt, RetrievalDirection::image_to_text, true);
    // rotate the gallery by 2 and remap ground truth accordingly
    std::vector<EncodedFeatures> rotated;
    for (int i = 0; i < 6; ++i)
      rotated.push_back(txts[static_cast<std::size_t>((i + 2) % 6)]);
    std::vector<std::vector<int>> gt2;
    for (int i = 0; i < 6; ++i) gt2.push_back({(i - 2 + 6) % 6});
    RetrievalReport re =
        retrieval_eval(imgs, rotated, gt2, RetrievalDirection::image_to_text, true);
    CHECK(base.r_at_1 == re.r_at_1);
    CHECK(base.r_at_5 == re.r_at_5);
  }
  SECTION("random 20-item batches land near the 5% chance baseline") {
    double acc = 0.0;
    for (int seed = 0; seed < 100; ++seed) {
      Rng rng(static_cast<std::uint64_t>(seed) * 7919 + 11);
      std::vector<EncodedFeatures> imgs, txts;
      for (int i = 0; i < 20; ++i) {
        imgs.push_back(random_unit(rng, 4, 16, Modality::image));
        txts.push_back(random_unit(rng, 4, 16));
      }
      std::vector<std::vector<int>> gt;
      for (int i = 0; i < 20; ++i) gt.push_back({i});
      acc += retrieval_eval(imgs, txts, gt, RetrievalDirection::text_to_image, true)
                 .r_at_1;
    }
    acc /= 100.0;
    CHECK(acc >= 0.02);
    CHECK(acc <= 0.08);
  }
  SECTION("query without ground truth throws") {
    std::vector<EncodedFeatures> imgs = {features_from({{1, 0}}, Modality::image)};
    std::vector<EncodedFeatures> txts = {features_from({{1, 0}})};
    CHECK_THROWS_AS(retrieval_eval(imgs, txts, {{}},
                                   RetrievalDirection::image_to_text, true),
                    Error);
  }
}

TEST_CASE("alignment_export") {
  SECTION("single candidate token absorbs every patch") {
    EncodedFeatures img = features_from({{1, 0}, {0, 1}, {0.6, 0.8}, {0, -1}},
                                        Modality::image);
    EncodedFeatures txt = features_from({{0.3, 0.4}});
    AlignmentMap map = alignment_export(img, txt, {0}, true);
    REQUIRE(map.predicted.size() == 4);
    for (int p : map.predicted) CHECK(p == 0);
    for (std::uint8_t c : map.correct) CHECK(c == 1);
    CHECK(map.grid == 2);
  }
  SECTION("orthonormal two-patch case maps [0, 1]") {
    EncodedFeatures img = features_from({{1, 0}, {0, 1}}, Modality::image);
    EncodedFeatures txt = features_from({{1, 0}, {0, 1}});
    AlignmentMap map = alignment_export(img, txt, {1}, true);
    CHECK(map.predicted == std::vector<int>{0, 1});
    CHECK(map.correct == std::vector<std::uint8_t>{0, 1});
  }
  SECTION("matches the pairwise alignment with the efficiency pipeline off") {
    Rng rng(11);
    EncodedFeatures img = random_unit(rng, 4, 8, Modality::image);
    EncodedFeatures txt = random_unit(rng, 5, 8);
    AlignmentMap map = alignment_export(img, txt, {2}, true);
    PairScore ref = image_to_text_sim(img, txt, true);
    CHECK(map.predicted == ref.alignment);
  }
  SECTION("grid rendering marks the span and the overlay dims misses") {
    EncodedFeatures img = features_from({{1, 0}, {0, 1}, {1, 0}, {0, 1}},
                                        Modality::image);
    EncodedFeatures txt = features_from({{1, 0}, {0, 1}});
    AlignmentMap map = alignment_export(img, txt, {1}, true);
    const std::string grid = render_alignment_grid(map, false);
    CHECK(grid.find("[1]") != std::string::npos);
    CHECK(grid.find("label span: 1") != std::string::npos);
    Tensor image({4, 4, 3}, 1.0);
    Tensor overlay = alignment_overlay(image, map, 0.25);
    CHECK(overlay.values()[0] == 0.25);  // patch 0 predicted 0, not in span
    CHECK(overlay.values()[2 * 3 * 2] == 0.25);
  }
}

TEST_CASE("alignment_hit_rate") {
  AlignmentMap all_correct;
  all_correct.predicted = {1, 1, 1, 1};
  all_correct.correct = {1, 1, 1, 1};
  all_correct.grid = 2;
  SECTION("all correct gives 1.0") {
    CHECK(alignment_hit_rate({all_correct}, {{1, 1, 0, 0}}) == 1.0);
  }
  SECTION("half correct on a constructed pair gives 0.5") {
    AlignmentMap half = all_correct;
    half.correct = {1, 0, 1, 0};
    CHECK(alignment_hit_rate({half}, {{1, 1, 0, 0}}) == 0.5);
    CHECK(alignment_hit_rate({half, half}, {{1, 1, 0, 0}, {1, 1, 0, 0}}) == 0.5);
  }
  SECTION("uniform-random predictions hit at the |span|/V chance level") {
    Rng rng(21);
    const int v_tokens = 6;
    const std::vector<int> span = {2};
    int hits = 0, total = 0;
    for (int trial = 0; trial < 4000; ++trial) {
      AlignmentMap m;
      m.grid = 2;
      for (int p = 0; p < 4; ++p) {
        const int pred = static_cast<int>(rng.uniform_index(v_tokens));
        m.predicted.push_back(pred);
        m.correct.push_back(pred == 2 ? 1 : 0);
      }
      const std::vector<std::vector<std::uint8_t>> mask = {{1, 0, 0, 1}};
      hits += static_cast<int>(
          std::lround(alignment_hit_rate({m}, mask) * 2));
      total += 2;
    }
    const double rate = static_cast<double>(hits) / total;
    CHECK(rate == Catch::Approx(1.0 / v_tokens).margin(0.02));
  }
  SECTION("mask shape mismatch throws") {
    CHECK_THROWS_AS(alignment_hit_rate({all_correct}, {{1, 0}}), Error);
  }
}
