#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "filigrain/synth_data.hpp"
#include "filigrain/tokenizer.hpp"

using namespace filigrain;

namespace {

SynthConfig default_cfg(bool test_split = false) {
  SynthConfig cfg;
  cfg.holdout = {{"red", "triangle"}};
  cfg.test_split = test_split;
  return cfg;
}

}  // namespace

TEST_CASE("generate_dataset determinism") {
  SynthConfig cfg = default_cfg();
  auto a = generate_dataset(123, 20, cfg);
  auto b = generate_dataset(123, 20, cfg);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].second.captions == b[i].second.captions);
    REQUIRE(a[i].first.image.size() == b[i].first.image.size());
    for (int p = 0; p < a[i].first.image.size(); ++p)
      CHECK(a[i].first.image.values()[p] == b[i].first.image.values()[p]);
  }
  auto c = generate_dataset(124, 20, cfg);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size() && !any_diff; ++i)
    any_diff = a[i].second.captions[0] != c[i].second.captions[0];
  CHECK(any_diff);
}

TEST_CASE("holdout constraint") {
  SynthConfig cfg = default_cfg();
  auto data = generate_dataset(7, 300, cfg);
  for (const auto& [scene, captions] : data) {
    for (const SceneObject& o : scene.objects)
      CHECK_FALSE((o.color == "red" && o.shape == "triangle"));
    for (const std::string& cap : captions.captions)
      CHECK(cap.find("red triangle") == std::string::npos);
  }
  SECTION("test split always contains a held-out combo") {
    auto test = generate_dataset(9, 100, default_cfg(true));
    for (const auto& [scene, captions] : test) {
      bool has = false;
      for (const SceneObject& o : scene.objects)
        has = has || (o.color == "red" && o.shape == "triangle");
      CHECK(has);
    }
  }
  SECTION("holdout covering everything is rejected") {
    SynthConfig bad;
    for (const auto& c : scene_colors())
      for (const auto& s : scene_shapes()) bad.holdout.emplace_back(c, s);
    CHECK_THROWS_AS(generate_dataset(1, 5, bad), Error);
  }
}

TEST_CASE("color marginals stay near uniform") {
  SynthConfig cfg = default_cfg();
  auto data = generate_dataset(31, 1000, cfg);
  std::map<std::string, int> counts;
  int total = 0;
  for (const auto& [scene, captions] : data)
    for (const SceneObject& o : scene.objects) {
      ++counts[o.color];
      ++total;
    }
  const double uniform = static_cast<double>(total) / 4.0;
  for (const auto& color : scene_colors()) {
    INFO(color);
    CHECK(counts[color] >= 0.8 * uniform);
    CHECK(counts[color] <= 1.2 * uniform);
  }
}

TEST_CASE("captions") {
  SynthConfig cfg = default_cfg();
  auto data = generate_dataset(11, 50, cfg);
  SECTION("every caption names every object's color and shape") {
    for (const auto& [scene, captions] : data)
      for (const std::string& cap : captions.captions)
        for (const SceneObject& o : scene.objects) {
          CHECK(cap.find(o.color) != std::string::npos);
          CHECK(cap.find(o.shape) != std::string::npos);
        }
  }
  SECTION("captions tokenize within the desk max_len") {
    for (const auto& [scene, captions] : data)
      for (const std::string& cap : captions.captions)
        CHECK(static_cast<int>(tokenize_words(cap).size()) + 2 <= 16);
  }
  SECTION("paraphrases keep the content words in order") {
    const auto& [scene, captions] = data[0];
    for (const SceneObject& o : scene.objects) {
      for (const std::string& cap : captions.captions) {
        const auto cpos = cap.find(o.color);
        const auto spos = cap.find(o.shape);
        CHECK(cpos < spos);  // "<color> <shape>" adjacency preserved
      }
    }
  }
}

TEST_CASE("sample_caption") {
  CaptionSet set;
  set.captions = {"a", "b", "c"};
  SECTION("fixed seed gives a fixed choice") {
    CHECK(sample_caption(set, 5) == sample_caption(set, 5));
  }
  SECTION("frequencies are near uniform over 3000 draws") {
    std::map<std::string, int> counts;
    for (int i = 0; i < 3000; ++i) ++counts[sample_caption(set, mix_seed(99, i))];
    for (const auto& [cap, n] : counts) {
      CHECK(n >= 3000 * (1.0 / 3 - 0.05));
      CHECK(n <= 3000 * (1.0 / 3 + 0.05));
    }
  }
  SECTION("identical candidates collapse trivially") {
    CaptionSet same;
    same.captions = {"x", "x", "x"};
    CHECK(sample_caption(same, 17) == "x");
  }
}

TEST_CASE("augment_image") {
  SynthConfig cfg = default_cfg();
  Rng rng(3);
  SyntheticScene scene = generate_scene(rng, cfg);

  SECTION("identity op leaves the image untouched") {
    // seed chosen so the op draw lands on identity
    for (std::uint64_t seed = 0; seed < 64; ++seed) {
      Rng probe(seed);
      if (probe.uniform_index(5) != 0) continue;
      SyntheticScene out = augment_image(scene, seed);
      for (int i = 0; i < scene.image.size(); ++i)
        CHECK(out.image.values()[i] == scene.image.values()[i]);
      return;
    }
    FAIL("no identity seed found in probe range");
  }
  SECTION("horizontal flip is an involution") {
    std::uint64_t flip_seed = 0;
    bool found = false;
    for (std::uint64_t seed = 0; seed < 64 && !found; ++seed) {
      Rng probe(seed);
      if (probe.uniform_index(5) == 1) {
        flip_seed = seed;
        found = true;
      }
    }
    REQUIRE(found);
    SyntheticScene once = augment_image(scene, flip_seed);
    SyntheticScene twice = augment_image(once, flip_seed);
    for (int i = 0; i < scene.image.size(); ++i)
      CHECK(twice.image.values()[i] == scene.image.values()[i]);
    CHECK(twice.objects[0].cell_col == scene.objects[0].cell_col);
  }
  SECTION("brightness jitter stays clamped to [0, 1]") {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      Rng probe(seed);
      if (probe.uniform_index(5) != 3) continue;
      SyntheticScene out = augment_image(scene, seed);
      for (double v : out.image.values()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
      break;
    }
  }
  SECTION("masks track the object cells under every op") {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
      SyntheticScene out = augment_image(scene, seed);
      REQUIRE(out.object_masks.size() == out.objects.size());
      for (std::size_t o = 0; o < out.objects.size(); ++o) {
        CHECK(out.objects[o].cell_row >= 0);
        CHECK(out.objects[o].cell_row < out.grid);
        CHECK(out.objects[o].cell_col >= 0);
        CHECK(out.objects[o].cell_col < out.grid);
        CHECK(out.object_masks[o][static_cast<std::size_t>(
                  out.objects[o].cell_row * out.grid + out.objects[o].cell_col)] == 1);
        int marked = 0;
        for (std::uint8_t m : out.object_masks[o]) marked += m;
        CHECK(marked == 1);
      }
      // disjointness preserved
      for (std::size_t a = 0; a < out.objects.size(); ++a)
        for (std::size_t b = a + 1; b < out.objects.size(); ++b)
          CHECK((out.objects[a].cell_row != out.objects[b].cell_row ||
                 out.objects[a].cell_col != out.objects[b].cell_col));
    }
  }
  SECTION("rotation applied four times is the identity") {
    std::uint64_t rot_seed = 0;
    bool found = false;
    for (std::uint64_t seed = 0; seed < 64 && !found; ++seed) {
      Rng probe(seed);
      if (probe.uniform_index(5) == 2) {
        rot_seed = seed;
        found = true;
      }
    }
    REQUIRE(found);
    SyntheticScene cur = scene;
    for (int i = 0; i < 4; ++i) cur = augment_image(cur, rot_seed);
    for (int i = 0; i < scene.image.size(); ++i)
      CHECK(cur.image.values()[i] == scene.image.values()[i]);
    CHECK(cur.objects[0].cell_row == scene.objects[0].cell_row);
    CHECK(cur.objects[0].cell_col == scene.objects[0].cell_col);
  }
}

TEST_CASE("dataset disk round-trip") {
  SynthConfig cfg = default_cfg();
  auto data = generate_dataset(55, 12, cfg);
  write_dataset("synth_manifest_tmp.tsv", "synth_images_tmp.bin", data);
  auto records = load_dataset("synth_manifest_tmp.tsv", "synth_images_tmp.bin");
  REQUIRE(records.size() == data.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    CHECK(records[i].captions.captions == data[i].second.captions);
    REQUIRE(records[i].objects.size() == data[i].first.objects.size());
    for (std::size_t o = 0; o < records[i].objects.size(); ++o) {
      CHECK(records[i].objects[o].color == data[i].first.objects[o].color);
      CHECK(records[i].objects[o].shape == data[i].first.objects[o].shape);
      CHECK(records[i].objects[o].cell_row == data[i].first.objects[o].cell_row);
    }
    for (int p = 0; p < records[i].image.size(); ++p)
      CHECK(records[i].image.values()[p] == data[i].first.image.values()[p]);
  }
  std::remove("synth_manifest_tmp.tsv");
  std::remove("synth_images_tmp.bin");
}
