#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <string>
#include <vector>

#include "filigrain/tokenizer.hpp"

using filigrain::Error;
using filigrain::TokenSequence;
using filigrain::Vocabulary;

TEST_CASE("build_vocab") {
  SECTION("two words plus the reserved block") {
    Vocabulary v = Vocabulary::build({"a a b"}, 1);
    CHECK(v.size() == 6);
    CHECK(v.id_of("a") == 4);  // higher count first
    CHECK(v.id_of("b") == 5);
  }
  SECTION("min_count drops rare words") {
    Vocabulary v = Vocabulary::build({"x y", "x"}, 2);
    CHECK(v.contains("x"));
    CHECK_FALSE(v.contains("y"));
    CHECK(v.id_of("y") == filigrain::kUnkId);
  }
  SECTION("identical corpora give identical vocabularies") {
    std::vector<std::string> corpus = {"red square on top", "a blue circle."};
    Vocabulary a = Vocabulary::build(corpus, 1);
    Vocabulary b = Vocabulary::build(corpus, 1);
    REQUIRE(a.size() == b.size());
    for (int i = 0; i < a.size(); ++i) CHECK(a.token_of(i) == b.token_of(i));
  }
  SECTION("empty corpus throws") {
    CHECK_THROWS_AS(Vocabulary::build({}, 1), Error);
  }
  SECTION("ties order lexicographically") {
    Vocabulary v = Vocabulary::build({"beta alpha"}, 1);
    CHECK(v.id_of("alpha") == 4);
    CHECK(v.id_of("beta") == 5);
  }
}

TEST_CASE("encode") {
  Vocabulary v = Vocabulary::build({"a photo of a balloon ."}, 1);
  SECTION("the balloon prompt has 8 non-padded tokens") {
    TokenSequence seq = filigrain::encode("a photo of a balloon.", v, 16);
    CHECK(seq.valid_len == 8);
    CHECK(seq.ids[0] == filigrain::kBosId);
    CHECK(seq.ids[7] == filigrain::kEosId);
    CHECK(v.token_of(seq.ids[5]) == "balloon");
    for (std::size_t i = 8; i < seq.ids.size(); ++i)
      CHECK(seq.ids[i] == filigrain::kPadId);
  }
  SECTION("empty text gives [BOS][EOS]") {
    TokenSequence seq = filigrain::encode("", v, 8);
    CHECK(seq.valid_len == 2);
    CHECK(seq.ids[0] == filigrain::kBosId);
    CHECK(seq.ids[1] == filigrain::kEosId);
  }
  SECTION("decode round-trips the normalized token stream") {
    const std::string text = "A Photo of a BALLOON.";
    TokenSequence seq = filigrain::encode(text, v, 16);
    CHECK(filigrain::decode(seq, v) == filigrain::tokenize_words(text));
  }
  SECTION("overlong text is truncated, keeping BOS and EOS") {
    filigrain::EncodeStats stats;
    TokenSequence seq = filigrain::encode("a photo of a balloon.", v, 5, &stats);
    CHECK(seq.valid_len == 5);
    CHECK(seq.ids[0] == filigrain::kBosId);
    CHECK(seq.ids[4] == filigrain::kEosId);
    CHECK(stats.truncated == 1);
  }
  SECTION("mask marks exactly the non-pad prefix and pads never precede EOS") {
    TokenSequence seq = filigrain::encode("a photo", v, 10);
    auto mask = seq.valid_mask();
    int flips = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (mask[i] != (seq.ids[i] != filigrain::kPadId ? 1 : 0)) ++flips;
    }
    CHECK(flips == 0);
    CHECK(seq.ids[static_cast<std::size_t>(seq.valid_len) - 1] ==
          filigrain::kEosId);
  }
  SECTION("encoding is deterministic") {
    TokenSequence a = filigrain::encode("a photo of a balloon.", v, 12);
    TokenSequence b = filigrain::encode("a photo of a balloon.", v, 12);
    CHECK(a.ids == b.ids);
    CHECK(a.valid_len == b.valid_len);
  }
}

TEST_CASE("token_spans") {
  SECTION("single-token label") {
    auto idx = filigrain::token_spans("a photo of a balloon.", "balloon");
    CHECK(idx == std::vector<int>{5});
  }
  SECTION("multi-token label") {
    auto idx = filigrain::token_spans("a photo of an electric locomotive.",
                                      "electric locomotive");
    CHECK(idx == std::vector<int>{5, 6});
  }
  SECTION("label equal to the whole body covers all body indices") {
    auto idx = filigrain::token_spans("red square", "red square");
    CHECK(idx == std::vector<int>{1, 2});
  }
  SECTION("absent label throws not-found") {
    CHECK_THROWS_AS(filigrain::token_spans("a photo of a dog.", "cat"), Error);
  }
}

TEST_CASE("vocabulary serialization round-trips") {
  Vocabulary v = Vocabulary::build({"red square", "blue circle", "red cross"}, 1);
  const std::string path = "vocab_test_tmp.tsv";
  v.save(path);
  Vocabulary loaded = Vocabulary::load(path);
  REQUIRE(loaded.size() == v.size());
  for (int i = 0; i < v.size(); ++i) CHECK(loaded.token_of(i) == v.token_of(i));
  std::remove(path.c_str());
}
