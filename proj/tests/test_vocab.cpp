#include <catch2/catch_amalgamated.hpp>

#include <algorithm>

#include "fur/vocab.hpp"

using fur::Ids;
using fur::Vocab;

TEST_CASE("tokenize round trips canonical text", "[vocab]") {
  const Vocab v = Vocab::build({"alice", "lives", "in", "paris", ".", "bob"});

  SECTION("empty string") {
    REQUIRE(v.tokenize("").empty());
    REQUIRE(v.detokenize({}) == "");
  }

  SECTION("single line") {
    const std::string s = "alice lives in paris .";
    const Ids ids = v.tokenize(s);
    REQUIRE(ids.size() == 5);
    REQUIRE(v.detokenize(ids) == s);
  }

  SECTION("newlines become tokens and round trip") {
    const std::string s = "alice lives in paris .\nbob lives in paris .";
    const Ids ids = v.tokenize(s);
    REQUIRE(std::count(ids.begin(), ids.end(), v.newline()) == 1);
    REQUIRE(v.detokenize(ids) == s);
  }

  SECTION("trailing newline round trips") {
    const std::string s = "alice lives in paris .\n";
    REQUIRE(v.detokenize(v.tokenize(s)) == s);
  }

  SECTION("unknown word is an error carrying the word") {
    try {
      v.tokenize("alice flies");
      FAIL("expected UnknownToken");
    } catch (const fur::UnknownToken& e) {
      REQUIRE(e.word == "flies");
    }
  }
}

TEST_CASE("specials are distinct and fixed", "[vocab]") {
  const Vocab v = Vocab::build({"x"});
  REQUIRE(v.pad() == 0);
  REQUIRE(v.bos() == 1);
  REQUIRE(v.eos() == 2);
  REQUIRE(v.newline() == 3);
  REQUIRE(v.size() == 5);
  REQUIRE(v.is_special(v.newline()));
  REQUIRE_FALSE(v.is_special(v.id("x")));

  SECTION("id_of is a bijection onto [0, size)") {
    for (int i = 0; i < v.size(); ++i) {
      REQUIRE(v.id(v.token(i)) == i);
    }
  }

  SECTION("specials are dropped from detokenized text") {
    REQUIRE(v.detokenize({v.bos(), v.id("x"), v.eos()}) == "x");
  }

  SECTION("duplicate words are deduplicated") {
    const Vocab d = Vocab::build({"x", "x", "y"});
    REQUIRE(d.size() == 6);
  }
}

TEST_CASE("round trip holds for randomly generated canonical text", "[vocab]") {
  const std::vector<std::string> words = {"a", "b", "c", "dd", "ee", ".", "?"};
  const Vocab v = Vocab::build(words);
  fur::Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    std::string s;
    const int n = 1 + static_cast<int>(rng.below(14));
    bool line_start = true;
    for (int i = 0; i < n; ++i) {
      if (!line_start) {
        s += rng.uniform() < 0.15 ? "\n" : " ";
      }
      line_start = false;
      s += words[static_cast<std::size_t>(rng.below(words.size()))];
    }
    REQUIRE(v.detokenize(v.tokenize(s)) == s);
  }
}
