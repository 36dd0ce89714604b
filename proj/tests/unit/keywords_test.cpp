#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "keycomp/error.hpp"
#include "keycomp/keywords.hpp"
#include "support/fixtures.hpp"

using namespace keycomp;
using keycomp::testing::TempDir;
using keycomp::testing::test_data;
using keycomp::testing::write_text;

TEST(Tokenize, PeelsPunctuation) {
  const auto t = tokenize("  \"Hello, world!\" it's a t-shirt.");
  std::vector<std::string> surfaces;
  for (const auto& tok : t) surfaces.push_back(tok.surface);
  EXPECT_EQ(surfaces, (std::vector<std::string>{"\"", "Hello", ",", "world", "!", "\"", "it's", "a", "t-shirt", "."}));
  EXPECT_EQ(t[1].start, 3u);
  EXPECT_EQ(t[1].end, 8u);
}

TEST(Tokenize, OffsetsAlwaysSliceTheInput) {
  std::mt19937 rng(11);
  const std::string alphabet = "abcXYZ .,;!?'\"-()\t\n0129";
  for (int round = 0; round < 300; ++round) {
    std::string text;
    const int len = static_cast<int>(rng() % 60);
    for (int i = 0; i < len; ++i) text.push_back(alphabet[rng() % alphabet.size()]);
    std::size_t last_end = 0;
    for (const auto& tok : tokenize(text)) {
      ASSERT_LT(tok.start, tok.end);
      ASSERT_GE(tok.start, last_end);
      EXPECT_EQ(text.substr(tok.start, tok.end - tok.start), tok.surface);
      last_end = tok.end;
    }
  }
}

TEST(ReferenceTagger, SuffixFallbacks) {
  const ReferenceTagger tagger;
  EXPECT_EQ(tagger.tag_word("rabbit"), Pos::Noun);
  EXPECT_EQ(tagger.tag_word("the"), Pos::Other);
  EXPECT_EQ(tagger.tag_word("in"), Pos::Adp);
  EXPECT_EQ(tagger.tag_word("faster"), Pos::Adj);
  EXPECT_EQ(tagger.tag_word("kisses"), Pos::Verb);
  EXPECT_EQ(tagger.tag_word("zorbling"), Pos::Verb);
  EXPECT_EQ(tagger.tag_word("quickly"), Pos::Other);
  EXPECT_EQ(tagger.tag_word("flibbet"), Pos::Noun);
  EXPECT_EQ(tagger.tag_word("42"), Pos::Other);
  EXPECT_EQ(tagger.tag_word(","), Pos::Other);
  EXPECT_EQ(tagger.tag_word("truck's"), Pos::Noun);
  EXPECT_GT(tagger.lexicon_size(), 1000u);
  EXPECT_EQ(tagger.name().rfind("reference@", 0), 0u);
}

TEST(ReferenceTagger, LexiconFormat) {
  const auto t = ReferenceTagger::from_text("# comment\nblorp\tVERB\n\nzig\tADJ\n", "tiny");
  EXPECT_EQ(t.tag_word("blorp"), Pos::Verb);
  EXPECT_EQ(t.tag_word("Zig"), Pos::Adj);
  EXPECT_EQ(t.lexicon_size(), 2u);
  EXPECT_THROW(ReferenceTagger::from_text("a\tNOUN\na\tVERB\n", "x"), ParseError);
  EXPECT_THROW(ReferenceTagger::from_text("a\tNOPE\n", "x"), Error);
  EXPECT_THROW(ReferenceTagger::from_file("/nonexistent/lexicon.tsv"), LoadError);
}

TEST(Keywords, GoldenCaptions) {
  std::ifstream in(test_data("golden/keywords.jsonl"));
  ASSERT_TRUE(in);
  const ReferenceTagger tagger;
  int cases = 0;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    const auto captions = j["captions"].get<std::vector<std::string>>();
    std::string joined;
    for (const auto& c : captions) joined += (joined.empty() ? "" : " ") + c;
    std::vector<std::string> tags;
    for (const auto& t : tag_pos(tokenize(joined), tagger)) tags.emplace_back(to_string(t.pos));
    EXPECT_EQ(tags, j["tags"].get<std::vector<std::string>>()) << joined;
    EXPECT_EQ(extract_keywords(captions, tagger).words, j["keywords"].get<std::vector<std::string>>()) << joined;
    ++cases;
  }
  EXPECT_EQ(cases, 15);
}

TEST(Keywords, DeduplicatedOrderedContentOnly) {
  const ReferenceTagger tagger;
  const std::vector<std::string> pair{"The rabbit is faster than the turtle.", "the turtle is faster than the rabbit"};
  const auto k = extract_keywords(pair, tagger);
  EXPECT_EQ(k.words, (std::vector<std::string>{"rabbit", "faster", "than", "turtle"}));
  EXPECT_EQ(k.source, KeywordSource::ConcatenatedCaptions);
  const std::vector<std::string> one{"it is"};
  EXPECT_TRUE(extract_keywords(one, tagger).words.empty());
  EXPECT_EQ(extract_keywords(one, tagger).source, KeywordSource::SingleCaption);
}

TEST(Keywords, CaptionCount) {
  const ReferenceTagger tagger;
  EXPECT_THROW(extract_keywords(std::vector<std::string>{}, tagger), ValidationError);
  EXPECT_THROW(extract_keywords(std::vector<std::string>{"a", "b", "c"}, tagger), ValidationError);
}

TEST(Keywords, Auxiliaries) {
  EXPECT_TRUE(is_auxiliary("is"));
  EXPECT_TRUE(is_auxiliary("doesn't"));
  EXPECT_FALSE(is_auxiliary("runs"));
}

TEST(Taggers, Registry) {
  EXPECT_NE(make_tagger("reference"), nullptr);
  EXPECT_THROW(make_tagger("spacy"), ConfigError);

  TempDir dir;
  write_text(dir / "lex.tsv", "dog\tVERB\n");
  const auto custom = make_tagger("reference", (dir / "lex.tsv").string());
  const std::vector<std::string> caption{"dog cat"};
  EXPECT_EQ(extract_keywords(caption, *custom).words, (std::vector<std::string>{"dog", "cat"}));
}

TEST(Taggers, ExternalProcess) {
  ExternalProcessTagger tagger("sed 's/.*/ADJ/'");
  const auto tags = tagger.tag(tokenize("red big box"));
  EXPECT_EQ(tags, (std::vector<Pos>{Pos::Adj, Pos::Adj, Pos::Adj}));

  ExternalProcessTagger short_output("head -n 1 | sed 's/.*/NOUN/'");
  EXPECT_THROW(short_output.tag(tokenize("a b")), Error);
}
