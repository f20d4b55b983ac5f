#include <cmath>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "aligngen/promptkit.hpp"
#include "aligngen/synthdata.hpp"

using namespace aligngen;
using namespace aligngen::prompt;

namespace {

const Vocabulary& vocab() {
  static const Vocabulary v = Vocabulary::standard();
  return v;
}

ConceptRecord square() { return {0, {"square"}, {"square"}, {"shape"}, {}}; }
ConceptRecord wooden_circle() { return {1, {"wooden", "circle"}, {"circle"}, {"shape"}, {}}; }

std::vector<std::string> words(const PromptBundle& b) {
  std::vector<std::string> out;
  for (int id : b.token_ids) out.push_back(vocab().word(id));
  return out;
}

void expect_relevance_matches_spans(const PromptBundle& b) {
  ASSERT_EQ(b.relevance.size(), b.token_ids.size());
  for (std::size_t i = 0; i < b.size(); ++i) {
    bool in = false;
    for (const auto& s : b.spans) in = in || (i >= s.begin && i < s.end);
    EXPECT_EQ(b.relevance[i], in) << "index " << i;
    if (b.token_ids[i] == kPadId) {
      EXPECT_FALSE(b.relevance[i]);
    }
  }
}

}  // namespace

TEST(Vocabulary, ReservedIds) {
  EXPECT_EQ(vocab().id("<pad>"), kPadId);
  EXPECT_EQ(vocab().id("<s*>"), kStarId);
  EXPECT_THROW(vocab().id("robot"), DataError);
}

TEST(Vocabulary, FileRoundTrip) {
  const auto path = (std::filesystem::temp_directory_path() / "aligngen_vocab_test.txt").string();
  vocab().save(path);
  EXPECT_EQ(Vocabulary::load(path), vocab());
  std::filesystem::remove(path);
}

TEST(BuildPrompt, SurfaceExample) {
  const auto b = build_prompt(vocab(), "a {C} on blue background", square(), NameLevel::kSurface);
  ASSERT_EQ(b.size(), kDefaultMaxLen);
  const std::vector<std::string> head{"a", "<s*>", "square", "on", "blue", "background"};
  const auto w = words(b);
  for (std::size_t i = 0; i < head.size(); ++i) EXPECT_EQ(w[i], head[i]);
  for (std::size_t i = head.size(); i < w.size(); ++i) EXPECT_EQ(w[i], "<pad>");
  ASSERT_EQ(b.spans.size(), 1u);
  EXPECT_EQ(b.concept_span(), (ConceptSpan{1, 3, 0}));
  EXPECT_EQ(b.s_star_index(), 1u);
  EXPECT_EQ(b.token_ids[1], kStarId);
  expect_relevance_matches_spans(b);
}

TEST(BuildPrompt, BroaderExample) {
  const auto b = build_prompt(vocab(), "a {C} on blue background", square(), NameLevel::kBroader);
  EXPECT_EQ(b.concept_span(), (ConceptSpan{1, 3, 0}));
  EXPECT_EQ(vocab().word(b.token_ids[2]), "shape");
}

TEST(BuildPrompt, PlaceholderErrors) {
  EXPECT_THROW(build_prompt(vocab(), "", square(), NameLevel::kSurface), ArgumentError);
  EXPECT_THROW(build_prompt(vocab(), "a square", square(), NameLevel::kSurface), ArgumentError);
  EXPECT_THROW(build_prompt(vocab(), "a {C} and {C}", square(), NameLevel::kSurface), ArgumentError);
}

TEST(BuildPrompt, TooLongIsAnError) {
  EXPECT_THROW(build_prompt(vocab(), "a photo of a {C} in front of white background", wooden_circle(),
                            NameLevel::kSurface, 8),
               ArgumentError);
}

TEST(BuildPrompt, NameLevelNeverMovesTheSpanStart) {
  const auto c = wooden_circle();
  for (const char* tmpl : {"a {C} on cyan background", "a picture of a {C} in front of white background"}) {
    const auto s = build_prompt(vocab(), tmpl, c, NameLevel::kSurface);
    for (auto l : {NameLevel::kParent, NameLevel::kBroader}) {
      const auto o = build_prompt(vocab(), tmpl, c, l);
      EXPECT_EQ(o.s_star_index(), s.s_star_index());
      EXPECT_EQ(o.concept_span().begin, s.concept_span().begin);
      expect_relevance_matches_spans(o);
    }
    EXPECT_EQ(s.concept_span().length(), 3u);  // <s*> wooden circle
  }
}

TEST(BuildPrompt, WithoutStarCoversNameOnly) {
  const auto b = build_prompt_without_star(vocab(), "a {C} on cyan background", wooden_circle(), NameLevel::kSurface);
  EXPECT_EQ(b.concept_span(), (ConceptSpan{1, 3, 0}));
  for (int id : b.token_ids) EXPECT_NE(id, kStarId);
}

TEST(BuildPrompt, DetokenizeRoundTrip) {
  const auto b = build_prompt(vocab(), "a photo of a {C} on magenta background", wooden_circle(), NameLevel::kSurface);
  const std::string text = instantiate(vocab(), b);
  EXPECT_EQ(text, "a photo of a <s*> wooden circle on magenta background");
  EXPECT_EQ(vocab().detokenize(vocab().tokenize(text)), text);
}

TEST(MultiPrompt, SharedStarAndDisjointSpans) {
  const auto b = build_multi_prompt(vocab(), "a {C} next to a {C}", {square(), wooden_circle()});
  ASSERT_EQ(b.spans.size(), 2u);
  EXPECT_EQ(b.token_ids[b.spans[0].begin], kStarId);
  EXPECT_EQ(b.token_ids[b.spans[1].begin], kStarId);
  EXPECT_LE(b.spans[0].end, b.spans[1].begin);
  EXPECT_EQ(b.spans[0].concept_index, 0u);
  EXPECT_EQ(b.spans[1].concept_index, 1u);
  expect_relevance_matches_spans(b);
}

TEST(MultiPrompt, Errors) {
  EXPECT_THROW(build_multi_prompt(vocab(), "a {C}", {square()}), ArgumentError);
  EXPECT_THROW(build_multi_prompt(vocab(), "a {C} and {C} and {C}", {square(), wooden_circle()}), ArgumentError);
}

TEST(ParsePrompt, MarkersOpenSpans) {
  const auto b = parse_prompt(vocab(), "a <s*> wooden circle next to a <s*> square on white background",
                              synth::is_name_word);
  ASSERT_EQ(b.spans.size(), 2u);
  EXPECT_EQ(b.spans[0], (ConceptSpan{1, 4, 0}));
  EXPECT_EQ(b.spans[1], (ConceptSpan{7, 9, 1}));
  expect_relevance_matches_spans(b);
  EXPECT_THROW(parse_prompt(vocab(), "a <s*> on white background", synth::is_name_word), ArgumentError);
}

TEST(NameLevel, DegenerateProbabilities) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 200; ++i) {
    EXPECT_EQ(sample_name_level(rng, {1, 0, 0}), NameLevel::kSurface);
    EXPECT_EQ(sample_name_level(rng, {0, 0, 1}), NameLevel::kBroader);
    EXPECT_EQ(sample_name_level(rng, {0, 1, 0}), NameLevel::kParent);
  }
}

TEST(NameLevel, BinomialCount) {
  std::mt19937_64 rng(2024);
  int surface = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) surface += sample_name_level(rng, {0.6, 0.2, 0.2}) == NameLevel::kSurface;
  const double sigma = std::sqrt(n * 0.6 * 0.4);
  EXPECT_LE(std::abs(surface - 6000.0), 3 * sigma);
}

TEST(NameLevel, Deterministic) {
  std::mt19937_64 a(7), b(7);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_name_level(a, {0.3, 0.3, 0.4}), sample_name_level(b, {0.3, 0.3, 0.4}));
}

TEST(NameLevel, InvalidProbabilities) {
  std::mt19937_64 rng(1);
  EXPECT_THROW(sample_name_level(rng, {-0.1, 0.6, 0.5}), ArgumentError);
  EXPECT_THROW(sample_name_level(rng, {0.5, 0.2, 0.2}), ArgumentError);
}

TEST(EmptyPrompt, AllPaddingNoSpans) {
  const auto b = empty_prompt();
  EXPECT_EQ(b.size(), kDefaultMaxLen);
  EXPECT_FALSE(b.has_concept());
  for (int id : b.token_ids) EXPECT_EQ(id, kPadId);
  EXPECT_THROW(b.concept_span(), ArgumentError);
}
