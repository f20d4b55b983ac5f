#include <algorithm>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "aligngen/attnlayout.hpp"
#include "aligngen/layers.hpp"
#include "aligngen/promptkit.hpp"

using namespace aligngen;
using namespace aligngen::layout;
using ad::Tensor;

namespace {

prompt::PromptBundle bundle_with(const std::vector<bool>& rel) {
  prompt::PromptBundle b;
  b.token_ids.assign(rel.size(), 2);
  b.relevance = rel;
  return b;
}

std::size_t count_neg(const Tensor<double>& m, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
  std::size_t n = 0;
  for (std::size_t r = r0; r < r1; ++r)
    for (std::size_t c = c0; c < c1; ++c) n += m(r, c) <= -1e9;
  return n;
}

LayoutShape random_shape(std::mt19937_64& rng, std::size_t max_refs = 3) {
  std::uniform_int_distribution<int> g(1, 5);
  LayoutShape s;
  s.grid_h = g(rng);
  s.grid_w = g(rng);
  s.noisy = std::size_t(s.grid_h * s.grid_w);
  s.text = std::size_t(g(rng) + 1);
  s.refs = std::uniform_int_distribution<std::size_t>(0, max_refs)(rng);
  for (std::size_t i = 0; i < s.text; ++i) s.relevance.push_back(std::bernoulli_distribution(0.4)(rng));
  return s;
}

}  // namespace

TEST(Assemble, SingleReferenceShape) {
  ad::Tape<double> tape;
  auto noisy = tape.constant(Tensor<double>({16, 4}, 1.0));
  auto text = tape.constant(Tensor<double>({8, 4}, 2.0));
  auto ref = tape.constant(Tensor<double>({16, 4}, 3.0));
  auto lay = assemble(noisy, text, {ref}, bundle_with(std::vector<bool>(8, false)), 4, 4);
  EXPECT_EQ(lay.tokens.dims(), (ad::Shape{40, 4}));
  ASSERT_EQ(lay.segments.size(), 40u);
  for (std::size_t i = 0; i < 40; ++i) {
    const auto want = i < 16 ? SegmentKind::kNoisy : i < 24 ? SegmentKind::kText : SegmentKind::kRef;
    EXPECT_EQ(lay.segments[i].kind, want);
    EXPECT_EQ(lay.tokens.value()(i, 0), want == SegmentKind::kNoisy ? 1.0 : want == SegmentKind::kText ? 2.0 : 3.0);
  }
}

TEST(Assemble, TwoReferencesAndNone) {
  ad::Tape<double> tape;
  auto noisy = tape.constant(Tensor<double>({4, 4}));
  auto text = tape.constant(Tensor<double>({3, 4}));
  auto ref = tape.constant(Tensor<double>({4, 4}));
  const auto b = bundle_with({true, false, false});
  EXPECT_EQ(assemble(noisy, text, {ref, ref}, b, 2, 2).tokens.rows(), 3u + 3 * 4);
  auto none = assemble<double>(noisy, text, {}, b, 2, 2);
  EXPECT_EQ(none.tokens.rows(), 3u + 4);
  EXPECT_EQ(none.segments.back().kind, SegmentKind::kText);
}

TEST(Assemble, MismatchErrors) {
  ad::Tape<double> tape;
  auto noisy = tape.constant(Tensor<double>({4, 4}));
  auto text = tape.constant(Tensor<double>({3, 4}));
  const auto b = bundle_with({true, false, false});
  EXPECT_THROW(assemble(noisy, tape.constant(Tensor<double>({3, 5})), {}, b, 2, 2), ShapeError);
  EXPECT_THROW(assemble(noisy, text, {tape.constant(Tensor<double>({3, 4}))}, b, 2, 2), ShapeError);
  EXPECT_THROW(assemble(noisy, text, {tape.constant(Tensor<double>({4, 5}))}, b, 2, 2), ShapeError);
}

TEST(Rope, TwoByTwoExample) {
  LayoutShape s{4, 2, 1, 2, 2, {false, false}};
  const auto pos = rope_indices(s);
  const std::vector<Position> want{{0, 0}, {0, 1}, {1, 0}, {1, 1}, {0, 0}, {0, 0}, {0, 2}, {0, 3}, {1, 2}, {1, 3}};
  EXPECT_EQ(pos, want);
}

TEST(Rope, NoisyAndReferencePositionsAreDisjoint) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    auto s = random_shape(rng);
    if (s.refs == 0) s.refs = 1;
    const auto pos = rope_indices(s);
    std::set<Position> noisy(pos.begin(), pos.begin() + long(s.noisy));
    for (std::size_t k = 0; k < s.refs; ++k) {
      std::set<Position> ref(pos.begin() + long(s.ref_begin(k)), pos.begin() + long(s.ref_begin(k) + s.noisy));
      EXPECT_EQ(ref.size(), s.noisy);
      for (const auto& p : ref) EXPECT_FALSE(noisy.contains(p));
      std::set<Position> first(pos.begin() + long(s.ref_begin(0)), pos.begin() + long(s.ref_begin(0) + s.noisy));
      EXPECT_EQ(ref, first);
    }
    for (std::size_t t = 0; t < s.text; ++t) EXPECT_EQ(pos[s.text_begin() + t], (Position{0, 0}));
  }
}

TEST(Rope, PositionsIgnoreNameSubstitution) {
  const auto vocab = prompt::Vocabulary::standard();
  const prompt::ConceptRecord rec{0, {"metal", "triangle"}, {"triangle"}, {"shape"}, {}};
  std::vector<Position> ref;
  for (auto level : {prompt::NameLevel::kSurface, prompt::NameLevel::kParent, prompt::NameLevel::kBroader}) {
    const auto b = prompt::build_prompt(vocab, "a {C} on white background", rec, level);
    const auto pos = rope_indices(LayoutShape{16, b.size(), 1, 4, 4, b.relevance});
    if (ref.empty()) ref = pos;
    EXPECT_EQ(pos, ref);
  }
}

TEST(Mask, FourTokenExample) {
  LayoutShape s{2, 4, 1, 1, 2, {false, true, true, false}};
  const auto m = build_mask<double>(s);
  ASSERT_EQ(m.rows(), 8u);
  EXPECT_EQ(count_neg(m, 2, 6, 6, 8), 4u);
  EXPECT_EQ(count_neg(m, 0, 8, 0, 8), 4u);
  for (std::size_t c = 6; c < 8; ++c) {
    EXPECT_LE(m(2, c), -1e9);
    EXPECT_LE(m(5, c), -1e9);
    EXPECT_EQ(m(3, c), 0.0);
  }
}

TEST(Mask, AllRelevantSingleReferenceIsZero) {
  LayoutShape s{4, 3, 1, 2, 2, {true, true, true}};
  const auto m = build_mask<double>(s);
  for (double v : m.data()) EXPECT_EQ(v, 0.0);
}

TEST(Mask, TwoReferencesBlockEachOther) {
  LayoutShape s{2, 2, 2, 1, 2, {true, true}};
  const auto m = build_mask<double>(s);
  EXPECT_EQ(count_neg(m, 0, m.rows(), 0, m.cols()), 8u);
  EXPECT_EQ(count_neg(m, s.ref_begin(0), s.ref_begin(1), s.ref_begin(1), s.total()), 4u);
  EXPECT_EQ(count_neg(m, s.ref_begin(1), s.total(), s.ref_begin(0), s.ref_begin(1)), 4u);
}

TEST(Mask, StructuralInvariants) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const auto s = random_shape(rng);
    const auto m = build_mask<double>(s);
    const auto seg = s.segments();
    for (std::size_t r = 0; r < s.total(); ++r) {
      EXPECT_EQ(m(r, r), 0.0);
      for (std::size_t c = 0; c < s.total(); ++c) {
        const bool irrelevant_text_to_ref = seg[r].kind == SegmentKind::kText && !s.relevance[r - s.noisy] &&
                                            seg[c].kind == SegmentKind::kRef;
        const bool cross_ref = seg[r].kind == SegmentKind::kRef && seg[c].kind == SegmentKind::kRef &&
                               seg[r].ref_index != seg[c].ref_index;
        EXPECT_EQ(m(r, c) < 0, irrelevant_text_to_ref || cross_ref) << r << "," << c;
        if (m(r, c) < 0) {
          EXPECT_LE(m(r, c), -1e9);
        }
      }
    }
  }
}

TEST(Mask, SymmetricFlagBlocksTheReverseDirection) {
  LayoutShape s{2, 2, 1, 1, 2, {false, true}};
  const auto m = build_mask<double>(s, true);
  EXPECT_LE(m(4, 2), -1e9);  // ref query -> irrelevant text key
  EXPECT_EQ(m(4, 3), 0.0);
  EXPECT_EQ(build_mask<double>(s)(4, 2), 0.0);
}

TEST(Mask, MaskedWeightsUnderflowAndRowsSumToOne) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto s = random_shape(rng);
    if (s.refs == 0) s.refs = 1;
    const auto mask = build_mask<float>(s);
    ad::Tape<float> tape;
    const std::size_t n = s.total();
    auto q = tape.constant(Tensor<float>::uniform({n, 8}, rng, -3.f, 3.f));
    auto k = tape.constant(Tensor<float>::uniform({n, 8}, rng, -3.f, 3.f));
    layers::AttentionProbe<float> probe;
    layers::multi_head_attention(q, k, q, 2, &mask, &probe);
    for (const auto& w : probe.weights)
      for (std::size_t r = 0; r < n; ++r) {
        double row = 0;
        for (std::size_t c = 0; c < n; ++c) {
          row += w(r, c);
          if (mask(r, c) < 0) {
            EXPECT_LT(w(r, c), 1e-30f);
          }
        }
        EXPECT_NEAR(row, 1.0, 1e-5);
      }
  }
}

TEST(Mask, AllRelevantMaskedEqualsUnmaskedBitwise) {
  std::mt19937_64 rng(4);
  LayoutShape s{4, 3, 1, 2, 2, {true, true, true}};
  const auto mask = build_mask<float>(s);
  ad::Tape<float> tape;
  auto q = tape.constant(Tensor<float>::uniform({s.total(), 8}, rng, -1.f, 1.f));
  auto a = layers::multi_head_attention(q, q, q, 2, &mask);
  auto b = layers::multi_head_attention(q, q, q, 2);
  EXPECT_EQ(a.value().storage(), b.value().storage());
}

TEST(Mask, DumpUsesDotsAndCrosses) {
  LayoutShape s{1, 2, 1, 1, 1, {false, true}};
  EXPECT_EQ(dump_mask(build_mask<double>(s)), "....\n...X\n....\n....\n");
}
