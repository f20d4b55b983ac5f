#include <random>

#include <gtest/gtest.h>

#include "aligngen/dem.hpp"
#include "aligngen/gradsuite.hpp"
#include "aligngen/model.hpp"
#include "oracle.hpp"

using namespace aligngen;
using ad::Tensor;

namespace {

ModelConfig toy(std::size_t d, std::size_t heads) {
  ModelConfig c;
  c.d = d;
  c.dem_heads = heads;
  c.dem_mlp_ratio = 4;
  return c;
}

ParamStore<double> dem_store(const ModelConfig& c, std::uint64_t seed, bool randomize_out) {
  std::mt19937_64 rng(seed);
  ParamStore<double> s;
  dem::init_dem(s, c, rng);
  if (randomize_out) gradsuite::detail::randomize_zeros(s, rng, 0.4);
  return s;
}

oracle::Mat dem_oracle(const ParamStore<double>& s, const ModelConfig& c, const oracle::Mat& ctoks, const oracle::Mat& redux) {
  oracle::Weights w{s};
  const int h = int(c.dem_heads);
  oracle::Mat x = ctoks;
  x += w.lin("dem.sa.o", oracle::attention(w.lin("dem.sa.q", x), w.lin("dem.sa.k", x), w.lin("dem.sa.v", x), h));
  x += w.lin("dem.ca.o", oracle::attention(w.lin("dem.ca.q", x), w.lin("dem.ca.k", redux), w.lin("dem.ca.v", redux), h));
  x += w.lin("dem.mlp.fc2", oracle::gelu(w.lin("dem.mlp.fc1", x)));
  return x;
}

}  // namespace

TEST(Extract, CopiesSpanRows) {
  std::mt19937_64 rng(1);
  ad::Tape<double> tape;
  auto text = tape.constant(Tensor<double>::randn({8, 4}, rng));
  auto c = dem::extract_concept_tokens(text, {1, 3, 0});
  ASSERT_EQ(c.dims(), (ad::Shape{2, 4}));
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(c.value()(r, k), text.value()(r + 1, k));
  EXPECT_EQ(dem::extract_concept_tokens(text, {0, 8, 0}).value().storage(), text.value().storage());
  EXPECT_THROW(dem::extract_concept_tokens(text, {3, 3, 0}), ShapeError);
  EXPECT_THROW(dem::extract_concept_tokens(text, {6, 9, 0}), ShapeError);
}

TEST(DemForward, IdentityAtInit) {
  const auto c = toy(32, 4);
  const auto s = dem_store(c, 2, false);
  std::mt19937_64 rng(2);
  ad::Tape<double> tape;
  Bound<double> p(tape, s);
  auto ctoks = tape.constant(Tensor<double>::randn({3, 32}, rng));
  auto redux = tape.constant(Tensor<double>::randn({16, 32}, rng));
  EXPECT_EQ(dem::dem_forward(p, c, ctoks, redux).value().storage(), ctoks.value().storage());
}

TEST(DemForward, MatchesScriptedOracleTiny) {
  const auto c = toy(4, 1);
  const auto s = dem_store(c, 3, true);
  std::mt19937_64 rng(3);
  const auto ctoks = Tensor<double>::uniform({2, 4}, rng, -1, 1);  // l = 1
  const auto redux = Tensor<double>::uniform({16, 4}, rng, -1, 1);
  ad::Tape<double> tape;
  Bound<double> p(tape, s);
  auto out = dem::dem_forward(p, c, tape.constant(ctoks), tape.constant(redux));
  EXPECT_LT(oracle::max_diff(out.value(), dem_oracle(s, c, oracle::to_mat(ctoks), oracle::to_mat(redux))), 1e-6);
}

TEST(DemForward, MatchesScriptedOracleMultiHead) {
  const auto c = toy(16, 4);
  const auto s = dem_store(c, 4, true);
  std::mt19937_64 rng(4);
  const auto ctoks = Tensor<double>::uniform({3, 16}, rng, -1, 1);
  const auto redux = Tensor<double>::uniform({9, 16}, rng, -1, 1);
  ad::Tape<double> tape;
  Bound<double> p(tape, s);
  auto out = dem::dem_forward(p, c, tape.constant(ctoks), tape.constant(redux));
  EXPECT_LT(oracle::max_diff(out.value(), dem_oracle(s, c, oracle::to_mat(ctoks), oracle::to_mat(redux))), 1e-10);
}

TEST(DemForward, WidthMismatchIsAnError) {
  const auto c = toy(8, 2);
  const auto s = dem_store(c, 5, false);
  ad::Tape<double> tape;
  Bound<double> p(tape, s);
  EXPECT_THROW(dem::dem_forward(p, c, tape.constant(Tensor<double>({2, 8})), tape.constant(Tensor<double>({4, 6}))),
               ShapeError);
}

TEST(DemForward, Gradcheck) {
  const auto rep = gradsuite::dem_block();
  EXPECT_LT(rep.max_rel_err, 1e-4);
  EXPECT_GT(rep.checked_scalars, 0u);
}

TEST(Splice, FirstOnlyTouchesOneRow) {
  std::mt19937_64 rng(6);
  ad::Tape<double> tape;
  auto text = tape.constant(Tensor<double>::randn({8, 4}, rng));
  auto upd = tape.constant(Tensor<double>::randn({3, 4}, rng));
  const prompt::ConceptSpan span{2, 5, 0};
  auto out = dem::splice_token(text, span, upd, dem::SpliceMode::kFirstOnly).value();
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t k = 0; k < 4; ++k)
      EXPECT_EQ(out(r, k), r == 2 ? upd.value()(0, k) : text.value()(r, k));
}

TEST(Splice, AllReplacesTheSpan) {
  std::mt19937_64 rng(7);
  ad::Tape<double> tape;
  auto text = tape.constant(Tensor<double>::randn({8, 4}, rng));
  auto upd = tape.constant(Tensor<double>::randn({3, 4}, rng));
  auto out = dem::splice_token(text, {2, 5, 0}, upd, dem::SpliceMode::kAll).value();
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t k = 0; k < 4; ++k)
      EXPECT_EQ(out(r, k), (r >= 2 && r < 5) ? upd.value()(r - 2, k) : text.value()(r, k));
  EXPECT_THROW(dem::splice_token(text, {2, 4, 0}, upd, dem::SpliceMode::kAll), ShapeError);
}

TEST(Splice, IdentityDemRoundTrip) {
  const auto c = toy(16, 2);
  const auto s = dem_store(c, 8, false);
  std::mt19937_64 rng(8);
  ad::Tape<double> tape;
  Bound<double> p(tape, s);
  auto text = tape.constant(Tensor<double>::randn({16, 16}, rng));
  auto redux = tape.constant(Tensor<double>::randn({16, 16}, rng));
  for (auto mode : {dem::SpliceMode::kFirstOnly, dem::SpliceMode::kAll}) {
    const prompt::ConceptSpan span{3, 6, 0};
    auto upd = dem::dem_forward(p, c, dem::extract_concept_tokens(text, span), redux);
    EXPECT_EQ(dem::splice_token(text, span, upd, mode).value().storage(), text.value().storage());
  }
}

// Two spans with the same concept tokens and the same reference get the same
// updated <s*>.
TEST(MultiConcept, SharedParametersGiveIdenticalUpdates) {
  ModelConfig c;
  c.d = 16;
  c.heads = c.text_heads = c.dem_heads = 2;
  c.blocks = 1;
  c.lora_rank = 2;
  std::mt19937_64 rng(9);
  auto s = init_base_params<double>(c, rng);
  add_adapter_params(s, c, rng, Tensor<double>::randn({1, c.d}, rng));
  gradsuite::detail::randomize_zeros(s, rng);
  const auto vocab = prompt::Vocabulary::standard();
  const prompt::ConceptRecord sq{0, {"clay", "square"}, {"square"}, {"shape"}, {}};
  const auto bundle = prompt::build_multi_prompt(vocab, "{C} {C}", {sq, sq}, prompt::NameLevel::kSurface, c.max_text_len);
  // the text encoder mixes positions, so compare the DEM map directly
  Image ref(16, 16, 0.3f);
  ad::Tape<double> tape;
  Bound<double> p(tape, s);
  auto redux = enc::encode_redux(p, c, ref);
  auto ctoks = tape.constant(Tensor<double>::randn({3, c.d}, rng));
  auto a = dem::dem_forward(p, c, ctoks, redux), b = dem::dem_forward(p, c, ctoks, redux);
  EXPECT_EQ(a.value().storage(), b.value().storage());
  // and condition() runs DEM on both spans with their own reference
  auto cond = condition(p, c, bundle, {ref, ref}, {ref, ref}, dit::SegmentGate::adaptation(), Variant{});
  EXPECT_EQ(cond.text.rows(), c.max_text_len);
  EXPECT_THROW(condition(p, c, bundle, {ref}, {ref}, dit::SegmentGate::adaptation(), Variant{}), ArgumentError);
}
