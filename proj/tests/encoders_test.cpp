#include <random>

#include <gtest/gtest.h>

#include "aligngen/encoders.hpp"
#include "aligngen/model.hpp"
#include "oracle.hpp"

using namespace aligngen;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d = 32;
  c.blocks = 1;
  c.heads = 2;
  c.text_heads = 2;
  c.dem_heads = 2;
  c.redux_tokens = 16;
  c.lora_rank = 4;
  return c;
}

ParamStore<double> encoder_store(const ModelConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamStore<double> s;
  enc::init_text_encoder(s, c, rng);
  enc::init_image_embedder(s, c, rng);
  enc::init_redux(s, c, rng);
  // non-trivial biases and gains
  for (auto& e : s.entries())
    if (e.name.ends_with(".b") || e.name.find("norm") != std::string::npos)
      for (auto& v : e.value.data()) v += std::normal_distribution<double>(0.0, 0.2)(rng);
  return s;
}

Image random_image(int size, std::mt19937_64& rng) {
  Image img(size, size);
  std::uniform_real_distribution<float> u(0.f, 1.f);
  for (auto& v : img.pixels) v = u(rng);
  return img;
}

const prompt::PromptBundle& sample_bundle() {
  static const auto b = prompt::build_prompt(prompt::Vocabulary::standard(), "a {C} on white background",
                                             {0, {"clay", "square"}, {"square"}, {"shape"}, {}},
                                             prompt::NameLevel::kSurface);
  return b;
}

oracle::Mat text_oracle(const ParamStore<double>& s, const ModelConfig& c, const prompt::PromptBundle& b) {
  oracle::Weights w{s};
  const auto table = oracle::to_mat(s.get("text.embed"));
  oracle::Mat x(b.size(), c.d);
  for (std::size_t i = 0; i < b.size(); ++i) x.row(i) = table.row(b.token_ids[i]);
  x += oracle::to_mat(s.get("text.pos"));
  const oracle::Row g1 = w.row("text.norm1"), g2 = w.row("text.norm2"), g3 = w.row("text.norm_out");
  oracle::Mat h = oracle::rms_norm(x, &g1);
  x += w.lin("text.attn.o", oracle::attention(w.lin("text.attn.q", h), w.lin("text.attn.k", h),
                                              w.lin("text.attn.v", h), int(c.text_heads)));
  h = oracle::rms_norm(x, &g2);
  x += w.lin("text.mlp.fc2", oracle::gelu(w.lin("text.mlp.fc1", h)));
  return oracle::rms_norm(x, &g3);
}

}  // namespace

TEST(EncodeText, ShapeAndDeterminism) {
  const auto c = small_config();
  const auto s = encoder_store(c, 1);
  ad::Tape<double> t1, t2;
  Bound<double> p1(t1, s), p2(t2, s);
  auto a = enc::encode_text(p1, c, sample_bundle());
  auto b = enc::encode_text(p2, c, sample_bundle());
  EXPECT_EQ(a.dims(), (ad::Shape{c.max_text_len, c.d}));
  EXPECT_EQ(a.value().storage(), b.value().storage());
}

TEST(EncodeText, ZeroEmbeddingTableMatchesScriptedBlock) {
  const auto c = small_config();
  auto s = encoder_store(c, 2);
  s.get("text.embed").fill(0.0);
  ad::Tape<double> tape;
  Bound<double> p(tape, s);
  auto out = enc::encode_text(p, c, sample_bundle());
  EXPECT_LT(oracle::max_diff(out.value(), text_oracle(s, c, sample_bundle())), 1e-10);
}

TEST(EncodeText, RandomTableMatchesScriptedBlock) {
  const auto c = small_config();
  const auto s = encoder_store(c, 3);
  ad::Tape<double> tape;
  Bound<double> p(tape, s);
  EXPECT_LT(oracle::max_diff(enc::encode_text(p, c, sample_bundle()).value(), text_oracle(s, c, sample_bundle())), 1e-10);
}

TEST(EncodeText, RejectsOutOfVocabularyIds) {
  const auto c = small_config();
  const auto s = encoder_store(c, 4);
  auto b = sample_bundle();
  b.token_ids[3] = int(c.vocab_size);
  ad::Tape<double> tape;
  Bound<double> p(tape, s);
  EXPECT_THROW(enc::encode_text(p, c, b), DataError);
}

TEST(EncodeText, StarRowUsesLearnableEmbedding) {
  const auto c = small_config();
  auto s = encoder_store(c, 5);
  std::mt19937_64 rng(5);
  s.add("s_star", ad::Tensor<double>::randn({1, c.d}, rng), Group::kStar, false);
  ad::Tape<double> tape;
  Bound<double> p(tape, s);
  auto out = enc::encode_text(p, c, sample_bundle());
  // oracle with the <s*> table row swapped for s_star
  auto swapped = s.cast<double>();
  auto& table = swapped.get("text.embed");
  for (std::size_t k = 0; k < c.d; ++k) table(prompt::kStarId, k) = s.get("s_star")[k];
  EXPECT_LT(oracle::max_diff(out.value(), text_oracle(swapped, c, sample_bundle())), 1e-10);
}

TEST(EncodeRedux, BlackImageGivesIdenticalRows) {
  const auto c = small_config();
  const auto s = encoder_store(c, 6);
  ad::Tape<double> tape;
  Bound<double> p(tape, s);
  auto r = enc::encode_redux(p, c, enc::black_reference(16, 16)).value();
  ASSERT_EQ(r.dims(), (ad::Shape{16, c.d}));
  for (std::size_t i = 1; i < r.rows(); ++i)
    for (std::size_t k = 0; k < r.cols(); ++k) EXPECT_EQ(r(i, k), r(0, k));
}

TEST(EncodeRedux, OnePatchChangeIsLocal) {
  const auto c = small_config();
  const auto s = encoder_store(c, 7);
  std::mt19937_64 rng(7);
  Image a = random_image(16, rng), b = a;
  // pixel (10, 9) lies in redux patch (5, 4), pooled into token (2, 2)
  b.at(10, 9, 0) += 0.5f;
  ad::Tape<double> tape;
  Bound<double> p(tape, s);
  auto ra = enc::encode_redux(p, c, a).value(), rb = enc::encode_redux(p, c, b).value();
  const std::size_t changed_group = (10 / 4) * 4 + (9 / 4);
  for (std::size_t g = 0; g < 16; ++g) {
    bool same = true;
    for (std::size_t k = 0; k < c.d; ++k) same = same && ra(g, k) == rb(g, k);
    EXPECT_EQ(same, g != changed_group) << "group " << g;
  }
}

TEST(EncodeRedux, MatchesPoolOracle) {
  const auto c = small_config();
  const auto s = encoder_store(c, 8);
  std::mt19937_64 rng(8);
  const Image img = random_image(16, rng);
  oracle::Weights w{s};
  oracle::Mat emb = w.lin("redux.patch", oracle::to_mat(patchify<double>(img, c.redux_patch)));
  // 8x8 patch grid pooled into a 4x4 token grid
  oracle::Mat pooled = oracle::Mat::Zero(16, c.d);
  for (int r = 0; r < 8; ++r)
    for (int q = 0; q < 8; ++q) pooled.row((r / 2) * 4 + q / 2) += emb.row(r * 8 + q) / 4.0;
  ad::Tape<double> tape;
  Bound<double> p(tape, s);
  EXPECT_LT(oracle::max_diff(enc::encode_redux(p, c, img).value(), w.lin("redux.proj", pooled)), 1e-12);
}

TEST(EncodeRedux, RejectsIndivisibleImage) {
  const auto c = small_config();
  const auto s = encoder_store(c, 9);
  ad::Tape<double> tape;
  Bound<double> p(tape, s);
  EXPECT_THROW(enc::encode_redux(p, c, Image(15, 15)), ShapeError);
  EXPECT_THROW(enc::encode_reference(p, c, Image(20, 20), 1.0), ShapeError);
}

class ReferenceLora : public ::testing::Test {
 protected:
  void SetUp() override {
    c = small_config();
    s = encoder_store(c, 10);
    std::mt19937_64 rng(10);
    layers::add_lora(s, "lora.img_embed", c.patch_dim(), c.d, c.lora_rank, rng);
    img = random_image(16, rng);
  }
  ad::Tensor<double> run(double scale) {
    ad::Tape<double> tape;
    Bound<double> p(tape, s);
    return enc::encode_reference(p, c, img, scale).value();
  }
  ad::Tensor<double> base() {
    ad::Tape<double> tape;
    Bound<double> p(tape, s);
    return layers::linear(p, "img.embed", tape.constant(patchify<double>(img, c.patch))).value();
  }
  ModelConfig c;
  ParamStore<double> s;
  Image img;
};

TEST_F(ReferenceLora, ScaleZeroIsBitwiseBase) {
  std::mt19937_64 rng(11);
  s.get("lora.img_embed.b") = ad::Tensor<double>::randn({c.lora_rank, c.d}, rng);
  EXPECT_EQ(run(0.0).storage(), base().storage());
}

TEST_F(ReferenceLora, ZeroInitUpProjectionIsBase) { EXPECT_EQ(run(1.0).storage(), base().storage()); }

TEST_F(ReferenceLora, RandomLoraMatchesTwoMatmulOracle) {
  std::mt19937_64 rng(12);
  s.get("lora.img_embed.b") = ad::Tensor<double>::randn({c.lora_rank, c.d}, rng);
  const oracle::Mat x = oracle::to_mat(patchify<double>(img, c.patch));
  oracle::Weights w{s};
  const oracle::Mat expect = w.lin("img.embed", x) + (x * oracle::to_mat(s.get("lora.img_embed.a"))) *
                                                         oracle::to_mat(s.get("lora.img_embed.b"));
  EXPECT_LT(oracle::max_diff(run(1.0), expect), 1e-12);
}

TEST_F(ReferenceLora, AffineInTheImage) {
  std::mt19937_64 rng(13);
  s.get("lora.img_embed.b") = ad::Tensor<double>::randn({c.lora_rank, c.d}, rng);
  const double alpha = 0.37;
  const auto fx = run(1.0);
  Image scaled = img;
  for (auto& v : scaled.pixels) v = static_cast<float>(alpha * v);
  // float pixels: compare against the exact scaled image
  std::swap(img, scaled);
  const auto fax = run(1.0);
  img = enc::black_reference(16, 16);
  const auto f0 = run(1.0);
  std::swap(img, scaled);
  for (std::size_t i = 0; i < fx.size(); ++i) EXPECT_NEAR(fax[i], alpha * fx[i] + (1 - alpha) * f0[i], 1e-6);
}

TEST(BlackReference, AllZeros) {
  const Image b = enc::black_reference(16, 16);
  EXPECT_EQ(b.height, 16);
  EXPECT_EQ(b.width, 16);
  EXPECT_EQ(b.pixels.size(), 16u * 16u * 3u);
  for (float v : b.pixels) EXPECT_EQ(v, 0.0f);
}

TEST(Streams, ReferenceAndNoisyTokensShareShape) {
  for (int size : {16, 24}) {
    auto c = small_config();
    c.image_size = size;
    c.redux_patch = 2;
    c.redux_tokens = size == 16 ? 16 : 36;
    std::mt19937_64 rng(size);
    const auto s = init_base_params<double>(c, rng);
    ad::Tape<double> tape;
    Bound<double> p(tape, s);
    const Image img = random_image(size, rng);
    auto ref = enc::encode_reference(p, c, img, 0.0);
    auto noisy = enc::embed_noisy(p, tape.constant(patchify<double>(img, c.patch)));
    EXPECT_EQ(ref.dims(), noisy.dims());
    EXPECT_EQ(ref.rows(), c.num_patches());
  }
}
