#include <gtest/gtest.h>

#include <cmath>

#include "actadd/error.hpp"
#include "actadd/steering.hpp"
#include "support.hpp"

namespace actadd {
namespace {

using testing::load_json;
using testing::max_abs_diff;
using testing::oracle_dir;
using testing::toy_model;
using testing::toy_vocab;

const nlohmann::json& toy_expected() {
  static const auto j = load_json(oracle_dir() / "toy_expected.json");
  return j;
}

SteeringSpec love_hate(double c = 4.0) {
  const auto& v = toy_expected()["vector"];
  return {ContrastPair::make(v["plus"].get<std::string>(), v["minus"].get<std::string>()), v["layer"].get<int>(), c,
          1, std::nullopt};
}

double max_relative_diff(const Matrix& m, const nlohmann::json& rows) {
  double scale = 1.0;
  for (const auto& r : rows) {
    for (const auto& x : r) scale = std::max(scale, std::abs(x.get<double>()));
  }
  return max_abs_diff(m, rows) / scale;
}

TEST(Steering, VectorMatchesOracle) {
  const auto vec = build_steering_vector(toy_model(), toy_vocab(), love_hate());
  const auto& fx = toy_expected()["vector"];
  ASSERT_EQ(vec.rows(), fx["rows"].get<std::size_t>());
  EXPECT_LE(max_relative_diff(vec.delta, fx["delta"]), 1e-5);
  for (float x : vec.delta.row(0)) EXPECT_EQ(x, 0.0f);
  EXPECT_EQ(vec.modified_range(), (std::pair<std::size_t, std::size_t>{1, 4}));
}

TEST(Steering, SteeredLogitsMatchOracle) {
  const auto vec = build_steering_vector(toy_model(), toy_vocab(), love_hate());
  const auto tokens = encode(toy_vocab(), toy_expected()["prompt"].get<std::string>(), true);
  EXPECT_EQ(tokens.ids, toy_expected()["prompt_tokens"].get<std::vector<TokenId>>());
  const auto steered = forward(toy_model(), tokens.ids, vec.hooks(tokens.size()));
  EXPECT_LE(max_relative_diff(steered.logits, toy_expected()["steered_logits"]), 1e-4);
  EXPECT_EQ(steered.modified_positions, (std::vector<std::size_t>{1, 2, 3}));

  const auto clean = forward(toy_model(), tokens.ids);
  const auto& expected_clean = toy_expected()["clean_last_logits"];
  double worst = 0.0;
  for (std::size_t i = 0; i < expected_clean.size(); ++i) {
    worst = std::max(worst, std::abs(clean.logits(tokens.size() - 1, i) - expected_clean[i].get<double>()));
  }
  EXPECT_LE(worst, 1e-4);
}

TEST(Steering, CoefficientIsLinear) {
  const auto unit = build_steering_vector(toy_model(), toy_vocab(), love_hate(1.0));
  for (double c : {0.0, -1.0, 2.5, 4.0, 10.0}) {
    const auto built = build_steering_vector(toy_model(), toy_vocab(), love_hate(c));
    EXPECT_EQ(built.delta, scale(unit, static_cast<float>(c)).delta) << c;
  }
  const auto neg = build_steering_vector(toy_model(), toy_vocab(), love_hate(-4.0));
  const auto pos = build_steering_vector(toy_model(), toy_vocab(), love_hate(4.0));
  for (std::size_t i = 0; i < pos.delta.data.size(); ++i) EXPECT_EQ(neg.delta.data[i], -pos.delta.data[i]);
}

TEST(Steering, IdenticalPromptsGiveZeroVector) {
  SteeringSpec spec{ContrastPair::make("Love", "Love"), 2, 10.0, 1, std::nullopt};
  const auto vec = build_steering_vector(toy_model(), toy_vocab(), spec);
  EXPECT_TRUE(vec.is_zero());
  const auto tokens = encode(toy_vocab(), "I went up to my friend and said", true);
  EXPECT_EQ(forward(toy_model(), tokens.ids, vec.hooks(tokens.size())).logits,
            forward(toy_model(), tokens.ids).logits);
}

TEST(Steering, PairNormalizationAndPadding) {
  const auto pair = ContrastPair::make("Love", " Hate");
  EXPECT_EQ(pair.plus, " Love");
  EXPECT_EQ(pair.minus, " Hate");
  EXPECT_THROW(ContrastPair::make("", ""), ValidationError);
  const auto space = *toy_vocab().find_bytes(" ");
  const auto [plus, minus] = pad_contrast_pair(toy_vocab(), ContrastPair::make("Love", "I am a big fan"));
  EXPECT_EQ(plus.size(), minus.size());
  EXPECT_EQ(plus.ids[0], toy_vocab().eot_id());
  EXPECT_EQ(plus.ids.back(), space);
  const auto [a, b] = pad_contrast_pair(toy_vocab(), ContrastPair::make("", "Hate"));
  EXPECT_EQ(a.size(), b.size());
  for (std::size_t i = 1; i < a.size(); ++i) EXPECT_EQ(a.ids[i], space);
}

TEST(Steering, AlignmentShiftsModifiedRange) {
  auto spec = love_hate();
  spec.alignment = 3;
  const auto vec = build_steering_vector(toy_model(), toy_vocab(), spec);
  EXPECT_EQ(vec.modified_range(), (std::pair<std::size_t, std::size_t>{3, 6}));
  EXPECT_EQ(vec.min_sequence_length(), 6u);
  EXPECT_THROW(vec.injection(5), ValidationError);
  const auto inj = vec.injection(6);
  EXPECT_EQ(inj.position, 3u);
  EXPECT_EQ(inj.delta.rows, 3u);
}

TEST(Steering, SpecValidation) {
  const auto& cfg = toy_model().config;
  auto spec = love_hate();
  spec.layer = 4;
  EXPECT_THROW(spec.validate(cfg), ValidationError);
  spec.layer = -1;
  EXPECT_THROW(spec.validate(cfg), ValidationError);
  spec = love_hate();
  spec.alignment = 0;
  EXPECT_THROW(spec.validate(cfg), ValidationError);
  spec = love_hate();
  spec.coefficient = std::nan("");
  EXPECT_THROW(spec.validate(cfg), ValidationError);
  spec = love_hate();
  spec.dim_cutoff = 33;
  EXPECT_THROW(spec.validate(cfg), ValidationError);
  spec.dim_cutoff = 32;
  EXPECT_NO_THROW(spec.validate(cfg));
}

TEST(Steering, DimensionTruncation) {
  const auto vec = build_steering_vector(toy_model(), toy_vocab(), love_hate());
  const auto half = truncate_dimensions(vec, 16);
  for (std::size_t r = 0; r < half.rows(); ++r) {
    for (std::size_t c = 0; c < 32; ++c) EXPECT_EQ(half.delta(r, c), c < 16 ? vec.delta(r, c) : 0.0f);
  }
  EXPECT_EQ(half.dim_cutoff, 16);
  EXPECT_EQ(truncate_dimensions(vec, 32).delta, vec.delta);
  EXPECT_TRUE(truncate_dimensions(vec, 0).is_zero());
  EXPECT_THROW(truncate_dimensions(vec, 33), ValidationError);

  auto spec = love_hate();
  spec.dim_cutoff = 16;
  EXPECT_EQ(build_steering_vector(toy_model(), toy_vocab(), spec).delta, half.delta);
}

TEST(Steering, RandomMatchedVectorKeepsRowNorms) {
  const auto vec = build_steering_vector(toy_model(), toy_vocab(), love_hate());
  const auto rnd = random_matched_vector(vec, 5);
  const auto a = vec.row_norms();
  const auto b = rnd.row_norms();
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(b[0], 0.0);
  for (std::size_t i = 1; i < a.size(); ++i) EXPECT_NEAR(b[i], a[i], 1e-4 * a[i]);
  EXPECT_NE(rnd.delta, vec.delta);
  EXPECT_EQ(random_matched_vector(vec, 5).delta, rnd.delta);
  EXPECT_NE(random_matched_vector(vec, 6).delta, rnd.delta);
}

TEST(Steering, TransplantCapturesAtSourceInjectsAtDestination) {
  const auto pair = ContrastPair::make("Love", "Hate");
  const auto moved = transplant_vector(toy_model(), toy_vocab(), pair, 0, 3, 2.0);
  EXPECT_EQ(moved.layer, 3);
  SteeringSpec src{pair, 0, 2.0, 1, std::nullopt};
  EXPECT_EQ(moved.delta, build_steering_vector(toy_model(), toy_vocab(), src).delta);
  EXPECT_THROW(transplant_vector(toy_model(), toy_vocab(), pair, 0, 9, 2.0), ValidationError);
}

TEST(Steering, NormProfile) {
  const auto pair = ContrastPair::make("Love", "Hate");
  const auto profile = norm_profile(toy_model(), toy_vocab(), "I went up to my friend and said", pair, 4.0);
  ASSERT_EQ(profile.ratios.size(), 4u);
  EXPECT_EQ(profile.positions, 4u);
  for (const auto& layer : profile.ratios) {
    ASSERT_EQ(layer.size(), 4u);
    ASSERT_TRUE(layer[0].has_value());
    EXPECT_EQ(*layer[0], 0.0);
    for (const auto& r : layer) {
      ASSERT_TRUE(r.has_value());
      EXPECT_GE(*r, 0.0);
    }
  }
  // Ratio at the vector's own layer, position 1, computed by hand.
  const auto vec = build_steering_vector(toy_model(), toy_vocab(), love_hate());
  const auto prompt = encode(toy_vocab(), "I went up to my friend and said", true);
  HookSet hooks;
  hooks.capture_layers = {2};
  const auto s = forward(toy_model(), prompt.ids, hooks).captured.front().activations;
  double num = 0.0;
  double den = 0.0;
  for (std::size_t k = 0; k < 32; ++k) {
    num += static_cast<double>(vec.delta(1, k)) * vec.delta(1, k);
    den += static_cast<double>(s(1, k)) * s(1, k);
  }
  EXPECT_NEAR(*profile.ratios[2][1], std::sqrt(num / den), 1e-5);
  EXPECT_THROW(norm_profile(toy_model(), toy_vocab(), "Hi", ContrastPair::make("I am a big fan", "x"), 1.0),
               ValidationError);
}

TEST(Steering, SaveLoadRoundTrip) {
  const auto vec = build_steering_vector(toy_model(), toy_vocab(), love_hate());
  const auto path = std::filesystem::temp_directory_path() / ("actadd_vec_" + std::to_string(::getpid()) + ".aawf");
  save_vector(vec, path, toy_model().hash);
  const auto loaded = load_vector(path);
  EXPECT_EQ(loaded.delta, vec.delta);
  EXPECT_EQ(loaded.layer, vec.layer);
  EXPECT_EQ(loaded.alignment, vec.alignment);
  EXPECT_EQ(loaded.coefficient, vec.coefficient);
  ASSERT_TRUE(loaded.pair.has_value());
  EXPECT_EQ(*loaded.pair, *vec.pair);
  EXPECT_THROW(load_vector(oracle_dir() / "toy_model.aawf"), Error);
  std::filesystem::remove(path);
}

TEST(Steering, SuggestedGridScalesWithDepth) {
  ModelConfig cfg = toy_model().config;
  cfg.n_layers = 48;
  const auto grid = suggested_grid(cfg);
  EXPECT_EQ(grid.layers, (std::vector<int>{6, 8, 10, 12, 14, 16, 18, 20, 22, 24}));
  EXPECT_FALSE(grid.coefficients.empty());
  cfg.n_layers = 12;
  const auto small = suggested_grid(cfg);
  for (int l : small.layers) {
    EXPECT_GE(l, 0);
    EXPECT_LT(l, 12);
  }
}

}  // namespace
}  // namespace actadd
