#include <gtest/gtest.h>
#include <unistd.h>

#include <cmath>
#include <filesystem>

#include "segnet/config.hpp"
#include "segnet/io.hpp"
#include "segnet/pipeline.hpp"

namespace segnet::pipeline {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("segnet_pl_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RegionMaskSet masks_2x2(std::vector<std::uint8_t> wt, std::vector<std::uint8_t> tc, std::vector<std::uint8_t> et) {
  return {BinaryMask(2, 2, std::move(wt)), BinaryMask(2, 2, std::move(tc)), BinaryMask(2, 2, std::move(et))};
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.model = model::ModelConfig::miniature(model::Variant::Enhanced);
  c.epochs = 2;
  c.batch_size = 2;
  c.seed = 3;
  c.aug.seed = 4;
  c.data.split_seed = 5;
  c.data.ratios = {0.5, 0.5, 0.0};
  return c;
}

// --- losses -------------------------------------------------------------------

TEST(Loss, BceAtHalfIsLn2) {
  ad::Graph<double> g;
  const auto truth = masks_2x2({1, 1, 0, 0}, {1, 0, 0, 0}, {0, 0, 0, 0});
  const auto pred = g.constant(Tensor64({2, 2, 3}, 0.5));
  EXPECT_NEAR(g.value(bce_loss(g, pred, truth))[0], std::log(2.0), 1e-12);
}

TEST(Loss, BceHandComputed) {
  // One channel's worth repeated: p = (0.9, 0.2, 0.6, 0.1), targets per channel below.
  ad::Graph<double> g;
  const auto truth = masks_2x2({1, 0, 1, 0}, {1, 0, 0, 0}, {0, 0, 0, 0});
  Tensor64 p({2, 2, 3});
  const double vals[4] = {0.9, 0.2, 0.6, 0.1};
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 3; ++c) p[i * 3 + c] = vals[i];
  const auto loss = g.value(bce_loss(g, g.constant(p), truth))[0];
  double want = 0.0;
  const int t[3][4] = {{1, 0, 1, 0}, {1, 0, 0, 0}, {0, 0, 0, 0}};
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 4; ++i) want -= t[c][i] ? std::log(vals[i]) : std::log(1 - vals[i]);
  EXPECT_NEAR(loss, want / 12.0, 1e-12);
}

TEST(Loss, BceSaturatedIsFinite) {
  ad::Graph<double> g;
  const auto truth = masks_2x2({1, 1, 1, 1}, {1, 1, 1, 1}, {1, 1, 1, 1});
  const auto loss = g.value(bce_loss(g, g.constant(Tensor64({2, 2, 3}, 0.0)), truth))[0];
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_NEAR(loss, -std::log(1e-7), 1e-6);
}

TEST(Loss, SoftDiceZeroPrediction) {
  ad::Graph<double> g;
  const auto truth = masks_2x2({1, 1, 1, 0}, {1, 1, 0, 0}, {1, 0, 0, 0});
  const auto v = g.value(soft_dice_loss(g, g.constant(Tensor64({2, 2, 3}, 0.0)), truth))[0];
  // Per channel 1 - 1/(|G| + 1), averaged over channels with |G| = 3, 2, 1.
  EXPECT_NEAR(v, ((1 - 1.0 / 4) + (1 - 1.0 / 3) + (1 - 1.0 / 2)) / 3.0, 1e-12);
}

TEST(Loss, SoftDicePerfectPrediction) {
  ad::Graph<double> g;
  const auto truth = masks_2x2({1, 1, 1, 0}, {1, 1, 0, 0}, {1, 0, 0, 0});
  const auto v = g.value(soft_dice_loss(g, g.constant(truth.to_tensor<double>()), truth))[0];
  EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(Loss, ParseNames) {
  EXPECT_EQ(parse_loss("bce"), LossKind::Bce);
  EXPECT_EQ(parse_loss(to_string(LossKind::BcePlusDice)), LossKind::BcePlusDice);
  EXPECT_THROW(parse_loss("focal"), ShapeError);
}

// --- optimisation -------------------------------------------------------------

TEST(Training, OneAdamStepLowersLoss) {
  const auto cfg = model::ModelConfig::miniature(model::Variant::Enhanced);
  auto params = model::cast_params<double>(model::init_params(cfg, 1));
  const auto sample = data::generate_sample(0, 32, 2);
  const auto image = sample.image.cast<double>();
  auto loss_of = [&](ad::GradientMap<double>* grads) {
    ad::Graph<double> g;
    const auto pred = model::model_forward(g, g.constant(image), params, cfg);
    const auto loss = bce_loss(g, pred, sample.masks);
    if (grads) *grads = g.backward(loss);
    return g.value(loss)[0];
  };
  ad::GradientMap<double> grads;
  const double before = loss_of(&grads);
  AdamState<double> state;
  state.hyper.lr = 1e-4;
  adam_step(params, grads, state);
  EXPECT_LT(loss_of(nullptr), before);
}

TEST(Training, DeterministicHistoryAndCheckpoint) {
  const auto ds = data::generate_synthetic_dataset(4, 32, 8);
  const auto a = train(tiny_config(), ds), b = train(tiny_config(), ds);
  EXPECT_EQ(a.history.to_json().dump(), b.history.to_json().dump());
  EXPECT_EQ(encode_checkpoint(a.checkpoint), encode_checkpoint(b.checkpoint));
  ASSERT_EQ(a.history.epochs.size(), 2u);
  EXPECT_EQ(a.steps, 2u);  // 2 train samples, batch 2, 2 epochs
  EXPECT_TRUE(a.history.epochs.back().val_dsc.has_value());
  for (const auto& e : a.history.epochs) EXPECT_TRUE(std::isfinite(e.train_loss));
}

TEST(Training, SeedChangesResult) {
  const auto ds = data::generate_synthetic_dataset(4, 32, 8);
  auto c = tiny_config();
  c.epochs = 1;
  const auto a = train(c, ds);
  c.seed = 99;
  EXPECT_NE(encode_checkpoint(a.checkpoint), encode_checkpoint(train(c, ds).checkpoint));
}

TEST(Training, WritesCheckpointAndRecordsSplit) {
  const auto dir = scratch("ckpt");
  const auto ds = data::generate_synthetic_dataset(4, 32, 8);
  auto c = tiny_config();
  c.epochs = 1;
  c.checkpoint = (dir / "m.sgc").string();
  std::vector<std::size_t> seen;
  const auto r = train(c, ds, [&](const EpochRecord& e) { seen.push_back(e.epoch); });
  EXPECT_EQ(seen, std::vector<std::size_t>{1});
  const auto loaded = load_checkpoint(c.checkpoint);
  EXPECT_EQ(encode_checkpoint(loaded), encode_checkpoint(r.checkpoint));
  EXPECT_EQ(loaded.config, c.model);
  EXPECT_EQ(checkpoint_split(loaded, ds.ids()), data::split_dataset(ds.ids(), c.data.ratios, c.data.split_seed));
  fs::remove_all(dir);
}

TEST(Training, DivergenceKeepsInitialCheckpoint) {
  // A huge step sends the parameters to ~1e30 after the first update, so the
  // second forward pass overflows before epoch 1 can finish. The checkpoint
  // written before training started must still be on disk, unchanged.
  const auto dir = scratch("diverge");
  const auto ds = data::generate_synthetic_dataset(2, 32, 8);
  auto c = tiny_config();
  c.batch_size = 1;
  c.data.ratios = {1.0, 0.0, 0.0};
  c.adam.lr = 1e30;
  c.checkpoint = (dir / "m.sgc").string();
  try {
    train(c, ds);
    FAIL() << "expected divergence";
  } catch (const RuntimeFailure& e) {
    EXPECT_NE(std::string(e.what()).find("m.sgc"), std::string::npos) << e.what();
  }
  const auto kept = load_checkpoint(c.checkpoint);
  const auto init = model::init_params(c.model, c.seed);
  ASSERT_EQ(kept.params.size(), init.size());
  for (const auto& [name, t] : init) EXPECT_TRUE(bitwise_equal(kept.params.at(name), t)) << name;
  fs::remove_all(dir);
}

TEST(Training, RejectsBadConfig) {
  const auto ds = data::generate_synthetic_dataset(2, 32, 8);
  auto c = tiny_config();
  c.epochs = 0;
  EXPECT_THROW(train(c, ds), ShapeError);
  c = tiny_config();
  c.batch_size = 0;
  EXPECT_THROW(train(c, ds), ShapeError);
  c = tiny_config();
  c.model.input_size = 64;  // data is 32x32
  EXPECT_THROW(train(c, ds), ShapeError);
}

// --- evaluation and prediction ------------------------------------------------

TEST(Evaluate, IdenticalSamplesScoreIdentically) {
  const auto cfg = model::ModelConfig::miniature(model::Variant::Baseline);
  Checkpoint cp{cfg, model::init_params(cfg, 2), {}};
  data::Dataset ds;
  auto s = data::generate_sample(0, 32, 6);
  ds.samples = {s, s};
  ds.samples[1].id = "copy";
  const auto report = evaluate(cp, ds, {s.id, "copy"});
  ASSERT_EQ(report.sample_count(), 2u);
  const auto& rec = report.records();
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_EQ(rec[r].dsc, rec[3 + r].dsc);
    EXPECT_EQ(rec[r].hd95, rec[3 + r].hd95);
  }
}

TEST(Evaluate, ArchitectureMismatch) {
  const auto base = model::ModelConfig::miniature(model::Variant::Baseline);
  auto enh = base;
  enh.variant = model::Variant::Enhanced;
  Checkpoint cp{enh, model::init_params(base, 1), {}};
  const auto ds = data::generate_synthetic_dataset(1, 32, 1);
  EXPECT_THROW(evaluate(cp, ds, ds.ids()), ShapeError);
  EXPECT_THROW(predict(cp, ds.samples[0].image), ShapeError);
}

TEST(Predict, ShapesAndNesting) {
  const auto cfg = model::ModelConfig::miniature(model::Variant::Enhanced);
  const Checkpoint cp{cfg, model::init_params(cfg, 1), {}};
  const auto img = data::generate_sample(0, 32, 1).image;
  const auto p = predict(cp, img, 0.5, true);
  EXPECT_EQ(p.probabilities.shape(), (Shape{32, 32, 3}));
  EXPECT_TRUE(p.masks.nested());
  for (float v : p.probabilities.data()) {
    ASSERT_GT(v, 0.0f);
    ASSERT_LT(v, 1.0f);
  }
  EXPECT_THROW(predict(cp, Tensor({32, 32, 3})), ShapeError);
}

TEST(Predict, EnforceNesting) {
  auto m = masks_2x2({1, 0, 0, 0}, {1, 1, 0, 0}, {0, 1, 1, 0});
  const auto n = enforce_nesting(m);
  EXPECT_EQ(n.wt, m.wt);
  EXPECT_EQ(n.tc, BinaryMask(2, 2, {1, 0, 0, 0}));
  EXPECT_EQ(n.et, BinaryMask(2, 2, {0, 0, 0, 0}));
  EXPECT_TRUE(n.nested());
}

// --- checkpoints --------------------------------------------------------------

TEST(Checkpoint, RoundTrip) {
  const auto cfg = model::ModelConfig::miniature(model::Variant::Baseline);
  Checkpoint cp{cfg, model::init_params(cfg, 1), {}};
  cp.meta["seed"] = 4;
  const auto bytes = encode_checkpoint(cp);
  const auto back = decode_checkpoint(bytes);
  EXPECT_EQ(back.config, cfg);
  EXPECT_EQ(back.meta["seed"], 4);
  ASSERT_EQ(back.params.size(), cp.params.size());
  for (const auto& [name, t] : cp.params) EXPECT_TRUE(bitwise_equal(back.params.at(name), t)) << name;
  EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(Checkpoint, CorruptionIsDetected) {
  const auto cfg = model::ModelConfig::miniature(model::Variant::Baseline);
  auto bytes = encode_checkpoint({cfg, model::init_params(cfg, 1), {}});
  bytes[bytes.size() / 2] ^= 0x10;
  EXPECT_THROW(decode_checkpoint(bytes), io::FormatError);
}

// --- gradient checking --------------------------------------------------------

TEST(Gradcheck, DetectsBrokenBackwardRule) {
  const auto cfg = model::ModelConfig::miniature(model::Variant::Enhanced);
  const auto sample = data::generate_sample(0, 32, 1);
  GradcheckOptions opts;
  opts.coords_per_tensor = 2;
  {
    ad::BackwardFaultGuard fault("conv2d_transpose", 1.5);
    const auto bad = gradcheck(cfg, sample, opts);
    EXPECT_GT(bad.max_rel_error, 1e-3);
    EXPECT_FALSE(bad.passed());
  }
  {
    ad::BackwardFaultGuard fault("scale_channels", 0.5);
    EXPECT_GT(gradcheck(cfg, sample, opts).max_rel_error, 1e-3);
  }
}

TEST(Gradcheck, ExhaustiveForSmallTensors) {
  NamedTensors<double> params;
  params.emplace("w", Tensor64({3}, std::vector<double>{0.5, -1.0, 2.0}));
  const auto r = check_gradients(
      [](ad::Graph<double>& g, const NamedTensors<double>& p) {
        const auto w = g.parameter("w", p.at("w"));
        return ad::sum(g, ad::sigmoid(g, ad::mul(g, w, w)));
      },
      params);
  EXPECT_EQ(r.checked, 3u);
  EXPECT_TRUE(r.passed());
}

// --- config -------------------------------------------------------------------

TEST(Config, RoundTripAndStrictness) {
  TrainConfig c = tiny_config();
  c.loss = LossKind::BcePlusDice;
  c.hd95_mode = metrics::Hd95Mode::UnionPercentile;
  EXPECT_EQ(config::train_config_from_json(nlohmann::json::parse(config::to_json(c).dump())), c);
  EXPECT_THROW(config::train_config_from_json(nlohmann::json::parse(R"({"train": {"epochz": 3}})")),
               config::ConfigError);
  EXPECT_THROW(config::train_config_from_json(nlohmann::json::parse(R"({"train": {"epochs": "3"}})")),
               config::ConfigError);
  EXPECT_THROW(config::train_config_from_json(nlohmann::json::parse(R"({"model": {"input_size": 48}})")),
               config::ConfigError);
  EXPECT_THROW(config::train_config_from_json(nlohmann::json::parse(R"({"extra": {}})")), config::ConfigError);
  const auto d = config::train_config_from_json(nlohmann::json::parse(config::default_config_text()));
  EXPECT_EQ(d, TrainConfig{});
}

TEST(Config, LoadMissingFile) {
  EXPECT_THROW(config::load_train_config("/nonexistent/cfg.json"), config::ConfigError);
}

}  // namespace
}  // namespace segnet::pipeline
