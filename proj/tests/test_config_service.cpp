#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include "mmr/config.hpp"
#include "mmr/service.hpp"
#include "mmr/tensor_file.hpp"
#include "test_util.hpp"

using namespace mmr;

TEST(Config, DefaultsAreValidForBothProfiles) {
  for (const char* p : {"desk", "full"}) {
    const auto cfg = resolve_run_config({.flags = {{"profile", p}}});
    EXPECT_EQ(cfg.at("profile"), p);
  }
  EXPECT_EQ(resolve_run_config({}).at("train").at("model").at("dim"), 512);
  EXPECT_EQ(resolve_run_config({.flags = {{"profile", "desk"}}}).at("train").at("model").at("dim"), 32);
  EXPECT_EQ(resolve_run_config({.default_profile = "desk"}).at("profile"), "desk");
  EXPECT_THROW(resolve_run_config({.flags = {{"profile", "laptop"}}}), ConfigError);
}

TEST(Config, LaterLayersWin) {
  const auto dir = mmr::testing::temp_dir("config_layers");
  write_file_atomic(dir / "cfg.json", R"({"train": {"epochs": 7, "batch": 4, "model": {"dim": 16}}})");
  ConfigLayers layers;
  layers.file = dir / "cfg.json";
  layers.env = {{"MMR_TRAIN__BATCH", "8"}, {"MMR_TRAIN__MODEL__DIM", "24"}};
  layers.flags = {{"train.model.dim", "40"}};
  const auto cfg = resolve_run_config(layers);
  EXPECT_EQ(cfg["train"]["epochs"], 7);
  EXPECT_EQ(cfg["train"]["batch"], 8);
  EXPECT_EQ(cfg["train"]["model"]["dim"], 40);
  EXPECT_EQ(train_config_of(cfg).model.dim, 40u);
}

TEST(Config, UnknownKeysAndBadValuesAreErrors) {
  EXPECT_THROW(resolve_run_config({.flags = {{"train.epoch", "3"}}}), ConfigError);
  EXPECT_THROW(resolve_run_config({.env = {{"MMR_TRAIN__NOPE", "1"}}}), ConfigError);
  EXPECT_THROW(resolve_run_config({.flags = {{"train.epochs", "many"}}}), ConfigError);
  EXPECT_THROW(resolve_run_config({.flags = {{"train.model.mask_ratio", "1.5"}}}), ConfigError);
  const auto dir = mmr::testing::temp_dir("config_unknown");
  write_file_atomic(dir / "cfg.json", R"({"train": {"bogus": 1}})");
  try {
    resolve_run_config({.file = dir / "cfg.json"});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("bogus"), std::string::npos);
  }
}

TEST(Config, ProtocolSection) {
  const auto cfg = resolve_run_config({.flags = {{"eval.protocol", "small-batches"}, {"eval.batch", "16"}}});
  const auto p = protocol_config_of(cfg);
  EXPECT_EQ(p.protocol, Protocol::SmallBatches);
  EXPECT_EQ(p.batch, 16u);
}

TEST(Base64, RoundTripsArbitraryBytes) {
  Rng rng(4);
  for (std::size_t n = 0; n < 64; ++n) {
    std::string bytes(n, '\0');
    for (auto& ch : bytes) ch = char(rng.index(256));
    ASSERT_EQ(base64_decode(base64_encode(bytes)), bytes) << n;
  }
  EXPECT_EQ(base64_encode("foob"), "Zm9vYg==");
  EXPECT_THROW(base64_decode("abc"), QueryError);
}

namespace {

struct ServiceFixture {
  TrainConfig cfg;
  std::vector<Tensorf> motions;

  ServiceFixture() {
    cfg = TrainConfig::desk();
    cfg.model.dim = 16;
    cfg.model.video_layers = 1;
    cfg.model.text_layers = 1;
    for (std::uint64_t i = 0; i < 3; ++i) motions.push_back(mmr::testing::random_tensor<float>({16, 48}, 10 + i));
  }

  RetrievalService make() const {
    MultiModalModel model(cfg.model);
    auto params = model.init(1);
    std::vector<const Tensorf*> ptrs;
    for (const auto& m : motions) ptrs.push_back(&m);
    const auto enc = encode_sequences(model, params, Modality::Motion, ptrs);
    GalleryIndex idx(cfg.model.dim, cfg.model.aggregation, config_hash(cfg));
    for (std::size_t i = 0; i < enc.size(); ++i) idx.add("m" + std::to_string(i), enc[i]);
    return RetrievalService(std::move(model), std::move(params), config_hash(cfg), std::move(idx));
  }
};

}  // namespace

TEST(Service, HandleMatchesAnswerAndValidates) {
  ServiceFixture fx;
  const auto svc = fx.make();
  const auto text = mmr::testing::random_tensor<float>({5, 32}, 99);
  const auto direct = svc.answer(Modality::Text, text, 2);
  const auto body = nlohmann::json{{"modality", "text"}, {"k", 2}, {"tensor_b64", base64_encode(encode_tensor(text))}};
  EXPECT_EQ(svc.handle(body.dump()), direct);
  const auto j = nlohmann::json::parse(direct);
  EXPECT_EQ(j.at("results").size(), 2u);
  EXPECT_THROW(svc.answer(Modality::Text, text, 5), QueryError);
  EXPECT_THROW(svc.handle(R"({"modality": "text", "k": 0, "tensor_b64": ""})"), QueryError);
  EXPECT_THROW(svc.handle("not json"), QueryError);
  EXPECT_EQ(nlohmann::json::parse(svc.health()).at("size"), 3);
}

TEST(Service, RejectsIndexFromAnotherConfig) {
  ServiceFixture fx;
  MultiModalModel model(fx.cfg.model);
  auto params = model.init(1);
  GalleryIndex idx(fx.cfg.model.dim, fx.cfg.model.aggregation, "other");
  EXPECT_THROW(RetrievalService(std::move(model), std::move(params), config_hash(fx.cfg), std::move(idx)), ConfigError);
}
