#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <vector>

#include "fgr/checkpoint.hpp"
#include "fgr/gradcheck.hpp"
#include "fgr/model.hpp"
#include "fgr/rng.hpp"
#include "fgr/tensor.hpp"

using fgr::build_model;
using fgr::ModelConfig;
using fgr::Shape;
using fgr::Tensor;

namespace {

Tensor<float> random_image(const ModelConfig& cfg, int batch, uint64_t seed) {
  fgr::Rng rng(seed);
  Tensor<float> img(Shape{batch, cfg.in_channels, cfg.input_size, cfg.input_size});
  for (auto& v : img.data()) v = static_cast<float>(rng.uniform());
  return img;
}

}  // namespace

TEST(ModelConfig, PresetsValidate) {
  EXPECT_NO_THROW(ModelConfig::paper(3).validate());
  EXPECT_NO_THROW(ModelConfig::desk(2).validate());

  ModelConfig bad = ModelConfig::desk();
  bad.num_classes = 4;
  EXPECT_THROW(bad.validate(), fgr::ConfigError);

  bad = ModelConfig::desk();
  bad.input_size = 100;  // not divisible by 2^stages
  EXPECT_THROW(bad.validate(), fgr::ConfigError);

  bad = ModelConfig::desk();
  bad.block_conv_counts = {2, 2};
  EXPECT_THROW(bad.validate(), fgr::ConfigError);
}

TEST(ModelConfig, StageSpatialSizesFollowHalvingSchedule) {
  const std::vector<int> paper = ModelConfig::paper().stage_spatial_sizes();
  EXPECT_EQ(paper, (std::vector<int>{240, 120, 60, 30, 15}));
  const std::vector<int> desk = ModelConfig::desk().stage_spatial_sizes();
  EXPECT_EQ(desk, (std::vector<int>{32, 16, 8, 4, 2}));
  EXPECT_EQ(ModelConfig::paper().bottleneck_spatial(), 15);
  EXPECT_EQ(ModelConfig::desk().bottleneck_spatial(), 2);
}

TEST(Model, ParameterCountIsPureFunctionOfConfig) {
  const ModelConfig cfg = ModelConfig::desk();
  auto p1 = build_model<float>(cfg, 1);
  auto p7 = build_model<float>(cfg, 7);
  EXPECT_EQ(p1.parameter_count(), p7.parameter_count());
  EXPECT_EQ(p1.parameter_count(), fgr::parameter_count(cfg));
  // paper preset strictly dominates the desk preset in capacity
  EXPECT_GT(fgr::parameter_count(ModelConfig::paper()),
            fgr::parameter_count(ModelConfig::desk()));
}

TEST(Model, BuildIsDeterministicInSeed) {
  const ModelConfig cfg = ModelConfig::desk();
  auto a = build_model<float>(cfg, 42);
  auto b = build_model<float>(cfg, 42);
  auto c = build_model<float>(cfg, 43);
  auto na = a.named_parameters();
  auto nb = b.named_parameters();
  auto nc = c.named_parameters();
  bool any_diff = false;
  for (size_t i = 0; i < na.size(); ++i) {
    EXPECT_EQ(na[i].second.data(), nb[i].second.data()) << na[i].first;
    if (na[i].second.data() != nc[i].second.data()) any_diff = true;
  }
  EXPECT_TRUE(any_diff);
}

TEST(Model, DeskForwardShapes) {
  const ModelConfig cfg = ModelConfig::desk(2);
  auto params = build_model<float>(cfg, 3);
  Tensor<float> img = random_image(cfg, 2, 5);

  auto enc = fgr::encode(params, img);
  EXPECT_EQ(enc.bottleneck.shape(), (Shape{2, 64, 2, 2}));
  ASSERT_EQ(enc.skips.size(), 5u);
  const std::vector<int64_t> skip_side{64, 32, 16, 8, 4};
  const std::vector<int64_t> skip_ch{8, 16, 32, 64, 64};
  for (size_t s = 0; s < enc.skips.size(); ++s) {
    EXPECT_EQ(enc.skips[s].dim(1), skip_ch[s]);
    EXPECT_EQ(enc.skips[s].dim(2), skip_side[s]);
  }

  auto out = fgr::forward_train(params, img);
  EXPECT_EQ(out.reconstruction.shape(), (Shape{2, 3, 64, 64}));
  EXPECT_EQ(out.logits.shape(), (Shape{2, 2}));
  EXPECT_TRUE(out.reconstruction.all_finite());
  for (float v : out.reconstruction.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Model, PaperEncoderReaches15x15x512) {
  const ModelConfig cfg = ModelConfig::paper(3);
  auto params = build_model<float>(cfg, 11);
  Tensor<float> img = random_image(cfg, 1, 13);
  auto enc = fgr::encode(params, img);
  EXPECT_EQ(enc.bottleneck.shape(), (Shape{1, 512, 15, 15}));
  EXPECT_TRUE(enc.bottleneck.all_finite());
  Tensor<float> logits = fgr::classify(params, enc.bottleneck);
  EXPECT_EQ(logits.shape(), (Shape{1, 3}));
}

TEST(Model, ZeroImageGivesZeroBottleneck) {
  const ModelConfig cfg = ModelConfig::desk();
  auto params = build_model<float>(cfg, 9);
  Tensor<float> img(Shape{1, 3, 64, 64}, 0.0f);
  auto enc = fgr::encode(params, img);
  for (float v : enc.bottleneck.data()) EXPECT_EQ(v, 0.0f);  // biases are zero
}

TEST(Model, ClassifierPoolsConstantPlanes) {
  const ModelConfig cfg = ModelConfig::desk();
  auto params = build_model<float>(cfg, 21);
  Tensor<float> bottleneck(Shape{1, 64, 2, 2});
  for (int64_t c = 0; c < 64; ++c)
    for (int64_t i = 0; i < 4; ++i)
      bottleneck.data()[static_cast<size_t>(c * 4 + i)] = 0.5f;
  // classify() starts from the pooled vector; a constant plane pools to the
  // same constant, exercised through a single linear stage by hand
  Tensor<float> pooled = fgr::global_avg_pool(bottleneck);
  for (float v : pooled.data()) EXPECT_FLOAT_EQ(v, 0.5f);
  Tensor<float> logits = fgr::classify(params, bottleneck);
  EXPECT_EQ(logits.shape(), (Shape{1, 2}));
}

TEST(Model, NumClassesControlsLogitWidth) {
  for (int k : {2, 3}) {
    const ModelConfig cfg = ModelConfig::desk(k);
    auto params = build_model<float>(cfg, 2);
    Tensor<float> img = random_image(cfg, 1, 3);
    EXPECT_EQ(fgr::forward_infer(params, img).dim(1), k);
  }
}

TEST(Model, TopologySymmetry) {
  for (const ModelConfig& cfg :
       {ModelConfig::desk(2), [] {
          // a custom width/depth variant keeps the same symmetric topology
          ModelConfig c;
          c.input_size = 48;
          c.block_conv_counts = {1, 1, 2};
          c.block_channels = {4, 8, 8};
          c.bottleneck_channels = 8;
          c.classifier_widths = {16, 8};
          c.num_classes = 3;
          c.preset = "custom";
          return c;
        }()}) {
    auto params = build_model<float>(cfg, 17);
    Tensor<float> img = random_image(cfg, 1, 19);
    auto enc = fgr::encode(params, img);
    Tensor<float> recon = fgr::decode(params, enc.bottleneck, enc.skips);
    EXPECT_EQ(recon.shape(), img.shape());
  }
}

TEST(Model, InferenceMatchesTrainLogitsBitExactly) {
  const ModelConfig cfg = ModelConfig::desk();
  auto params = build_model<float>(cfg, 23);
  Tensor<float> img = random_image(cfg, 2, 29);
  auto train_out = fgr::forward_train(params, img);
  Tensor<float> infer_logits = fgr::forward_infer(params, img);
  EXPECT_EQ(train_out.logits.data(), infer_logits.data());
}

TEST(Model, InferenceIgnoresDecoderParameters) {
  const ModelConfig cfg = ModelConfig::desk();
  auto params = build_model<float>(cfg, 31);
  Tensor<float> img = random_image(cfg, 1, 37);
  const std::vector<float> before = fgr::forward_infer(params, img).data();

  // randomize every decoder tensor; logits must not move at all
  fgr::Rng rng(1234);
  const auto scramble = [&](Tensor<float>& t) {
    for (auto& v : t.data()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  };
  scramble(params.center1.weight);
  scramble(params.center2.weight);
  for (auto& block : params.decoder) {
    scramble(block.first.weight);
    scramble(block.first.bias);
    scramble(block.second.weight);
    scramble(block.second.bias);
  }
  scramble(params.final_proj.weight);
  scramble(params.final_proj.bias);
  EXPECT_EQ(fgr::forward_infer(params, img).data(), before);
}

TEST(Model, InferenceTapeExcludesDecoderOps) {
  const ModelConfig cfg = ModelConfig::desk();
  auto params = build_model<float>(cfg, 41);
  Tensor<float> img = random_image(cfg, 1, 43);

  const size_t encoder_convs = 2 + 2 + 2 + 3 + 3;
  const size_t decoder_convs = 2 + 5 * 2 + 1;  // center + blocks + projection

  fgr::Tape<float> train_tape;
  {
    fgr::TapeScope<float> scope(train_tape);
    fgr::forward_train(params, img);
  }
  EXPECT_EQ(train_tape.count("conv2d"), encoder_convs + decoder_convs);
  EXPECT_EQ(train_tape.count("bilinear_upsample"), 5u);
  EXPECT_EQ(train_tape.count("sigmoid"), 1u);

  fgr::Tape<float> infer_tape;
  {
    fgr::TapeScope<float> scope(infer_tape);
    fgr::forward_infer(params, img);
  }
  EXPECT_EQ(infer_tape.count("conv2d"), encoder_convs);
  EXPECT_EQ(infer_tape.count("bilinear_upsample"), 0u);
  EXPECT_EQ(infer_tape.count("concat_channels"), 0u);
  EXPECT_EQ(infer_tape.count("sigmoid"), 0u);
}

TEST(Model, EncodeRejectsWrongSpatialSize) {
  const ModelConfig cfg = ModelConfig::desk();
  auto params = build_model<float>(cfg, 47);
  Tensor<float> img(Shape{1, 3, 32, 32}, 0.1f);
  try {
    fgr::encode(params, img);
    FAIL() << "expected ShapeError";
  } catch (const fgr::ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("spatial"), std::string::npos);
  }
}

TEST(Model, DecodeRejectsMismatchedSkips) {
  const ModelConfig cfg = ModelConfig::desk();
  auto params = build_model<float>(cfg, 53);
  Tensor<float> img = random_image(cfg, 1, 59);
  auto enc = fgr::encode(params, img);
  auto skips = enc.skips;
  skips.pop_back();
  EXPECT_THROW(fgr::decode(params, enc.bottleneck, skips), fgr::ContractError);
}

TEST(Checkpoint, RoundTripsBitExactly) {
  const std::string path = (std::filesystem::temp_directory_path() /
                            "fgr_test_checkpoint.fgrc").string();
  const ModelConfig cfg = ModelConfig::desk(3);
  auto params = build_model<float>(cfg, 61);
  fgr::save_checkpoint(path, params);
  auto loaded = fgr::load_checkpoint<float>(path);

  EXPECT_EQ(loaded.config.input_size, cfg.input_size);
  EXPECT_EQ(loaded.config.num_classes, cfg.num_classes);
  EXPECT_EQ(loaded.config.block_channels, cfg.block_channels);

  auto a = params.named_parameters();
  auto b = loaded.named_parameters();
  ASSERT_EQ(a.size(), b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    EXPECT_EQ(a[i].second.data(), b[i].second.data()) << a[i].first;
  }

  // saving the loaded model reproduces the file byte for byte
  const std::string path2 = path + ".2";
  fgr::save_checkpoint(path2, loaded);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  const std::string c1((std::istreambuf_iterator<char>(f1)), {});
  const std::string c2((std::istreambuf_iterator<char>(f2)), {});
  EXPECT_EQ(c1, c2);
  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST(Checkpoint, RejectsCorruptedFiles) {
  const std::string path = (std::filesystem::temp_directory_path() /
                            "fgr_test_bad.fgrc").string();
  {
    std::ofstream os(path, std::ios::binary);
    os << "not a checkpoint";
  }
  EXPECT_THROW(fgr::load_checkpoint<float>(path), fgr::IoError);
  EXPECT_THROW(fgr::load_checkpoint<float>("/nonexistent/nowhere.fgrc"),
               fgr::IoError);
  std::remove(path.c_str());
}
