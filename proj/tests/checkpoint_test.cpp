#include "hfim/checkpoint.hpp"

#include <gtest/gtest.h>

#include <unistd.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "hfim/errors.hpp"
#include "hfim/optimizer.hpp"
#include "hfim/params.hpp"
#include "hfim/rng.hpp"

#include <nlohmann/json.hpp>

namespace hfim {
namespace {

namespace fs = std::filesystem;

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("ckpt_test_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

ModelConfig test_config() {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_model = 8;
  cfg.d_ff = 16;
  cfg.vocab_size = 12;
  cfg.max_seq = 16;
  cfg.init_seed = 9;
  cfg.hlp_convention = HlpConvention::IncludeNext;
  return cfg;
}

template <typename S>
void expect_params_identical(const ParamsT<S>& a, const ParamsT<S>& b) {
  EXPECT_EQ(a.has_heads, b.has_heads);
  int matched = 0;
  visit_tensors(a, [&](const std::string& name, const auto& ta) {
    visit_tensors(b, [&](const std::string& nb, const auto& tb) {
      if (name != nb) return;
      ++matched;
      ASSERT_EQ(ta.rows(), tb.rows()) << name;
      ASSERT_EQ(ta.cols(), tb.cols()) << name;
      ASSERT_EQ(std::memcmp(ta.data(), tb.data(),
                            sizeof(S) * static_cast<std::size_t>(ta.size())),
                0)
          << name;
    });
  });
  EXPECT_GT(matched, 0);
}

TEST_F(CheckpointTest, ParamsRoundTripBitwise) {
  const ModelConfig cfg = test_config();
  const Params params = init_params<float>(cfg, true);
  save_checkpoint(path("m.bin"), cfg, params);
  const Checkpoint ck = load_checkpoint(path("m.bin"));
  EXPECT_EQ(ck.config.n_layers, cfg.n_layers);
  EXPECT_EQ(ck.config.n_heads, cfg.n_heads);
  EXPECT_EQ(ck.config.d_model, cfg.d_model);
  EXPECT_EQ(ck.config.d_ff, cfg.d_ff);
  EXPECT_EQ(ck.config.vocab_size, cfg.vocab_size);
  EXPECT_EQ(ck.config.max_seq, cfg.max_seq);
  EXPECT_EQ(ck.config.init_seed, cfg.init_seed);
  EXPECT_EQ(ck.config.hlp_convention, cfg.hlp_convention);
  EXPECT_FALSE(ck.has_opt);
  EXPECT_EQ(ck.tokens_seen, 0);
  expect_params_identical(ck.params, params);
}

TEST_F(CheckpointTest, HeadlessParamsRoundTrip) {
  const ModelConfig cfg = test_config();
  const Params params = strip_heads(init_params<float>(cfg, true));
  save_checkpoint(path("bare.bin"), cfg, params);
  const Checkpoint ck = load_checkpoint(path("bare.bin"));
  EXPECT_FALSE(ck.params.has_heads);
  expect_params_identical(ck.params, params);
}

TEST_F(CheckpointTest, OptimizerStateRoundTripsLosslessly) {
  const ModelConfig cfg = test_config();
  Params params = init_params<float>(cfg, true);
  AdamState state = make_adam_state<float>(cfg, true);
  // drive a few noisy steps so the moments carry real values
  Rng rng(33);
  for (int step = 0; step < 3; ++step) {
    Params grads = zero_params<float>(cfg, true);
    visit_tensors(grads, [&rng](const std::string&, auto& t) {
      for (Eigen::Index k = 0; k < t.size(); ++k) {
        t.data()[k] = static_cast<float>(rng.normal(0.0, 0.1));
      }
    });
    adamw_step(params, grads, state, 1e-3, AdamConfig{});
  }
  ASSERT_EQ(state.t, 3);

  save_checkpoint(path("opt.bin"), cfg, params, &state, 12345);
  const Checkpoint ck = load_checkpoint(path("opt.bin"));
  ASSERT_TRUE(ck.has_opt);
  EXPECT_EQ(ck.opt_state.t, 3);
  EXPECT_EQ(ck.tokens_seen, 12345);
  expect_params_identical(ck.params, params);
  expect_params_identical(ck.opt_state.m, state.m);
  expect_params_identical(ck.opt_state.v, state.v);
}

TEST_F(CheckpointTest, MissingFileIsAnIoError) {
  EXPECT_THROW(load_checkpoint(path("nope.bin")), IoError);
}

TEST_F(CheckpointTest, TruncatedFileIsAnIoError) {
  const ModelConfig cfg = test_config();
  save_checkpoint(path("full.bin"), cfg, init_params<float>(cfg, true));
  std::ifstream in(path("full.bin"), std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  in.close();
  ASSERT_GT(bytes.size(), 64u);
  std::ofstream out(path("cut.bin"), std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 40));
  out.close();
  EXPECT_THROW(load_checkpoint(path("cut.bin")), IoError);

  std::ofstream tiny(path("tiny.bin"), std::ios::binary);
  tiny.write("abc", 3);
  tiny.close();
  EXPECT_THROW(load_checkpoint(path("tiny.bin")), IoError);
}

TEST_F(CheckpointTest, WrongVersionIsAnIoError) {
  // hand-build a file with a valid length-prefixed header but a bad version
  const std::string header = R"({"version":"other-format-9","tensors":[]})";
  std::ofstream out(path("ver.bin"), std::ios::binary);
  const std::uint64_t len = header.size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.close();
  EXPECT_THROW(load_checkpoint(path("ver.bin")), IoError);
}

TEST_F(CheckpointTest, GarbageHeaderIsAnIoError) {
  std::ofstream out(path("garbage.bin"), std::ios::binary);
  const std::uint64_t len = 10;
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write("not json!!", 10);
  out.close();
  EXPECT_THROW(load_checkpoint(path("garbage.bin")), IoError);
}

TEST_F(CheckpointTest, FileLayoutIsLittleEndianFloatAfterJsonHeader) {
  const ModelConfig cfg = test_config();
  const Params params = init_params<float>(cfg, true);
  save_checkpoint(path("layout.bin"), cfg, params);

  std::ifstream in(path("layout.bin"), std::ios::binary);
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), 8);
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));
  const nlohmann::json header = nlohmann::json::parse(header_text);

  EXPECT_EQ(header.at("version").get<std::string>(), kCheckpointVersion);
  EXPECT_TRUE(header.at("has_heads").get<bool>());
  const auto& tensors = header.at("tensors");
  ASSERT_TRUE(tensors.is_array());
  ASSERT_FALSE(tensors.empty());

  // manifest order starts with the token embedding at offset 0
  EXPECT_EQ(tensors[0].at("name").get<std::string>(), "tok_embed");
  EXPECT_EQ(tensors[0].at("offset").get<std::int64_t>(), 0);
  const auto shape = tensors[0].at("shape").get<std::vector<std::int64_t>>();
  EXPECT_EQ(shape, (std::vector<std::int64_t>{cfg.vocab_size, cfg.d_model}));

  // offsets are cumulative and dense
  std::int64_t expected_offset = 0;
  std::vector<std::string> names;
  for (const auto& t : tensors) {
    EXPECT_EQ(t.at("offset").get<std::int64_t>(), expected_offset);
    std::int64_t n = 1;
    for (const auto s : t.at("shape").get<std::vector<std::int64_t>>()) n *= s;
    expected_offset += n * static_cast<std::int64_t>(sizeof(float));
    names.push_back(t.at("name").get<std::string>());
  }
  EXPECT_EQ(expected_offset,
            static_cast<std::int64_t>(sizeof(float)) * param_count(cfg, true));
  EXPECT_EQ(names.back(), "w_hlp_l2r");

  // raw little-endian f32 payload: the first value is tok_embed(0,0)
  float first = 0.0f;
  in.read(reinterpret_cast<char*>(&first), 4);
  EXPECT_EQ(first, params.tok_embed(0, 0));
}

TEST_F(CheckpointTest, SaveRefusesUnwritablePath) {
  const ModelConfig cfg = test_config();
  EXPECT_THROW(
      save_checkpoint((dir_ / "no_such_dir" / "x.bin").string(), cfg,
                      init_params<float>(cfg, true)),
      IoError);
}

TEST_F(CheckpointTest, RewriteIsAtomicReplacement) {
  const ModelConfig cfg = test_config();
  const Params a = init_params<float>(cfg, true);
  save_checkpoint(path("swap.bin"), cfg, a);
  ModelConfig cfg2 = cfg;
  cfg2.init_seed = 10;
  const Params b = init_params<float>(cfg2, true);
  save_checkpoint(path("swap.bin"), cfg2, b);
  const Checkpoint ck = load_checkpoint(path("swap.bin"));
  EXPECT_EQ(ck.config.init_seed, 10u);
  expect_params_identical(ck.params, b);
  EXPECT_FALSE(fs::exists(path("swap.bin.tmp")));
}

}  // namespace
}  // namespace hfim
