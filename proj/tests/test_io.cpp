#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "retnet/checkpoint.hpp"
#include "retnet/config.hpp"

using namespace retnet;

namespace {

std::string temp_path(const std::string& name) { return (std::filesystem::temp_directory_path() / name).string(); }

ModelConfig small() {
  ModelConfig c;
  c.layers = 2;
  c.d_model = 16;
  c.heads = 2;
  return c;
}

template <class T>
bool same_params(const ModelParams<Tensor<T>>& a, const ModelParams<Tensor<T>>& b) {
  std::vector<const Tensor<T>*> xs;
  for_each_param(a, [&](const std::string&, const Tensor<T>& t) { xs.push_back(&t); });
  std::size_t i = 0;
  bool same = true;
  for_each_param(b, [&](const std::string&, const Tensor<T>& t) { same &= i < xs.size() && t == *xs[i++]; });
  return same && i == xs.size();
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  for (Arch arch : {Arch::retnet, Arch::transformer}) {
    auto cfg = small();
    cfg.arch = arch;
    Rng rng(1);
    auto p = init_params<double>(cfg, rng);
    auto opt = AdamState<double>::zeros_like(p);
    opt.step = 7;
    opt.m = map_params<Tensor<double>>(p, [](const std::string&, const Tensor<double>& t) { return scale(t, 0.5); });
    const auto path = temp_path("rt.ckpt");
    save_checkpoint(path, cfg, p, 7, &opt);
    auto back = load_checkpoint<double>(path, cfg);
    EXPECT_TRUE(same_params(p, back.params));
    ASSERT_TRUE(back.optimizer.has_value());
    EXPECT_EQ(back.optimizer->step, 7u);
    EXPECT_TRUE(same_params(opt.m, back.optimizer->m));
    EXPECT_EQ(back.step, 7u);
    EXPECT_EQ(back.config, cfg);
  }
}

TEST(Checkpoint, Fp32RoundTripAndAblationFlags) {
  auto cfg = small();
  cfg.precision = Precision::fp32;
  cfg.flags.no_gate = true;
  cfg.flags.head_dim_override = 4;
  Rng rng(2);
  auto p = init_params<float>(cfg, rng);
  const auto path = temp_path("f32.ckpt");
  save_checkpoint(path, cfg, p);
  auto back = load_checkpoint<float>(path);
  EXPECT_TRUE(same_params(p, back.params));
  EXPECT_FALSE(back.optimizer.has_value());
  EXPECT_EQ(back.config.flags, cfg.flags);
  EXPECT_THROW(load_checkpoint<double>(path), CheckpointError);
}

TEST(Checkpoint, MismatchedConfigRejected) {
  auto cfg = small();
  Rng rng(3);
  auto p = init_params<double>(cfg, rng);
  const auto path = temp_path("mm.ckpt");
  save_checkpoint(path, cfg, p);
  auto other = cfg;
  other.d_model = 32;
  EXPECT_THROW(load_checkpoint<double>(path, other), CheckpointError);
  other = cfg;
  other.flags.no_decay = true;
  EXPECT_THROW(load_checkpoint<double>(path, other), CheckpointError);
  other = cfg;
  other.seed = 99;
  other.paradigm = Paradigm::chunkwise;
  EXPECT_NO_THROW(load_checkpoint<double>(path, other));
}

TEST(Checkpoint, CorruptionDetected) {
  auto cfg = small();
  Rng rng(4);
  auto p = init_params<double>(cfg, rng);
  const auto path = temp_path("bad.ckpt");
  save_checkpoint(path, cfg, p);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(200);
    f.put('\x7f');
  }
  EXPECT_THROW(read_checkpoint(path), CheckpointError);
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f << "not a checkpoint";
  }
  EXPECT_THROW(read_checkpoint(path), CheckpointError);
}

TEST(Checkpoint, HeaderLayout) {
  auto cfg = small();
  Rng rng(5);
  auto p = init_params<double>(cfg, rng);
  const auto path = temp_path("hdr.ckpt");
  save_checkpoint(path, cfg, p);
  std::ifstream in(path, std::ios::binary);
  char magic[8];
  in.read(magic, 8);
  EXPECT_EQ(std::string(magic, 8), "RETNETCK");
  unsigned char v[4];
  in.read(reinterpret_cast<char*>(v), 4);
  EXPECT_EQ(v[0] | v[1] << 8 | v[2] << 16 | v[3] << 24, static_cast<int>(kCheckpointVersion));
}

TEST(Config, DefaultsWhenEmpty) {
  const auto rc = config_from_string("");
  EXPECT_EQ(rc.model, ModelConfig{});
  EXPECT_EQ(rc.train.steps, TrainConfig{}.steps);
  EXPECT_EQ(rc.eval.last_k, 32u);
}

TEST(Config, ParsesEverySection) {
  const auto rc = config_from_string(R"(
[model]
arch = transformer
layers = 3
d_model = 32
heads = 4
precision = fp32
[train]
steps = 50
lr = 2e-3
warmup_steps = 5
[data]
task = corpus
corpus = some/file.txt
[eval]
contexts = 32, 64
split = train
[bench]
lengths = 8,16,32
)");
  EXPECT_EQ(rc.model.arch, Arch::transformer);
  EXPECT_EQ(rc.model.layers, 3u);
  EXPECT_EQ(rc.model.precision, Precision::fp32);
  EXPECT_EQ(rc.train.steps, 50u);
  EXPECT_DOUBLE_EQ(rc.train.lr, 2e-3);
  EXPECT_EQ(rc.data.corpus, "some/file.txt");
  EXPECT_EQ(rc.eval.contexts, (std::vector<std::size_t>{32, 64}));
  EXPECT_EQ(rc.eval.split, "train");
  EXPECT_EQ(rc.bench.lengths, (std::vector<std::size_t>{8, 16, 32}));
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(config_from_string("[model]\nlayer = 2\n"), std::invalid_argument);
  EXPECT_THROW(config_from_string("[modle]\nlayers = 2\n"), std::invalid_argument);
  EXPECT_THROW(config_from_string("[model]\narch = lstm\n"), std::invalid_argument);
  EXPECT_THROW(config_from_string("[model]\nno_gate = maybe\n"), std::invalid_argument);
  EXPECT_THROW(config_from_string("[data]\ntask = corpus\n"), std::invalid_argument);
  EXPECT_THROW(config_from_string("[eval]\nsplit = test\n"), std::invalid_argument);
}
