#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "retnet/train.hpp"
#include "test_util.hpp"

using namespace retnet;

namespace {

ModelConfig tiny(Arch arch = Arch::retnet, std::size_t d = 16) {
  ModelConfig c;
  c.arch = arch;
  c.layers = 1;
  c.d_model = d;
  c.heads = 2;
  c.vocab_size = kByteVocab;
  return c;
}

Batch random_batch(Rng& rng, std::size_t n, std::size_t len, std::size_t vocab) {
  Batch b;
  for (std::size_t i = 0; i < n; ++i) {
    Example ex;
    for (std::size_t j = 0; j < len; ++j) {
      ex.input.push_back(static_cast<int>(rng.below(vocab)));
      ex.target.push_back(static_cast<int>(rng.below(vocab)));
    }
    b.push_back(ex);
  }
  return b;
}

}  // namespace

TEST(CrossEntropy, UniformLogits) {
  Tensor<double> logits({3, 256});
  std::vector<int> t{0, 17, 255};
  EXPECT_NEAR(cross_entropy(logits, std::span<const int>(t)).item(), std::log(256.0), 1e-12);
}

TEST(CrossEntropy, ConfidentCorrect) {
  Tensor<double> logits({2, 5});
  logits(0, 3) = 60;
  logits(1, 1) = 60;
  std::vector<int> t{3, 1};
  EXPECT_LT(cross_entropy(logits, std::span<const int>(t)).item(), 1e-20);
}

TEST(CrossEntropy, MatchesDirectSum) {
  Rng rng(1);
  auto logits = random_normal<double>(rng, 7, 11, 3.0);
  std::vector<int> t{1, 0, kIgnoreTarget, 10, 5, 5, 2};
  double s = 0;
  int n = 0;
  for (std::size_t i = 0; i < 7; ++i) {
    if (t[i] < 0) continue;
    double z = 0;
    for (std::size_t j = 0; j < 11; ++j) z += std::exp(logits(i, j));
    s += std::log(z) - logits(i, t[i]);
    ++n;
  }
  EXPECT_NEAR(cross_entropy(logits, std::span<const int>(t)).item(), s / n, 1e-12);
  std::vector<int> short_t{1, 2};
  EXPECT_THROW(cross_entropy(logits, std::span<const int>(short_t)), ShapeError);
}

TEST(Schedule, WarmupAndDecayEndpoints) {
  TrainConfig tc;
  tc.steps = 100;
  tc.warmup_steps = 10;
  tc.lr = 3e-3;
  EXPECT_EQ(lr_at(0, tc), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(10, tc), 3e-3);
  EXPECT_DOUBLE_EQ(lr_at(5, tc), 1.5e-3);
  EXPECT_DOUBLE_EQ(lr_at(55, tc), 1.5e-3);
  EXPECT_EQ(lr_at(100, tc), 0.0);
}

TEST(Adamw, ZeroGradientOnlyDecays) {
  auto cfg = tiny();
  Rng rng(2);
  auto p = init_params<double>(cfg, rng);
  auto before = p;
  auto opt = AdamState<double>::zeros_like(p);
  auto g = map_params<Tensor<double>>(p, [](const std::string&, const Tensor<double>& t) { return Tensor<double>(t.shape()); });
  TrainConfig tc;
  adamw_update(p, g, opt, 0.01, tc);
  std::vector<const Tensor<double>*> b;
  for_each_param(before, [&](const std::string&, const Tensor<double>& t) { b.push_back(&t); });
  std::size_t k = 0;
  for_each_param(p, [&](const std::string& name, const Tensor<double>& t) {
    const auto& o = *b[k++];
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double want = decays(o) ? o[i] - 0.01 * 0.05 * o[i] : o[i];
      EXPECT_NEAR(t[i], want, 1e-17) << name;
    }
  });
}

TEST(Adamw, OneStepMatchesReference) {
  auto cfg = tiny();
  Rng rng(3);
  auto p = init_params<double>(cfg, rng);
  auto batch = random_batch(rng, 2, 9, cfg.vocab_size);
  TrainConfig tc;
  tc.steps = 10;
  tc.warmup_steps = 2;
  tc.lr = 0.01;
  tc.grad_clip = 0.05;

  auto lg = loss_and_grad<double>(batch, cfg, p, Paradigm::parallel, 8);
  double norm = 0;
  for_each_param(lg.grad, [&](const std::string&, const Tensor<double>& t) {
    for (double v : t.data()) norm += v * v;
  });
  norm = std::sqrt(norm);
  const double clip = norm > tc.grad_clip ? tc.grad_clip / norm : 1.0;
  const double lr = 0.01 * 1.0 / 2.0;

  // Reference: first AdamW step from zero moments, written out directly.
  std::vector<Tensor<double>> want;
  std::vector<const Tensor<double>*> gs;
  for_each_param(lg.grad, [&](const std::string&, const Tensor<double>& t) { gs.push_back(&t); });
  std::size_t k = 0;
  for_each_param(p, [&](const std::string&, const Tensor<double>& w) {
    Tensor<double> out = w;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = (*gs[k])[i] * clip;
      const double m = 0.1 * g / (1 - 0.9), v = 0.02 * g * g / (1 - 0.98);
      double upd = m / (std::sqrt(v) + 1e-8);
      if (w.rows() > 1 && w.cols() > 1) upd += 0.05 * w[i];
      out[i] = w[i] - lr * upd;
    }
    want.push_back(out);
    ++k;
  });

  auto opt = AdamState<double>::zeros_like(p);
  auto s = train_step(p, opt, batch, cfg, tc);
  EXPECT_NEAR(s.grad_norm, norm, 1e-12);
  EXPECT_EQ(s.lr, lr);
  k = 0;
  for_each_param(p, [&](const std::string& name, const Tensor<double>& w) { EXPECT_LE(max_abs_diff(w, want[k++]), 1e-12) << name; });
}

TEST(Training, ChunkwiseGradientsEqualParallel) {
  auto cfg = tiny(Arch::retnet, 32);
  cfg.layers = 2;
  cfg.init_std = 0.2;
  Rng rng(4);
  auto p = init_params<double>(cfg, rng);
  auto batch = random_batch(rng, 3, 29, cfg.vocab_size);
  auto a = loss_and_grad<double>(batch, cfg, p, Paradigm::parallel, 8);
  auto b = loss_and_grad<double>(batch, cfg, p, Paradigm::chunkwise, 8);
  EXPECT_NEAR(a.loss, b.loss, 1e-12);
  std::vector<const Tensor<double>*> ga;
  for_each_param(a.grad, [&](const std::string&, const Tensor<double>& t) { ga.push_back(&t); });
  std::size_t k = 0;
  for_each_param(b.grad, [&](const std::string& name, const Tensor<double>& t) { EXPECT_LE(max_abs_diff(t, *ga[k++]), 1e-8) << name; });
}

TEST(Training, LossTrajectoryIsBitReproducible) {
  auto cfg = tiny();
  TrainConfig tc;
  tc.steps = 6;
  tc.warmup_steps = 2;
  tc.batch_size = 2;
  tc.seq_len = 16;
  tc.seed = 5;
  auto corpus = Corpus::from_string(std::string(2000, 'x') + "the quick brown fox jumps over the lazy dog");
  BatchSource src = [&](Rng& r) { return corpus.sample(r, tc.batch_size, tc.seq_len); };
  auto run = [&] {
    Rng rng(6);
    auto p = init_params<double>(cfg, rng);
    auto opt = AdamState<double>::zeros_like(p);
    std::vector<double> losses;
    for (const auto& s : train(p, opt, cfg, tc, src)) losses.push_back(s.loss);
    return losses;
  };
  auto a = run(), b = run();
  ASSERT_EQ(a.size(), 6u);
  EXPECT_EQ(a, b);
}

TEST(Training, NonFiniteLossAborts) {
  auto cfg = tiny();
  Rng rng(7);
  auto p = init_params<double>(cfg, rng);
  p.final_gain[0] = std::numeric_limits<double>::quiet_NaN();
  auto opt = AdamState<double>::zeros_like(p);
  auto batch = random_batch(rng, 1, 4, cfg.vocab_size);
  EXPECT_THROW(train_step(p, opt, batch, cfg, TrainConfig{}), std::runtime_error);
}

TEST(Gradcheck, TinyModelsPass) {
  Rng rng(8);
  auto batch = random_batch(rng, 2, 10, kByteVocab);
  for (auto [arch, paradigm] : {std::pair{Arch::retnet, Paradigm::parallel}, std::pair{Arch::retnet, Paradigm::chunkwise},
                                std::pair{Arch::transformer, Paradigm::parallel}}) {
    auto cfg = tiny(arch);
    cfg.init_std = 0.1;
    Rng prng(9);
    auto p = init_params<double>(cfg, prng);
    auto r = gradcheck(cfg, p, batch, paradigm, 4, 1e-5, 1e-5, 24, 10);
    EXPECT_TRUE(r.pass()) << r.arch << "/" << r.paradigm << " " << r.max_rel_error << " at " << r.worst;
    EXPECT_GT(r.checked, 100u);
  }
}

TEST(Corpus, WindowsStartWithBosAndDoNotOverlap) {
  std::string text;
  for (int i = 0; i < 100; ++i) text += static_cast<char>('A' + i % 26);
  auto c = Corpus::from_string(text, 0.2);
  EXPECT_EQ(c.split(), 80u);
  EXPECT_EQ(c.windows(16), 5u);
  auto w0 = c.window(0, 16), w1 = c.window(1, 16);
  EXPECT_EQ(w0.input[0], kBos);
  EXPECT_EQ(w1.input[0], kBos);
  EXPECT_EQ(w0.target[15], 'A' + 15);
  EXPECT_EQ(w1.target[0], 'A' + 16);
  for (std::size_t i = 1; i < 16; ++i) EXPECT_EQ(w0.input[i], w0.target[i - 1]);
  EXPECT_THROW(c.window(5, 16), std::out_of_range);
}

TEST(SyntheticTask, CopyLayout) {
  SyntheticTask t;
  Rng rng(11);
  auto ex = t.sample(rng);
  ASSERT_EQ(ex.input.size(), 33u);
  EXPECT_EQ(ex.input[0], kBos);
  EXPECT_EQ(ex.input[17], kPad);
  std::size_t scored = 0;
  for (std::size_t i = 0; i < ex.target.size(); ++i) {
    if (ex.target[i] == kIgnoreTarget) continue;
    ++scored;
    EXPECT_EQ(ex.target[i], ex.input[i - 16]);
  }
  EXPECT_EQ(scored, 16u);
}

TEST(SyntheticTask, InductionAnswerIsDetermined) {
  SyntheticTask t{TaskKind::induction, 20, 8};
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    auto ex = t.sample(rng);
    const int key = ex.input.back();
    std::size_t seen = 0, at = 0;
    for (std::size_t i = 1; i + 1 < ex.input.size(); ++i)
      if (ex.input[i] == key) ++seen, at = i;
    ASSERT_EQ(seen, 1u);
    EXPECT_EQ(ex.target.back(), at + 1 < ex.input.size() - 1 ? ex.input[at + 1] : -2);
  }
}

TEST(Eval, UntrainedIsNearUniform) {
  auto cfg = tiny();
  Rng rng(13);
  auto p = init_params<double>(cfg, rng);
  std::vector<int> toks(600);
  for (auto& t : toks) t = static_cast<int>(rng.below(256));
  std::vector<std::size_t> ctx{32, 64, 128};
  auto rows = eval_perplexity(cfg, p, toks, ctx, EvalProtocol{32, 8});
  ASSERT_EQ(rows.size(), 3u);
  for (const auto& r : rows) {
    EXPECT_NEAR(r.perplexity / 256.0, 1.0, 0.1);
    EXPECT_EQ(r.scored, 8u * 32u);
    EXPECT_EQ(r.windows, 8u);
  }
  std::vector<std::size_t> too_long{1000};
  EXPECT_THROW(eval_perplexity(cfg, p, toks, too_long), std::invalid_argument);
}

TEST(Eval, ScoredTokensAreSharedAcrossContexts) {
  // Changing a byte outside every window's last-K region but inside the
  // longest context must move only the longest context's score.
  auto cfg = tiny();
  cfg.init_std = 0.5;
  Rng rng(14);
  auto p = init_params<double>(cfg, rng);
  std::vector<int> toks(128);
  for (auto& t : toks) t = static_cast<int>(rng.below(256));
  std::vector<std::size_t> ctx{32, 64, 128};
  auto a = eval_perplexity(cfg, p, toks, ctx, EvalProtocol{32, 1});
  toks[10] ^= 1;
  auto b = eval_perplexity(cfg, p, toks, ctx, EvalProtocol{32, 1});
  EXPECT_EQ(a[0].nll, b[0].nll);
  EXPECT_EQ(a[1].nll, b[1].nll);
  EXPECT_NE(a[2].nll, b[2].nll);
}
