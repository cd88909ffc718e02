// Acceptance checks. Prints one "criterion N: PASS|FAIL ..." line per
// criterion and exits nonzero if any fails. Optional arguments select a
// subset of criteria, e.g. `acceptance 1 6 7`.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "retnet/retnet.hpp"

using namespace retnet;

namespace {

using clock_type = std::chrono::steady_clock;

double since(clock_type::time_point t0) { return std::chrono::duration<double>(clock_type::now() - t0).count(); }

std::string fmt(const char* f, auto... xs) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, xs...);
  return buf;
}

struct Verdict {
  bool pass = true;
  std::string detail;
  void need(bool ok, const std::string& what) {
    pass &= ok;
    if (!detail.empty()) detail += "; ";
    detail += what;
  }
};

void info(int n, const std::string& s) { std::cout << "  info " << n << ": " << s << std::endl; }

const std::string kData = RETNET_DATA_DIR;

// Criteria 1 and 9 share the fp32 sweep.
EquivalenceResult sweep64, sweep32;
double sweep64_s = 0, sweep32_s = 0;
bool swept = false;

void run_sweeps() {
  if (swept) return;
  EquivalenceOptions o;
  auto t0 = clock_type::now();
  sweep64 = run_equivalence<double>(o);
  sweep64_s = since(t0);
  t0 = clock_type::now();
  sweep32 = run_equivalence<float>(o);
  sweep32_s = since(t0);
  swept = true;
}

Verdict criterion1() {
  run_sweeps();
  Verdict v;
  v.need(sweep64.paradigms.pass(), sweep64.paradigms.summary());
  v.need(sweep32.paradigms.pass(), sweep32.paradigms.summary());
  v.need(sweep64_s < 120 && sweep32_s < 120, fmt("runtime %.1fs + %.1fs", sweep64_s, sweep32_s));
  info(1, fmt("fp32 max deviation relative to output magnitude %.3g", sweep32.max_scaled_deviation));
  for (const auto& c : sweep32.paradigms.failed_cases) info(1, "fp32 failing case: " + c);
  return v;
}

Verdict criterion2() {
  const auto r = run_model_equivalence({});
  Verdict v;
  v.need(r.logits.pass(), r.logits.summary());
  v.need(r.greedy.pass(), fmt("greedy trace %zu/%zu positions match", r.greedy.cases - r.greedy.failures, r.greedy.cases));
  info(2, fmt("smallest top-2 logit margin on the trace %.3g", r.min_top2_margin));
  return v;
}

Verdict criterion3() {
  const auto t0 = clock_type::now();
  const auto rs = run_gradcheck_suite({});
  const double secs = since(t0);
  Verdict v;
  for (const auto& r : rs)
    v.need(r.pass(), fmt("%s/%s %zu coords max rel %.3g (%s)", r.arch.c_str(), r.paradigm.c_str(), r.checked, r.max_rel_error, r.worst.c_str()));
  v.need(secs < 300, fmt("runtime %.1fs", secs));
  return v;
}

std::vector<double> loss_curve(const ModelConfig& cfg, const TrainConfig& tc, const BatchSource& src) {
  Rng rng(cfg.seed);
  auto p = init_params<float>(cfg, rng);
  auto opt = AdamState<float>::zeros_like(p);
  std::vector<double> c;
  for (const auto& s : train<float>(p, opt, cfg, tc, src)) c.push_back(s.loss);
  return c;
}

Verdict criterion4() {
  Verdict v;
  {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.d_model = 32;
    cfg.heads = 2;
    cfg.init_std = 0.2;
    Rng rng(4);
    const auto p = init_params<double>(cfg, rng);
    Batch batch;
    for (int i = 0; i < 3; ++i) {
      Example ex;
      for (int j = 0; j < 29; ++j) {
        ex.input.push_back(static_cast<int>(rng.below(cfg.vocab_size)));
        ex.target.push_back(static_cast<int>(rng.below(cfg.vocab_size)));
      }
      batch.push_back(std::move(ex));
    }
    double worst = 0;
    for (std::size_t b : {1, 8, 29}) {
      const auto a = loss_and_grad<double>(batch, cfg, p, Paradigm::parallel, b);
      const auto c = loss_and_grad<double>(batch, cfg, p, Paradigm::chunkwise, b);
      std::vector<const Tensor<double>*> ga;
      for_each_param(a.grad, [&](const std::string&, const Tensor<double>& t) { ga.push_back(&t); });
      std::size_t k = 0;
      for_each_param(c.grad, [&](const std::string&, const Tensor<double>& t) { worst = std::max(worst, max_abs_diff(t, *ga[k++])); });
    }
    v.need(worst <= 1e-8, fmt("fp64 gradient max abs diff %.3g (tol 1e-8)", worst));
  }

  const auto corpus = Corpus::from_file(kData + "/declaration.txt");
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.d_model = 64;
  cfg.heads = 2;
  cfg.precision = Precision::fp32;
  cfg.seed = 3;
  TrainConfig tc;
  tc.steps = 100;
  tc.batch_size = 4;
  tc.seq_len = 64;
  tc.warmup_steps = 10;
  tc.seed = 3;
  tc.chunk_size = 16;
  const BatchSource src = [&](Rng& r) { return corpus.sample(r, tc.batch_size, tc.seq_len); };
  auto compare = [&](double lr) {
    TrainConfig t = tc;
    t.lr = lr;
    t.paradigm = Paradigm::parallel;
    const auto a = loss_curve(cfg, t, src);
    t.paradigm = Paradigm::chunkwise;
    const auto b = loss_curve(cfg, t, src);
    double worst = a.size() == b.size() && a.size() == tc.steps ? 0 : INFINITY;
    std::size_t at = 0;
    for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i)
      if (const double r = std::fabs(a[i] - b[i]) / std::fabs(a[i]); !(r <= worst)) worst = r, at = i + 1;
    return std::pair{worst, at};
  };
  const auto [dev, at] = compare(3e-4);
  v.need(dev <= 1e-4, fmt("fp32 100-step curves at lr 3e-4 max rel %.3g at step %zu (tol 1e-4)", dev, at));
  const auto [dev_hi, at_hi] = compare(1e-3);
  info(4, fmt("at lr 1e-3 the fp32 curves diverge to max rel %.3g at step %zu", dev_hi, at_hi));
  return v;
}

Verdict criterion5() {
  InferBenchOptions o;
  o.bench.lengths = {128, 1024, 2048, 4096, 8192};
  const auto r = run_infer_bench<float>(o);
  auto at = [&](const std::string& arch, std::size_t len) {
    for (const auto& x : r.records)
      if (x.arch == arch && x.length == len) return x;
    throw std::logic_error("missing record");
  };
  Verdict v;
  const auto s128 = at("retnet", 128).state_elements, s1k = at("retnet", 1024).state_elements, s8k = at("retnet", 8192).state_elements;
  v.need(s128 == s1k && s1k == s8k, fmt("retnet state %zu/%zu/%zu", s128, s1k, s8k));
  bool doubles = true;
  for (std::size_t len : {1024, 2048, 4096})
    doubles &= at("transformer", 2 * len).state_elements == 2 * at("transformer", len).state_elements;
  v.need(doubles, fmt("kv cache %zu -> %zu", at("transformer", 1024).state_elements, at("transformer", 8192).state_elements));
  for (const auto& s : r.slopes) {
    if (s.arch == "retnet")
      v.need(s.p_two_sided > 0.01, fmt("retnet slope %.3g ms/token p=%.3g (flat at alpha 0.01)", s.slope, s.p_two_sided));
    else
      v.need(s.slope > 0 && s.p_positive < 0.01, fmt("transformer slope %.3g ms/token p=%.3g (positive at alpha 0.01)", s.slope, s.p_positive));
  }
  for (std::size_t len : o.bench.lengths)
    info(5, fmt("len %zu median ms: retnet %.3f transformer %.3f", len, at("retnet", len).median_latency_ms, at("transformer", len).median_latency_ms));
  return v;
}

Verdict criterion6() {
  Verdict v;
  for (std::size_t d : {64, 256}) {
    for (Arch a : {Arch::retnet, Arch::transformer}) {
      ModelConfig cfg;
      cfg.arch = a;
      cfg.d_model = d;
      cfg.heads = 4;
      cfg.layers = 2;
      Rng rng(0);
      const auto p = init_params<float>(cfg, rng);
      const auto per_block = block_param_count(cfg), measured = non_embedding_param_count(p) / cfg.layers;
      v.need(per_block == 12 * d * d && measured == 12 * d * d,
             fmt("%s d=%zu block %zu measured %zu (12d^2 = %zu)", to_string(a).c_str(), d, per_block, measured, 12 * d * d));
    }
    v.need(msr_param_count(d) == 8 * d * d, fmt("msr d=%zu %zu", d, msr_param_count(d)));
  }
  return v;
}

Verdict criterion7() {
  Verdict v;
  const auto g = gamma_schedule(8);
  bool exact = true;
  for (std::size_t i = 0; i < 8; ++i) exact &= g[i] == 1.0 - std::pow(2.0, -5.0 - static_cast<double>(i));
  v.need(exact, fmt("standard h=8 first %.17g last %.17g", g.front(), g.back()));
  const auto l = gamma_schedule(8, GammaVariant::log_spaced);
  v.need(l.front() == 1.0 - 1.0 / 32 && l.back() == 1.0 - 1.0 / 512, fmt("log-spaced endpoints %.17g %.17g", l.front(), l.back()));
  return v;
}

Verdict criterion8() {
  const auto rc = load_config(kData + "/../configs/copy.ini");
  const auto src = make_batch_source(rc.data, rc.train, nullptr);
  const auto held = heldout_batch(rc.data, rc.train, nullptr, 256, rc.train.seed);
  Verdict v;
  for (const auto& var : ablation_variants(rc.model)) {
    const auto row = train_variant<float>(var, rc.train, src, held);
    const std::string line = fmt("%s steps %zu loss %.4g acc %.3f (%.0fs)%s", row.variant.c_str(), row.steps, row.final_loss,
                                 row.eval_accuracy, row.seconds, row.error.empty() ? "" : (" error: " + row.error).c_str());
    if (var.cfg.arch == Arch::transformer) {
      info(8, line);
      continue;
    }
    v.need(row.finite && row.steps == rc.train.steps, line);
    if (var.name == "retnet") v.need(row.eval_accuracy >= 0.95, fmt("copy accuracy %.3f (need 0.95)", row.eval_accuracy));
  }
  return v;
}

Verdict criterion9() {
  run_sweeps();
  Verdict v;
  v.need(sweep32.neutrality.pass(), sweep32.neutrality.summary());
  info(9, fmt("%zu of %zu fp32 failures are rows whose variance is below eps/tol", sweep32.eps_limited_failures, sweep32.neutrality.failures));
  info(9, sweep64.neutrality.summary());
  for (const auto& c : sweep32.neutrality.failed_cases) info(9, "fp32 failing case: " + c);
  return v;
}

Verdict criterion10() {
  const auto rc = load_config(kData + "/../configs/corpus.ini");
  const auto corpus = Corpus::from_file(kData + "/declaration.txt", rc.data.valid_fraction);
  const auto src = make_batch_source(rc.data, rc.train, &corpus);
  Rng rng(rc.model.seed);
  auto p = init_params<float>(rc.model, rng);
  auto opt = AdamState<float>::zeros_like(p);
  const auto log = train<float>(p, opt, rc.model, rc.train, src);
  EvalProtocol pr;
  pr.last_k = rc.eval.last_k;
  pr.windows = rc.eval.windows;
  const auto toks = corpus.train_tokens();
  const auto rows = eval_perplexity(rc.model, p, toks, std::span<const std::size_t>(rc.eval.contexts), pr);
  Verdict v;
  v.need(rows.size() == rc.eval.contexts.size(), fmt("%zu rows for %zu contexts", rows.size(), rc.eval.contexts.size()));
  bool scored = true, monotone = true;
  std::string trace;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    scored &= rows[i].context == rc.eval.contexts[i] && rows[i].scored == rows[i].windows * pr.last_k;
    if (i) monotone &= rows[i].perplexity <= rows[i - 1].perplexity;
    trace += fmt("%sctx %zu ppl %.4f", i ? ", " : "", rows[i].context, rows[i].perplexity);
  }
  v.need(scored, "last-K scoring with K=" + std::to_string(pr.last_k));
  v.need(monotone, trace + " after " + std::to_string(log.size()) + " updates");
  const auto valid = corpus.valid_tokens();
  std::string vt;
  for (const auto& r : eval_perplexity(rc.model, p, valid, std::span<const std::size_t>(rc.eval.contexts), pr))
    vt += fmt(" ctx %zu ppl %.4f", r.context, r.perplexity);
  info(10, "validation split (not memorized):" + vt);
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::function<Verdict()>> all{criterion1, criterion2, criterion3, criterion4, criterion5,
                                                  criterion6, criterion7, criterion8, criterion9, criterion10};
  std::set<int> pick;
  for (int i = 1; i < argc; ++i) pick.insert(std::stoi(argv[i]));
  // Timing-sensitive work first, before the heap has grown.
  const std::vector<int> order{5, 7, 6, 1, 9, 2, 3, 4, 10, 8};
  std::vector<std::pair<int, Verdict>> results;
  for (int n : order) {
    if (!pick.empty() && !pick.count(n)) continue;
    const auto t0 = clock_type::now();
    Verdict v;
    try {
      v = all[n - 1]();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail = std::string("exception: ") + e.what();
    }
    std::cout << "criterion " << n << ": " << (v.pass ? "PASS" : "FAIL") << ' ' << v.detail << fmt(" [%.1fs]", since(t0)) << std::endl;
    results.emplace_back(n, v);
  }
  std::sort(results.begin(), results.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::cout << "\nsummary\n";
  bool ok = true;
  for (const auto& [n, v] : results) {
    std::cout << "criterion " << n << ": " << (v.pass ? "PASS" : "FAIL") << '\n';
    ok &= v.pass;
  }
  return ok ? 0 : 1;
}
