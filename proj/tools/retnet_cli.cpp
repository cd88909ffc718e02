#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "retnet/retnet.hpp"

namespace fs = std::filesystem;
using namespace retnet;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string precision;  // empty: per-command default
  std::string out = "runs";
};

RunConfig load_run_config(const Globals& g) {
  RunConfig rc = g.config.empty() ? RunConfig{} : load_config(g.config);
  if (g.seed) {
    rc.model.seed = *g.seed;
    rc.train.seed = *g.seed;
  }
  if (!g.precision.empty()) rc.model.precision = parse_precision(g.precision);
  return rc;
}

std::ofstream open_csv(const Globals& g, const std::string& name) {
  fs::create_directories(g.out);
  const auto path = fs::path(g.out) / name;
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  return os;
}

std::ostream& verdict(bool ok) { return std::cout << (ok ? "PASS " : "FAIL "); }

void print_suite(const SuiteReport& s) {
  verdict(s.pass()) << s.summary() << '\n';
  for (const auto& f : s.failed_cases) std::cout << "    failed: " << f << '\n';
}

void write_suites(const Globals& g, const std::vector<SuiteReport>& suites) {
  auto os = open_csv(g, "suites.csv");
  os << "# schema: retnet.suites/1\nname,cases,failures,max_deviation,tolerance,seconds,pass\n";
  for (const auto& s : suites) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%.6g,%.3g,%.2f,%d\n", s.name.c_str(), s.cases, s.failures, s.max_deviation, s.tolerance,
                  s.seconds, s.pass() ? 1 : 0);
    os << buf;
  }
}

// ---------------------------------------------------------------------------

int cmd_equivalence(const Globals& g, std::size_t max_len, bool inject_bug) {
  const auto rc = load_run_config(g);
  EquivalenceOptions o;
  o.max_len = max_len;
  o.inject_bug = inject_bug;
  o.seed = rc.model.seed;
  std::vector<SuiteReport> suites;
  auto sweep = [&]<class T>() {
    auto csv = open_csv(g, std::string("equivalence_") + to_string(precision_of<T>()) + ".csv");
    auto r = run_equivalence<T>(o, &csv);
    print_suite(r.paradigms);
    print_suite(r.neutrality);
    std::printf("     max deviation relative to output scale %.3g; %zu of %zu neutrality failures are on rows with variance below eps/tolerance\n",
                r.max_scaled_deviation, r.eps_limited_failures, r.neutrality.failures);
    suites.push_back(r.paradigms);
    suites.push_back(r.neutrality);
  };
  if (g.precision.empty() || g.precision == "fp64") sweep.operator()<double>();
  if (g.precision.empty() || g.precision == "fp32") sweep.operator()<float>();
  if (!inject_bug) {
    ModelEquivalenceOptions mo;
    mo.seed = rc.model.seed;
    auto m = run_model_equivalence(mo);
    print_suite(m.logits);
    print_suite(m.greedy);
    suites.push_back(m.logits);
    suites.push_back(m.greedy);
  }
  write_suites(g, suites);
  bool ok = true;
  for (const auto& s : suites) ok &= s.pass();
  return ok ? 0 : 1;
}

int cmd_gradcheck(const Globals& g, std::size_t subsample, std::size_t d_model) {
  if (!g.precision.empty() && g.precision != "fp64") throw std::invalid_argument("gradcheck runs in fp64 only");
  const auto rc = load_run_config(g);
  GradcheckSuiteOptions o;
  o.subsample = subsample;
  o.d_model = d_model;
  o.seed = rc.model.seed;
  const auto t0 = std::chrono::steady_clock::now();
  const auto reports = run_gradcheck_suite(o);
  bool ok = true;
  for (const auto& r : reports) {
    verdict(r.pass()) << "gradcheck " << r.arch << '/' << r.paradigm << ": " << r.checked << " coordinates, max rel error "
                      << r.max_rel_error << " at " << r.worst << " (tol " << r.tolerance << ")\n";
    ok &= r.pass();
  }
  std::printf("     %.1fs\n", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  auto csv = open_csv(g, "gradcheck.csv");
  write_gradcheck_csv(csv, reports);
  return ok ? 0 : 1;
}

std::optional<Corpus> load_corpus(const RunConfig& rc) {
  if (rc.data.task != "corpus") return std::nullopt;
  return Corpus::from_file(rc.data.corpus, rc.data.valid_fraction);
}

template <class T>
int train_impl(const Globals& g, RunConfig rc, const std::string& resume) {
  const auto corpus = load_corpus(rc);
  const Corpus* cp = corpus ? &*corpus : nullptr;
  const auto source = make_batch_source(rc.data, rc.train, cp);
  const Batch heldout = heldout_batch(rc.data, rc.train, cp, 64, rc.train.seed);

  ModelParams<Tensor<T>> p;
  AdamState<T> opt;
  if (!resume.empty()) {
    auto ck = load_checkpoint<T>(resume, rc.model);
    p = std::move(ck.params);
    opt = ck.optimizer ? std::move(*ck.optimizer) : AdamState<T>::zeros_like(p);
    std::cout << "resumed from " << resume << " at update " << opt.step << '\n';
  } else {
    Rng rng(rc.model.seed);
    p = init_params<T>(rc.model, rng);
    opt = AdamState<T>::zeros_like(p);
  }
  std::cout << "training " << to_string(rc.model.arch) << " (" << param_count(p) << " parameters, " << to_string(rc.model.precision)
            << ") for " << rc.train.steps << " updates on " << (cp ? rc.data.corpus : rc.data.task) << '\n';

  auto csv = open_csv(g, "metrics.csv");
  write_metrics_header(csv);
  const std::size_t every = std::max<std::size_t>(1, rc.train.steps / 20);
  auto on_step = [&](const StepStats& s) {
    write_metrics_row(csv, s);
    if (s.step % every == 0 || s.step == rc.train.steps)
      std::printf("step %5zu  loss %.4f  lr %.3g  |g| %.3g  %.0f tok/s\n", s.step, s.loss, s.lr, s.grad_norm, s.tokens_per_sec);
    if (rc.train.eval_interval && s.step % rc.train.eval_interval == 0) {
      const double l = batch_loss<Tensor<T>>(heldout, rc.model, p, Paradigm::parallel, rc.model.chunk_size).item();
      std::printf("  eval step %zu  loss %.4f  acc %.3f\n", s.step, l, token_accuracy<T>(heldout, rc.model, p));
    }
  };
  train<T>(p, opt, rc.model, rc.train, source, on_step);
  const double l = batch_loss<Tensor<T>>(heldout, rc.model, p, Paradigm::parallel, rc.model.chunk_size).item();
  std::printf("held-out loss %.4f  perplexity %.3f  accuracy %.3f\n", l, std::exp(l), token_accuracy<T>(heldout, rc.model, p));
  const auto ckpt = (fs::path(g.out) / "model.ckpt").string();
  save_checkpoint(ckpt, rc.model, p, opt.step, &opt);
  std::cout << "wrote " << ckpt << '\n';
  return 0;
}

int cmd_train(const Globals& g, std::optional<std::size_t> steps, const std::string& resume) {
  auto rc = load_run_config(g);
  if (steps) rc.train.steps = *steps;
  rc.train.warmup_steps = std::min(rc.train.warmup_steps, rc.train.steps);
  return rc.model.precision == Precision::fp32 ? train_impl<float>(g, rc, resume) : train_impl<double>(g, rc, resume);
}

template <class T>
int eval_impl(const Globals& g, const RunConfig& rc, const std::string& path) {
  auto ck = load_checkpoint<T>(path);
  ModelConfig cfg = ck.config;
  cfg.precision = precision_of<T>();
  const auto corpus = load_corpus(rc);
  if (!corpus) throw std::invalid_argument("eval needs [data] task = corpus");
  const auto toks = rc.eval.split == "train" ? corpus->train_tokens() : corpus->valid_tokens();
  EvalProtocol proto;
  proto.last_k = rc.eval.last_k;
  proto.windows = rc.eval.windows;
  const auto rows = eval_perplexity(cfg, ck.params, std::span<const int>(toks), std::span<const std::size_t>(rc.eval.contexts), proto);
  std::printf("%8s %10s %12s %8s\n", "context", "nll", "perplexity", "windows");
  for (const auto& r : rows) std::printf("%8zu %10.4f %12.4f %8zu\n", r.context, r.nll, r.perplexity, r.windows);
  auto csv = open_csv(g, "perplexity.csv");
  write_perplexity_csv(csv, rows);
  return 0;
}

int cmd_eval(const Globals& g, std::string checkpoint, const std::vector<std::size_t>& contexts) {
  auto rc = load_run_config(g);
  if (!contexts.empty()) rc.eval.contexts = contexts;
  if (checkpoint.empty()) checkpoint = rc.eval.checkpoint;
  if (checkpoint.empty()) checkpoint = (fs::path(g.out) / "model.ckpt").string();
  const auto stored = read_checkpoint(checkpoint).config.precision;
  const Precision p = g.precision.empty() ? stored : parse_precision(g.precision);
  return p == Precision::fp32 ? eval_impl<float>(g, rc, checkpoint) : eval_impl<double>(g, rc, checkpoint);
}

int cmd_infer_bench(const Globals& g, double alpha) {
  const auto rc = load_run_config(g);
  InferBenchOptions o;
  o.bench = rc.bench;
  o.precision = g.precision.empty() ? Precision::fp32 : parse_precision(g.precision);
  o.seed = rc.model.seed;
  const auto res = o.precision == Precision::fp32 ? run_infer_bench<float>(o) : run_infer_bench<double>(o);
  {
    auto csv = open_csv(g, "infer_bench.csv");
    write_infer_csv(csv, res.records);
    auto s = open_csv(g, "infer_slope.csv");
    write_slope_csv(s, res.slopes);
  }
  std::printf("%-12s %6s %5s %10s %10s %10s %12s %14s\n", "arch", "length", "batch", "mean_ms", "median_ms", "p99_ms", "tokens/s", "state_elems");
  for (const auto& r : res.records)
    std::printf("%-12s %6zu %5zu %10.4f %10.4f %10.4f %12.1f %14zu\n", r.arch.c_str(), r.length, r.batch, r.mean_latency_ms,
                r.median_latency_ms, r.p99_latency_ms, r.tokens_per_sec, r.state_elements);

  bool ok = true;
  for (std::size_t b : o.bench.batch_sizes) {
    std::vector<const BenchRecord*> ret, tr;
    for (const auto& r : res.records)
      if (r.batch == b) (r.arch == "retnet" ? ret : tr).push_back(&r);
    bool constant = true, doubling = true;
    for (const auto* r : ret) constant &= r->state_elements == ret.front()->state_elements;
    for (const auto* x : tr)
      for (const auto* y : tr)
        if (y->length == 2 * x->length) doubling &= y->state_elements == 2 * x->state_elements;
    verdict(constant) << "retnet state elements constant across lengths (batch " << b << ")\n";
    verdict(doubling) << "transformer cache doubles when the length doubles (batch " << b << ")\n";
    ok &= constant && doubling;
  }
  for (const auto& f : res.slopes) {
    const bool pass = f.arch == "retnet" ? f.p_two_sided > alpha : (f.slope > 0 && f.p_positive < alpha);
    verdict(pass) << f.arch << " latency slope " << f.slope << " ms/token (se " << f.std_error << ", p=" << f.p_two_sided
                  << (f.arch == "retnet" ? " two-sided" : "") << ", batch " << f.batch << ")\n";
    ok &= pass;
  }
  return ok ? 0 : 1;
}

template <class T>
int ablate_impl(const Globals& g, const RunConfig& rc) {
  const auto corpus = load_corpus(rc);
  const Corpus* cp = corpus ? &*corpus : nullptr;
  const auto source = make_batch_source(rc.data, rc.train, cp);
  const Batch heldout = heldout_batch(rc.data, rc.train, cp, 256, rc.train.seed);
  std::vector<AblationRow> rows;
  bool ok = true;
  for (const auto& v : ablation_variants(rc.model)) {
    auto row = train_variant<T>(v, rc.train, source, heldout);
    verdict(row.finite) << v.name << ": " << row.steps << " updates, final loss " << row.final_loss << ", held-out loss "
                        << row.eval_loss << ", accuracy " << row.eval_accuracy << " (" << row.seconds << "s)"
                        << (row.error.empty() ? "" : "; " + row.error) << '\n';
    ok &= row.finite && row.steps == rc.train.steps;
    rows.push_back(row);
  }
  auto csv = open_csv(g, "ablation.csv");
  write_ablation_csv(csv, rows);
  return ok ? 0 : 1;
}

int cmd_ablate(const Globals& g, std::optional<std::size_t> steps) {
  auto rc = load_run_config(g);
  if (steps) rc.train.steps = *steps;
  rc.train.warmup_steps = std::min(rc.train.warmup_steps, rc.train.steps);
  return rc.model.precision == Precision::fp32 ? ablate_impl<float>(g, rc) : ablate_impl<double>(g, rc);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RetNet retention paradigms, training and inference benchmarks"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config, "INI run configuration")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "Seed for initialization, data and sweeps");
  app.add_option("--precision", g.precision, "Arithmetic precision")->check(CLI::IsMember({"fp32", "fp64"}));
  app.add_option("--out", g.out, "Output directory for CSV files and checkpoints");

  auto* eq = app.add_subcommand("equivalence", "Three-paradigm retention sweep and full-model agreement");
  std::size_t max_len = 128;
  bool inject = false;
  eq->add_option("--max-len", max_len, "Longest sequence in the sweep")->check(CLI::Range(1, 4096));
  eq->add_flag("--inject-bug", inject, "Flip the intra-chunk decay exponent; the sweep must fail");

  auto* gc = app.add_subcommand("gradcheck", "Reverse mode against central differences");
  std::size_t subsample = 0, gc_d = 16;
  gc->add_option("--subsample", subsample, "Coordinates per tensor (0 checks all)");
  gc->add_option("--d-model", gc_d, "Model width");

  auto* tr = app.add_subcommand("train", "Train a model from the configuration");
  std::optional<std::size_t> steps;
  std::string resume;
  tr->add_option("--steps", steps, "Override [train] steps");
  tr->add_option("--resume", resume, "Continue from a checkpoint")->check(CLI::ExistingFile);

  auto* ev = app.add_subcommand("eval", "Perplexity at several context lengths");
  std::string ckpt;
  std::vector<std::size_t> contexts;
  ev->add_option("--checkpoint", ckpt, "Checkpoint to evaluate (default <out>/model.ckpt)");
  ev->add_option("--contexts", contexts, "Context lengths")->delimiter(',');

  auto* ib = app.add_subcommand("infer-bench", "Per-token decode cost against context length");
  double alpha = 0.01;
  ib->add_option("--alpha", alpha, "Significance level of the slope tests");

  auto* ab = app.add_subcommand("ablate", "Train every ablation variant under one budget");
  std::optional<std::size_t> ab_steps;
  ab->add_option("--steps", ab_steps, "Override [train] steps");

  CLI11_PARSE(app, argc, argv);
  if (*seed_opt) g.seed = seed;

  try {
    if (*eq) return cmd_equivalence(g, max_len, inject);
    if (*gc) return cmd_gradcheck(g, subsample, gc_d);
    if (*tr) return cmd_train(g, steps, resume);
    if (*ev) return cmd_eval(g, ckpt, contexts);
    if (*ib) return cmd_infer_bench(g, alpha);
    if (*ab) return cmd_ablate(g, ab_steps);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}
