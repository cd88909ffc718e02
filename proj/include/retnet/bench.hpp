#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "retnet/config.hpp"
#include "retnet/msr.hpp"
#include "retnet/train.hpp"

namespace retnet {

inline constexpr const char* kEquivalenceSchema = "# schema: retnet.equivalence/1";
inline constexpr const char* kInferSchema = "# schema: retnet.infer_bench/1";
inline constexpr const char* kSlopeSchema = "# schema: retnet.infer_slope/1";
inline constexpr const char* kAblationSchema = "# schema: retnet.ablation/1";
inline constexpr const char* kPerplexitySchema = "# schema: retnet.perplexity/1";
inline constexpr const char* kGradcheckSchema = "# schema: retnet.gradcheck/1";

/// Outcome of one acceptance-style suite.
struct SuiteReport {
  std::string name;
  std::size_t cases = 0;
  std::size_t failures = 0;
  double max_deviation = 0;
  double tolerance = 0;
  std::string worst;                       // case with the largest deviation
  std::vector<std::string> failed_cases;   // first few failures, for the log
  double seconds = 0;

  bool pass() const { return cases > 0 && failures == 0; }

  void record(double dev, const std::function<std::string()>& label) {
    ++cases;
    const double d = std::isnan(dev) ? std::numeric_limits<double>::infinity() : dev;
    if (cases == 1 || d > max_deviation) {
      max_deviation = d;
      worst = label();
    }
    if (!(d <= tolerance)) {
      ++failures;
      if (failed_cases.size() < 8) failed_cases.push_back(label());
    }
  }

  std::string summary() const {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%zu cases, %zu failed, max deviation %.3g (tol %.1g), %.1fs", cases, failures, max_deviation,
                  tolerance, seconds);
    std::string s = name + ": " + buf;
    if (!worst.empty()) s += "; worst " + worst;
    return s;
  }
};

// ---------------------------------------------------------------------------
// Retention-level equivalence sweep

struct EquivalenceOptions {
  std::size_t max_len = 128;
  std::vector<std::size_t> dims{16, 64};
  std::vector<std::size_t> chunk_sizes{1, 4, 16};  // the sequence length is always added
  bool inject_bug = false;                          // flip the intra-chunk decay exponent
  std::uint64_t seed = 0;
  double input_std = 1.0;
  double tolerance = 0;            // 0 selects 1e-10 (fp64) or 1e-5 (fp32)
  double neutrality_tolerance = 1e-4;
};

struct EquivalenceResult {
  SuiteReport paradigms;   // recurrent and chunkwise against parallel
  SuiteReport neutrality;  // post-GroupNorm output with stabilizers on vs off
  // Largest deviation divided by max(1, max |parallel output|) of its case.
  double max_scaled_deviation = 0;
  // Failed neutrality checks whose worst row has variance below eps / tolerance,
  // where the GroupNorm epsilon alone moves the output by more than the tolerance.
  std::size_t eps_limited_failures = 0;
};

/// The γ values swept: both head schedules for eight heads, de-duplicated.
inline std::vector<double> sweep_gammas() {
  std::vector<double> g = gamma_schedule(8, GammaVariant::standard);
  for (double x : gamma_schedule(8, GammaVariant::log_spaced))
    if (std::find(g.begin(), g.end(), x) == g.end()) g.push_back(x);
  return g;
}

inline NormalizationConfig norm_config(unsigned bits) { return {bool(bits & 1), bool(bits & 2), bool(bits & 4)}; }

inline std::string norm_label(const NormalizationConfig& c) {
  return std::string("scale_qk=") + (c.scale_qk ? "1" : "0") + " normalize_D=" + (c.normalize_D ? "1" : "0") +
         " clamp=" + (c.clamp_row_sum ? "1" : "0");
}

/// Every length 1…max_len is paired with all eight stabilizer settings;
/// (d_k, d_v, γ) cycle so each combination recurs many times. For every case
/// the recurrent form and the chunkwise form at each chunk size (plus one
/// chunk spanning the sequence) are compared with the parallel form.
template <class T>
EquivalenceResult run_equivalence(const EquivalenceOptions& opt, std::ostream* csv = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  EquivalenceResult res;
  res.paradigms.name = std::string("equivalence[") + to_string(precision_of<T>()) + "]";
  res.paradigms.tolerance = opt.tolerance > 0 ? opt.tolerance : (std::is_same_v<T, float> ? 1e-5 : 1e-10);
  res.neutrality.name = std::string("stabilizer-neutrality[") + to_string(precision_of<T>()) + "]";
  res.neutrality.tolerance = opt.neutrality_tolerance;
  if (csv) *csv << kEquivalenceSchema << "\nlen,dk,dv,gamma,scale_qk,normalize_D,clamp_row_sum,paradigm,chunk,max_abs_dev,tolerance,pass\n";

  const auto gammas = sweep_gammas();
  std::vector<std::pair<std::size_t, std::size_t>> dims;
  for (auto a : opt.dims)
    for (auto b : opt.dims) dims.emplace_back(a, b);

  std::size_t idx = 0;
  for (std::size_t len = 1; len <= opt.max_len; ++len) {
    for (unsigned bits = 0; bits < 8; ++bits, ++idx) {
      // For a fixed stabilizer setting, consecutive lengths walk every (dims, γ) pair.
      const auto [dk, dv] = dims[len % dims.size()];
      const double gd = gammas[(len / dims.size()) % gammas.size()];
      const T gamma = static_cast<T>(gd);
      const NormalizationConfig nc = norm_config(bits);
      Rng rng(opt.seed * 0x100000001b3ULL + idx);
      const Tensor<T> q = apply_xpos(random_normal<T>(rng, len, dk, opt.input_std), 0L, +1);
      const Tensor<T> k = apply_xpos(random_normal<T>(rng, len, dk, opt.input_std), 0L, +1);
      const Tensor<T> v = random_normal<T>(rng, len, dv, opt.input_std);

      const Tensor<T> par = retention_parallel(q, k, v, decay_mask<T>(gamma, len, nc), nc);
      const Tensor<T> ref = retention_parallel(q, k, v, decay_mask<T>(gamma, len, NormalizationConfig::none()), NormalizationConfig::none());
      const Tensor<T> ref_gn = group_norm(ref, 1);
      const auto st = RetentionState<Tensor<T>>::zeros(dk, dv);
      double par_scale = 0;
      for (T x : par.data()) par_scale = std::max(par_scale, static_cast<double>(std::fabs(x)));

      auto neutral = [&](const Tensor<T>& out, const std::function<std::string()>& label) {
        const Tensor<T> g = group_norm(out, 1);
        double dev = 0;
        std::size_t row = 0;
        for (std::size_t n = 0; n < g.rows(); ++n)
          for (std::size_t j = 0; j < g.cols(); ++j)
            if (const double d = std::fabs(static_cast<double>(g(n, j)) - static_cast<double>(ref_gn(n, j))); d > dev) dev = d, row = n;
        const std::size_t before = res.neutrality.failures;
        res.neutrality.record(dev, label);
        if (res.neutrality.failures > before) {
          auto row_var = [&](const Tensor<T>& t) {
            const auto [mean, inv] = detail::group_moments<T>(t.row_span(row), T(0));
            return 1.0 / (static_cast<double>(inv) * static_cast<double>(inv));
          };
          const double var = std::min(row_var(out), row_var(ref));
          if (var < static_cast<double>(default_norm_eps<T>()) / res.neutrality.tolerance) ++res.eps_limited_failures;
        }
      };

      auto check = [&](const std::string& paradigm, std::size_t chunk, const Tensor<T>& out) {
        const double dev = static_cast<double>(max_abs_diff(out, par));
        const auto label = [&] {
          std::ostringstream os;
          os << paradigm;
          if (chunk) os << " B=" << chunk;
          os << " len=" << len << " dk=" << dk << " dv=" << dv << " gamma=" << gd << ' ' << norm_label(nc);
          return os.str();
        };
        res.paradigms.record(dev, label);
        res.max_scaled_deviation = std::max(res.max_scaled_deviation, dev / std::max(1.0, par_scale));
        if (nc != NormalizationConfig::none()) neutral(out, label);
        if (csv) {
          char buf[64];
          std::snprintf(buf, sizeof buf, "%.17g", gd);
          *csv << len << ',' << dk << ',' << dv << ',' << buf << ',' << nc.scale_qk << ',' << nc.normalize_D << ','
               << nc.clamp_row_sum << ',' << paradigm << ',' << chunk << ',' << dev << ',' << res.paradigms.tolerance << ','
               << (dev <= res.paradigms.tolerance) << '\n';
        }
      };
      check("recurrent", 0, retention_recurrent(q, k, v, st, gamma, nc).output);
      std::vector<std::size_t> chunks = opt.chunk_sizes;
      if (std::find(chunks.begin(), chunks.end(), len) == chunks.end()) chunks.push_back(len);
      for (std::size_t b : chunks) check("chunkwise", b, retention_chunkwise(q, k, v, st, gamma, b, nc, opt.inject_bug).output);
      if (nc != NormalizationConfig::none())
        neutral(par, [&] {
          std::ostringstream os;
          os << "parallel len=" << len << " dk=" << dk << " dv=" << dv << " gamma=" << gd << ' ' << norm_label(nc);
          return os.str();
        });
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  res.paradigms.seconds = res.neutrality.seconds = secs;
  return res;
}

// ---------------------------------------------------------------------------
// Full-model equivalence

struct ModelEquivalenceOptions {
  std::size_t layers = 2;
  std::size_t d_model = 64;
  std::size_t heads = 2;
  std::size_t len = 96;
  std::vector<std::size_t> chunk_sizes{7, 32};
  std::size_t decode_steps = 256;
  std::uint64_t seed = 0;
  double tolerance = 1e-9;
};

struct ModelEquivalenceResult {
  SuiteReport logits;        // chunkwise and recurrent logits against parallel
  SuiteReport greedy;        // greedy decode against the parallel argmax trace
  double min_top2_margin = 0;  // smallest logit gap seen along the greedy trace
};

/// fp64 only: the tolerances here are far below fp32 resolution.
inline ModelEquivalenceResult run_model_equivalence(const ModelEquivalenceOptions& o) {
  const auto t0 = std::chrono::steady_clock::now();
  ModelConfig cfg;
  cfg.layers = o.layers;
  cfg.d_model = o.d_model;
  cfg.heads = o.heads;
  cfg.seed = o.seed;
  Rng rng(o.seed);
  const auto p = init_params<double>(cfg, rng);
  std::vector<int> toks(o.len);
  for (auto& t : toks) t = static_cast<int>(rng.below(cfg.vocab_size));

  ModelEquivalenceResult r;
  r.logits.name = "model-equivalence[fp64]";
  r.logits.tolerance = o.tolerance;
  const auto par = model_forward(std::span<const int>(toks), cfg, p, Paradigm::parallel, cfg.chunk_size);
  for (std::size_t b : o.chunk_sizes) {
    const auto chk = model_forward(std::span<const int>(toks), cfg, p, Paradigm::chunkwise, b);
    r.logits.record(max_abs_diff(chk, par), [&] { return "chunkwise B=" + std::to_string(b) + " len=" + std::to_string(o.len); });
  }
  auto session = DecodeSession<double>::start(cfg);
  double dec = 0;
  for (std::size_t i = 0; i < toks.size(); ++i) dec = std::max(dec, max_abs_diff(decode_step(session, toks[i], cfg, p), slice_rows(par, i, i + 1)));
  r.logits.record(dec, [&] { return "recurrent decode len=" + std::to_string(o.len); });

  r.greedy.name = "greedy-trace[fp64]";
  r.greedy.tolerance = 0;
  const std::vector<int> prompt{kBos};
  const auto seq = greedy_decode<double>(prompt, o.decode_steps, cfg, p);
  const std::vector<int> ctx(seq.begin(), seq.end() - 1);
  const auto full = model_forward(std::span<const int>(ctx), cfg, p, Paradigm::parallel, cfg.chunk_size);
  r.min_top2_margin = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < ctx.size(); ++i) {
    auto row = full.row_span(i);
    const std::size_t a = argmax<double>(row);
    double second = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < row.size(); ++j)
      if (j != a) second = std::max(second, row[j]);
    r.min_top2_margin = std::min(r.min_top2_margin, row[a] - second);
    r.greedy.record(static_cast<int>(a) == seq[i + 1] ? 0.0 : 1.0, [&] { return "position " + std::to_string(i + 1); });
  }
  r.logits.seconds = r.greedy.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// ---------------------------------------------------------------------------
// Gradient check suite

struct GradcheckSuiteOptions {
  std::size_t d_model = 16;
  std::size_t heads = 2;
  std::size_t sequences = 2;
  std::size_t len = 10;
  std::size_t chunk_size = 4;
  // At the default 0.02 the loss is so flat that the truncation error of the
  // central difference is comparable to the gradients being checked.
  double init_std = 0.1;
  std::size_t subsample = 0;  // 0 checks every coordinate
  std::uint64_t seed = 0;
  double tolerance = 1e-5;
  double step = 1e-5;
};

/// One-layer RetNet (parallel and chunkwise) and the one-layer baseline.
inline std::vector<GradcheckReport> run_gradcheck_suite(const GradcheckSuiteOptions& o) {
  Rng rng(o.seed);
  Batch batch;
  for (std::size_t i = 0; i < o.sequences; ++i) {
    Example ex;
    for (std::size_t j = 0; j < o.len; ++j) {
      ex.input.push_back(static_cast<int>(rng.below(kByteVocab)));
      ex.target.push_back(static_cast<int>(rng.below(kByteVocab)));
    }
    batch.push_back(std::move(ex));
  }
  std::vector<GradcheckReport> out;
  for (auto [arch, paradigm] : {std::pair{Arch::retnet, Paradigm::parallel}, std::pair{Arch::retnet, Paradigm::chunkwise},
                                std::pair{Arch::transformer, Paradigm::parallel}}) {
    ModelConfig cfg;
    cfg.arch = arch;
    cfg.layers = 1;
    cfg.d_model = o.d_model;
    cfg.heads = o.heads;
    cfg.init_std = o.init_std;
    Rng prng(o.seed + 1);
    const auto p = init_params<double>(cfg, prng);
    out.push_back(gradcheck(cfg, p, batch, paradigm, o.chunk_size, o.tolerance, o.step, o.subsample, o.seed + 2));
  }
  return out;
}

inline void write_gradcheck_csv(std::ostream& os, const std::vector<GradcheckReport>& rs) {
  os << kGradcheckSchema << "\narch,paradigm,checked,max_rel_error,worst,tolerance,pass\n";
  for (const auto& r : rs) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%s,%zu,%.6g,%s,%.1g,%d\n", r.arch.c_str(), r.paradigm.c_str(), r.checked, r.max_rel_error,
                  r.worst.c_str(), r.tolerance, r.pass() ? 1 : 0);
    os << buf;
  }
}

// ---------------------------------------------------------------------------
// Inference cost

struct BenchRecord {
  std::string arch;
  std::size_t length = 0;
  std::size_t batch = 0;
  double mean_latency_ms = 0;
  double median_latency_ms = 0;  // median of the per-sample means
  double p99_latency_ms = 0;     // over individual decode steps
  double tokens_per_sec = 0;
  std::size_t state_elements = 0;
  std::size_t peak_workspace_elements = 0;
  std::vector<double> samples_ms;
};

struct SlopeFit {
  std::string arch;
  std::size_t batch = 0;
  std::size_t n = 0;
  double slope = 0;        // ms per token of context
  double std_error = 0;
  double t = 0;
  double p_two_sided = 1;  // H0: slope = 0
  double p_positive = 1;   // H0: slope ≤ 0
};

/// Ordinary least squares of y on x with a Student-t test on the slope.
inline SlopeFit fit_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 3) throw std::invalid_argument("fit_slope: need at least three paired points");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
  mx /= n, my /= n;
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) sxx += (x[i] - mx) * (x[i] - mx), sxy += (x[i] - mx) * (y[i] - my);
  if (sxx == 0) throw std::invalid_argument("fit_slope: x has no spread");
  SlopeFit f;
  f.n = x.size();
  f.slope = sxy / sxx;
  const double icpt = my - f.slope * mx;
  double rss = 0;
  for (std::size_t i = 0; i < x.size(); ++i) rss += std::pow(y[i] - icpt - f.slope * x[i], 2);
  const double df = n - 2;
  f.std_error = std::sqrt(rss / df / sxx);
  boost::math::students_t dist(df);
  if (f.std_error > 0) {
    f.t = f.slope / f.std_error;
    f.p_two_sided = 2 * boost::math::cdf(boost::math::complement(dist, std::fabs(f.t)));
    f.p_positive = boost::math::cdf(boost::math::complement(dist, f.t));
  } else {
    f.t = f.slope == 0 ? 0 : std::copysign(std::numeric_limits<double>::infinity(), f.slope);
    f.p_two_sided = f.slope == 0 ? 1 : 0;
    f.p_positive = f.slope > 0 ? 0 : 1;
  }
  return f;
}

/// Recurrent state or KV cache held after `length` tokens, per sequence.
inline std::size_t decode_state_elements(const ModelConfig& cfg, std::size_t length) {
  if (cfg.arch == Arch::transformer) return 2 * cfg.layers * length * cfg.d_model;
  const MsrConfig m = cfg.msr();
  return cfg.layers * m.effective_heads() * (m.qk_head_dim() * m.v_head_dim() + m.qk_head_dim() + 1);
}

/// Largest transient tensor built in one decode step at context `length`
/// (per sequence): logits, the feed-forward hidden layer, the per-head
/// k^T v outer product, or the attention scores and gathered keys.
inline std::size_t decode_workspace_elements(const ModelConfig& cfg, std::size_t length) {
  std::size_t w = std::max(cfg.vocab_size, cfg.ffn());
  if (cfg.arch == Arch::retnet) {
    const MsrConfig m = cfg.msr();
    w = std::max({w, 2 * cfg.d_model, m.qk_head_dim() * m.v_head_dim()});
  } else {
    w = std::max({w, 3 * cfg.d_model, (length + 1) * (cfg.attention_head_dim() + 1)});
  }
  return w;
}

struct InferBenchOptions {
  BenchConfig bench;
  Precision precision = Precision::fp32;
  std::uint64_t seed = 0;
  std::vector<Arch> archs{Arch::retnet, Arch::transformer};
};

struct InferBenchResult {
  std::vector<BenchRecord> records;
  std::vector<SlopeFit> slopes;
};

inline ModelConfig bench_model(const BenchConfig& b, Arch arch) {
  ModelConfig c;
  c.arch = arch;
  c.layers = b.layers;
  c.d_model = b.d_model;
  c.heads = b.heads;
  return c;
}

/// Throws std::invalid_argument naming the requirement when the largest
/// configuration would hold more than `budget_elements` state elements.
inline void check_budget(const InferBenchOptions& o) {
  const std::size_t max_len = *std::max_element(o.bench.lengths.begin(), o.bench.lengths.end());
  const std::size_t max_b = *std::max_element(o.bench.batch_sizes.begin(), o.bench.batch_sizes.end());
  for (Arch a : o.archs) {
    const auto cfg = bench_model(o.bench, a);
    // One live session per sequence plus one snapshot per length.
    std::size_t need = max_b * decode_state_elements(cfg, max_len + o.bench.warmup + o.bench.steps_per_sample);
    for (std::size_t len : o.bench.lengths) need += decode_state_elements(cfg, len);
    if (need > o.bench.budget_elements)
      throw std::invalid_argument("infer-bench: " + to_string(a) + " at length " + std::to_string(max_len) + " and batch " +
                                  std::to_string(max_b) + " needs " + std::to_string(need) + " state elements, budget is " +
                                  std::to_string(o.bench.budget_elements));
  }
}

template <class T>
InferBenchResult run_infer_bench(const InferBenchOptions& o) {
  using clock = std::chrono::steady_clock;
  check_budget(o);
  auto lengths = o.bench.lengths;
  std::sort(lengths.begin(), lengths.end());
  struct Arm {
    ModelConfig cfg;
    ModelParams<Tensor<T>> p;
    std::vector<DecodeSession<T>> snapshots;  // one per length
  };
  std::vector<Arm> arms;
  Rng tok_rng(o.seed ^ 0x5eed);
  std::vector<int> prefix(lengths.back());
  for (auto& t : prefix) t = static_cast<int>(tok_rng.below(kByteVocab - 2));
  for (Arch a : o.archs) {
    Arm arm;
    arm.cfg = bench_model(o.bench, a);
    arm.cfg.validate();
    Rng rng(o.seed);
    arm.p = init_params<T>(arm.cfg, rng);
    auto s = DecodeSession<T>::start(arm.cfg);
    std::size_t pos = 0;
    for (std::size_t len : lengths) {
      for (; pos < len; ++pos) decode_step(s, prefix[pos], arm.cfg, arm.p);
      arm.snapshots.push_back(s);
    }
    arms.push_back(std::move(arm));
  }

  InferBenchResult res;
  for (std::size_t batch : o.bench.batch_sizes) {
    // samples[arm][length] and per-step latencies for the p99.
    std::vector<std::vector<std::vector<double>>> samples(arms.size(), std::vector<std::vector<double>>(lengths.size()));
    std::vector<std::vector<std::vector<double>>> steps(arms.size(), std::vector<std::vector<double>>(lengths.size()));
    for (std::size_t rep = 0; rep < o.bench.repeats; ++rep) {
      for (std::size_t li = 0; li < lengths.size(); ++li) {
        for (std::size_t ai = 0; ai < arms.size(); ++ai) {
          auto& arm = arms[ai];
          std::vector<DecodeSession<T>> live(batch, arm.snapshots[li]);
          int tok = prefix[(li + rep) % prefix.size()];
          for (std::size_t w = 0; w < o.bench.warmup; ++w)
            for (auto& s : live) decode_step(s, tok, arm.cfg, arm.p);
          double total = 0;
          for (std::size_t k = 0; k < o.bench.steps_per_sample; ++k) {
            const auto t0 = clock::now();
            for (auto& s : live) {
              auto logits = decode_step(s, tok, arm.cfg, arm.p);
              tok = static_cast<int>(argmax<T>(std::as_const(logits).data())) % static_cast<int>(kByteVocab - 2);
            }
            const double ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
            steps[ai][li].push_back(ms);
            total += ms;
          }
          samples[ai][li].push_back(total / static_cast<double>(o.bench.steps_per_sample));
        }
      }
    }
    for (std::size_t ai = 0; ai < arms.size(); ++ai) {
      std::vector<double> xs, ys;
      for (std::size_t li = 0; li < lengths.size(); ++li) {
        BenchRecord r;
        r.arch = to_string(arms[ai].cfg.arch);
        r.length = lengths[li];
        r.batch = batch;
        r.samples_ms = samples[ai][li];
        auto sorted = r.samples_ms;
        std::sort(sorted.begin(), sorted.end());
        r.median_latency_ms = sorted.size() % 2 ? sorted[sorted.size() / 2]
                                                : 0.5 * (sorted[sorted.size() / 2 - 1] + sorted[sorted.size() / 2]);
        double sum = 0;
        for (double v : sorted) sum += v;
        r.mean_latency_ms = sum / static_cast<double>(sorted.size());
        auto st = steps[ai][li];
        std::sort(st.begin(), st.end());
        r.p99_latency_ms = st[std::min(st.size() - 1, static_cast<std::size_t>(std::ceil(0.99 * static_cast<double>(st.size()))) - 1)];
        r.tokens_per_sec = 1000.0 * static_cast<double>(batch) / r.mean_latency_ms;
        r.state_elements = batch * arms[ai].snapshots[li].state_elements();
        r.peak_workspace_elements = batch * decode_workspace_elements(arms[ai].cfg, lengths[li]);
        for (double v : r.samples_ms) xs.push_back(static_cast<double>(lengths[li])), ys.push_back(v);
        res.records.push_back(std::move(r));
      }
      auto fit = fit_slope(xs, ys);
      fit.arch = to_string(arms[ai].cfg.arch);
      fit.batch = batch;
      res.slopes.push_back(fit);
    }
  }
  return res;
}

inline void write_infer_csv(std::ostream& os, const std::vector<BenchRecord>& rs) {
  os << kInferSchema << "\narch,length,batch,mean_latency_ms,median_latency_ms,p99_latency_ms,tokens_per_sec,state_elements,peak_workspace_elements\n";
  for (const auto& r : rs) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%.6g,%.6g,%.6g,%.6g,%zu,%zu\n", r.arch.c_str(), r.length, r.batch, r.mean_latency_ms,
                  r.median_latency_ms, r.p99_latency_ms, r.tokens_per_sec, r.state_elements, r.peak_workspace_elements);
    os << buf;
  }
}

inline void write_slope_csv(std::ostream& os, const std::vector<SlopeFit>& fs) {
  os << kSlopeSchema << "\narch,batch,n,slope_ms_per_token,std_error,t,p_two_sided,p_positive\n";
  for (const auto& f : fs) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%.6g,%.6g,%.6g,%.6g,%.6g\n", f.arch.c_str(), f.batch, f.n, f.slope, f.std_error, f.t,
                  f.p_two_sided, f.p_positive);
    os << buf;
  }
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationRow {
  std::string variant;
  std::size_t params = 0;
  std::size_t steps = 0;        // updates completed
  double final_loss = 0;        // training loss of the last update
  double eval_loss = 0;         // held-out loss after training
  double eval_perplexity = 0;
  double eval_accuracy = 0;     // teacher-forced accuracy on scored targets
  bool finite = false;
  double seconds = 0;
  std::string error;
};

struct AblationVariant {
  std::string name;
  ModelConfig cfg;
};

/// The six retention variants and the parameter-matched baseline.
inline std::vector<AblationVariant> ablation_variants(const ModelConfig& base) {
  std::vector<AblationVariant> v;
  ModelConfig full = base;
  full.arch = Arch::retnet;
  full.flags = {};
  v.push_back({"retnet", full});
  auto with = [&](const char* name, auto&& edit) {
    ModelConfig c = full;
    edit(c);
    v.push_back({name, c});
  };
  with("no_gate", [](ModelConfig& c) { c.flags.no_gate = true; });
  with("no_groupnorm", [](ModelConfig& c) { c.flags.no_groupnorm = true; });
  with("no_decay", [](ModelConfig& c) { c.flags.no_decay = true; });
  with("single_scale", [](ModelConfig& c) { c.flags.single_scale = true; });
  with("reduced_head_dim", [](ModelConfig& c) { c.flags.head_dim_override = c.d_model / c.heads / 2; });
  ModelConfig tr = full;
  tr.arch = Arch::transformer;
  tr.paradigm = Paradigm::parallel;
  v.push_back({"transformer", tr});
  return v;
}

/// Held-out batch for a data source, drawn from a seed disjoint from training.
inline Batch heldout_batch(const DataConfig& d, const TrainConfig& tc, const Corpus* corpus, std::size_t n, std::uint64_t seed) {
  Rng rng(seed ^ 0xa0761d6478bd642fULL);
  if (d.task == "corpus") {
    Batch b;
    const auto valid = corpus->valid_tokens();
    if (valid.size() < tc.seq_len) throw std::invalid_argument("heldout_batch: validation split shorter than seq_len");
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = rng.below(valid.size() - tc.seq_len + 1);
      Example ex;
      ex.input.push_back(kBos);
      for (std::size_t j = 0; j + 1 < tc.seq_len; ++j) ex.input.push_back(valid[off + j]);
      for (std::size_t j = 0; j < tc.seq_len; ++j) ex.target.push_back(valid[off + j]);
      b.push_back(std::move(ex));
    }
    return b;
  }
  TrainConfig one = tc;
  one.batch_size = n;
  return make_batch_source(d, one, corpus)(rng);
}

template <class T>
AblationRow train_variant(const AblationVariant& v, const TrainConfig& tc, const BatchSource& source, const Batch& heldout,
                          const std::function<void(const StepStats&)>& on_step = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  AblationRow row;
  row.variant = v.name;
  TrainConfig t = tc;
  if (v.cfg.arch == Arch::transformer) t.paradigm = Paradigm::parallel;
  try {
    v.cfg.validate();
    Rng rng(v.cfg.seed);
    auto p = init_params<T>(v.cfg, rng);
    row.params = param_count(p);
    auto opt = AdamState<T>::zeros_like(p);
    auto log = train<T>(p, opt, v.cfg, t, source, on_step);
    row.steps = log.size();
    row.final_loss = log.empty() ? 0.0 : log.back().loss;
    row.eval_loss = static_cast<double>(batch_loss<Tensor<T>>(heldout, v.cfg, p, Paradigm::parallel, v.cfg.chunk_size).item());
    row.eval_perplexity = std::exp(row.eval_loss);
    row.eval_accuracy = token_accuracy<T>(heldout, v.cfg, p);
    row.finite = std::isfinite(row.final_loss) && std::isfinite(row.eval_loss);
  } catch (const std::exception& e) {
    row.error = e.what();
    row.finite = false;
  }
  row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return row;
}

inline void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
  os << kAblationSchema << "\nvariant,params,steps,final_loss,eval_loss,eval_perplexity,eval_accuracy,finite,seconds\n";
  for (const auto& r : rows) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%.9g,%.9g,%.9g,%.6g,%d,%.2f\n", r.variant.c_str(), r.params, r.steps, r.final_loss,
                  r.eval_loss, r.eval_perplexity, r.eval_accuracy, r.finite ? 1 : 0, r.seconds);
    os << buf;
  }
}

inline void write_perplexity_csv(std::ostream& os, const std::vector<PerplexityRow>& rows) {
  os << kPerplexitySchema << "\ncontext,nll,perplexity,windows,scored\n";
  for (const auto& r : rows) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%zu,%zu\n", r.context, r.nll, r.perplexity, r.windows, r.scored);
    os << buf;
  }
}

}  // namespace retnet
