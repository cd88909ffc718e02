#pragma once

// Desk-scale training and evaluation: byte corpus, synthetic probes, AdamW
// with warmup + linear decay, gradient checks and last-K perplexity.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iterator>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "retnet/model.hpp"

namespace retnet {

// ---------------------------------------------------------------------------
// Vocabulary and data

inline constexpr int kBos = 256;
inline constexpr int kPad = 257;
inline constexpr std::size_t kByteVocab = 258;

struct Example {
  std::vector<int> input;
  std::vector<int> target;  // kIgnoreTarget where unscored
};

using Batch = std::vector<Example>;

/// Raw bytes split into a training prefix and validation suffix.
class Corpus {
 public:
  Corpus() = default;
  Corpus(std::vector<std::uint8_t> bytes, double valid_fraction = 0.1) : bytes_(std::move(bytes)) {
    if (valid_fraction < 0.0 || valid_fraction >= 1.0) throw std::invalid_argument("Corpus: valid_fraction must lie in [0, 1)");
    split_ = bytes_.size() - static_cast<std::size_t>(static_cast<double>(bytes_.size()) * valid_fraction);
  }

  static Corpus from_file(const std::string& path, double valid_fraction = 0.1) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("Corpus: cannot open '" + path + "'");
    std::vector<std::uint8_t> b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return Corpus(std::move(b), valid_fraction);
  }

  static Corpus from_string(const std::string& s, double valid_fraction = 0.1) {
    return Corpus(std::vector<std::uint8_t>(s.begin(), s.end()), valid_fraction);
  }

  std::size_t size() const { return bytes_.size(); }
  std::size_t split() const { return split_; }
  std::vector<int> train_tokens() const { return {bytes_.begin(), bytes_.begin() + static_cast<long>(split_)}; }
  std::vector<int> valid_tokens() const { return {bytes_.begin() + static_cast<long>(split_), bytes_.end()}; }

  /// Number of non-overlapping seq_len windows in the training split.
  std::size_t windows(std::size_t seq_len) const { return seq_len ? split_ / seq_len : 0; }

  /// Window w as <bos> b_0 … b_{L−2} → b_0 … b_{L−1}.
  Example window(std::size_t w, std::size_t seq_len) const {
    if (w >= windows(seq_len)) throw std::out_of_range("Corpus: window index out of range");
    Example ex;
    ex.input.reserve(seq_len);
    ex.input.push_back(kBos);
    const std::size_t off = w * seq_len;
    for (std::size_t i = 0; i + 1 < seq_len; ++i) ex.input.push_back(bytes_[off + i]);
    for (std::size_t i = 0; i < seq_len; ++i) ex.target.push_back(bytes_[off + i]);
    return ex;
  }

  Batch sample(Rng& rng, std::size_t batch, std::size_t seq_len) const {
    const std::size_t n = windows(seq_len);
    if (n == 0)
      throw std::invalid_argument("Corpus: training split of " + std::to_string(split_) + " bytes holds no window of " +
                                  std::to_string(seq_len));
    Batch b;
    for (std::size_t i = 0; i < batch; ++i) b.push_back(window(rng.below(n), seq_len));
    return b;
  }

 private:
  std::vector<std::uint8_t> bytes_;
  std::size_t split_ = 0;
};

enum class TaskKind { copy, induction };

inline TaskKind parse_task(const std::string& s) {
  if (s == "copy") return TaskKind::copy;
  if (s == "induction") return TaskKind::induction;
  throw std::invalid_argument("unknown task '" + s + "'");
}

/// copy:      <bos> a_1 … a_n <pad> a_1 … a_n, scored on the second half.
/// induction: <bos> noise … k v … noise k → v, scored on the final v.
/// Symbols are the bytes 'a', 'a'+1, … up to `alphabet`.
struct SyntheticTask {
  TaskKind kind = TaskKind::copy;
  std::size_t length = 16;
  std::size_t alphabet = 16;

  Example sample(Rng& rng) const {
    auto sym = [&] { return static_cast<int>('a' + rng.below(alphabet)); };
    std::vector<int> seq{kBos};
    std::vector<bool> scored{false};
    if (kind == TaskKind::copy) {
      std::vector<int> a(length);
      for (auto& x : a) x = sym();
      seq.insert(seq.end(), a.begin(), a.end());
      seq.push_back(kPad);
      seq.insert(seq.end(), a.begin(), a.end());
      scored.assign(seq.size(), false);
      for (std::size_t i = length + 2; i < seq.size(); ++i) scored[i] = true;
    } else {
      for (std::size_t i = 0; i < length; ++i) seq.push_back(sym());
      const std::size_t at = 1 + rng.below(length - 2);
      const int key = seq[at];
      for (std::size_t i = 1; i < seq.size(); ++i)
        if (seq[i] == key && i != at) seq[i] = (key == 'a') ? 'b' : 'a';
      const int value = seq[at + 1];
      seq.push_back(key);
      seq.push_back(value);
      scored.assign(seq.size(), false);
      scored.back() = true;
    }
    Example ex;
    ex.input.assign(seq.begin(), seq.end() - 1);
    for (std::size_t i = 1; i < seq.size(); ++i) ex.target.push_back(scored[i] ? seq[i] : kIgnoreTarget);
    return ex;
  }

  Batch batch(Rng& rng, std::size_t n) const {
    Batch b;
    for (std::size_t i = 0; i < n; ++i) b.push_back(sample(rng));
    return b;
  }
};

// ---------------------------------------------------------------------------
// Optimization

struct TrainConfig {
  std::size_t steps = 200;
  std::size_t batch_size = 8;
  std::size_t seq_len = 64;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  double weight_decay = 0.05;
  std::size_t warmup_steps = 20;
  double grad_clip = 1.0;  // ≤ 0 disables
  Paradigm paradigm = Paradigm::parallel;
  std::size_t chunk_size = 32;
  std::size_t eval_interval = 0;  // 0 disables periodic eval
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("TrainConfig: lr must be positive");
    if (warmup_steps > steps) throw std::invalid_argument("TrainConfig: warmup_steps exceeds steps");
    if (paradigm == Paradigm::recurrent) throw std::invalid_argument("TrainConfig: train with the parallel or chunkwise paradigm");
    if (batch_size == 0 || seq_len == 0 || chunk_size == 0) throw std::invalid_argument("TrainConfig: batch_size, seq_len and chunk_size must be positive");
  }
};

/// Linear warmup from 0 at step 0 to `lr` at warmup_steps, then linear decay
/// to 0 at `steps`.
inline double lr_at(std::size_t step, const TrainConfig& c) {
  if (step >= c.steps) return 0.0;
  if (step < c.warmup_steps) return c.lr * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
  const double span = static_cast<double>(c.steps - c.warmup_steps);
  return c.lr * static_cast<double>(c.steps - step) / span;
}

template <class T>
struct AdamState {
  ModelParams<Tensor<T>> m, v;
  std::size_t step = 0;

  static AdamState zeros_like(const ModelParams<Tensor<T>>& p) {
    AdamState s;
    auto z = [](const std::string&, const Tensor<T>& t) { return Tensor<T>(t.shape()); };
    s.m = map_params<Tensor<T>>(p, z);
    s.v = map_params<Tensor<T>>(p, z);
    return s;
  }
};

/// Decoupled weight decay touches matrices with both dimensions > 1.
template <class T>
bool decays(const Tensor<T>& t) {
  return t.rank() == 2 && t.rows() > 1 && t.cols() > 1;
}

/// One AdamW update at learning rate lr. Increments opt.step.
template <class T>
void adamw_update(ModelParams<Tensor<T>>& p, const ModelParams<Tensor<T>>& g, AdamState<T>& opt, double lr,
                  const TrainConfig& c) {
  ++opt.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(opt.step));
  std::vector<Tensor<T>*> ps, ms, vs;
  std::vector<const Tensor<T>*> gs;
  for_each_param(p, [&](const std::string&, Tensor<T>& t) { ps.push_back(&t); });
  for_each_param(opt.m, [&](const std::string&, Tensor<T>& t) { ms.push_back(&t); });
  for_each_param(opt.v, [&](const std::string&, Tensor<T>& t) { vs.push_back(&t); });
  for_each_param(g, [&](const std::string&, const Tensor<T>& t) { gs.push_back(&t); });
  if (ps.size() != gs.size() || ps.size() != ms.size()) throw ShapeError("adamw_update: parameter layouts differ");
  for (std::size_t k = 0; k < ps.size(); ++k) {
    auto& w = *ps[k];
    const bool wd = decays(w) && c.weight_decay != 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = static_cast<double>((*gs[k])[i]);
      const double m = c.beta1 * static_cast<double>((*ms[k])[i]) + (1.0 - c.beta1) * gi;
      const double v = c.beta2 * static_cast<double>((*vs[k])[i]) + (1.0 - c.beta2) * gi * gi;
      (*ms[k])[i] = static_cast<T>(m);
      (*vs[k])[i] = static_cast<T>(v);
      double upd = (m / bc1) / (std::sqrt(v / bc2) + c.adam_eps);
      if (wd) upd += c.weight_decay * static_cast<double>(w[i]);
      w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * upd);
    }
  }
}

template <class T>
double global_norm(const ModelParams<Tensor<T>>& g) {
  double s = 0;
  for_each_param(g, [&](const std::string&, const Tensor<T>& t) {
    for (T v : t.data()) s += static_cast<double>(v) * static_cast<double>(v);
  });
  return std::sqrt(s);
}

template <class T>
void scale_all(ModelParams<Tensor<T>>& g, double f) {
  for_each_param(g, [&](const std::string&, Tensor<T>& t) {
    for (auto& v : t.data()) v = static_cast<T>(static_cast<double>(v) * f);
  });
}

/// Mean next-token loss over every scored target in the batch, as a graph.
template <class X>
X batch_loss(const Batch& batch, const ModelConfig& cfg, const ModelParams<X>& p, Paradigm paradigm,
             std::size_t chunk_size, const ForwardOptions& opt = {}) {
  using T = scalar_of<X>;
  std::size_t total = 0;
  std::vector<std::size_t> counts;
  for (const auto& ex : batch) {
    if (ex.input.size() != ex.target.size()) throw ShapeError("batch_loss: input and target lengths differ");
    std::size_t c = 0;
    for (int t : ex.target) c += (t != kIgnoreTarget);
    counts.push_back(c);
    total += c;
  }
  if (total == 0) throw ShapeError("batch_loss: batch has no scored targets");
  X loss;
  bool first = true;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (counts[i] == 0) continue;
    X logits = model_forward<X>(std::span<const int>(batch[i].input), cfg, p, paradigm, chunk_size, nullptr, opt);
    X l = scale(cross_entropy(logits, std::span<const int>(batch[i].target)), static_cast<T>(static_cast<double>(counts[i]) / static_cast<double>(total)));
    loss = first ? l : add(loss, l);
    first = false;
  }
  return loss;
}

template <class T>
struct LossAndGrad {
  double loss = 0;
  ModelParams<Tensor<T>> grad;
};

template <class T>
LossAndGrad<T> loss_and_grad(const Batch& batch, const ModelConfig& cfg, const ModelParams<Tensor<T>>& p,
                             Paradigm paradigm, std::size_t chunk_size, const ForwardOptions& opt = {}) {
  auto leaves = as_leaves(p);
  Var<T> loss = batch_loss(batch, cfg, leaves, paradigm, chunk_size, opt);
  backward(loss);
  return {static_cast<double>(loss.value().item()), grads_of(leaves)};
}

struct StepStats {
  std::size_t step = 0;  // 1-based update index
  double loss = 0;
  double lr = 0;
  double grad_norm = 0;  // before clipping
  double tokens_per_sec = 0;
};

/// Forward, backward, clip and AdamW update. Update k uses lr_at(k).
template <class T>
StepStats train_step(ModelParams<Tensor<T>>& p, AdamState<T>& opt, const Batch& batch, const ModelConfig& cfg,
                     const TrainConfig& tc, Rng* dropout_rng = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  ForwardOptions fo;
  fo.dropout_rng = dropout_rng;
  auto lg = loss_and_grad<T>(batch, cfg, p, tc.paradigm, tc.chunk_size, fo);
  if (!std::isfinite(lg.loss))
    throw std::runtime_error("train_step: non-finite loss " + std::to_string(lg.loss) + " at update " + std::to_string(opt.step + 1));
  StepStats s;
  s.loss = lg.loss;
  s.grad_norm = global_norm(lg.grad);
  if (!std::isfinite(s.grad_norm)) throw std::runtime_error("train_step: non-finite gradient norm at update " + std::to_string(opt.step + 1));
  if (tc.grad_clip > 0.0 && s.grad_norm > tc.grad_clip) scale_all(lg.grad, tc.grad_clip / s.grad_norm);
  s.step = opt.step + 1;
  s.lr = lr_at(s.step, tc);
  adamw_update(p, lg.grad, opt, s.lr, tc);
  std::size_t toks = 0;
  for (const auto& ex : batch) toks += ex.input.size();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  s.tokens_per_sec = secs > 0 ? static_cast<double>(toks) / secs : 0.0;
  return s;
}

inline constexpr const char* kMetricsSchema = "# schema: retnet.train_metrics/1";

inline void write_metrics_header(std::ostream& os) { os << kMetricsSchema << "\nstep,loss,lr,tokens_per_sec,grad_norm\n"; }

inline void write_metrics_row(std::ostream& os, const StepStats& s) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.6g,%.9g\n", s.step, s.loss, s.lr, s.tokens_per_sec, s.grad_norm);
  os << buf;
}

using BatchSource = std::function<Batch(Rng&)>;

/// Runs tc.steps updates; `on_step` sees every StepStats.
template <class T>
std::vector<StepStats> train(ModelParams<Tensor<T>>& p, AdamState<T>& opt, const ModelConfig& cfg, const TrainConfig& tc,
                             const BatchSource& source, const std::function<void(const StepStats&)>& on_step = {}) {
  tc.validate();
  cfg.validate();
  Rng data_rng(tc.seed ^ 0x9e3779b97f4a7c15ULL);
  Rng drop_rng(tc.seed ^ 0xd1b54a32d192ed03ULL);
  std::vector<StepStats> log;
  while (opt.step < tc.steps) {
    const Batch b = source(data_rng);
    auto s = train_step(p, opt, b, cfg, tc, cfg.dropout > 0 ? &drop_rng : nullptr);
    log.push_back(s);
    if (on_step) on_step(s);
  }
  return log;
}

/// Teacher-forced exact-token accuracy over scored targets.
template <class T>
double token_accuracy(const Batch& batch, const ModelConfig& cfg, const ModelParams<Tensor<T>>& p) {
  std::size_t hit = 0, n = 0;
  for (const auto& ex : batch) {
    auto logits = model_forward(std::span<const int>(ex.input), cfg, p, Paradigm::parallel, cfg.chunk_size);
    for (std::size_t i = 0; i < ex.target.size(); ++i) {
      if (ex.target[i] == kIgnoreTarget) continue;
      ++n;
      hit += static_cast<int>(argmax<T>(std::as_const(logits).row_span(i))) == ex.target[i];
    }
  }
  return n ? static_cast<double>(hit) / static_cast<double>(n) : 0.0;
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradcheckReport {
  std::string arch;
  std::string paradigm;
  std::size_t checked = 0;
  double max_rel_error = 0;
  std::string worst;  // "name[index]"
  double tolerance = 1e-5;
  bool pass() const { return max_rel_error <= tolerance; }
};

/// fp64 reverse-mode gradients vs central differences on every parameter
/// (or `subsample` seeded coordinates per tensor when nonzero). The
/// difference quotient is evaluated in extended precision: at step 1e-5
/// fp64 rounding of the loss alone leaves ~1e-10 of noise, which exceeds
/// the tolerance on coordinates whose gradient is below ~1e-5.
inline GradcheckReport gradcheck(const ModelConfig& cfg, const ModelParams<Tensor<double>>& p, const Batch& batch,
                                 Paradigm paradigm, std::size_t chunk_size, double tolerance = 1e-5,
                                 double step = 1e-5, std::size_t subsample = 0, std::uint64_t seed = 0) {
  using E = long double;
  GradcheckReport r;
  r.arch = to_string(cfg.arch);
  r.paradigm = to_string(paradigm);
  r.tolerance = tolerance;
  const auto analytic = loss_and_grad<double>(batch, cfg, p, paradigm, chunk_size).grad;
  auto work = map_params<Tensor<E>>(p, [](const std::string&, const Tensor<double>& t) { return t.cast<E>(); });
  auto eval = [&] { return batch_loss<Tensor<E>>(batch, cfg, work, paradigm, chunk_size).item(); };

  std::vector<std::pair<std::string, Tensor<E>*>> slots;
  for_each_param(work, [&](const std::string& n, Tensor<E>& t) { slots.emplace_back(n, &t); });
  std::vector<const Tensor<double>*> gs;
  for_each_param(analytic, [&](const std::string&, const Tensor<double>& t) { gs.push_back(&t); });
  Rng rng(seed);
  for (std::size_t k = 0; k < slots.size(); ++k) {
    auto& t = *slots[k].second;
    std::vector<std::size_t> idx;
    if (subsample == 0 || subsample >= t.size()) {
      for (std::size_t i = 0; i < t.size(); ++i) idx.push_back(i);
    } else {
      for (std::size_t i = 0; i < subsample; ++i) idx.push_back(rng.below(t.size()));
    }
    for (std::size_t i : idx) {
      const E orig = t[i];
      t[i] = orig + E(step);
      const E fp = eval();
      t[i] = orig - E(step);
      const E fm = eval();
      t[i] = orig;
      const double e = relative_error((*gs[k])[i], static_cast<double>((fp - fm) / (E(2) * E(step))));
      ++r.checked;
      if (e > r.max_rel_error) {
        r.max_rel_error = e;
        r.worst = slots[k].first + "[" + std::to_string(i) + "]";
      }
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation

struct PerplexityRow {
  std::size_t context = 0;
  double nll = 0;  // mean nats per scored token
  double perplexity = 0;
  std::size_t windows = 0;
  std::size_t scored = 0;
};

struct EvalProtocol {
  std::size_t last_k = 32;    // scored tokens per window
  std::size_t windows = 256;  // windows per context length
};

/// For each context length c, the same end positions e_1 … e_W are used;
/// the model reads <bos> t_{e−c} … t_{e−2}, and only the predictions of
/// the final `last_k` tokens t_{e−k} … t_{e−1} are scored. Longer contexts
/// therefore condition every scored token on strictly more history.
template <class T>
std::vector<PerplexityRow> eval_perplexity(const ModelConfig& cfg, const ModelParams<Tensor<T>>& p,
                                           std::span<const int> tokens, std::span<const std::size_t> contexts,
                                           const EvalProtocol& proto = {}) {
  if (contexts.empty()) throw std::invalid_argument("eval_perplexity: no context lengths given");
  if (proto.last_k == 0 || proto.windows == 0) throw std::invalid_argument("eval_perplexity: last_k and windows must be positive");
  const std::size_t max_ctx = *std::max_element(contexts.begin(), contexts.end());
  for (std::size_t c : contexts)
    if (c < proto.last_k)
      throw std::invalid_argument("eval_perplexity: context " + std::to_string(c) + " shorter than last_k " + std::to_string(proto.last_k));
  if (tokens.size() < max_ctx)
    throw std::invalid_argument("eval_perplexity: slice of " + std::to_string(tokens.size()) + " tokens is shorter than context " + std::to_string(max_ctx));

  const std::size_t room = tokens.size() - max_ctx + 1;  // admissible end positions
  const std::size_t w = std::min(proto.windows, room);
  std::vector<std::size_t> ends;
  for (std::size_t j = 0; j < w; ++j) ends.push_back(max_ctx + (w == 1 ? 0 : j * (room - 1) / (w - 1)));

  std::vector<PerplexityRow> out;
  for (std::size_t c : contexts) {
    double total = 0;
    std::size_t scored = 0;
    for (std::size_t e : ends) {
      std::vector<int> in{kBos};
      in.insert(in.end(), tokens.begin() + static_cast<long>(e - c), tokens.begin() + static_cast<long>(e - 1));
      std::vector<int> tg(c, kIgnoreTarget);
      for (std::size_t i = c - proto.last_k; i < c; ++i) tg[i] = tokens[e - c + i];
      auto logits = model_forward(std::span<const int>(in), cfg, p, cfg.paradigm == Paradigm::recurrent ? Paradigm::chunkwise : cfg.paradigm,
                                  cfg.chunk_size);
      total += static_cast<double>(cross_entropy(logits, std::span<const int>(tg)).item()) * static_cast<double>(proto.last_k);
      scored += proto.last_k;
    }
    PerplexityRow row;
    row.context = c;
    row.windows = ends.size();
    row.scored = scored;
    row.nll = total / static_cast<double>(scored);
    row.perplexity = std::exp(row.nll);
    out.push_back(row);
  }
  return out;
}

}  // namespace retnet
