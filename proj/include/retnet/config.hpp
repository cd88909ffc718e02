#pragma once

// INI run configuration. Every key is optional; omitted keys keep the
// defaults of the structs below. Unknown sections or keys are rejected so a
// typo cannot silently fall back to a default. See docs/config.md.

#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "retnet/train.hpp"

namespace retnet {

struct DataConfig {
  std::string task = "copy";  // copy | induction | corpus
  std::string corpus;         // byte file, used when task = corpus
  double valid_fraction = 0.1;
  std::size_t task_length = 16;
  std::size_t task_alphabet = 16;
};

struct EvalConfig {
  std::vector<std::size_t> contexts{64, 128, 256};
  std::size_t last_k = 32;
  std::size_t windows = 256;
  std::string split = "valid";  // valid | train
  std::string checkpoint;       // empty: <out>/model.ckpt
};

struct BenchConfig {
  std::vector<std::size_t> lengths{128, 1024, 2048, 4096, 8192};
  std::vector<std::size_t> batch_sizes{1};
  std::size_t d_model = 256;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t repeats = 5;          // timed samples per cell
  std::size_t warmup = 3;           // untimed steps before each sample
  std::size_t steps_per_sample = 8; // decode steps averaged into one sample
  std::size_t budget_elements = std::size_t{1} << 28;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  EvalConfig eval;
  BenchConfig bench;
};

namespace detail {

inline std::vector<std::size_t> parse_size_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
    if (b == std::string::npos) continue;
    out.push_back(std::stoull(item.substr(b, e - b + 1)));
  }
  if (out.empty()) throw std::invalid_argument("config: empty list '" + s + "'");
  return out;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw std::invalid_argument("config: '" + s + "' is not a boolean");
}

class Section {
 public:
  Section(const boost::property_tree::ptree* t, std::string name) : t_(t), name_(std::move(name)) {}

  template <class F>
  void key(const std::string& k, F&& apply) {
    seen_.insert(k);
    if (!t_) return;
    if (auto v = t_->get_optional<std::string>(boost::property_tree::ptree::path_type(k, '\0'))) {
      try {
        apply(*v);
      } catch (const std::exception& e) {
        throw std::invalid_argument("config: [" + name_ + "] " + k + " = '" + *v + "': " + e.what());
      }
    }
  }

  void size(const std::string& k, std::size_t& dst) { key(k, [&](const std::string& v) { dst = std::stoull(v); }); }
  void u64(const std::string& k, std::uint64_t& dst) { key(k, [&](const std::string& v) { dst = std::stoull(v); }); }
  void real(const std::string& k, double& dst) { key(k, [&](const std::string& v) { dst = std::stod(v); }); }
  void flag(const std::string& k, bool& dst) { key(k, [&](const std::string& v) { dst = parse_bool(v); }); }
  void text(const std::string& k, std::string& dst) { key(k, [&](const std::string& v) { dst = v; }); }
  void list(const std::string& k, std::vector<std::size_t>& dst) { key(k, [&](const std::string& v) { dst = parse_size_list(v); }); }

  void reject_unknown() const {
    if (!t_) return;
    for (const auto& kv : *t_)
      if (!seen_.count(kv.first)) throw std::invalid_argument("config: unknown key '" + kv.first + "' in [" + name_ + "]");
  }

 private:
  const boost::property_tree::ptree* t_;
  std::string name_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline RunConfig parse_config(const boost::property_tree::ptree& root) {
  static const std::set<std::string> known{"model", "train", "data", "eval", "bench"};
  for (const auto& kv : root)
    if (!known.count(kv.first)) throw std::invalid_argument("config: unknown section [" + kv.first + "]");
  auto child = [&](const char* n) -> const boost::property_tree::ptree* {
    auto c = root.get_child_optional(n);
    return c ? &*c : nullptr;
  };

  RunConfig rc;
  {
    auto& m = rc.model;
    detail::Section s(child("model"), "model");
    s.key("arch", [&](const std::string& v) { m.arch = parse_arch(v); });
    s.size("layers", m.layers);
    s.size("d_model", m.d_model);
    s.size("heads", m.heads);
    s.size("vocab_size", m.vocab_size);
    s.size("ffn_dim", m.ffn_dim);
    s.key("paradigm", [&](const std::string& v) { m.paradigm = parse_paradigm(v); });
    s.size("chunk_size", m.chunk_size);
    s.key("gamma_variant", [&](const std::string& v) { m.gamma_variant = parse_gamma_variant(v); });
    s.flag("no_gate", m.flags.no_gate);
    s.flag("no_groupnorm", m.flags.no_groupnorm);
    s.flag("no_decay", m.flags.no_decay);
    s.flag("single_scale", m.flags.single_scale);
    s.key("head_dim", [&](const std::string& v) {
      const auto hd = std::stoull(v);
      if (hd) m.flags.head_dim_override = hd;
      else m.flags.head_dim_override.reset();
    });
    s.flag("scale_qk", m.norm.scale_qk);
    s.flag("normalize_D", m.norm.normalize_D);
    s.flag("clamp_row_sum", m.norm.clamp_row_sum);
    s.flag("groupnorm_affine", m.groupnorm_affine);
    s.flag("tie_embeddings", m.tie_embeddings);
    s.real("dropout", m.dropout);
    s.real("init_std", m.init_std);
    s.real("rotation_base", m.rotation_base);
    s.key("precision", [&](const std::string& v) { m.precision = parse_precision(v); });
    s.u64("seed", m.seed);
    s.reject_unknown();
  }
  {
    auto& t = rc.train;
    detail::Section s(child("train"), "train");
    s.size("steps", t.steps);
    s.size("batch_size", t.batch_size);
    s.size("seq_len", t.seq_len);
    s.real("lr", t.lr);
    s.real("beta1", t.beta1);
    s.real("beta2", t.beta2);
    s.real("adam_eps", t.adam_eps);
    s.real("weight_decay", t.weight_decay);
    s.size("warmup_steps", t.warmup_steps);
    s.real("grad_clip", t.grad_clip);
    s.size("eval_interval", t.eval_interval);
    s.u64("seed", t.seed);
    s.reject_unknown();
  }
  {
    auto& d = rc.data;
    detail::Section s(child("data"), "data");
    s.key("task", [&](const std::string& v) {
      if (v != "corpus") parse_task(v);
      d.task = v;
    });
    s.text("corpus", d.corpus);
    s.real("valid_fraction", d.valid_fraction);
    s.size("task_length", d.task_length);
    s.size("task_alphabet", d.task_alphabet);
    s.reject_unknown();
  }
  {
    auto& e = rc.eval;
    detail::Section s(child("eval"), "eval");
    s.list("contexts", e.contexts);
    s.size("last_k", e.last_k);
    s.size("windows", e.windows);
    s.key("split", [&](const std::string& v) {
      if (v != "valid" && v != "train") throw std::invalid_argument("expected valid or train");
      e.split = v;
    });
    s.text("checkpoint", e.checkpoint);
    s.reject_unknown();
  }
  {
    auto& b = rc.bench;
    detail::Section s(child("bench"), "bench");
    s.list("lengths", b.lengths);
    s.list("batch_sizes", b.batch_sizes);
    s.size("d_model", b.d_model);
    s.size("layers", b.layers);
    s.size("heads", b.heads);
    s.size("repeats", b.repeats);
    s.size("warmup", b.warmup);
    s.size("steps_per_sample", b.steps_per_sample);
    s.size("budget_elements", b.budget_elements);
    s.reject_unknown();
  }
  if (rc.data.task == "corpus" && rc.data.corpus.empty()) throw std::invalid_argument("config: [data] task = corpus needs a corpus path");
  rc.train.paradigm = rc.model.paradigm == Paradigm::recurrent ? Paradigm::chunkwise : rc.model.paradigm;
  rc.train.chunk_size = rc.model.chunk_size;
  return rc;
}

inline RunConfig load_config(const std::string& path) {
  boost::property_tree::ptree root;
  try {
    boost::property_tree::ini_parser::read_ini(path, root);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw std::invalid_argument("config: " + std::string(e.what()));
  }
  return parse_config(root);
}

inline RunConfig config_from_string(const std::string& ini) {
  boost::property_tree::ptree root;
  std::istringstream in(ini);
  boost::property_tree::ini_parser::read_ini(in, root);
  return parse_config(root);
}

/// Builds the batch source described by `d` for sequences of `seq_len`.
inline BatchSource make_batch_source(const DataConfig& d, const TrainConfig& tc, const Corpus* corpus) {
  if (d.task == "corpus") {
    if (!corpus) throw std::invalid_argument("make_batch_source: corpus task without a corpus");
    return [corpus, tc](Rng& rng) { return corpus->sample(rng, tc.batch_size, tc.seq_len); };
  }
  SyntheticTask task;
  task.kind = parse_task(d.task);
  task.length = d.task_length;
  task.alphabet = d.task_alphabet;
  return [task, tc](Rng& rng) { return task.batch(rng, tc.batch_size); };
}

}  // namespace retnet
