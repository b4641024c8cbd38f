// SPDX-License-Identifier: Apache-2.0
#include "sgdll/harness.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include "json.hpp"
#include <spdlog/spdlog.h>

namespace sgdll {

namespace fs = std::filesystem;
namespace pt = boost::property_tree;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " is not a number: " + v);
  }
}

long long to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long x = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " is not an integer: " + v);
  }
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  const long long x = to_int(key, v);
  if (x < 0) throw ConfigError("config: " + key + " must be >= 0");
  return static_cast<std::uint64_t>(x);
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: " + key + " is not a boolean: " + v);
}

template <typename T, typename F>
std::vector<T> to_list(const std::string& v, F f) {
  std::vector<T> out;
  for (const auto& x : split_list(v)) out.push_back(f(x));
  return out;
}

/// Typed key dispatch for one section; unknown keys raise.
class Section {
 public:
  Section(std::string name, const pt::ptree& tree) : name_(std::move(name)), tree_(tree) {}

  template <typename F>
  void on(const std::string& key, F f) {
    handlers_[key] = [f](const std::string& k, const std::string& v) { f(k, v); };
  }

  void run() {
    for (const auto& [key, node] : tree_) {
      const auto it = handlers_.find(key);
      if (it == handlers_.end()) throw ConfigError("config: unknown key " + name_ + "." + key);
      it->second(name_ + "." + key, trim(node.get_value<std::string>()));
    }
  }

 private:
  std::string name_;
  const pt::ptree& tree_;
  std::map<std::string, std::function<void(const std::string&, const std::string&)>> handlers_;
};

std::string optimizer_key(OptimizerKind k) { return "lr_" + std::string(to_string(k)); }

std::string join_reals(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_real(v[i]);
  return s;
}

template <typename T>
std::string join_ints(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  optim.validate();
  data.gen.validate();
  theory.validate();
  if (!(data.holdout_fraction > 0.0 && data.holdout_fraction < 1.0))
    throw ConfigError("config: data.holdout_fraction must lie in (0, 1)");
  if (!data.corpus_path.empty() && !data.text_path.empty())
    throw ConfigError("config: set at most one of data.corpus_path and data.text_path");
  for (const auto& p : {data.corpus_path, data.text_path})
    if (!p.empty() && !fs::exists(p)) throw ConfigError("config: no such file " + p);
  if (train.steps < 1) throw ConfigError("config: train.steps must be positive");
  if (train.batch < 1) throw ConfigError("config: train.batch must be positive");
  if (train.seeds.empty()) throw ConfigError("config: train.seeds must not be empty");
  if (train.eval_count < 1) throw ConfigError("config: train.eval_count must be positive");
  if (train.eval_windows < 1) throw ConfigError("config: train.eval_windows must be positive");
  if (train.token_stats_every < 1) throw ConfigError("config: train.token_stats_every must be positive");
  if (!(train.spike_k > 1.0)) throw ConfigError("config: train.spike_k must exceed 1");
  if (train.spike_window < 8) throw ConfigError("config: train.spike_window must be >= 8");
  if (!(train.divergence_factor > 1.0)) throw ConfigError("config: train.divergence_factor must exceed 1");
  if (train.divergence_patience < 1) throw ConfigError("config: train.divergence_patience must be positive");
  for (double x : sweep.lr)
    if (!(x >= 0.0)) throw ConfigError("config: sweep.lr values must be >= 0");
  for (const auto& [k, v] : sweep.lr_by_optimizer)
    for (double x : v)
      if (!(x >= 0.0)) throw ConfigError("config: sweep." + optimizer_key(k) + " values must be >= 0");
  for (int b : sweep.batch)
    if (b < 1) throw ConfigError("config: sweep.batch values must be positive");
  if (sweep.parallel < 1) throw ConfigError("config: sweep.parallel must be positive");
  if (out_dir.empty()) throw ConfigError("config: output.dir must not be empty");
}

RunConfig parse_config(const std::string& text) {
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  RunConfig c;
  auto dbl = [](double& x) { return [&x](const std::string& k, const std::string& v) { x = to_double(k, v); }; };
  auto intg = [](int& x) {
    return [&x](const std::string& k, const std::string& v) { x = static_cast<int>(to_int(k, v)); };
  };
  auto u64 = [](std::uint64_t& x) { return [&x](const std::string& k, const std::string& v) { x = to_u64(k, v); }; };
  auto boolean = [](bool& x) { return [&x](const std::string& k, const std::string& v) { x = to_bool(k, v); }; };
  auto str = [](std::string& x) { return [&x](const std::string&, const std::string& v) { x = v; }; };
  auto size = [](std::size_t& x) {
    return [&x](const std::string& k, const std::string& v) { x = static_cast<std::size_t>(to_u64(k, v)); };
  };

  for (const auto& [name, sec] : tree) {
    if (!sec.data().empty()) throw ConfigError("config: key outside a section: " + name);
    Section s(name, sec);
    if (name == "model") {
      auto& m = c.model;
      s.on("kind", [&m](const std::string&, const std::string& v) { m.kind = parse_model_kind(v); });
      s.on("vocab", intg(m.vocab));
      s.on("width", intg(m.width));
      s.on("depth", intg(m.depth));
      s.on("heads", intg(m.heads));
      s.on("seq_len", intg(m.seq_len));
      s.on("tie_embeddings", boolean(m.tie_embeddings));
      s.on("activation", [&m](const std::string&, const std::string& v) { m.activation = parse_activation(v); });
      s.on("init_std", dbl(m.init_std));
      s.on("feature_seed", u64(m.feature_seed));
    } else if (name == "data") {
      auto& d = c.data;
      s.on("corpus_path", str(d.corpus_path));
      s.on("text_path", str(d.text_path));
      s.on("zipf_s", dbl(d.gen.zipf_s));
      s.on("markov_order", intg(d.gen.markov_order));
      s.on("length", size(d.gen.length));
      s.on("seed", u64(d.gen.seed));
      s.on("local_mix", dbl(d.gen.local_mix));
      s.on("local_width", intg(d.gen.local_width));
      s.on("holdout_fraction", dbl(d.holdout_fraction));
    } else if (name == "optim") {
      auto& o = c.optim;
      s.on("kind", [&o](const std::string&, const std::string& v) { o.kind = parse_optimizer_kind(v); });
      s.on("lr", dbl(o.lr));
      s.on("beta", dbl(o.beta));
      s.on("beta1", dbl(o.beta1));
      s.on("beta2", dbl(o.beta2));
      s.on("eps", dbl(o.eps));
      s.on("bias_correction", boolean(o.bias_correction));
      s.on("tau", dbl(o.tau));
      s.on("delta", dbl(o.delta));
      s.on("warmup_fraction", dbl(o.warmup_fraction));
      s.on("final_fraction", dbl(o.final_fraction));
    } else if (name == "train") {
      auto& t = c.train;
      s.on("steps", intg(t.steps));
      s.on("batch", intg(t.batch));
      s.on("seeds", [&t](const std::string& k, const std::string& v) {
        t.seeds = to_list<std::uint64_t>(v, [&k](const std::string& x) { return to_u64(k, x); });
      });
      s.on("precision", [&t](const std::string& k, const std::string& v) {
        if (v == "float32") t.precision = Precision::float32;
        else if (v == "float64") t.precision = Precision::float64;
        else throw ConfigError("config: " + k + " must be float32 or float64");
      });
      s.on("eval_count", intg(t.eval_count));
      s.on("eval_windows", size(t.eval_windows));
      s.on("token_stats_every", intg(t.token_stats_every));
      s.on("spike_k", dbl(t.spike_k));
      s.on("spike_window", intg(t.spike_window));
      s.on("divergence_factor", dbl(t.divergence_factor));
      s.on("divergence_patience", intg(t.divergence_patience));
    } else if (name == "sweep") {
      auto& w = c.sweep;
      s.on("lr", [&w](const std::string& k, const std::string& v) {
        w.lr = to_list<double>(v, [&k](const std::string& x) { return to_double(k, x); });
      });
      for (auto kind : {OptimizerKind::sgd, OptimizerKind::msgd, OptimizerKind::adam, OptimizerKind::sgdll})
        s.on(optimizer_key(kind), [&w, kind](const std::string& k, const std::string& v) {
          w.lr_by_optimizer[kind] = to_list<double>(v, [&k](const std::string& x) { return to_double(k, x); });
        });
      s.on("batch", [&w](const std::string& k, const std::string& v) {
        w.batch = to_list<int>(v, [&k](const std::string& x) { return static_cast<int>(to_int(k, x)); });
      });
      s.on("optimizer", [&w](const std::string&, const std::string& v) {
        w.optimizer = to_list<OptimizerKind>(v, [](const std::string& x) { return parse_optimizer_kind(x); });
      });
      s.on("seed", [&w](const std::string& k, const std::string& v) {
        w.seed = to_list<std::uint64_t>(v, [&k](const std::string& x) { return to_u64(k, x); });
      });
      s.on("parallel", intg(w.parallel));
    } else if (name == "theory") {
      auto& t = c.theory;
      s.on("seed", u64(t.seed));
      s.on("output_worlds", intg(t.output_worlds));
      s.on("intermediate_worlds", intg(t.intermediate_worlds));
      s.on("n_mc", size(t.n_mc));
      s.on("term_samples", size(t.term_samples));
      s.on("class_samples", size(t.class_samples));
      s.on("lemma_cases", intg(t.lemma_cases));
      s.on("lemma_n_mc", size(t.lemma_n_mc));
      s.on("theorem2_cases", intg(t.theorem2_cases));
      s.on("theorem2_n_mc", size(t.theorem2_n_mc));
      s.on("scaling_B", [&t](const std::string& k, const std::string& v) {
        t.scaling_B = to_list<int>(v, [&k](const std::string& x) { return static_cast<int>(to_int(k, x)); });
      });
      s.on("scaling_n_mc", size(t.scaling_n_mc));
      s.on("fit_samples", intg(t.fit_samples));
      s.on("fit_steps", intg(t.fit_steps));
    } else if (name == "output") {
      s.on("dir", str(c.out_dir));
    } else {
      throw ConfigError("config: unknown section [" + name + "]");
    }
    s.run();
  }
  c.data.gen.vocab = c.model.vocab;
  c.validate();
  return c;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  std::stringstream s;
  s << in.rdbuf();
  return parse_config(s.str());
}

std::string to_ini(const RunConfig& c) {
  std::ostringstream o;
  const auto b = [](bool x) { return x ? "true" : "false"; };
  const auto& m = c.model;
  o << "[model]\nkind = " << to_string(m.kind) << "\nvocab = " << m.vocab << "\nwidth = " << m.width
    << "\ndepth = " << m.depth << "\nheads = " << m.heads << "\nseq_len = " << m.seq_len
    << "\ntie_embeddings = " << b(m.tie_embeddings) << "\nactivation = " << to_string(m.activation)
    << "\ninit_std = " << format_real(m.init_std) << "\nfeature_seed = " << m.feature_seed << "\n\n";
  const auto& d = c.data;
  o << "[data]\n";
  if (!d.corpus_path.empty()) o << "corpus_path = " << d.corpus_path << '\n';
  if (!d.text_path.empty()) o << "text_path = " << d.text_path << '\n';
  o << "zipf_s = " << format_real(d.gen.zipf_s) << "\nmarkov_order = " << d.gen.markov_order
    << "\nlength = " << d.gen.length << "\nseed = " << d.gen.seed << "\nlocal_mix = " << format_real(d.gen.local_mix)
    << "\nlocal_width = " << d.gen.local_width << "\nholdout_fraction = " << format_real(d.holdout_fraction)
    << "\n\n";
  const auto& p = c.optim;
  o << "[optim]\nkind = " << to_string(p.kind) << "\nlr = " << format_real(p.lr) << "\nbeta = " << format_real(p.beta)
    << "\nbeta1 = " << format_real(p.beta1) << "\nbeta2 = " << format_real(p.beta2) << "\neps = " << format_real(p.eps)
    << "\nbias_correction = " << b(p.bias_correction) << "\ntau = " << format_real(p.tau)
    << "\ndelta = " << format_real(p.delta) << "\nwarmup_fraction = " << format_real(p.warmup_fraction)
    << "\nfinal_fraction = " << format_real(p.final_fraction) << "\n\n";
  const auto& t = c.train;
  o << "[train]\nsteps = " << t.steps << "\nbatch = " << t.batch << "\nseeds = " << join_ints(t.seeds)
    << "\nprecision = " << (t.precision == Precision::float32 ? "float32" : "float64")
    << "\neval_count = " << t.eval_count << "\neval_windows = " << t.eval_windows
    << "\ntoken_stats_every = " << t.token_stats_every << "\nspike_k = " << format_real(t.spike_k)
    << "\nspike_window = " << t.spike_window << "\ndivergence_factor = " << format_real(t.divergence_factor)
    << "\ndivergence_patience = " << t.divergence_patience << "\n\n";
  const auto& w = c.sweep;
  o << "[sweep]\n";
  if (!w.lr.empty()) o << "lr = " << join_reals(w.lr) << '\n';
  for (const auto& [k, v] : w.lr_by_optimizer) o << optimizer_key(k) << " = " << join_reals(v) << '\n';
  if (!w.batch.empty()) o << "batch = " << join_ints(w.batch) << '\n';
  if (!w.optimizer.empty()) {
    o << "optimizer = ";
    for (std::size_t i = 0; i < w.optimizer.size(); ++i) o << (i ? "," : "") << to_string(w.optimizer[i]);
    o << '\n';
  }
  if (!w.seed.empty()) o << "seed = " << join_ints(w.seed) << '\n';
  o << "parallel = " << w.parallel << "\n\n";
  const auto& h = c.theory;
  o << "[theory]\nseed = " << h.seed << "\noutput_worlds = " << h.output_worlds
    << "\nintermediate_worlds = " << h.intermediate_worlds << "\nn_mc = " << h.n_mc
    << "\nterm_samples = " << h.term_samples << "\nclass_samples = " << h.class_samples
    << "\nlemma_cases = " << h.lemma_cases << "\nlemma_n_mc = " << h.lemma_n_mc
    << "\ntheorem2_cases = " << h.theorem2_cases << "\ntheorem2_n_mc = " << h.theorem2_n_mc
    << "\nscaling_B = " << join_ints(h.scaling_B) << "\nscaling_n_mc = " << h.scaling_n_mc
    << "\nfit_samples = " << h.fit_samples << "\nfit_steps = " << h.fit_steps << "\n\n";
  o << "[output]\ndir = " << c.out_dir << '\n';
  return o.str();
}

std::string config_hash(const RunConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : to_ini(c)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream o;
  o << std::hex << std::setw(16) << std::setfill('0') << h;
  return o.str();
}

std::shared_ptr<const TokenSeq> corpus_for(const DataConfig& d, const ModelConfig& m) {
  static std::mutex mu;
  static std::map<std::string, std::shared_ptr<const TokenSeq>> cache;
  std::ostringstream key;
  key << d.corpus_path << '|' << d.text_path << '|' << m.vocab << '|' << format_real(d.gen.zipf_s) << '|'
      << d.gen.markov_order << '|' << d.gen.length << '|' << d.gen.seed << '|' << format_real(d.gen.local_mix) << '|'
      << d.gen.local_width;
  std::lock_guard lock(mu);
  if (auto it = cache.find(key.str()); it != cache.end()) return it->second;
  TokenSeq seq;
  if (!d.corpus_path.empty()) {
    seq = load_corpus(d.corpus_path);
  } else if (!d.text_path.empty()) {
    seq = char_ingest(d.text_path).tokens;
  } else {
    CorpusConfig g = d.gen;
    g.vocab = m.vocab;
    seq = gen_corpus(g);
  }
  for (auto t : seq)
    if (t < 0 || t >= m.vocab) throw ConfigError("corpus: token id " + std::to_string(t) + " outside model vocabulary");
  if (seq.size() < 4 * static_cast<std::size_t>(m.seq_len + 1))
    throw ConfigError("corpus: too short for seq_len " + std::to_string(m.seq_len));
  auto ptr = std::make_shared<const TokenSeq>(std::move(seq));
  cache.emplace(key.str(), ptr);
  return ptr;
}

namespace {

template <typename S>
double eval_loss(const ParamSet<S>& params, const ModelConfig& m, const std::vector<Batch>& batches) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& b : batches) {
    const auto r = forward_loss(params, m, b);
    sum += r.loss * static_cast<double>(b.positions());
    n += b.positions();
  }
  return n ? sum / static_cast<double>(n) : kNaN;
}

template <typename S>
bool params_finite(const ParamSet<S>& p) {
  for (std::size_t i = 0; i < p.size(); ++i)
    if (!p[i].allFinite()) return false;
  return true;
}

template <typename S>
RunResult train_impl(const RunConfig& cfg, std::uint64_t seed, const fs::path& out_dir, bool keep_params) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& m = cfg.model;
  const auto& tc = cfg.train;
  const auto corpus = corpus_for(cfg.data, m);
  const auto split = split_holdout(*corpus, cfg.data.holdout_fraction);
  const auto freqs = freq_table(split.train, m.vocab);
  const auto val = sequential_batches(split.valid, tc.batch, m.seq_len, tc.eval_windows);

  auto params = init_params<S>(m, Rng(seed, 1));
  const auto params0 = params;
  Optimizer<S> opt(cfg.optim);
  const Schedule sched{cfg.optim.lr, tc.steps, cfg.optim.warmup_fraction, cfg.optim.final_fraction};
  Rng data_rng(seed, 2);
  const auto& layout = params.layout();
  std::vector<std::string> names;
  for (const auto& b : layout.blocks()) names.push_back(b.name);
  SpikeDetector spikes(names, tc.spike_k, tc.spike_window);
  std::unique_ptr<MetricsWriter> writer;
  if (!out_dir.empty()) writer = std::make_unique<MetricsWriter>(out_dir, layout);
  const int eval_every = std::max(1, tc.steps / tc.eval_count);
  const bool is_sgdll = cfg.optim.kind == OptimizerKind::sgdll;

  RunResult res;
  auto& sum = res.summary;
  sum.optimizer = std::string(to_string(cfg.optim.kind));
  sum.lr = cfg.optim.lr;
  sum.batch = tc.batch;
  sum.seed = seed;
  sum.config_hash = config_hash(cfg);
  sum.val_loss = kNaN;
  sum.best_loss = kInf;
  int runaway = 0;
  double wsg_sum = 0.0;

  auto diverge = [&](long step, std::string why) {
    sum.diverged = true;
    sum.divergence_step = step;
    sum.divergence_reason = std::move(why);
    spdlog::debug("run {} lr {} diverged at step {}: {}", sum.optimizer, sum.lr, step, sum.divergence_reason);
  };

  for (int s = 0; s < tc.steps; ++s) {
    const double lr = lr_at(sched, s);
    const Batch batch = next_batch(split.train, tc.batch, m.seq_len, data_rng);
    MetricsRecord rec;
    rec.step = s;
    rec.lr = lr;
    try {
      auto fr = forward_loss(params, m, batch);
      if (!std::isfinite(fr.loss)) throw DivergenceError("loss", "non-finite loss");
      rec.loss = fr.loss;
      if (s == 0) sum.initial_loss = fr.loss;
      const auto grads = backward(params, m, fr.cache, batch);
      double gsq = 0.0;
      for (std::size_t i = 0; i < grads.size(); ++i) {
        gsq += sum_squares(grads[i], layout[i].name);
        rec.grad_rms.push_back(rms_norm(grads[i], layout[i].name));
      }
      rec.grad_norm = std::sqrt(gsq);
      const auto wsg = weight_sg_ratio(params, grads);
      rec.wsg_ratio = wsg.global;
      rec.wsg_block = wsg.per_block;
      const auto flags = spikes.observe(rec.grad_rms);
      rec.spikes = flags.size();
      if (s % tc.token_stats_every == 0) {
        const auto tg = head_token_grads(fr.cache.head_inputs(), fr.cache.probs(), batch.targets);
        auto stats = token_class_report(row_norms(tg), freqs, batch.targets, fr.cache.position_losses(), s);
        if (writer) writer->write_tokens(stats);
        res.token_stats.push_back(std::move(stats));
      }
      const auto& tr = opt.step(params, grads, lr);
      if (!params_finite(params)) throw DivergenceError("params", "non-finite parameter");
      rec.update_rms = tr.update_rms;
      if (is_sgdll && cfg.optim.tau > 0 && std::isfinite(cfg.optim.tau))
        for (double u : tr.update_rms) res.max_update_rms_over_tau = std::max(res.max_update_rms_over_tau, u / cfg.optim.tau);
      if (is_sgdll) res.max_clipped_row_norm = std::max(res.max_clipped_row_norm, tr.max_clipped_row_norm);
      const auto* mom = opt.momentum();
      const auto wm = mom ? norm_ratio(params, *mom) : norm_ratio(params, grads);
      rec.wm_ratio = wm.global;
      rec.wm_block = wm.per_block;
      rec.eff_lr = opt.effective_lr();
      rec.distance_from_init = distance_from_init(params, params0);
      if ((s + 1) % eval_every == 0 || s + 1 == tc.steps) {
        const double v = eval_loss(params, m, val);
        if (!std::isfinite(v)) throw DivergenceError("loss", "non-finite validation loss");
        rec.val_loss = v;
        sum.val_loss = v;
      }
      if (!flags.empty()) {
        res.spike_steps.insert(res.spike_steps.end(), flags.size(), s);
        if (writer) writer->write_spikes(s, flags);
      }
    } catch (const NumericError& e) {
      diverge(s, std::string(e.what()));
      break;
    }
    if (writer) writer->write(rec);
    res.loss.push_back(rec.loss);
    res.wsg_ratio.push_back(rec.wsg_ratio);
    wsg_sum += rec.wsg_ratio;
    sum.final_loss = rec.loss;
    sum.best_loss = std::min(sum.best_loss, rec.loss);
    sum.distance_from_init = rec.distance_from_init;
    sum.steps_completed = s + 1;
    runaway = rec.loss > tc.divergence_factor * sum.initial_loss ? runaway + 1 : 0;
    if (runaway >= tc.divergence_patience) {
      diverge(s, "loss above " + format_real(tc.divergence_factor) + "x initial for " +
                     std::to_string(tc.divergence_patience) + " steps");
      break;
    }
  }
  if (sum.steps_completed == 0) {
    sum.final_loss = kNaN;
    sum.best_loss = kNaN;
  }
  sum.mean_wsg_ratio = sum.steps_completed ? wsg_sum / static_cast<double>(sum.steps_completed) : kNaN;
  sum.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (keep_params) res.final_params = params.template cast<double>();
  if (!out_dir.empty()) write_summary_json(out_dir / "summary.json", sum);
  spdlog::info("{} lr={} B={} seed={}: steps={} loss={} val={} diverged={} ({:.1f}s)", sum.optimizer,
               format_real(sum.lr), sum.batch, sum.seed, sum.steps_completed, format_real(sum.final_loss),
               format_real(sum.val_loss), sum.diverged, sum.wall_clock_seconds);
  return res;
}

}  // namespace

RunResult train_run(const RunConfig& cfg, std::uint64_t seed, const fs::path& out_dir, bool keep_params) {
  cfg.validate();
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream(out_dir / "config.ini") << to_ini(cfg);
  }
  return cfg.train.precision == Precision::float32 ? train_impl<float>(cfg, seed, out_dir, keep_params)
                                                    : train_impl<double>(cfg, seed, out_dir, keep_params);
}

std::vector<SweepCell> sweep_cells(const RunConfig& base) {
  const auto& sw = base.sweep;
  const std::vector<OptimizerKind> opts = sw.optimizer.empty() ? std::vector{base.optim.kind} : sw.optimizer;
  const std::vector<int> batches = sw.batch.empty() ? std::vector{base.train.batch} : sw.batch;
  const std::vector<std::uint64_t> seeds = sw.seed.empty() ? base.train.seeds : sw.seed;
  std::vector<SweepCell> cells;
  for (auto kind : opts) {
    std::vector<double> lrs = sw.lr.empty() ? std::vector{base.optim.lr} : sw.lr;
    if (auto it = sw.lr_by_optimizer.find(kind); it != sw.lr_by_optimizer.end()) lrs = it->second;
    for (double lr : lrs)
      for (int B : batches)
        for (auto seed : seeds) {
          SweepCell c;
          c.cfg = base;
          c.cfg.optim.kind = kind;
          c.cfg.optim.lr = lr;
          c.cfg.train.batch = B;
          c.cfg.train.seeds = {seed};
          c.seed = seed;
          c.name = std::string(to_string(kind)) + "_lr" + format_real(lr) + "_B" + std::to_string(B) + "_s" +
                   std::to_string(seed);
          cells.push_back(std::move(c));
        }
  }
  return cells;
}

namespace {

template <typename F>
void run_parallel(std::size_t n, int parallel, F f) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        f(i);
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!err) err = std::current_exception();
      }
    }
  };
  const auto k = static_cast<std::size_t>(std::max(1, parallel));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < std::min(k, n); ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

void summary_csv_row(std::ostream& o, const RunSummary& s) {
  o << s.optimizer << ',' << format_real(s.lr) << ',' << s.batch << ',' << s.seed << ','
    << format_real(s.initial_loss) << ',' << format_real(s.final_loss) << ',' << format_real(s.best_loss) << ','
    << format_real(s.val_loss) << ',' << (s.diverged ? 1 : 0) << ',' << s.divergence_step << ','
    << s.steps_completed << ',' << format_real(s.distance_from_init) << ',' << format_real(s.mean_wsg_ratio);
}

constexpr const char* kSummaryColumns =
    "optimizer,lr,batch,seed,initial_loss,final_loss,best_loss,val_loss,diverged,divergence_step,steps_completed,"
    "distance_from_init,mean_wsg_ratio";

}  // namespace

std::vector<RunSummary> run_sweep(const RunConfig& base, const fs::path& out_dir, int parallel) {
  base.validate();
  const auto cells = sweep_cells(base);
  std::vector<RunSummary> out(cells.size());
  fs::create_directories(out_dir);
  // generate shared corpora once before the workers start
  corpus_for(base.data, base.model);
  run_parallel(cells.size(), parallel, [&](std::size_t i) {
    out[i] = train_run(cells[i].cfg, cells[i].seed, out_dir / cells[i].name).summary;
  });
  std::ofstream csv(out_dir / "sweep.csv");
  csv << "cell," << kSummaryColumns << '\n';
  for (std::size_t i = 0; i < cells.size(); ++i) {
    csv << cells[i].name << ',';
    summary_csv_row(csv, out[i]);
    csv << '\n';
  }
  return out;
}

std::vector<AblationArm> run_ablation(const RunConfig& base, const fs::path& out_dir, int parallel) {
  base.validate();
  const double tau = base.optim.tau, delta = base.optim.delta;
  std::vector<AblationArm> arms{
      {"both", tau, delta, {}}, {"layer_only", tau, kInf, {}}, {"token_only", kInf, delta, {}}, {"neither", kInf, kInf, {}}};
  fs::create_directories(out_dir);
  corpus_for(base.data, base.model);
  run_parallel(arms.size(), parallel, [&](std::size_t i) {
    RunConfig c = base;
    c.optim.kind = OptimizerKind::sgdll;
    c.optim.tau = arms[i].tau;
    c.optim.delta = arms[i].delta;
    arms[i].summary = train_run(c, base.train.seeds.front(), out_dir / arms[i].name).summary;
  });
  std::ofstream csv(out_dir / "ablation.csv");
  csv << "arm,tau,delta," << kSummaryColumns << '\n';
  for (const auto& a : arms) {
    csv << a.name << ',' << format_real(a.tau) << ',' << format_real(a.delta) << ',';
    summary_csv_row(csv, a.summary);
    csv << '\n';
  }
  return arms;
}

namespace {

double report_loss(const RunSummary& s) { return std::isnan(s.val_loss) ? s.final_loss : s.val_loss; }

nlohmann::json real_json(double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); }

double json_real(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return kNaN;
  return j.at(key).get<double>();
}

}  // namespace

std::vector<ReportRow> make_report(std::vector<ReportRow> rows) {
  double adam = kNaN;
  for (const auto& r : rows)
    if (r.present && !r.summary.diverged && r.summary.optimizer == "adam") {
      const double l = report_loss(r.summary);
      if (std::isnan(adam) || l < adam) adam = l;
    }
  for (auto& r : rows) {
    if (!r.present) {
      r.perplexity = kNaN;
      r.gap_to_adam = kNaN;
      continue;
    }
    const double l = report_loss(r.summary);
    r.perplexity = std::exp(l);
    r.gap_to_adam = (l - adam) / adam;
  }
  return rows;
}

std::vector<ReportRow> load_report(const std::vector<fs::path>& dirs) {
  std::vector<ReportRow> rows;
  for (const auto& d : dirs) {
    if (fs::exists(d / "summary.json")) {
      rows.push_back({d.string(), true, read_summary_json(d / "summary.json"), 0, 0});
      continue;
    }
    std::vector<fs::path> sub;
    if (fs::is_directory(d))
      for (const auto& e : fs::directory_iterator(d))
        if (e.is_directory() && fs::exists(e.path() / "summary.json")) sub.push_back(e.path());
    std::sort(sub.begin(), sub.end());
    if (sub.empty()) rows.push_back({d.string(), false, {}, 0, 0});
    for (const auto& s : sub) rows.push_back({s.string(), true, read_summary_json(s / "summary.json"), 0, 0});
  }
  return make_report(std::move(rows));
}

std::string render_report(const std::vector<ReportRow>& rows) {
  std::ostringstream o;
  o << std::left << std::setw(40) << "run" << std::setw(10) << "optimizer" << std::setw(10) << "lr" << std::setw(12)
    << "val_loss" << std::setw(12) << "ppl" << std::setw(10) << "gap" << std::setw(12) << "distance" << "status\n";
  for (const auto& r : rows) {
    o << std::setw(40) << r.dir;
    if (!r.present) {
      o << "absent\n";
      continue;
    }
    const auto& s = r.summary;
    std::ostringstream gap;
    if (std::isnan(r.gap_to_adam)) gap << "-";
    else gap << std::fixed << std::setprecision(1) << 100.0 * r.gap_to_adam << '%';
    o << std::setw(10) << s.optimizer << std::setw(10) << format_real(s.lr) << std::setw(12) << std::setprecision(4)
      << report_loss(s) << std::setw(12) << r.perplexity << std::setw(10) << gap.str() << std::setw(12)
      << s.distance_from_init << (s.diverged ? "diverged@" + std::to_string(s.divergence_step) : "ok") << '\n';
  }
  return o.str();
}

void write_report_csv(const fs::path& path, const std::vector<ReportRow>& rows) {
  std::ofstream o(path);
  if (!o) throw std::runtime_error("write_report_csv: cannot write " + path.string());
  o << "run,present,optimizer,lr,batch,seed,val_loss,perplexity,gap_to_adam,distance_from_init,diverged\n";
  for (const auto& r : rows) {
    const auto& s = r.summary;
    o << r.dir << ',' << (r.present ? 1 : 0) << ',';
    if (!r.present) {
      o << ",,,,,,,,\n";
      continue;
    }
    o << s.optimizer << ',' << format_real(s.lr) << ',' << s.batch << ',' << s.seed << ','
      << format_real(report_loss(s)) << ',' << format_real(r.perplexity) << ',' << format_real(r.gap_to_adam) << ','
      << format_real(s.distance_from_init) << ',' << (s.diverged ? 1 : 0) << '\n';
  }
}

void write_summary_json(const fs::path& path, const RunSummary& s) {
  nlohmann::json j;
  j["optimizer"] = s.optimizer;
  j["lr"] = real_json(s.lr);
  j["batch"] = s.batch;
  j["seed"] = s.seed;
  j["initial_loss"] = real_json(s.initial_loss);
  j["final_loss"] = real_json(s.final_loss);
  j["best_loss"] = real_json(s.best_loss);
  j["val_loss"] = real_json(s.val_loss);
  j["diverged"] = s.diverged;
  j["divergence_step"] = s.divergence_step;
  j["divergence_reason"] = s.divergence_reason;
  j["steps_completed"] = s.steps_completed;
  j["distance_from_init"] = real_json(s.distance_from_init);
  j["mean_wsg_ratio"] = real_json(s.mean_wsg_ratio);
  j["wall_clock_seconds"] = s.wall_clock_seconds;
  j["config_hash"] = s.config_hash;
  std::ofstream o(path);
  if (!o) throw std::runtime_error("write_summary_json: cannot write " + path.string());
  o << j.dump(2) << '\n';
}

RunSummary read_summary_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_summary_json: cannot open " + path.string());
  const auto j = nlohmann::json::parse(in);
  RunSummary s;
  s.optimizer = j.at("optimizer").get<std::string>();
  s.lr = json_real(j, "lr");
  s.batch = j.at("batch").get<int>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.initial_loss = json_real(j, "initial_loss");
  s.final_loss = json_real(j, "final_loss");
  s.best_loss = json_real(j, "best_loss");
  s.val_loss = json_real(j, "val_loss");
  s.diverged = j.at("diverged").get<bool>();
  s.divergence_step = j.at("divergence_step").get<long>();
  s.divergence_reason = j.value("divergence_reason", "");
  s.steps_completed = j.at("steps_completed").get<long>();
  s.distance_from_init = json_real(j, "distance_from_init");
  s.mean_wsg_ratio = json_real(j, "mean_wsg_ratio");
  s.wall_clock_seconds = json_real(j, "wall_clock_seconds");
  s.config_hash = j.value("config_hash", "");
  return s;
}

}  // namespace sgdll
