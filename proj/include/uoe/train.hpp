#pragma once

// Training loop: Adam over the named parameter list, loss = mean NLL plus
// the summed balance terms, per-step metrics, deterministic CSV logging and
// full-state checkpoints. Works for both the routed model and its dense twin
// (any model exposing cfg / parameters() / forward()).

#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "uoe/checkpoint.hpp"
#include "uoe/corpus.hpp"
#include "uoe/flops.hpp"
#include "uoe/model.hpp"
#include "uoe/rng.hpp"

namespace uoe {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 4;
  std::size_t seq_len = 64;
  std::size_t grad_accum = 1;  // micro-batches per optimizer update
  std::size_t log_every = 1;
  AdamConfig adam;
  std::uint64_t data_seed = 1234;
};

struct StepMetrics {
  double nll = 0.0;
  double ppl = 0.0;
  double lbal = 0.0;
  double expert_load_entropy = 0.0;
  double flops_ratio = 0.0;
};

// Raised when the loss stops being finite; the message carries the realized
// per-expert load distribution of every routed sub-block for diagnosis.
class TrainingHaltError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Metrics helpers.

inline double load_distribution_entropy(const std::vector<std::size_t>& counts) {
  double total = 0.0;
  for (std::size_t c : counts) total += static_cast<double>(c);
  if (total == 0.0) return 0.0;
  double h = 0.0;
  for (std::size_t c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / total;
    h -= p * std::log(p);
  }
  return h;
}

inline std::vector<std::size_t> sub_block_loads(const SubBlockTrace& trace) {
  if (trace.expert_mode) return trace.batch.counts;
  std::vector<std::size_t> counts;
  for (const auto& plan : trace.samples) {
    const auto per_sample = stage_one_counts(plan);
    counts.resize(per_sample.size(), 0);
    for (std::size_t i = 0; i < per_sample.size(); ++i)
      counts[i] += per_sample[i];
  }
  return counts;
}

// Mean entropy of the expert-load distributions across routed sub-blocks;
// ln(n) means perfectly even load. Zero for a model without routing traces.
inline double traces_load_entropy(const std::vector<BlockTrace>& traces) {
  double sum = 0.0;
  std::size_t blocks = 0;
  for (const auto& t : traces) {
    sum += load_distribution_entropy(sub_block_loads(t.attn));
    sum += load_distribution_entropy(sub_block_loads(t.mlp));
    blocks += 2;
  }
  return blocks ? sum / static_cast<double>(blocks) : 0.0;
}

template <typename T>
double model_flops_ratio(const UoeModel<T>& model, std::size_t l,
                         std::size_t b,
                         const std::vector<BlockTrace>& traces) {
  return flops_ratio(model.cfg, l, b, &traces);
}

template <typename T>
double model_flops_ratio(const DenseModel<T>&, std::size_t, std::size_t,
                         const std::vector<BlockTrace>&) {
  return 1.0;
}

// ---------------------------------------------------------------------------
// Deterministic CSV log: same run, same bytes. The file is rewritten in full
// at every flush so a crash never leaves a stale header or a torn row.

inline std::string format_metric(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return std::string(buf);
}

class MetricsCsv {
 public:
  void add(std::size_t step, const StepMetrics& m) {
    std::ostringstream row;
    row << step << ',' << format_metric(m.nll) << ',' << format_metric(m.ppl)
        << ',' << format_metric(m.lbal) << ','
        << format_metric(m.expert_load_entropy) << ','
        << format_metric(m.flops_ratio);
    rows_.push_back(row.str());
  }

  std::string to_string() const {
    std::string out = "step,nll,ppl,lbal,expert_load_entropy,flops_ratio\n";
    for (const auto& row : rows_) {
      out += row;
      out += '\n';
    }
    return out;
  }

  void write(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw FormatError("metrics: cannot open " + path + " to write");
    f << to_string();
    if (!f) throw FormatError("metrics: short write to " + path);
  }

  std::size_t size() const { return rows_.size(); }

 private:
  std::vector<std::string> rows_;
};

// ---------------------------------------------------------------------------
// Trainer.

template <typename T, typename ModelT>
class Trainer {
 public:
  Trainer(ModelT model, TrainConfig tc)
      : model_(std::move(model)), tc_(tc), data_rng_(tc.data_seed) {
    params_ = model_.parameters();
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (auto& [name, t] : params_) {
      t.set_requires_grad(true);
      m_.emplace_back(t.data().size(), 0.0);
      v_.emplace_back(t.data().size(), 0.0);
    }
  }

  ModelT& model() { return model_; }
  const TrainConfig& config() const { return tc_; }
  std::size_t step() const { return step_; }
  const Rng& data_rng() const { return data_rng_; }

  // One forward/backward that contributes `loss_scale` of its gradient to
  // the pending update. Metrics are reported unscaled.
  StepMetrics micro_step(const std::vector<std::size_t>& tokens,
                         const std::vector<std::size_t>& targets,
                         std::size_t b, double loss_scale = 1.0) {
    const std::size_t l = tokens.size() / b;
    auto out = model_.forward(tokens, b);
    auto [nll, ppl] = cross_entropy_and_perplexity(out.logits, targets);
    const double nll_v = static_cast<double>(nll.item());
    const double bal_v = static_cast<double>(out.balance.item());
    if (!std::isfinite(nll_v) || !std::isfinite(bal_v))
      throw TrainingHaltError(halt_diagnostic(out, nll_v, bal_v));
    auto loss = scale(add(nll, out.balance), static_cast<T>(loss_scale));
    backward(loss);
    StepMetrics m;
    m.nll = nll_v;
    m.ppl = ppl;
    m.lbal = bal_v;
    m.expert_load_entropy = traces_load_entropy(out.traces);
    m.flops_ratio = model_flops_ratio(model_, l, b, out.traces);
    return m;
  }

  // Adam over the accumulated gradients, then clear them.
  void apply_update() {
    ++step_;
    const auto& a = tc_.adam;
    const double c1 = 1.0 - std::pow(a.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(a.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& t = params_[i].second;
      auto& val = t.mutable_data();
      const auto& g = t.grad();
      for (std::size_t j = 0; j < val.size(); ++j) {
        const double gj = static_cast<double>(g[j]);
        m_[i][j] = a.beta1 * m_[i][j] + (1.0 - a.beta1) * gj;
        v_[i][j] = a.beta2 * v_[i][j] + (1.0 - a.beta2) * gj * gj;
        const double update =
            a.lr * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + a.eps);
        val[j] = static_cast<T>(static_cast<double>(val[j]) - update);
      }
      t.zero_grad();
    }
  }

  StepMetrics train_step(const std::vector<std::size_t>& tokens,
                         const std::vector<std::size_t>& targets,
                         std::size_t b) {
    auto m = micro_step(tokens, targets, b);
    apply_update();
    return m;
  }

  // Full loop over a byte corpus. Returns the logged (step, metrics) rows;
  // paths may be empty to skip the CSV / final checkpoint.
  std::vector<std::pair<std::size_t, StepMetrics>> run(
      const std::vector<std::uint8_t>& corpus, const std::string& csv_path,
      const std::string& checkpoint_path) {
    const std::size_t l = tc_.seq_len, b = tc_.batch_size;
    if (l % model_.cfg.l_p != 0)
      throw ConfigError("train: sequence length " + std::to_string(l) +
                        " not divisible by patch length " +
                        std::to_string(model_.cfg.l_p));
    if (l > model_.cfg.max_len)
      throw ConfigError("train: sequence length " + std::to_string(l) +
                        " exceeds maximum " +
                        std::to_string(model_.cfg.max_len));
    const std::size_t windows = window_count(corpus.size(), l);
    if (windows == 0)
      throw ConfigError("train: corpus of " + std::to_string(corpus.size()) +
                        " bytes has no window of length " + std::to_string(l));
    const double inv_accum = 1.0 / static_cast<double>(tc_.grad_accum);
    MetricsCsv csv;
    std::vector<std::pair<std::size_t, StepMetrics>> history;
    for (std::size_t s = 1; s <= tc_.steps; ++s) {
      StepMetrics agg;
      for (std::size_t micro = 0; micro < tc_.grad_accum; ++micro) {
        std::vector<std::size_t> inputs, targets;
        inputs.reserve(b * l);
        targets.reserve(b * l);
        for (std::size_t sample = 0; sample < b; ++sample)
          fill_window(corpus, l, data_rng_.next_index(windows), inputs,
                      targets);
        const auto m = micro_step(inputs, targets, b, inv_accum);
        agg.nll += m.nll * inv_accum;
        agg.lbal += m.lbal * inv_accum;
        agg.expert_load_entropy += m.expert_load_entropy * inv_accum;
        agg.flops_ratio += m.flops_ratio * inv_accum;
      }
      agg.ppl = std::exp(agg.nll);
      apply_update();
      if (s % tc_.log_every == 0 || s == tc_.steps) {
        csv.add(s, agg);
        if (!csv_path.empty()) csv.write(csv_path);
        history.emplace_back(s, agg);
      }
    }
    if (!checkpoint_path.empty()) save(checkpoint_path);
    return history;
  }

  // Checkpoint: parameters, both moment vectors, step counter and the data
  // stream state, in one archive.
  std::vector<ArrayRecord> checkpoint_records() const {
    std::vector<ArrayRecord> arrays;
    for (const auto& [name, t] : params_)
      arrays.push_back(record_from_tensor(name, t));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      arrays.push_back(record_from_values<double>(
          "opt.m." + params_[i].first, params_[i].second.shape(), m_[i]));
      arrays.push_back(record_from_values<double>(
          "opt.v." + params_[i].first, params_[i].second.shape(), v_[i]));
    }
    arrays.push_back(record_from_u64("trainer.step", step_));
    arrays.push_back(record_from_u64("trainer.rng_seed", data_rng_.seed()));
    arrays.push_back(
        record_from_u64("trainer.rng_counter", data_rng_.counter()));
    return arrays;
  }

  void save(const std::string& path) const {
    write_checkpoint(path, checkpoint_records());
  }

  void load(const std::string& path) {
    auto arrays = read_checkpoint(path);
    std::map<std::string, ArrayRecord> by_name;
    for (auto& rec : arrays) {
      const std::string name = rec.name;
      auto [it, fresh] = by_name.emplace(name, std::move(rec));
      (void)it;
      if (!fresh) throw FormatError("checkpoint: duplicate array " + name);
    }
    auto take = [&](const std::string& name) {
      auto it = by_name.find(name);
      if (it == by_name.end())
        throw FormatError("checkpoint: missing array " + name);
      ArrayRecord rec = std::move(it->second);
      by_name.erase(it);
      return rec;
    };
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& [name, t] = params_[i];
      const auto rec = take(name);
      if (rec.dims != t.shape())
        throw FormatError("checkpoint: array " + name + " has shape " +
                          to_string(rec.dims) + ", model expects " +
                          to_string(t.shape()));
      t.mutable_data() = values_from_record<T>(rec);
      m_[i] = values_from_record<double>(take("opt.m." + name));
      v_[i] = values_from_record<double>(take("opt.v." + name));
    }
    step_ = u64_from_record(take("trainer.step"));
    const auto seed = u64_from_record(take("trainer.rng_seed"));
    const auto counter = u64_from_record(take("trainer.rng_counter"));
    data_rng_ = Rng(seed, counter);
    if (!by_name.empty())
      throw FormatError("checkpoint: unexpected array " +
                        by_name.begin()->first);
  }

 private:
  std::string halt_diagnostic(const ModelOutput<T>& out, double nll,
                              double bal) const {
    std::ostringstream ss;
    ss << "training halted: non-finite loss at optimizer step " << (step_ + 1)
       << " (nll=" << nll << ", balance=" << bal << ")";
    for (std::size_t bl = 0; bl < out.traces.size(); ++bl) {
      for (const auto* sub :
           {&out.traces[bl].attn, &out.traces[bl].mlp}) {
        const bool is_attn = sub == &out.traces[bl].attn;
        const auto loads = sub_block_loads(*sub);
        ss << "\n  block " << bl << (is_attn ? " attn" : " mlp")
           << (sub->expert_mode ? " (expert mode) loads=[" : " loads=[");
        for (std::size_t i = 0; i < loads.size(); ++i)
          ss << (i ? "," : "") << loads[i];
        ss << "]";
      }
    }
    return ss.str();
  }

  ModelT model_;
  TrainConfig tc_;
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t step_ = 0;
  Rng data_rng_;
};

template <typename T>
using UoeTrainer = Trainer<T, UoeModel<T>>;
template <typename T>
using DenseTrainer = Trainer<T, DenseModel<T>>;

}  // namespace uoe
