#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "dkbf/autodiff.hpp"
#include "dkbf/data.hpp"
#include "dkbf/model.hpp"
#include "dkbf/rng.hpp"
#include "dkbf/tensor.hpp"

namespace dkbf {

struct TrainConfig {
  double lr = 1e-5;
  int batch_size = 32;
  int max_epochs = 10;
  int patience = 5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 42;

  void validate() const {
    if (lr < 0.0) throw Error("train config: lr must be >= 0");
    if (batch_size < 1) throw Error("train config: batch_size must be >= 1");
    if (max_epochs < 1) throw Error("train config: max_epochs must be >= 1");
    if (patience < 1 || patience > max_epochs)
      throw Error("train config: patience must be in [1, max_epochs]");
  }
};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

// Bias-corrected update for one tensor at step t (1-based). Exposed so the
// update rule can be checked against a hand computation.
inline void adam_update(const std::string& name, std::vector<double>& values,
                        const std::vector<double>& grad, std::vector<double>& m,
                        std::vector<double>& v, int t, const TrainConfig& cfg) {
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double gi = grad[i];
    if (!std::isfinite(gi)) throw Error("adam: non-finite gradient for parameter " + name);
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
    values[i] -= cfg.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.eps);
  }
}

class Adam {
 public:
  Adam(Model& model, const TrainConfig& cfg) : cfg_(cfg) {
    model.visit([this](const std::string& name, Tensor& t) {
      names_.push_back(name);
      m_.push_back(std::vector<double>(t.values.size(), 0.0));
      v_.push_back(std::vector<double>(t.values.size(), 0.0));
    });
  }

  void step(Model& model, const GradMap& grads) {
    ++t_;
    std::size_t idx = 0;
    model.visit([&](const std::string& name, Tensor& t) {
      adam_update(name, t.values, grads.at(t).values, m_[idx], v_[idx], t_, cfg_);
      ++idx;
    });
  }

  int steps_taken() const { return t_; }

 private:
  TrainConfig cfg_;
  std::vector<std::string> names_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  int t_ = 0;
};

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct Metrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double mean_loss = 0.0;
};

inline int argmax_class(const Tensor& probs) {
  int best = 0;
  for (int c = 1; c < static_cast<int>(probs.values.size()); ++c)
    if (probs.values[c] > probs.values[best]) best = c;
  return best;
}

inline int predict(Model& model, const Sample& sample) {
  Tape tape(false);
  return argmax_class(model.forward(tape, sample, false));
}

// Macro-F1 averages per-class F1 over all three classes; a class absent
// from both ground truth and predictions contributes 0.
inline double macro_f1_from_counts(const std::vector<int>& tp, const std::vector<int>& fp,
                                   const std::vector<int>& fn) {
  double sum = 0.0;
  for (std::size_t c = 0; c < tp.size(); ++c) {
    const double denom = 2.0 * tp[c] + fp[c] + fn[c];
    sum += denom > 0.0 ? 2.0 * tp[c] / denom : 0.0;
  }
  return sum / static_cast<double>(tp.size());
}

inline Metrics evaluate(Model& model, const Dataset& ds) {
  if (ds.empty()) throw Error("evaluate: empty dataset");
  std::vector<int> tp(kNumClasses, 0), fp(kNumClasses, 0), fn(kNumClasses, 0);
  int correct = 0;
  double loss_sum = 0.0;
  for (const Sample& s : ds) {
    Tape tape(false);
    Tensor probs = model.forward(tape, s, false);
    const int pred = argmax_class(probs);
    loss_sum += -std::log(probs.values[static_cast<std::size_t>(s.label)]);
    if (pred == s.label) {
      ++correct;
      ++tp[static_cast<std::size_t>(s.label)];
    } else {
      ++fp[static_cast<std::size_t>(pred)];
      ++fn[static_cast<std::size_t>(s.label)];
    }
  }
  Metrics m;
  m.accuracy = static_cast<double>(correct) / static_cast<double>(ds.size());
  m.macro_f1 = macro_f1_from_counts(tp, fp, fn);
  m.mean_loss = loss_sum / static_cast<double>(ds.size());
  return m;
}

// ---------------------------------------------------------------------------
// Training loop with early stopping
// ---------------------------------------------------------------------------

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double dev_acc = 0.0;
  double dev_macro_f1 = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> history;
  double best_dev_acc = 0.0;
  int best_epoch = 0;
};

inline std::string history_csv(const std::vector<EpochStats>& history) {
  std::string out = "epoch,train_loss,dev_acc,dev_macro_f1\n";
  char buf[128];
  for (const EpochStats& e : history) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g\n", e.epoch, e.train_loss, e.dev_acc,
                  e.dev_macro_f1);
    out += buf;
  }
  return out;
}

// One optimization step over a batch: taped forwards, mean cross-entropy,
// backward, Adam. Returns the batch loss.
inline double train_batch(Model& model, Adam& opt, const Dataset& train,
                          const std::vector<std::size_t>& batch_idx, Rng dropout_rng) {
  Tape tape(true);
  tape.set_rng(dropout_rng);
  model.bind(tape);
  std::vector<Tensor> losses;
  losses.reserve(batch_idx.size());
  for (std::size_t idx : batch_idx) {
    Tensor probs = model.forward(tape, train[idx], true);
    losses.push_back(cross_entropy(tape, probs, train[idx].label));
  }
  Tensor batch_loss =
      losses.size() == 1 ? losses[0] : tape.mean_pool_rows(tape.concat_rows(losses));
  GradMap grads = tape.backward(batch_loss);
  opt.step(model, grads);
  return batch_loss.item();
}

// Seeded shuffling, mini-batches, per-epoch dev evaluation; stops after
// `patience` epochs without strict dev-accuracy improvement and restores
// the best parameters (full precision) into the model.
inline TrainResult train_loop(Model& model, const Dataset& train, const Dataset& dev,
                              const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw Error("train_loop: empty training set");
  if (dev.empty()) throw Error("train_loop: empty dev set");

  Rng root = Rng(cfg.seed).stream("trainer");
  Adam opt(model, cfg);

  std::vector<std::pair<std::string, std::vector<double>>> best_params;
  auto snapshot = [&best_params, &model]() {
    best_params.clear();
    model.visit([&best_params](const std::string& name, Tensor& t) {
      best_params.emplace_back(name, t.values);
    });
  };

  TrainResult result;
  result.best_dev_acc = -1.0;
  int stagnant = 0;
  std::uint64_t step_counter = 0;
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng shuffle_rng = root.stream("shuffle", static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j =
          static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(order[i - 1], order[j]);
    }

    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      std::vector<std::size_t> batch(order.begin() + start, order.begin() + stop);
      const double loss =
          train_batch(model, opt, train, batch, root.stream("dropout", step_counter++));
      loss_sum += loss * static_cast<double>(batch.size());
      seen += batch.size();
    }

    const Metrics dev_m = evaluate(model, dev);
    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / static_cast<double>(seen);
    stats.dev_acc = dev_m.accuracy;
    stats.dev_macro_f1 = dev_m.macro_f1;
    result.history.push_back(stats);

    if (dev_m.accuracy > result.best_dev_acc) {
      result.best_dev_acc = dev_m.accuracy;
      result.best_epoch = epoch;
      snapshot();
      stagnant = 0;
    } else {
      ++stagnant;
      if (stagnant >= cfg.patience) break;
    }
  }

  // Restore the best-epoch parameters.
  std::size_t idx = 0;
  model.visit([&best_params, &idx](const std::string& name, Tensor& t) {
    if (idx >= best_params.size() || best_params[idx].first != name)
      throw Error("train_loop: snapshot order mismatch at " + name);
    t.values = best_params[idx].second;
    t.node_id = -1;
    t.tape_id = 0;
    ++idx;
  });
  return result;
}

}  // namespace dkbf
