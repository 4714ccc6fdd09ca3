#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rbnn/checkpoint.hpp"
#include "rbnn/config.hpp"
#include "rbnn/inference.hpp"
#include "rbnn/model.hpp"

namespace rbnn {

enum class KlWeightMode {
  PerBatch,    // KL / (minibatches per epoch)
  PerExample,  // KL / (training examples)
  Constant,    // KL * kl_weight
};

enum class KlEstimator { ClosedForm, MonteCarlo };

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
  std::size_t batch_size = 64;
  std::size_t max_iterations = 1000;
  std::size_t validation_interval = 1000;
  KlWeightMode kl_weight_mode = KlWeightMode::PerBatch;
  double kl_weight = 1.0;  // used when kl_weight_mode is Constant
  KlEstimator kl_estimator = KlEstimator::ClosedForm;
  std::size_t val_mc_draws = 10;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0) || !(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1) || !(epsilon > 0)) {
      throw ConfigError("learning_rate, beta1, beta2 and epsilon must be positive (betas below 1)");
    }
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (validation_interval == 0) throw ConfigError("validation_interval must be >= 1");
    if (val_mc_draws < 2) throw ConfigError("val_mc_draws must be >= 2");
    if (kl_weight_mode == KlWeightMode::Constant && !(kl_weight > 0)) throw ConfigError("kl_weight must be positive");
  }

  static TrainConfig from_config(const KeyValueConfig& kv) {
    kv.require_known({"learning_rate", "beta1", "beta2", "epsilon", "batch_size", "max_iterations",
                      "validation_interval", "kl_weight_mode", "kl_weight", "kl_estimator", "val_mc_draws", "seed"});
    TrainConfig c;
    c.learning_rate = kv.get_double("learning_rate", c.learning_rate);
    c.beta1 = kv.get_double("beta1", c.beta1);
    c.beta2 = kv.get_double("beta2", c.beta2);
    c.epsilon = kv.get_double("epsilon", c.epsilon);
    c.batch_size = kv.get_u64("batch_size", c.batch_size);
    c.max_iterations = kv.get_u64("max_iterations", c.max_iterations);
    c.validation_interval = kv.get_u64("validation_interval", c.validation_interval);
    const std::string mode = kv.get_string("kl_weight_mode", "per-batch");
    if (mode == "per-batch") c.kl_weight_mode = KlWeightMode::PerBatch;
    else if (mode == "per-example") c.kl_weight_mode = KlWeightMode::PerExample;
    else if (mode == "constant") c.kl_weight_mode = KlWeightMode::Constant;
    else throw ConfigError("kl_weight_mode must be per-batch, per-example or constant");
    c.kl_weight = kv.get_double("kl_weight", c.kl_weight);
    const std::string est = kv.get_string("kl_estimator", "closed-form");
    if (est == "closed-form") c.kl_estimator = KlEstimator::ClosedForm;
    else if (est == "monte-carlo") c.kl_estimator = KlEstimator::MonteCarlo;
    else throw ConfigError("kl_estimator must be closed-form or monte-carlo");
    c.val_mc_draws = kv.get_u64("val_mc_draws", c.val_mc_draws);
    c.seed = kv.get_u64("seed", c.seed);
    c.validate();
    return c;
  }
};

/// Images with integer class labels; inputs are [N, C, H, W].
struct LabeledSet {
  Tensor inputs;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }

  /// Rows `idx` gathered into a new set.
  LabeledSet gather(std::span<const std::size_t> idx) const {
    const std::size_t per = inputs.size() / inputs.dim(0);
    Shape s = inputs.shape();
    s[0] = idx.size();
    LabeledSet out{Tensor(s), std::vector<int>(idx.size())};
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(inputs.data() + idx[i] * per, per, out.inputs.data() + i * per);
      out.labels[i] = labels[idx[i]];
    }
    return out;
  }

  LabeledSet slice(std::size_t begin, std::size_t end) const {
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    return gather(idx);
  }
};

/// Endless minibatch source reshuffled every epoch. A trailing partial batch is
/// dropped, so every epoch has exactly batches_per_epoch() full batches.
class MinibatchStream {
 public:
  MinibatchStream(const LabeledSet& data, std::size_t batch_size, std::uint64_t seed)
      : data_(data), batch_(std::min(batch_size, data.size())), rng_(seed), order_(data.size()) {
    if (data.size() == 0) throw std::invalid_argument("empty training set");
    reshuffle();
  }

  std::size_t batches_per_epoch() const { return data_.size() / batch_; }
  std::size_t epoch() const { return epoch_; }

  LabeledSet next() {
    if (cursor_ + batch_ > order_.size()) {
      reshuffle();
      ++epoch_;
    }
    std::span<const std::size_t> idx(order_.data() + cursor_, batch_);
    cursor_ += batch_;
    return data_.gather(idx);
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_.uniform_index(0, i - 1)]);
    cursor_ = 0;
  }

  const LabeledSet& data_;
  std::size_t batch_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
};

/// KL multiplier for the minibatch objective.
inline double kl_weight_for(const TrainConfig& cfg, std::size_t train_size) {
  switch (cfg.kl_weight_mode) {
    case KlWeightMode::PerBatch: {
      const std::size_t b = std::min(cfg.batch_size, train_size);
      return 1.0 / static_cast<double>(std::max<std::size_t>(1, train_size / b));
    }
    case KlWeightMode::PerExample: return 1.0 / static_cast<double>(train_size);
    case KlWeightMode::Constant: return cfg.kl_weight;
  }
  return 1.0;
}

struct ElboTerms {
  Var loss;
  Var nll;
  Var kl;  // invalid for baseline models
  ForwardPass pass;
};

/// loss = nll + kl_weight * KL(q || prior), with the nll from one stochastic
/// pass and KL summed over all variational tensors. Baseline models give
/// loss = nll.
inline ElboTerms elbo_loss(const Model& model, Tape& tape, const LabeledSet& batch, double kl_weight, Rng& rng,
                           KlEstimator estimator = KlEstimator::ClosedForm, const PriorSpec& prior = {}) {
  if (kl_weight < 0) throw std::invalid_argument("kl_weight must be non-negative");
  ForwardOptions opts;
  opts.trainable = true;
  opts.rng = &rng;
  ElboTerms t;
  t.pass = forward(model, tape.constant(batch.inputs), opts);
  t.nll = softmax_cross_entropy(t.pass.logits, batch.labels);
  t.loss = t.nll;
  if (model.bayesian()) {
    Var kl;
    for (const auto& v : t.pass.variational) {
      Var term = estimator == KlEstimator::ClosedForm ? kl_divergence(v.mu, v.rho, prior)
                                                      : kl_sample_term(v.mu, v.rho, v.eps, prior);
      kl = kl.valid() ? add(kl, term) : term;
    }
    t.kl = kl;
    if (kl_weight > 0) t.loss = add(t.nll, scale(kl, kl_weight));
  }
  if (!std::isfinite(t.loss.value().item())) throw NumericError("non-finite training loss");
  return t;
}

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t step = 0;
};

/// Bias-corrected Adam update of `params` in place.
inline void adam_step(std::span<const ParamRef> params, std::span<const Tensor> grads, AdamState& state,
                      const TrainConfig& cfg) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam_step: parameter/gradient count mismatch");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor->shape());
      state.v.emplace_back(p.tensor->shape());
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].tensor->shape() || state.m[i].shape() != grads[i].shape()) {
      throw ShapeError("adam_step: shape mismatch for " + params[i].name);
    }
    if (!grads[i].all_finite()) throw NumericError("non-finite gradient for parameter " + params[i].name);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i].tensor;
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    const Tensor& g = grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      p[k] -= cfg.learning_rate * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.epsilon);
    }
  }
}

/// Adam update of every model parameter followed by re-projection of the
/// constrained layer.
inline void adam_step(Model& model, std::span<const Tensor> grads, AdamState& state, const TrainConfig& cfg) {
  const auto params = model.parameters();
  adam_step(std::span<const ParamRef>(params), grads, state, cfg);
  model.project_constraints();
}

struct ValidationScore {
  double accuracy = 0.0;
  double nll = 0.0;  // mean -log p(label), from the MC mean for Bayesian models
};

/// Argmax accuracy and mean NLL. Bayesian models vote with the MC mean over
/// `mc_draws` passes.
inline ValidationScore evaluate_validation(const Model& model, const LabeledSet& data, std::size_t mc_draws,
                                           std::uint64_t seed, std::size_t chunk = 64) {
  if (data.size() == 0) return {};
  std::size_t correct = 0;
  double nll = 0.0;
  for (std::size_t begin = 0; begin < data.size(); begin += chunk) {
    const std::size_t end = std::min(data.size(), begin + chunk);
    const LabeledSet part = data.slice(begin, end);
    std::vector<Probs> probs;
    if (model.bayesian()) {
      for (const auto& s : mc_predict_batch(model, part.inputs, mc_draws, derive_seed(seed, begin))) {
        probs.push_back(s.mean_probs);
      }
    } else {
      probs = probs_from_logits(forward_deterministic(model, part.inputs));
    }
    for (std::size_t i = 0; i < probs.size(); ++i) {
      const int pred = probs[i][1] > probs[i][0] ? kRescaled : kOriginal;
      if (pred == part.labels[i]) ++correct;
      nll -= std::log(std::max(probs[i][part.labels[i]], 1e-300));
    }
  }
  const double n = static_cast<double>(data.size());
  return {static_cast<double>(correct) / n, nll / n};
}

inline double evaluate_accuracy(const Model& model, const LabeledSet& data, std::size_t mc_draws, std::uint64_t seed,
                                std::size_t chunk = 64) {
  return evaluate_validation(model, data, mc_draws, seed, chunk).accuracy;
}

struct TrainLogRecord {
  std::size_t iteration = 0;
  double nll = 0.0;
  double kl = 0.0;
  double loss = 0.0;
  std::optional<double> val_accuracy;
  std::optional<double> val_nll;
  double wall_ms = 0.0;
};

/// Keeps the evaluation with the highest accuracy; equal accuracies go to the
/// lower validation NLL, then to the earlier iteration.
class BestCheckpointTracker {
 public:
  bool offer(std::size_t iteration, double accuracy, double nll = 0.0) {
    if (best_iteration_ && (accuracy < best_accuracy_ || (accuracy == best_accuracy_ && nll >= best_nll_))) return false;
    best_iteration_ = iteration;
    best_accuracy_ = accuracy;
    best_nll_ = nll;
    return true;
  }
  std::optional<std::size_t> best_iteration() const { return best_iteration_; }
  double best_accuracy() const { return best_accuracy_; }

 private:
  std::optional<std::size_t> best_iteration_;
  double best_accuracy_ = -std::numeric_limits<double>::infinity();
  double best_nll_ = std::numeric_limits<double>::infinity();
};

struct StepInfo {
  std::size_t iteration;
  const Model& model;
  const TrainLogRecord& record;
};

struct TrainResult {
  Model best;
  std::size_t best_iteration = 0;
  double best_val_accuracy = 0.0;
  std::vector<TrainLogRecord> log;
};

/// Runs `cfg.max_iterations` Adam steps on minibatches of `train_set`.
/// Validation accuracy is measured every `validation_interval` steps and at the
/// final step; the best-scoring parameters are returned.
inline TrainResult train(Model model, const LabeledSet& train_set, const LabeledSet& val_set, const TrainConfig& cfg,
                         const std::function<void(const StepInfo&)>& on_step = {}) {
  cfg.validate();
  model.project_constraints();
  TrainResult result;
  result.best = model;
  if (cfg.max_iterations == 0) return result;

  MinibatchStream stream(train_set, cfg.batch_size, derive_seed(cfg.seed, 1));
  Rng noise(derive_seed(cfg.seed, 2));
  const double kl_weight = kl_weight_for(cfg, train_set.size());
  AdamState adam;
  BestCheckpointTracker best;
  const auto start = std::chrono::steady_clock::now();

  for (std::size_t it = 1; it <= cfg.max_iterations; ++it) {
    const LabeledSet batch = stream.next();
    Tape tape;
    ElboTerms terms = elbo_loss(model, tape, batch, kl_weight, noise, cfg.kl_estimator);
    tape.backward(terms.loss);
    std::vector<Tensor> grads;
    grads.reserve(terms.pass.params.size());
    for (Var p : terms.pass.params) grads.push_back(tape.grad(p));
    adam_step(model, grads, adam, cfg);

    TrainLogRecord rec;
    rec.iteration = it;
    rec.nll = terms.nll.value().item();
    rec.kl = terms.kl.valid() ? terms.kl.value().item() : 0.0;
    rec.loss = terms.loss.value().item();
    if (it % cfg.validation_interval == 0 || it == cfg.max_iterations) {
      const ValidationScore score = evaluate_validation(model, val_set, cfg.val_mc_draws, derive_seed(cfg.seed, 3 + it));
      rec.val_accuracy = score.accuracy;
      rec.val_nll = score.nll;
      if (best.offer(it, score.accuracy, score.nll)) {
        result.best = model;
        result.best_iteration = it;
        result.best_val_accuracy = *rec.val_accuracy;
      }
    }
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back(rec);
    if (on_step) on_step(StepInfo{it, model, result.log.back()});
  }
  return result;
}

/// CSV with header `iteration,nll,kl,loss,val_accuracy,wall_ms`. The wall
/// clock column can be blanked for byte-level reproducibility checks.
inline void write_train_log(const std::filesystem::path& path, std::span<const TrainLogRecord> log,
                            bool include_wall_time = true) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write train log " + path.string());
  os << "iteration,nll,kl,loss,val_accuracy,wall_ms\n";
  char buf[256];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,", r.iteration, r.nll, r.kl, r.loss);
    os << buf;
    if (r.val_accuracy) {
      std::snprintf(buf, sizeof buf, "%.17g", *r.val_accuracy);
      os << buf;
    }
    os << ',';
    if (include_wall_time) {
      std::snprintf(buf, sizeof buf, "%.1f", r.wall_ms);
      os << buf;
    }
    os << '\n';
  }
}

}  // namespace rbnn
