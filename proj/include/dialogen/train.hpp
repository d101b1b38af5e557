#pragma once

// Optimization loop: Adam under a Noam learning-rate schedule, dynamic
// length-bucketed batches, validation-based early stopping, and support for
// backward (reversed-pair) models via a pure token-level transform.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "dialogen/error.hpp"
#include "dialogen/model.hpp"
#include "dialogen/shard.hpp"

namespace dialogen::train {

enum class Direction { kForward, kBackward };

inline Direction direction_from_string(const std::string& s) {
  if (s == "forward") return Direction::kForward;
  if (s == "backward") return Direction::kBackward;
  throw UsageError("unknown direction: " + s);
}

struct TrainConfig {
  int warmup_steps = 200;
  double peak_scale = 1.0;
  int max_epochs = 5;
  std::int64_t token_budget = 4096;
  std::uint64_t seed = 0;
  Direction direction = Direction::kForward;
  model::MaskMode mask_mode = model::MaskMode::kFull;
  double early_stop_epsilon = 1e-3;  // nats of required val improvement
  int patience = 1;                  // epochs without progress tolerated
  double clip_norm = 1.0;
  long max_steps = 0;     // optional hard cap; 0 = unlimited
  double stop_loss = 0.0; // stop once a step's loss falls below; 0 = never
};

struct StepLog {
  long step;
  double lr;
  double train_loss;
};

struct EpochLog {
  int epoch;
  double validation_loss;
};

struct TrainLog {
  std::vector<StepLog> steps;
  std::vector<EpochLog> epochs;

  void save_csv(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << "kind,step_or_epoch,lr,loss\n";
    char buf[160];
    for (const auto& s : steps) {
      std::snprintf(buf, sizeof(buf), "step,%ld,%.10g,%.10g\n", s.step, s.lr,
                    s.train_loss);
      out << buf;
    }
    for (const auto& e : epochs) {
      std::snprintf(buf, sizeof(buf), "epoch,%d,,%.10g\n", e.epoch,
                    e.validation_loss);
      out << buf;
    }
  }
};

// scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)
inline double noam_lr(long step, int d_model, int warmup, double scale) {
  if (step < 1) throw UsageError("noam_lr requires step >= 1");
  if (warmup < 1) throw UsageError("noam_lr requires warmup >= 1");
  const double s = static_cast<double>(step);
  return scale / std::sqrt(static_cast<double>(d_model)) *
         std::min(1.0 / std::sqrt(s), s * std::pow(warmup, -1.5));
}

// Reversed-pair transform: the target segment becomes the context and the
// source becomes the continuation, so the model learns P(Source|Target).
inline bpe::TokenSequence reverse_pair(const bpe::TokenSequence& seq) {
  const int n = static_cast<int>(seq.ids.size());
  if (seq.boundary <= 0 || seq.boundary >= n)
    throw UsageError("reverse_pair requires a sequence with an interior boundary");
  bpe::TokenSequence out;
  out.ids.reserve(n);
  out.ids.insert(out.ids.end(), seq.ids.begin() + seq.boundary, seq.ids.end());
  out.ids.insert(out.ids.end(), seq.ids.begin(), seq.ids.begin() + seq.boundary);
  out.boundary = n - seq.boundary;
  return out;
}

template <typename Scalar>
struct AdamState {
  model::TransformerParams<Scalar> m;
  model::TransformerParams<Scalar> v;
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;

  explicit AdamState(const model::ModelConfig& config)
      : m(model::zeros_like_params<Scalar>(config)),
        v(model::zeros_like_params<Scalar>(config)) {}
};

template <typename Scalar>
double clip_global_norm(model::TransformerParams<Scalar>& grads,
                        double max_norm) {
  double sq = 0.0;
  for (auto& ref : model::tensor_refs(grads))
    sq += ref.tensor->template cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const Scalar scale = static_cast<Scalar>(max_norm / norm);
    for (auto& ref : model::tensor_refs(grads)) *ref.tensor *= scale;
  }
  return norm;
}

template <typename Scalar>
void adam_step(model::TransformerParams<Scalar>& params,
               model::TransformerParams<Scalar>& grads,
               AdamState<Scalar>& state, double lr) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, state.step);
  const double bc2 = 1.0 - std::pow(state.beta2, state.step);
  auto prefs = model::tensor_refs(params);
  auto grefs = model::tensor_refs(grads);
  auto mrefs = model::tensor_refs(state.m);
  auto vrefs = model::tensor_refs(state.v);
  const Scalar b1 = static_cast<Scalar>(state.beta1);
  const Scalar b2 = static_cast<Scalar>(state.beta2);
  const Scalar eps = static_cast<Scalar>(state.eps);
  for (std::size_t i = 0; i < prefs.size(); ++i) {
    auto p = prefs[i].tensor->array();
    auto g = grefs[i].tensor->array();
    auto m = mrefs[i].tensor->array();
    auto v = vrefs[i].tensor->array();
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.square();
    p -= static_cast<Scalar>(lr) * (m / static_cast<Scalar>(bc1)) /
         ((v / static_cast<Scalar>(bc2)).sqrt() + eps);
  }
}

struct EvalResult {
  double mean_loss = 0.0;
  double perplexity = 0.0;
};

// Token-weighted mean NLL over a shard; perplexity = exp of it.
template <typename Scalar>
EvalResult evaluate_loss(const model::TransformerParams<Scalar>& params,
                         shard::ShardReader& reader, model::MaskMode mode,
                         Direction direction = Direction::kForward) {
  if (reader.size() == 0) throw UsageError("evaluate_loss on an empty shard");
  double total_nll = 0.0;
  std::int64_t total_tokens = 0;
  for (std::uint64_t i = 0; i < reader.size(); ++i) {
    bpe::TokenSequence seq = reader.read(i);
    if (direction == Direction::kBackward) seq = reverse_pair(seq);
    for (int id : seq.ids)
      if (id >= params.config.vocab_size)
        throw UsageError("shard token id exceeds model vocabulary");
    const int start = model::first_scored_token(seq, mode);
    const int n_scored = static_cast<int>(seq.ids.size()) - start;
    if (n_scored <= 0) continue;
    const double logp = model::score_sequence(params, seq, mode);
    total_nll -= logp;
    total_tokens += n_scored;
  }
  if (total_tokens == 0)
    throw UsageError("shard contains no scorable tokens");
  EvalResult r;
  r.mean_loss = total_nll / total_tokens;
  r.perplexity = std::exp(r.mean_loss);
  return r;
}

template <typename Scalar>
struct TrainResult {
  model::TransformerParams<Scalar> params;  // best-validation weights
  TrainLog log;
  double best_validation = 0.0;
};

// When `init` is given, training continues from those weights instead of a
// fresh random initialization (scratch-vs-finetune comparisons).
template <typename Scalar = float>
TrainResult<Scalar> train_model(
    const TrainConfig& cfg, shard::ShardReader& train_shard,
    shard::ShardReader& val_shard, const model::ModelConfig& model_config,
    const model::TransformerParams<Scalar>* init = nullptr) {
  if (train_shard.size() == 0) throw UsageError("training shard is empty");
  model_config.validate();
  if (init && !(init->config == model_config))
    throw UsageError("initial checkpoint config does not match --model flags");

  auto params = init ? *init : model::init_params<Scalar>(model_config, cfg.seed);
  AdamState<Scalar> adam(model_config);
  auto grads = model::zeros_like_params<Scalar>(model_config);

  TrainResult<Scalar> result{params, {}, 0.0};
  double best_val = std::numeric_limits<double>::infinity();
  int epochs_since_best = 0;
  long step = 0;
  bool stop = false;
  const std::vector<int> lengths = train_shard.lengths();

  for (int epoch = 1; epoch <= cfg.max_epochs && !stop; ++epoch) {
    const auto plan = shard::plan_batches(lengths, cfg.token_budget,
                                          mix_seed(cfg.seed, epoch));
    for (const auto& batch : plan.batches) {
      if (cfg.max_steps > 0 && step >= cfg.max_steps) break;
      ++step;
      for (auto& ref : model::tensor_refs(grads)) ref.tensor->setZero();
      double batch_loss = 0.0;
      for (std::uint32_t idx : batch) {
        bpe::TokenSequence seq = train_shard.read(idx);
        if (cfg.direction == Direction::kBackward) seq = reverse_pair(seq);
        batch_loss += model::accumulate_loss_grads(
            params, seq, cfg.mask_mode, 1.0 / batch.size(), grads);
      }
      batch_loss /= batch.size();
      if (!std::isfinite(batch_loss))
        throw DivergenceError("training loss diverged", step);
      clip_global_norm(grads, cfg.clip_norm);
      const double lr =
          noam_lr(step, model_config.d_model, cfg.warmup_steps, cfg.peak_scale);
      adam_step(params, grads, adam, lr);
      result.log.steps.push_back({step, lr, batch_loss});
      if (cfg.stop_loss > 0 && batch_loss < cfg.stop_loss) {
        stop = true;
        break;
      }
    }

    const EvalResult val =
        evaluate_loss(params, val_shard, cfg.mask_mode, cfg.direction);
    result.log.epochs.push_back({epoch, val.mean_loss});
    if (!std::isfinite(val.mean_loss))
      throw DivergenceError("validation loss diverged", step);

    if (val.mean_loss < best_val - cfg.early_stop_epsilon) {
      best_val = val.mean_loss;
      result.params = params;
      epochs_since_best = 0;
    } else {
      ++epochs_since_best;
      if (epochs_since_best > cfg.patience) break;
    }
    if (cfg.max_steps > 0 && step >= cfg.max_steps) break;
  }
  if (!std::isfinite(best_val)) result.params = params;
  result.best_validation = best_val;
  return result;
}

}  // namespace dialogen::train
