#pragma once

// Response generation: greedy decoding, top-K sampling, beam search,
// backward-model (MMI) reranking, and the policy-gradient probe that
// reproduces the parroting degeneracy.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "dialogen/error.hpp"
#include "dialogen/model.hpp"
#include "dialogen/rng.hpp"
#include "dialogen/train.hpp"

namespace dialogen::decode {

struct Hypothesis {
  std::vector<int> ids;         // generated tokens (eos included when hit)
  double forward_logprob = 0.0;
  std::optional<double> backward_loss;
  bool finished = false;        // eos reached or max length hit
};

enum class Method { kGreedy, kTopK, kBeam };

inline Method method_from_string(const std::string& s) {
  if (s == "greedy") return Method::kGreedy;
  if (s == "topk") return Method::kTopK;
  if (s == "beam") return Method::kBeam;
  throw UsageError("unknown decode method: " + s);
}

struct DecodeConfig {
  Method method = Method::kTopK;
  int k = 10;
  int n_samples = 16;
  int beam_width = 10;
  int max_new_tokens = 32;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (k < 1 || n_samples < 1 || beam_width < 1 || max_new_tokens < 1 ||
        temperature <= 0)
      throw UsageError("invalid decode config");
  }
};

namespace detail {

// Indices of the k largest logits, ties resolved toward lower token ids.
inline std::vector<int> top_k_indices(const Eigen::VectorXd& logits, int k) {
  std::vector<int> idx(logits.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  const int kk = std::min<int>(k, static_cast<int>(idx.size()));
  std::partial_sort(idx.begin(), idx.begin() + kk, idx.end(),
                    [&](int a, int b) {
                      if (logits(a) != logits(b)) return logits(a) > logits(b);
                      return a < b;
                    });
  idx.resize(kk);
  return idx;
}

}  // namespace detail

template <typename Scalar>
Hypothesis greedy_decode(const model::TransformerParams<Scalar>& params,
                         const std::vector<int>& source_ids, int eos_id,
                         int max_new_tokens) {
  Hypothesis hyp;
  std::vector<int> context = source_ids;
  for (int stepped = 0; stepped < max_new_tokens; ++stepped) {
    const auto logits = model::forward_logits(params, context);
    const Eigen::VectorXd logp =
        model::row_log_softmax(logits.row(logits.rows() - 1));
    int best = 0;
    logp.maxCoeff(&best);
    hyp.ids.push_back(best);
    hyp.forward_logprob += logp(best);
    context.push_back(best);
    if (best == eos_id) break;
  }
  hyp.finished = true;
  return hyp;
}

template <typename Scalar>
Hypothesis sample_top_k(const model::TransformerParams<Scalar>& params,
                        const std::vector<int>& source_ids, int eos_id,
                        const DecodeConfig& cfg, std::uint64_t stream_seed) {
  Rng rng(stream_seed);
  Hypothesis hyp;
  std::vector<int> context = source_ids;
  for (int stepped = 0; stepped < cfg.max_new_tokens; ++stepped) {
    const auto logits = model::forward_logits(params, context);
    const Eigen::VectorXd logp =
        model::row_log_softmax(logits.row(logits.rows() - 1));
    const auto top = detail::top_k_indices(logp, cfg.k);

    // Renormalized distribution over the top-k, tempered.
    std::vector<double> weights(top.size());
    double max_w = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < top.size(); ++j) {
      weights[j] = logp(top[j]) / cfg.temperature;
      max_w = std::max(max_w, weights[j]);
    }
    double z = 0.0;
    for (double& w : weights) z += (w = std::exp(w - max_w));
    const double u = rng.uniform() * z;
    double acc = 0.0;
    int chosen = top.back();
    for (std::size_t j = 0; j < top.size(); ++j) {
      acc += weights[j];
      if (u < acc) {
        chosen = top[j];
        break;
      }
    }

    hyp.ids.push_back(chosen);
    hyp.forward_logprob += logp(chosen);  // model probability, untempered
    context.push_back(chosen);
    if (chosen == eos_id) break;
  }
  hyp.finished = true;
  return hyp;
}

namespace detail {

struct Beam {
  std::vector<int> ids;
  double logprob = 0.0;
};

inline double length_normalized(double logprob, std::size_t len) {
  return logprob / static_cast<double>(std::max<std::size_t>(len, 1));
}

}  // namespace detail

// Breadth-limited best-first search; partial beams are ranked by raw
// cumulative log-probability, the returned list by logprob / length.
template <typename Scalar>
std::vector<Hypothesis> beam_decode(const model::TransformerParams<Scalar>& params,
                                    const std::vector<int>& source_ids,
                                    int eos_id, const DecodeConfig& cfg) {
  std::vector<detail::Beam> alive{{{}, 0.0}};
  std::vector<detail::Beam> finished;

  for (int stepped = 0; stepped < cfg.max_new_tokens && !alive.empty();
       ++stepped) {
    struct Candidate {
      int parent;
      int token;
      double logprob;
    };
    std::vector<Candidate> candidates;
    for (std::size_t b = 0; b < alive.size(); ++b) {
      std::vector<int> context = source_ids;
      context.insert(context.end(), alive[b].ids.begin(), alive[b].ids.end());
      const auto logits = model::forward_logits(params, context);
      const Eigen::VectorXd logp =
          model::row_log_softmax(logits.row(logits.rows() - 1));
      for (int v = 0; v < logp.size(); ++v)
        candidates.push_back({static_cast<int>(b), v, alive[b].logprob + logp(v)});
    }
    const std::size_t keep =
        std::min<std::size_t>(cfg.beam_width, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + keep,
                      candidates.end(), [](const Candidate& a, const Candidate& b) {
                        if (a.logprob != b.logprob) return a.logprob > b.logprob;
                        if (a.token != b.token) return a.token < b.token;
                        return a.parent < b.parent;
                      });
    std::vector<detail::Beam> next;
    for (std::size_t c = 0; c < keep; ++c) {
      detail::Beam beam = alive[candidates[c].parent];
      beam.ids.push_back(candidates[c].token);
      beam.logprob = candidates[c].logprob;
      if (candidates[c].token == eos_id)
        finished.push_back(std::move(beam));
      else
        next.push_back(std::move(beam));
    }
    alive = std::move(next);
  }
  for (auto& beam : alive) finished.push_back(std::move(beam));

  std::sort(finished.begin(), finished.end(),
            [](const detail::Beam& a, const detail::Beam& b) {
              const double na = detail::length_normalized(a.logprob, a.ids.size());
              const double nb = detail::length_normalized(b.logprob, b.ids.size());
              if (na != nb) return na > nb;
              if (a.logprob != b.logprob) return a.logprob > b.logprob;
              return a.ids < b.ids;
            });
  if (finished.size() > static_cast<std::size_t>(cfg.beam_width))
    finished.resize(cfg.beam_width);

  std::vector<Hypothesis> out;
  for (auto& beam : finished) {
    Hypothesis hyp;
    hyp.ids = std::move(beam.ids);
    hyp.forward_logprob = beam.logprob;
    hyp.finished = true;
    out.push_back(std::move(hyp));
  }
  return out;
}

template <typename Scalar>
std::vector<Hypothesis> generate(const model::TransformerParams<Scalar>& params,
                                 const std::vector<int>& source_ids, int eos_id,
                                 const DecodeConfig& cfg) {
  cfg.validate();
  if (source_ids.empty()) throw UsageError("generate requires a nonempty source");
  if (source_ids.back() != eos_id)
    throw UsageError("source must end with the end-of-text token");

  switch (cfg.method) {
    case Method::kGreedy:
      return {greedy_decode(params, source_ids, eos_id, cfg.max_new_tokens)};
    case Method::kTopK: {
      std::vector<Hypothesis> out;
      out.reserve(cfg.n_samples);
      for (int i = 0; i < cfg.n_samples; ++i)
        out.push_back(sample_top_k(params, source_ids, eos_id, cfg,
                                   mix_seed(cfg.seed, i)));
      return out;
    }
    case Method::kBeam:
      return beam_decode(params, source_ids, eos_id, cfg);
  }
  throw UsageError("unreachable decode method");
}

// Mean per-token NLL of the source given the hypothesis as context, under
// the backward model. The scoring sequence mirrors the reversed-pair
// training layout: hypothesis, eos, then the source segment.
template <typename Scalar>
double backward_source_loss(const model::TransformerParams<Scalar>& backward_params,
                            const std::vector<int>& source_ids,
                            const std::vector<int>& hyp_ids, int eos_id) {
  bpe::TokenSequence seq;
  seq.ids = hyp_ids;
  if (seq.ids.empty() || seq.ids.back() != eos_id) seq.ids.push_back(eos_id);
  seq.boundary = static_cast<int>(seq.ids.size());
  seq.ids.insert(seq.ids.end(), source_ids.begin(), source_ids.end());
  const int n_scored = static_cast<int>(seq.ids.size()) - seq.boundary;
  const double logp =
      model::score_sequence(backward_params, seq, model::MaskMode::kTargetOnly);
  return -logp / n_scored;
}

// Pure selection fold: lowest backward loss, ties to higher forward
// log-probability, then lexicographically smaller ids.
inline std::size_t select_reranked(const std::vector<Hypothesis>& hyps) {
  if (hyps.empty()) throw UsageError("reranking requires hypotheses");
  std::size_t best = 0;
  for (std::size_t i = 1; i < hyps.size(); ++i) {
    const auto& a = hyps[i];
    const auto& b = hyps[best];
    const double la = a.backward_loss.value();
    const double lb = b.backward_loss.value();
    if (la != lb) {
      if (la < lb) best = i;
    } else if (a.forward_logprob != b.forward_logprob) {
      if (a.forward_logprob > b.forward_logprob) best = i;
    } else if (a.ids < b.ids) {
      best = i;
    }
  }
  return best;
}

struct RerankResult {
  Hypothesis best;
  std::vector<Hypothesis> ranked;  // ascending backward loss
};

template <typename Scalar>
RerankResult mmi_rerank(const model::TransformerParams<Scalar>& forward_params,
                        const model::TransformerParams<Scalar>& backward_params,
                        const std::vector<int>& source_ids, int eos_id,
                        const DecodeConfig& cfg) {
  if (backward_params.config.vocab_size != forward_params.config.vocab_size)
    throw UsageError("forward and backward models must share a vocabulary");
  DecodeConfig sampling = cfg;
  sampling.method = Method::kTopK;
  std::vector<Hypothesis> hyps =
      generate(forward_params, source_ids, eos_id, sampling);

  bool any_content = false;
  for (auto& hyp : hyps) {
    for (int id : hyp.ids)
      if (id != eos_id) any_content = true;
    hyp.backward_loss =
        backward_source_loss(backward_params, source_ids, hyp.ids, eos_id);
  }
  if (!any_content)
    throw UsageError("all sampled hypotheses are empty; nothing to rerank");

  RerankResult result;
  result.best = hyps[select_reranked(hyps)];
  result.ranked = std::move(hyps);
  std::sort(result.ranked.begin(), result.ranked.end(),
            [](const Hypothesis& a, const Hypothesis& b) {
              if (*a.backward_loss != *b.backward_loss)
                return *a.backward_loss < *b.backward_loss;
              if (a.forward_logprob != b.forward_logprob)
                return a.forward_logprob > b.forward_logprob;
              return a.ids < b.ids;
            });
  return result;
}

// ---------------------------------------------------------------------------
// Policy-gradient probe (REINFORCE with a sample-averaged baseline).

struct RlConfig {
  int n_rollouts = 8;
  double lr = 1e-3;
  double parrot_overlap_threshold = 0.8;
  int epochs = 10;
  int k = 10;  // top-K width for rollout sampling
  int max_new_tokens = 16;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_rollouts < 2)
      throw UsageError("RL baseline needs at least 2 rollouts");
    if (lr <= 0 || epochs < 1 || k < 1 || max_new_tokens < 1)
      throw UsageError("invalid RL config");
  }
};

struct RlStep {
  long step;
  double mean_reward;
  double parrot_rate;
};

struct RlReport {
  std::vector<RlStep> steps;
  std::vector<double> epoch_parrot_rate;
};

namespace detail {

inline std::size_t lcs_length(const std::vector<int>& a,
                              const std::vector<int>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = (a[i - 1] == b[j - 1]) ? prev[j - 1] + 1
                                      : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline std::vector<int> strip_eos(const std::vector<int>& ids, int eos_id) {
  std::vector<int> out;
  for (int id : ids)
    if (id != eos_id) out.push_back(id);
  return out;
}

}  // namespace detail

// Longest-common-subsequence overlap with the source, relative to source
// length (eos tokens excluded on both sides).
inline double parrot_overlap(const std::vector<int>& source_ids,
                             const std::vector<int>& hyp_ids, int eos_id) {
  const auto src = detail::strip_eos(source_ids, eos_id);
  const auto hyp = detail::strip_eos(hyp_ids, eos_id);
  if (src.empty()) return 0.0;
  return static_cast<double>(detail::lcs_length(src, hyp)) /
         static_cast<double>(src.size());
}

// One REINFORCE update per source per epoch. The reward is the backward
// model's log-likelihood of the source given the rollout; the advantage
// subtracts the rollout-batch mean. Updates forward_params in place.
template <typename Scalar>
RlReport rl_finetune_probe(model::TransformerParams<Scalar>& forward_params,
                           const model::TransformerParams<Scalar>& backward_params,
                           const std::vector<std::vector<int>>& sources,
                           int eos_id, const RlConfig& cfg) {
  cfg.validate();
  if (sources.empty()) throw UsageError("RL probe requires sources");

  RlReport report;
  auto grads = model::zeros_like_params<Scalar>(forward_params.config);
  long step = 0;

  DecodeConfig sampling;
  sampling.method = Method::kTopK;
  sampling.k = cfg.k;
  sampling.n_samples = cfg.n_rollouts;
  sampling.max_new_tokens = cfg.max_new_tokens;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double epoch_parrots = 0.0;
    long epoch_rollouts = 0;
    for (const auto& source : sources) {
      ++step;
      sampling.seed = mix_seed(cfg.seed, step);
      std::vector<Hypothesis> rollouts =
          generate(forward_params, source, eos_id, sampling);

      std::vector<double> rewards(rollouts.size());
      double mean_reward = 0.0;
      for (std::size_t i = 0; i < rollouts.size(); ++i) {
        const int n_src = static_cast<int>(source.size());
        const double loss = backward_source_loss(
            backward_params, source, rollouts[i].ids, eos_id);
        rewards[i] = -loss * n_src;  // total backward log-likelihood
        mean_reward += rewards[i];
      }
      mean_reward /= rollouts.size();

      for (auto& ref : model::tensor_refs(grads)) ref.tensor->setZero();
      bool any = false;
      for (std::size_t i = 0; i < rollouts.size(); ++i) {
        const double advantage = rewards[i] - mean_reward;
        if (advantage == 0.0 || rollouts[i].ids.empty()) continue;
        any = true;
        bpe::TokenSequence seq;
        seq.ids = source;
        seq.boundary = static_cast<int>(source.size());
        seq.ids.insert(seq.ids.end(), rollouts[i].ids.begin(),
                       rollouts[i].ids.end());
        const double n_hyp = static_cast<double>(rollouts[i].ids.size());
        // d/dtheta [-E[A * log pi]] = A * n * d(mean nll)/dtheta
        model::accumulate_loss_grads(forward_params, seq,
                                     model::MaskMode::kTargetOnly,
                                     advantage * n_hyp / rollouts.size(),
                                     grads);
      }
      if (any) {
        train::clip_global_norm(grads, 1.0);
        auto prefs = model::tensor_refs(forward_params);
        auto grefs = model::tensor_refs(grads);
        for (std::size_t i = 0; i < prefs.size(); ++i)
          *prefs[i].tensor -= static_cast<Scalar>(cfg.lr) * *grefs[i].tensor;
      }

      double parrots = 0.0;
      for (const auto& rollout : rollouts)
        if (parrot_overlap(source, rollout.ids, eos_id) >=
            cfg.parrot_overlap_threshold)
          parrots += 1.0;
      epoch_parrots += parrots;
      epoch_rollouts += static_cast<long>(rollouts.size());
      const double parrot_rate = parrots / rollouts.size();

      if (!std::isfinite(mean_reward))
        throw DivergenceError("RL reward diverged", step);
      report.steps.push_back({step, mean_reward, parrot_rate});
    }
    report.epoch_parrot_rate.push_back(epoch_parrots / epoch_rollouts);
  }
  return report;
}

}  // namespace dialogen::decode
