#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "dialogen/error.hpp"
#include "dialogen/train.hpp"

using namespace dialogen;
namespace md = dialogen::model;
namespace tr = dialogen::train;

namespace {

md::ModelConfig small_config(int vocab = 8) {
  md::ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.context_len = 16;
  cfg.vocab_size = vocab;
  cfg.ffn_mult = 2;
  return cfg;
}

std::string write_seqs(const std::vector<bpe::TokenSequence>& seqs,
                       const std::string& name) {
  const std::string path = "/tmp/dialogen_train_" + name + ".bin";
  shard::write_shard(seqs, path);
  return path;
}

bpe::TokenSequence seq_of(std::vector<int> ids, int boundary = 0) {
  bpe::TokenSequence s;
  s.ids = std::move(ids);
  s.boundary = boundary;
  return s;
}

bool params_equal(md::TransformerParams<float>& a,
                  md::TransformerParams<float>& b) {
  auto ra = md::tensor_refs(a);
  auto rb = md::tensor_refs(b);
  for (std::size_t i = 0; i < ra.size(); ++i)
    if (*ra[i].tensor != *rb[i].tensor) return false;
  return true;
}

}  // namespace

TEST_CASE("noam_lr closed forms") {
  // Peak at step == warmup: both branches agree there.
  const double peak = tr::noam_lr(100, 64, 100, 1.0);
  CHECK(peak == doctest::Approx(1.0 / 8.0 * 0.1).epsilon(1e-12));
  CHECK(peak == doctest::Approx(0.0125).epsilon(1e-12));

  SUBCASE("nondecreasing before warmup, nonincreasing after") {
    double prev = 0.0;
    for (long s = 1; s <= 100; ++s) {
      const double lr = tr::noam_lr(s, 64, 100, 1.0);
      CHECK(lr >= prev);
      prev = lr;
    }
    for (long s = 100; s <= 400; ++s) {
      const double lr = tr::noam_lr(s, 64, 100, 1.0);
      CHECK(lr <= prev + 1e-18);
      prev = lr;
    }
  }

  SUBCASE("step zero is an error") {
    CHECK_THROWS_AS(tr::noam_lr(0, 64, 100, 1.0), UsageError);
  }
}

TEST_CASE("an optimizer step with lr 0 leaves parameters unchanged") {
  const auto cfg = small_config();
  auto params = md::init_params<float>(cfg, 5);
  auto before = params;
  tr::AdamState<float> adam(cfg);
  bpe::TokenSequence seq = seq_of({1, 2, 3, 4});
  auto lg = md::loss_and_grads(params, seq, md::MaskMode::kFull);
  tr::clip_global_norm(lg.grads, 1.0);
  tr::adam_step(params, lg.grads, adam, /*lr=*/0.0);
  CHECK(params_equal(params, before));
}

TEST_CASE("gradient clipping caps the global norm") {
  const auto cfg = small_config();
  auto grads = md::zeros_like_params<float>(cfg);
  grads.wte.setConstant(10.0f);
  const double before = tr::clip_global_norm(grads, 1.0);
  CHECK(before > 1.0);
  double after_sq = 0.0;
  for (auto& ref : md::tensor_refs(grads))
    after_sq += ref.tensor->cast<double>().squaredNorm();
  CHECK(std::sqrt(after_sq) == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("reverse_pair swaps segment roles around the boundary") {
  const auto seq = seq_of({10, 11, 12, 20, 21}, 3);
  const auto rev = tr::reverse_pair(seq);
  CHECK(rev.ids == std::vector<int>{20, 21, 10, 11, 12});
  CHECK(rev.boundary == 2);
  // Round trip restores the original.
  const auto back = tr::reverse_pair(rev);
  CHECK(back.ids == seq.ids);
  CHECK(back.boundary == seq.boundary);
  CHECK_THROWS_AS(tr::reverse_pair(seq_of({1, 2, 3}, 0)), UsageError);
}

TEST_CASE("evaluate_loss of an untrained model is near vocab-uniform") {
  const auto cfg = small_config(32);
  std::vector<bpe::TokenSequence> seqs;
  Rng rng(3);
  for (int i = 0; i < 16; ++i) {
    std::vector<int> ids;
    for (int t = 0; t < 8; ++t)
      ids.push_back(static_cast<int>(rng.uniform_int(cfg.vocab_size)));
    seqs.push_back(seq_of(std::move(ids)));
  }
  const auto path = write_seqs(seqs, "uniform");
  shard::ShardReader reader(path);

  SUBCASE("zero weights give exactly vocab-size perplexity") {
    const auto params = md::zeros_like_params<float>(cfg);
    const auto r = tr::evaluate_loss(params, reader, md::MaskMode::kFull);
    CHECK(r.perplexity == doctest::Approx(cfg.vocab_size).epsilon(1e-5));
  }

  SUBCASE("random init stays within 5 percent") {
    const auto params = md::init_params<float>(cfg, 9);
    const auto r = tr::evaluate_loss(params, reader, md::MaskMode::kFull);
    CHECK(r.perplexity ==
          doctest::Approx(cfg.vocab_size).epsilon(0.05));
  }
  std::remove(path.c_str());
}

TEST_CASE("evaluate_loss rejects unscorable shards and bad vocab ids") {
  const auto cfg = small_config(4);
  const auto params = md::zeros_like_params<float>(cfg);

  const auto path1 = write_seqs({seq_of({1})}, "short");
  shard::ShardReader r1(path1);
  CHECK_THROWS_AS(tr::evaluate_loss(params, r1, md::MaskMode::kFull),
                  UsageError);
  std::remove(path1.c_str());

  const auto path2 = write_seqs({seq_of({1, 200})}, "badid");
  shard::ShardReader r2(path2);
  CHECK_THROWS_AS(tr::evaluate_loss(params, r2, md::MaskMode::kFull),
                  UsageError);
  std::remove(path2.c_str());
}

TEST_CASE("training overfits a tiny corpus and the loss curve descends") {
  const auto cfg = small_config(8);
  // Eight fixed patterns the model can memorize.
  std::vector<bpe::TokenSequence> seqs;
  Rng rng(12);
  for (int i = 0; i < 8; ++i) {
    std::vector<int> ids;
    for (int t = 0; t < 8; ++t) ids.push_back((i + t * (i % 3 + 1)) % 8);
    seqs.push_back(seq_of(std::move(ids)));
  }
  const auto train_path = write_seqs(seqs, "overfit_train");
  const auto val_path = write_seqs(seqs, "overfit_val");
  shard::ShardReader train_reader(train_path);
  shard::ShardReader val_reader(val_path);

  tr::TrainConfig tcfg;
  tcfg.warmup_steps = 20;
  tcfg.peak_scale = 2.0;
  tcfg.max_epochs = 200;
  tcfg.token_budget = 64;
  tcfg.seed = 7;
  tcfg.patience = 200;  // rely on max_steps
  tcfg.max_steps = 400;
  const auto result = tr::train_model<float>(tcfg, train_reader, val_reader, cfg);

  REQUIRE(result.log.steps.size() >= 50);
  // Smoothed loss over windows of 10 decreases across the first 50 steps.
  auto window_mean = [&](int start) {
    double sum = 0.0;
    for (int i = start; i < start + 10; ++i)
      sum += result.log.steps[i].train_loss;
    return sum / 10;
  };
  for (int w = 0; w + 20 <= 50; w += 10)
    CHECK(window_mean(w + 10) < window_mean(w));
  CHECK(result.log.steps.back().train_loss < 0.5);
  CHECK(result.best_validation < 0.5);

  SUBCASE("training loss on the training shard beats a held-out shard") {
    std::vector<bpe::TokenSequence> other;
    for (int i = 0; i < 8; ++i) {
      std::vector<int> ids;
      for (int t = 0; t < 8; ++t)
        ids.push_back(static_cast<int>(rng.uniform_int(8)));
      other.push_back(seq_of(std::move(ids)));
    }
    const auto held_path = write_seqs(other, "heldout");
    shard::ShardReader held_reader(held_path);
    const auto on_train =
        tr::evaluate_loss(result.params, train_reader, md::MaskMode::kFull);
    const auto on_held =
        tr::evaluate_loss(result.params, held_reader, md::MaskMode::kFull);
    CHECK(on_train.mean_loss < on_held.mean_loss);
    std::remove(held_path.c_str());
  }

  std::remove(train_path.c_str());
  std::remove(val_path.c_str());
}

TEST_CASE("same seed gives an identical train log") {
  const auto cfg = small_config(8);
  std::vector<bpe::TokenSequence> seqs;
  for (int i = 0; i < 6; ++i)
    seqs.push_back(seq_of({i % 8, (i + 1) % 8, (i + 2) % 8, (i + 3) % 8}));
  const auto train_path = write_seqs(seqs, "det_train");
  const auto val_path = write_seqs(seqs, "det_val");

  tr::TrainConfig tcfg;
  tcfg.warmup_steps = 10;
  tcfg.max_epochs = 3;
  tcfg.token_budget = 16;
  tcfg.seed = 99;
  tcfg.patience = 10;

  shard::ShardReader tr1(train_path), va1(val_path);
  const auto a = tr::train_model<float>(tcfg, tr1, va1, cfg);
  shard::ShardReader tr2(train_path), va2(val_path);
  const auto b = tr::train_model<float>(tcfg, tr2, va2, cfg);

  REQUIRE(a.log.steps.size() == b.log.steps.size());
  for (std::size_t i = 0; i < a.log.steps.size(); ++i) {
    CHECK(a.log.steps[i].lr == b.log.steps[i].lr);
    CHECK(a.log.steps[i].train_loss == b.log.steps[i].train_loss);
  }
  REQUIRE(a.log.epochs.size() == b.log.epochs.size());
  for (std::size_t i = 0; i < a.log.epochs.size(); ++i)
    CHECK(a.log.epochs[i].validation_loss == b.log.epochs[i].validation_loss);

  std::remove(train_path.c_str());
  std::remove(val_path.c_str());
}

TEST_CASE("patience 0 stops one epoch beyond the best") {
  const auto cfg = small_config(8);
  // Train tokens {0,1}; validation is the never-seen token 7, so its
  // probability falls monotonically as the model fits the training set.
  std::vector<bpe::TokenSequence> train_seqs;
  for (int i = 0; i < 6; ++i) train_seqs.push_back(seq_of({0, 1, 0, 1, 0, 1}));
  std::vector<bpe::TokenSequence> val_seqs = {seq_of({7, 7, 7, 7, 7, 7})};
  const auto train_path = write_seqs(train_seqs, "pat_train");
  const auto val_path = write_seqs(val_seqs, "pat_val");
  shard::ShardReader train_reader(train_path), val_reader(val_path);

  tr::TrainConfig tcfg;
  tcfg.warmup_steps = 5;
  tcfg.peak_scale = 2.0;
  tcfg.max_epochs = 50;
  tcfg.token_budget = 64;
  tcfg.seed = 1;
  tcfg.patience = 0;

  const auto result = tr::train_model<float>(tcfg, train_reader, val_reader, cfg);
  REQUIRE(result.log.epochs.size() >= 2);
  CHECK(result.log.epochs.size() < 50);  // stopped early
  // The retained checkpoint is the best epoch, one before the stop.
  const auto& epochs = result.log.epochs;
  double best = epochs[0].validation_loss;
  for (const auto& e : epochs) best = std::min(best, e.validation_loss);
  CHECK(result.best_validation == doctest::Approx(best));
  CHECK(epochs.back().validation_loss >
        result.best_validation + tcfg.early_stop_epsilon);

  std::remove(train_path.c_str());
  std::remove(val_path.c_str());
}

TEST_CASE("divergent training aborts with a step number") {
  const auto cfg = small_config(8);
  std::vector<bpe::TokenSequence> seqs;
  for (int i = 0; i < 4; ++i) seqs.push_back(seq_of({0, 1, 2, 3, 4, 5}));
  const auto train_path = write_seqs(seqs, "div_train");
  const auto val_path = write_seqs(seqs, "div_val");
  shard::ShardReader train_reader(train_path), val_reader(val_path);

  tr::TrainConfig tcfg;
  tcfg.warmup_steps = 1;
  tcfg.peak_scale = 1e18;  // guaranteed blow-up
  tcfg.clip_norm = 0.0;    // clipping disabled
  tcfg.max_epochs = 50;
  tcfg.token_budget = 64;

  try {
    tr::train_model<float>(tcfg, train_reader, val_reader, cfg);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.step >= 1);
  }
  std::remove(train_path.c_str());
  std::remove(val_path.c_str());
}

TEST_CASE("backward direction scores the source segment as the target") {
  const auto cfg = small_config(8);
  const auto seq = seq_of({1, 2, 3, 4, 5}, 2);
  const auto rev = tr::reverse_pair(seq);

  // Under target_only the reversed pair scores exactly the tokens the
  // forward direction treats as context.
  CHECK(md::first_scored_token(seq, md::MaskMode::kTargetOnly) == 2);
  CHECK(md::first_scored_token(rev, md::MaskMode::kTargetOnly) == 3);
  CHECK(static_cast<int>(rev.ids.size()) - rev.boundary == seq.boundary);

  const auto params = md::init_params<float>(cfg, 8);
  auto grads_fwd = md::zeros_like_params<float>(cfg);
  auto grads_bwd = md::zeros_like_params<float>(cfg);
  const double fwd_loss = md::accumulate_loss_grads(
      params, seq, md::MaskMode::kTargetOnly, 1.0, grads_fwd);
  const double bwd_loss = md::accumulate_loss_grads(
      params, rev, md::MaskMode::kTargetOnly, 1.0, grads_bwd);
  CHECK(fwd_loss != doctest::Approx(bwd_loss));  // different objectives
}

TEST_CASE("train log CSV has one row per step and epoch") {
  tr::TrainLog log;
  log.steps = {{1, 0.5, 2.0}, {2, 0.25, 1.5}};
  log.epochs = {{1, 1.75}};
  const std::string path = "/tmp/dialogen_trainlog_test.csv";
  log.save_csv(path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "kind,step_or_epoch,lr,loss");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 3);
  std::remove(path.c_str());
}
