// dialogen -- single entry point wiring the pipeline:
// ingest -> train-bpe -> pack -> train -> generate/rerank -> eval,
// plus build-testset, inspect, and an interactive chat REPL.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "dialogen/bpe.hpp"
#include "dialogen/corpus.hpp"
#include "dialogen/decode.hpp"
#include "dialogen/error.hpp"
#include "dialogen/manifest.hpp"
#include "dialogen/metrics.hpp"
#include "dialogen/model.hpp"
#include "dialogen/shard.hpp"
#include "dialogen/train.hpp"
#include "json.hpp"

namespace {

using namespace dialogen;
using nlohmann::ordered_json;

constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitFormat = 4;
constexpr int kExitDivergence = 5;

struct FilterFlags {
  std::string top50_path;
  std::string blocklist_path;
  std::string excluded_path;
  int max_total_words = 200;
  int repetition_run = 3;
  std::int64_t bland_min_count = 1000;
  double bland_fraction = 0.9;

  void attach(CLI::App* cmd) {
    cmd->add_option("--top50", top50_path,
                    "file with the most frequent words, one per line")
        ->required();
    cmd->add_option("--blocklist", blocklist_path,
                    "file with blocked phrases, one per line");
    cmd->add_option("--excluded-subreddits", excluded_path,
                    "file with excluded subreddit names, one per line");
    cmd->add_option("--max-total-words", max_total_words,
                    "drop when source+target exceed this many words");
    cmd->add_option("--repetition-run", repetition_run,
                    "drop on this many consecutive identical words");
    cmd->add_option("--bland-min-count", bland_min_count,
                    "trigram count that marks a trigram as bland");
    cmd->add_option("--bland-fraction", bland_fraction,
                    "bland-trigram fraction that drops the target");
  }

  corpus::FilterConfig load() const {
    corpus::FilterConfig cfg;
    cfg.top50_words = corpus::load_word_set(top50_path);
    if (cfg.top50_words.empty())
      throw UsageError("top50 word list is empty: " + top50_path);
    if (!blocklist_path.empty())
      cfg.blocklist_phrases = corpus::load_phrase_list(blocklist_path);
    if (!excluded_path.empty())
      cfg.excluded_subreddits = corpus::load_word_set(excluded_path);
    cfg.max_total_words = max_total_words;
    cfg.repetition_run = repetition_run;
    cfg.bland_trigram_min_count = bland_min_count;
    cfg.bland_fraction = bland_fraction;
    return cfg;
  }

  ordered_json to_json() const {
    return {{"top50", top50_path},
            {"blocklist", blocklist_path},
            {"excluded_subreddits", excluded_path},
            {"max_total_words", max_total_words},
            {"repetition_run", repetition_run},
            {"bland_min_count", bland_min_count},
            {"bland_fraction", bland_fraction}};
  }
};

struct ModelFlags {
  int layers = 4;
  int d_model = 128;
  int heads = 4;
  int context_len = 256;
  int ffn_mult = 4;

  void attach(CLI::App* cmd) {
    cmd->add_option("--layers", layers, "transformer layers");
    cmd->add_option("--d-model", d_model, "embedding width");
    cmd->add_option("--heads", heads, "attention heads");
    cmd->add_option("--context-len", context_len, "context window in tokens");
    cmd->add_option("--ffn-mult", ffn_mult, "feed-forward width multiplier");
  }

  model::ModelConfig to_config(int vocab_size) const {
    model::ModelConfig cfg;
    cfg.n_layers = layers;
    cfg.d_model = d_model;
    cfg.n_heads = heads;
    cfg.context_len = context_len;
    cfg.vocab_size = vocab_size;
    cfg.ffn_mult = ffn_mult;
    cfg.validate();
    return cfg;
  }
};

std::vector<std::vector<std::string>> read_contexts(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open source file: " + path);
  std::vector<std::vector<std::string>> contexts;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> turns;
    std::size_t start = 0;
    while (true) {
      const std::size_t tab = line.find('\t', start);
      turns.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    contexts.push_back(std::move(turns));
  }
  return contexts;
}

// Encodes context turns (eos after each) and left-truncates so that
// `reserve` new tokens still fit in the window.
std::vector<int> encode_context(const std::vector<std::string>& turns,
                                const bpe::BpeVocab& vocab, int context_len,
                                int reserve) {
  std::vector<int> ids;
  for (const auto& turn : turns) {
    const auto t = vocab.encode(turn);
    ids.insert(ids.end(), t.begin(), t.end());
    ids.push_back(vocab.eos_id());
  }
  const int budget = std::max(context_len - reserve, 1);
  if (static_cast<int>(ids.size()) > budget)
    ids.erase(ids.begin(), ids.end() - budget);
  if (ids.empty() || ids.back() != vocab.eos_id())
    ids.push_back(vocab.eos_id());
  return ids;
}

std::string hypothesis_text(const decode::Hypothesis& hyp,
                            const bpe::BpeVocab& vocab) {
  std::vector<int> ids;
  for (int id : hyp.ids)
    if (id != vocab.eos_id()) ids.push_back(id);
  return vocab.decode(ids);
}

int run(int argc, char** argv) {
  CLI::App app{"dialogue corpus, training, decoding, and evaluation toolkit"};
  app.require_subcommand(1);
  app.set_config("--config", "",
                 "config file ([subcommand] sections with key=value lines, "
                 "given before the subcommand); flags win over file values");

  // ---- ingest ----
  auto* ingest = app.add_subcommand(
      "ingest", "parse a comment dump into filtered dialogue instances");
  std::string in_dump, in_out, in_report = "filter_report.json";
  int in_workers = 1;
  FilterFlags in_filters;
  ingest->add_option("--dump", in_dump, "newline-delimited JSON comment dump")
      ->required();
  ingest->add_option("--out", in_out, "output instances (JSON lines)")
      ->required();
  ingest->add_option("--report", in_report, "filter report JSON path");
  ingest->add_option("--workers", in_workers, "parallel filter workers");
  in_filters.attach(ingest);

  // ---- build-testset ----
  auto* testset = app.add_subcommand(
      "build-testset", "extract a multi-reference test set from a dump");
  std::string ts_dump, ts_out;
  int ts_min_responses = 6;
  FilterFlags ts_filters;
  testset->add_option("--dump", ts_dump, "comment dump")->required();
  testset->add_option("--out", ts_out, "multi-reference JSON lines")->required();
  testset->add_option("--min-responses", ts_min_responses,
                      "minimum sibling replies per context");
  ts_filters.attach(testset);

  // ---- train-bpe ----
  auto* trainbpe = app.add_subcommand("train-bpe", "learn a BPE vocabulary");
  std::string tb_instances, tb_out;
  int tb_vocab_size = 2048;
  trainbpe->add_option("--instances", tb_instances, "instances JSON lines")
      ->required();
  trainbpe->add_option("--out", tb_out, "vocab JSON path")->required();
  trainbpe->add_option("--vocab-size", tb_vocab_size, "target vocabulary size");

  // ---- pack ----
  auto* pack = app.add_subcommand(
      "pack", "flatten instances into a lazy-loading token shard");
  std::string pk_instances, pk_vocab, pk_out, pk_val_out, pk_mode = "pair";
  double pk_val_fraction = 0.0;
  int pk_context_len = 256;
  std::uint64_t pk_seed = 0;
  pack->add_option("--instances", pk_instances, "instances JSON lines")
      ->required();
  pack->add_option("--vocab", pk_vocab, "vocab JSON")->required();
  pack->add_option("--out", pk_out, "output shard")->required();
  pack->add_option("--mode", pk_mode, "pair or full")
      ->check(CLI::IsMember({"pair", "full"}));
  pack->add_option("--context-len", pk_context_len,
                   "truncate sessions to this many tokens");
  pack->add_option("--val-out", pk_val_out, "validation shard path");
  pack->add_option("--val-fraction", pk_val_fraction,
                   "fraction of instances routed to the validation shard");
  pack->add_option("--seed", pk_seed, "seed for the validation split");

  // ---- train ----
  auto* train_cmd = app.add_subcommand("train", "train a transformer LM");
  std::string tr_shard, tr_val_shard, tr_vocab, tr_out, tr_log = "train_log.csv";
  std::string tr_direction = "forward", tr_mask = "full";
  ModelFlags tr_model;
  train::TrainConfig tr_cfg;
  train_cmd->add_option("--shard", tr_shard, "training shard")->required();
  train_cmd->add_option("--val-shard", tr_val_shard, "validation shard")
      ->required();
  train_cmd->add_option("--vocab", tr_vocab, "vocab JSON (fixes vocab size)")
      ->required();
  train_cmd->add_option("--out", tr_out, "checkpoint path")->required();
  train_cmd->add_option("--log", tr_log, "training log CSV path");
  tr_model.attach(train_cmd);
  train_cmd->add_option("--warmup", tr_cfg.warmup_steps, "warm-up steps");
  train_cmd->add_option("--peak-scale", tr_cfg.peak_scale,
                        "learning-rate scale");
  train_cmd->add_option("--max-epochs", tr_cfg.max_epochs, "epoch cap");
  train_cmd->add_option("--token-budget", tr_cfg.token_budget,
                        "padded tokens per batch");
  train_cmd->add_option("--seed", tr_cfg.seed, "seed for init and batching");
  train_cmd->add_option("--direction", tr_direction, "forward or backward")
      ->check(CLI::IsMember({"forward", "backward"}));
  train_cmd->add_option("--mask-mode", tr_mask, "full or target_only")
      ->check(CLI::IsMember({"full", "target_only"}));
  train_cmd->add_option("--patience", tr_cfg.patience,
                        "epochs without validation progress tolerated");
  train_cmd->add_option("--early-stop-epsilon", tr_cfg.early_stop_epsilon,
                        "required validation improvement in nats");
  train_cmd->add_option("--clip-norm", tr_cfg.clip_norm,
                        "global gradient-norm clip");
  train_cmd->add_option("--max-steps", tr_cfg.max_steps,
                        "hard step cap (0 = none)");
  train_cmd->add_option("--stop-loss", tr_cfg.stop_loss,
                        "stop once a step's loss falls below (0 = never)");
  std::string tr_init;
  train_cmd->add_option("--init-from", tr_init,
                        "continue from an existing checkpoint instead of "
                        "random initialization");

  // ---- generate ----
  auto* gen = app.add_subcommand("generate", "decode responses for a source file");
  std::string g_ckpt, g_vocab, g_source, g_out, g_text_out, g_method = "greedy";
  decode::DecodeConfig g_cfg;
  gen->add_option("--checkpoint", g_ckpt, "model checkpoint")->required();
  gen->add_option("--vocab", g_vocab, "vocab JSON")->required();
  gen->add_option("--source", g_source,
                  "contexts, one per line, turns separated by tabs")
      ->required();
  gen->add_option("--out", g_out, "hypotheses as JSON lines")->required();
  gen->add_option("--text-out", g_text_out,
                  "also write best hypothesis text, one per line");
  gen->add_option("--method", g_method, "greedy, topk, or beam")
      ->check(CLI::IsMember({"greedy", "topk", "beam"}));
  auto* g_k = gen->add_option("--k", g_cfg.k, "top-k width");
  auto* g_n = gen->add_option("--n-samples", g_cfg.n_samples,
                              "independent samples per source");
  auto* g_b = gen->add_option("--beam-width", g_cfg.beam_width, "beam width");
  gen->add_option("--max-new-tokens", g_cfg.max_new_tokens,
                  "generation length cap");
  gen->add_option("--temperature", g_cfg.temperature, "sampling temperature");
  gen->add_option("--seed", g_cfg.seed, "sampling seed");

  // ---- rerank ----
  auto* rerank = app.add_subcommand(
      "rerank", "top-K sampling plus backward-model reranking");
  std::string r_fwd, r_bwd, r_vocab, r_source, r_out, r_text_out, r_ranked_out;
  decode::DecodeConfig r_cfg;
  rerank->add_option("--forward-checkpoint", r_fwd, "forward model")->required();
  rerank->add_option("--backward-checkpoint", r_bwd, "backward model")
      ->required();
  rerank->add_option("--vocab", r_vocab, "vocab JSON")->required();
  rerank->add_option("--source", r_source, "contexts file")->required();
  rerank->add_option("--out", r_out, "best hypothesis per source, JSON lines")
      ->required();
  rerank->add_option("--text-out", r_text_out,
                     "also write best hypothesis text, one per line");
  rerank->add_option("--ranked-out", r_ranked_out,
                     "full ranked hypothesis lists, JSON lines");
  rerank->add_option("--k", r_cfg.k, "top-k width");
  rerank->add_option("--n-samples", r_cfg.n_samples, "samples per source");
  rerank->add_option("--max-new-tokens", r_cfg.max_new_tokens,
                     "generation length cap");
  rerank->add_option("--temperature", r_cfg.temperature, "sampling temperature");
  rerank->add_option("--seed", r_cfg.seed, "sampling seed");

  // ---- eval ----
  auto* eval = app.add_subcommand("eval", "score hypotheses against references");
  std::string e_hyp, e_ref, e_out = "metric_report.json";
  eval->add_option("--hyp", e_hyp, "hypotheses, one per line")->required();
  eval->add_option("--ref", e_ref, "references, JSON lines with a refs array")
      ->required();
  eval->add_option("--out", e_out, "metric report JSON path");

  // ---- chat ----
  auto* chat = app.add_subcommand("chat", "interactive REPL");
  std::string c_ckpt, c_vocab, c_bwd, c_method = "topk";
  decode::DecodeConfig c_cfg;
  bool c_mmi = false;
  chat->add_option("--checkpoint", c_ckpt, "model checkpoint")->required();
  chat->add_option("--vocab", c_vocab, "vocab JSON")->required();
  chat->add_option("--backward-checkpoint", c_bwd,
                   "backward model for MMI reranking");
  chat->add_flag("--mmi", c_mmi, "rerank samples with the backward model");
  chat->add_option("--method", c_method, "greedy, topk, or beam")
      ->check(CLI::IsMember({"greedy", "topk", "beam"}));
  chat->add_option("--k", c_cfg.k, "top-k width");
  chat->add_option("--n-samples", c_cfg.n_samples, "samples (MMI)");
  chat->add_option("--beam-width", c_cfg.beam_width, "beam width");
  chat->add_option("--max-new-tokens", c_cfg.max_new_tokens, "length cap");
  chat->add_option("--temperature", c_cfg.temperature, "sampling temperature");
  chat->add_option("--seed", c_cfg.seed, "sampling seed");

  // ---- inspect ----
  auto* inspect = app.add_subcommand("inspect", "describe shard or checkpoint");
  std::string i_shard, i_ckpt, i_vocab;
  inspect->add_option("--shard", i_shard, "shard to describe");
  inspect->add_option("--checkpoint", i_ckpt, "checkpoint to describe");
  inspect->add_option("--vocab", i_vocab, "vocab to describe");

  for (auto* sub : app.get_subcommands([](CLI::App*) { return true; }))
    sub->configurable(true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  if (ingest->parsed()) {
    const auto cfg = in_filters.load();
    corpus::ParseStats stats;
    const auto nodes = corpus::parse_dump_file(in_dump, &stats);
    const auto instances = corpus::extract_paths(nodes);
    const auto bland = corpus::build_bland_table(instances);
    std::vector<corpus::DialogueInstance> kept;
    const auto report =
        corpus::run_filters(instances, cfg, bland, &kept, in_workers);
    corpus::write_instances(kept, in_out);
    corpus::write_filter_report(report, in_report);
    ordered_json config = in_filters.to_json();
    config["workers"] = in_workers;
    config["skipped_malformed"] = stats.skipped_malformed;
    config["duplicate_ids"] = stats.duplicate_ids;
    manifest::write_manifest("ingest", config, {in_dump}, {in_out, in_report});
    std::cout << "parsed " << stats.parsed << " nodes, extracted "
              << instances.size() << " instances, kept " << report.kept
              << "\n";
  } else if (testset->parsed()) {
    const auto cfg = ts_filters.load();
    const auto nodes = corpus::parse_dump_file(ts_dump, nullptr);
    const auto instances = corpus::extract_paths(nodes);
    const auto bland = corpus::build_bland_table(instances);
    const auto set = corpus::build_multiref(nodes, cfg, bland, ts_min_responses);
    corpus::write_multiref(set, ts_out);
    ordered_json config = ts_filters.to_json();
    config["min_responses"] = ts_min_responses;
    manifest::write_manifest("build-testset", config, {ts_dump}, {ts_out});
    std::cout << "wrote " << set.entries.size() << " multi-reference entries\n";
  } else if (trainbpe->parsed()) {
    const auto instances = corpus::read_instances(tb_instances);
    std::vector<std::string> texts;
    for (const auto& inst : instances)
      for (const auto& turn : inst.turns) texts.push_back(turn);
    const auto vocab = bpe::train_bpe(texts, tb_vocab_size);
    vocab.save(tb_out);
    manifest::write_manifest("train-bpe",
                             {{"vocab_size", tb_vocab_size},
                              {"instances", tb_instances}},
                             {tb_instances}, {tb_out});
    std::cout << "trained vocab of size " << vocab.vocab_size() << " ("
              << vocab.merges().size() << " merges)\n";
  } else if (pack->parsed()) {
    const auto instances = corpus::read_instances(pk_instances);
    const auto vocab = bpe::BpeVocab::load(pk_vocab);
    const auto mode =
        pk_mode == "pair" ? bpe::FlattenMode::kPair : bpe::FlattenMode::kFull;
    if (!pk_val_out.empty() &&
        (pk_val_fraction <= 0.0 || pk_val_fraction >= 1.0))
      throw UsageError("--val-fraction must be in (0,1) when --val-out is set");
    std::vector<bpe::TokenSequence> train_seqs, val_seqs;
    std::size_t skipped = 0;
    for (std::size_t i = 0; i < instances.size(); ++i) {
      bpe::TokenSequence seq;
      try {
        seq = bpe::flatten_session(instances[i], vocab, mode, pk_context_len);
      } catch (const FormatError&) {
        ++skipped;  // final turn alone exceeds the window
        continue;
      }
      const bool to_val =
          !pk_val_out.empty() &&
          (mix_seed(pk_seed, i) % 1000000) < pk_val_fraction * 1000000;
      (to_val ? val_seqs : train_seqs).push_back(std::move(seq));
    }
    const auto summary = shard::write_shard(train_seqs, pk_out);
    std::vector<std::string> outputs{pk_out};
    if (!pk_val_out.empty()) {
      shard::write_shard(val_seqs, pk_val_out);
      outputs.push_back(pk_val_out);
    }
    manifest::write_manifest("pack",
                             {{"mode", pk_mode},
                              {"context_len", pk_context_len},
                              {"val_fraction", pk_val_fraction},
                              {"seed", pk_seed},
                              {"skipped_overlong", skipped}},
                             {pk_instances, pk_vocab}, outputs);
    std::cout << "packed " << summary.record_count << " sequences ("
              << summary.payload_bytes << " payload bytes)";
    if (!pk_val_out.empty()) std::cout << ", " << val_seqs.size() << " to validation";
    std::cout << "\n";
  } else if (train_cmd->parsed()) {
    const auto vocab = bpe::BpeVocab::load(tr_vocab);
    tr_cfg.direction = train::direction_from_string(tr_direction);
    tr_cfg.mask_mode = model::mask_mode_from_string(tr_mask);
    const auto model_config = tr_model.to_config(vocab.vocab_size());
    shard::ShardReader train_reader(tr_shard);
    shard::ShardReader val_reader(tr_val_shard);
    std::optional<model::TransformerParams<float>> init;
    if (!tr_init.empty()) init = model::load_checkpoint<float>(tr_init);
    const auto result = train::train_model<float>(
        tr_cfg, train_reader, val_reader, model_config,
        init ? &*init : nullptr);
    model::save_checkpoint(result.params, tr_out);
    result.log.save_csv(tr_log);
    ordered_json mc;
    to_json(mc, model_config);
    manifest::write_manifest(
        "train",
        {{"model", mc},
         {"warmup", tr_cfg.warmup_steps},
         {"peak_scale", tr_cfg.peak_scale},
         {"max_epochs", tr_cfg.max_epochs},
         {"token_budget", tr_cfg.token_budget},
         {"seed", tr_cfg.seed},
         {"direction", tr_direction},
         {"mask_mode", tr_mask},
         {"patience", tr_cfg.patience},
         {"early_stop_epsilon", tr_cfg.early_stop_epsilon},
         {"clip_norm", tr_cfg.clip_norm},
         {"max_steps", tr_cfg.max_steps},
         {"stop_loss", tr_cfg.stop_loss},
         {"init_from", tr_init}},
        {tr_shard, tr_val_shard, tr_vocab}, {tr_out, tr_log});
    std::cout << "trained " << result.log.steps.size()
              << " steps; best validation loss " << result.best_validation
              << "\n";
  } else if (gen->parsed()) {
    g_cfg.method = decode::method_from_string(g_method);
    if (g_cfg.method == decode::Method::kBeam && (g_k->count() || g_n->count()))
      throw UsageError("beam search does not take --k/--n-samples");
    if (g_cfg.method != decode::Method::kBeam && g_b->count())
      throw UsageError("--beam-width requires --method beam");
    const auto vocab = bpe::BpeVocab::load(g_vocab);
    const auto params = model::load_checkpoint<float>(g_ckpt);
    if (params.config.vocab_size != vocab.vocab_size())
      throw FormatError("checkpoint vocabulary size does not match vocab file");
    const auto contexts = read_contexts(g_source);
    std::ofstream out(g_out, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + g_out);
    std::ofstream text_out;
    if (!g_text_out.empty()) {
      text_out.open(g_text_out, std::ios::binary);
      if (!text_out) throw IoError("cannot open for writing: " + g_text_out);
    }
    for (const auto& turns : contexts) {
      const auto source = encode_context(turns, vocab, params.config.context_len,
                                         g_cfg.max_new_tokens);
      const auto hyps = decode::generate(params, source, vocab.eos_id(), g_cfg);
      for (const auto& hyp : hyps) {
        ordered_json rec;
        rec["source"] = turns;
        rec["hypothesis"] = hypothesis_text(hyp, vocab);
        rec["forward_logprob"] = hyp.forward_logprob;
        rec["backward_loss"] = nullptr;
        out << rec.dump() << '\n';
      }
      if (text_out.is_open())
        text_out << hypothesis_text(hyps.front(), vocab) << '\n';
    }
    out.close();
    if (text_out.is_open()) text_out.close();
    ordered_json config{{"method", g_method},
                        {"k", g_cfg.k},
                        {"n_samples", g_cfg.n_samples},
                        {"beam_width", g_cfg.beam_width},
                        {"max_new_tokens", g_cfg.max_new_tokens},
                        {"temperature", g_cfg.temperature},
                        {"seed", g_cfg.seed}};
    std::vector<std::string> outputs{g_out};
    if (!g_text_out.empty()) outputs.push_back(g_text_out);
    manifest::write_manifest("generate", config, {g_ckpt, g_vocab, g_source},
                             outputs);
    std::cout << "decoded " << contexts.size() << " contexts\n";
  } else if (rerank->parsed()) {
    r_cfg.method = decode::Method::kTopK;
    const auto vocab = bpe::BpeVocab::load(r_vocab);
    const auto fwd = model::load_checkpoint<float>(r_fwd);
    const auto bwd = model::load_checkpoint<float>(r_bwd);
    if (fwd.config.vocab_size != vocab.vocab_size() ||
        bwd.config.vocab_size != vocab.vocab_size())
      throw FormatError("checkpoint vocabulary size does not match vocab file");
    const auto contexts = read_contexts(r_source);
    std::ofstream out(r_out, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + r_out);
    std::ofstream text_out, ranked_out;
    if (!r_text_out.empty()) text_out.open(r_text_out, std::ios::binary);
    if (!r_ranked_out.empty()) ranked_out.open(r_ranked_out, std::ios::binary);
    for (const auto& turns : contexts) {
      const auto source = encode_context(turns, vocab, fwd.config.context_len,
                                         r_cfg.max_new_tokens);
      const auto result =
          decode::mmi_rerank(fwd, bwd, source, vocab.eos_id(), r_cfg);
      ordered_json rec;
      rec["source"] = turns;
      rec["hypothesis"] = hypothesis_text(result.best, vocab);
      rec["forward_logprob"] = result.best.forward_logprob;
      rec["backward_loss"] = *result.best.backward_loss;
      out << rec.dump() << '\n';
      if (text_out.is_open())
        text_out << hypothesis_text(result.best, vocab) << '\n';
      if (ranked_out.is_open()) {
        for (const auto& hyp : result.ranked) {
          ordered_json rr;
          rr["source"] = turns;
          rr["hypothesis"] = hypothesis_text(hyp, vocab);
          rr["forward_logprob"] = hyp.forward_logprob;
          rr["backward_loss"] = *hyp.backward_loss;
          ranked_out << rr.dump() << '\n';
        }
      }
    }
    ordered_json config{{"k", r_cfg.k},
                        {"n_samples", r_cfg.n_samples},
                        {"max_new_tokens", r_cfg.max_new_tokens},
                        {"temperature", r_cfg.temperature},
                        {"seed", r_cfg.seed}};
    std::vector<std::string> outputs{r_out};
    if (!r_text_out.empty()) outputs.push_back(r_text_out);
    if (!r_ranked_out.empty()) outputs.push_back(r_ranked_out);
    manifest::write_manifest("rerank", config,
                             {r_fwd, r_bwd, r_vocab, r_source}, outputs);
    std::cout << "reranked " << contexts.size() << " contexts\n";
  } else if (eval->parsed()) {
    const auto report = metrics::evaluate_run(e_hyp, e_ref);
    metrics::write_report(report, e_out);
    manifest::write_manifest("eval", ordered_json::object(), {e_hyp, e_ref},
                             {e_out});
    std::cout << metrics::report_to_table(report);
  } else if (chat->parsed()) {
    c_cfg.method = decode::method_from_string(c_method);
    const auto vocab = bpe::BpeVocab::load(c_vocab);
    const auto params = model::load_checkpoint<float>(c_ckpt);
    std::optional<model::TransformerParams<float>> bwd;
    if (c_mmi) {
      if (c_bwd.empty())
        throw UsageError("--mmi requires --backward-checkpoint");
      bwd = model::load_checkpoint<float>(c_bwd);
    }
    std::vector<std::string> history;
    std::string line;
    std::cout << "chat ready; /reset clears history, /quit exits\n> "
              << std::flush;
    std::uint64_t turn_seed = c_cfg.seed;
    while (std::getline(std::cin, line)) {
      const std::string text = corpus::normalize_whitespace(line);
      if (text == "/quit") break;
      if (text == "/reset") {
        history.clear();
        std::cout << "(history cleared)\n> " << std::flush;
        continue;
      }
      if (text.empty()) {
        std::cout << "> " << std::flush;
        continue;
      }
      history.push_back(text);
      const auto source = encode_context(history, vocab,
                                         params.config.context_len,
                                         c_cfg.max_new_tokens);
      decode::DecodeConfig turn_cfg = c_cfg;
      turn_cfg.seed = turn_seed++;
      decode::Hypothesis best;
      if (bwd) {
        best = decode::mmi_rerank(params, *bwd, source, vocab.eos_id(), turn_cfg)
                   .best;
      } else {
        best = decode::generate(params, source, vocab.eos_id(), turn_cfg)
                   .front();
      }
      const std::string reply = hypothesis_text(best, vocab);
      history.push_back(reply);
      std::cout << reply << "\n> " << std::flush;
    }
  } else if (inspect->parsed()) {
    if (i_shard.empty() && i_ckpt.empty() && i_vocab.empty())
      throw UsageError("inspect needs --shard, --checkpoint, or --vocab");
    if (!i_shard.empty()) {
      shard::ShardReader reader(i_shard);
      const auto lengths = reader.lengths();
      int min_len = 0, max_len = 0;
      double mean = 0.0;
      if (!lengths.empty()) {
        min_len = *std::min_element(lengths.begin(), lengths.end());
        max_len = *std::max_element(lengths.begin(), lengths.end());
        for (int len : lengths) mean += len;
        mean /= lengths.size();
      }
      std::cout << "shard " << i_shard << ": " << reader.size()
                << " records, token lengths min/mean/max = " << min_len << "/"
                << mean << "/" << max_len << "\n";
    }
    if (!i_ckpt.empty()) {
      const auto params = model::load_checkpoint<float>(i_ckpt);
      ordered_json mc;
      to_json(mc, params.config);
      std::int64_t count = 0;
      for (auto& ref : model::tensor_refs(
               const_cast<model::TransformerParams<float>&>(params)))
        count += ref.tensor->size();
      std::cout << "checkpoint " << i_ckpt << ": config " << mc.dump()
                << ", " << count << " parameters\n";
    }
    if (!i_vocab.empty()) {
      const auto vocab = bpe::BpeVocab::load(i_vocab);
      std::cout << "vocab " << i_vocab << ": size " << vocab.vocab_size()
                << ", " << vocab.merges().size() << " merges, eos id "
                << vocab.eos_id() << "\n";
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const dialogen::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const dialogen::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const dialogen::FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitFormat;
  } catch (const dialogen::DivergenceError& e) {
    std::cerr << "numerical divergence at step " << e.step << ": " << e.what()
              << "\n";
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
