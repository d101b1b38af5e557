#pragma once

#include <array>
#include <string>
#include <vector>

namespace dialogen::metrics {

// Hypothesis and references as case-folded whitespace tokens.
struct EvalInstance {
  std::vector<std::string> hypothesis;
  std::vector<std::vector<std::string>> references;
};

struct MetricReport {
  std::array<double, 4> nist{};     // N-1..N-4
  std::array<double, 4> bleu{};     // B-1..B-4, fractions
  double meteor = 0.0;              // METEOR-lite (exact + suffix stem)
  std::array<double, 4> entropy{};  // E-1..E-4, nats
  std::array<double, 2> dist{};     // D-1, D-2
  double avg_len = 0.0;             // mean hypothesis word count
};

// Case-folds, strips end-of-text markers, splits on whitespace.
std::vector<std::string> tokenize_for_metrics(const std::string& line);

// Corpus-level BLEU: clipped n-gram counts against the per-instance best
// reference count, geometric mean of orders 1..n with no smoothing, and a
// brevity penalty from the closest-length reference summed over the corpus.
std::array<double, 4> corpus_bleu(const std::vector<EvalInstance>& instances,
                                  int max_n = 4);

// mteval-style NIST: information weights from reference counts pooled over
// the whole test set, per-order matched-information ratios accumulated over
// orders 1..n, times the NIST brevity factor.
std::array<double, 4> corpus_nist(const std::vector<EvalInstance>& instances,
                                  int max_n = 4);

// Reduced METEOR: exact-match stage then suffix-stem stage, maximizing
// matches then minimizing chunks; Fmean = 10PR/(R+9P), penalty =
// 0.5*(chunks/matches)^3. No synonym or paraphrase tables.
double corpus_meteor_lite(const std::vector<EvalInstance>& instances);

// Shannon entropy (nats) of the pooled n-gram distribution of hypotheses.
std::array<double, 4> corpus_entropy(
    const std::vector<std::vector<std::string>>& hypotheses);

// Distinct n-grams / total n-grams pooled over hypotheses.
std::array<double, 2> corpus_dist(
    const std::vector<std::vector<std::string>>& hypotheses);

// Minimal suffix stemmer used by the METEOR stem stage.
std::string stem(const std::string& word);

// Scores a hypothesis file (one response per line) against a reference
// file (JSON lines {"refs": [...]}). Files must have aligned line counts.
MetricReport evaluate_run(const std::string& hyp_path,
                          const std::string& ref_path);
MetricReport evaluate_instances(const std::vector<EvalInstance>& instances);

std::string report_to_json(const MetricReport& report);
std::string report_to_table(const MetricReport& report);
void write_report(const MetricReport& report, const std::string& path);

}  // namespace dialogen::metrics
