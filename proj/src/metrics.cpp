// metrics.cpp -- corpus-level BLEU / NIST / METEOR-lite / Entropy / Dist
// in the multi-reference evaluation layout.

#include "dialogen/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <unordered_map>

#include "dialogen/bpe.hpp"
#include "dialogen/error.hpp"
#include "json.hpp"

namespace dialogen::metrics {

using Tokens = std::vector<std::string>;

std::vector<std::string> tokenize_for_metrics(const std::string& line) {
  std::string cleaned = line;
  const std::string eos = bpe::BpeVocab::kEosText;
  for (std::size_t pos = cleaned.find(eos); pos != std::string::npos;
       pos = cleaned.find(eos, pos))
    cleaned.replace(pos, eos.size(), " ");
  for (char& c : cleaned)
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  Tokens tokens;
  std::istringstream ss(cleaned);
  std::string tok;
  while (ss >> tok) tokens.push_back(tok);
  return tokens;
}

namespace {

// Tokens never contain whitespace, so a space-joined key is unambiguous.
std::string gram_key(const Tokens& words, std::size_t start, int n) {
  std::string key = words[start];
  for (int i = 1; i < n; ++i) {
    key += ' ';
    key += words[start + i];
  }
  return key;
}

std::unordered_map<std::string, std::int64_t> gram_counts(const Tokens& words,
                                                          int n) {
  std::unordered_map<std::string, std::int64_t> counts;
  if (static_cast<int>(words.size()) >= n)
    for (std::size_t i = 0; i + n <= words.size(); ++i)
      ++counts[gram_key(words, i, n)];
  return counts;
}

}  // namespace

std::array<double, 4> corpus_bleu(const std::vector<EvalInstance>& instances,
                                  int max_n) {
  if (instances.empty()) throw UsageError("BLEU requires a nonempty corpus");
  std::array<double, 4> matched{}, total{};
  std::int64_t hyp_len_sum = 0, ref_len_sum = 0;

  for (const auto& inst : instances) {
    if (inst.references.empty())
      throw UsageError("BLEU instance without references");
    const std::int64_t hyp_len = static_cast<std::int64_t>(inst.hypothesis.size());
    hyp_len_sum += hyp_len;

    // Closest reference length; ties resolve to the shorter reference.
    std::int64_t closest = static_cast<std::int64_t>(inst.references[0].size());
    for (const auto& ref : inst.references) {
      const std::int64_t len = static_cast<std::int64_t>(ref.size());
      const auto d = std::llabs(len - hyp_len);
      const auto dc = std::llabs(closest - hyp_len);
      if (d < dc || (d == dc && len < closest)) closest = len;
    }
    ref_len_sum += closest;

    for (int n = 1; n <= max_n; ++n) {
      const auto hyp_grams = gram_counts(inst.hypothesis, n);
      std::unordered_map<std::string, std::int64_t> clip;
      for (const auto& ref : inst.references)
        for (const auto& [gram, count] : gram_counts(ref, n))
          clip[gram] = std::max(clip[gram], count);
      for (const auto& [gram, count] : hyp_grams) {
        total[n - 1] += static_cast<double>(count);
        auto it = clip.find(gram);
        if (it != clip.end())
          matched[n - 1] += static_cast<double>(std::min(count, it->second));
      }
    }
  }

  double bp = 1.0;
  if (hyp_len_sum == 0)
    bp = 0.0;
  else if (hyp_len_sum < ref_len_sum)
    bp = std::exp(1.0 - static_cast<double>(ref_len_sum) / hyp_len_sum);

  std::array<double, 4> bleu{};
  double log_sum = 0.0;
  bool zero = false;
  for (int n = 1; n <= max_n; ++n) {
    const double p =
        total[n - 1] > 0 ? matched[n - 1] / total[n - 1] : 0.0;
    if (p <= 0.0) zero = true;
    if (!zero) log_sum += std::log(p);
    bleu[n - 1] = zero ? 0.0 : bp * std::exp(log_sum / n);
  }
  return bleu;
}

std::array<double, 4> corpus_nist(const std::vector<EvalInstance>& instances,
                                  int max_n) {
  if (instances.empty()) throw UsageError("NIST requires a nonempty corpus");

  // Information weights from reference counts pooled over the whole set.
  std::array<std::unordered_map<std::string, std::int64_t>, 5> pooled;
  std::int64_t pooled_tokens = 0;
  for (const auto& inst : instances) {
    if (inst.references.empty())
      throw UsageError("NIST instance without references");
    for (const auto& ref : inst.references) {
      pooled_tokens += static_cast<std::int64_t>(ref.size());
      for (int n = 1; n <= max_n; ++n)
        for (const auto& [gram, count] : gram_counts(ref, n))
          pooled[n][gram] += count;
    }
  }
  auto info = [&](const std::string& gram, int n) {
    const std::int64_t denom = pooled[n].at(gram);
    std::int64_t numer;
    if (n == 1) {
      numer = pooled_tokens;
    } else {
      const std::size_t cut = gram.rfind(' ');
      numer = pooled[n - 1].at(gram.substr(0, cut));
    }
    return std::log2(static_cast<double>(numer) / denom);
  };

  std::array<double, 4> info_matched{}, hyp_total{};
  double hyp_len_sum = 0.0, mean_ref_len_sum = 0.0;
  for (const auto& inst : instances) {
    hyp_len_sum += static_cast<double>(inst.hypothesis.size());
    double ref_mean = 0.0;
    for (const auto& ref : inst.references)
      ref_mean += static_cast<double>(ref.size());
    mean_ref_len_sum += ref_mean / inst.references.size();

    for (int n = 1; n <= max_n; ++n) {
      const auto hyp_grams = gram_counts(inst.hypothesis, n);
      std::unordered_map<std::string, std::int64_t> clip;
      for (const auto& ref : inst.references)
        for (const auto& [gram, count] : gram_counts(ref, n))
          clip[gram] = std::max(clip[gram], count);
      for (const auto& [gram, count] : hyp_grams) {
        hyp_total[n - 1] += static_cast<double>(count);
        auto it = clip.find(gram);
        if (it != clip.end())
          info_matched[n - 1] +=
              info(gram, n) * std::min(count, it->second);
      }
    }
  }

  // Brevity factor 0.5 at a 2/3 length ratio.
  static const double beta =
      std::log(0.5) / (std::log(2.0 / 3.0) * std::log(2.0 / 3.0));
  double factor = 1.0;
  if (hyp_len_sum <= 0.0) {
    factor = 0.0;
  } else if (mean_ref_len_sum > 0.0) {
    const double ratio = std::min(1.0, hyp_len_sum / mean_ref_len_sum);
    const double lg = std::log(ratio);
    factor = std::exp(beta * lg * lg);
  }

  std::array<double, 4> nist{};
  double acc = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    if (hyp_total[n - 1] > 0) acc += info_matched[n - 1] / hyp_total[n - 1];
    nist[n - 1] = acc * factor;
  }
  return nist;
}

std::string stem(const std::string& word) {
  static const std::vector<std::pair<std::string, std::string>> rules = {
      {"ies", "y"}, {"ing", ""}, {"ed", ""}, {"es", ""}, {"ly", ""}, {"s", ""}};
  for (const auto& [suffix, replacement] : rules) {
    if (word.size() > suffix.size() + 1 && word.ends_with(suffix)) {
      if (suffix == "s" && word.ends_with("ss")) continue;
      return word.substr(0, word.size() - suffix.size()) + replacement;
    }
  }
  return word;
}

namespace {

// A position pair is exact-eligible or stem-eligible; the staged match
// counts (exact first, stems on the leftovers) are forced per equality
// class, so only the assignment of occurrences is searched, minimizing the
// number of contiguous chunks.
struct MeteorAlignment {
  int matches = 0;
  int chunks = 0;
};

struct ChunkSearch {
  const Tokens& hyp;
  const Tokens& ref;
  std::vector<std::string> hyp_stem, ref_stem;
  std::unordered_map<std::string, int> exact_quota;  // per word
  std::unordered_map<std::string, int> stem_quota;   // per stem class
  int total_matches = 0;
  int best_chunks = std::numeric_limits<int>::max();
  long nodes = 0;
  bool aborted = false;
  static constexpr long kNodeLimit = 500000;

  std::vector<bool> ref_used;

  explicit ChunkSearch(const Tokens& h, const Tokens& r) : hyp(h), ref(r) {
    for (const auto& w : hyp) hyp_stem.push_back(stem(w));
    for (const auto& w : ref) ref_stem.push_back(stem(w));

    std::unordered_map<std::string, int> h_count, r_count;
    for (const auto& w : hyp) ++h_count[w];
    for (const auto& w : ref) ++r_count[w];
    std::unordered_map<std::string, int> h_left, r_left;
    for (const auto& [w, c] : h_count) {
      const int e = std::min(c, r_count.count(w) ? r_count[w] : 0);
      if (e > 0) exact_quota[w] = e;
      if (c - e > 0) h_left[stem(w)] += c - e;
    }
    for (const auto& [w, c] : r_count) {
      const int e = std::min(c, h_count.count(w) ? h_count[w] : 0);
      if (c - e > 0) r_left[stem(w)] += c - e;
    }
    for (const auto& [s, c] : h_left) {
      const int m = std::min(c, r_left.count(s) ? r_left[s] : 0);
      if (m > 0) stem_quota[s] = m;
    }
    for (const auto& [w, c] : exact_quota) total_matches += c;
    for (const auto& [s, c] : stem_quota) total_matches += c;
    ref_used.assign(ref.size(), false);
  }

  // dfs over hyp positions; prev_ref = ref index of the previous matched
  // hyp position when it was the immediately preceding hyp position.
  void dfs(std::size_t i, int matched, int chunks, int prev_ref) {
    if (aborted || chunks >= best_chunks) return;
    if (++nodes > kNodeLimit) {
      aborted = true;
      return;
    }
    if (matched == total_matches) {
      best_chunks = chunks;
      return;
    }
    if (i >= hyp.size()) return;
    // Not enough positions left to realize all matches.
    if (static_cast<int>(hyp.size() - i) < total_matches - matched) return;

    const std::string& word = hyp[i];
    const std::string& wstem = hyp_stem[i];

    auto try_match = [&](std::size_t j, bool exact) {
      auto& quota = exact ? exact_quota[word] : stem_quota[wstem];
      if (quota <= 0) return;
      --quota;
      ref_used[j] = true;
      const bool contiguous = prev_ref >= 0 && j == static_cast<std::size_t>(prev_ref) + 1;
      dfs(i + 1, matched + 1, chunks + (contiguous ? 0 : 1),
          static_cast<int>(j));
      ref_used[j] = false;
      ++quota;
    };

    // Prefer extending the current chunk so good bounds appear early.
    if (prev_ref >= 0 && static_cast<std::size_t>(prev_ref) + 1 < ref.size()) {
      const std::size_t j = static_cast<std::size_t>(prev_ref) + 1;
      if (!ref_used[j]) {
        if (ref[j] == word) try_match(j, true);
        else if (ref_stem[j] == wstem) try_match(j, false);
      }
    }
    for (std::size_t j = 0; j < ref.size(); ++j) {
      if (ref_used[j]) continue;
      if (prev_ref >= 0 && j == static_cast<std::size_t>(prev_ref) + 1)
        continue;  // handled above
      if (ref[j] == word) try_match(j, true);
      else if (ref_stem[j] == wstem) try_match(j, false);
    }
    dfs(i + 1, matched, chunks, -1);  // leave this hyp word unmatched
  }
};

// Greedy fallback for long inputs: repeatedly commit the longest eligible
// contiguous run (leftmost on ties).
MeteorAlignment greedy_alignment(const Tokens& hyp, const Tokens& ref) {
  std::vector<std::string> hs, rs;
  for (const auto& w : hyp) hs.push_back(stem(w));
  for (const auto& w : ref) rs.push_back(stem(w));
  std::vector<bool> hyp_used(hyp.size(), false), ref_used(ref.size(), false);
  auto eligible = [&](std::size_t i, std::size_t j) {
    return !hyp_used[i] && !ref_used[j] &&
           (hyp[i] == ref[j] || hs[i] == rs[j]);
  };
  MeteorAlignment out;
  while (true) {
    std::size_t best_i = 0, best_j = 0, best_len = 0;
    for (std::size_t i = 0; i < hyp.size(); ++i) {
      for (std::size_t j = 0; j < ref.size(); ++j) {
        std::size_t len = 0;
        while (i + len < hyp.size() && j + len < ref.size() &&
               eligible(i + len, j + len))
          ++len;
        if (len > best_len) {
          best_len = len;
          best_i = i;
          best_j = j;
        }
      }
    }
    if (best_len == 0) break;
    for (std::size_t t = 0; t < best_len; ++t) {
      hyp_used[best_i + t] = true;
      ref_used[best_j + t] = true;
    }
    out.matches += static_cast<int>(best_len);
    out.chunks += 1;
  }
  return out;
}

double meteor_pair(const Tokens& hyp, const Tokens& ref) {
  if (hyp.empty() || ref.empty()) return 0.0;

  MeteorAlignment alignment;
  if (hyp.size() <= 14 && ref.size() <= 14) {
    ChunkSearch search(hyp, ref);
    if (search.total_matches == 0) return 0.0;
    search.dfs(0, 0, 0, -1);
    if (!search.aborted &&
        search.best_chunks != std::numeric_limits<int>::max()) {
      alignment.matches = search.total_matches;
      alignment.chunks = search.best_chunks;
    } else {
      alignment = greedy_alignment(hyp, ref);
    }
  } else {
    alignment = greedy_alignment(hyp, ref);
  }
  if (alignment.matches == 0) return 0.0;

  const double m = alignment.matches;
  const double precision = m / hyp.size();
  const double recall = m / ref.size();
  const double fmean = 10.0 * precision * recall / (recall + 9.0 * precision);
  const double frag = static_cast<double>(alignment.chunks) / m;
  const double penalty = 0.5 * frag * frag * frag;
  return fmean * (1.0 - penalty);
}

}  // namespace

double corpus_meteor_lite(const std::vector<EvalInstance>& instances) {
  if (instances.empty()) throw UsageError("METEOR requires a nonempty corpus");
  double sum = 0.0;
  for (const auto& inst : instances) {
    if (inst.references.empty())
      throw UsageError("METEOR instance without references");
    double best = 0.0;
    for (const auto& ref : inst.references)
      best = std::max(best, meteor_pair(inst.hypothesis, ref));
    sum += best;
  }
  return sum / instances.size();
}

std::array<double, 4> corpus_entropy(
    const std::vector<std::vector<std::string>>& hypotheses) {
  std::array<double, 4> entropy{};
  for (int n = 1; n <= 4; ++n) {
    std::unordered_map<std::string, std::int64_t> counts;
    std::int64_t total = 0;
    for (const auto& hyp : hypotheses)
      for (const auto& [gram, count] : gram_counts(hyp, n)) {
        counts[gram] += count;
        total += count;
      }
    double h = 0.0;
    for (const auto& [gram, count] : counts) {
      const double p = static_cast<double>(count) / total;
      h -= p * std::log(p);
    }
    entropy[n - 1] = total > 0 ? h : 0.0;
  }
  return entropy;
}

std::array<double, 2> corpus_dist(
    const std::vector<std::vector<std::string>>& hypotheses) {
  std::array<double, 2> dist{};
  for (int n = 1; n <= 2; ++n) {
    std::unordered_map<std::string, std::int64_t> counts;
    std::int64_t total = 0;
    for (const auto& hyp : hypotheses)
      for (const auto& [gram, count] : gram_counts(hyp, n)) {
        counts[gram] += count;
        total += count;
      }
    dist[n - 1] =
        total > 0 ? static_cast<double>(counts.size()) / total : 0.0;
  }
  return dist;
}

MetricReport evaluate_instances(const std::vector<EvalInstance>& instances) {
  if (instances.empty()) throw UsageError("evaluation requires instances");
  MetricReport report;
  report.bleu = corpus_bleu(instances);
  report.nist = corpus_nist(instances);
  report.meteor = corpus_meteor_lite(instances);
  std::vector<std::vector<std::string>> hyps;
  double len_sum = 0.0;
  for (const auto& inst : instances) {
    hyps.push_back(inst.hypothesis);
    len_sum += static_cast<double>(inst.hypothesis.size());
  }
  report.entropy = corpus_entropy(hyps);
  report.dist = corpus_dist(hyps);
  report.avg_len = len_sum / instances.size();
  return report;
}

MetricReport evaluate_run(const std::string& hyp_path,
                          const std::string& ref_path) {
  std::ifstream hyp_in(hyp_path, std::ios::binary);
  if (!hyp_in) throw IoError("cannot open hypothesis file: " + hyp_path);
  std::ifstream ref_in(ref_path, std::ios::binary);
  if (!ref_in) throw IoError("cannot open reference file: " + ref_path);

  std::vector<EvalInstance> instances;
  std::string hyp_line, ref_line;
  std::size_t lineno = 0;
  while (true) {
    const bool got_hyp = static_cast<bool>(std::getline(hyp_in, hyp_line));
    const bool got_ref = static_cast<bool>(std::getline(ref_in, ref_line));
    if (!got_hyp && !got_ref) break;
    ++lineno;
    if (got_hyp != got_ref)
      throw FormatError("hypothesis and reference files diverge at line " +
                        std::to_string(lineno));
    nlohmann::json rec = nlohmann::json::parse(ref_line, nullptr, false);
    if (rec.is_discarded() || !rec.contains("refs") || !rec["refs"].is_array())
      throw FormatError("bad reference record at " + ref_path + ":" +
                        std::to_string(lineno));
    EvalInstance inst;
    inst.hypothesis = tokenize_for_metrics(hyp_line);
    for (const auto& ref : rec["refs"])
      inst.references.push_back(tokenize_for_metrics(ref.get<std::string>()));
    if (inst.references.empty())
      throw FormatError("empty reference list at " + ref_path + ":" +
                        std::to_string(lineno));
    instances.push_back(std::move(inst));
  }
  return evaluate_instances(instances);
}

std::string report_to_json(const MetricReport& report) {
  nlohmann::ordered_json j;
  j["nist"] = report.nist;
  j["bleu"] = report.bleu;
  j["meteor_lite"] = report.meteor;
  j["entropy"] = report.entropy;
  j["dist"] = report.dist;
  j["avg_len"] = report.avg_len;
  return j.dump(2);
}

std::string report_to_table(const MetricReport& report) {
  char line[512];
  std::string out;
  out += "                NIST                          BLEU                "
         "METEOR   Entropy                          Dist            Avg Len\n";
  out += "       N-1    N-2    N-3    N-4     B-1    B-2    B-3    B-4     "
         "(lite)   E-1    E-2    E-3    E-4      D-1    D-2\n";
  std::snprintf(line, sizeof(line),
                "     %6.3f %6.3f %6.3f %6.3f  %5.2f%% %5.2f%% %5.2f%% "
                "%5.2f%%   %5.2f%%  %6.3f %6.3f %6.3f %6.3f   %5.2f%% %5.2f%%   %6.2f\n",
                report.nist[0], report.nist[1], report.nist[2], report.nist[3],
                100 * report.bleu[0], 100 * report.bleu[1], 100 * report.bleu[2],
                100 * report.bleu[3], 100 * report.meteor, report.entropy[0],
                report.entropy[1], report.entropy[2], report.entropy[3],
                100 * report.dist[0], 100 * report.dist[1], report.avg_len);
  out += line;
  return out;
}

void write_report(const MetricReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << report_to_json(report) << '\n';
}

}  // namespace dialogen::metrics
