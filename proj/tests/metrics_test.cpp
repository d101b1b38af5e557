#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include "dialogen/error.hpp"
#include "dialogen/metrics.hpp"
#include "dialogen/rng.hpp"

using namespace dialogen;
namespace mt = dialogen::metrics;
using Tokens = std::vector<std::string>;

#include "brute_metrics.hpp"

namespace {

mt::EvalInstance inst(const Tokens& hyp, const std::vector<Tokens>& refs) {
  return {hyp, refs};
}

// Small random instances over a vocabulary with stem collisions.
std::vector<mt::EvalInstance> random_instances(Rng& rng, int count) {
  static const std::vector<std::string> vocab = {
      "a",   "b",    "cat", "cats", "dog",  "dogs",
      "run", "runs", "the", "liked", "like", "quickly"};
  std::vector<mt::EvalInstance> out;
  for (int i = 0; i < count; ++i) {
    auto words = [&](int max_len) {
      Tokens t;
      const int len = 1 + static_cast<int>(rng.uniform_int(max_len));
      for (int w = 0; w < len; ++w)
        t.push_back(vocab[rng.uniform_int(vocab.size())]);
      return t;
    };
    mt::EvalInstance instance;
    instance.hypothesis = words(8);
    const int nrefs = 1 + static_cast<int>(rng.uniform_int(3));
    for (int r = 0; r < nrefs; ++r)
      instance.references.push_back(words(8));
    out.push_back(std::move(instance));
  }
  return out;
}

}  // namespace

TEST_CASE("identical hypothesis gives BLEU 1 at every order") {
  const auto instances = {
      inst({"the", "cat", "sat", "down"}, {{"the", "cat", "sat", "down"}})};
  const auto bleu = mt::corpus_bleu(instances);
  for (double b : bleu) CHECK(b == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("clipping: four the's against the cat") {
  const auto bleu =
      mt::corpus_bleu({inst({"the", "the", "the", "the"}, {{"the", "cat"}})});
  // Hypothesis longer than the reference, so no brevity penalty.
  CHECK(bleu[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(bleu[1] == 0.0);  // no bigram match
}

TEST_CASE("matching the second of two references is a perfect score") {
  const auto bleu = mt::corpus_bleu(
      {inst({"b", "c", "d", "e"}, {{"x", "y", "z"}, {"b", "c", "d", "e"}})});
  for (double b : bleu) CHECK(b == doctest::Approx(1.0).epsilon(1e-12));

  // Orders beyond the hypothesis length have no n-grams to score and
  // follow the zero convention.
  const auto short_bleu =
      mt::corpus_bleu({inst({"b", "c"}, {{"x", "y"}, {"b", "c"}})});
  CHECK(short_bleu[0] == doctest::Approx(1.0));
  CHECK(short_bleu[1] == doctest::Approx(1.0));
  CHECK(short_bleu[2] == 0.0);
  CHECK(short_bleu[3] == 0.0);
}

TEST_CASE("duplicate references never change BLEU") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto instances = random_instances(rng, 5);
    auto a = mt::corpus_bleu(instances);
    for (auto& instance : instances)
      instance.references.push_back(instance.references.front());
    auto b = mt::corpus_bleu(instances);
    for (int n = 0; n < 4; ++n) CHECK(a[n] == doctest::Approx(b[n]).epsilon(1e-12));
  }
}

TEST_CASE("BLEU orders are monotone on fixed hypothesis-length corpora") {
  Rng rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    static const Tokens vocab = {"a", "b", "c", "d"};
    std::vector<mt::EvalInstance> instances;
    const int hyp_len = 4 + static_cast<int>(rng.uniform_int(4));
    for (int i = 0; i < 6; ++i) {
      mt::EvalInstance instance;
      for (int w = 0; w < hyp_len; ++w)
        instance.hypothesis.push_back(vocab[rng.uniform_int(vocab.size())]);
      Tokens ref;
      const int ref_len = 2 + static_cast<int>(rng.uniform_int(7));
      for (int w = 0; w < ref_len; ++w)
        ref.push_back(vocab[rng.uniform_int(vocab.size())]);
      instance.references.push_back(ref);
      instances.push_back(std::move(instance));
    }
    const auto bleu = mt::corpus_bleu(instances);
    CHECK(bleu[0] >= bleu[1] - 1e-12);
    CHECK(bleu[1] >= bleu[2] - 1e-12);
    CHECK(bleu[2] >= bleu[3] - 1e-12);
  }
}

TEST_CASE("NIST closed forms") {
  SUBCASE("identical unique-word pair gives mean unigram information") {
    const auto nist = mt::corpus_nist({inst({"x", "y", "z"}, {{"x", "y", "z"}})});
    // Each unigram: log2(3/1); N-1 is the mean over matched info.
    CHECK(nist[0] == doctest::Approx(std::log2(3.0)).epsilon(1e-12));
    // Equal lengths: brevity factor is exactly 1 (checked via N-1 above).
  }

  SUBCASE("no matches scores zero") {
    const auto nist = mt::corpus_nist({inst({"q", "w"}, {{"x", "y", "z"}})});
    for (double n : nist) CHECK(n == 0.0);
  }

  SUBCASE("orders are nondecreasing") {
    Rng rng(7);
    const auto instances = random_instances(rng, 10);
    const auto nist = mt::corpus_nist(instances);
    CHECK(nist[0] <= nist[1] + 1e-12);
    CHECK(nist[1] <= nist[2] + 1e-12);
    CHECK(nist[2] <= nist[3] + 1e-12);
  }

  SUBCASE("brevity factor is 0.5 at a 2/3 ratio") {
    // hyp 2 tokens, both matched; ref 3 tokens.
    const auto nist = mt::corpus_nist({inst({"x", "y"}, {{"x", "y", "z"}})});
    const double info_x = std::log2(3.0), info_y = std::log2(3.0);
    const double n1_unpenalized = (info_x + info_y) / 2.0;
    CHECK(nist[0] == doctest::Approx(0.5 * n1_unpenalized).epsilon(1e-9));
  }
}

TEST_CASE("METEOR-lite closed forms") {
  SUBCASE("two-word identity scores 0.9375") {
    const double m = mt::corpus_meteor_lite({inst({"hi", "there"},
                                                  {{"hi", "there"}})});
    CHECK(m == doctest::Approx(0.9375).epsilon(1e-12));
  }

  SUBCASE("disjoint vocabularies score zero") {
    CHECK(mt::corpus_meteor_lite({inst({"aa", "bb"}, {{"cc", "dd"}})}) == 0.0);
  }

  SUBCASE("cats matches cat at the stem stage") {
    const double m = mt::corpus_meteor_lite({inst({"cats"}, {{"cat"}})});
    // One match, one chunk: Fmean 1, penalty 0.5.
    CHECK(m == doctest::Approx(0.5).epsilon(1e-12));
  }

  SUBCASE("empty hypothesis scores zero") {
    CHECK(mt::corpus_meteor_lite({inst({}, {{"a", "b"}})}) == 0.0);
  }
}

TEST_CASE("entropy closed forms") {
  SUBCASE("four distinct unigrams give ln 4") {
    const auto e = mt::corpus_entropy({{"a", "b", "c", "d"}});
    CHECK(e[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }

  SUBCASE("a single repeated unigram gives zero") {
    const auto e = mt::corpus_entropy({{"a", "a", "a", "a"}});
    CHECK(e[0] == 0.0);
  }

  SUBCASE("duplicating the hypothesis set leaves entropy unchanged") {
    const std::vector<Tokens> hyps = {{"a", "b", "c"}, {"b", "c", "d"}};
    std::vector<Tokens> doubled = hyps;
    doubled.insert(doubled.end(), hyps.begin(), hyps.end());
    const auto a = mt::corpus_entropy(hyps);
    const auto b = mt::corpus_entropy(doubled);
    for (int n = 0; n < 4; ++n)
      CHECK(a[n] == doctest::Approx(b[n]).epsilon(1e-12));
  }
}

TEST_CASE("dist closed forms") {
  CHECK(mt::corpus_dist({{"a", "a", "a", "a"}})[0] ==
        doctest::Approx(0.25).epsilon(1e-12));
  const auto all_distinct = mt::corpus_dist({{"a", "b", "c", "d"}});
  CHECK(all_distinct[0] == doctest::Approx(1.0));
  CHECK(all_distinct[1] == doctest::Approx(1.0));
  // Pooled {"a b", "a b"}: 2 distinct unigrams over 4 tokens.
  CHECK(mt::corpus_dist({{"a", "b"}, {"a", "b"}})[0] ==
        doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("agreement with the brute-force scorer on random instances") {
  Rng rng(2025);
  for (int batch = 0; batch < 10; ++batch) {
    const auto instances = random_instances(rng, 10);
    std::vector<Tokens> hyps;
    for (const auto& instance : instances) hyps.push_back(instance.hypothesis);

    const auto bleu_a = mt::corpus_bleu(instances);
    const auto bleu_b = bf::bleu(instances);
    for (int n = 0; n < 4; ++n)
      CHECK(bleu_a[n] == doctest::Approx(bleu_b[n]).epsilon(1e-9));

    const auto nist_a = mt::corpus_nist(instances);
    const auto nist_b = bf::nist(instances);
    for (int n = 0; n < 4; ++n)
      CHECK(nist_a[n] == doctest::Approx(nist_b[n]).epsilon(1e-9));

    CHECK(mt::corpus_meteor_lite(instances) ==
          doctest::Approx(bf::meteor(instances)).epsilon(1e-9));

    const auto ent_a = mt::corpus_entropy(hyps);
    const auto ent_b = bf::entropy(hyps);
    for (int n = 0; n < 4; ++n)
      CHECK(ent_a[n] == doctest::Approx(ent_b[n]).epsilon(1e-9));

    const auto dist_a = mt::corpus_dist(hyps);
    const auto dist_b = bf::dist(hyps);
    for (int n = 0; n < 2; ++n)
      CHECK(dist_a[n] == doctest::Approx(dist_b[n]).epsilon(1e-9));
  }
}

TEST_CASE("metrics are invariant to instance order") {
  Rng rng(31);
  auto instances = random_instances(rng, 12);
  const auto report_a = mt::evaluate_instances(instances);
  std::reverse(instances.begin(), instances.end());
  const auto report_b = mt::evaluate_instances(instances);
  for (int n = 0; n < 4; ++n) {
    CHECK(report_a.bleu[n] == doctest::Approx(report_b.bleu[n]).epsilon(1e-12));
    CHECK(report_a.nist[n] == doctest::Approx(report_b.nist[n]).epsilon(1e-12));
    CHECK(report_a.entropy[n] ==
          doctest::Approx(report_b.entropy[n]).epsilon(1e-12));
  }
  CHECK(report_a.meteor == doctest::Approx(report_b.meteor).epsilon(1e-12));
  CHECK(report_a.avg_len == doctest::Approx(report_b.avg_len).epsilon(1e-12));
}

TEST_CASE("report values stay in range") {
  Rng rng(41);
  const auto instances = random_instances(rng, 15);
  const auto report = mt::evaluate_instances(instances);
  for (int n = 0; n < 4; ++n) {
    CHECK(report.bleu[n] >= 0.0);
    CHECK(report.bleu[n] <= 1.0);
    CHECK(report.entropy[n] >= 0.0);
    CHECK(report.nist[n] >= 0.0);
  }
  CHECK(report.meteor >= 0.0);
  CHECK(report.meteor <= 1.0);
  CHECK(report.dist[0] >= 0.0);
  CHECK(report.dist[0] <= 1.0);
  CHECK(report.avg_len >= 0.0);
}

TEST_CASE("tokenizer folds case and strips the end-of-text marker") {
  CHECK(mt::tokenize_for_metrics("The CAT<|endoftext|>sat") ==
        Tokens{"the", "cat", "sat"});
  CHECK(mt::tokenize_for_metrics("") == Tokens{});
}

TEST_CASE("evaluate_run on files") {
  const std::string hyp_path = "/tmp/dialogen_eval_hyp.txt";
  const std::string ref_path = "/tmp/dialogen_eval_ref.jsonl";

  SUBCASE("hypotheses equal to the first reference") {
    {
      std::ofstream hyp(hyp_path);
      hyp << "the cat sat\n\n";  // second line empty
      std::ofstream ref(ref_path);
      ref << R"({"refs": ["the cat sat", "a cat sat there"]})" << "\n";
      ref << R"({"refs": ["something else"]})" << "\n";
    }
    const auto report = mt::evaluate_run(hyp_path, ref_path);
    CHECK(report.avg_len == doctest::Approx(1.5));  // 3 words and 0 words
    CHECK(report.bleu[0] < 1.0);  // the empty line dilutes precision

    std::ofstream hyp(hyp_path);
    hyp << "the cat sat down\n";
    std::ofstream ref(ref_path);
    ref << R"({"refs": ["the cat sat down", "a cat sat there"]})" << "\n";
    hyp.close();
    ref.close();
    const auto perfect = mt::evaluate_run(hyp_path, ref_path);
    for (double b : perfect.bleu) CHECK(b == doctest::Approx(1.0));
    CHECK(perfect.meteor >= 0.9375);
  }

  SUBCASE("misaligned files report the line number") {
    {
      std::ofstream hyp(hyp_path);
      hyp << "one\ntwo\n";
      std::ofstream ref(ref_path);
      ref << R"({"refs": ["one"]})" << "\n";
    }
    CHECK_THROWS_WITH_AS(mt::evaluate_run(hyp_path, ref_path),
                         doctest::Contains("line 2"), FormatError);
  }

  std::remove(hyp_path.c_str());
  std::remove(ref_path.c_str());
}

TEST_CASE("empty corpus is an error") {
  CHECK_THROWS_AS(mt::corpus_bleu({}), UsageError);
  CHECK_THROWS_AS(mt::corpus_nist({}), UsageError);
  CHECK_THROWS_AS(mt::corpus_meteor_lite({}), UsageError);
  CHECK_THROWS_AS(mt::evaluate_instances({}), UsageError);
}

TEST_CASE("report serialization carries every field") {
  Rng rng(51);
  const auto report = mt::evaluate_instances(random_instances(rng, 5));
  const auto json_text = mt::report_to_json(report);
  for (const char* key : {"nist", "bleu", "meteor_lite", "entropy", "dist",
                          "avg_len"})
    CHECK(json_text.find(key) != std::string::npos);
  const auto table = mt::report_to_table(report);
  CHECK(table.find("NIST") != std::string::npos);
  CHECK(table.find("Avg Len") != std::string::npos);
}
