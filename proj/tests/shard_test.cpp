#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <fstream>
#include <set>

#include "dialogen/error.hpp"
#include "dialogen/rng.hpp"
#include "dialogen/shard.hpp"

using namespace dialogen;
using bpe::TokenSequence;

namespace {

std::vector<TokenSequence> random_sequences(Rng& rng, int count, int max_len) {
  std::vector<TokenSequence> seqs(count);
  for (auto& seq : seqs) {
    const int len = 1 + static_cast<int>(rng.uniform_int(max_len));
    for (int i = 0; i < len; ++i)
      seq.ids.push_back(static_cast<int>(rng.uniform_int(50000)));
    seq.boundary = static_cast<int>(rng.uniform_int(len + 1));
  }
  return seqs;
}

const char* kPath = "/tmp/dialogen_shard_test.bin";

}  // namespace

TEST_CASE("write then read round trips bit-exactly") {
  Rng rng(2024);
  const auto seqs = random_sequences(rng, 10, 40);
  const auto summary = shard::write_shard(seqs, kPath);
  CHECK(summary.record_count == 10);

  shard::ShardReader reader(kPath);
  REQUIRE(reader.size() == 10);
  for (std::uint64_t i = 0; i < reader.size(); ++i) {
    const auto seq = reader.read(i);
    CHECK(seq.ids == seqs[i].ids);
    CHECK(seq.boundary == seqs[i].boundary);
    CHECK(reader.sequence_length(i) == static_cast<int>(seqs[i].ids.size()));
  }
  std::remove(kPath);
}

TEST_CASE("reading one record fetches exactly one chunk beyond the index") {
  Rng rng(7);
  const auto seqs = random_sequences(rng, 20, 16);
  shard::write_shard(seqs, kPath);
  shard::ShardReader reader(kPath, /*chunk_bytes=*/
                            shard::kDefaultChunkBytes);
  CHECK(reader.fetch_count() == 0);  // open touches header+index only
  const auto seq = reader.read(7);
  CHECK(seq.ids == seqs[7].ids);
  CHECK(reader.fetch_count() == 1);
  reader.read(7);
  CHECK(reader.fetch_count() == 1);  // cached
  std::remove(kPath);
}

TEST_CASE("small chunks fetch only what a record needs") {
  Rng rng(8);
  const auto seqs = random_sequences(rng, 50, 64);
  shard::write_shard(seqs, kPath);
  shard::ShardReader reader(kPath, /*chunk_bytes=*/64);
  const auto seq = reader.read(30);
  CHECK(seq.ids == seqs[30].ids);
  const std::uint64_t record_bytes = 8 + 4 * seqs[30].ids.size();
  CHECK(reader.fetch_count() <= record_bytes / 64 + 2);
  std::remove(kPath);
}

TEST_CASE("empty write is an error") {
  CHECK_THROWS_AS(shard::write_shard({}, kPath), UsageError);
}

TEST_CASE("bad magic and truncation are format errors") {
  Rng rng(9);
  const auto seqs = random_sequences(rng, 4, 8);
  shard::write_shard(seqs, kPath);

  SUBCASE("bad magic") {
    std::fstream f(kPath, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("nope", 4);
    f.close();
    CHECK_THROWS_WITH_AS((shard::ShardReader{kPath}),
                         doctest::Contains("magic"), FormatError);
  }

  SUBCASE("truncated payload names the record index") {
    std::ifstream in(kPath, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
    in.close();
    bytes.resize(bytes.size() - 6);
    std::ofstream out(kPath, std::ios::binary | std::ios::trunc);
    out << bytes;
    out.close();
    CHECK_THROWS_WITH_AS((shard::ShardReader{kPath}),
                         doctest::Contains("record 3"), FormatError);
  }
  std::remove(kPath);
}

TEST_CASE("plan_batches groups whole corpus when budget allows") {
  const auto plan = shard::plan_batches({10, 10, 10}, 30, 1);
  REQUIRE(plan.batches.size() == 1);
  CHECK(plan.batches[0].size() == 3);
}

TEST_CASE("padded budget splits mixed lengths") {
  // Padding [10,20] to 20 costs 40 > 20, so two batches.
  const auto plan = shard::plan_batches({10, 20}, 20, 1);
  CHECK(plan.batches.size() == 2);
}

TEST_CASE("plans are deterministic per seed") {
  std::vector<int> lengths;
  Rng rng(3);
  for (int i = 0; i < 200; ++i)
    lengths.push_back(1 + static_cast<int>(rng.uniform_int(64)));
  const auto a = shard::plan_batches(lengths, 256, 42);
  const auto b = shard::plan_batches(lengths, 256, 42);
  CHECK(a.batches == b.batches);
  const auto c = shard::plan_batches(lengths, 256, 43);
  CHECK(a.batches != c.batches);  // overwhelmingly likely
}

TEST_CASE("epoch coverage and budget hold on random inputs") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 1 + static_cast<int>(rng.uniform_int(300));
    std::vector<int> lengths;
    int max_len = 1;
    for (int i = 0; i < n; ++i) {
      lengths.push_back(1 + static_cast<int>(rng.uniform_int(100)));
      max_len = std::max(max_len, lengths.back());
    }
    const std::int64_t budget =
        max_len + static_cast<std::int64_t>(rng.uniform_int(400));
    const auto plan = shard::plan_batches(lengths, budget, trial);

    std::set<std::uint32_t> seen;
    for (const auto& batch : plan.batches) {
      REQUIRE(!batch.empty());
      int batch_max = 0;
      for (auto idx : batch) {
        CHECK(seen.insert(idx).second);  // no duplicates
        batch_max = std::max(batch_max, lengths[idx]);
      }
      CHECK(static_cast<std::int64_t>(batch_max) *
                static_cast<std::int64_t>(batch.size()) <=
            budget);
    }
    CHECK(seen.size() == lengths.size());
  }
}

TEST_CASE("over-budget record is named") {
  CHECK_THROWS_WITH_AS(shard::plan_batches({4, 900}, 100, 0),
                       doctest::Contains("record 1"), UsageError);
}

TEST_CASE("round trip of 1000 random sequences") {
  Rng rng(5150);
  const auto seqs = random_sequences(rng, 1000, 80);
  shard::write_shard(seqs, kPath);
  shard::ShardReader reader(kPath, 1 << 12);
  REQUIRE(reader.size() == seqs.size());
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto seq = reader.read(i);
    CHECK(seq.ids == seqs[i].ids);
    CHECK(seq.boundary == seqs[i].boundary);
  }
  std::remove(kPath);
}
