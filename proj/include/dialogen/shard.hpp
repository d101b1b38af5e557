#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "dialogen/bpe.hpp"

namespace dialogen::shard {

// On-disk layout (all integers little-endian):
//   magic "DGSH" | u32 version | u64 record_count
//   u64 offset[record_count + 1]   -- byte extents of each record body
//   record bodies: u32 boundary | u32 n_ids | u32 ids[n_ids]
// Offsets are relative to the end of the index and strictly increasing;
// record i occupies [offset[i], offset[i+1]).

constexpr std::uint32_t kShardMagic = 0x48534744;  // "DGSH"
constexpr std::uint32_t kShardVersion = 1;
constexpr std::size_t kDefaultChunkBytes = 4 << 20;

struct ShardSummary {
  std::uint64_t record_count = 0;
  std::uint64_t payload_bytes = 0;
};

ShardSummary write_shard(const std::vector<bpe::TokenSequence>& sequences,
                         const std::string& path);

// Reads the header and offset index eagerly; record bodies are fetched on
// demand in fixed-size chunks which are cached for reuse.
class ShardReader {
 public:
  explicit ShardReader(const std::string& path,
                       std::size_t chunk_bytes = kDefaultChunkBytes);

  std::uint64_t size() const { return record_count_; }
  // Token count of record i, derived from the index without any fetch.
  int sequence_length(std::uint64_t i) const;
  std::vector<int> lengths() const;

  bpe::TokenSequence read(std::uint64_t i);

  // Number of chunk fetches performed since open (index reads excluded).
  std::uint64_t fetch_count() const { return fetch_count_; }

 private:
  const std::uint8_t* chunk_data(std::uint64_t chunk_index);
  void read_exact(std::uint64_t file_offset, void* dst, std::size_t n,
                  const std::string& what);

  std::string path_;
  std::ifstream file_;
  std::size_t chunk_bytes_;
  std::uint64_t record_count_ = 0;
  std::uint64_t payload_start_ = 0;  // file offset of record region
  std::uint64_t payload_bytes_ = 0;
  std::vector<std::uint64_t> offsets_;  // record_count + 1 entries
  std::map<std::uint64_t, std::vector<std::uint8_t>> chunks_;
  std::uint64_t fetch_count_ = 0;
};

struct BatchPlan {
  std::vector<std::vector<std::uint32_t>> batches;  // record indices
  std::int64_t token_budget = 0;
};

// Groups records of similar length: indices are sorted by length, batches
// are filled greedily under the padded-token budget (max length in batch
// times batch size), and the batch order is then shuffled by the seed.
BatchPlan plan_batches(const std::vector<int>& lengths,
                       std::int64_t token_budget, std::uint64_t shuffle_seed);

}  // namespace dialogen::shard
