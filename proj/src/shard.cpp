// shard.cpp -- lazy-loading token database and length-bucketed batch
// planning.

#include "dialogen/shard.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>

#include "dialogen/error.hpp"
#include "dialogen/rng.hpp"

namespace dialogen::shard {

namespace {

template <typename T>
void put_le(std::ofstream& out, T value) {
  std::uint8_t buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i)
    buf[i] = static_cast<std::uint8_t>(value >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get_le(const std::uint8_t* p) {
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    value |= static_cast<T>(p[i]) << (8 * i);
  return value;
}

}  // namespace

ShardSummary write_shard(const std::vector<bpe::TokenSequence>& sequences,
                         const std::string& path) {
  if (sequences.empty())
    throw UsageError("refusing to write an empty shard: " + path);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);

  put_le<std::uint32_t>(out, kShardMagic);
  put_le<std::uint32_t>(out, kShardVersion);
  put_le<std::uint64_t>(out, sequences.size());

  std::uint64_t offset = 0;
  for (const auto& seq : sequences) {
    put_le<std::uint64_t>(out, offset);
    offset += 8 + 4 * seq.ids.size();
  }
  put_le<std::uint64_t>(out, offset);

  for (const auto& seq : sequences) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(seq.boundary));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(seq.ids.size()));
    for (int id : seq.ids) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(id));
  }
  if (!out) throw IoError("write failed: " + path);

  return {sequences.size(), offset};
}

ShardReader::ShardReader(const std::string& path, std::size_t chunk_bytes)
    : path_(path),
      file_(path, std::ios::binary),
      chunk_bytes_(chunk_bytes == 0 ? kDefaultChunkBytes : chunk_bytes) {
  if (!file_) throw IoError("cannot open shard: " + path);

  std::uint8_t header[16];
  file_.read(reinterpret_cast<char*>(header), sizeof(header));
  if (file_.gcount() != sizeof(header))
    throw FormatError("shard too short for header: " + path);
  if (get_le<std::uint32_t>(header) != kShardMagic)
    throw FormatError("bad shard magic: " + path);
  if (get_le<std::uint32_t>(header + 4) != kShardVersion)
    throw FormatError("unsupported shard version in " + path);
  record_count_ = get_le<std::uint64_t>(header + 8);

  offsets_.resize(record_count_ + 1);
  std::vector<std::uint8_t> raw(8 * offsets_.size());
  file_.read(reinterpret_cast<char*>(raw.data()), raw.size());
  if (static_cast<std::size_t>(file_.gcount()) != raw.size())
    throw FormatError("shard index truncated: " + path);
  for (std::size_t i = 0; i < offsets_.size(); ++i)
    offsets_[i] = get_le<std::uint64_t>(raw.data() + 8 * i);
  for (std::size_t i = 0; i + 1 < offsets_.size(); ++i)
    if (offsets_[i] >= offsets_[i + 1])
      throw FormatError("shard index offsets not increasing: " + path);

  payload_start_ = 16 + raw.size();
  payload_bytes_ = offsets_.back();

  file_.seekg(0, std::ios::end);
  const std::uint64_t file_size = static_cast<std::uint64_t>(file_.tellg());
  if (file_size < payload_start_ + payload_bytes_) {
    // Name the first record whose body extends past the file end.
    std::uint64_t valid = file_size - std::min<std::uint64_t>(file_size, payload_start_);
    std::size_t bad = 0;
    while (bad < record_count_ && offsets_[bad + 1] <= valid) ++bad;
    throw FormatError("shard truncated at record " + std::to_string(bad) +
                      ": " + path);
  }
}

const std::uint8_t* ShardReader::chunk_data(std::uint64_t chunk_index) {
  auto it = chunks_.find(chunk_index);
  if (it == chunks_.end()) {
    const std::uint64_t begin = chunk_index * chunk_bytes_;
    const std::uint64_t end =
        std::min<std::uint64_t>(begin + chunk_bytes_, payload_bytes_);
    std::vector<std::uint8_t> buf(end - begin);
    read_exact(payload_start_ + begin, buf.data(), buf.size(),
               "chunk " + std::to_string(chunk_index));
    ++fetch_count_;
    it = chunks_.emplace(chunk_index, std::move(buf)).first;
  }
  return it->second.data();
}

void ShardReader::read_exact(std::uint64_t file_offset, void* dst,
                             std::size_t n, const std::string& what) {
  file_.clear();
  file_.seekg(static_cast<std::streamoff>(file_offset));
  file_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(file_.gcount()) != n)
    throw FormatError("shard read failed (" + what + "): " + path_);
}

int ShardReader::sequence_length(std::uint64_t i) const {
  // Body is 8 bytes of header plus 4 bytes per token.
  return static_cast<int>((offsets_[i + 1] - offsets_[i] - 8) / 4);
}

std::vector<int> ShardReader::lengths() const {
  std::vector<int> out(record_count_);
  for (std::uint64_t i = 0; i < record_count_; ++i)
    out[i] = sequence_length(i);
  return out;
}

bpe::TokenSequence ShardReader::read(std::uint64_t i) {
  if (i >= record_count_)
    throw UsageError("record index out of range: " + std::to_string(i));
  const std::uint64_t begin = offsets_[i];
  const std::uint64_t end = offsets_[i + 1];

  std::vector<std::uint8_t> body(end - begin);
  std::uint64_t pos = begin;
  std::size_t written = 0;
  while (pos < end) {
    const std::uint64_t chunk = pos / chunk_bytes_;
    const std::uint64_t chunk_begin = chunk * chunk_bytes_;
    const std::uint64_t chunk_end =
        std::min<std::uint64_t>(chunk_begin + chunk_bytes_, payload_bytes_);
    const std::uint8_t* data = chunk_data(chunk);
    const std::uint64_t take = std::min(end, chunk_end) - pos;
    std::memcpy(body.data() + written, data + (pos - chunk_begin), take);
    written += take;
    pos += take;
  }

  bpe::TokenSequence seq;
  seq.boundary = static_cast<int>(get_le<std::uint32_t>(body.data()));
  const std::uint32_t n = get_le<std::uint32_t>(body.data() + 4);
  if (8 + 4ull * n != body.size())
    throw FormatError("corrupt record " + std::to_string(i) + " in " + path_);
  seq.ids.resize(n);
  for (std::uint32_t k = 0; k < n; ++k)
    seq.ids[k] = static_cast<int>(get_le<std::uint32_t>(body.data() + 8 + 4 * k));
  return seq;
}

BatchPlan plan_batches(const std::vector<int>& lengths,
                       std::int64_t token_budget, std::uint64_t shuffle_seed) {
  for (std::size_t i = 0; i < lengths.size(); ++i)
    if (lengths[i] > token_budget)
      throw UsageError("record " + std::to_string(i) + " of length " +
                       std::to_string(lengths[i]) +
                       " exceeds the token budget " +
                       std::to_string(token_budget));

  std::vector<std::uint32_t> order(lengths.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::uint32_t a, std::uint32_t b) {
                     return lengths[a] < lengths[b];
                   });

  BatchPlan plan;
  plan.token_budget = token_budget;
  std::vector<std::uint32_t> batch;
  int batch_max = 0;
  for (std::uint32_t idx : order) {
    const int len = lengths[idx];
    const int max_len = std::max(batch_max, len);
    if (!batch.empty() &&
        static_cast<std::int64_t>(max_len) *
                static_cast<std::int64_t>(batch.size() + 1) >
            token_budget) {
      plan.batches.push_back(std::move(batch));
      batch.clear();
      batch_max = 0;
    }
    batch.push_back(idx);
    batch_max = std::max(batch_max, len);
  }
  if (!batch.empty()) plan.batches.push_back(std::move(batch));

  // Fisher-Yates over batch order; record order inside a batch is stable.
  Rng rng(shuffle_seed);
  for (std::size_t i = plan.batches.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.uniform_int(i));
    std::swap(plan.batches[i - 1], plan.batches[j]);
  }
  return plan;
}

}  // namespace dialogen::shard
