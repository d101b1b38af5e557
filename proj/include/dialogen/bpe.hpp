#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "dialogen/corpus.hpp"

namespace dialogen::bpe {

// Byte-level BPE vocabulary. Ids 0..255 are the raw bytes, 256 is the
// end-of-text token, and merge products follow from 257 upward, so every
// byte string is encodable without an unknown token.
class BpeVocab {
 public:
  static constexpr int kNumBytes = 256;
  static constexpr const char* kEosText = "<|endoftext|>";

  BpeVocab() = default;

  int eos_id() const { return kNumBytes; }
  int vocab_size() const { return static_cast<int>(token_bytes_.size()); }
  const std::vector<std::pair<int, int>>& merges() const { return merges_; }

  // Byte string a token id decodes to (eos decodes to kEosText).
  const std::string& token_bytes(int id) const;

  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;

  void save(const std::string& path) const;
  static BpeVocab load(const std::string& path);

  friend BpeVocab train_bpe(const std::vector<std::string>& texts,
                            int vocab_size);

 private:
  void add_merge(int left, int right);
  static std::int64_t pair_key(int a, int b) {
    return (static_cast<std::int64_t>(a) << 32) | static_cast<std::int64_t>(b);
  }

  std::vector<std::pair<int, int>> merges_;       // rank order
  std::vector<std::string> token_bytes_;          // id -> raw bytes
  std::unordered_map<std::int64_t, int> merge_rank_;  // (a,b) -> rank
};

// Greedy highest-frequency pair merging over the byte sequences of `texts`
// until `vocab_size` tokens exist or no pair occurs at least twice. Ties
// break toward the lexicographically smaller pair so training is
// deterministic. Throws UsageError on an empty corpus or a target size that
// does not exceed the base alphabet.
BpeVocab train_bpe(const std::vector<std::string>& texts, int vocab_size);

// Flattened dialogue session: every turn's tokens followed by one eos.
struct TokenSequence {
  std::vector<int> ids;
  int boundary = 0;  // end of the source segment; 0 when absent
};

enum class FlattenMode { kFull, kPair };

// Encodes each turn and appends eos after it. In pair mode the boundary is
// the index just after the eos of the penultimate turn; in full mode it is
// 0. Sequences longer than `max_len` (when > 0) are truncated from the
// left without ever splitting the final turn; a final turn that cannot fit
// by itself raises FormatError.
TokenSequence flatten_session(const corpus::DialogueInstance& instance,
                              const BpeVocab& vocab, FlattenMode mode,
                              int max_len = 0);

}  // namespace dialogen::bpe
