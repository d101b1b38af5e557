// bpe.cpp -- byte-level BPE training, encode/decode, and session
// flattening into eos-delimited token streams.

#include "dialogen/bpe.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <map>

#include "dialogen/error.hpp"
#include "json.hpp"

namespace dialogen::bpe {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

const std::string& BpeVocab::token_bytes(int id) const {
  if (id < 0 || id >= vocab_size())
    throw FormatError("token id " + std::to_string(id) +
                      " out of range for vocab of size " +
                      std::to_string(vocab_size()));
  return token_bytes_[id];
}

void BpeVocab::add_merge(int left, int right) {
  merge_rank_[pair_key(left, right)] = static_cast<int>(merges_.size());
  merges_.emplace_back(left, right);
  token_bytes_.push_back(token_bytes_[left] + token_bytes_[right]);
}

static void init_base_tokens(std::vector<std::string>& token_bytes) {
  token_bytes.clear();
  token_bytes.reserve(BpeVocab::kNumBytes + 1);
  for (int b = 0; b < BpeVocab::kNumBytes; ++b)
    token_bytes.push_back(std::string(1, static_cast<char>(b)));
  token_bytes.push_back(BpeVocab::kEosText);  // eos_id == 256
}

BpeVocab train_bpe(const std::vector<std::string>& texts, int vocab_size) {
  BpeVocab vocab;
  init_base_tokens(vocab.token_bytes_);
  const int base_size = vocab.vocab_size();
  if (vocab_size <= base_size)
    throw UsageError("vocab_size must exceed the base alphabet size of " +
                     std::to_string(base_size));

  bool any_bytes = false;
  std::vector<std::vector<int>> seqs;
  seqs.reserve(texts.size());
  for (const auto& text : texts) {
    std::vector<int> seq;
    seq.reserve(text.size());
    for (unsigned char c : text) seq.push_back(static_cast<int>(c));
    if (!seq.empty()) any_bytes = true;
    seqs.push_back(std::move(seq));
  }
  if (!any_bytes) throw UsageError("cannot train BPE on an empty corpus");

  while (vocab.vocab_size() < vocab_size) {
    std::map<std::pair<int, int>, std::int64_t> pair_counts;
    for (const auto& seq : seqs)
      for (std::size_t i = 0; i + 1 < seq.size(); ++i)
        ++pair_counts[{seq[i], seq[i + 1]}];

    std::pair<int, int> best{-1, -1};
    std::int64_t best_count = 0;
    for (const auto& [pair, count] : pair_counts) {
      if (count < best_count) continue;
      if (count > best_count) {
        best = pair;
        best_count = count;
        continue;
      }
      // Tie: prefer the lexicographically smaller byte strings.
      const auto lhs = std::make_pair(vocab.token_bytes_[pair.first],
                                      vocab.token_bytes_[pair.second]);
      const auto rhs = std::make_pair(vocab.token_bytes_[best.first],
                                      vocab.token_bytes_[best.second]);
      if (lhs < rhs) best = pair;
    }
    if (best_count < 2) break;

    const int merged_id = vocab.vocab_size();
    vocab.add_merge(best.first, best.second);

    for (auto& seq : seqs) {
      std::size_t write = 0;
      for (std::size_t read = 0; read < seq.size();) {
        if (read + 1 < seq.size() && seq[read] == best.first &&
            seq[read + 1] == best.second) {
          seq[write++] = merged_id;
          read += 2;
        } else {
          seq[write++] = seq[read++];
        }
      }
      seq.resize(write);
    }
  }
  return vocab;
}

std::vector<int> BpeVocab::encode(const std::string& text) const {
  std::vector<int> seq;
  seq.reserve(text.size());
  for (unsigned char c : text) seq.push_back(static_cast<int>(c));

  // Repeatedly apply the lowest-ranked merge present. A merge can only
  // create symbols whose own merges rank later, so this is equivalent to
  // applying the merge list in rank order.
  while (seq.size() >= 2) {
    int best_rank = std::numeric_limits<int>::max();
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
      auto it = merge_rank_.find(pair_key(seq[i], seq[i + 1]));
      if (it != merge_rank_.end() && it->second < best_rank)
        best_rank = it->second;
    }
    if (best_rank == std::numeric_limits<int>::max()) break;

    const auto [left, right] = merges_[best_rank];
    const int merged_id = kNumBytes + 1 + best_rank;
    std::size_t write = 0;
    for (std::size_t read = 0; read < seq.size();) {
      if (read + 1 < seq.size() && seq[read] == left && seq[read + 1] == right) {
        seq[write++] = merged_id;
        read += 2;
      } else {
        seq[write++] = seq[read++];
      }
    }
    seq.resize(write);
  }
  return seq;
}

std::string BpeVocab::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) out += token_bytes(id);
  return out;
}

// ---------------------------------------------------------------------------
// Vocab file serialization. Token byte strings are not generally valid
// UTF-8, so bytes are mapped to printable code points: printable Latin-1
// characters keep their code point, the rest shift to 256+n in first-seen
// order. The mapping is its own inverse table on load.

static const std::vector<int>& byte_to_codepoint() {
  static const std::vector<int> table = [] {
    std::vector<int> t(256, -1);
    auto printable = [](int b) {
      return (b >= 0x21 && b <= 0x7e) || (b >= 0xa1 && b <= 0xac) ||
             (b >= 0xae && b <= 0xff);
    };
    int next = 256;
    for (int b = 0; b < 256; ++b) t[b] = printable(b) ? b : next++;
    return t;
  }();
  return table;
}

static std::string append_utf8(std::string& out, int cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xc0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
  } else {
    out.push_back(static_cast<char>(0xe0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
  }
  return out;
}

static std::string bytes_to_printable(const std::string& bytes) {
  std::string out;
  for (unsigned char c : bytes) append_utf8(out, byte_to_codepoint()[c]);
  return out;
}

static std::string printable_to_bytes(const std::string& printable) {
  static const std::unordered_map<int, unsigned char> reverse = [] {
    std::unordered_map<int, unsigned char> r;
    const auto& table = byte_to_codepoint();
    for (int b = 0; b < 256; ++b) r[table[b]] = static_cast<unsigned char>(b);
    return r;
  }();
  std::string out;
  std::size_t i = 0;
  while (i < printable.size()) {
    const unsigned char c = printable[i];
    int cp = 0;
    if (c < 0x80) {
      cp = c;
      i += 1;
    } else if ((c & 0xe0) == 0xc0 && i + 1 < printable.size()) {
      cp = ((c & 0x1f) << 6) | (printable[i + 1] & 0x3f);
      i += 2;
    } else if ((c & 0xf0) == 0xe0 && i + 2 < printable.size()) {
      cp = ((c & 0x0f) << 12) | ((printable[i + 1] & 0x3f) << 6) |
           (printable[i + 2] & 0x3f);
      i += 3;
    } else {
      throw FormatError("bad token encoding in vocab file");
    }
    auto it = reverse.find(cp);
    if (it == reverse.end())
      throw FormatError("bad token code point in vocab file");
    out.push_back(static_cast<char>(it->second));
  }
  return out;
}

void BpeVocab::save(const std::string& path) const {
  ordered_json doc;
  doc["merges"] = json::array();
  for (const auto& [a, b] : merges_)
    doc["merges"].push_back(
        {bytes_to_printable(token_bytes_[a]), bytes_to_printable(token_bytes_[b])});
  ordered_json vocab_map = ordered_json::object();
  for (int id = 0; id < vocab_size(); ++id) {
    const std::string key = (id == eos_id()) ? std::string(kEosText)
                                             : bytes_to_printable(token_bytes_[id]);
    vocab_map[key] = id;
  }
  if (static_cast<int>(vocab_map.size()) != vocab_size())
    throw FormatError("vocab contains colliding token strings");
  doc["vocab"] = std::move(vocab_map);
  doc["eos_id"] = eos_id();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << doc.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

BpeVocab BpeVocab::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open vocab file: " + path);
  json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded() || !doc.contains("merges") || !doc.contains("vocab") ||
      !doc.contains("eos_id"))
    throw FormatError("bad vocab file: " + path);

  BpeVocab vocab;
  init_base_tokens(vocab.token_bytes_);
  if (doc["eos_id"].get<int>() != vocab.eos_id())
    throw FormatError("unexpected eos_id in vocab file: " + path);

  std::unordered_map<std::string, int> bytes_to_id;
  for (const auto& [key, value] : doc["vocab"].items()) {
    const int id = value.get<int>();
    const std::string bytes =
        (id == vocab.eos_id()) ? std::string(kEosText) : printable_to_bytes(key);
    bytes_to_id[bytes] = id;
  }
  for (const auto& entry : doc["merges"]) {
    const std::string left = printable_to_bytes(entry[0].get<std::string>());
    const std::string right = printable_to_bytes(entry[1].get<std::string>());
    auto li = bytes_to_id.find(left);
    auto ri = bytes_to_id.find(right);
    if (li == bytes_to_id.end() || ri == bytes_to_id.end())
      throw FormatError("merge references unknown token in " + path);
    vocab.add_merge(li->second, ri->second);
    if (bytes_to_id.count(vocab.token_bytes_.back()) == 0 ||
        bytes_to_id[vocab.token_bytes_.back()] !=
            vocab.vocab_size() - 1)
      throw FormatError("merge list inconsistent with vocab table in " + path);
  }
  return vocab;
}

TokenSequence flatten_session(const corpus::DialogueInstance& instance,
                              const BpeVocab& vocab, FlattenMode mode,
                              int max_len) {
  if (instance.turns.size() < 2)
    throw UsageError("flatten_session requires at least two turns");

  TokenSequence seq;
  int final_turn_start = 0;
  for (std::size_t k = 0; k < instance.turns.size(); ++k) {
    if (k + 1 == instance.turns.size()) {
      final_turn_start = static_cast<int>(seq.ids.size());
      if (mode == FlattenMode::kPair)
        seq.boundary = static_cast<int>(seq.ids.size());
    }
    const auto ids = vocab.encode(instance.turns[k]);
    seq.ids.insert(seq.ids.end(), ids.begin(), ids.end());
    seq.ids.push_back(vocab.eos_id());
  }

  if (max_len > 0 && static_cast<int>(seq.ids.size()) > max_len) {
    const int drop = static_cast<int>(seq.ids.size()) - max_len;
    if (drop > final_turn_start)
      throw FormatError("final turn alone exceeds the context window");
    seq.ids.erase(seq.ids.begin(), seq.ids.begin() + drop);
    seq.boundary = std::max(seq.boundary - drop, 0);
  }
  return seq;
}

}  // namespace dialogen::bpe
