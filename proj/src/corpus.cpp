// corpus.cpp -- comment-tree parsing, path extraction, and the filter
// cascade that turns raw dumps into dialogue instances.

#include "dialogen/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <thread>
#include <unordered_set>

#include "dialogen/error.hpp"
#include "json.hpp"

namespace dialogen::corpus {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

std::int64_t FilterReport::total_examined() const {
  std::int64_t dropped = 0;
  for (const auto& [rule, n] : dropped_by_rule) dropped += n;
  return kept + dropped;
}

std::string normalize_whitespace(const std::string& text) {
  std::string out;
  out.reserve(text.size());
  bool in_space = true;  // leading spaces dropped
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      in_space = true;
    } else {
      if (in_space && !out.empty()) out.push_back(' ');
      out.push_back(static_cast<char>(c));
      in_space = false;
    }
  }
  return out;
}

static std::string fold_ascii(const std::string& s) {
  std::string out = s;
  for (char& c : out)
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::vector<std::string> fold_tokens(const std::string& text) {
  std::vector<std::string> tokens;
  std::istringstream ss(fold_ascii(text));
  std::string tok;
  while (ss >> tok) tokens.push_back(tok);
  return tokens;
}

static std::vector<std::string> raw_tokens(const std::string& text) {
  std::vector<std::string> tokens;
  std::istringstream ss(text);
  std::string tok;
  while (ss >> tok) tokens.push_back(tok);
  return tokens;
}

std::vector<CommentNode> parse_dump(std::istream& in, ParseStats* stats) {
  ParseStats local;
  std::vector<CommentNode> nodes;
  std::unordered_set<std::string> seen_ids;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec = json::parse(line, nullptr, /*allow_exceptions=*/false);
    if (rec.is_discarded() || !rec.is_object() || !rec.contains("id") ||
        !rec["id"].is_string() || rec["id"].get<std::string>().empty() ||
        !rec.contains("body") || !rec["body"].is_string()) {
      ++local.skipped_malformed;
      continue;
    }
    CommentNode node;
    node.id = rec["id"].get<std::string>();
    node.body = rec["body"].get<std::string>();
    if (normalize_whitespace(node.body).empty()) {
      // An all-whitespace body cannot become a valid turn.
      ++local.skipped_malformed;
      continue;
    }
    if (rec.contains("parent_id") && rec["parent_id"].is_string() &&
        !rec["parent_id"].get<std::string>().empty()) {
      node.parent_id = rec["parent_id"].get<std::string>();
    }
    if (rec.contains("subreddit") && rec["subreddit"].is_string())
      node.subreddit = rec["subreddit"].get<std::string>();
    if (rec.contains("created_utc") && rec["created_utc"].is_number())
      node.timestamp = rec["created_utc"].get<std::int64_t>();
    if (!seen_ids.insert(node.id).second) {
      ++local.duplicate_ids;
      continue;
    }
    ++local.parsed;
    nodes.push_back(std::move(node));
  }
  if (in.bad()) throw IoError("error while reading dump stream");
  if (nodes.empty()) throw FormatError("dump contains no parseable records");
  if (stats) *stats = local;
  return nodes;
}

std::vector<CommentNode> parse_dump_file(const std::string& path,
                                         ParseStats* stats) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dump file: " + path);
  return parse_dump(in, stats);
}

std::vector<DialogueInstance> extract_paths(
    const std::vector<CommentNode>& nodes) {
  std::unordered_map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < nodes.size(); ++i) by_id.emplace(nodes[i].id, i);

  std::vector<std::vector<std::size_t>> children(nodes.size());
  std::vector<std::size_t> roots;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto& node = nodes[i];
    if (node.parent_id && by_id.count(*node.parent_id) &&
        *node.parent_id != node.id) {
      children[by_id[*node.parent_id]].push_back(i);
    } else {
      roots.push_back(i);
    }
  }

  std::vector<DialogueInstance> instances;
  std::vector<bool> visited(nodes.size(), false);
  std::vector<std::size_t> path;
  for (std::size_t root : roots) {
    // Iterative DFS; the path holds the current root-to-node chain.
    std::vector<std::pair<std::size_t, std::size_t>> stack;  // node, depth
    stack.emplace_back(root, 0);
    while (!stack.empty()) {
      auto [idx, depth] = stack.back();
      stack.pop_back();
      path.resize(depth);
      path.push_back(idx);
      visited[idx] = true;
      if (children[idx].empty()) {
        if (path.size() >= 2) {
          DialogueInstance inst;
          inst.subreddit = nodes[path.front()].subreddit;
          for (std::size_t n : path) {
            inst.turns.push_back(normalize_whitespace(nodes[n].body));
            inst.source_ids.push_back(nodes[n].id);
          }
          instances.push_back(std::move(inst));
        }
        continue;
      }
      for (auto it = children[idx].rbegin(); it != children[idx].rend(); ++it)
        stack.emplace_back(*it, depth + 1);
    }
  }

  // Nodes unreachable from any root sit on a parent-link cycle.
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (!visited[i])
      throw FormatError("cycle detected in parent links involving id '" +
                        nodes[i].id + "'");
  }
  return instances;
}

static std::string trigram_key(const std::string& a, const std::string& b,
                               const std::string& c) {
  return a + ' ' + b + ' ' + c;
}

BlandTable build_bland_table(const std::vector<DialogueInstance>& instances) {
  BlandTable table;
  for (const auto& inst : instances) {
    if (inst.turns.empty()) continue;
    const auto words = fold_tokens(inst.turns.back());
    for (std::size_t i = 0; i + 2 < words.size(); ++i)
      ++table[trigram_key(words[i], words[i + 1], words[i + 2])];
  }
  return table;
}

static bool contains_url(const std::string& text) {
  static const char* kMarkers[] = {"http://", "https://", "www."};
  const std::string folded = fold_ascii(text);
  for (const char* m : kMarkers)
    if (folded.find(m) != std::string::npos) return true;
  return false;
}

FilterDecision apply_filters(const DialogueInstance& instance,
                             const FilterConfig& cfg,
                             const BlandTable& bland_table) {
  const std::string& target = instance.turns.back();

  // url: anywhere in source or target
  for (const auto& turn : instance.turns)
    if (contains_url(turn)) return {false, "url"};

  // repetition: a run of >= repetition_run identical tokens in the target
  {
    const auto words = raw_tokens(target);
    int run = 1;
    for (std::size_t i = 1; i < words.size(); ++i) {
      run = (words[i] == words[i - 1]) ? run + 1 : 1;
      if (run >= cfg.repetition_run) return {false, "repetition"};
    }
  }

  // top50: target must contain at least one of the most frequent words
  {
    bool found = false;
    for (const auto& w : fold_tokens(target))
      if (cfg.top50_words.count(w)) {
        found = true;
        break;
      }
    if (!found) return {false, "top50"};
  }

  // markup: bracket characters in the target
  if (target.find('[') != std::string::npos ||
      target.find(']') != std::string::npos)
    return {false, "markup"};

  // length: source + target word count
  {
    std::size_t total = 0;
    for (const auto& turn : instance.turns) total += raw_tokens(turn).size();
    if (total > static_cast<std::size_t>(cfg.max_total_words))
      return {false, "length"};
  }

  // blocklist: case-folded substring phrase match in the target
  {
    const std::string folded = fold_ascii(target);
    for (const auto& phrase : cfg.blocklist_phrases)
      if (!phrase.empty() && folded.find(fold_ascii(phrase)) != std::string::npos)
        return {false, "blocklist"};
  }

  if (cfg.excluded_subreddits.count(instance.subreddit))
    return {false, "subreddit"};

  // bland: fraction of target trigrams that are globally frequent
  {
    const auto words = fold_tokens(target);
    if (words.size() >= 3) {
      std::int64_t total = 0, frequent = 0;
      for (std::size_t i = 0; i + 2 < words.size(); ++i) {
        ++total;
        auto it =
            bland_table.find(trigram_key(words[i], words[i + 1], words[i + 2]));
        if (it != bland_table.end() &&
            it->second >= cfg.bland_trigram_min_count)
          ++frequent;
      }
      if (total > 0 && static_cast<double>(frequent) / total >=
                           cfg.bland_fraction)
        return {false, "bland"};
    }
  }

  return {true, ""};
}

FilterReport run_filters(const std::vector<DialogueInstance>& instances,
                         const FilterConfig& cfg, const BlandTable& bland_table,
                         std::vector<DialogueInstance>* kept, int workers) {
  std::vector<FilterDecision> decisions(instances.size());
  if (workers <= 1 || instances.size() < 2) {
    for (std::size_t i = 0; i < instances.size(); ++i)
      decisions[i] = apply_filters(instances[i], cfg, bland_table);
  } else {
    // Decisions are pure per-instance; the table is read-only shared data.
    std::vector<std::thread> pool;
    const std::size_t n = instances.size();
    const std::size_t nw = std::min<std::size_t>(workers, n);
    for (std::size_t w = 0; w < nw; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < n; i += nw)
          decisions[i] = apply_filters(instances[i], cfg, bland_table);
      });
    }
    for (auto& t : pool) t.join();
  }

  FilterReport report;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    if (decisions[i].keep) {
      ++report.kept;
      for (const auto& turn : instances[i].turns)
        report.total_words_kept +=
            static_cast<std::int64_t>(raw_tokens(turn).size());
      if (kept) kept->push_back(instances[i]);
    } else {
      ++report.dropped_by_rule[decisions[i].rule];
    }
  }
  return report;
}

MultiRefTestSet build_multiref(const std::vector<CommentNode>& nodes,
                               const FilterConfig& cfg,
                               const BlandTable& bland_table,
                               int min_responses) {
  if (min_responses < 2)
    throw UsageError("min_responses must be at least 2");

  std::unordered_map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < nodes.size(); ++i) by_id.emplace(nodes[i].id, i);

  // Path from the root to each node, reconstructed by walking parents.
  auto context_turns = [&](std::size_t idx) {
    std::vector<std::string> turns;
    std::size_t cur = idx;
    std::unordered_set<std::size_t> seen;
    while (true) {
      if (!seen.insert(cur).second)
        throw FormatError("cycle detected in parent links involving id '" +
                          nodes[cur].id + "'");
      turns.push_back(normalize_whitespace(nodes[cur].body));
      const auto& p = nodes[cur].parent_id;
      if (!p || !by_id.count(*p)) break;
      cur = by_id[*p];
    }
    std::reverse(turns.begin(), turns.end());
    return turns;
  };

  std::map<std::string, std::vector<std::size_t>> children;  // parent id order
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (nodes[i].parent_id && by_id.count(*nodes[i].parent_id))
      children[*nodes[i].parent_id].push_back(i);

  MultiRefTestSet set;
  for (const auto& [parent_id, kids] : children) {
    if (kids.size() < static_cast<std::size_t>(min_responses)) continue;
    const std::size_t parent_idx = by_id[parent_id];
    const auto context = context_turns(parent_idx);

    std::vector<std::size_t> valid;
    for (std::size_t kid : kids) {
      DialogueInstance inst;
      inst.turns = context;
      inst.turns.push_back(normalize_whitespace(nodes[kid].body));
      inst.subreddit = nodes[kid].subreddit;
      if (apply_filters(inst, cfg, bland_table).keep) valid.push_back(kid);
    }
    if (valid.size() < static_cast<std::size_t>(min_responses)) continue;

    const auto held_out = *std::min_element(
        valid.begin(), valid.end(), [&](std::size_t a, std::size_t b) {
          return nodes[a].id < nodes[b].id;
        });
    MultiRefEntry entry;
    entry.context = context;
    entry.held_out_human = normalize_whitespace(nodes[held_out].body);
    for (std::size_t kid : valid)
      if (kid != held_out)
        entry.references.push_back(normalize_whitespace(nodes[kid].body));
    set.entries.push_back(std::move(entry));
  }
  return set;
}

void write_instances(const std::vector<DialogueInstance>& instances,
                     const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  for (const auto& inst : instances) {
    ordered_json rec;
    rec["turns"] = inst.turns;
    rec["ids"] = inst.source_ids;
    rec["subreddit"] = inst.subreddit;
    out << rec.dump() << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

std::vector<DialogueInstance> read_instances(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open instances file: " + path);
  std::vector<DialogueInstance> instances;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json rec = json::parse(line, nullptr, false);
    if (rec.is_discarded() || !rec.contains("turns"))
      throw FormatError("bad instance record at " + path + ":" +
                        std::to_string(lineno));
    DialogueInstance inst;
    inst.turns = rec["turns"].get<std::vector<std::string>>();
    if (rec.contains("ids"))
      inst.source_ids = rec["ids"].get<std::vector<std::string>>();
    if (rec.contains("subreddit"))
      inst.subreddit = rec["subreddit"].get<std::string>();
    instances.push_back(std::move(inst));
  }
  return instances;
}

void write_multiref(const MultiRefTestSet& set, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  for (const auto& entry : set.entries) {
    ordered_json rec;
    rec["context"] = entry.context;
    rec["refs"] = entry.references;
    rec["human"] = entry.held_out_human;
    out << rec.dump() << '\n';
  }
}

void write_filter_report(const FilterReport& report, const std::string& path) {
  ordered_json rec;
  rec["kept"] = report.kept;
  rec["dropped_by_rule"] = ordered_json::object();
  for (const auto& [rule, n] : report.dropped_by_rule)
    rec["dropped_by_rule"][rule] = n;
  rec["total_words_kept"] = report.total_words_kept;
  rec["total_examined"] = report.total_examined();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << rec.dump(2) << '\n';
}

std::set<std::string> load_word_set(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open word list: " + path);
  std::set<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    const std::string w = fold_ascii(normalize_whitespace(line));
    if (!w.empty() && w[0] != '#') words.insert(w);
  }
  return words;
}

std::vector<std::string> load_phrase_list(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open phrase list: " + path);
  std::vector<std::string> phrases;
  std::string line;
  while (std::getline(in, line)) {
    const std::string p = normalize_whitespace(line);
    if (!p.empty() && p[0] != '#') phrases.push_back(fold_ascii(p));
  }
  return phrases;
}

}  // namespace dialogen::corpus
