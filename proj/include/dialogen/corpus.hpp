#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

namespace dialogen::corpus {

struct CommentNode {
  std::string id;
  std::optional<std::string> parent_id;  // absent or dangling -> root
  std::string subreddit;
  std::string body;
  std::int64_t timestamp = 0;
};

// One root-to-leaf path through a comment tree, ordered root first.
struct DialogueInstance {
  std::vector<std::string> turns;       // length >= 2, whitespace-normalized
  std::vector<std::string> source_ids;  // originating node ids, same order
  std::string subreddit;                // carried from the root node
};

struct FilterConfig {
  std::set<std::string> top50_words;
  std::vector<std::string> blocklist_phrases;
  std::set<std::string> excluded_subreddits;
  int max_total_words = 200;
  int repetition_run = 3;
  std::int64_t bland_trigram_min_count = 1000;
  double bland_fraction = 0.9;
};

struct FilterDecision {
  bool keep = true;
  std::string rule;  // first failing rule when !keep
};

struct FilterReport {
  std::int64_t kept = 0;
  std::map<std::string, std::int64_t> dropped_by_rule;
  std::int64_t total_words_kept = 0;

  std::int64_t total_examined() const;
};

struct MultiRefEntry {
  std::vector<std::string> context;     // turns, root first
  std::vector<std::string> references;  // >= min_responses - 1
  std::string held_out_human;
};

struct MultiRefTestSet {
  std::vector<MultiRefEntry> entries;
};

struct ParseStats {
  std::int64_t parsed = 0;
  std::int64_t skipped_malformed = 0;
  std::int64_t duplicate_ids = 0;
};

using BlandTable = std::unordered_map<std::string, std::int64_t>;

// Collapses whitespace runs to single spaces and trims the ends.
std::string normalize_whitespace(const std::string& text);

// Case-folded (ASCII) whitespace tokens.
std::vector<std::string> fold_tokens(const std::string& text);

// Reads newline-delimited JSON records {id, parent_id, subreddit, body,
// created_utc}. Malformed records are skipped and counted; a record whose id
// was already seen is rejected and counted. Throws IoError if the stream is
// unreadable and FormatError if nothing parses.
std::vector<CommentNode> parse_dump(std::istream& in, ParseStats* stats);
std::vector<CommentNode> parse_dump_file(const std::string& path,
                                         ParseStats* stats);

// One instance per (root, leaf) pair with at least two turns. Nodes whose
// parent is absent from the dump are treated as roots. Throws FormatError
// naming an offending id when parent links form a cycle.
std::vector<DialogueInstance> extract_paths(
    const std::vector<CommentNode>& nodes);

// Word-level trigram counts over all target turns (case-folded).
BlandTable build_bland_table(const std::vector<DialogueInstance>& instances);

// Pure keep/drop decision. The drop reason is the first failing rule in the
// fixed order: url, repetition, top50, markup, length, blocklist, subreddit,
// bland. Source = all turns but the last, target = the last turn.
FilterDecision apply_filters(const DialogueInstance& instance,
                             const FilterConfig& cfg,
                             const BlandTable& bland_table);

// Runs apply_filters over a corpus and accumulates the report; kept
// instances are appended to `kept` when non-null. `workers` > 1 evaluates
// decisions in parallel; results are assembled in input order either way.
FilterReport run_filters(const std::vector<DialogueInstance>& instances,
                         const FilterConfig& cfg, const BlandTable& bland_table,
                         std::vector<DialogueInstance>* kept, int workers = 1);

// For every node whose children include >= min_responses replies that pass
// the filter cascade, emits one entry. The held-out human response is the
// reply with the lexicographically smallest id; the rest become references.
MultiRefTestSet build_multiref(const std::vector<CommentNode>& nodes,
                               const FilterConfig& cfg,
                               const BlandTable& bland_table,
                               int min_responses = 6);

// File-format helpers (newline-delimited JSON, see docs in corpus.cpp).
void write_instances(const std::vector<DialogueInstance>& instances,
                     const std::string& path);
std::vector<DialogueInstance> read_instances(const std::string& path);
void write_multiref(const MultiRefTestSet& set, const std::string& path);
void write_filter_report(const FilterReport& report, const std::string& path);

std::set<std::string> load_word_set(const std::string& path);
std::vector<std::string> load_phrase_list(const std::string& path);

}  // namespace dialogen::corpus
