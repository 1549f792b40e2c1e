#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "actadd/tokenizer.hpp"

namespace actadd {

struct Document {
  std::string id;
  std::string text;  // null characters stripped
  std::vector<std::string> sentences;
  double topic_freq = 0.0;  // set by tag_and_bin
};

// `pattern` is a directory, a single file, or a glob. Directory entries and
// glob matches are visited in sorted order. *.jsonl files contribute one
// document per line (field "text"); any other file is one document. Null
// characters are stripped, empty documents dropped, unreadable files skipped
// with a warning. Throws Error("no documents") when nothing survives.
std::vector<Document> load_corpus(const std::string& pattern);

// Splits after '.', '?' or '!' when followed by whitespace, optional opening
// quotes or brackets, and then an uppercase letter, or by end of text. A
// period closing one of Mr, Mrs, Dr, St, vs, etc, e.g, i.e never splits.
std::vector<std::string> split_sentences(std::string_view text);

// Whitespace split, then leading/trailing punctuation stripped. Empty results
// are dropped.
std::vector<std::string> words(std::string_view text);

const std::vector<std::string>& default_topic_keywords();

// Case-insensitive whole-word matches of `keywords` among words(text).
std::size_t count_keywords(std::string_view text, const std::vector<std::string>& keywords);

// Fraction of words(text) that are keywords; 0 for wordless text.
double topic_frequency(std::string_view text, const std::vector<std::string>& keywords);

struct FrequencyBin {
  double lo = 0.0;
  double hi = 0.0;
  std::vector<std::string> documents;
  std::size_t min_count = 0;

  // Bins with min_count or fewer documents are kept for reporting but
  // excluded from aggregate results.
  bool excluded() const noexcept { return documents.size() <= min_count; }
};

// Sets topic_freq on every document and returns bins [k w, (k+1) w) covering
// [0, max f_w], empty bins included.
std::vector<FrequencyBin> tag_and_bin(std::vector<Document>& docs, const std::vector<std::string>& keywords,
                                      double bin_width, std::size_t min_count);

struct KnowledgeItem {
  std::string prompt;
  std::string target;
  TokenId target_id = 0;
};

struct KnowledgeSet {
  std::vector<KnowledgeItem> items;
  std::size_t dropped = 0;  // targets that are not a single token
};

// JSONL of {"prompt", "target"}; keeps items whose target, with a leading
// space, encodes to exactly one token.
KnowledgeSet load_knowledge_set(const std::filesystem::path& path, const BpeVocab& vocab);

// A JSON array of strings.
std::vector<std::string> load_keywords(const std::filesystem::path& path);

}  // namespace actadd
