#include "actadd/corpus.hpp"

#include <glob.h>
#include <unicode/uchar.h>
#include <unicode/utf8.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "actadd/error.hpp"
#include "actadd/log.hpp"

namespace actadd {
namespace {

bool is_ascii_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

std::string lower_ascii(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && is_ascii_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_ascii_space(s.back())) s.remove_suffix(1);
  return s;
}

std::string strip_nulls(std::string text) {
  text.erase(std::remove(text.begin(), text.end(), '\0'), text.end());
  return text;
}

bool read_all(const std::filesystem::path& path, std::string& out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return false;
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) return false;
  out = ss.str();
  return true;
}

void add_document(std::vector<Document>& docs, std::string id, std::string text) {
  text = strip_nulls(std::move(text));
  if (trim(text).empty()) return;
  Document doc;
  doc.id = std::move(id);
  doc.sentences = split_sentences(text);
  doc.text = std::move(text);
  docs.push_back(std::move(doc));
}

void load_file(const std::filesystem::path& path, std::vector<Document>& docs) {
  std::string content;
  if (!read_all(path, content)) {
    warn("skipping unreadable file " + path.string());
    return;
  }
  if (path.extension() == ".jsonl") {
    std::istringstream lines(content);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(lines, line)) {
      ++line_no;
      if (trim(line).empty()) continue;
      nlohmann::json record;
      try {
        record = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        throw Error(path.string() + ":" + std::to_string(line_no) + ": malformed JSON: " + e.what());
      }
      if (!record.is_object() || !record.contains("text") || !record["text"].is_string()) {
        throw Error(path.string() + ":" + std::to_string(line_no) + ": record lacks a string \"text\" field");
      }
      std::string id = record.contains("id") ? (record["id"].is_string() ? record["id"].get<std::string>()
                                                                         : record["id"].dump())
                                             : path.filename().string() + ":" + std::to_string(line_no);
      add_document(docs, std::move(id), record["text"].get<std::string>());
    }
  } else {
    add_document(docs, path.filename().string(), std::move(content));
  }
}

bool is_abbreviation(std::string_view word) {
  static const std::array<std::string_view, 8> kAbbreviations = {"mr", "mrs", "dr", "st", "vs", "etc", "e.g", "i.e"};
  while (!word.empty() && (word.front() == '(' || word.front() == '"' || word.front() == '\'')) word.remove_prefix(1);
  const auto lowered = lower_ascii(word);
  return std::find(kAbbreviations.begin(), kAbbreviations.end(), lowered) != kAbbreviations.end();
}

bool starts_with_uppercase(std::string_view text, std::size_t pos) {
  const auto* s = reinterpret_cast<const uint8_t*>(text.data());
  auto i = static_cast<int32_t>(pos);
  UChar32 c = 0;
  U8_NEXT(s, i, static_cast<int32_t>(text.size()), c);
  return c >= 0 && u_isupper(c);
}

bool is_punct_byte_start(std::string_view s, std::size_t pos, std::size_t& len) {
  const auto* p = reinterpret_cast<const uint8_t*>(s.data());
  auto i = static_cast<int32_t>(pos);
  UChar32 c = 0;
  U8_NEXT(p, i, static_cast<int32_t>(s.size()), c);
  len = static_cast<std::size_t>(i) - pos;
  return c >= 0 && u_ispunct(c);
}

std::string_view strip_punctuation(std::string_view w) {
  std::size_t len = 0;
  while (!w.empty() && is_punct_byte_start(w, 0, len)) w.remove_prefix(len);
  // Trailing: walk back to the start of the last code point.
  while (!w.empty()) {
    std::size_t start = w.size() - 1;
    while (start > 0 && (static_cast<unsigned char>(w[start]) & 0xC0) == 0x80) --start;
    if (!is_punct_byte_start(w, start, len) || start + len != w.size()) break;
    w.remove_suffix(w.size() - start);
  }
  return w;
}

}  // namespace

std::vector<Document> load_corpus(const std::string& pattern) {
  std::vector<std::filesystem::path> files;
  std::error_code ec;
  if (std::filesystem::is_directory(pattern, ec)) {
    for (const auto& entry : std::filesystem::directory_iterator(pattern, ec)) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
  } else if (std::filesystem::is_regular_file(pattern, ec)) {
    files.emplace_back(pattern);
  } else {
    glob_t g{};
    if (::glob(pattern.c_str(), 0, nullptr, &g) == 0) {
      for (std::size_t i = 0; i < g.gl_pathc; ++i) files.emplace_back(g.gl_pathv[i]);
    }
    ::globfree(&g);
  }
  std::sort(files.begin(), files.end());

  std::vector<Document> docs;
  for (const auto& f : files) load_file(f, docs);
  if (docs.empty()) throw Error("no documents found at " + pattern);
  return docs;
}

std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  std::size_t begin = 0;
  auto flush = [&](std::size_t end) {
    const auto piece = trim(text.substr(begin, end - begin));
    if (!piece.empty()) out.emplace_back(piece);
    begin = end;
  };

  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (c != '.' && c != '?' && c != '!') {
      ++i;
      continue;
    }
    std::size_t end = i;
    while (end < text.size() && (text[end] == '.' || text[end] == '?' || text[end] == '!')) ++end;
    while (end < text.size() && (text[end] == '"' || text[end] == '\'' || text[end] == ')' || text[end] == ']')) ++end;

    bool split = false;
    if (end == text.size()) {
      split = true;
    } else if (is_ascii_space(text[end])) {
      std::size_t next = end;
      while (next < text.size() && is_ascii_space(text[next])) ++next;
      while (next < text.size() && (text[next] == '"' || text[next] == '\'' || text[next] == '(' || text[next] == '[')) {
        ++next;
      }
      split = next == text.size() || starts_with_uppercase(text, next);
    }
    if (split && c == '.' && end == i + 1) {
      std::size_t w = i;
      while (w > begin && !is_ascii_space(text[w - 1])) --w;
      if (is_abbreviation(text.substr(w, i - w))) split = false;
    }
    if (split) flush(end);
    i = end;
  }
  flush(text.size());
  return out;
}

std::vector<std::string> words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_ascii_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_ascii_space(text[j])) ++j;
    if (j > i) {
      const auto w = strip_punctuation(text.substr(i, j - i));
      if (!w.empty()) out.emplace_back(w);
    }
    i = j;
  }
  return out;
}

const std::vector<std::string>& default_topic_keywords() {
  static const std::vector<std::string> kWedding = {"wedding", "weddings", "wed",   "marry",    "married",
                                                    "marriage", "bride",   "groom", "honeymoon"};
  return kWedding;
}

std::size_t count_keywords(std::string_view text, const std::vector<std::string>& keywords) {
  std::vector<std::string> lowered;
  lowered.reserve(keywords.size());
  for (const auto& k : keywords) lowered.push_back(lower_ascii(k));
  std::size_t hits = 0;
  for (const auto& w : words(text)) {
    if (std::find(lowered.begin(), lowered.end(), lower_ascii(w)) != lowered.end()) ++hits;
  }
  return hits;
}

double topic_frequency(std::string_view text, const std::vector<std::string>& keywords) {
  const auto total = words(text).size();
  if (total == 0) return 0.0;
  return static_cast<double>(count_keywords(text, keywords)) / static_cast<double>(total);
}

std::vector<FrequencyBin> tag_and_bin(std::vector<Document>& docs, const std::vector<std::string>& keywords,
                                      double bin_width, std::size_t min_count) {
  if (!(bin_width > 0.0) || !std::isfinite(bin_width)) throw ValidationError("bin_width", "must be > 0");
  std::vector<std::size_t> index(docs.size());
  std::size_t max_bin = 0;
  for (std::size_t d = 0; d < docs.size(); ++d) {
    docs[d].topic_freq = topic_frequency(docs[d].text, keywords);
    index[d] = static_cast<std::size_t>(std::floor(docs[d].topic_freq / bin_width));
    // Guard against floor() landing one bin high or low at an exact edge.
    while (index[d] > 0 && docs[d].topic_freq < static_cast<double>(index[d]) * bin_width) --index[d];
    while (docs[d].topic_freq >= static_cast<double>(index[d] + 1) * bin_width) ++index[d];
    max_bin = std::max(max_bin, index[d]);
  }
  std::vector<FrequencyBin> bins(docs.empty() ? 0 : max_bin + 1);
  for (std::size_t k = 0; k < bins.size(); ++k) {
    bins[k].lo = static_cast<double>(k) * bin_width;
    bins[k].hi = static_cast<double>(k + 1) * bin_width;
    bins[k].min_count = min_count;
  }
  for (std::size_t d = 0; d < docs.size(); ++d) bins[index[d]].documents.push_back(docs[d].id);
  return bins;
}

KnowledgeSet load_knowledge_set(const std::filesystem::path& path, const BpeVocab& vocab) {
  std::string content;
  if (!read_all(path, content)) throw Error("cannot read knowledge set " + path.string());
  KnowledgeSet set;
  std::istringstream lines(content);
  std::string line;
  std::size_t line_no = 0;
  std::size_t records = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    nlohmann::json record;
    try {
      record = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(path.string() + ": line " + std::to_string(line_no) + ": malformed JSON: " + e.what());
    }
    if (!record.is_object() || !record.contains("prompt") || !record.contains("target") ||
        !record["prompt"].is_string() || !record["target"].is_string()) {
      throw Error(path.string() + ": line " + std::to_string(line_no) + ": expected {\"prompt\", \"target\"} strings");
    }
    ++records;
    KnowledgeItem item{record["prompt"].get<std::string>(), record["target"].get<std::string>(), 0};
    const auto encoded = encode(vocab, " " + item.target, false);
    if (encoded.size() != 1) {
      ++set.dropped;
      continue;
    }
    item.target_id = encoded.ids[0];
    set.items.push_back(std::move(item));
  }
  if (records == 0) throw Error("knowledge set " + path.string() + " is empty");
  return set;
}

std::vector<std::string> load_keywords(const std::filesystem::path& path) {
  std::string content;
  if (!read_all(path, content)) throw Error("cannot read keyword list " + path.string());
  try {
    return nlohmann::json::parse(content).get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(path.string() + ": expected a JSON array of strings: " + e.what());
  }
}

}  // namespace actadd
