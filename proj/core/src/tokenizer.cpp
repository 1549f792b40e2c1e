#include "actadd/tokenizer.hpp"

#include <unicode/uchar.h>
#include <unicode/utf8.h>

#include <algorithm>
#include <array>
#include <fstream>
#include <limits>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

#include "actadd/error.hpp"

namespace actadd {
namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

// The GPT-2 byte encoder: printable Latin-1 bytes map to themselves, the rest
// are shifted to U+0100 and up in byte order.
std::array<char32_t, 256> byte_code_points() {
  std::array<bool, 256> printable{};
  for (int b = '!'; b <= '~'; ++b) printable[b] = true;
  for (int b = 0xA1; b <= 0xAC; ++b) printable[b] = true;
  for (int b = 0xAE; b <= 0xFF; ++b) printable[b] = true;
  std::array<char32_t, 256> cps{};
  char32_t next = 256;
  for (int b = 0; b < 256; ++b) cps[b] = printable[b] ? static_cast<char32_t>(b) : next++;
  return cps;
}

struct CodePoint {
  UChar32 value;  // U+FFFD for malformed input
  std::size_t begin;
  std::size_t end;
};

std::vector<CodePoint> code_points(std::string_view text) {
  std::vector<CodePoint> cps;
  cps.reserve(text.size());
  const auto* s = reinterpret_cast<const uint8_t*>(text.data());
  const auto length = static_cast<int32_t>(text.size());
  int32_t i = 0;
  while (i < length) {
    const int32_t start = i;
    UChar32 c = 0;
    U8_NEXT(s, i, length, c);
    if (c < 0) c = 0xFFFD;
    cps.push_back({c, static_cast<std::size_t>(start), static_cast<std::size_t>(i)});
  }
  return cps;
}

bool is_letter(UChar32 c) { return (U_GET_GC_MASK(c) & U_GC_L_MASK) != 0; }
bool is_number(UChar32 c) { return (U_GET_GC_MASK(c) & U_GC_N_MASK) != 0; }
bool is_space(UChar32 c) { return u_isUWhiteSpace(c) != 0; }
bool is_other(UChar32 c) { return !is_space(c) && !is_letter(c) && !is_number(c); }

std::string merge_key(std::string_view left, std::string_view right) {
  std::string key;
  key.reserve(left.size() + right.size() + 1);
  key.append(left);
  key.push_back('\x01');
  key.append(right);
  return key;
}

}  // namespace

BpeVocab BpeVocab::load(const std::filesystem::path& vocab_path,
                        const std::filesystem::path& merges_path) {
  return parse(read_file(vocab_path), read_file(merges_path));
}

BpeVocab BpeVocab::parse(std::string_view vocab_json, std::string_view merges_text) {
  BpeVocab vocab;

  const auto cps = byte_code_points();
  vocab.byte_encoder_.resize(256);
  std::unordered_map<std::string, std::uint8_t> byte_decoder;
  for (int b = 0; b < 256; ++b) {
    append_utf8(vocab.byte_encoder_[b], cps[b]);
    byte_decoder.emplace(vocab.byte_encoder_[b], static_cast<std::uint8_t>(b));
  }

  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(vocab_json);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(std::string("vocab: malformed JSON: ") + e.what());
  }
  if (!doc.is_object()) throw Error("vocab: expected a JSON object of token -> id");
  if (doc.empty()) throw Error("vocab: empty vocabulary");

  std::map<std::int64_t, std::string> by_id;
  for (const auto& [token, value] : doc.items()) {
    if (!value.is_number_integer()) throw Error("vocab: id of token '" + token + "' is not an integer");
    const auto id = value.get<std::int64_t>();
    if (id < 0 || id > std::numeric_limits<TokenId>::max()) {
      throw Error("vocab: id " + std::to_string(id) + " of token '" + token + "' is out of range");
    }
    auto [it, inserted] = by_id.emplace(id, token);
    if (!inserted) {
      throw Error("vocab: duplicate id " + std::to_string(id) + " for tokens '" + it->second + "' and '" +
                  token + "'");
    }
  }
  if (by_id.rbegin()->first != static_cast<std::int64_t>(by_id.size()) - 1) {
    throw Error("vocab: ids are not contiguous from 0 (" + std::to_string(by_id.size()) + " tokens, max id " +
                std::to_string(by_id.rbegin()->first) + ")");
  }

  vocab.id_to_token_.reserve(by_id.size());
  vocab.id_to_bytes_.reserve(by_id.size());
  for (auto& [id, token] : by_id) {
    std::string raw;
    const auto points = code_points(token);
    for (const auto& cp : points) {
      const std::string symbol(token.substr(cp.begin, cp.end - cp.begin));
      auto it = byte_decoder.find(symbol);
      if (it == byte_decoder.end()) {
        throw Error("vocab: token '" + token + "' (id " + std::to_string(id) +
                    ") contains a character outside the byte alphabet");
      }
      raw.push_back(static_cast<char>(it->second));
    }
    vocab.token_to_id_.emplace(token, static_cast<TokenId>(id));
    vocab.bytes_to_id_.emplace(raw, static_cast<TokenId>(id));
    vocab.id_to_token_.push_back(std::move(token));
    vocab.id_to_bytes_.push_back(std::move(raw));
  }

  for (int b = 0; b < 256; ++b) {
    if (!vocab.token_to_id_.contains(vocab.byte_encoder_[b])) {
      throw Error("vocab: missing single-byte token for byte " + std::to_string(b));
    }
  }
  if (auto eot = vocab.find(kEndOfText)) {
    vocab.eot_id_ = *eot;
  } else {
    throw Error("vocab: missing end-of-text token <|endoftext|>");
  }

  std::size_t line_no = 0;
  std::size_t rank = 0;
  std::size_t pos = 0;
  while (pos <= merges_text.size()) {
    std::size_t nl = merges_text.find('\n', pos);
    if (nl == std::string_view::npos) nl = merges_text.size();
    std::string_view line = merges_text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line_no == 1 && line.starts_with("#")) continue;
    if (line.empty()) {
      if (pos > merges_text.size()) break;
      continue;
    }
    const auto space = line.find(' ');
    if (space == std::string_view::npos || space == 0 || space + 1 >= line.size() ||
        line.find(' ', space + 1) != std::string_view::npos) {
      throw Error("merges: line " + std::to_string(line_no) + " is not of the form 'left right': '" +
                  std::string(line) + "'");
    }
    const auto left = line.substr(0, space);
    const auto right = line.substr(space + 1);
    for (auto part : {left, right}) {
      if (!vocab.find(part)) {
        throw Error("merges: line " + std::to_string(line_no) + " references unknown token '" +
                    std::string(part) + "'");
      }
    }
    const std::string joined = std::string(left) + std::string(right);
    if (!vocab.find(joined)) {
      throw Error("merges: line " + std::to_string(line_no) + " produces unknown token '" + joined + "'");
    }
    vocab.merge_ranks_.emplace(merge_key(left, right), rank++);
  }
  vocab.merge_count_ = rank;
  return vocab;
}

std::optional<TokenId> BpeVocab::find(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  if (it == token_to_id_.end()) return std::nullopt;
  return it->second;
}

std::optional<TokenId> BpeVocab::find_bytes(std::string_view raw) const {
  auto it = bytes_to_id_.find(std::string(raw));
  if (it == bytes_to_id_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::size_t> BpeVocab::merge_rank(std::string_view left, std::string_view right) const {
  auto it = merge_ranks_.find(merge_key(left, right));
  if (it == merge_ranks_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::string> pretokenize(std::string_view text) {
  static constexpr std::array<std::string_view, 7> kContractions = {"'s", "'t", "'re", "'ve", "'m", "'ll", "'d"};

  const auto cps = code_points(text);
  const std::size_t n = cps.size();
  std::vector<std::string> pieces;
  std::size_t i = 0;

  auto run_while = [&](std::size_t from, auto pred) {
    while (from < n && pred(cps[from].value)) ++from;
    return from;
  };
  auto emit = [&](std::size_t from, std::size_t to) {
    const std::size_t b = cps[from].begin;
    const std::size_t e = to < n ? cps[to].begin : text.size();
    pieces.emplace_back(text.substr(b, e - b));
    i = to;
  };

  while (i < n) {
    const UChar32 c = cps[i].value;

    if (c == '\'') {
      const auto rest = text.substr(cps[i].begin);
      auto hit = std::find_if(kContractions.begin(), kContractions.end(),
                              [&](std::string_view k) { return rest.starts_with(k); });
      if (hit != kContractions.end()) {
        emit(i, i + hit->size());
        continue;
      }
    }

    // " ?\p{L}+", " ?\p{N}+", " ?[^\s\p{L}\p{N}]+"
    const std::size_t body = (c == ' ' && i + 1 < n) ? i + 1 : i;
    if (body < n) {
      const UChar32 b = cps[body].value;
      if (is_letter(b)) {
        emit(i, run_while(body, is_letter));
        continue;
      }
      if (is_number(b)) {
        emit(i, run_while(body, is_number));
        continue;
      }
      if (is_other(b)) {
        emit(i, run_while(body, is_other));
        continue;
      }
    }

    // "\s+(?!\S)" then "\s+"
    const std::size_t end = run_while(i, is_space);
    if (end == n || end - i == 1) {
      emit(i, end);
    } else {
      emit(i, end - 1);
    }
  }
  return pieces;
}

namespace {

void bpe_piece(const BpeVocab& vocab, std::string_view piece, std::vector<TokenId>& out) {
  std::vector<std::string> word;
  word.reserve(piece.size());
  for (unsigned char b : piece) word.push_back(vocab.byte_symbol(b));

  while (word.size() > 1) {
    std::size_t best_rank = std::numeric_limits<std::size_t>::max();
    std::size_t best = 0;
    for (std::size_t k = 0; k + 1 < word.size(); ++k) {
      if (auto r = vocab.merge_rank(word[k], word[k + 1]); r && *r < best_rank) {
        best_rank = *r;
        best = k;
      }
    }
    if (best_rank == std::numeric_limits<std::size_t>::max()) break;

    const std::string first = word[best];
    const std::string second = word[best + 1];
    std::vector<std::string> merged;
    merged.reserve(word.size());
    for (std::size_t k = 0; k < word.size();) {
      if (k + 1 < word.size() && word[k] == first && word[k + 1] == second) {
        merged.push_back(first + second);
        k += 2;
      } else {
        merged.push_back(std::move(word[k]));
        ++k;
      }
    }
    word = std::move(merged);
  }

  for (const auto& symbol : word) {
    auto id = vocab.find(symbol);
    if (!id) throw Error("bpe: symbol '" + symbol + "' missing from vocabulary");
    out.push_back(*id);
  }
}

}  // namespace

TokenSequence encode(const BpeVocab& vocab, std::string_view text, bool prepend_bos) {
  TokenSequence seq;
  seq.has_bos = prepend_bos;
  if (prepend_bos) seq.ids.push_back(vocab.eot_id());
  for (const auto& piece : pretokenize(text)) bpe_piece(vocab, piece, seq.ids);
  return seq;
}

std::string decode(const BpeVocab& vocab, const TokenSequence& seq) {
  std::string out;
  for (std::size_t pos = 0; pos < seq.ids.size(); ++pos) {
    const TokenId id = seq.ids[pos];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size()) {
      throw ValidationError("token id " + std::to_string(id) + " at position " + std::to_string(pos) +
                            " is outside the vocabulary (size " + std::to_string(vocab.size()) + ")");
    }
    out += vocab.token_bytes(id);
  }
  return out;
}

std::string decode_text(const BpeVocab& vocab, const TokenSequence& seq) {
  if (!seq.has_bos || seq.ids.empty()) return decode(vocab, seq);
  TokenSequence body{{seq.ids.begin() + 1, seq.ids.end()}, false};
  return decode(vocab, body);
}

std::string to_valid_utf8(std::string_view bytes) {
  const auto* s = reinterpret_cast<const uint8_t*>(bytes.data());
  const auto length = static_cast<int32_t>(bytes.size());
  std::string out;
  out.reserve(bytes.size());
  int32_t i = 0;
  while (i < length) {
    const int32_t start = i;
    UChar32 c = 0;
    U8_NEXT(s, i, length, c);
    if (c < 0) {
      out += "\xEF\xBF\xBD";
    } else {
      out.append(bytes.substr(static_cast<std::size_t>(start), static_cast<std::size_t>(i - start)));
    }
  }
  return out;
}

std::string normalize_steering_prompt(std::string_view text) {
  if (text.empty() || text.front() == ' ') return std::string(text);
  return " " + std::string(text);
}

}  // namespace actadd
