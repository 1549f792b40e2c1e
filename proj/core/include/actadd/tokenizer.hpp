#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace actadd {

using TokenId = std::int32_t;

inline constexpr std::string_view kEndOfText = "<|endoftext|>";

// Ordered token ids. When has_bos is set, ids[0] is the end-of-text token.
struct TokenSequence {
  std::vector<TokenId> ids;
  bool has_bos = false;

  std::size_t size() const noexcept { return ids.size(); }
  bool empty() const noexcept { return ids.empty(); }

  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

// Byte-level BPE vocabulary in the published GPT-2 vocab.json / merges.txt
// layout. Immutable after construction, so one instance can be shared by any
// number of threads.
class BpeVocab {
 public:
  static BpeVocab load(const std::filesystem::path& vocab_path,
                       const std::filesystem::path& merges_path);
  // Same validation as load(), from in-memory file contents.
  static BpeVocab parse(std::string_view vocab_json, std::string_view merges_text);

  std::size_t size() const noexcept { return id_to_token_.size(); }
  TokenId eot_id() const noexcept { return eot_id_; }

  // Lookup by byte-level token string (e.g. "Ġweddings").
  std::optional<TokenId> find(std::string_view token) const;
  // Lookup by the raw bytes a token decodes to (e.g. " weddings").
  std::optional<TokenId> find_bytes(std::string_view raw) const;

  const std::string& token(TokenId id) const { return id_to_token_.at(static_cast<std::size_t>(id)); }
  const std::string& token_bytes(TokenId id) const { return id_to_bytes_.at(static_cast<std::size_t>(id)); }

  std::optional<std::size_t> merge_rank(std::string_view left, std::string_view right) const;
  std::size_t merge_count() const noexcept { return merge_count_; }

  // Printable code point (UTF-8 encoded) standing for raw byte b.
  const std::string& byte_symbol(std::uint8_t b) const { return byte_encoder_[b]; }

 private:
  BpeVocab() = default;

  std::unordered_map<std::string, TokenId> token_to_id_;
  std::vector<std::string> id_to_token_;
  std::vector<std::string> id_to_bytes_;
  std::unordered_map<std::string, TokenId> bytes_to_id_;
  // key: left + '\x01' + right
  std::unordered_map<std::string, std::size_t> merge_ranks_;
  std::size_t merge_count_ = 0;
  std::vector<std::string> byte_encoder_;
  TokenId eot_id_ = -1;
};

// GPT-2 pre-tokenizer split ('s|'t|'re|'ve|'m|'ll|'d| ?L+| ?N+| ?[^\sLN]+|\s+(?!\S)|\s+).
std::vector<std::string> pretokenize(std::string_view text);

// Total over UTF-8: byte-level BPE has no unknown-token path. The literal text
// "<|endoftext|>" is encoded as ordinary characters.
TokenSequence encode(const BpeVocab& vocab, std::string_view text, bool prepend_bos);

// Inverse of encode. A BOS id decodes to "<|endoftext|>".
std::string decode(const BpeVocab& vocab, const TokenSequence& seq);
// Decode for display: a leading BOS is dropped.
std::string decode_text(const BpeVocab& vocab, const TokenSequence& seq);

// Token boundaries can split a character, so decoded text may be invalid
// UTF-8. Replaces each ill-formed sequence with U+FFFD.
std::string to_valid_utf8(std::string_view bytes);

// Steering prompts get a leading space so words tokenize the way they do
// mid-sentence (" weddings" rather than "w|edd|ings").
std::string normalize_steering_prompt(std::string_view text);

}  // namespace actadd
