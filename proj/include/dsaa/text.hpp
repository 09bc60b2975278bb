#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace dsaa::text {

/// Wordpiece vocabulary. Ids 0..3 are always [PAD], [UNK], [CLS], [SEP];
/// word-internal pieces carry the "##" continuation prefix.
class Vocabulary {
 public:
  static constexpr std::string_view kPad = "[PAD]";
  static constexpr std::string_view kUnk = "[UNK]";
  static constexpr std::string_view kCls = "[CLS]";
  static constexpr std::string_view kSep = "[SEP]";
  static constexpr std::string_view kContinuation = "##";

  /// Builds from ordinary tokens; specials are prepended. Duplicates are an error.
  explicit Vocabulary(const std::vector<std::string>& tokens);
  /// One token per line. Special tokens in the file are accepted and ignored.
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::optional<int> find(std::string_view token) const;
  const std::string& token(int id) const;
  std::size_t size() const { return id_to_token_.size(); }
  const std::vector<std::string>& tokens() const { return id_to_token_; }

  int pad_id() const { return 0; }
  int unk_id() const { return 1; }
  int cls_id() const { return 2; }
  int sep_id() const { return 3; }

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

/// A tokenized caption. Positions are 0-based in storage; spans refer to them
/// 1-based (position i of the caption is surfaces[i-1]).
struct TokenSeq {
  std::vector<int> ids;
  std::vector<std::string> surfaces;

  std::size_t length() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
};

class TruncationError : public std::length_error {
 public:
  using std::length_error::length_error;
};

inline constexpr std::size_t kDefaultMaxLength = 32;

/// Lowercase, split on whitespace and punctuation (each punctuation char is
/// its own word), then greedy longest-match wordpiece segmentation. A word with
/// any unmatched remainder becomes a single [UNK].
TokenSeq tokenize(const Vocabulary& vocab, std::string_view text, std::size_t max_length = kDefaultMaxLength);

/// Lowercased words of text under the tokenizer's pre-split rules.
std::vector<std::string> split_words(std::string_view text);

struct AttributeSpan {
  std::string phrase;
  /// Sorted 1-based token positions (contiguous).
  std::vector<std::size_t> indices;
};

struct AttributeSpanSet {
  std::vector<AttributeSpan> spans;

  bool empty() const { return spans.empty(); }
  /// Sorted union of all span indices.
  std::vector<std::size_t> attribute_positions() const;
  /// Throws ContractError when an invariant fails against caption length L.
  void validate(std::size_t caption_length) const;
};

struct SpanMatch {
  AttributeSpanSet spans;
  std::vector<std::string> unmatched;
};

/// Locates each phrase as a contiguous, word-aligned token run in the caption.
/// Every occurrence becomes its own span. Overlaps resolve earliest start,
/// then longest, then first phrase in input order.
SpanMatch match_spans(const Vocabulary& vocab, const TokenSeq& caption, const std::vector<std::string>& phrases);

/// Attribute phrases grouped by type (color, material, pattern, transparency).
struct Lexicon {
  std::map<std::string, std::vector<std::string>> by_type;

  static Lexicon load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  /// Type of a phrase, if it is in the lexicon.
  std::optional<std::string> type_of(std::string_view phrase) const;
};

enum class ExtractionMode { Lexicon, Remote };

struct ExtractionConfig {
  ExtractionMode mode = ExtractionMode::Lexicon;
  Lexicon lexicon;
  std::string endpoint;
  std::string prompt_template =
      "List the attribute words (color, material, pattern, transparency) that modify the object in the "
      "caption below. Answer with JSON {\"attributes\": [...]} using words copied verbatim from the "
      "caption.\nCaption: {caption}";
  int timeout_ms = 2000;
  int retries = 1;
  int max_connections = 4;

  /// Throws std::invalid_argument when remote mode lacks an endpoint.
  void validate() const;
  std::string render_prompt(std::string_view caption) const;
};

/// Every lexicon phrase occurring as a whole-word run, longest match first,
/// non-overlapping, in caption order.
std::vector<std::string> extract_attributes_lexicon(const ExtractionConfig& cfg, std::string_view text);

struct ExtractionResult {
  std::vector<std::string> phrases;
  bool fallback = false;
  std::vector<std::string> dropped;
  std::string reason;
};

/// Client for the remote extraction endpoint.
///
/// POST {"prompt": ..., "caption": ...} to cfg.endpoint and expect
/// {"attributes": [..]}. Phrases absent from the caption are dropped with a
/// warning. Transport errors after retries, non-200 replies and malformed
/// bodies fall back to the lexicon extractor.
class RemoteExtractor {
 public:
  explicit RemoteExtractor(ExtractionConfig cfg);
  ~RemoteExtractor();
  RemoteExtractor(const RemoteExtractor&) = delete;
  RemoteExtractor& operator=(const RemoteExtractor&) = delete;

  ExtractionResult extract(std::string_view caption);

 private:
  struct State;
  ExtractionConfig cfg_;
  std::unique_ptr<State> state_;
};

ExtractionResult extract_attributes_remote(const ExtractionConfig& cfg, std::string_view text);

/// Dispatches on cfg.mode.
ExtractionResult extract_attributes(const ExtractionConfig& cfg, std::string_view text);

/// True when phrase occurs in text as a whole-word run (case-insensitive).
bool occurs_as_words(std::string_view text, std::string_view phrase);

}  // namespace dsaa::text
