#include "dsaa/text.hpp"

#include <algorithm>
#include <cctype>
#include <condition_variable>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>

#include <httplib.h>
#include <json.hpp>

#include "dsaa/log.hpp"
#include "dsaa/tensor.hpp"

namespace dsaa::text {
namespace {

constexpr std::size_t kMaxWordChars = 100;

bool is_punct(unsigned char c) { return std::ispunct(c) != 0; }

std::vector<std::string> wordpiece(const Vocabulary& vocab, const std::string& word) {
  if (word.size() > kMaxWordChars) return {std::string(Vocabulary::kUnk)};
  std::vector<std::string> pieces;
  std::size_t start = 0;
  while (start < word.size()) {
    std::size_t end = word.size();
    std::string found;
    while (start < end) {
      std::string candidate = word.substr(start, end - start);
      if (start > 0) candidate = std::string(Vocabulary::kContinuation) + candidate;
      if (vocab.find(candidate)) {
        found = std::move(candidate);
        break;
      }
      --end;
    }
    if (found.empty()) return {std::string(Vocabulary::kUnk)};
    pieces.push_back(std::move(found));
    start = end;
  }
  return pieces;
}

bool is_continuation(const std::string& surface) {
  return surface.rfind(Vocabulary::kContinuation, 0) == 0;
}

}  // namespace

Vocabulary::Vocabulary(const std::vector<std::string>& tokens) {
  for (auto special : {kPad, kUnk, kCls, kSep}) {
    token_to_id_.emplace(std::string(special), static_cast<int>(id_to_token_.size()));
    id_to_token_.emplace_back(special);
  }
  for (const auto& t : tokens) {
    if (t.empty()) throw std::invalid_argument("vocabulary: empty token");
    if (t == kPad || t == kUnk || t == kCls || t == kSep) continue;
    if (!token_to_id_.emplace(t, static_cast<int>(id_to_token_.size())).second) {
      throw std::invalid_argument("vocabulary: duplicate token '" + t + "'");
    }
    id_to_token_.push_back(t);
  }
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocabulary " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) tokens.push_back(line);
  }
  return Vocabulary(tokens);
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write vocabulary " + path.string());
  for (const auto& t : id_to_token_) out << t << '\n';
}

std::optional<int> Vocabulary::find(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  if (it == token_to_id_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
    throw ContractError("token id " + std::to_string(id) + " outside vocabulary of size " +
                        std::to_string(id_to_token_.size()));
  }
  return id_to_token_[static_cast<std::size_t>(id)];
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) words.push_back(std::move(cur));
    cur.clear();
  };
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      flush();
    } else if (is_punct(c)) {
      flush();
      words.emplace_back(1, static_cast<char>(c));
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return words;
}

TokenSeq tokenize(const Vocabulary& vocab, std::string_view text, std::size_t max_length) {
  TokenSeq seq;
  for (const auto& word : split_words(text)) {
    for (auto& piece : wordpiece(vocab, word)) {
      seq.ids.push_back(*vocab.find(piece));
      seq.surfaces.push_back(std::move(piece));
    }
  }
  if (seq.length() > max_length) {
    throw TruncationError("caption tokenizes to " + std::to_string(seq.length()) +
                          " tokens, above the maximum sequence length " + std::to_string(max_length));
  }
  return seq;
}

std::vector<std::size_t> AttributeSpanSet::attribute_positions() const {
  std::vector<std::size_t> all;
  for (const auto& s : spans) all.insert(all.end(), s.indices.begin(), s.indices.end());
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  return all;
}

void AttributeSpanSet::validate(std::size_t caption_length) const {
  std::set<std::size_t> seen;
  for (const auto& s : spans) {
    if (s.indices.empty()) throw ContractError("attribute span '" + s.phrase + "' has no tokens");
    for (std::size_t i = 0; i < s.indices.size(); ++i) {
      const std::size_t idx = s.indices[i];
      if (idx < 1 || idx > caption_length) {
        throw ContractError("attribute span index " + std::to_string(idx) + " outside [1, " +
                            std::to_string(caption_length) + "]");
      }
      if (i > 0 && idx != s.indices[i - 1] + 1) throw ContractError("attribute span '" + s.phrase + "' is not contiguous");
      if (!seen.insert(idx).second) throw ContractError("attribute spans overlap at position " + std::to_string(idx));
    }
  }
}

SpanMatch match_spans(const Vocabulary& vocab, const TokenSeq& caption, const std::vector<std::string>& phrases) {
  struct Candidate {
    std::size_t start;  // 0-based
    std::size_t len;
    std::size_t phrase;
  };
  SpanMatch result;
  if (phrases.empty()) return result;
  if (caption.empty()) {
    result.unmatched = phrases;
    return result;
  }

  std::vector<Candidate> cands;
  const std::size_t L = caption.length();
  for (std::size_t p = 0; p < phrases.size(); ++p) {
    TokenSeq pt = tokenize(vocab, phrases[p], std::numeric_limits<std::size_t>::max());
    const std::size_t n = pt.length();
    if (n == 0 || n > L) continue;
    for (std::size_t s = 0; s + n <= L; ++s) {
      if (!std::equal(pt.ids.begin(), pt.ids.end(), caption.ids.begin() + static_cast<std::ptrdiff_t>(s))) continue;
      // Word-aligned: the run must not start or end inside a word.
      if (is_continuation(caption.surfaces[s])) continue;
      if (s + n < L && is_continuation(caption.surfaces[s + n])) continue;
      cands.push_back({s, n, p});
    }
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.start != b.start) return a.start < b.start;
    if (a.len != b.len) return a.len > b.len;
    return a.phrase < b.phrase;
  });

  std::vector<char> taken(L, 0);
  std::vector<char> phrase_used(phrases.size(), 0);
  for (const auto& c : cands) {
    bool free = true;
    for (std::size_t i = c.start; i < c.start + c.len; ++i) free = free && !taken[i];
    if (!free) continue;
    AttributeSpan span{phrases[c.phrase], {}};
    for (std::size_t i = c.start; i < c.start + c.len; ++i) {
      taken[i] = 1;
      span.indices.push_back(i + 1);
    }
    phrase_used[c.phrase] = 1;
    result.spans.spans.push_back(std::move(span));
  }
  for (std::size_t p = 0; p < phrases.size(); ++p) {
    if (!phrase_used[p]) result.unmatched.push_back(phrases[p]);
  }
  return result;
}

Lexicon Lexicon::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open lexicon " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("lexicon " + path.string() + ": " + e.what());
  }
  Lexicon lex;
  for (const auto& [type, phrases] : j.items()) {
    lex.by_type[type] = phrases.get<std::vector<std::string>>();
  }
  return lex;
}

void Lexicon::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write lexicon " + path.string());
  out << nlohmann::json(by_type).dump(2) << '\n';
}

std::optional<std::string> Lexicon::type_of(std::string_view phrase) const {
  for (const auto& [type, phrases] : by_type) {
    if (std::find(phrases.begin(), phrases.end(), phrase) != phrases.end()) return type;
  }
  return std::nullopt;
}

void ExtractionConfig::validate() const {
  if (mode == ExtractionMode::Remote && endpoint.empty()) {
    throw std::invalid_argument("remote extraction requires a non-empty endpoint");
  }
  if (timeout_ms <= 0) throw std::invalid_argument("extraction timeout must be positive");
  if (retries < 0) throw std::invalid_argument("extraction retries must be >= 0");
  if (max_connections < 1) throw std::invalid_argument("extraction max_connections must be >= 1");
}

std::string ExtractionConfig::render_prompt(std::string_view caption) const {
  std::string out = prompt_template;
  const std::string key = "{caption}";
  auto pos = out.find(key);
  if (pos == std::string::npos) return out + "\n" + std::string(caption);
  out.replace(pos, key.size(), caption);
  return out;
}

std::vector<std::string> extract_attributes_lexicon(const ExtractionConfig& cfg, std::string_view text) {
  struct Entry {
    std::vector<std::string> words;
    std::string phrase;
  };
  std::vector<Entry> entries;
  for (const auto& [type, phrases] : cfg.lexicon.by_type) {
    for (const auto& p : phrases) {
      auto w = split_words(p);
      if (!w.empty()) entries.push_back({std::move(w), p});
    }
  }
  // Longest first; lexicon order breaks ties.
  std::stable_sort(entries.begin(), entries.end(),
                   [](const Entry& a, const Entry& b) { return a.words.size() > b.words.size(); });

  const auto words = split_words(text);
  std::vector<std::string> found;
  std::size_t i = 0;
  while (i < words.size()) {
    const Entry* hit = nullptr;
    for (const auto& e : entries) {
      if (i + e.words.size() > words.size()) continue;
      if (std::equal(e.words.begin(), e.words.end(), words.begin() + static_cast<std::ptrdiff_t>(i))) {
        hit = &e;
        break;
      }
    }
    if (hit) {
      found.push_back(hit->phrase);
      i += hit->words.size();
    } else {
      ++i;
    }
  }
  return found;
}

bool occurs_as_words(std::string_view text, std::string_view phrase) {
  const auto tw = split_words(text);
  const auto pw = split_words(phrase);
  if (pw.empty() || pw.size() > tw.size()) return false;
  for (std::size_t i = 0; i + pw.size() <= tw.size(); ++i) {
    if (std::equal(pw.begin(), pw.end(), tw.begin() + static_cast<std::ptrdiff_t>(i))) return true;
  }
  return false;
}

struct RemoteExtractor::State {
  std::mutex mu;
  std::condition_variable cv;
  int in_flight = 0;
};

RemoteExtractor::RemoteExtractor(ExtractionConfig cfg) : cfg_(std::move(cfg)), state_(std::make_unique<State>()) {
  cfg_.validate();
  if (cfg_.mode != ExtractionMode::Remote) throw std::invalid_argument("RemoteExtractor needs remote mode");
}

RemoteExtractor::~RemoteExtractor() = default;

ExtractionResult RemoteExtractor::extract(std::string_view caption) {
  // Split "scheme://host:port/path" into client base and request path.
  std::string base = cfg_.endpoint, path = "/";
  const auto scheme = base.find("://");
  const auto slash = base.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  if (slash != std::string::npos) {
    path = base.substr(slash);
    base = base.substr(0, slash);
  }

  const nlohmann::json body = {{"prompt", cfg_.render_prompt(caption)}, {"caption", std::string(caption)}};
  const std::string payload = body.dump();

  auto fallback = [&](std::string reason) {
    ExtractionResult r;
    r.phrases = extract_attributes_lexicon(cfg_, caption);
    r.fallback = true;
    r.reason = std::move(reason);
    log::warn("attribute extraction fell back to lexicon for \"" + std::string(caption) + "\": " + r.reason);
    return r;
  };

  {
    std::unique_lock lock(state_->mu);
    state_->cv.wait(lock, [&] { return state_->in_flight < cfg_.max_connections; });
    ++state_->in_flight;
  }
  struct Release {
    State& s;
    ~Release() {
      {
        std::lock_guard lock(s.mu);
        --s.in_flight;
      }
      s.cv.notify_one();
    }
  } release{*state_};

  std::string last_error = "no attempt made";
  std::optional<httplib::Result> reply;
  for (int attempt = 0; attempt <= cfg_.retries; ++attempt) {
    httplib::Client cli(base);
    const auto sec = cfg_.timeout_ms / 1000;
    const auto usec = (cfg_.timeout_ms % 1000) * 1000;
    cli.set_connection_timeout(sec, usec);
    cli.set_read_timeout(sec, usec);
    cli.set_write_timeout(sec, usec);
    auto res = cli.Post(path, payload, "application/json");
    if (res) {
      reply.emplace(std::move(res));
      break;
    }
    last_error = httplib::to_string(res.error());
  }
  if (!reply) return fallback("request failed after " + std::to_string(cfg_.retries + 1) + " attempts: " + last_error);
  const auto& res = *reply;
  if (res->status != 200) return fallback("endpoint answered HTTP " + std::to_string(res->status));

  std::vector<std::string> returned;
  try {
    const auto j = nlohmann::json::parse(res->body);
    returned = j.at("attributes").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    return fallback(std::string("malformed response: ") + e.what());
  }

  ExtractionResult out;
  for (auto& p : returned) {
    if (occurs_as_words(caption, p)) {
      out.phrases.push_back(std::move(p));
    } else {
      log::warn("dropping extracted phrase \"" + p + "\" not present in \"" + std::string(caption) + "\"");
      out.dropped.push_back(std::move(p));
    }
  }
  return out;
}

ExtractionResult extract_attributes_remote(const ExtractionConfig& cfg, std::string_view text) {
  RemoteExtractor client(cfg);
  return client.extract(text);
}

ExtractionResult extract_attributes(const ExtractionConfig& cfg, std::string_view text) {
  if (cfg.mode == ExtractionMode::Remote) return extract_attributes_remote(cfg, text);
  ExtractionResult r;
  r.phrases = extract_attributes_lexicon(cfg, text);
  return r;
}

}  // namespace dsaa::text
