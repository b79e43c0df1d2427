#include "lmlab/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>

namespace lmlab {

TokenizerMode tokenizer_mode_from_string(const std::string& s) {
  if (s == "char") return TokenizerMode::kChar;
  if (s == "word") return TokenizerMode::kWord;
  throw ConfigError("unknown tokenizer mode '" + s + "' (want char|word)");
}

std::string to_string(TokenizerMode mode) {
  return mode == TokenizerMode::kChar ? "char" : "word";
}

// --------------------------------------------------------------------------
// UTF-8. Malformed byte sequences decode to U+FFFD rather than failing, so
// arbitrary user corpora never crash ingestion.

std::vector<std::uint32_t> utf8_decode(const std::string& text) {
  std::vector<std::uint32_t> out;
  out.reserve(text.size());
  const unsigned char* p = reinterpret_cast<const unsigned char*>(text.data());
  std::size_t n = text.size();
  std::size_t i = 0;
  constexpr std::uint32_t kReplacement = 0xFFFD;
  while (i < n) {
    const unsigned char b0 = p[i];
    if (b0 < 0x80) {
      out.push_back(b0);
      ++i;
      continue;
    }
    int extra;
    std::uint32_t cp;
    if ((b0 & 0xE0) == 0xC0) {
      extra = 1;
      cp = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
      extra = 2;
      cp = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0) {
      extra = 3;
      cp = b0 & 0x07;
    } else {
      out.push_back(kReplacement);
      ++i;
      continue;
    }
    if (i + extra >= n) {
      out.push_back(kReplacement);
      ++i;
      continue;
    }
    bool ok = true;
    for (int j = 1; j <= extra; ++j) {
      if ((p[i + j] & 0xC0) != 0x80) {
        ok = false;
        break;
      }
      cp = (cp << 6) | (p[i + j] & 0x3F);
    }
    if (!ok || cp > 0x10FFFF) {
      out.push_back(kReplacement);
      ++i;
      continue;
    }
    out.push_back(cp);
    i += 1 + extra;
  }
  return out;
}

std::string utf8_encode(std::span<const std::uint32_t> code_points) {
  std::string out;
  out.reserve(code_points.size());
  for (std::uint32_t cp : code_points) {
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
  return out;
}

// --------------------------------------------------------------------------
// Tokenizer

namespace {

std::vector<std::string> split_whitespace(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (char c : text) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      if (!cur.empty()) {
        words.push_back(cur);
        cur.clear();
      }
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) words.push_back(cur);
  return words;
}

constexpr const char* kUnkToken = "<unk>";

std::string escape_token(const std::string& tok) {
  std::string out;
  for (unsigned char c : tok) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      case '\t': out += "\\t"; break;
      default:
        if (c < 0x20 || c == 0x7F) {
          char buf[8];
          std::snprintf(buf, sizeof buf, "\\u%04x", c);
          out += buf;
        } else {
          out.push_back(static_cast<char>(c));
        }
    }
  }
  return out;
}

std::string unescape_token(const std::string& line) {
  std::string out;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] != '\\' || i + 1 >= line.size()) {
      out.push_back(line[i]);
      continue;
    }
    const char c = line[++i];
    switch (c) {
      case '\\': out.push_back('\\'); break;
      case 'n': out.push_back('\n'); break;
      case 'r': out.push_back('\r'); break;
      case 't': out.push_back('\t'); break;
      case 'u': {
        if (i + 4 < line.size()) {
          const unsigned v = std::stoul(line.substr(i + 1, 4), nullptr, 16);
          out.push_back(static_cast<char>(v));
          i += 4;
        }
        break;
      }
      default: out.push_back(c);
    }
  }
  return out;
}

}  // namespace

Tokenizer Tokenizer::build(const std::string& text, TokenizerMode mode,
                           std::size_t max_vocab) {
  if (text.empty()) throw IngestionError("cannot build a vocabulary from empty text");
  Tokenizer tk;
  tk.mode_ = mode;
  if (mode == TokenizerMode::kChar) {
    std::vector<std::uint32_t> pts = utf8_decode(text);
    std::vector<std::uint32_t> uniq(pts.begin(), pts.end());
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    tk.char_points_ = uniq;
    tk.tokens_.reserve(uniq.size());
    for (std::uint32_t cp : uniq)
      tk.tokens_.push_back(utf8_encode(std::span(&cp, 1)));
    tk.unk_id_ = -1;
  } else {
    std::unordered_map<std::string, std::size_t> counts;
    for (const std::string& w : split_whitespace(text)) ++counts[w];
    if (counts.empty())
      throw IngestionError("word-mode corpus contains no tokens");
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(),
                                                            counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    std::size_t keep = ranked.size();
    if (max_vocab > 0) keep = std::min(keep, max_vocab);
    for (std::size_t i = 0; i < keep; ++i) tk.tokens_.push_back(ranked[i].first);
    tk.tokens_.push_back(kUnkToken);
    tk.unk_id_ = static_cast<int>(tk.tokens_.size()) - 1;
    tk.build_word_index();
  }
  return tk;
}

int Tokenizer::lookup_char(std::uint32_t cp) const {
  auto it = std::lower_bound(char_points_.begin(), char_points_.end(), cp);
  if (it == char_points_.end() || *it != cp) return -1;
  return static_cast<int>(it - char_points_.begin());
}

void Tokenizer::build_word_index() {
  word_index_.clear();
  for (std::size_t i = 0; i < tokens_.size(); ++i)
    word_index_.emplace(tokens_[i], static_cast<int>(i));
}

int Tokenizer::lookup_word(const std::string& w) const {
  auto it = word_index_.find(w);
  return it == word_index_.end() ? -1 : it->second;
}

std::vector<int> Tokenizer::encode(const std::string& text,
                                   std::size_t* dropped) const {
  std::vector<int> ids;
  std::size_t miss = 0;
  if (mode_ == TokenizerMode::kChar) {
    const std::vector<std::uint32_t> pts = utf8_decode(text);
    ids.reserve(pts.size());
    for (std::uint32_t cp : pts) {
      const int id = lookup_char(cp);
      if (id < 0) {
        ++miss;  // unknown characters are dropped, not fatal
        continue;
      }
      ids.push_back(id);
    }
  } else {
    for (const std::string& w : split_whitespace(text)) {
      const int id = lookup_word(w);
      if (id < 0) {
        ++miss;
        ids.push_back(unk_id_);
      } else {
        ids.push_back(id);
      }
    }
  }
  if (dropped) *dropped = miss;
  return ids;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw IndexError("token id " + std::to_string(id) +
                       " outside vocabulary of size " +
                       std::to_string(tokens_.size()));
    if (mode_ == TokenizerMode::kWord && i > 0) out.push_back(' ');
    out += tokens_[id];
  }
  return out;
}

void Tokenizer::save_vocab(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IngestionError("cannot write vocab file: " + path);
  for (const std::string& tok : tokens_) f << escape_token(tok) << '\n';
}

Tokenizer Tokenizer::load_vocab(const std::string& path, TokenizerMode mode) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingArtifactError("vocab file not found: " + path);
  Tokenizer tk;
  tk.mode_ = mode;
  std::string line;
  while (std::getline(f, line)) tk.tokens_.push_back(unescape_token(line));
  if (tk.tokens_.empty()) throw IngestionError("vocab file is empty: " + path);
  if (mode == TokenizerMode::kChar) {
    tk.char_points_.reserve(tk.tokens_.size());
    for (const std::string& t : tk.tokens_) {
      const auto pts = utf8_decode(t);
      if (pts.size() != 1)
        throw IngestionError("char vocab entry is not a single code point");
      tk.char_points_.push_back(pts[0]);
    }
    // ids must match line numbers, so the sorted-points invariant is only
    // used for lookup; verify it instead of resorting.
    if (!std::is_sorted(tk.char_points_.begin(), tk.char_points_.end()))
      throw IngestionError("char vocab file is not sorted by code point");
    tk.unk_id_ = -1;
  } else {
    tk.unk_id_ = -1;
    for (std::size_t i = 0; i < tk.tokens_.size(); ++i)
      if (tk.tokens_[i] == kUnkToken) tk.unk_id_ = static_cast<int>(i);
    if (tk.unk_id_ < 0)
      throw IngestionError("word vocab file lacks the <unk> entry");
    tk.build_word_index();
  }
  return tk;
}

// --------------------------------------------------------------------------

void SplitFractions::validate() const {
  if (train <= 0 || valid <= 0 || test <= 0)
    throw ConfigError("split fractions must all be positive");
  if (std::abs(train + valid + test - 1.0) > 1e-9)
    throw ConfigError("split fractions must sum to 1");
}

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IngestionError("cannot open corpus file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

Corpus ingest_corpus(const std::string& text, TokenizerMode mode,
                     std::size_t max_vocab, SplitFractions fractions) {
  fractions.validate();
  if (text.empty()) throw IngestionError("corpus text is empty");
  const std::vector<std::uint32_t> pts = utf8_decode(text);
  const std::size_t n = pts.size();
  const std::size_t n_train =
      static_cast<std::size_t>(std::floor(n * fractions.train));
  const std::size_t n_valid =
      static_cast<std::size_t>(std::floor(n * fractions.valid));
  if (n_train == 0 || n_valid == 0 || n_train + n_valid >= n)
    throw IngestionError("corpus too small for the requested split fractions");

  const std::string train_text = utf8_encode(std::span(pts.data(), n_train));
  const std::string valid_text =
      utf8_encode(std::span(pts.data() + n_train, n_valid));
  const std::string test_text =
      utf8_encode(std::span(pts.data() + n_train + n_valid,
                            n - n_train - n_valid));

  Corpus c{Tokenizer::build(train_text, mode, max_vocab), {}, 0, 0};
  c.split.train = c.tokenizer.encode(train_text);
  c.split.valid = c.tokenizer.encode(valid_text, &c.dropped_valid);
  c.split.test = c.tokenizer.encode(test_text, &c.dropped_test);
  if (c.split.train.empty() || c.split.valid.empty() || c.split.test.empty())
    throw IngestionError("one of the corpus splits tokenized to nothing");
  return c;
}

std::vector<std::vector<int>> make_mle_sequences(std::span<const int> split,
                                                 std::size_t len) {
  if (len == 0) throw ConfigError("sequence length must be positive");
  if (split.size() < len)
    throw ConfigError("split of " + std::to_string(split.size()) +
                      " tokens is shorter than sequence length " +
                      std::to_string(len));
  const std::size_t count = split.size() / len;
  std::vector<std::vector<int>> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i)
    out.emplace_back(split.begin() + i * len, split.begin() + (i + 1) * len);
  return out;
}

PrefixBatch make_prefixes(std::span<const int> sequence,
                          std::size_t prefix_len, std::size_t m,
                          std::string source) {
  if (m < 1 || prefix_len < 1)
    throw ContractError("make_prefixes needs m >= 1 and prefix_len >= 1");
  if (sequence.size() != m * prefix_len)
    throw ContractError("make_prefixes requires |sequence| == m * prefix_len, got " +
                        std::to_string(sequence.size()) + " != " +
                        std::to_string(m * prefix_len));
  PrefixBatch batch;
  batch.source = std::move(source);
  batch.prefixes.reserve(m);
  for (std::size_t j = 0; j < m; ++j)
    batch.prefixes.emplace_back(sequence.begin() + j * prefix_len,
                                sequence.begin() + (j + 1) * prefix_len);
  return batch;
}

}  // namespace lmlab
