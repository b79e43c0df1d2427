#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "lmlab/error.hpp"

// Corpus ingestion: UTF-8 text in, token ids out. Char mode assigns an id to
// every distinct code point of the train region; word mode keeps the most
// frequent whitespace-separated tokens and funnels the rest through <unk>.

namespace lmlab {

enum class TokenizerMode { kChar, kWord };

TokenizerMode tokenizer_mode_from_string(const std::string& s);
std::string to_string(TokenizerMode mode);

std::vector<std::uint32_t> utf8_decode(const std::string& text);
std::string utf8_encode(std::span<const std::uint32_t> code_points);

class Tokenizer {
 public:
  // Builds the vocabulary from `text`. max_vocab caps the kept word types in
  // word mode (0 = keep everything); char mode ignores it.
  static Tokenizer build(const std::string& text, TokenizerMode mode,
                         std::size_t max_vocab = 0);

  // `dropped`, when given, receives the number of unknown tokens that were
  // skipped (char mode) or mapped to unk (word mode).
  std::vector<int> encode(const std::string& text,
                          std::size_t* dropped = nullptr) const;
  std::string decode(std::span<const int> ids) const;

  std::size_t vocab_size() const { return tokens_.size(); }
  TokenizerMode mode() const { return mode_; }
  int unk_id() const { return unk_id_; }  // -1 in char mode
  const std::vector<std::string>& tokens() const { return tokens_; }

  // One token per line, line number = id; control characters are escaped so
  // the file stays line-oriented.
  void save_vocab(const std::string& path) const;
  static Tokenizer load_vocab(const std::string& path, TokenizerMode mode);

 private:
  TokenizerMode mode_ = TokenizerMode::kChar;
  std::vector<std::string> tokens_;          // id -> token text
  std::vector<std::uint32_t> char_points_;   // char mode: id -> code point
  std::unordered_map<std::string, int> word_index_;
  int unk_id_ = -1;

  void build_word_index();
  int lookup_word(const std::string& w) const;
  int lookup_char(std::uint32_t cp) const;
};

struct SplitFractions {
  double train = 0.90;
  double valid = 0.05;
  double test = 0.05;
  void validate() const;
};

// Disjoint contiguous regions of the corpus, already tokenized.
struct Split {
  std::vector<int> train, valid, test;
};

struct Corpus {
  Tokenizer tokenizer;
  Split split;
  std::size_t dropped_valid = 0;  // unknown tokens skipped outside train
  std::size_t dropped_test = 0;
};

// Deterministic: regions are cut at code-point fractions, the vocabulary
// comes from the train region only, and no RNG is involved anywhere.
Corpus ingest_corpus(const std::string& text, TokenizerMode mode,
                     std::size_t max_vocab, SplitFractions fractions);

std::string read_text_file(const std::string& path);

// Contiguous non-overlapping windows of exactly `len` tokens; the trailing
// remainder is dropped.
std::vector<std::vector<int>> make_mle_sequences(std::span<const int> split,
                                                 std::size_t len = 300);

struct PrefixBatch {
  std::vector<std::vector<int>> prefixes;
  std::string source;
};

// Cuts one training sequence into m consecutive disjoint prefixes.
PrefixBatch make_prefixes(std::span<const int> sequence,
                          std::size_t prefix_len = 50, std::size_t m = 6,
                          std::string source = "train");

}  // namespace lmlab
