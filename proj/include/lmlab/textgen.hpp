#pragma once

#include <cstdint>
#include <string>

namespace lmlab {

// Deterministic synthetic English-like corpus: a Zipf-weighted vocabulary of
// pronounceable words with per-word successor preferences, rendered as
// lowercase sentences with commas, periods and paragraph breaks. The same
// (seed, min_bytes) always yields the same text. Useful when no real corpus
// is at hand; char-level models trained on it exhibit the usual greedy
// repetition loops.
std::string generate_corpus(std::uint64_t seed, std::size_t min_bytes);

}  // namespace lmlab
