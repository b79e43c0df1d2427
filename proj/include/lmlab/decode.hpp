#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lmlab/error.hpp"
#include "lmlab/inference.hpp"
#include "lmlab/model.hpp"
#include "lmlab/rng.hpp"

// Decoding strategies: greedy / top-k / top-p / pure sampling / beam search,
// with optional temperature, repetition-penalized logits, and n-gram
// blocking. The per-step pipeline order is fixed: temperature -> penalty ->
// blocking -> truncation -> sampling.

namespace lmlab {

enum class Strategy { kGreedy, kTopK, kTopP, kBeam, kSampling };

Strategy strategy_from_string(const std::string& s);
std::string to_string(Strategy s);

struct DecodeParams {
  Strategy strategy = Strategy::kGreedy;
  int k = 1;                  // top-k
  double p = 1.0;             // top-p (nucleus) mass
  double temperature = 1.0;
  int beam_width = 1;
  std::optional<int> block_ngram;          // forbid repeating any n-gram
  std::optional<double> penalty_discount;  // CTRL-style logit discount
  int max_new_tokens = 100;
  std::uint64_t seed = 0;

  void validate() const;
  std::string label() const;  // e.g. "top-k,k=3" for tables
};

struct Continuation {
  std::vector<int> prefix;
  std::vector<int> tokens;                // exactly max_new_tokens ids
  std::vector<double> step_probabilities; // chosen-token prob after pipeline
  int blocked_fallbacks = 0;  // steps where blocking removed all mass
};

// Keep the k most probable tokens (ties toward lower ids), renormalized.
std::vector<double> truncate_top_k(const std::vector<double>& dist, int k);

// Keep the smallest probability-sorted prefix with cumulative mass >= p
// (including the crossing token), renormalized. p = 1 keeps everything.
std::vector<double> truncate_top_p(const std::vector<double>& dist, double p);

// Sign-aware logit discount for every token present in `history`:
// positive logits shrink by `discount`, negative ones grow by 1/discount.
// discount = 1 is the identity.
std::vector<double> penalize_logits(std::vector<double> logits,
                                    std::span<const int> history,
                                    double discount);

// Zero out any token that would complete an n-gram already present in
// `context`, then renormalize. When every token with mass is blocked the
// original distribution is returned and *fell_back is set.
std::vector<double> block_ngrams(const std::vector<double>& dist,
                                 std::span<const int> context, int n,
                                 bool* fell_back = nullptr);

std::vector<double> softmax_double(const std::vector<double>& logits);

// Sample an index from a normalized distribution.
int sample_index(const std::vector<double>& dist, Rng& rng);

template <typename S>
Continuation beam_search(const LanguageModel<S>& model,
                         std::span<const int> prefix, int width, int T,
                         std::optional<int> block_ngram = std::nullopt);

namespace detail {

// One pipeline step from raw logits to a chosen token.
struct StepOutcome {
  int token;
  double probability;
  bool blocked_fallback;
};

inline StepOutcome decode_step(const std::vector<double>& logits,
                               std::span<const int> context,
                               const DecodeParams& params, Rng& rng) {
  std::vector<double> z = logits;
  if (params.temperature != 1.0)
    for (double& v : z) v /= params.temperature;
  if (params.penalty_discount && *params.penalty_discount != 1.0)
    z = penalize_logits(std::move(z), context, *params.penalty_discount);

  std::vector<double> dist = softmax_double(z);
  bool fell_back = false;
  if (params.block_ngram)
    dist = block_ngrams(dist, context, *params.block_ngram, &fell_back);

  switch (params.strategy) {
    case Strategy::kGreedy:
      dist = truncate_top_k(dist, 1);
      break;
    case Strategy::kTopK:
      dist = truncate_top_k(dist, params.k);
      break;
    case Strategy::kTopP:
      dist = truncate_top_p(dist, params.p);
      break;
    case Strategy::kSampling:
      break;
    case Strategy::kBeam:
      throw ContractError("beam strategy must go through beam_search");
  }
  const int tok = params.strategy == Strategy::kGreedy
                      ? argmax_token(dist)
                      : sample_index(dist, rng);
  return {tok, dist[tok], fell_back};
}

}  // namespace detail

// Autoregressive decode of exactly params.max_new_tokens tokens from one
// prefix. Deterministic given params.seed; rng_stream_index lets callers
// give each prefix of a batch its own stream so parallel decodes agree with
// sequential ones.
template <typename S>
Continuation decode(const LanguageModel<S>& model, std::span<const int> prefix,
                    const DecodeParams& params,
                    std::uint64_t rng_stream_index = 0) {
  params.validate();
  if (prefix.empty()) throw ContractError("decode requires a non-empty prefix");
  if (params.strategy == Strategy::kBeam)
    return beam_search(model, prefix, params.beam_width, params.max_new_tokens,
                       params.block_ngram);

  TapeSuspend<S> pause;
  const std::size_t total = prefix.size() +
                            static_cast<std::size_t>(params.max_new_tokens);
  InferenceSession<S> session(model, 1, total);
  Rng rng = Rng::stream(params.seed, rng_stream_index);

  Continuation out;
  out.prefix.assign(prefix.begin(), prefix.end());
  std::vector<int> context(prefix.begin(), prefix.end());
  std::vector<std::vector<double>> logits =
      session.feed({out.prefix});

  for (int step = 0; step < params.max_new_tokens; ++step) {
    const auto r = detail::decode_step(logits[0], context, params, rng);
    out.tokens.push_back(r.token);
    out.step_probabilities.push_back(r.probability);
    if (r.blocked_fallback) ++out.blocked_fallbacks;
    context.push_back(r.token);
    if (step + 1 < params.max_new_tokens)
      logits = session.feed_step({r.token});
  }
  return out;
}

// Length-normalized beam search (mean log-probability; lengths are fixed, so
// normalization only matters for future EOS-bearing vocabularies). Ties
// break toward the lower beam index, then the lower token id. Width 1 is
// exactly greedy decoding. Optional n-gram blocking masks expansions that
// would repeat an n-gram already in the beam's context.
template <typename S>
Continuation beam_search(const LanguageModel<S>& model,
                         std::span<const int> prefix, int width, int T,
                         std::optional<int> block_ngram) {
  if (width < 1) throw ContractError("beam width must be >= 1");
  if (T < 1) throw ContractError("beam search needs T >= 1");
  if (prefix.empty()) throw ContractError("beam search requires a prefix");

  TapeSuspend<S> pause;
  const std::size_t total = prefix.size() + static_cast<std::size_t>(T);

  struct Beam {
    InferenceSession<S> session;
    std::vector<int> context;          // prefix + generated
    std::vector<int> tokens;           // generated only
    std::vector<double> step_probs;
    double score_sum = 0.0;            // sum of log p of generated tokens
    std::vector<double> logits;        // pending next-token logits
    int blocked_fallbacks = 0;
  };

  std::vector<int> pfx(prefix.begin(), prefix.end());
  InferenceSession<S> root(model, 1, total);
  std::vector<std::vector<double>> first = root.feed({pfx});

  std::vector<Beam> beams;
  beams.push_back(Beam{std::move(root), pfx, {}, {}, 0.0, first[0], 0});

  const std::size_t V = model.config().vocab_size;
  for (int step = 0; step < T; ++step) {
    struct Cand {
      double norm_score;
      double log_p;
      double prob;
      std::size_t beam;
      int token;
      bool fell_back;
    };
    std::vector<Cand> cands;
    cands.reserve(beams.size() * static_cast<std::size_t>(width));
    for (std::size_t bi = 0; bi < beams.size(); ++bi) {
      Beam& b = beams[bi];
      std::vector<double> dist = softmax_double(b.logits);
      bool fell_back = false;
      if (block_ngram)
        dist = block_ngrams(dist, b.context, *block_ngram, &fell_back);
      // Expand the `width` most probable tokens of this beam.
      std::vector<int> order(V);
      for (std::size_t i = 0; i < V; ++i) order[i] = static_cast<int>(i);
      const std::size_t take = std::min<std::size_t>(width, V);
      std::partial_sort(order.begin(), order.begin() + take, order.end(),
                        [&dist](int a, int c) {
                          if (dist[a] != dist[c]) return dist[a] > dist[c];
                          return a < c;
                        });
      for (std::size_t j = 0; j < take; ++j) {
        const int tok = order[j];
        if (dist[tok] <= 0.0) continue;
        const double lp = std::log(dist[tok]);
        const double sum = b.score_sum + lp;
        const double norm =
            sum / static_cast<double>(b.tokens.size() + 1);
        cands.push_back({norm, lp, dist[tok], bi, tok, fell_back});
      }
    }
    if (cands.empty())
      throw NumericError("beam search ran out of candidates");
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Cand& a, const Cand& b) {
                       if (a.norm_score != b.norm_score)
                         return a.norm_score > b.norm_score;
                       if (a.beam != b.beam) return a.beam < b.beam;
                       return a.token < b.token;
                     });
    const std::size_t keep = std::min<std::size_t>(width, cands.size());
    std::vector<Beam> next;
    next.reserve(keep);
    for (std::size_t j = 0; j < keep; ++j) {
      const Cand& c = cands[j];
      Beam nb = beams[c.beam];  // copies the session (cache fork)
      nb.context.push_back(c.token);
      nb.tokens.push_back(c.token);
      nb.step_probs.push_back(c.prob);
      nb.score_sum += c.log_p;
      if (c.fell_back) ++nb.blocked_fallbacks;
      if (step + 1 < T) {
        auto lg = nb.session.feed_step({c.token});
        nb.logits = std::move(lg[0]);
      }
      next.push_back(std::move(nb));
    }
    beams = std::move(next);
  }

  // Highest mean log-probability wins; beams are already sorted that way
  // from the final expansion.
  Beam& best = beams.front();
  Continuation out;
  out.prefix = std::move(pfx);
  out.tokens = std::move(best.tokens);
  out.step_probabilities = std::move(best.step_probs);
  out.blocked_fallbacks = best.blocked_fallbacks;
  return out;
}

}  // namespace lmlab
