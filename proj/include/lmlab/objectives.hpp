#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "lmlab/corpus.hpp"
#include "lmlab/decode.hpp"
#include "lmlab/error.hpp"
#include "lmlab/inference.hpp"
#include "lmlab/metrics.hpp"
#include "lmlab/model.hpp"
#include "lmlab/ops.hpp"
#include "lmlab/tensor.hpp"

// The three loss constructions: maximum likelihood, token- and
// sequence-level unlikelihood, and the policy-gradient repetition objective.
// Every loss returns a scalar tensor recorded on the active tape.

namespace lmlab {

namespace detail {
// Clamp for the -log(1 - p) penalty terms: keeps the p -> 1 singularity
// finite while preserving the gradient direction.
inline constexpr double kUlMaxProb = 1.0 - 1e-7;
}  // namespace detail

// Per-position sets of negative token ids. Sets may be empty; positions are
// relative to whatever range the builder was asked about.
struct CandidateSets {
  std::vector<std::vector<int>> sets;
};

enum class RolloutMode { kGreedy, kSampled };

// Greedy (or sampled) continuations of a prefix batch plus the realized
// per-step log-probabilities under the model that produced them.
struct RolloutBatch {
  std::vector<std::vector<int>> prefixes;
  std::vector<std::vector<int>> continuations;      // exactly T tokens each
  std::vector<std::vector<double>> step_log_probs;  // log p of realized token

  std::vector<std::vector<int>> full_sequences() const {
    std::vector<std::vector<int>> out;
    out.reserve(prefixes.size());
    for (std::size_t j = 0; j < prefixes.size(); ++j) {
      std::vector<int> seq = prefixes[j];
      seq.insert(seq.end(), continuations[j].begin(), continuations[j].end());
      out.push_back(std::move(seq));
    }
    return out;
  }
};

// Rewards and mean-baseline advantages for one rollout batch. `baseline`
// stores the reward sum; psi[j] = rewards[j] - baseline / m.
struct Advantages {
  std::vector<double> rewards;
  double baseline = 0.0;
  std::vector<double> psi;
};

// R = 1 - seq_rep_n of the continuation, in [0, 1].
inline double reward(std::span<const int> continuation, int n = 4) {
  return 1.0 - seq_rep_n(continuation, n);
}

inline Advantages advantages(const std::vector<double>& rewards) {
  if (rewards.size() < 2)
    throw ConfigError(
        "advantages need m >= 2 rollouts; a single-sequence advantage is "
        "identically zero");
  Advantages a;
  a.rewards = rewards;
  for (double r : rewards) a.baseline += r;
  const double mean = a.baseline / static_cast<double>(rewards.size());
  a.psi.reserve(rewards.size());
  for (double r : rewards) a.psi.push_back(r - mean);
  return a;
}

// Flags continuation tokens that sit inside a repeated n-gram: position t
// (absolute index into full_sequence, t in [begin, end)) gets the singleton
// set {x_t} when some length-n window covering t also occurs at an earlier
// start anywhere in the sequence, prefix included.
inline CandidateSets build_repeat_candidates(std::span<const int> full_sequence,
                                             std::size_t begin,
                                             std::size_t end, int n = 4) {
  if (n < 1) throw ContractError("build_repeat_candidates needs n >= 1");
  if (begin > end || end > full_sequence.size())
    throw ContractError("build_repeat_candidates range out of bounds");
  const std::size_t L = full_sequence.size();
  const std::size_t nn = static_cast<std::size_t>(n);

  // dup[s]: the window starting at s occurred at some earlier start.
  std::vector<char> dup;
  if (L >= nn) {
    const std::size_t starts = L - nn + 1;
    dup.assign(starts, 0);
    std::unordered_map<std::string, std::size_t> first;
    first.reserve(starts * 2);
    for (std::size_t s = 0; s < starts; ++s) {
      std::string key(reinterpret_cast<const char*>(full_sequence.data() + s),
                      sizeof(int) * nn);
      auto [it, inserted] = first.emplace(std::move(key), s);
      if (!inserted) dup[s] = 1;
    }
  }

  CandidateSets cs;
  cs.sets.resize(end - begin);
  for (std::size_t t = begin; t < end; ++t) {
    bool flagged = false;
    if (L >= nn) {
      const std::size_t lo = t + 1 >= nn ? t + 1 - nn : 0;
      const std::size_t hi = std::min(t, L - nn);
      for (std::size_t s = lo; s <= hi && !flagged; ++s)
        flagged = dup[s] != 0;
    }
    if (flagged) cs.sets[t - begin].push_back(full_sequence[t]);
  }
  return cs;
}

// Token-level unlikelihood loss over per-position probability rows:
// sum over candidates of -log(1 - p(c)), divided by `normalizer` (the number
// of rows when 0). p(c) is clamped to 1 - 1e-7 so a saturated candidate
// yields a large finite gradient instead of NaN.
template <typename S>
Tensor<S> ul_token_loss(const Tensor<S>& probs, const CandidateSets& candidates,
                        double normalizer = 0.0) {
  if (probs.rank() < 2)
    throw ShapeError("ul_token_loss expects [positions..., V] probabilities");
  const std::size_t V = probs.shape().back();
  const std::size_t rows = probs.numel() / V;
  if (candidates.sets.size() != rows)
    throw ShapeError("ul_token_loss needs one candidate set per position");
  const double norm =
      normalizer > 0.0 ? normalizer : static_cast<double>(rows);

  double acc = 0.0;
  for (std::size_t r = 0; r < rows; ++r)
    for (int c : candidates.sets[r]) {
      if (c < 0 || static_cast<std::size_t>(c) >= V)
        throw IndexError("unlikelihood candidate out of vocabulary");
      const double p = std::min(static_cast<double>(probs.data()[r * V + c]),
                                detail::kUlMaxProb);
      acc -= std::log1p(-p);
    }
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(acc / norm));

  auto pn = probs.node(), on = out.node();
  auto sets = candidates.sets;
  return detail::finish_op<S>({probs}, out, [pn, on, sets, V, norm] {
    auto& dp = detail::pull_grad(pn);
    const double g = static_cast<double>(on->grad[0]) / norm;
    for (std::size_t r = 0; r < sets.size(); ++r)
      for (int c : sets[r]) {
        const double p = std::min(
            static_cast<double>(pn->values[r * V + static_cast<std::size_t>(c)]),
            detail::kUlMaxProb);
        dp[r * V + static_cast<std::size_t>(c)] +=
            static_cast<S>(g / (1.0 - p));
      }
  });
}

// Mean negative log-likelihood of tokens 2..L given their prefixes.
template <typename S>
Tensor<S> mle_loss(const LanguageModel<S>& model,
                   const std::vector<std::vector<int>>& sequences) {
  if (sequences.empty()) throw ContractError("mle_loss needs sequences");
  for (const auto& s : sequences)
    if (s.size() < 2)
      throw ContractError("mle_loss needs sequences of length >= 2");
  Tensor<S> lsm = log_softmax(model.forward(sequences));
  std::vector<int> targets;
  targets.reserve(lsm.numel() / lsm.shape().back());
  for (const auto& s : sequences) {
    for (std::size_t t = 0; t + 1 < s.size(); ++t) targets.push_back(s[t + 1]);
    targets.push_back(-1);  // final position has no target
  }
  return cross_entropy(lsm, targets, -1);
}

// Rolls the model forward T tokens from each prefix with the key/value-cached
// session. Greedy picks the argmax (ties to the lower id); sampled mode
// draws from the softmax with one RNG stream per prefix so batching cannot
// change the outcome.
template <typename S>
RolloutBatch rollout(const LanguageModel<S>& model, const PrefixBatch& batch,
                     int T, RolloutMode mode = RolloutMode::kGreedy,
                     std::uint64_t seed = 0) {
  if (batch.prefixes.empty()) throw ContractError("rollout needs prefixes");
  const std::size_t m = batch.prefixes.size();
  const std::size_t k = batch.prefixes[0].size();
  for (const auto& p : batch.prefixes)
    if (p.size() != k) throw ContractError("rollout prefixes must share a length");
  if (T < 1) throw ContractError("rollout needs T >= 1");

  TapeSuspend<S> pause;
  InferenceSession<S> session(model, m, k + static_cast<std::size_t>(T));
  RolloutBatch out;
  out.prefixes = batch.prefixes;
  out.continuations.assign(m, {});
  out.step_log_probs.assign(m, {});

  std::vector<Rng> streams;
  streams.reserve(m);
  for (std::size_t j = 0; j < m; ++j) streams.push_back(Rng::stream(seed, j));

  std::vector<std::vector<double>> logits = session.feed(batch.prefixes);
  std::vector<int> next(m);
  for (int step = 0; step < T; ++step) {
    for (std::size_t j = 0; j < m; ++j) {
      int tok;
      if (mode == RolloutMode::kGreedy) {
        tok = argmax_token(logits[j]);
      } else {
        tok = sample_index(softmax_double(logits[j]), streams[j]);
      }
      next[j] = tok;
      out.continuations[j].push_back(tok);
      out.step_log_probs[j].push_back(log_softmax_at(logits[j], tok));
    }
    if (step + 1 < T) logits = session.feed_step(next);
  }
  return out;
}

namespace detail {

// Teacher-forced next-token targets for a [m, L] batch, -1 at the final
// position of each row.
inline std::vector<int> shifted_targets(
    const std::vector<std::vector<int>>& rows) {
  std::vector<int> t;
  for (const auto& r : rows) {
    for (std::size_t i = 0; i + 1 < r.size(); ++i) t.push_back(r[i + 1]);
    t.push_back(-1);
  }
  return t;
}

}  // namespace detail

// Policy-gradient update loss: greedy rollouts scored by R = 1 - seq_rep_n,
// mean-baseline advantages, and c * ( -(1/m) sum_j psi_j * (1/T) sum_t
// log p(x_t | x_<t) ) with gradients flowing only through the realized
// token log-probabilities.
template <typename S>
Tensor<S> pg_update_loss(const LanguageModel<S>& model,
                         const PrefixBatch& batch, int T = 100, int n = 4,
                         double c = 1.0,
                         RolloutMode mode = RolloutMode::kGreedy,
                         std::uint64_t seed = 0,
                         RolloutBatch* out_rollout = nullptr,
                         Advantages* out_adv = nullptr) {
  if (c <= 0.0) throw ConfigError("pg coefficient c must be positive");
  RolloutBatch ro = rollout(model, batch, T, mode, seed);
  std::vector<double> rewards;
  rewards.reserve(ro.continuations.size());
  for (const auto& cont : ro.continuations) rewards.push_back(reward(cont, n));
  Advantages adv = advantages(rewards);

  const std::size_t m = ro.prefixes.size();
  const std::size_t k = ro.prefixes[0].size();
  const std::vector<std::vector<int>> full = ro.full_sequences();

  Tensor<S> lsm = log_softmax(model.forward(full));
  Tensor<S> gathered = gather_last(lsm, detail::shifted_targets(full));
  // log p of continuation token at absolute position t lives at row t-1.
  Tensor<S> cont_lp = slice_last(gathered, k - 1, k - 1 + T);
  Tensor<S> mean_lp = mean_last(cont_lp);  // [m]

  Tensor<S> psi({m});
  for (std::size_t j = 0; j < m; ++j)
    psi.data()[j] = static_cast<S>(adv.psi[j]);
  Tensor<S> loss = scale(sum_all(mul(mean_lp, psi)),
                         static_cast<S>(-c / static_cast<double>(m)));
  if (out_rollout) *out_rollout = std::move(ro);
  if (out_adv) *out_adv = std::move(adv);
  return loss;
}

// Sequence-level unlikelihood update loss: greedy rollouts, repeat-n
// candidate sets over the continuations, and the token unlikelihood loss
// averaged over batch and time.
template <typename S>
Tensor<S> seq_ul_update_loss(const LanguageModel<S>& model,
                             const PrefixBatch& batch, int T = 100, int n = 4,
                             RolloutMode mode = RolloutMode::kGreedy,
                             std::uint64_t seed = 0,
                             RolloutBatch* out_rollout = nullptr) {
  RolloutBatch ro = rollout(model, batch, T, mode, seed);
  const std::size_t m = ro.prefixes.size();
  const std::size_t k = ro.prefixes[0].size();
  const std::size_t L = k + static_cast<std::size_t>(T);
  const std::vector<std::vector<int>> full = ro.full_sequences();

  // The distribution scored for position t comes from logits row t-1, so
  // candidate sets for continuation tokens land on rows k-1 .. L-2.
  CandidateSets flat;
  flat.sets.resize(m * L);
  for (std::size_t j = 0; j < m; ++j) {
    CandidateSets per = build_repeat_candidates(full[j], k, L, n);
    for (std::size_t i = 0; i < per.sets.size(); ++i)
      flat.sets[j * L + (k - 1 + i)] = std::move(per.sets[i]);
  }

  Tensor<S> probs = softmax(model.forward(full));
  Tensor<S> loss = ul_token_loss(
      probs, flat, static_cast<double>(m) * static_cast<double>(T));
  if (out_rollout) *out_rollout = std::move(ro);
  return loss;
}

// PG + UT regime loss: both objectives over one shared rollout and one
// teacher-forced forward pass. c multiplies the policy-gradient term only.
template <typename S>
Tensor<S> combined_pg_ut_loss(const LanguageModel<S>& model,
                              const PrefixBatch& batch, int T = 100, int n = 4,
                              double c = 1.0,
                              RolloutMode mode = RolloutMode::kGreedy,
                              std::uint64_t seed = 0,
                              RolloutBatch* out_rollout = nullptr,
                              Advantages* out_adv = nullptr) {
  if (c <= 0.0) throw ConfigError("pg coefficient c must be positive");
  RolloutBatch ro = rollout(model, batch, T, mode, seed);
  std::vector<double> rewards;
  rewards.reserve(ro.continuations.size());
  for (const auto& cont : ro.continuations) rewards.push_back(reward(cont, n));
  Advantages adv = advantages(rewards);

  const std::size_t m = ro.prefixes.size();
  const std::size_t k = ro.prefixes[0].size();
  const std::size_t L = k + static_cast<std::size_t>(T);
  const std::vector<std::vector<int>> full = ro.full_sequences();

  Tensor<S> logits = model.forward(full);

  Tensor<S> lsm = log_softmax(logits);
  Tensor<S> cont_lp =
      slice_last(gather_last(lsm, detail::shifted_targets(full)), k - 1,
                 k - 1 + T);
  Tensor<S> psi({m});
  for (std::size_t j = 0; j < m; ++j)
    psi.data()[j] = static_cast<S>(adv.psi[j]);
  Tensor<S> pg = scale(sum_all(mul(mean_last(cont_lp), psi)),
                       static_cast<S>(-c / static_cast<double>(m)));

  CandidateSets flat;
  flat.sets.resize(m * L);
  for (std::size_t j = 0; j < m; ++j) {
    CandidateSets per = build_repeat_candidates(full[j], k, L, n);
    for (std::size_t i = 0; i < per.sets.size(); ++i)
      flat.sets[j * L + (k - 1 + i)] = std::move(per.sets[i]);
  }
  Tensor<S> ul = ul_token_loss(softmax(logits), flat,
                               static_cast<double>(m) * static_cast<double>(T));

  Tensor<S> loss = add(pg, ul);
  if (out_rollout) *out_rollout = std::move(ro);
  if (out_adv) *out_adv = std::move(adv);
  return loss;
}

}  // namespace lmlab
