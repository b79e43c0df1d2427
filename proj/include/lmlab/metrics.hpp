#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "lmlab/error.hpp"
#include "lmlab/model.hpp"

// Degeneration metrics. All functions here are pure: same inputs, same
// outputs, no hidden state, safe to fan out across threads.

namespace lmlab {

// Fraction of duplicate n-grams: 1 - #unique / #total. In [0, 1).
double seq_rep_n(std::span<const int> tokens, int n);

inline const std::vector<int> kRepWindowLengths = {16, 32, 128, 512};

// predictions[i] is the model's guess for position i+1 given history[0..i];
// a position counts when the guess appears among the previous min(l, i+1)
// ground-truth tokens. Result is averaged over the window lengths.
double rep_l(std::span<const int> predictions, std::span<const int> history,
             const std::vector<int>& l_set = kRepWindowLengths);

// As rep_l, but a position counts only when the guess also differs from the
// true next token next_tokens[i].
double wrep_l(std::span<const int> predictions, std::span<const int> history,
              std::span<const int> next_tokens,
              const std::vector<int>& l_set = kRepWindowLengths);

// Number of distinct predicted token ids.
int uniq(std::span<const int> predictions);

// Number of distinct token ids across a set of generated continuations.
int uniq_seq(const std::vector<std::vector<int>>& continuations);

double perplexity_from_mean_nll(double mean_nll);

// Teacher-forced perplexity of a token sequence: exp of the mean negative
// log-likelihood of tokens 2..L given their prefixes.
template <typename S>
double perplexity(const LanguageModel<S>& model, std::span<const int> tokens) {
  if (tokens.size() < 2)
    throw ContractError("perplexity needs a sequence of length >= 2");
  TapeSuspend<S> pause;
  Tensor<S> logits =
      model.forward({std::vector<int>(tokens.begin(), tokens.end())});
  const std::size_t V = logits.shape()[2];
  const std::size_t T = logits.shape()[1];
  double nll = 0.0;
  std::vector<double> row(V);
  for (std::size_t t = 0; t + 1 < T; ++t) {
    const S* z = logits.data() + t * V;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < V; ++i)
      mx = std::max(mx, static_cast<double>(z[i]));
    double sum = 0.0;
    for (std::size_t i = 0; i < V; ++i)
      sum += std::exp(static_cast<double>(z[i]) - mx);
    const double lse = mx + std::log(sum);
    nll -= static_cast<double>(z[tokens[t + 1]]) - lse;
  }
  return perplexity_from_mean_nll(nll / static_cast<double>(T - 1));
}

// Perplexity of the ground truth under additively smoothed (possibly sparse)
// distributions: q = (p + eps) / (1 + eps*V). A zero-mass ground-truth token
// at eps = 0 yields the +infinity sentinel instead of an error.
double eps_perplexity(const std::vector<std::vector<double>>& dists,
                      std::span<const int> ground_truth, double eps);

// Jensen-Shannon divergence (natural log) between dist and the one-hot
// ground truth; bounded by ln 2.
double jsd(const std::vector<double>& dist, int ground_truth_token);

// Quadratic (Gini) score 1/2 + p_y - |p|^2/2; word accuracy for
// deterministic distributions, bounded by [0, 1].
double sparsemax_score(const std::vector<double>& dist,
                       int ground_truth_token);

// Mean over continuations of mean over n of (1 - seq_rep_n): higher means a
// more diverse generation set.
double dimen(const std::vector<std::vector<int>>& continuations,
             const std::vector<int>& n_set = {1, 2, 3, 4});

}  // namespace lmlab
