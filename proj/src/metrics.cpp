#include "lmlab/metrics.hpp"

#include <algorithm>
#include <cstring>
#include <limits>
#include <unordered_set>

namespace lmlab {

namespace {

// Exact n-gram identity via byte keys; no hash-collision risk.
std::string ngram_key(std::span<const int> tokens, std::size_t start, int n) {
  std::string key(sizeof(int) * static_cast<std::size_t>(n), '\0');
  std::memcpy(key.data(), tokens.data() + start,
              sizeof(int) * static_cast<std::size_t>(n));
  return key;
}

}  // namespace

double seq_rep_n(std::span<const int> tokens, int n) {
  if (n < 1) throw ContractError("seq_rep_n needs n >= 1");
  if (tokens.size() < static_cast<std::size_t>(n))
    throw ContractError("seq_rep_n needs at least n tokens, got " +
                        std::to_string(tokens.size()));
  const std::size_t total = tokens.size() - static_cast<std::size_t>(n) + 1;
  std::unordered_set<std::string> seen;
  seen.reserve(total * 2);
  for (std::size_t s = 0; s < total; ++s) seen.insert(ngram_key(tokens, s, n));
  return 1.0 - static_cast<double>(seen.size()) / static_cast<double>(total);
}

namespace {

double rep_for_window(std::span<const int> predictions,
                      std::span<const int> history,
                      std::span<const int> next_tokens, int l,
                      bool exclude_correct) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const int pred = predictions[i];
    if (exclude_correct && pred == next_tokens[i]) continue;
    const std::size_t avail = std::min<std::size_t>(i + 1, history.size());
    const std::size_t win = std::min<std::size_t>(
        static_cast<std::size_t>(l), avail);
    bool found = false;
    for (std::size_t j = 0; j < win; ++j) {
      if (history[avail - 1 - j] == pred) {
        found = true;
        break;
      }
    }
    if (found) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

}  // namespace

double rep_l(std::span<const int> predictions, std::span<const int> history,
             const std::vector<int>& l_set) {
  if (predictions.empty() || history.empty())
    throw ContractError("rep_l needs non-empty predictions and history");
  if (predictions.size() > history.size())
    throw ContractError("rep_l has more predictions than history positions");
  if (l_set.empty()) throw ContractError("rep_l needs at least one window");
  double acc = 0.0;
  for (int l : l_set)
    acc += rep_for_window(predictions, history, {}, l, false);
  return acc / static_cast<double>(l_set.size());
}

double wrep_l(std::span<const int> predictions, std::span<const int> history,
              std::span<const int> next_tokens, const std::vector<int>& l_set) {
  if (predictions.empty() || history.empty())
    throw ContractError("wrep_l needs non-empty predictions and history");
  if (predictions.size() != next_tokens.size())
    throw ContractError("wrep_l needs one ground-truth next token per prediction");
  if (predictions.size() > history.size())
    throw ContractError("wrep_l has more predictions than history positions");
  if (l_set.empty()) throw ContractError("wrep_l needs at least one window");
  double acc = 0.0;
  for (int l : l_set)
    acc += rep_for_window(predictions, history, next_tokens, l, true);
  return acc / static_cast<double>(l_set.size());
}

int uniq(std::span<const int> predictions) {
  if (predictions.empty()) throw ContractError("uniq needs predictions");
  std::unordered_set<int> seen(predictions.begin(), predictions.end());
  return static_cast<int>(seen.size());
}

int uniq_seq(const std::vector<std::vector<int>>& continuations) {
  if (continuations.empty()) throw ContractError("uniq_seq needs continuations");
  std::unordered_set<int> seen;
  for (const auto& c : continuations) seen.insert(c.begin(), c.end());
  return static_cast<int>(seen.size());
}

double perplexity_from_mean_nll(double mean_nll) { return std::exp(mean_nll); }

double eps_perplexity(const std::vector<std::vector<double>>& dists,
                      std::span<const int> ground_truth, double eps) {
  if (eps < 0) throw ContractError("eps_perplexity needs eps >= 0");
  if (dists.empty() || dists.size() != ground_truth.size())
    throw ContractError("eps_perplexity needs one distribution per target");
  double nll = 0.0;
  for (std::size_t i = 0; i < dists.size(); ++i) {
    const auto& p = dists[i];
    const int y = ground_truth[i];
    if (y < 0 || static_cast<std::size_t>(y) >= p.size())
      throw IndexError("eps_perplexity target out of range");
    const double V = static_cast<double>(p.size());
    const double q = (p[y] + eps) / (1.0 + eps * V);
    if (q <= 0.0) return std::numeric_limits<double>::infinity();
    nll -= std::log(q);
  }
  return std::exp(nll / static_cast<double>(dists.size()));
}

double jsd(const std::vector<double>& dist, int ground_truth_token) {
  if (ground_truth_token < 0 ||
      static_cast<std::size_t>(ground_truth_token) >= dist.size())
    throw IndexError("jsd ground-truth token out of range");
  const std::size_t y = static_cast<std::size_t>(ground_truth_token);
  double kl_p = 0.0;  // KL(P || M), M = (P + onehot) / 2
  for (std::size_t i = 0; i < dist.size(); ++i) {
    const double p = dist[i];
    if (p <= 0.0) continue;
    const double m = i == y ? (p + 1.0) / 2.0 : p / 2.0;
    kl_p += p * std::log(p / m);
  }
  const double my = (dist[y] + 1.0) / 2.0;
  const double kl_q = -std::log(my);  // KL(onehot || M)
  const double v = 0.5 * kl_p + 0.5 * kl_q;
  return std::clamp(v, 0.0, std::log(2.0));
}

double sparsemax_score(const std::vector<double>& dist,
                       int ground_truth_token) {
  if (ground_truth_token < 0 ||
      static_cast<std::size_t>(ground_truth_token) >= dist.size())
    throw IndexError("sparsemax_score ground-truth token out of range");
  double sq = 0.0;
  for (double p : dist) sq += p * p;
  return 0.5 + dist[static_cast<std::size_t>(ground_truth_token)] - 0.5 * sq;
}

double dimen(const std::vector<std::vector<int>>& continuations,
             const std::vector<int>& n_set) {
  if (continuations.empty()) throw ContractError("dimen needs continuations");
  if (n_set.empty()) throw ContractError("dimen needs at least one n");
  double acc = 0.0;
  for (const auto& c : continuations) {
    double per_seq = 0.0;
    for (int n : n_set) per_seq += 1.0 - seq_rep_n(c, n);
    acc += per_seq / static_cast<double>(n_set.size());
  }
  return acc / static_cast<double>(continuations.size());
}

}  // namespace lmlab
