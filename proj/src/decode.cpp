#include "lmlab/decode.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace lmlab {

Strategy strategy_from_string(const std::string& s) {
  if (s == "greedy") return Strategy::kGreedy;
  if (s == "top_k" || s == "top-k") return Strategy::kTopK;
  if (s == "top_p" || s == "top-p") return Strategy::kTopP;
  if (s == "beam") return Strategy::kBeam;
  if (s == "sampling") return Strategy::kSampling;
  throw ConfigError("unknown decoding strategy '" + s + "'");
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kGreedy: return "greedy";
    case Strategy::kTopK: return "top_k";
    case Strategy::kTopP: return "top_p";
    case Strategy::kBeam: return "beam";
    case Strategy::kSampling: return "sampling";
  }
  return "?";
}

void DecodeParams::validate() const {
  if (k < 1) throw ConfigError("top-k needs k >= 1");
  if (p <= 0.0 || p > 1.0) throw ConfigError("top-p needs p in (0, 1]");
  if (temperature <= 0.0) throw ConfigError("temperature must be positive");
  if (beam_width < 1) throw ConfigError("beam width must be >= 1");
  if (block_ngram && *block_ngram < 1)
    throw ConfigError("block_ngram needs n >= 1");
  if (penalty_discount &&
      (*penalty_discount <= 0.0 || *penalty_discount > 1.0))
    throw ConfigError("penalty discount must be in (0, 1]");
  if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be >= 1");
}

std::string DecodeParams::label() const {
  std::ostringstream os;
  switch (strategy) {
    case Strategy::kGreedy: os << "top-k,k=1"; break;
    case Strategy::kTopK: os << "top-k,k=" << k; break;
    case Strategy::kTopP: os << "top-p,p=" << p; break;
    case Strategy::kBeam: os << "beam,w=" << beam_width; break;
    case Strategy::kSampling: os << "sampling"; break;
  }
  if (temperature != 1.0) os << ",t=" << temperature;
  if (block_ngram) os << ",block=" << *block_ngram;
  if (penalty_discount) os << ",penalty=" << *penalty_discount;
  return os.str();
}

namespace {

// Indices ordered by (probability desc, id asc).
std::vector<int> order_by_prob(const std::vector<double>& dist) {
  std::vector<int> order(dist.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&dist](int a, int b) {
    if (dist[a] != dist[b]) return dist[a] > dist[b];
    return a < b;
  });
  return order;
}

std::vector<double> renormalized(const std::vector<double>& dist,
                                 const std::vector<char>& keep) {
  double sum = 0.0;
  for (std::size_t i = 0; i < dist.size(); ++i)
    if (keep[i]) sum += dist[i];
  std::vector<double> out(dist.size(), 0.0);
  if (sum <= 0.0) return out;
  for (std::size_t i = 0; i < dist.size(); ++i)
    if (keep[i]) out[i] = dist[i] / sum;
  return out;
}

}  // namespace

std::vector<double> truncate_top_k(const std::vector<double>& dist, int k) {
  if (k < 1) throw ContractError("truncate_top_k needs k >= 1");
  const std::size_t keep_n =
      std::min<std::size_t>(static_cast<std::size_t>(k), dist.size());
  if (keep_n == dist.size()) {
    std::vector<char> keep(dist.size(), 1);
    return renormalized(dist, keep);
  }
  const std::vector<int> order = order_by_prob(dist);
  std::vector<char> keep(dist.size(), 0);
  for (std::size_t i = 0; i < keep_n; ++i) keep[order[i]] = 1;
  return renormalized(dist, keep);
}

std::vector<double> truncate_top_p(const std::vector<double>& dist, double p) {
  if (p <= 0.0 || p > 1.0) throw ContractError("truncate_top_p needs p in (0, 1]");
  if (p >= 1.0) return dist;  // whole distribution kept untouched
  const std::vector<int> order = order_by_prob(dist);
  std::vector<char> keep(dist.size(), 0);
  double cum = 0.0;
  for (int idx : order) {
    keep[idx] = 1;
    cum += dist[idx];
    if (cum >= p - 1e-12) break;
  }
  return renormalized(dist, keep);
}

std::vector<double> penalize_logits(std::vector<double> logits,
                                    std::span<const int> history,
                                    double discount) {
  if (discount <= 0.0 || discount > 1.0)
    throw ContractError("penalty discount must be in (0, 1]");
  if (discount == 1.0 || history.empty()) return logits;
  std::vector<char> seen(logits.size(), 0);
  for (int t : history)
    if (t >= 0 && static_cast<std::size_t>(t) < logits.size()) seen[t] = 1;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!seen[i]) continue;
    if (logits[i] > 0.0)
      logits[i] *= discount;
    else
      logits[i] /= discount;
  }
  return logits;
}

std::vector<double> block_ngrams(const std::vector<double>& dist,
                                 std::span<const int> context, int n,
                                 bool* fell_back) {
  if (n < 1) throw ContractError("block_ngrams needs n >= 1");
  if (fell_back) *fell_back = false;
  const std::size_t nn = static_cast<std::size_t>(n);
  if (context.size() + 1 < nn) return dist;

  std::vector<char> banned(dist.size(), 0);
  bool any = false;
  if (nn == 1) {
    for (int t : context)
      if (t >= 0 && static_cast<std::size_t>(t) < dist.size()) {
        banned[t] = 1;
        any = true;
      }
  } else {
    // A candidate c is banned when (suffix of n-1 context tokens, c) already
    // occurs as a window of the context.
    const std::size_t m = nn - 1;
    const int* suffix = context.data() + (context.size() - m);
    for (std::size_t s = 0; s + nn <= context.size(); ++s) {
      if (std::equal(suffix, suffix + m, context.data() + s)) {
        const int next = context[s + m];
        if (next >= 0 && static_cast<std::size_t>(next) < dist.size()) {
          banned[next] = 1;
          any = true;
        }
      }
    }
  }
  if (!any) return dist;

  double kept_mass = 0.0;
  for (std::size_t i = 0; i < dist.size(); ++i)
    if (!banned[i]) kept_mass += dist[i];
  if (kept_mass <= 0.0) {
    // Every token with mass would repeat an n-gram; revert rather than stall.
    if (fell_back) *fell_back = true;
    return dist;
  }
  std::vector<double> out(dist.size(), 0.0);
  for (std::size_t i = 0; i < dist.size(); ++i)
    if (!banned[i]) out[i] = dist[i] / kept_mass;
  return out;
}

std::vector<double> softmax_double(const std::vector<double>& logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double z : logits) mx = std::max(mx, z);
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

int sample_index(const std::vector<double>& dist, Rng& rng) {
  const double u = rng.uniform();
  double cum = 0.0;
  int last_with_mass = -1;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (dist[i] <= 0.0) continue;
    last_with_mass = static_cast<int>(i);
    cum += dist[i];
    if (u < cum) return static_cast<int>(i);
  }
  if (last_with_mass < 0)
    throw NumericError("sample_index on an all-zero distribution");
  return last_with_mass;  // floating-point slack at the tail
}

}  // namespace lmlab
