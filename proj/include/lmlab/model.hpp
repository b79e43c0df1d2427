#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lmlab/error.hpp"
#include "lmlab/ops.hpp"
#include "lmlab/rng.hpp"
#include "lmlab/tensor.hpp"

// Small causal decoder-only transformer: learned token + position
// embeddings, pre-norm blocks with multi-head attention and a GELU MLP,
// output projection tied to the token embedding.

namespace lmlab {

struct ModelConfig {
  int vocab_size = 0;   // set from the corpus
  int n_layers = 3;
  int n_heads = 4;
  int d_model = 128;
  int d_ff = 512;
  int max_seq_len = 512;

  void validate() const {
    if (vocab_size <= 0) throw ConfigError("vocab_size must be positive");
    if (n_layers <= 0) throw ConfigError("n_layers must be positive");
    if (n_heads <= 0) throw ConfigError("n_heads must be positive");
    if (d_model <= 0) throw ConfigError("d_model must be positive");
    if (d_ff <= 0) throw ConfigError("d_ff must be positive");
    if (max_seq_len <= 0) throw ConfigError("max_seq_len must be positive");
    if (d_model % n_heads != 0)
      throw ConfigError("d_model must be divisible by n_heads");
  }

  int head_dim() const { return d_model / n_heads; }

  bool operator==(const ModelConfig&) const = default;
};

namespace detail {

// [B, T, 3d] -> [B*H, T, hd], selecting the q/k/v third.
template <typename S>
Tensor<S> split_heads(const Tensor<S>& qkv, int which, std::size_t B,
                      std::size_t H) {
  const std::size_t T = qkv.shape()[1];
  const std::size_t d = qkv.shape()[2] / 3;
  const std::size_t hd = d / H;
  Tensor<S> out({B * H, T, hd});
  const S* pq = qkv.data();
  S* po = out.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t t = 0; t < T; ++t) {
        const std::size_t src = (b * T + t) * 3 * d + which * d + h * hd;
        const std::size_t dst = ((b * H + h) * T + t) * hd;
        std::copy_n(pq + src, hd, po + dst);
      }
  auto qn = qkv.node(), on = out.node();
  return finish_op<S>({qkv}, out, [qn, on, which, B, H, T, d, hd] {
    auto& dq = pull_grad(qn);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t t = 0; t < T; ++t) {
          const std::size_t src = (b * T + t) * 3 * d + which * d + h * hd;
          const std::size_t dst = ((b * H + h) * T + t) * hd;
          for (std::size_t c = 0; c < hd; ++c)
            dq[src + c] += on->grad[dst + c];
        }
  });
}

// [B*H, T, hd] -> [B, T, H*hd].
template <typename S>
Tensor<S> merge_heads(const Tensor<S>& x, std::size_t B, std::size_t H) {
  const std::size_t T = x.shape()[1];
  const std::size_t hd = x.shape()[2];
  const std::size_t d = H * hd;
  Tensor<S> out({B, T, d});
  const S* px = x.data();
  S* po = out.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t t = 0; t < T; ++t)
        std::copy_n(px + ((b * H + h) * T + t) * hd, hd,
                    po + (b * T + t) * d + h * hd);
  auto xn = x.node(), on = out.node();
  return finish_op<S>({x}, out, [xn, on, B, H, T, hd, d] {
    auto& dx = pull_grad(xn);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t c = 0; c < hd; ++c)
            dx[((b * H + h) * T + t) * hd + c] +=
                on->grad[(b * T + t) * d + h * hd + c];
  });
}

}  // namespace detail

template <typename S>
struct BlockParams {
  Tensor<S> ln1_g, ln1_b;
  Tensor<S> qkv_w, qkv_b;    // [d, 3d], [3d]
  Tensor<S> proj_w, proj_b;  // [d, d], [d]
  Tensor<S> ln2_g, ln2_b;
  Tensor<S> fc_w, fc_b;      // [d, d_ff], [d_ff]
  Tensor<S> out_w, out_b;    // [d_ff, d], [d]
};

template <typename S>
class LanguageModel {
 public:
  using Named = std::pair<std::string, Tensor<S>>;

  // Deterministic initialization: every parameter is drawn from one RNG
  // stream in a fixed order. Residual output projections are scaled down by
  // 1/sqrt(2*n_layers) as in the GPT-2 lineage.
  static LanguageModel init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    LanguageModel m;
    m.cfg_ = cfg;
    Rng rng(splitmix64(seed) ^ 0x6c6d6c61620a00ull);
    const std::size_t V = cfg.vocab_size, d = cfg.d_model, f = cfg.d_ff;
    const double resid_std =
        0.02 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));

    m.wte_ = normal_init({V, d}, 0.02, rng);
    m.wpe_ = normal_init({static_cast<std::size_t>(cfg.max_seq_len), d}, 0.01,
                         rng);
    m.blocks_.resize(cfg.n_layers);
    for (auto& blk : m.blocks_) {
      blk.ln1_g = Tensor<S>::full({d}, S{1});
      blk.ln1_b = Tensor<S>::zeros({d});
      blk.qkv_w = normal_init({d, 3 * d}, 0.02, rng);
      blk.qkv_b = Tensor<S>::zeros({3 * d});
      blk.proj_w = normal_init({d, d}, resid_std, rng);
      blk.proj_b = Tensor<S>::zeros({d});
      blk.ln2_g = Tensor<S>::full({d}, S{1});
      blk.ln2_b = Tensor<S>::zeros({d});
      blk.fc_w = normal_init({d, f}, 0.02, rng);
      blk.fc_b = Tensor<S>::zeros({f});
      blk.out_w = normal_init({f, d}, resid_std, rng);
      blk.out_b = Tensor<S>::zeros({d});
    }
    m.lnf_g_ = Tensor<S>::full({d}, S{1});
    m.lnf_b_ = Tensor<S>::zeros({d});
    for (auto& [name, t] : m.parameters()) t.set_requires_grad(true);
    return m;
  }

  const ModelConfig& config() const { return cfg_; }

  // Named handles onto every parameter, in a fixed canonical order. Copies
  // alias the underlying storage, so optimizers and checkpoints mutate the
  // model through these.
  std::vector<Named> parameters() const {
    std::vector<Named> out;
    out.emplace_back("wte", wte_);
    out.emplace_back("wpe", wpe_);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const std::string p = "layer" + std::to_string(i) + ".";
      const BlockParams<S>& b = blocks_[i];
      out.emplace_back(p + "ln1.g", b.ln1_g);
      out.emplace_back(p + "ln1.b", b.ln1_b);
      out.emplace_back(p + "attn.qkv.w", b.qkv_w);
      out.emplace_back(p + "attn.qkv.b", b.qkv_b);
      out.emplace_back(p + "attn.proj.w", b.proj_w);
      out.emplace_back(p + "attn.proj.b", b.proj_b);
      out.emplace_back(p + "ln2.g", b.ln2_g);
      out.emplace_back(p + "ln2.b", b.ln2_b);
      out.emplace_back(p + "mlp.fc.w", b.fc_w);
      out.emplace_back(p + "mlp.fc.b", b.fc_b);
      out.emplace_back(p + "mlp.out.w", b.out_w);
      out.emplace_back(p + "mlp.out.b", b.out_b);
    }
    out.emplace_back("final_ln.g", lnf_g_);
    out.emplace_back("final_ln.b", lnf_b_);
    return out;
  }

  // Teacher-forced forward pass over a [B, T] token batch. Logits at
  // position t depend on tokens 1..t only. Records on the active tape.
  Tensor<S> forward(const std::vector<std::vector<int>>& tokens) const {
    if (tokens.empty() || tokens[0].empty())
      throw ContractError("forward requires a non-empty token batch");
    const std::size_t B = tokens.size();
    const std::size_t T = tokens[0].size();
    for (const auto& row : tokens)
      if (row.size() != T)
        throw ShapeError("forward requires equal-length rows");
    if (T > static_cast<std::size_t>(cfg_.max_seq_len))
      throw ShapeError("sequence length " + std::to_string(T) +
                       " exceeds max_seq_len " +
                       std::to_string(cfg_.max_seq_len));

    std::vector<int> flat;
    flat.reserve(B * T);
    for (const auto& row : tokens) flat.insert(flat.end(), row.begin(), row.end());
    std::vector<int> pos_ids(T);
    for (std::size_t t = 0; t < T; ++t) pos_ids[t] = static_cast<int>(t);

    const std::size_t H = cfg_.n_heads;
    const S inv_sqrt_hd =
        static_cast<S>(1.0 / std::sqrt(static_cast<double>(cfg_.head_dim())));

    Tensor<S> x = add(embedding_lookup(wte_, flat, {B, T}),
                      embedding_lookup(wpe_, pos_ids, {T}));
    for (const BlockParams<S>& blk : blocks_) {
      Tensor<S> h = layer_norm(x, blk.ln1_g, blk.ln1_b);
      Tensor<S> qkv = add(matmul(h, blk.qkv_w), blk.qkv_b);
      Tensor<S> q = detail::split_heads(qkv, 0, B, H);
      Tensor<S> k = detail::split_heads(qkv, 1, B, H);
      Tensor<S> v = detail::split_heads(qkv, 2, B, H);
      Tensor<S> att =
          causal_softmax(scale(batched_matmul(q, k, false, true), inv_sqrt_hd));
      Tensor<S> ctx = detail::merge_heads(batched_matmul(att, v), B, H);
      x = add(x, add(matmul(ctx, blk.proj_w), blk.proj_b));

      Tensor<S> h2 = layer_norm(x, blk.ln2_g, blk.ln2_b);
      Tensor<S> ff = add(
          matmul(gelu(add(matmul(h2, blk.fc_w), blk.fc_b)), blk.out_w),
          blk.out_b);
      x = add(x, ff);
    }
    Tensor<S> hf = layer_norm(x, lnf_g_, lnf_b_);
    return matmul(hf, wte_, /*trans_b=*/true);  // tied output projection
  }

  // Probability vector over V for the token following `prefix`. Runs with
  // recording suspended; safe to call mid-training.
  std::vector<double> next_token_distribution(
      std::span<const int> prefix) const {
    if (prefix.empty())
      throw ContractError("next_token_distribution requires a non-empty prefix");
    TapeSuspend<S> pause;
    Tensor<S> logits =
        forward({std::vector<int>(prefix.begin(), prefix.end())});
    const std::size_t V = logits.shape()[2];
    const std::size_t T = logits.shape()[1];
    const S* last = logits.data() + (T - 1) * V;
    std::vector<double> z(V);
    for (std::size_t i = 0; i < V; ++i) z[i] = static_cast<double>(last[i]);
    double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double& v : z) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (double& v : z) v /= sum;
    return z;
  }

  const Tensor<S>& wte() const { return wte_; }
  const Tensor<S>& wpe() const { return wpe_; }
  const std::vector<BlockParams<S>>& blocks() const { return blocks_; }
  const Tensor<S>& lnf_g() const { return lnf_g_; }
  const Tensor<S>& lnf_b() const { return lnf_b_; }

 private:
  static Tensor<S> normal_init(Shape shape, double stddev, Rng& rng) {
    Tensor<S> t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i)
      t.data()[i] = static_cast<S>(rng.normal() * stddev);
    return t;
  }

  ModelConfig cfg_;
  Tensor<S> wte_, wpe_, lnf_g_, lnf_b_;
  std::vector<BlockParams<S>> blocks_;
};

}  // namespace lmlab
