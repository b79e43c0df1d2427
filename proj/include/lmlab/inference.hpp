#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "lmlab/model.hpp"

// Incremental, tape-free forward pass with per-layer key/value caches.
// Rollouts and decoding run through this; the math mirrors
// LanguageModel::forward step for step, with the same double-precision
// normalizers. Sessions are copyable, which is what beam search relies on to
// fork cache states.

namespace lmlab {

template <typename S>
class InferenceSession {
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapM = Eigen::Map<Mat>;
  using CMapM = Eigen::Map<const Mat>;

 public:
  InferenceSession(const LanguageModel<S>& model, std::size_t batch,
                   std::size_t capacity = 0)
      : model_(&model),
        B_(batch),
        cap_(capacity ? capacity
                      : static_cast<std::size_t>(model.config().max_seq_len)) {
    if (batch == 0) throw ContractError("session batch must be >= 1");
    if (cap_ > static_cast<std::size_t>(model.config().max_seq_len))
      throw ContractError("session capacity exceeds max_seq_len");
    const auto& cfg = model.config();
    const std::size_t per_layer =
        B_ * cfg.n_heads * cap_ * static_cast<std::size_t>(cfg.head_dim());
    k_cache_.assign(cfg.n_layers, std::vector<S>(per_layer, S{0}));
    v_cache_.assign(cfg.n_layers, std::vector<S>(per_layer, S{0}));
  }

  std::size_t batch() const { return B_; }
  std::size_t position() const { return pos_; }

  void reset() { pos_ = 0; }

  // Feed one token per row.
  std::vector<std::vector<double>> feed_step(const std::vector<int>& next) {
    std::vector<std::vector<int>> cols(B_);
    for (std::size_t b = 0; b < B_; ++b) cols[b] = {next[b]};
    return feed(cols);
  }

  // Append `n` tokens to every row and return the logits after the last
  // column, one double vector of size V per row.
  std::vector<std::vector<double>> feed(
      const std::vector<std::vector<int>>& rows) {
    const auto& cfg = model_->config();
    const std::size_t d = cfg.d_model;
    const std::size_t H = cfg.n_heads;
    const std::size_t hd = cfg.head_dim();
    const std::size_t f = cfg.d_ff;
    const std::size_t V = cfg.vocab_size;

    if (rows.size() != B_) throw ContractError("session batch size mismatch");
    const std::size_t n = rows[0].size();
    if (n == 0) throw ContractError("session feed of zero tokens");
    for (const auto& r : rows)
      if (r.size() != n) throw ShapeError("session rows must share a length");
    if (pos_ + n > cap_)
      throw ShapeError("session would exceed its capacity of " +
                       std::to_string(cap_));
    for (const auto& r : rows)
      for (int id : r)
        if (id < 0 || static_cast<std::size_t>(id) >= V)
          throw IndexError("token id out of vocabulary");

    const std::size_t rows_n = B_ * n;
    std::vector<S> x(rows_n * d);
    for (std::size_t b = 0; b < B_; ++b)
      for (std::size_t i = 0; i < n; ++i) {
        const S* te = model_->wte().data() +
                      static_cast<std::size_t>(rows[b][i]) * d;
        const S* pe = model_->wpe().data() + (pos_ + i) * d;
        S* px = x.data() + (b * n + i) * d;
        for (std::size_t c = 0; c < d; ++c) px[c] = te[c] + pe[c];
      }

    std::vector<S> h(rows_n * d), qkv(rows_n * 3 * d), ctx(rows_n * d),
        ff(rows_n * f);
    const S inv_sqrt_hd =
        static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));

    for (int l = 0; l < cfg.n_layers; ++l) {
      const BlockParams<S>& blk = model_->blocks()[l];

      layer_norm_rows(x, h, blk.ln1_g, blk.ln1_b, rows_n, d);
      {
        CMapM Hm(h.data(), rows_n, d);
        CMapM W(blk.qkv_w.data(), d, 3 * d);
        MapM Q(qkv.data(), rows_n, 3 * d);
        Q.noalias() = Hm * W;
        for (std::size_t r = 0; r < rows_n; ++r)
          for (std::size_t c = 0; c < 3 * d; ++c)
            qkv[r * 3 * d + c] += blk.qkv_b.data()[c];
      }

      // Append keys/values for the new positions.
      for (std::size_t b = 0; b < B_; ++b)
        for (std::size_t hh = 0; hh < H; ++hh)
          for (std::size_t i = 0; i < n; ++i) {
            const S* src = qkv.data() + (b * n + i) * 3 * d;
            S* kd = k_cache_[l].data() +
                    ((b * H + hh) * cap_ + pos_ + i) * hd;
            S* vd = v_cache_[l].data() +
                    ((b * H + hh) * cap_ + pos_ + i) * hd;
            std::copy_n(src + d + hh * hd, hd, kd);
            std::copy_n(src + 2 * d + hh * hd, hd, vd);
          }

      // Causal attention over the cache.
      const std::size_t ctx_len = pos_ + n;
      std::vector<S> q_head(n * hd), scores(n * ctx_len), probs(n * ctx_len),
          out_head(n * hd);
      for (std::size_t b = 0; b < B_; ++b)
        for (std::size_t hh = 0; hh < H; ++hh) {
          for (std::size_t i = 0; i < n; ++i)
            std::copy_n(qkv.data() + (b * n + i) * 3 * d + hh * hd, hd,
                        q_head.data() + i * hd);
          CMapM Q(q_head.data(), n, hd);
          CMapM K(k_cache_[l].data() + (b * H + hh) * cap_ * hd, ctx_len, hd);
          MapM Sc(scores.data(), n, ctx_len);
          Sc.noalias() = Q * K.transpose();
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t valid = pos_ + i + 1;
            const S* srow = scores.data() + i * ctx_len;
            S* prow = probs.data() + i * ctx_len;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < valid; ++c)
              mx = std::max(mx, static_cast<double>(srow[c]) *
                                    static_cast<double>(inv_sqrt_hd));
            double sum = 0.0;
            for (std::size_t c = 0; c < valid; ++c)
              sum += std::exp(static_cast<double>(srow[c]) *
                                  static_cast<double>(inv_sqrt_hd) -
                              mx);
            for (std::size_t c = 0; c < valid; ++c)
              prow[c] = static_cast<S>(
                  std::exp(static_cast<double>(srow[c]) *
                               static_cast<double>(inv_sqrt_hd) -
                           mx) /
                  sum);
            for (std::size_t c = valid; c < ctx_len; ++c) prow[c] = S{0};
          }
          CMapM P(probs.data(), n, ctx_len);
          CMapM Vm(v_cache_[l].data() + (b * H + hh) * cap_ * hd, ctx_len, hd);
          MapM O(out_head.data(), n, hd);
          O.noalias() = P * Vm;
          for (std::size_t i = 0; i < n; ++i)
            std::copy_n(out_head.data() + i * hd, hd,
                        ctx.data() + (b * n + i) * d + hh * hd);
        }

      {
        CMapM C(ctx.data(), rows_n, d);
        CMapM W(blk.proj_w.data(), d, d);
        MapM X(x.data(), rows_n, d);
        X.noalias() += C * W;
        for (std::size_t r = 0; r < rows_n; ++r)
          for (std::size_t c = 0; c < d; ++c)
            x[r * d + c] += blk.proj_b.data()[c];
      }

      layer_norm_rows(x, h, blk.ln2_g, blk.ln2_b, rows_n, d);
      {
        CMapM Hm(h.data(), rows_n, d);
        CMapM W1(blk.fc_w.data(), d, f);
        MapM F(ff.data(), rows_n, f);
        F.noalias() = Hm * W1;
        for (std::size_t r = 0; r < rows_n; ++r)
          for (std::size_t c = 0; c < f; ++c) {
            const double z = static_cast<double>(ff[r * f + c]) +
                             static_cast<double>(blk.fc_b.data()[c]);
            const double t = std::tanh(detail::kGeluAlpha *
                                       (z + detail::kGeluBeta * z * z * z));
            ff[r * f + c] = static_cast<S>(0.5 * z * (1.0 + t));
          }
        CMapM Fc(ff.data(), rows_n, f);
        CMapM W2(blk.out_w.data(), f, d);
        MapM X(x.data(), rows_n, d);
        X.noalias() += Fc * W2;
        for (std::size_t r = 0; r < rows_n; ++r)
          for (std::size_t c = 0; c < d; ++c)
            x[r * d + c] += blk.out_b.data()[c];
      }
    }

    pos_ += n;

    // Logits only for the final column of each row.
    std::vector<S> last(B_ * d);
    for (std::size_t b = 0; b < B_; ++b)
      std::copy_n(x.data() + (b * n + n - 1) * d, d, last.data() + b * d);
    std::vector<S> lnorm(B_ * d);
    layer_norm_rows(last, lnorm, model_->lnf_g(), model_->lnf_b(), B_, d);

    std::vector<S> logits(B_ * V);
    {
      CMapM L(lnorm.data(), B_, d);
      CMapM E(model_->wte().data(), V, d);
      MapM Z(logits.data(), B_, V);
      Z.noalias() = L * E.transpose();
    }
    std::vector<std::vector<double>> out(B_, std::vector<double>(V));
    for (std::size_t b = 0; b < B_; ++b)
      for (std::size_t i = 0; i < V; ++i)
        out[b][i] = static_cast<double>(logits[b * V + i]);
    return out;
  }

 private:
  static void layer_norm_rows(const std::vector<S>& in, std::vector<S>& out,
                              const Tensor<S>& gain, const Tensor<S>& bias,
                              std::size_t rows, std::size_t d,
                              double eps = 1e-5) {
    for (std::size_t r = 0; r < rows; ++r) {
      const S* px = in.data() + r * d;
      double m = 0.0;
      for (std::size_t c = 0; c < d; ++c) m += static_cast<double>(px[c]);
      m /= static_cast<double>(d);
      double var = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double t = static_cast<double>(px[c]) - m;
        var += t * t;
      }
      var /= static_cast<double>(d);
      const double inv = 1.0 / std::sqrt(var + eps);
      S* po = out.data() + r * d;
      for (std::size_t c = 0; c < d; ++c)
        po[c] = static_cast<S>((static_cast<double>(px[c]) - m) * inv *
                                   static_cast<double>(gain.data()[c]) +
                               static_cast<double>(bias.data()[c]));
    }
  }

  const LanguageModel<S>* model_;
  std::size_t B_;
  std::size_t cap_;
  std::size_t pos_ = 0;
  std::vector<std::vector<S>> k_cache_, v_cache_;  // per layer, [B,H,cap,hd]
};

// Greedy argmax with ties broken toward the lowest token id.
inline int argmax_token(const std::vector<double>& v) {
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = static_cast<int>(i);
  return best;
}

// log softmax of a logit vector at the given index, in double.
inline double log_softmax_at(const std::vector<double>& logits, int idx) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double z : logits) mx = std::max(mx, z);
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - mx);
  return logits[idx] - mx - std::log(sum);
}

}  // namespace lmlab
