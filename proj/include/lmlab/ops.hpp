#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "lmlab/error.hpp"
#include "lmlab/tensor.hpp"

// Differentiable ops. Every op computes its forward result eagerly and, when
// a tape is active and an input requires grad, records a pull closure that
// accumulates the output gradient into the input gradients. Reductions and
// normalizers accumulate in double regardless of the storage scalar.

namespace lmlab {

namespace detail {

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapM = Eigen::Map<MatRM<S>>;
template <typename S>
using CMapM = Eigen::Map<const MatRM<S>>;

inline std::size_t axis_index(const Shape& shape, int axis) {
  const int r = static_cast<int>(shape.size());
  int a = axis < 0 ? r + axis : axis;
  if (a < 0 || a >= r)
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_str(shape));
  return static_cast<std::size_t>(a);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul: a is [leading..., m, k] (leading dims collapse row-major), b is
// [k, n], or [n, k] with trans_b. Result is [leading..., m, n].
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool trans_b = false) {
  if (a.rank() < 2 || b.rank() != 2)
    throw ShapeError("matmul expects a rank>=2 and b rank 2, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t k = a.shape().back();
  const std::size_t bk = trans_b ? b.shape()[1] : b.shape()[0];
  const std::size_t n = trans_b ? b.shape()[0] : b.shape()[1];
  if (k != bk)
    throw ShapeError("matmul inner dimensions disagree: " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t rows = a.numel() / k;

  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  Tensor<S> out(out_shape);

  detail::CMapM<S> A(a.data(), rows, k);
  detail::CMapM<S> B(b.data(), b.shape()[0], b.shape()[1]);
  detail::MapM<S> C(out.data(), rows, n);
  if (trans_b)
    C.noalias() = A * B.transpose();
  else
    C.noalias() = A * B;

  auto an = a.node(), bn = b.node(), on = out.node();
  return detail::finish_op<S>({a, b}, out, [an, bn, on, rows, k, n, trans_b] {
    detail::CMapM<S> A(an->values.data(), rows, k);
    detail::CMapM<S> B(bn->values.data(),
                       trans_b ? n : k, trans_b ? k : n);
    detail::CMapM<S> dC(on->grad.data(), rows, n);
    if (an->requires_grad || !an->grad.empty()) {
      detail::MapM<S> dA(detail::pull_grad(an).data(), rows, k);
      if (trans_b)
        dA.noalias() += dC * B;
      else
        dA.noalias() += dC * B.transpose();
    }
    if (bn->requires_grad || !bn->grad.empty()) {
      detail::MapM<S> dB(detail::pull_grad(bn).data(),
                         trans_b ? n : k, trans_b ? k : n);
      if (trans_b)
        dB.noalias() += dC.transpose() * A;
      else
        dB.noalias() += A.transpose() * dC;
    }
  });
}

// ---------------------------------------------------------------------------
// batched_matmul: a [N, m, k], b [N, k, n] (extents before transposition
// flags). Used by attention, where both operands carry a batch dimension.
template <typename S>
Tensor<S> batched_matmul(const Tensor<S>& a, const Tensor<S>& b,
                         bool trans_a = false, bool trans_b = false) {
  if (a.rank() != 3 || b.rank() != 3)
    throw ShapeError("batched_matmul expects rank-3 operands, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  if (a.shape()[0] != b.shape()[0])
    throw ShapeError("batched_matmul batch extents disagree");
  const std::size_t N = a.shape()[0];
  const std::size_t m = trans_a ? a.shape()[2] : a.shape()[1];
  const std::size_t k = trans_a ? a.shape()[1] : a.shape()[2];
  const std::size_t bk = trans_b ? b.shape()[2] : b.shape()[1];
  const std::size_t n = trans_b ? b.shape()[1] : b.shape()[2];
  if (k != bk)
    throw ShapeError("batched_matmul inner dimensions disagree: " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));

  Tensor<S> out({N, m, n});
  const std::size_t as = a.shape()[1] * a.shape()[2];
  const std::size_t bs = b.shape()[1] * b.shape()[2];
  for (std::size_t i = 0; i < N; ++i) {
    detail::CMapM<S> A(a.data() + i * as, a.shape()[1], a.shape()[2]);
    detail::CMapM<S> B(b.data() + i * bs, b.shape()[1], b.shape()[2]);
    detail::MapM<S> C(out.data() + i * m * n, m, n);
    if (!trans_a && !trans_b)
      C.noalias() = A * B;
    else if (!trans_a && trans_b)
      C.noalias() = A * B.transpose();
    else if (trans_a && !trans_b)
      C.noalias() = A.transpose() * B;
    else
      C.noalias() = A.transpose() * B.transpose();
  }

  auto an = a.node(), bn = b.node(), on = out.node();
  return detail::finish_op<S>(
      {a, b}, out, [an, bn, on, N, m, n, as, bs, trans_a, trans_b] {
        const std::size_t ar = an->shape[1], ac = an->shape[2];
        const std::size_t br = bn->shape[1], bc = bn->shape[2];
        detail::pull_grad(an);
        detail::pull_grad(bn);
        for (std::size_t i = 0; i < N; ++i) {
          detail::CMapM<S> A(an->values.data() + i * as, ar, ac);
          detail::CMapM<S> B(bn->values.data() + i * bs, br, bc);
          detail::CMapM<S> dC(on->grad.data() + i * m * n, m, n);
          detail::MapM<S> dA(an->grad.data() + i * as, ar, ac);
          detail::MapM<S> dB(bn->grad.data() + i * bs, br, bc);
          if (!trans_a && !trans_b) {
            dA.noalias() += dC * B.transpose();
            dB.noalias() += A.transpose() * dC;
          } else if (!trans_a && trans_b) {
            dA.noalias() += dC * B;
            dB.noalias() += dC.transpose() * A;
          } else if (trans_a && !trans_b) {
            dA.noalias() += B * dC.transpose();
            dB.noalias() += A * dC;
          } else {
            dA.noalias() += B.transpose() * dC.transpose();
            dB.noalias() += dC.transpose() * A.transpose();
          }
        }
      });
}

// ---------------------------------------------------------------------------
// add: b's shape must be a trailing suffix of a's shape (equal shapes
// included). Leading dimensions of a broadcast over b.
template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (bs.size() > as.size() ||
      !std::equal(bs.rbegin(), bs.rend(), as.rbegin()))
    throw ShapeError("add requires b to be a trailing suffix of a: " +
                     shape_str(as) + " vs " + shape_str(bs));
  const std::size_t bn_elems = b.numel();
  const std::size_t reps = a.numel() / std::max<std::size_t>(bn_elems, 1);

  Tensor<S> out(as);
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t j = 0; j < bn_elems; ++j)
      po[r * bn_elems + j] = pa[r * bn_elems + j] + pb[j];

  auto an = a.node(), bn = b.node(), on = out.node();
  return detail::finish_op<S>({a, b}, out, [an, bn, on, reps, bn_elems] {
    if (an->requires_grad || !an->grad.empty()) {
      auto& da = detail::pull_grad(an);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += on->grad[i];
    }
    if (bn->requires_grad || !bn->grad.empty()) {
      auto& db = detail::pull_grad(bn);
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t j = 0; j < bn_elems; ++j)
          db[j] += on->grad[r * bn_elems + j];
    }
  });
}

// Elementwise product of same-shape tensors.
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul requires identical shapes: " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  Tensor<S> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.data()[i] = a.data()[i] * b.data()[i];

  auto an = a.node(), bn = b.node(), on = out.node();
  return detail::finish_op<S>({a, b}, out, [an, bn, on] {
    if (an->requires_grad || !an->grad.empty()) {
      auto& da = detail::pull_grad(an);
      for (std::size_t i = 0; i < da.size(); ++i)
        da[i] += on->grad[i] * bn->values[i];
    }
    if (bn->requires_grad || !bn->grad.empty()) {
      auto& db = detail::pull_grad(bn);
      for (std::size_t i = 0; i < db.size(); ++i)
        db[i] += on->grad[i] * an->values[i];
    }
  });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  Tensor<S> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * c;
  auto an = a.node(), on = out.node();
  return detail::finish_op<S>({a}, out, [an, on, c] {
    auto& da = detail::pull_grad(an);
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += on->grad[i] * c;
  });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  Tensor<S> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.data()[i] = a.data()[i] > S{0} ? a.data()[i] : S{0};
  auto an = a.node(), on = out.node();
  return detail::finish_op<S>({a}, out, [an, on] {
    auto& da = detail::pull_grad(an);
    for (std::size_t i = 0; i < da.size(); ++i)
      if (an->values[i] > S{0}) da[i] += on->grad[i];
  });
}

namespace detail {
inline constexpr double kGeluAlpha = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluBeta = 0.044715;
}  // namespace detail

// GELU, tanh approximation (the GPT-2 variant).
template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
  using detail::kGeluAlpha;
  using detail::kGeluBeta;
  Tensor<S> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double x = static_cast<double>(a.data()[i]);
    const double t = std::tanh(kGeluAlpha * (x + kGeluBeta * x * x * x));
    out.data()[i] = static_cast<S>(0.5 * x * (1.0 + t));
  }
  auto an = a.node(), on = out.node();
  return detail::finish_op<S>({a}, out, [an, on] {
    auto& da = detail::pull_grad(an);
    for (std::size_t i = 0; i < da.size(); ++i) {
      const double x = static_cast<double>(an->values[i]);
      const double t =
          std::tanh(detail::kGeluAlpha * (x + detail::kGeluBeta * x * x * x));
      const double d = 0.5 * (1.0 + t) +
                       0.5 * x * (1.0 - t * t) * detail::kGeluAlpha *
                           (1.0 + 3.0 * detail::kGeluBeta * x * x);
      da[i] += on->grad[i] * static_cast<S>(d);
    }
  });
}

// ---------------------------------------------------------------------------
// softmax / log_softmax along an axis, stabilized by max subtraction with
// double-precision normalizers.

namespace detail {

struct AxisLanes {
  std::size_t outer, len, inner;
};

inline AxisLanes lanes(const Shape& shape, int axis) {
  const std::size_t a = axis_index(shape, axis);
  AxisLanes l{1, shape[a], 1};
  for (std::size_t i = 0; i < a; ++i) l.outer *= shape[i];
  for (std::size_t i = a + 1; i < shape.size(); ++i) l.inner *= shape[i];
  return l;
}

}  // namespace detail

template <typename S>
Tensor<S> softmax(const Tensor<S>& z, int axis = -1) {
  const auto l = detail::lanes(z.shape(), axis);
  Tensor<S> out(z.shape());
  const S* pz = z.data();
  S* po = out.data();
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t i = 0; i < l.inner; ++i) {
      const std::size_t base = o * l.len * l.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < l.len; ++j)
        mx = std::max(mx, static_cast<double>(pz[base + j * l.inner]));
      double sum = 0.0;
      for (std::size_t j = 0; j < l.len; ++j)
        sum += std::exp(static_cast<double>(pz[base + j * l.inner]) - mx);
      for (std::size_t j = 0; j < l.len; ++j)
        po[base + j * l.inner] = static_cast<S>(
            std::exp(static_cast<double>(pz[base + j * l.inner]) - mx) / sum);
    }

  auto zn = z.node(), on = out.node();
  return detail::finish_op<S>({z}, out, [zn, on, l] {
    auto& dz = detail::pull_grad(zn);
    for (std::size_t o = 0; o < l.outer; ++o)
      for (std::size_t i = 0; i < l.inner; ++i) {
        const std::size_t base = o * l.len * l.inner + i;
        double dot = 0.0;
        for (std::size_t j = 0; j < l.len; ++j) {
          const std::size_t idx = base + j * l.inner;
          dot += static_cast<double>(on->grad[idx]) *
                 static_cast<double>(on->values[idx]);
        }
        for (std::size_t j = 0; j < l.len; ++j) {
          const std::size_t idx = base + j * l.inner;
          dz[idx] += static_cast<S>(
              static_cast<double>(on->values[idx]) *
              (static_cast<double>(on->grad[idx]) - dot));
        }
      }
  });
}

template <typename S>
Tensor<S> log_softmax(const Tensor<S>& z, int axis = -1) {
  const auto l = detail::lanes(z.shape(), axis);
  Tensor<S> out(z.shape());
  const S* pz = z.data();
  S* po = out.data();
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t i = 0; i < l.inner; ++i) {
      const std::size_t base = o * l.len * l.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < l.len; ++j)
        mx = std::max(mx, static_cast<double>(pz[base + j * l.inner]));
      double sum = 0.0;
      for (std::size_t j = 0; j < l.len; ++j)
        sum += std::exp(static_cast<double>(pz[base + j * l.inner]) - mx);
      const double lse = mx + std::log(sum);
      for (std::size_t j = 0; j < l.len; ++j)
        po[base + j * l.inner] =
            static_cast<S>(static_cast<double>(pz[base + j * l.inner]) - lse);
    }

  auto zn = z.node(), on = out.node();
  return detail::finish_op<S>({z}, out, [zn, on, l] {
    auto& dz = detail::pull_grad(zn);
    for (std::size_t o = 0; o < l.outer; ++o)
      for (std::size_t i = 0; i < l.inner; ++i) {
        const std::size_t base = o * l.len * l.inner + i;
        double dsum = 0.0;
        for (std::size_t j = 0; j < l.len; ++j)
          dsum += static_cast<double>(on->grad[base + j * l.inner]);
        for (std::size_t j = 0; j < l.len; ++j) {
          const std::size_t idx = base + j * l.inner;
          dz[idx] += static_cast<S>(
              static_cast<double>(on->grad[idx]) -
              std::exp(static_cast<double>(on->values[idx])) * dsum);
        }
      }
  });
}

// Row-causal softmax over [N, T, T] attention scores: row r of each block is
// a softmax over columns 0..r and exactly zero beyond, so no -inf scores are
// ever materialized and later positions cannot leak into earlier rows.
template <typename S>
Tensor<S> causal_softmax(const Tensor<S>& scores) {
  if (scores.rank() != 3 || scores.shape()[1] != scores.shape()[2])
    throw ShapeError("causal_softmax expects [N, T, T], got " +
                     shape_str(scores.shape()));
  const std::size_t N = scores.shape()[0];
  const std::size_t T = scores.shape()[1];
  Tensor<S> out(scores.shape());
  const S* pz = scores.data();
  S* po = out.data();
  for (std::size_t b = 0; b < N; ++b)
    for (std::size_t r = 0; r < T; ++r) {
      const std::size_t base = (b * T + r) * T;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c <= r; ++c)
        mx = std::max(mx, static_cast<double>(pz[base + c]));
      double sum = 0.0;
      for (std::size_t c = 0; c <= r; ++c)
        sum += std::exp(static_cast<double>(pz[base + c]) - mx);
      for (std::size_t c = 0; c <= r; ++c)
        po[base + c] = static_cast<S>(
            std::exp(static_cast<double>(pz[base + c]) - mx) / sum);
      for (std::size_t c = r + 1; c < T; ++c) po[base + c] = S{0};
    }

  auto zn = scores.node(), on = out.node();
  return detail::finish_op<S>({scores}, out, [zn, on, N, T] {
    auto& dz = detail::pull_grad(zn);
    for (std::size_t b = 0; b < N; ++b)
      for (std::size_t r = 0; r < T; ++r) {
        const std::size_t base = (b * T + r) * T;
        double dot = 0.0;
        for (std::size_t c = 0; c <= r; ++c)
          dot += static_cast<double>(on->grad[base + c]) *
                 static_cast<double>(on->values[base + c]);
        for (std::size_t c = 0; c <= r; ++c)
          dz[base + c] += static_cast<S>(
              static_cast<double>(on->values[base + c]) *
              (static_cast<double>(on->grad[base + c]) - dot));
      }
  });
}

// ---------------------------------------------------------------------------
// layer_norm over the last axis: per row, zero mean and unit variance
// (population) before gain and bias.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain,
                     const Tensor<S>& bias, double eps = 1e-5) {
  if (x.rank() < 1) throw ShapeError("layer_norm needs rank >= 1");
  const std::size_t d = x.shape().back();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
    throw ShapeError("layer_norm gain/bias must have shape [d]");
  const std::size_t rows = x.numel() / d;

  Tensor<S> out(x.shape());
  std::vector<double> mu(rows), inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const S* px = x.data() + r * d;
    double m = 0.0;
    for (std::size_t c = 0; c < d; ++c) m += static_cast<double>(px[c]);
    m /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double t = static_cast<double>(px[c]) - m;
      var += t * t;
    }
    var /= static_cast<double>(d);
    mu[r] = m;
    inv[r] = 1.0 / std::sqrt(var + eps);
    S* po = out.data() + r * d;
    for (std::size_t c = 0; c < d; ++c)
      po[c] = static_cast<S>((static_cast<double>(px[c]) - m) * inv[r] *
                                 static_cast<double>(gain.data()[c]) +
                             static_cast<double>(bias.data()[c]));
  }

  auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
  return detail::finish_op<S>(
      {x, gain, bias}, out, [xn, gn, bn, on, rows, d, mu, inv] {
        const bool need_x = xn->requires_grad || !xn->grad.empty();
        const bool need_g = gn->requires_grad || !gn->grad.empty();
        const bool need_b = bn->requires_grad || !bn->grad.empty();
        if (need_x) detail::pull_grad(xn);
        if (need_g) detail::pull_grad(gn);
        if (need_b) detail::pull_grad(bn);
        for (std::size_t r = 0; r < rows; ++r) {
          const S* px = xn->values.data() + r * d;
          const S* pdy = on->grad.data() + r * d;
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            const double xhat = (static_cast<double>(px[c]) - mu[r]) * inv[r];
            const double dxhat = static_cast<double>(pdy[c]) *
                                 static_cast<double>(gn->values[c]);
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat;
            if (need_g) gn->grad[c] += static_cast<S>(pdy[c] * xhat);
            if (need_b) bn->grad[c] += pdy[c];
          }
          mean_dxhat /= static_cast<double>(d);
          mean_dxhat_xhat /= static_cast<double>(d);
          if (need_x) {
            S* pdx = xn->grad.data() + r * d;
            for (std::size_t c = 0; c < d; ++c) {
              const double xhat = (static_cast<double>(px[c]) - mu[r]) * inv[r];
              const double dxhat = static_cast<double>(pdy[c]) *
                                   static_cast<double>(gn->values[c]);
              pdx[c] += static_cast<S>(
                  inv[r] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat));
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// embedding_lookup: rows of table selected by ids; output shape is
// leading_shape + [d]. Defaults to a flat [ids.size(), d] result.
template <typename S>
Tensor<S> embedding_lookup(const Tensor<S>& table, const std::vector<int>& ids,
                           Shape leading_shape = {}) {
  if (table.rank() != 2) throw ShapeError("embedding table must be [V, d]");
  const std::size_t V = table.shape()[0];
  const std::size_t d = table.shape()[1];
  if (leading_shape.empty()) leading_shape = {ids.size()};
  if (shape_numel(leading_shape) != ids.size())
    throw ShapeError("embedding_lookup leading shape does not match ids");
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= V)
      throw IndexError("embedding id " + std::to_string(id) +
                       " out of range for vocab " + std::to_string(V));

  Shape out_shape = leading_shape;
  out_shape.push_back(d);
  Tensor<S> out(out_shape);
  for (std::size_t p = 0; p < ids.size(); ++p)
    std::copy_n(table.data() + static_cast<std::size_t>(ids[p]) * d, d,
                out.data() + p * d);

  auto tn = table.node(), on = out.node();
  return detail::finish_op<S>({table}, out, [tn, on, ids, d] {
    auto& dt = detail::pull_grad(tn);
    for (std::size_t p = 0; p < ids.size(); ++p) {
      S* drow = dt.data() + static_cast<std::size_t>(ids[p]) * d;
      const S* g = on->grad.data() + p * d;
      for (std::size_t c = 0; c < d; ++c) drow[c] += g[c];
    }
  });
}

// gather_last: out[r] = x[r, ids[r]] over the flattened leading dims.
template <typename S>
Tensor<S> gather_last(const Tensor<S>& x, const std::vector<int>& ids) {
  if (x.rank() < 1) throw ShapeError("gather_last needs rank >= 1");
  const std::size_t V = x.shape().back();
  const std::size_t rows = x.numel() / V;
  if (ids.size() != rows)
    throw ShapeError("gather_last ids length does not match leading dims");
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= V)
      throw IndexError("gather id out of range");

  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  Tensor<S> out(out_shape);
  for (std::size_t r = 0; r < rows; ++r)
    out.data()[r] = x.data()[r * V + static_cast<std::size_t>(ids[r])];

  auto xn = x.node(), on = out.node();
  return detail::finish_op<S>({x}, out, [xn, on, ids, V, rows] {
    auto& dx = detail::pull_grad(xn);
    for (std::size_t r = 0; r < rows; ++r)
      dx[r * V + static_cast<std::size_t>(ids[r])] += on->grad[r];
  });
}

// slice_last: keep [begin, end) of the last axis.
template <typename S>
Tensor<S> slice_last(const Tensor<S>& x, std::size_t begin, std::size_t end) {
  if (x.rank() < 1) throw ShapeError("slice_last needs rank >= 1");
  const std::size_t T = x.shape().back();
  if (begin >= end || end > T)
    throw ShapeError("slice_last range [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") invalid for extent " +
                     std::to_string(T));
  const std::size_t rows = x.numel() / T;
  const std::size_t w = end - begin;

  Shape out_shape = x.shape();
  out_shape.back() = w;
  Tensor<S> out(out_shape);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.data() + r * T + begin, w, out.data() + r * w);

  auto xn = x.node(), on = out.node();
  return detail::finish_op<S>({x}, out, [xn, on, rows, T, begin, w] {
    auto& dx = detail::pull_grad(xn);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c)
        dx[r * T + begin + c] += on->grad[r * w + c];
  });
}

// mean over the last axis.
template <typename S>
Tensor<S> mean_last(const Tensor<S>& x) {
  if (x.rank() < 1) throw ShapeError("mean_last needs rank >= 1");
  const std::size_t T = x.shape().back();
  const std::size_t rows = x.numel() / T;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  Tensor<S> out(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < T; ++c)
      acc += static_cast<double>(x.data()[r * T + c]);
    out.data()[r] = static_cast<S>(acc / static_cast<double>(T));
  }
  auto xn = x.node(), on = out.node();
  return detail::finish_op<S>({x}, out, [xn, on, rows, T] {
    auto& dx = detail::pull_grad(xn);
    for (std::size_t r = 0; r < rows; ++r) {
      const S g = static_cast<S>(static_cast<double>(on->grad[r]) /
                                 static_cast<double>(T));
      for (std::size_t c = 0; c < T; ++c) dx[r * T + c] += g;
    }
  });
}

template <typename S>
Tensor<S> sum_all(const Tensor<S>& x) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i)
    acc += static_cast<double>(x.data()[i]);
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(acc));
  auto xn = x.node(), on = out.node();
  return detail::finish_op<S>({x}, out, [xn, on] {
    auto& dx = detail::pull_grad(xn);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += on->grad[0];
  });
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& x) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i)
    acc += static_cast<double>(x.data()[i]);
  const std::size_t n = x.numel();
  Tensor<S> out =
      Tensor<S>::scalar(static_cast<S>(acc / static_cast<double>(n)));
  auto xn = x.node(), on = out.node();
  return detail::finish_op<S>({x}, out, [xn, on, n] {
    auto& dx = detail::pull_grad(xn);
    const S g = static_cast<S>(static_cast<double>(on->grad[0]) /
                               static_cast<double>(n));
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g;
  });
}

// ---------------------------------------------------------------------------
// cross_entropy: mean negative log-probability of the target at each
// position; log_probs is [leading..., V], targets is flat over the leading
// dims with ignore_index skipping a position entirely.
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& log_probs,
                        const std::vector<int>& targets,
                        int ignore_index = -1) {
  if (log_probs.rank() < 1) throw ShapeError("cross_entropy needs rank >= 1");
  const std::size_t V = log_probs.shape().back();
  const std::size_t rows = log_probs.numel() / V;
  if (targets.size() != rows)
    throw ShapeError("cross_entropy targets length does not match positions");

  std::size_t counted = 0;
  double acc = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int t = targets[r];
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= V)
      throw IndexError("cross_entropy target " + std::to_string(t) +
                       " out of range for vocab " + std::to_string(V));
    acc -= static_cast<double>(
        log_probs.data()[r * V + static_cast<std::size_t>(t)]);
    ++counted;
  }
  if (counted == 0)
    throw ContractError("cross_entropy with no scored positions");
  Tensor<S> out =
      Tensor<S>::scalar(static_cast<S>(acc / static_cast<double>(counted)));

  auto ln = log_probs.node(), on = out.node();
  return detail::finish_op<S>(
      {log_probs}, out, [ln, on, targets, V, rows, counted, ignore_index] {
        auto& dl = detail::pull_grad(ln);
        const S g = static_cast<S>(-static_cast<double>(on->grad[0]) /
                                   static_cast<double>(counted));
        for (std::size_t r = 0; r < rows; ++r) {
          const int t = targets[r];
          if (t == ignore_index) continue;
          dl[r * V + static_cast<std::size_t>(t)] += g;
        }
      });
}

// Throws NumericError when a tensor picked up NaN/Inf; used at the few spots
// where blowups would otherwise propagate silently (losses, logits).
template <typename S>
void assert_finite(const Tensor<S>& t, const char* what) {
  if (!t.all_finite())
    throw NumericError(std::string("non-finite values in ") + what);
}

}  // namespace lmlab
