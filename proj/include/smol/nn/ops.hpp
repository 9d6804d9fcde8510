// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations on Tape values. Spatial inputs use the [H*W, C]
// layout; functions taking (height, width) interpret rows in row-major pixel
// order.
#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "smol/nn/tape.hpp"

namespace smol::nn {

namespace detail {

inline void check(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

}  // namespace detail

// ---- Linear algebra --------------------------------------------------------

template <typename T>
Var matmul(Tape<T>& t, Var a, Var b) {
  detail::check(t.value(a).cols() == t.value(b).rows(), "matmul: inner dimensions differ");
  Matrix<T> out = t.value(a) * t.value(b);
  return t.push(std::move(out), {a, b}, [a, b](Tape<T>& t, const Matrix<T>& g) {
    if (t.requires_grad(a)) t.grad_ref(a).noalias() += g * t.value(b).transpose();
    if (t.requires_grad(b)) t.grad_ref(b).noalias() += t.value(a).transpose() * g;
  });
}

/// a * b^T
template <typename T>
Var matmul_nt(Tape<T>& t, Var a, Var b) {
  detail::check(t.value(a).cols() == t.value(b).cols(), "matmul_nt: column counts differ");
  Matrix<T> out = t.value(a) * t.value(b).transpose();
  return t.push(std::move(out), {a, b}, [a, b](Tape<T>& t, const Matrix<T>& g) {
    if (t.requires_grad(a)) t.grad_ref(a).noalias() += g * t.value(b);
    if (t.requires_grad(b)) t.grad_ref(b).noalias() += g.transpose() * t.value(a);
  });
}

/// x * w + b, with `b` a 1 x out row broadcast over rows. `b` may be invalid.
template <typename T>
Var linear(Tape<T>& t, Var x, Var w, Var b) {
  detail::check(t.value(x).cols() == t.value(w).rows(), "linear: input width does not match weight rows");
  Matrix<T> out = t.value(x) * t.value(w);
  if (b.valid()) {
    detail::check(t.value(b).rows() == 1 && t.value(b).cols() == t.value(w).cols(), "linear: bad bias shape");
    out.rowwise() += t.value(b).row(0);
  }
  if (!b.valid()) b = x;  // placeholder for the input list; never differentiated below
  const bool has_bias = b.id != x.id;
  return t.push(std::move(out), {x, w, b}, [x, w, b, has_bias](Tape<T>& t, const Matrix<T>& g) {
    if (t.requires_grad(x)) t.grad_ref(x).noalias() += g * t.value(w).transpose();
    if (t.requires_grad(w)) t.grad_ref(w).noalias() += t.value(x).transpose() * g;
    if (has_bias && t.requires_grad(b)) t.grad_ref(b) += g.colwise().sum();
  });
}

// ---- Elementwise -----------------------------------------------------------

template <typename T>
Var add(Tape<T>& t, Var a, Var b) {
  detail::check(t.value(a).rows() == t.value(b).rows() && t.value(a).cols() == t.value(b).cols(),
                "add: shape mismatch");
  Matrix<T> out = t.value(a) + t.value(b);
  return t.push(std::move(out), {a, b}, [a, b](Tape<T>& t, const Matrix<T>& g) {
    if (t.requires_grad(a)) t.grad_ref(a) += g;
    if (t.requires_grad(b)) t.grad_ref(b) += g;
  });
}

/// Broadcast-add a 1 x C row to every row of x.
template <typename T>
Var add_row(Tape<T>& t, Var x, Var row) {
  detail::check(t.value(row).rows() == 1 && t.value(row).cols() == t.value(x).cols(), "add_row: shape mismatch");
  Matrix<T> out = t.value(x);
  out.rowwise() += t.value(row).row(0);
  return t.push(std::move(out), {x, row}, [x, row](Tape<T>& t, const Matrix<T>& g) {
    if (t.requires_grad(x)) t.grad_ref(x) += g;
    if (t.requires_grad(row)) t.grad_ref(row) += g.colwise().sum();
  });
}

template <typename T>
Var mul(Tape<T>& t, Var a, Var b) {
  detail::check(t.value(a).rows() == t.value(b).rows() && t.value(a).cols() == t.value(b).cols(),
                "mul: shape mismatch");
  Matrix<T> out = t.value(a).cwiseProduct(t.value(b));
  return t.push(std::move(out), {a, b}, [a, b](Tape<T>& t, const Matrix<T>& g) {
    if (t.requires_grad(a)) t.grad_ref(a) += g.cwiseProduct(t.value(b));
    if (t.requires_grad(b)) t.grad_ref(b) += g.cwiseProduct(t.value(a));
  });
}

template <typename T>
Var scale(Tape<T>& t, Var a, T s) {
  Matrix<T> out = t.value(a) * s;
  return t.push(std::move(out), {a}, [a, s](Tape<T>& t, const Matrix<T>& g) {
    if (t.requires_grad(a)) t.grad_ref(a) += g * s;
  });
}

/// Exact (erf) GELU.
template <typename T>
Var gelu(Tape<T>& t, Var a) {
  const Matrix<T>& x = t.value(a);
  Matrix<T> out = x.unaryExpr([](T v) { return T(0.5) * v * (T(1) + std::erf(v * T(std::numbers::sqrt2 / 2))); });
  return t.push(std::move(out), {a}, [a](Tape<T>& t, const Matrix<T>& g) {
    const T inv_sqrt_2pi = T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    Matrix<T> d = t.value(a).unaryExpr([inv_sqrt_2pi](T v) {
      const T cdf = T(0.5) * (T(1) + std::erf(v * T(std::numbers::sqrt2 / 2)));
      return cdf + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
    });
    t.grad_ref(a) += g.cwiseProduct(d);
  });
}

template <typename T>
Var relu(Tape<T>& t, Var a) {
  Matrix<T> out = t.value(a).cwiseMax(T(0));
  return t.push(std::move(out), {a}, [a](Tape<T>& t, const Matrix<T>& g) {
    t.grad_ref(a) += (t.value(a).array() > T(0)).select(g, T(0));
  });
}

// ---- Normalisation ---------------------------------------------------------

/// Row-wise layer norm over the channel axis; with [H*W, C] inputs this is
/// the per-pixel channel norm used by convolutional necks.
template <typename T>
Var layer_norm(Tape<T>& t, Var x, Var gamma, Var beta, T eps = T(1e-6)) {
  const Matrix<T>& in = t.value(x);
  const auto n = in.rows();
  const auto c = in.cols();
  detail::check(t.value(gamma).cols() == c && t.value(beta).cols() == c, "layer_norm: parameter width mismatch");
  Matrix<T> xhat(n, c);
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = in.row(i).mean();
    const T var = (in.row(i).array() - mean).square().mean();
    inv_std(i) = T(1) / std::sqrt(var + eps);
    xhat.row(i) = (in.row(i).array() - mean) * inv_std(i);
  }
  Matrix<T> out = (xhat.array().rowwise() * t.value(gamma).row(0).array()).rowwise() + t.value(beta).row(0).array();
  return t.push(std::move(out), {x, gamma, beta},
                [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, const Matrix<T>& g) {
                  if (t.requires_grad(gamma)) t.grad_ref(gamma) += g.cwiseProduct(xhat).colwise().sum();
                  if (t.requires_grad(beta)) t.grad_ref(beta) += g.colwise().sum();
                  if (!t.requires_grad(x)) return;
                  Matrix<T> dxhat = g.array().rowwise() * t.value(gamma).row(0).array();
                  auto& dx = t.grad_ref(x);
                  const T inv_c = T(1) / T(xhat.cols());
                  for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
                    const T m1 = dxhat.row(i).sum() * inv_c;
                    const T m2 = dxhat.row(i).dot(xhat.row(i)) * inv_c;
                    dx.row(i).array() += inv_std(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
                  }
                });
}

// ---- Attention -------------------------------------------------------------

/// Multi-head scaled dot-product attention on already-projected inputs.
/// q: [nq, d], k: [nk, d], v: [nk, d]; d must divide by `heads`.
template <typename T>
Var attention(Tape<T>& t, Var q, Var k, Var v, int heads) {
  const Matrix<T>& Q = t.value(q);
  const Matrix<T>& K = t.value(k);
  const Matrix<T>& V = t.value(v);
  detail::check(Q.cols() == K.cols() && K.cols() == V.cols() && K.rows() == V.rows(), "attention: shape mismatch");
  detail::check(heads >= 1 && Q.cols() % heads == 0, "attention: width not divisible by head count");
  const Eigen::Index dh = Q.cols() / heads;
  const T s = T(1) / std::sqrt(T(dh));
  std::vector<Matrix<T>> probs(static_cast<std::size_t>(heads));
  Matrix<T> out(Q.rows(), Q.cols());
  for (int h = 0; h < heads; ++h) {
    Matrix<T>& P = probs[static_cast<std::size_t>(h)];
    P.noalias() = Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose();
    P *= s;
    for (Eigen::Index i = 0; i < P.rows(); ++i) {
      const T m = P.row(i).maxCoeff();
      P.row(i) = (P.row(i).array() - m).exp();
      P.row(i) /= P.row(i).sum();
    }
    out.middleCols(h * dh, dh).noalias() = P * V.middleCols(h * dh, dh);
  }
  return t.push(std::move(out), {q, k, v},
                [q, k, v, heads, dh, s, probs = std::move(probs)](Tape<T>& t, const Matrix<T>& g) {
                  const Matrix<T>& Q = t.value(q);
                  const Matrix<T>& K = t.value(k);
                  const Matrix<T>& V = t.value(v);
                  Matrix<T> dP, dS;
                  for (int h = 0; h < heads; ++h) {
                    const Matrix<T>& P = probs[static_cast<std::size_t>(h)];
                    const auto gh = g.middleCols(h * dh, dh);
                    if (t.requires_grad(v)) t.grad_ref(v).middleCols(h * dh, dh).noalias() += P.transpose() * gh;
                    if (!t.requires_grad(q) && !t.requires_grad(k)) continue;
                    dP.noalias() = gh * V.middleCols(h * dh, dh).transpose();
                    // softmax backward: dS = P * (dP - rowsum(dP * P))
                    const Eigen::Matrix<T, Eigen::Dynamic, 1> rs = dP.cwiseProduct(P).rowwise().sum();
                    dS = P.cwiseProduct((dP.colwise() - rs)) * s;
                    if (t.requires_grad(q)) t.grad_ref(q).middleCols(h * dh, dh).noalias() += dS * K.middleCols(h * dh, dh);
                    if (t.requires_grad(k)) {
                      t.grad_ref(k).middleCols(h * dh, dh).noalias() += dS.transpose() * Q.middleCols(h * dh, dh);
                    }
                  }
                });
}

// ---- Convolutions ----------------------------------------------------------

struct ConvGeometry {
  int height = 0;
  int width = 0;
  int kernel = 1;
  int stride = 1;
  int pad = 0;
  int out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  int out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
};

namespace detail {

template <typename T>
Matrix<T> im2col(const Matrix<T>& x, const ConvGeometry& g) {
  const Eigen::Index cin = x.cols();
  const int ho = g.out_height();
  const int wo = g.out_width();
  Matrix<T> cols = Matrix<T>::Zero(static_cast<Eigen::Index>(ho) * wo, g.kernel * g.kernel * cin);
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const Eigen::Index r = static_cast<Eigen::Index>(oy) * wo + ox;
      for (int ky = 0; ky < g.kernel; ++ky) {
        const int iy = oy * g.stride - g.pad + ky;
        if (iy < 0 || iy >= g.height) continue;
        for (int kx = 0; kx < g.kernel; ++kx) {
          const int ix = ox * g.stride - g.pad + kx;
          if (ix < 0 || ix >= g.width) continue;
          cols.row(r).segment((ky * g.kernel + kx) * cin, cin) = x.row(static_cast<Eigen::Index>(iy) * g.width + ix);
        }
      }
    }
  }
  return cols;
}

template <typename T>
void col2im_add(const Matrix<T>& cols, const ConvGeometry& g, Matrix<T>& dx) {
  const Eigen::Index cin = dx.cols();
  const int ho = g.out_height();
  const int wo = g.out_width();
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const Eigen::Index r = static_cast<Eigen::Index>(oy) * wo + ox;
      for (int ky = 0; ky < g.kernel; ++ky) {
        const int iy = oy * g.stride - g.pad + ky;
        if (iy < 0 || iy >= g.height) continue;
        for (int kx = 0; kx < g.kernel; ++kx) {
          const int ix = ox * g.stride - g.pad + kx;
          if (ix < 0 || ix >= g.width) continue;
          dx.row(static_cast<Eigen::Index>(iy) * g.width + ix) += cols.row(r).segment((ky * g.kernel + kx) * cin, cin);
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D convolution. x: [H*W, Cin]; w: [k*k*Cin, Cout] with row index
/// (ky*k + kx)*Cin + ci; b: [1, Cout] or invalid. Output [Ho*Wo, Cout].
template <typename T>
Var conv2d(Tape<T>& t, Var x, const ConvGeometry& geo, Var w, Var b) {
  const Matrix<T>& in = t.value(x);
  detail::check(in.rows() == static_cast<Eigen::Index>(geo.height) * geo.width, "conv2d: input rows != H*W");
  detail::check(t.value(w).rows() == geo.kernel * geo.kernel * in.cols(), "conv2d: weight rows != k*k*Cin");
  if (geo.kernel == 1 && geo.stride == 1 && geo.pad == 0) return linear(t, x, w, b);
  Var cols = t.push(detail::im2col(in, geo), {x}, [x, geo](Tape<T>& t, const Matrix<T>& g) {
    detail::col2im_add(g, geo, t.grad_ref(x));
  });
  return linear(t, cols, w, b);
}

/// Transposed 2x2 convolution with stride 2 (exact 2x upsampling).
/// x: [H*W, Cin]; w: [Cin, 4*Cout] with column (ky*2 + kx)*Cout + co; b: [1, Cout].
template <typename T>
Var conv_transpose2x2(Tape<T>& t, Var x, int height, int width, Var w, Var b) {
  const Matrix<T>& in = t.value(x);
  detail::check(in.rows() == static_cast<Eigen::Index>(height) * width, "conv_transpose2x2: input rows != H*W");
  detail::check(t.value(w).rows() == in.cols() && t.value(w).cols() % 4 == 0, "conv_transpose2x2: bad weight shape");
  const Eigen::Index cout = t.value(w).cols() / 4;
  detail::check(t.value(b).rows() == 1 && t.value(b).cols() == cout, "conv_transpose2x2: bad bias shape");
  const Matrix<T> full = in * t.value(w);
  const int wo = width * 2;
  Matrix<T> out(static_cast<Eigen::Index>(height) * 2 * wo, cout);
  for (int y = 0; y < height; ++y) {
    for (int xx = 0; xx < width; ++xx) {
      const Eigen::Index r = static_cast<Eigen::Index>(y) * width + xx;
      for (int ky = 0; ky < 2; ++ky) {
        for (int kx = 0; kx < 2; ++kx) {
          out.row(static_cast<Eigen::Index>(2 * y + ky) * wo + 2 * xx + kx) =
              full.row(r).segment((ky * 2 + kx) * cout, cout) + t.value(b).row(0);
        }
      }
    }
  }
  return t.push(std::move(out), {x, w, b}, [x, w, b, height, width, cout](Tape<T>& t, const Matrix<T>& g) {
    const int wo = width * 2;
    Matrix<T> gathered(static_cast<Eigen::Index>(height) * width, 4 * cout);
    for (int y = 0; y < height; ++y) {
      for (int xx = 0; xx < width; ++xx) {
        const Eigen::Index r = static_cast<Eigen::Index>(y) * width + xx;
        for (int ky = 0; ky < 2; ++ky) {
          for (int kx = 0; kx < 2; ++kx) {
            gathered.row(r).segment((ky * 2 + kx) * cout, cout) =
                g.row(static_cast<Eigen::Index>(2 * y + ky) * wo + 2 * xx + kx);
          }
        }
      }
    }
    if (t.requires_grad(x)) t.grad_ref(x).noalias() += gathered * t.value(w).transpose();
    if (t.requires_grad(w)) t.grad_ref(w).noalias() += t.value(x).transpose() * gathered;
    if (t.requires_grad(b)) t.grad_ref(b) += g.colwise().sum();
  });
}

/// 2x2 max pooling with stride 2; H and W must be even.
template <typename T>
Var max_pool2x2(Tape<T>& t, Var x, int height, int width) {
  const Matrix<T>& in = t.value(x);
  detail::check(height % 2 == 0 && width % 2 == 0, "max_pool2x2: odd spatial size");
  detail::check(in.rows() == static_cast<Eigen::Index>(height) * width, "max_pool2x2: input rows != H*W");
  const int ho = height / 2, wo = width / 2;
  const Eigen::Index c = in.cols();
  Matrix<T> out(static_cast<Eigen::Index>(ho) * wo, c);
  std::vector<Eigen::Index> argmax(static_cast<std::size_t>(out.size()));
  for (int y = 0; y < ho; ++y) {
    for (int xx = 0; xx < wo; ++xx) {
      const Eigen::Index r = static_cast<Eigen::Index>(y) * wo + xx;
      for (Eigen::Index ch = 0; ch < c; ++ch) {
        Eigen::Index best = static_cast<Eigen::Index>(2 * y) * width + 2 * xx;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const Eigen::Index src = static_cast<Eigen::Index>(2 * y + dy) * width + 2 * xx + dx;
            if (in(src, ch) > in(best, ch)) best = src;
          }
        }
        out(r, ch) = in(best, ch);
        argmax[static_cast<std::size_t>(r * c + ch)] = best;
      }
    }
  }
  return t.push(std::move(out), {x}, [x, c, argmax = std::move(argmax)](Tape<T>& t, const Matrix<T>& g) {
    auto& dx = t.grad_ref(x);
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      for (Eigen::Index ch = 0; ch < c; ++ch) dx(argmax[static_cast<std::size_t>(r * c + ch)], ch) += g(r, ch);
    }
  });
}

// ---- Shape -----------------------------------------------------------------

template <typename T>
Var concat_cols(Tape<T>& t, Var a, Var b) {
  const Matrix<T>& A = t.value(a);
  const Matrix<T>& B = t.value(b);
  detail::check(A.rows() == B.rows(), "concat_cols: row counts differ");
  Matrix<T> out(A.rows(), A.cols() + B.cols());
  out << A, B;
  const Eigen::Index ca = A.cols(), cb = B.cols();
  return t.push(std::move(out), {a, b}, [a, b, ca, cb](Tape<T>& t, const Matrix<T>& g) {
    if (t.requires_grad(a)) t.grad_ref(a) += g.leftCols(ca);
    if (t.requires_grad(b)) t.grad_ref(b) += g.rightCols(cb);
  });
}

template <typename T>
Var concat_rows(Tape<T>& t, Var a, Var b) {
  const Matrix<T>& A = t.value(a);
  const Matrix<T>& B = t.value(b);
  detail::check(A.cols() == B.cols(), "concat_rows: column counts differ");
  Matrix<T> out(A.rows() + B.rows(), A.cols());
  out << A, B;
  const Eigen::Index ra = A.rows(), rb = B.rows();
  return t.push(std::move(out), {a, b}, [a, b, ra, rb](Tape<T>& t, const Matrix<T>& g) {
    if (t.requires_grad(a)) t.grad_ref(a) += g.topRows(ra);
    if (t.requires_grad(b)) t.grad_ref(b) += g.bottomRows(rb);
  });
}

/// Column means as a [1, cols] row.
template <typename T>
Var mean_rows(Tape<T>& t, Var a) {
  const Eigen::Index n = t.value(a).rows();
  detail::check(n > 0, "mean_rows: empty input");
  Matrix<T> out = t.value(a).colwise().mean();
  return t.push(std::move(out), {a}, [a, n](Tape<T>& t, const Matrix<T>& g) {
    t.grad_ref(a).rowwise() += g.row(0) / static_cast<T>(n);
  });
}

template <typename T>
Var slice_rows(Tape<T>& t, Var a, Eigen::Index start, Eigen::Index count) {
  detail::check(start >= 0 && start + count <= t.value(a).rows(), "slice_rows: out of range");
  Matrix<T> out = t.value(a).middleRows(start, count);
  return t.push(std::move(out), {a}, [a, start, count](Tape<T>& t, const Matrix<T>& g) {
    t.grad_ref(a).middleRows(start, count) += g;
  });
}

template <typename T>
Var sum(Tape<T>& t, Var a) {
  Matrix<T> out(1, 1);
  out(0, 0) = t.value(a).sum();
  return t.push(std::move(out), {a}, [a](Tape<T>& t, const Matrix<T>& g) { t.grad_ref(a).array() += g(0, 0); });
}

// ---- Losses ----------------------------------------------------------------

/// Mean binary cross-entropy with logits against a {0,1} target of the same shape.
template <typename T>
Var bce_with_logits(Tape<T>& t, Var logits, const Matrix<T>& target) {
  const Matrix<T>& x = t.value(logits);
  detail::check(x.rows() == target.rows() && x.cols() == target.cols(), "bce_with_logits: shape mismatch");
  const T n = T(x.size());
  T total = 0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const T v = x.data()[i];
    total += std::max(v, T(0)) - v * target.data()[i] + std::log1p(std::exp(-std::abs(v)));
  }
  Matrix<T> out(1, 1);
  out(0, 0) = total / n;
  return t.push(std::move(out), {logits}, [logits, target, n](Tape<T>& t, const Matrix<T>& g) {
    const Matrix<T>& x = t.value(logits);
    Matrix<T> sig = x.unaryExpr([](T v) { return T(1) / (T(1) + std::exp(-v)); });
    t.grad_ref(logits) += (sig - target) * (g(0, 0) / n);
  });
}

/// 1 - soft Dice on sigmoid(logits), smoothed by `eps`; lies in [0, 1].
template <typename T>
Var soft_dice_loss(Tape<T>& t, Var logits, const Matrix<T>& target, T eps = T(1)) {
  const Matrix<T>& x = t.value(logits);
  detail::check(x.rows() == target.rows() && x.cols() == target.cols(), "soft_dice_loss: shape mismatch");
  Matrix<T> sig = x.unaryExpr([](T v) { return T(1) / (T(1) + std::exp(-v)); });
  const T inter = sig.cwiseProduct(target).sum();
  const T denom = sig.sum() + target.sum() + eps;
  const T num = T(2) * inter + eps;
  Matrix<T> out(1, 1);
  out(0, 0) = T(1) - num / denom;
  return t.push(std::move(out), {logits},
                [logits, target, sig = std::move(sig), num, denom](Tape<T>& t, const Matrix<T>& g) {
                  // d/ds (1 - num/denom) = -(2 t denom - num) / denom^2
                  Matrix<T> ds = -(T(2) * target.array() * denom - num) / (denom * denom);
                  t.grad_ref(logits) += (ds.array() * sig.array() * (T(1) - sig.array()) * g(0, 0)).matrix();
                });
}

/// Mean softmax cross-entropy; logits [n, K], labels in [0, K).
template <typename T>
Var softmax_cross_entropy(Tape<T>& t, Var logits, const std::vector<int>& labels) {
  const Matrix<T>& x = t.value(logits);
  detail::check(static_cast<Eigen::Index>(labels.size()) == x.rows(), "softmax_cross_entropy: label count mismatch");
  Matrix<T> probs(x.rows(), x.cols());
  T total = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    detail::check(y >= 0 && y < x.cols(), "softmax_cross_entropy: label out of range");
    const T m = x.row(i).maxCoeff();
    probs.row(i) = (x.row(i).array() - m).exp();
    const T z = probs.row(i).sum();
    probs.row(i) /= z;
    total += -(x(i, y) - m - std::log(z));
  }
  const T n = T(x.rows());
  Matrix<T> out(1, 1);
  out(0, 0) = total / n;
  return t.push(std::move(out), {logits}, [logits, labels, probs = std::move(probs), n](Tape<T>& t, const Matrix<T>& g) {
    Matrix<T> d = probs;
    for (Eigen::Index i = 0; i < d.rows(); ++i) d(i, labels[static_cast<std::size_t>(i)]) -= T(1);
    t.grad_ref(logits) += d * (g(0, 0) / n);
  });
}

}  // namespace smol::nn
