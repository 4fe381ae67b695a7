#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "rgbt/autograd.hpp"

namespace rgbt {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

namespace ops {

// ---------- elementwise ----------

inline Var add(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value))
    throw std::invalid_argument("add: shape mismatch " + a->value.shape_str() + " vs " + b->value.shape_str());
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
  return make_op(std::move(out), {a, b}, [a, b](Node& n) {
    accum(a, n.grad);
    accum(b, n.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value)) throw std::invalid_argument("sub: shape mismatch");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
  return make_op(std::move(out), {a, b}, [a, b](Node& n) {
    accum(a, n.grad);
    if (b->requires_grad) {
      Tensor& g = b->g();
      for (int64_t i = 0; i < n.grad.numel(); ++i) g[i] -= n.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value)) throw std::invalid_argument("mul: shape mismatch");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
  return make_op(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      Tensor& g = a->g();
      for (int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      Tensor& g = b->g();
      for (int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i] * a->value[i];
    }
  });
}

inline Var div(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value)) throw std::invalid_argument("div: shape mismatch");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] /= b->value[i];
  return make_op(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      Tensor& g = a->g();
      for (int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i] / b->value[i];
    }
    if (b->requires_grad) {
      Tensor& g = b->g();
      for (int64_t i = 0; i < n.grad.numel(); ++i)
        g[i] -= n.grad[i] * a->value[i] / (b->value[i] * b->value[i]);
    }
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
  return make_op(std::move(out), {a}, [a, s](Node& n) {
    if (a->requires_grad) {
      Tensor& g = a->g();
      for (int64_t i = 0; i < n.grad.numel(); ++i) g[i] += s * n.grad[i];
    }
  });
}

inline Var add_scalar(const Var& a, double s) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += s;
  return make_op(std::move(out), {a}, [a](Node& n) { accum(a, n.grad); });
}

inline Var vmin(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value)) throw std::invalid_argument("vmin: shape mismatch");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::min(a->value[i], b->value[i]);
  return make_op(std::move(out), {a, b}, [a, b](Node& n) {
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      bool pick_a = a->value[i] <= b->value[i];
      if (pick_a && a->requires_grad) a->g()[i] += n.grad[i];
      if (!pick_a && b->requires_grad) b->g()[i] += n.grad[i];
    }
  });
}

inline Var vmax(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value)) throw std::invalid_argument("vmax: shape mismatch");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(a->value[i], b->value[i]);
  return make_op(std::move(out), {a, b}, [a, b](Node& n) {
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      bool pick_a = a->value[i] >= b->value[i];
      if (pick_a && a->requires_grad) a->g()[i] += n.grad[i];
      if (!pick_a && b->requires_grad) b->g()[i] += n.grad[i];
    }
  });
}

inline Var clamp_min(const Var& a, double lo) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(out[i], lo);
  return make_op(std::move(out), {a}, [a, lo](Node& n) {
    if (!a->requires_grad) return;
    Tensor& g = a->g();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      if (a->value[i] > lo) g[i] += n.grad[i];
  });
}

inline Var atan_of(const Var& a) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::atan(out[i]);
  return make_op(std::move(out), {a}, [a](Node& n) {
    if (!a->requires_grad) return;
    Tensor& g = a->g();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      g[i] += n.grad[i] / (1.0 + a->value[i] * a->value[i]);
  });
}

inline Var square(const Var& a) { return mul(a, a); }

inline Var sqrt_of(const Var& a) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(out[i]);
  return make_op(std::move(out), {a}, [a](Node& n) {
    if (!a->requires_grad) return;
    Tensor& g = a->g();
    for (int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i] * 0.5 / std::sqrt(a->value[i]);
  });
}

inline Var sigmoid(const Var& a) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
  Tensor saved = out;
  return make_op(std::move(out), {a}, [a, saved](Node& n) {
    if (!a->requires_grad) return;
    Tensor& g = a->g();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      g[i] += n.grad[i] * saved[i] * (1.0 - saved[i]);
  });
}

inline Var silu(const Var& a) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) {
    double s = 1.0 / (1.0 + std::exp(-out[i]));
    out[i] = out[i] * s;
  }
  return make_op(std::move(out), {a}, [a](Node& n) {
    if (!a->requires_grad) return;
    Tensor& g = a->g();
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      double x = a->value[i];
      double s = 1.0 / (1.0 + std::exp(-x));
      g[i] += n.grad[i] * (s + x * s * (1.0 - s));
    }
  });
}

// ---------- reductions / reshapes ----------

inline Var sum_all(const Var& a) {
  double s = 0.0;
  for (int64_t i = 0; i < a->value.numel(); ++i) s += a->value[i];
  return make_op(Tensor::from({1}, {s}), {a}, [a](Node& n) {
    if (!a->requires_grad) return;
    Tensor& g = a->g();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[0];
  });
}

inline Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a->value.numel())); }

inline Var reshape(const Var& a, std::vector<int> shape) {
  if (Tensor::count(shape) != a->value.numel()) throw std::invalid_argument("reshape: numel mismatch");
  Tensor out = Tensor::from(std::move(shape), a->value.v);
  return make_op(std::move(out), {a}, [a](Node& n) {
    if (!a->requires_grad) return;
    Tensor& g = a->g();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
  });
}

// column j of a [M, K] matrix -> [M]
inline Var col(const Var& a, int j) {
  int m = a->value.dim(0), k = a->value.dim(1);
  Tensor out({m});
  for (int r = 0; r < m; ++r) out[r] = a->value.at2(r, j);
  return make_op(std::move(out), {a}, [a, j, k](Node& n) {
    if (!a->requires_grad) return;
    Tensor& g = a->g();
    int m = n.grad.dim(0);
    for (int r = 0; r < m; ++r) g[static_cast<int64_t>(r) * k + j] += n.grad[r];
  });
}

// stack [M] columns into [M, K]
inline Var stack_cols(const std::vector<Var>& cols) {
  int k = static_cast<int>(cols.size());
  int m = cols[0]->value.dim(0);
  Tensor out({m, k});
  for (int j = 0; j < k; ++j)
    for (int r = 0; r < m; ++r) out.at2(r, j) = cols[j]->value[r];
  std::vector<Var> parents(cols.begin(), cols.end());
  return make_op(std::move(out), parents, [cols, m, k](Node& n) {
    for (int j = 0; j < k; ++j) {
      if (!cols[j]->requires_grad) continue;
      Tensor& g = cols[j]->g();
      for (int r = 0; r < m; ++r) g[r] += n.grad.at2(r, j);
    }
  });
}

// ---------- linear algebra ----------

inline Var matmul(const Var& a, const Var& b) {
  int m = a->value.dim(0), k = a->value.dim(1), k2 = b->value.dim(0), n_ = b->value.dim(1);
  if (k != k2) throw std::invalid_argument("matmul: inner dim mismatch");
  Tensor out({m, n_});
  CMapM A(a->value.v.data(), m, k), B(b->value.v.data(), k, n_);
  MapM O(out.v.data(), m, n_);
  O.noalias() = A * B;
  return make_op(std::move(out), {a, b}, [a, b, m, k, n_](Node& n) {
    CMapM G(n.grad.v.data(), m, n_);
    if (a->requires_grad) {
      CMapM B(b->value.v.data(), k, n_);
      MapM GA(a->g().v.data(), m, k);
      GA.noalias() += G * B.transpose();
    }
    if (b->requires_grad) {
      CMapM A(a->value.v.data(), m, k);
      MapM GB(b->g().v.data(), k, n_);
      GB.noalias() += A.transpose() * G;
    }
  });
}

// ---------- conv / pooling / spatial ----------

namespace detail {

inline void im2col(const Tensor& x, int n, int k, int stride, int pad, int ho, int wo,
                   std::vector<double>& col) {
  int c = x.shape[1], h = x.shape[2], w = x.shape[3];
  // col layout: [c*k*k, ho*wo]
  int64_t idx = 0;
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx)
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * stride + ky - pad;
          for (int ox = 0; ox < wo; ++ox, ++idx) {
            int ix = ox * stride + kx - pad;
            col[static_cast<size_t>(idx)] =
                (iy >= 0 && iy < h && ix >= 0 && ix < w) ? x.at4(n, ci, iy, ix) : 0.0;
          }
        }
}

inline void col2im_accum(const std::vector<double>& col, int n, int c, int h, int w, int k,
                         int stride, int pad, int ho, int wo, Tensor& gx) {
  int64_t idx = 0;
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx)
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * stride + ky - pad;
          for (int ox = 0; ox < wo; ++ox, ++idx) {
            int ix = ox * stride + kx - pad;
            if (iy >= 0 && iy < h && ix >= 0 && ix < w)
              gx.at4(n, ci, iy, ix) += col[static_cast<size_t>(idx)];
          }
        }
}

}  // namespace detail

// x: [N, Cin, H, W], w: [Cout, Cin, k, k] -> [N, Cout, Ho, Wo]
inline Var conv2d(const Var& x, const Var& w, int stride, int pad) {
  const Tensor& xv = x->value;
  const Tensor& wv = w->value;
  if (xv.ndim() != 4 || wv.ndim() != 4) throw std::invalid_argument("conv2d: rank");
  int n = xv.shape[0], cin = xv.shape[1], h = xv.shape[2], ww = xv.shape[3];
  int cout = wv.shape[0], k = wv.shape[2];
  if (wv.shape[1] != cin)
    throw std::invalid_argument("conv2d: input has " + std::to_string(cin) +
                                " channels, kernel expects " + std::to_string(wv.shape[1]));
  int ho = (h + 2 * pad - k) / stride + 1;
  int wo = (ww + 2 * pad - k) / stride + 1;
  Tensor out({n, cout, ho, wo});
  int64_t ckk = static_cast<int64_t>(cin) * k * k;
  int64_t hw = static_cast<int64_t>(ho) * wo;
  std::vector<double> colbuf(static_cast<size_t>(ckk * hw));
  CMapM W(wv.v.data(), cout, ckk);
  for (int i = 0; i < n; ++i) {
    detail::im2col(xv, i, k, stride, pad, ho, wo, colbuf);
    CMapM C(colbuf.data(), ckk, hw);
    MapM O(out.v.data() + static_cast<int64_t>(i) * cout * hw, cout, hw);
    O.noalias() = W * C;
  }
  return make_op(std::move(out), {x, w},
                 [x, w, stride, pad, n, cin, h, ww, cout, k, ho, wo, ckk, hw](Node& nn) {
    std::vector<double> colbuf(static_cast<size_t>(ckk * hw));
    std::vector<double> gcol(static_cast<size_t>(ckk * hw));
    for (int i = 0; i < n; ++i) {
      CMapM G(nn.grad.v.data() + static_cast<int64_t>(i) * cout * hw, cout, hw);
      if (w->requires_grad) {
        detail::im2col(x->value, i, k, stride, pad, ho, wo, colbuf);
        CMapM C(colbuf.data(), ckk, hw);
        MapM GW(w->g().v.data(), cout, ckk);
        GW.noalias() += G * C.transpose();
      }
      if (x->requires_grad) {
        CMapM W(w->value.v.data(), cout, ckk);
        MapM GC(gcol.data(), ckk, hw);
        GC.noalias() = W.transpose() * G;
        detail::col2im_accum(gcol, i, cin, h, ww, k, stride, pad, ho, wo, x->g());
      }
    }
  });
}

// bias broadcast over channel axis: x [N,C,H,W] + b [C]
inline Var add_bias(const Var& x, const Var& b) {
  int c = x->value.shape[1];
  if (b->value.numel() != c) throw std::invalid_argument("add_bias: channel mismatch");
  Tensor out = x->value;
  int n = out.shape[0], h = out.shape[2], w = out.shape[3];
  for (int i = 0; i < n; ++i)
    for (int ci = 0; ci < c; ++ci) {
      double bv = b->value[ci];
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) out.at4(i, ci, y, xx) += bv;
    }
  return make_op(std::move(out), {x, b}, [x, b, n, c, h, w](Node& nn) {
    accum(x, nn.grad);
    if (b->requires_grad) {
      Tensor& g = b->g();
      for (int i = 0; i < n; ++i)
        for (int ci = 0; ci < c; ++ci) {
          double s = 0.0;
          for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) s += nn.grad.at4(i, ci, y, xx);
          g[ci] += s;
        }
    }
  });
}

inline Var maxpool2d(const Var& x, int k, int stride, int pad) {
  const Tensor& xv = x->value;
  int n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3];
  int ho = (h + 2 * pad - k) / stride + 1;
  int wo = (w + 2 * pad - k) / stride + 1;
  Tensor out({n, c, ho, wo});
  auto argmax = std::make_shared<std::vector<int64_t>>(out.v.size());
  int64_t oi = 0;
  for (int i = 0; i < n; ++i)
    for (int ci = 0; ci < c; ++ci)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox, ++oi) {
          double best = -std::numeric_limits<double>::infinity();
          int64_t bidx = -1;
          for (int ky = 0; ky < k; ++ky) {
            int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < k; ++kx) {
              int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= w) continue;
              double v = xv.at4(i, ci, iy, ix);
              if (v > best) {
                best = v;
                bidx = ((static_cast<int64_t>(i) * c + ci) * h + iy) * w + ix;
              }
            }
          }
          out[oi] = best;
          (*argmax)[static_cast<size_t>(oi)] = bidx;
        }
  return make_op(std::move(out), {x}, [x, argmax](Node& nn) {
    if (!x->requires_grad) return;
    Tensor& g = x->g();
    for (int64_t i = 0; i < nn.grad.numel(); ++i) {
      int64_t src = (*argmax)[static_cast<size_t>(i)];
      if (src >= 0) g[src] += nn.grad[i];
    }
  });
}

inline Var upsample2x(const Var& x) {
  const Tensor& xv = x->value;
  int n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3];
  Tensor out({n, c, h * 2, w * 2});
  for (int i = 0; i < n; ++i)
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx) out.at4(i, ci, y, xx) = xv.at4(i, ci, y / 2, xx / 2);
  return make_op(std::move(out), {x}, [x, n, c, h, w](Node& nn) {
    if (!x->requires_grad) return;
    Tensor& g = x->g();
    for (int i = 0; i < n; ++i)
      for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < 2 * h; ++y)
          for (int xx = 0; xx < 2 * w; ++xx)
            g[((static_cast<int64_t>(i) * c + ci) * h + y / 2) * w + xx / 2] += nn.grad.at4(i, ci, y, xx);
  });
}

inline Var concat_channels(const std::vector<Var>& xs) {
  int n = xs[0]->value.shape[0], h = xs[0]->value.shape[2], w = xs[0]->value.shape[3];
  int ctot = 0;
  for (const auto& x : xs) {
    if (x->value.shape[0] != n || x->value.shape[2] != h || x->value.shape[3] != w)
      throw std::invalid_argument("concat_channels: spatial/batch mismatch");
    ctot += x->value.shape[1];
  }
  Tensor out({n, ctot, h, w});
  int coff = 0;
  for (const auto& x : xs) {
    int c = x->value.shape[1];
    for (int i = 0; i < n; ++i)
      for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) out.at4(i, coff + ci, y, xx) = x->value.at4(i, ci, y, xx);
    coff += c;
  }
  std::vector<Var> parents(xs.begin(), xs.end());
  return make_op(std::move(out), parents, [xs, n, h, w](Node& nn) {
    int coff = 0;
    for (const auto& x : xs) {
      int c = x->value.shape[1];
      if (x->requires_grad) {
        Tensor& g = x->g();
        for (int i = 0; i < n; ++i)
          for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < h; ++y)
              for (int xx = 0; xx < w; ++xx) g[((static_cast<int64_t>(i) * c + ci) * h + y) * w + xx] += nn.grad.at4(i, coff + ci, y, xx);
      }
      coff += c;
    }
  });
}

// channel slice [lo, hi)
inline Var slice_channels(const Var& x, int lo, int hi) {
  const Tensor& xv = x->value;
  int n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3];
  if (lo < 0 || hi > c || lo >= hi) throw std::invalid_argument("slice_channels: bad range");
  int cs = hi - lo;
  Tensor out({n, cs, h, w});
  for (int i = 0; i < n; ++i)
    for (int ci = 0; ci < cs; ++ci)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) out.at4(i, ci, y, xx) = xv.at4(i, lo + ci, y, xx);
  return make_op(std::move(out), {x}, [x, lo, cs, n, h, w](Node& nn) {
    if (!x->requires_grad) return;
    Tensor& g = x->g();
    int c = x->value.shape[1];
    for (int i = 0; i < n; ++i)
      for (int ci = 0; ci < cs; ++ci)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx)
            g[((static_cast<int64_t>(i) * c + lo + ci) * h + y) * w + xx] += nn.grad.at4(i, ci, y, xx);
  });
}

// ---------- normalization ----------

// Batch normalization over (N, H, W) per channel. In stats mode the batch
// statistics are used (and optionally tracked into the running buffers);
// otherwise the running buffers are used as fixed affine constants.
inline Var batchnorm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
                     Tensor& running_var, bool use_batch_stats, bool update_stats,
                     double momentum = 0.1, double eps = 1e-5) {
  const Tensor& xv = x->value;
  int n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3];
  int64_t m = static_cast<int64_t>(n) * h * w;
  Tensor mean({c}), var({c});
  if (use_batch_stats) {
    for (int ci = 0; ci < c; ++ci) {
      double s = 0.0;
      for (int i = 0; i < n; ++i)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) s += xv.at4(i, ci, y, xx);
      mean[ci] = s / static_cast<double>(m);
      double s2 = 0.0;
      for (int i = 0; i < n; ++i)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) {
            double d = xv.at4(i, ci, y, xx) - mean[ci];
            s2 += d * d;
          }
      var[ci] = s2 / static_cast<double>(m);
    }
    if (update_stats) {
      for (int ci = 0; ci < c; ++ci) {
        running_mean[ci] = (1.0 - momentum) * running_mean[ci] + momentum * mean[ci];
        // unbiased variance for the running estimate
        double ub = m > 1 ? var[ci] * static_cast<double>(m) / static_cast<double>(m - 1) : var[ci];
        running_var[ci] = (1.0 - momentum) * running_var[ci] + momentum * ub;
      }
    }
  } else {
    mean = running_mean;
    var = running_var;
  }
  Tensor xhat({n, c, h, w});
  Tensor out({n, c, h, w});
  std::vector<double> istd(static_cast<size_t>(c));
  for (int ci = 0; ci < c; ++ci) istd[static_cast<size_t>(ci)] = 1.0 / std::sqrt(var[ci] + eps);
  for (int i = 0; i < n; ++i)
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          double xh = (xv.at4(i, ci, y, xx) - mean[ci]) * istd[static_cast<size_t>(ci)];
          xhat.at4(i, ci, y, xx) = xh;
          out.at4(i, ci, y, xx) = gamma->value[ci] * xh + beta->value[ci];
        }
  auto xhat_p = std::make_shared<Tensor>(std::move(xhat));
  auto istd_p = std::make_shared<std::vector<double>>(std::move(istd));
  return make_op(std::move(out), {x, gamma, beta},
                 [x, gamma, beta, xhat_p, istd_p, use_batch_stats, n, c, h, w, m](Node& nn) {
    const Tensor& xh = *xhat_p;
    // per-channel reductions of grad and grad*xhat
    std::vector<double> sg(static_cast<size_t>(c), 0.0), sgx(static_cast<size_t>(c), 0.0);
    for (int i = 0; i < n; ++i)
      for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) {
            double gv = nn.grad.at4(i, ci, y, xx);
            sg[static_cast<size_t>(ci)] += gv;
            sgx[static_cast<size_t>(ci)] += gv * xh.at4(i, ci, y, xx);
          }
    if (gamma->requires_grad)
      for (int ci = 0; ci < c; ++ci) gamma->g()[ci] += sgx[static_cast<size_t>(ci)];
    if (beta->requires_grad)
      for (int ci = 0; ci < c; ++ci) beta->g()[ci] += sg[static_cast<size_t>(ci)];
    if (x->requires_grad) {
      Tensor& g = x->g();
      double inv_m = 1.0 / static_cast<double>(m);
      for (int i = 0; i < n; ++i)
        for (int ci = 0; ci < c; ++ci) {
          double ga = gamma->value[ci] * (*istd_p)[static_cast<size_t>(ci)];
          for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
              double gv = nn.grad.at4(i, ci, y, xx);
              double d;
              if (use_batch_stats) {
                d = ga * (gv - inv_m * sg[static_cast<size_t>(ci)] -
                          inv_m * sgx[static_cast<size_t>(ci)] * xh.at4(i, ci, y, xx));
              } else {
                d = ga * gv;
              }
              g[((static_cast<int64_t>(i) * c + ci) * h + y) * w + xx] += d;
            }
        }
    }
  });
}

// ---------- composite heads ----------

// Numerically stable mean BCE-with-logits over all elements.
inline Var bce_with_logits_mean(const Var& z, const Tensor& target) {
  if (!z->value.same_shape(target)) throw std::invalid_argument("bce: target shape mismatch");
  int64_t m = z->value.numel();
  double acc = 0.0;
  for (int64_t i = 0; i < m; ++i) {
    double zz = z->value[i], t = target[i];
    acc += std::max(zz, 0.0) - zz * t + std::log1p(std::exp(-std::abs(zz)));
  }
  Tensor out = Tensor::from({1}, {acc / static_cast<double>(m)});
  auto tgt = std::make_shared<Tensor>(target);
  return make_op(std::move(out), {z}, [z, tgt, m](Node& nn) {
    if (!z->requires_grad) return;
    Tensor& g = z->g();
    double s = nn.grad[0] / static_cast<double>(m);
    for (int64_t i = 0; i < m; ++i) {
      double p = 1.0 / (1.0 + std::exp(-z->value[i]));
      g[i] += s * (p - (*tgt)[i]);
    }
  });
}

// Distribution focal loss over positive anchors.
// logits: [M, 4, R]; targets: [M, 4] with values in [0, R-1].
// Mean over M*4 of -[(ceil(y)-y) log S_floor + (y-floor(y)) log S_ceil].
inline Var dfl_mean(const Var& logits, const Tensor& targets) {
  int mm = logits->value.shape[0], r = logits->value.shape[2];
  int64_t cnt = static_cast<int64_t>(mm) * 4;
  Tensor sm({mm, 4, r});  // softmax, saved for backward
  double acc = 0.0;
  for (int i = 0; i < mm; ++i)
    for (int p = 0; p < 4; ++p) {
      const double* zrow = logits->value.v.data() + (static_cast<int64_t>(i) * 4 + p) * r;
      double* srow = sm.v.data() + (static_cast<int64_t>(i) * 4 + p) * r;
      double zmax = zrow[0];
      for (int j = 1; j < r; ++j) zmax = std::max(zmax, zrow[j]);
      double zs = 0.0;
      for (int j = 0; j < r; ++j) zs += std::exp(zrow[j] - zmax);
      double logz = std::log(zs) + zmax;
      for (int j = 0; j < r; ++j) srow[j] = std::exp(zrow[j] - logz);
      double y = targets.v[static_cast<size_t>(i) * 4 + p];
      int yl = static_cast<int>(std::floor(y));
      int yr = std::min(yl + 1, r - 1);
      double wl = static_cast<double>(yl + 1) - y;  // weight on left bin
      double wr = y - static_cast<double>(yl);
      if (yl == r - 1) { wl = 1.0; wr = 0.0; yr = yl; }
      acc -= wl * (zrow[yl] - logz) + wr * (zrow[yr] - logz);
    }
  Tensor out = Tensor::from({1}, {cnt > 0 ? acc / static_cast<double>(cnt) : 0.0});
  auto smp = std::make_shared<Tensor>(std::move(sm));
  auto tg = std::make_shared<Tensor>(targets);
  return make_op(std::move(out), {logits}, [logits, smp, tg, mm, r, cnt](Node& nn) {
    if (!logits->requires_grad || cnt == 0) return;
    Tensor& g = logits->g();
    double s = nn.grad[0] / static_cast<double>(cnt);
    for (int i = 0; i < mm; ++i)
      for (int p = 0; p < 4; ++p) {
        const double* srow = smp->v.data() + (static_cast<int64_t>(i) * 4 + p) * r;
        double* grow = g.v.data() + (static_cast<int64_t>(i) * 4 + p) * r;
        double y = tg->v[static_cast<size_t>(i) * 4 + p];
        int yl = static_cast<int>(std::floor(y));
        int yr = std::min(yl + 1, r - 1);
        double wl = static_cast<double>(yl + 1) - y;
        double wr = y - static_cast<double>(yl);
        if (yl == r - 1) { wl = 1.0; wr = 0.0; yr = yl; }
        // d/dz of cross-entropy with target distribution {yl: wl, yr: wr}
        for (int j = 0; j < r; ++j) {
          double t = (j == yl ? wl : 0.0) + (j == yr ? wr : 0.0);
          grow[j] += s * (srow[j] - t);
        }
      }
  });
}

// Expectation of the discrete distance distribution: logits [M, 4, R] -> [M, 4],
// out[i][p] = sum_j softmax(logits[i][p])_j * j.
inline Var dist_expectation(const Var& logits) {
  int mm = logits->value.shape[0], r = logits->value.shape[2];
  Tensor sm({mm, 4, r});
  Tensor out({mm, 4});
  for (int i = 0; i < mm; ++i)
    for (int p = 0; p < 4; ++p) {
      const double* zrow = logits->value.v.data() + (static_cast<int64_t>(i) * 4 + p) * r;
      double* srow = sm.v.data() + (static_cast<int64_t>(i) * 4 + p) * r;
      double zmax = zrow[0];
      for (int j = 1; j < r; ++j) zmax = std::max(zmax, zrow[j]);
      double zs = 0.0;
      for (int j = 0; j < r; ++j) zs += std::exp(zrow[j] - zmax);
      double e = 0.0;
      for (int j = 0; j < r; ++j) {
        srow[j] = std::exp(zrow[j] - zmax) / zs;
        e += srow[j] * static_cast<double>(j);
      }
      out.at2(i, p) = e;
    }
  auto smp = std::make_shared<Tensor>(std::move(sm));
  return make_op(std::move(out), {logits}, [logits, smp, mm, r](Node& nn) {
    if (!logits->requires_grad) return;
    Tensor& g = logits->g();
    for (int i = 0; i < mm; ++i)
      for (int p = 0; p < 4; ++p) {
        const double* srow = smp->v.data() + (static_cast<int64_t>(i) * 4 + p) * r;
        double* grow = g.v.data() + (static_cast<int64_t>(i) * 4 + p) * r;
        double e = 0.0;
        for (int j = 0; j < r; ++j) e += srow[j] * static_cast<double>(j);
        double gv = nn.grad.at2(i, p);
        for (int j = 0; j < r; ++j) grow[j] += gv * srow[j] * (static_cast<double>(j) - e);
      }
  });
}

// Gather per-anchor rows out of a head map. x: [N, C, H, W]; picks
// (image, y, x) triples and returns [M, C].
struct AnchorIndex {
  int image, y, x;
};

inline Var gather_anchors(const Var& x, const std::vector<AnchorIndex>& idx) {
  int c = x->value.shape[1];
  int m = static_cast<int>(idx.size());
  Tensor out({m, c});
  for (int i = 0; i < m; ++i)
    for (int ci = 0; ci < c; ++ci) out.at2(i, ci) = x->value.at4(idx[static_cast<size_t>(i)].image, ci, idx[static_cast<size_t>(i)].y, idx[static_cast<size_t>(i)].x);
  auto ix = std::make_shared<std::vector<AnchorIndex>>(idx);
  return make_op(std::move(out), {x}, [x, ix, m, c](Node& nn) {
    if (!x->requires_grad) return;
    Tensor& g = x->g();
    int ch = x->value.shape[2], cw = x->value.shape[3];
    for (int i = 0; i < m; ++i) {
      const auto& a = (*ix)[static_cast<size_t>(i)];
      for (int ci = 0; ci < c; ++ci)
        g[((static_cast<int64_t>(a.image) * c + ci) * ch + a.y) * cw + a.x] += nn.grad.at2(i, ci);
    }
  });
}

}  // namespace ops
}  // namespace rgbt
