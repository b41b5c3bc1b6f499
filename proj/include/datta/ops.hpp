#pragma once

// Differentiable ops over Var. Each op computes its value eagerly and records a closure
// that pushes the output gradient into its inputs. Reductions accumulate in double and
// run in a fixed loop order so repeated calls are bit-identical.

#include <cmath>
#include <limits>
#include <string>
#include <tuple>
#include <type_traits>
#include <utility>
#include <vector>

#include "datta/autodiff.hpp"
#include "datta/errors.hpp"
#include "datta/tensor.hpp"

namespace datta {

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

template <typename Scalar>
void check_finite_input(const Tensor<Scalar>& t, const char* op) {
  if (!t.all_finite()) throw NonFiniteError(std::string("non-finite input to ") + op);
}

/// Splits a rank-2 [b,C] or rank-4 [b,C,H,W] shape into (b, C, spatial).
inline std::tuple<Index, Index, Index> channel_layout(const Shape& s, const char* op) {
  if (s.size() == 2) return {s[0], s[1], 1};
  if (s.size() == 4) return {s[0], s[1], s[2] * s[3]};
  throw ShapeError(std::string(op) + " expects rank 2 or 4, got " + shape_string(s));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require(av.rank() == 2 && bv.rank() == 2, "matmul expects rank-2 operands");
  const Index m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  detail::require(bv.dim(0) == k, "matmul inner dimensions differ: " + shape_string(av.shape()) + " x " +
                                      shape_string(bv.shape()));
  Tensor<Scalar> out({m, n});
  out.matrix(m, n).noalias() = av.matrix(m, k) * bv.matrix(k, n);
  return a.tape->record("matmul", {a, b}, std::move(out), [m, k, n](Tape<Scalar>& t, std::size_t self) {
    const auto g = t.grad_at(self).matrix(m, n);
    const std::size_t ia = t.input(self, 0), ib = t.input(self, 1);
    if (auto* da = t.accum(ia)) da->matrix(m, k).noalias() += g * t.value_at(ib).matrix(k, n).transpose();
    if (auto* db = t.accum(ib)) db->matrix(k, n).noalias() += t.value_at(ia).matrix(m, k).transpose() * g;
  });
}

/// x[m,n] + bias[n] broadcast over rows.
template <typename Scalar>
Var<Scalar> add_bias(Var<Scalar> x, Var<Scalar> bias) {
  const auto& xv = x.value();
  detail::require(xv.rank() == 2 && bias.value().rank() == 1 && bias.value().dim(0) == xv.dim(1),
                  "add_bias shape mismatch");
  const Index m = xv.dim(0), n = xv.dim(1);
  Tensor<Scalar> out = xv;
  out.matrix(m, n).rowwise() += bias.value().matrix(1, n).row(0);
  return x.tape->record("add_bias", {x, bias}, std::move(out), [m, n](Tape<Scalar>& t, std::size_t self) {
    const auto& g = t.grad_at(self);
    if (auto* dx = t.accum(t.input(self, 0))) dx->array() += g.array();
    if (auto* db = t.accum(t.input(self, 1))) {
      for (Index j = 0; j < n; ++j) {
        double s = 0.0;
        for (Index i = 0; i < m; ++i) s += g.at(i, j);
        (*db)[j] += static_cast<Scalar>(s);
      }
    }
  });
}

namespace detail {

struct ConvGeometry {
  Index batch, in_c, h, w, out_c, kh, kw, stride, pad, oh, ow;
  Index patch() const { return in_c * kh * kw; }
  Index positions() const { return oh * ow; }
};

/// Unfolds one sample into a [C_in*kH*kW, H'*W'] column matrix (zero padding).
template <typename Scalar>
void im2col(const Scalar* img, const ConvGeometry& g, RowMatrix<Scalar>& cols) {
  cols.setZero(g.patch(), g.positions());
  for (Index c = 0; c < g.in_c; ++c)
    for (Index ki = 0; ki < g.kh; ++ki)
      for (Index kj = 0; kj < g.kw; ++kj) {
        const Index row = (c * g.kh + ki) * g.kw + kj;
        for (Index oy = 0; oy < g.oh; ++oy) {
          const Index iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          for (Index ox = 0; ox < g.ow; ++ox) {
            const Index ix = ox * g.stride - g.pad + kj;
            if (ix < 0 || ix >= g.w) continue;
            cols(row, oy * g.ow + ox) = img[(c * g.h + iy) * g.w + ix];
          }
        }
      }
}

template <typename Scalar>
void col2im_add(const RowMatrix<Scalar>& cols, const ConvGeometry& g, Scalar* img) {
  for (Index c = 0; c < g.in_c; ++c)
    for (Index ki = 0; ki < g.kh; ++ki)
      for (Index kj = 0; kj < g.kw; ++kj) {
        const Index row = (c * g.kh + ki) * g.kw + kj;
        for (Index oy = 0; oy < g.oh; ++oy) {
          const Index iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          for (Index ox = 0; ox < g.ow; ++ox) {
            const Index ix = ox * g.stride - g.pad + kj;
            if (ix < 0 || ix >= g.w) continue;
            img[(c * g.h + iy) * g.w + ix] += cols(row, oy * g.ow + ox);
          }
        }
      }
}

}  // namespace detail

/// Cross-correlation with zero padding. x[b,C_in,H,W], w[C_out,C_in,kH,kW].
template <typename Scalar>
Var<Scalar> conv2d(Var<Scalar> x, Var<Scalar> w, Index stride, Index padding) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  detail::require(xv.rank() == 4 && wv.rank() == 4, "conv2d expects rank-4 input and weight");
  detail::require(wv.dim(1) == xv.dim(1), "conv2d channel mismatch: input " + shape_string(xv.shape()) +
                                              ", weight " + shape_string(wv.shape()));
  detail::require(stride >= 1 && padding >= 0, "conv2d needs stride >= 1 and padding >= 0");
  detail::ConvGeometry g{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(0), wv.dim(2), wv.dim(3), stride, padding, 0, 0};
  detail::require(g.kh <= g.h + 2 * padding && g.kw <= g.w + 2 * padding, "conv2d kernel larger than padded input");
  g.oh = (g.h + 2 * padding - g.kh) / stride + 1;
  g.ow = (g.w + 2 * padding - g.kw) / stride + 1;

  Tensor<Scalar> out({g.batch, g.out_c, g.oh, g.ow});
  const auto wm = wv.matrix(g.out_c, g.patch());
  RowMatrix<Scalar> cols;
  const Index in_stride = g.in_c * g.h * g.w;
  const Index out_stride = g.out_c * g.positions();
  for (Index n = 0; n < g.batch; ++n) {
    detail::im2col(xv.data().data() + n * in_stride, g, cols);
    Eigen::Map<RowMatrix<Scalar>>(out.data().data() + n * out_stride, g.out_c, g.positions()).noalias() = wm * cols;
  }

  return x.tape->record("conv2d", {x, w}, std::move(out), [g, in_stride, out_stride](Tape<Scalar>& t, std::size_t self) {
    const auto& grad = t.grad_at(self);
    const std::size_t ix = t.input(self, 0), iw = t.input(self, 1);
    const auto& xv = t.value_at(ix);
    const auto wm = t.value_at(iw).matrix(g.out_c, g.patch());
    auto* dx = t.accum(ix);
    auto* dw = t.accum(iw);
    RowMatrix<Scalar> cols, dcols;
    for (Index n = 0; n < g.batch; ++n) {
      Eigen::Map<const RowMatrix<Scalar>> gn(grad.data().data() + n * out_stride, g.out_c, g.positions());
      if (dw) {
        detail::im2col(xv.data().data() + n * in_stride, g, cols);
        dw->matrix(g.out_c, g.patch()).noalias() += gn * cols.transpose();
      }
      if (dx) {
        dcols.noalias() = wm.transpose() * gn;
        detail::col2im_add(dcols, g, dx->data().data() + n * in_stride);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> x) {
  detail::check_finite_input(x.value(), "relu");
  Tensor<Scalar> out = x.value();
  for (auto& v : out.data()) v = v > Scalar(0) ? v : Scalar(0);
  return x.tape->record("relu", {x}, std::move(out), [](Tape<Scalar>& t, std::size_t self) {
    const std::size_t ix = t.input(self, 0);
    auto* dx = t.accum(ix);
    const auto& xv = t.value_at(ix);
    const auto& g = t.grad_at(self);
    for (Index i = 0; i < g.size(); ++i)
      if (xv[i] > Scalar(0)) (*dx)[i] += g[i];
  });
}

/// Natural log; non-positive inputs surface as a NonFiniteError.
template <typename Scalar>
Var<Scalar> log(Var<Scalar> x) {
  detail::check_finite_input(x.value(), "log");
  Tensor<Scalar> out = x.value();
  for (auto& v : out.data()) v = std::log(v);
  if (!out.all_finite()) throw NonFiniteError("log of a non-positive value");
  return x.tape->record("log", {x}, std::move(out), [](Tape<Scalar>& t, std::size_t self) {
    const std::size_t ix = t.input(self, 0);
    const auto& xv = t.value_at(ix);
    const auto& g = t.grad_at(self);
    auto* dx = t.accum(ix);
    for (Index i = 0; i < g.size(); ++i) (*dx)[i] += g[i] / xv[i];
  });
}

template <typename Scalar>
Var<Scalar> abs(Var<Scalar> x) {
  Tensor<Scalar> out = x.value();
  for (auto& v : out.data()) v = std::abs(v);
  return x.tape->record("abs", {x}, std::move(out), [](Tape<Scalar>& t, std::size_t self) {
    const std::size_t ix = t.input(self, 0);
    const auto& xv = t.value_at(ix);
    const auto& g = t.grad_at(self);
    auto* dx = t.accum(ix);
    // sign(0) = 0: the L1 minimum has a zero subgradient.
    for (Index i = 0; i < g.size(); ++i) {
      if (xv[i] > Scalar(0)) (*dx)[i] += g[i];
      else if (xv[i] < Scalar(0)) (*dx)[i] -= g[i];
    }
  });
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  detail::require(a.shape() == b.shape(), "add shape mismatch");
  Tensor<Scalar> out = a.value();
  out.array() += b.value().array();
  return a.tape->record("add", {a, b}, std::move(out), [](Tape<Scalar>& t, std::size_t self) {
    const auto& g = t.grad_at(self);
    if (auto* da = t.accum(t.input(self, 0))) da->array() += g.array();
    if (auto* db = t.accum(t.input(self, 1))) db->array() += g.array();
  });
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  detail::require(a.shape() == b.shape(), "sub shape mismatch");
  Tensor<Scalar> out = a.value();
  out.array() -= b.value().array();
  return a.tape->record("sub", {a, b}, std::move(out), [](Tape<Scalar>& t, std::size_t self) {
    const auto& g = t.grad_at(self);
    if (auto* da = t.accum(t.input(self, 0))) da->array() += g.array();
    if (auto* db = t.accum(t.input(self, 1))) db->array() -= g.array();
  });
}

template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
  detail::require(a.shape() == b.shape(), "mul shape mismatch");
  Tensor<Scalar> out = a.value();
  out.array() *= b.value().array();
  return a.tape->record("mul", {a, b}, std::move(out), [](Tape<Scalar>& t, std::size_t self) {
    const auto& g = t.grad_at(self);
    const std::size_t ia = t.input(self, 0), ib = t.input(self, 1);
    if (auto* da = t.accum(ia)) da->array() += g.array() * t.value_at(ib).array();
    if (auto* db = t.accum(ib)) db->array() += g.array() * t.value_at(ia).array();
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> x, double factor) {
  Tensor<Scalar> out = x.value();
  out.array() *= static_cast<Scalar>(factor);
  return x.tape->record("scale", {x}, std::move(out), [factor](Tape<Scalar>& t, std::size_t self) {
    if (auto* dx = t.accum(t.input(self, 0))) dx->array() += t.grad_at(self).array() * static_cast<Scalar>(factor);
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> x) {
  double s = 0.0;
  for (Scalar v : x.value().data()) s += v;
  return x.tape->record("sum", {x}, Tensor<Scalar>(Shape{}, static_cast<Scalar>(s)), [](Tape<Scalar>& t, std::size_t self) {
    if (auto* dx = t.accum(t.input(self, 0))) dx->array() += t.grad_at(self)[0];
  });
}

template <typename Scalar>
Var<Scalar> mean(Var<Scalar> x) {
  const Index n = x.value().size();
  detail::require(n > 0, "mean of an empty tensor");
  double s = 0.0;
  for (Scalar v : x.value().data()) s += v;
  return x.tape->record("mean", {x}, Tensor<Scalar>(Shape{}, static_cast<Scalar>(s / double(n))),
                        [n](Tape<Scalar>& t, std::size_t self) {
                          if (auto* dx = t.accum(t.input(self, 0)))
                            dx->array() += static_cast<Scalar>(double(t.grad_at(self)[0]) / double(n));
                        });
}

/// [m,n] -> [m]
template <typename Scalar>
Var<Scalar> row_sum(Var<Scalar> x) {
  const auto& xv = x.value();
  detail::require(xv.rank() == 2, "row_sum expects rank 2");
  const Index m = xv.dim(0), n = xv.dim(1);
  Tensor<Scalar> out({m});
  for (Index i = 0; i < m; ++i) {
    double s = 0.0;
    for (Index j = 0; j < n; ++j) s += xv.at(i, j);
    out[i] = static_cast<Scalar>(s);
  }
  return x.tape->record("row_sum", {x}, std::move(out), [m, n](Tape<Scalar>& t, std::size_t self) {
    const auto& g = t.grad_at(self);
    auto* dx = t.accum(t.input(self, 0));
    for (Index i = 0; i < m; ++i)
      for (Index j = 0; j < n; ++j) dx->at(i, j) += g[i];
  });
}

/// [b,C] -> [C]: uniform average over the batch axis.
template <typename Scalar>
Var<Scalar> mean_rows(Var<Scalar> x) {
  const auto& xv = x.value();
  detail::require(xv.rank() == 2 && xv.dim(0) > 0, "mean_rows expects a non-empty rank-2 tensor");
  const Index m = xv.dim(0), n = xv.dim(1);
  Tensor<Scalar> out({n});
  for (Index j = 0; j < n; ++j) {
    double s = 0.0;
    for (Index i = 0; i < m; ++i) s += xv.at(i, j);
    out[j] = static_cast<Scalar>(s / double(m));
  }
  return x.tape->record("mean_rows", {x}, std::move(out), [m, n](Tape<Scalar>& t, std::size_t self) {
    const auto& g = t.grad_at(self);
    auto* dx = t.accum(t.input(self, 0));
    for (Index i = 0; i < m; ++i)
      for (Index j = 0; j < n; ++j) dx->at(i, j) += static_cast<Scalar>(double(g[j]) / double(m));
  });
}

/// Picks x[i, index[i]] for every row.
template <typename Scalar>
Var<Scalar> gather_rows(Var<Scalar> x, std::vector<int> index) {
  const auto& xv = x.value();
  detail::require(xv.rank() == 2 && static_cast<Index>(index.size()) == xv.dim(0), "gather_rows shape mismatch");
  Tensor<Scalar> out({xv.dim(0)});
  for (Index i = 0; i < xv.dim(0); ++i) {
    detail::require(index[i] >= 0 && index[i] < xv.dim(1), "gather_rows index out of range");
    out[i] = xv.at(i, index[i]);
  }
  return x.tape->record("gather_rows", {x}, std::move(out), [index = std::move(index)](Tape<Scalar>& t, std::size_t self) {
    const auto& g = t.grad_at(self);
    auto* dx = t.accum(t.input(self, 0));
    for (std::size_t i = 0; i < index.size(); ++i) dx->at(static_cast<Index>(i), index[i]) += g[static_cast<Index>(i)];
  });
}

// ---------------------------------------------------------------------------
// Shape and pooling

template <typename Scalar>
Var<Scalar> flatten(Var<Scalar> x) {
  const auto& xv = x.value();
  detail::require(xv.rank() >= 1, "flatten needs a batch axis");
  const Index b = xv.dim(0);
  Tensor<Scalar> out = xv.reshaped({b, b ? xv.size() / b : 0});
  return x.tape->record("flatten", {x}, std::move(out), [](Tape<Scalar>& t, std::size_t self) {
    if (auto* dx = t.accum(t.input(self, 0))) dx->array() += t.grad_at(self).array();
  });
}

/// Non-overlapping k×k average pooling (stride k); trailing rows/cols that do not fill a window are dropped.
template <typename Scalar>
Var<Scalar> avgpool2d(Var<Scalar> x, Index k) {
  const auto& xv = x.value();
  detail::require(xv.rank() == 4, "avgpool2d expects rank 4");
  detail::require(k >= 1 && k <= xv.dim(2) && k <= xv.dim(3), "avgpool2d window larger than input");
  detail::check_finite_input(xv, "avgpool2d");
  const Index b = xv.dim(0), c = xv.dim(1), oh = xv.dim(2) / k, ow = xv.dim(3) / k;
  const double inv = 1.0 / double(k * k);
  Tensor<Scalar> out({b, c, oh, ow});
  for (Index n = 0; n < b; ++n)
    for (Index ch = 0; ch < c; ++ch)
      for (Index i = 0; i < oh; ++i)
        for (Index j = 0; j < ow; ++j) {
          double s = 0.0;
          for (Index di = 0; di < k; ++di)
            for (Index dj = 0; dj < k; ++dj) s += xv.at(n, ch, i * k + di, j * k + dj);
          out.at(n, ch, i, j) = static_cast<Scalar>(s * inv);
        }
  return x.tape->record("avgpool2d", {x}, std::move(out), [k, inv](Tape<Scalar>& t, std::size_t self) {
    const auto& g = t.grad_at(self);
    auto* dx = t.accum(t.input(self, 0));
    for (Index n = 0; n < g.dim(0); ++n)
      for (Index ch = 0; ch < g.dim(1); ++ch)
        for (Index i = 0; i < g.dim(2); ++i)
          for (Index j = 0; j < g.dim(3); ++j) {
            const Scalar v = static_cast<Scalar>(double(g.at(n, ch, i, j)) * inv);
            for (Index di = 0; di < k; ++di)
              for (Index dj = 0; dj < k; ++dj) dx->at(n, ch, i * k + di, j * k + dj) += v;
          }
  });
}

// ---------------------------------------------------------------------------
// Class-axis normalizers

template <typename Scalar>
Var<Scalar> log_softmax(Var<Scalar> logits) {
  const auto& xv = logits.value();
  detail::require(xv.rank() == 2, "log_softmax expects [batch, classes]");
  detail::check_finite_input(xv, "log_softmax");
  const Index m = xv.dim(0), n = xv.dim(1);
  Tensor<Scalar> out({m, n});
  for (Index i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Index j = 0; j < n; ++j) mx = std::max(mx, double(xv.at(i, j)));
    double s = 0.0;
    for (Index j = 0; j < n; ++j) s += std::exp(double(xv.at(i, j)) - mx);
    const double lse = mx + std::log(s);
    for (Index j = 0; j < n; ++j) out.at(i, j) = static_cast<Scalar>(double(xv.at(i, j)) - lse);
  }
  return logits.tape->record("log_softmax", {logits}, std::move(out), [m, n](Tape<Scalar>& t, std::size_t self) {
    const auto& g = t.grad_at(self);
    const auto& y = t.value_at(self);
    auto* dx = t.accum(t.input(self, 0));
    for (Index i = 0; i < m; ++i) {
      double gs = 0.0;
      for (Index j = 0; j < n; ++j) gs += g.at(i, j);
      for (Index j = 0; j < n; ++j) dx->at(i, j) += static_cast<Scalar>(g.at(i, j) - std::exp(double(y.at(i, j))) * gs);
    }
  });
}

template <typename Scalar>
Var<Scalar> softmax(Var<Scalar> logits) {
  const auto& xv = logits.value();
  detail::require(xv.rank() == 2, "softmax expects [batch, classes]");
  detail::check_finite_input(xv, "softmax");
  const Index m = xv.dim(0), n = xv.dim(1);
  Tensor<Scalar> out({m, n});
  for (Index i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Index j = 0; j < n; ++j) mx = std::max(mx, double(xv.at(i, j)));
    double s = 0.0;
    for (Index j = 0; j < n; ++j) s += std::exp(double(xv.at(i, j)) - mx);
    for (Index j = 0; j < n; ++j) out.at(i, j) = static_cast<Scalar>(std::exp(double(xv.at(i, j)) - mx) / s);
  }
  return logits.tape->record("softmax", {logits}, std::move(out), [m, n](Tape<Scalar>& t, std::size_t self) {
    const auto& g = t.grad_at(self);
    const auto& p = t.value_at(self);
    auto* dx = t.accum(t.input(self, 0));
    for (Index i = 0; i < m; ++i) {
      double gp = 0.0;
      for (Index j = 0; j < n; ++j) gp += double(g.at(i, j)) * p.at(i, j);
      for (Index j = 0; j < n; ++j) dx->at(i, j) += static_cast<Scalar>(p.at(i, j) * (g.at(i, j) - gp));
    }
  });
}

// ---------------------------------------------------------------------------
// Per-sample channel statistics

/// Spatial mean per (sample, channel): [b,C,H,W] -> [b,C].
template <typename Scalar>
Var<Scalar> channel_mean(Var<Scalar> x) {
  const auto& xv = x.value();
  detail::require(xv.rank() == 4 && xv.dim(2) * xv.dim(3) >= 1, "channel_mean expects [b,C,H,W] with H*W >= 1");
  const Index b = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor<Scalar> out({b, c});
  for (Index r = 0; r < b * c; ++r) {
    double s = 0.0;
    for (Index p = 0; p < hw; ++p) s += xv[r * hw + p];
    out[r] = static_cast<Scalar>(s / double(hw));
  }
  return x.tape->record("channel_mean", {x}, std::move(out), [b, c, hw](Tape<Scalar>& t, std::size_t self) {
    const auto& g = t.grad_at(self);
    auto* dx = t.accum(t.input(self, 0));
    for (Index r = 0; r < b * c; ++r) {
      const Scalar v = static_cast<Scalar>(double(g[r]) / double(hw));
      for (Index p = 0; p < hw; ++p) (*dx)[r * hw + p] += v;
    }
  });
}

/// Spatial population variance (divisor H*W) per (sample, channel): [b,C,H,W] -> [b,C].
template <typename Scalar>
Var<Scalar> channel_variance(Var<Scalar> x) {
  const auto& xv = x.value();
  detail::require(xv.rank() == 4 && xv.dim(2) * xv.dim(3) >= 1, "channel_variance expects [b,C,H,W] with H*W >= 1");
  const Index b = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor<Scalar> out({b, c});
  std::vector<double> means(static_cast<std::size_t>(b * c));
  for (Index r = 0; r < b * c; ++r) {
    double s = 0.0;
    for (Index p = 0; p < hw; ++p) s += xv[r * hw + p];
    const double mu = s / double(hw);
    double ss = 0.0;
    for (Index p = 0; p < hw; ++p) {
      const double d = xv[r * hw + p] - mu;
      ss += d * d;
    }
    means[static_cast<std::size_t>(r)] = mu;
    out[r] = static_cast<Scalar>(ss / double(hw));
  }
  return x.tape->record("channel_variance", {x}, std::move(out),
                        [b, c, hw, means = std::move(means)](Tape<Scalar>& t, std::size_t self) {
                          const auto& g = t.grad_at(self);
                          const std::size_t ix = t.input(self, 0);
                          const auto& xv = t.value_at(ix);
                          auto* dx = t.accum(ix);
                          // d var / d x_p = 2 (x_p - m) / HW; the mean's own dependence cancels.
                          for (Index r = 0; r < b * c; ++r) {
                            const double k = 2.0 * double(g[r]) / double(hw);
                            const double mu = means[static_cast<std::size_t>(r)];
                            for (Index p = 0; p < hw; ++p)
                              (*dx)[r * hw + p] += static_cast<Scalar>(k * (double(xv[r * hw + p]) - mu));
                          }
                        });
}

template <typename Scalar>
struct ChannelStatsVars {
  Var<Scalar> mean;      ///< [b,C]
  Var<Scalar> variance;  ///< [b,C]
};

template <typename Scalar>
ChannelStatsVars<Scalar> channel_stats(Var<Scalar> x) {
  return {channel_mean(x), channel_variance(x)};
}

// ---------------------------------------------------------------------------
// Batch normalization

/// Per-channel first and second moments.
template <typename Scalar>
struct Moments {
  Tensor<Scalar> mean;
  Tensor<Scalar> var;
};

/// Batch moments over (batch, spatial) with the population divisor b*H*W.
template <typename Scalar>
Moments<Scalar> batch_moments(const Tensor<Scalar>& x) {
  const auto [b, c, hw] = detail::channel_layout(x.shape(), "batch_moments");
  detail::require(b * hw > 0, "batch_moments of an empty batch");
  Moments<Scalar> out{Tensor<Scalar>({c}), Tensor<Scalar>({c})};
  const double count = double(b * hw);
  for (Index ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (Index n = 0; n < b; ++n)
      for (Index p = 0; p < hw; ++p) s += x[(n * c + ch) * hw + p];
    const double mu = s / count;
    double ss = 0.0;
    for (Index n = 0; n < b; ++n)
      for (Index p = 0; p < hw; ++p) {
        const double d = x[(n * c + ch) * hw + p] - mu;
        ss += d * d;
      }
    out.mean[ch] = static_cast<Scalar>(mu);
    out.var[ch] = static_cast<Scalar>(ss / count);
  }
  return out;
}

/// gamma * (x - mu) / sqrt(var + eps) + beta. With `fixed` set the moments are constants;
/// otherwise the current batch's moments are used and differentiated through.
/// `observed` (optional) receives the moments actually used.
template <typename Scalar>
Var<Scalar> batch_norm(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta, const std::type_identity_t<Moments<Scalar>>* fixed,
                       double eps, std::type_identity_t<Moments<Scalar>>* observed = nullptr) {
  const auto& xv = x.value();
  const auto [b, c, hw] = detail::channel_layout(xv.shape(), "batch_norm");
  detail::require(gamma.value().shape() == Shape{c} && beta.value().shape() == Shape{c},
                  "batch_norm affine parameters do not match " + std::to_string(c) + " channels");
  detail::check_finite_input(xv, "batch_norm");
  if (eps <= 0.0) throw std::invalid_argument("batch_norm epsilon must be positive");

  Moments<Scalar> used;
  if (fixed) {
    detail::require(fixed->mean.shape() == Shape{c} && fixed->var.shape() == Shape{c},
                    "batch_norm statistics do not match " + std::to_string(c) + " channels");
    for (Scalar v : fixed->var.data())
      if (!(v >= Scalar(0))) throw std::invalid_argument("batch_norm normalization variance is negative");
    used = *fixed;
  } else {
    used = batch_moments(xv);
  }
  if (observed) *observed = used;

  std::vector<double> inv_std(static_cast<std::size_t>(c));
  for (Index ch = 0; ch < c; ++ch) inv_std[static_cast<std::size_t>(ch)] = 1.0 / std::sqrt(double(used.var[ch]) + eps);

  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  Tensor<Scalar> out(xv.shape());
  for (Index n = 0; n < b; ++n)
    for (Index ch = 0; ch < c; ++ch) {
      const double is = inv_std[static_cast<std::size_t>(ch)];
      const double mu = used.mean[ch];
      for (Index p = 0; p < hw; ++p) {
        const Index i = (n * c + ch) * hw + p;
        out[i] = static_cast<Scalar>(double(gv[ch]) * (double(xv[i]) - mu) * is + double(bv[ch]));
      }
    }

  const bool batch_stats = fixed == nullptr;
  return x.tape->record(
      "batch_norm", {x, gamma, beta}, std::move(out),
      [b, c, hw, batch_stats, inv_std = std::move(inv_std), mu = std::move(used.mean)](Tape<Scalar>& t, std::size_t self) {
        const auto& g = t.grad_at(self);
        const std::size_t ix = t.input(self, 0), ig = t.input(self, 1), ib = t.input(self, 2);
        const auto& xv = t.value_at(ix);
        const auto& gv = t.value_at(ig);
        auto* dx = t.accum(ix);
        auto* dgamma = t.accum(ig);
        auto* dbeta = t.accum(ib);
        const double count = double(b * hw);
        for (Index ch = 0; ch < c; ++ch) {
          const double is = inv_std[static_cast<std::size_t>(ch)];
          const double m = mu[ch];
          double sum_g = 0.0, sum_gx = 0.0;
          for (Index n = 0; n < b; ++n)
            for (Index p = 0; p < hw; ++p) {
              const Index i = (n * c + ch) * hw + p;
              sum_g += g[i];
              sum_gx += double(g[i]) * (double(xv[i]) - m) * is;
            }
          if (dgamma) (*dgamma)[ch] += static_cast<Scalar>(sum_gx);
          if (dbeta) (*dbeta)[ch] += static_cast<Scalar>(sum_g);
          if (!dx) continue;
          const double k = double(gv[ch]) * is;
          for (Index n = 0; n < b; ++n)
            for (Index p = 0; p < hw; ++p) {
              const Index i = (n * c + ch) * hw + p;
              double d = double(g[i]);
              if (batch_stats) {
                const double xhat = (double(xv[i]) - m) * is;
                d = d - sum_g / count - xhat * sum_gx / count;
              }
              (*dx)[i] += static_cast<Scalar>(k * d);
            }
        }
      });
}

}  // namespace datta
