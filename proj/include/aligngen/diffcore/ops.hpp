#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "aligngen/diffcore/tape.hpp"
#include "aligngen/diffcore/tensor.hpp"

// Differentiable primitives. Every op validates shapes, computes its forward
// value eagerly and records a closure that accumulates input gradients.
namespace aligngen::ad {

// Additive logit bias used for blocked attention entries.
inline constexpr double kMaskNeg = -1e9;

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Map = Eigen::Map<RowMat<T>>;
template <typename T>
using CMap = Eigen::Map<const RowMat<T>>;

template <typename T>
CMap<T> cmap(const Tensor<T>& t) {
  return CMap<T>(t.raw(), t.rows(), t.cols());
}
template <typename T>
Map<T> map(Tensor<T>& t) {
  return Map<T>(t.raw(), t.rows(), t.cols());
}

// Transcendental array math runs on Eigen-owned (aligned) buffers: on a
// std::vector the vector/scalar split follows the heap address, which would
// make float results run-dependent.
template <typename T>
using Vec = Eigen::Array<T, Eigen::Dynamic, 1>;

template <typename T>
Vec<T> to_vec(const Tensor<T>& t) {
  return Eigen::Map<const Vec<T>>(t.raw(), static_cast<Eigen::Index>(t.size()));
}

template <typename T>
void from_vec(const Vec<T>& v, T* dst) {
  std::copy(v.data(), v.data() + v.size(), dst);
}

inline std::string dims_msg(std::string_view op, const Shape& a, const Shape& b) {
  return std::string(op) + ": incompatible dims " + shape_str(a) + " and " +
         shape_str(b);
}

template <typename T>
void require_same(std::string_view op, const Var<T>& a, const Var<T>& b) {
  if (a.tape != b.tape) throw ArgumentError(std::string(op) + ": vars on different tapes");
  if (a.dims() != b.dims()) throw ShapeError(dims_msg(op, a.dims(), b.dims()));
}

template <typename T>
void require_rank2(std::string_view op, const Var<T>& a) {
  if (a.dims().size() != 2) {
    throw ShapeError(std::string(op) + ": expected rank-2 input, got " +
                     shape_str(a.dims()));
  }
}

template <typename T>
bool any_grad(std::initializer_list<Var<T>> vs) {
  for (const auto& v : vs) {
    if (v.requires_grad()) return true;
  }
  return false;
}

}  // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same("add", a, b);
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const auto ia = a.id, ib = b.id;
  return a.tape->record("add", std::move(out), detail::any_grad({a, b}),
                        [ia, ib](Tape<T>& tp, const Tensor<T>& g) {
                          tp.accumulate(ia, g);
                          tp.accumulate(ib, g);
                        });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same("sub", a, b);
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const auto ia = a.id, ib = b.id;
  return a.tape->record("sub", std::move(out), detail::any_grad({a, b}),
                        [ia, ib](Tape<T>& tp, const Tensor<T>& g) {
                          tp.accumulate(ia, g);
                          if (tp.requires_grad(ib)) {
                            auto& gb = tp.grad_buffer(ib);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                          }
                        });
}

// Elementwise product.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same("mul", a, b);
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const auto ia = a.id, ib = b.id;
  return a.tape->record("mul", std::move(out), detail::any_grad({a, b}),
                        [ia, ib](Tape<T>& tp, const Tensor<T>& g) {
                          const auto& av = tp.value(ia);
                          const auto& bv = tp.value(ib);
                          if (tp.requires_grad(ia)) {
                            auto& ga = tp.grad_buffer(ia);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                          }
                          if (tp.requires_grad(ib)) {
                            auto& gb = tp.grad_buffer(ib);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                          }
                        });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= s;
  const auto ia = a.id;
  return a.tape->record("scale", std::move(out), a.requires_grad(),
                        [ia, s](Tape<T>& tp, const Tensor<T>& g) {
                          auto& ga = tp.grad_buffer(ia);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
                        });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v += s;
  const auto ia = a.id;
  return a.tape->record("add_scalar", std::move(out), a.requires_grad(),
                        [ia](Tape<T>& tp, const Tensor<T>& g) { tp.accumulate(ia, g); });
}

// a[m,n] + row[1,n] broadcast over rows.
template <typename T>
Var<T> add_row(Var<T> a, Var<T> row) {
  detail::require_rank2("add_row", a);
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError(detail::dims_msg("add_row", a.dims(), row.dims()));
  }
  Tensor<T> out = a.value();
  const auto& rv = row.value();
  const std::size_t m = out.rows(), n = out.cols();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += rv[c];
  const auto ia = a.id, ir = row.id;
  return a.tape->record("add_row", std::move(out), detail::any_grad({a, row}),
                        [ia, ir, m, n](Tape<T>& tp, const Tensor<T>& g) {
                          tp.accumulate(ia, g);
                          if (tp.requires_grad(ir)) {
                            auto& gr = tp.grad_buffer(ir);
                            for (std::size_t r = 0; r < m; ++r)
                              for (std::size_t c = 0; c < n; ++c) gr[c] += g[r * n + c];
                          }
                        });
}

// a[m,n] * row[1,n] broadcast over rows.
template <typename T>
Var<T> mul_row(Var<T> a, Var<T> row) {
  detail::require_rank2("mul_row", a);
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError(detail::dims_msg("mul_row", a.dims(), row.dims()));
  }
  Tensor<T> out = a.value();
  const auto& rv = row.value();
  const std::size_t m = out.rows(), n = out.cols();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] *= rv[c];
  const auto ia = a.id, ir = row.id;
  return a.tape->record(
      "mul_row", std::move(out), detail::any_grad({a, row}),
      [ia, ir, m, n](Tape<T>& tp, const Tensor<T>& g) {
        const auto& av = tp.value(ia);
        const auto& rv = tp.value(ir);
        if (tp.requires_grad(ia)) {
          auto& ga = tp.grad_buffer(ia);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += g[r * n + c] * rv[c];
        }
        if (tp.requires_grad(ir)) {
          auto& gr = tp.grad_buffer(ir);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) gr[c] += g[r * n + c] * av[r * n + c];
        }
      });
}

// a[m,n] * col[m,1]: scales each row.
template <typename T>
Var<T> mul_col(Var<T> a, Var<T> col) {
  detail::require_rank2("mul_col", a);
  if (col.cols() != 1 || col.rows() != a.rows()) {
    throw ShapeError(detail::dims_msg("mul_col", a.dims(), col.dims()));
  }
  Tensor<T> out = a.value();
  const auto& cv = col.value();
  const std::size_t m = out.rows(), n = out.cols();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] *= cv[r];
  const auto ia = a.id, ic = col.id;
  return a.tape->record(
      "mul_col", std::move(out), detail::any_grad({a, col}),
      [ia, ic, m, n](Tape<T>& tp, const Tensor<T>& g) {
        const auto& av = tp.value(ia);
        const auto& cv = tp.value(ic);
        if (tp.requires_grad(ia)) {
          auto& ga = tp.grad_buffer(ia);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += g[r * n + c] * cv[r];
        }
        if (tp.requires_grad(ic)) {
          auto& gc = tp.grad_buffer(ic);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) gc[r] += g[r * n + c] * av[r * n + c];
        }
      });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require_rank2("matmul", a);
  detail::require_rank2("matmul", b);
  if (a.tape != b.tape) throw ArgumentError("matmul: vars on different tapes");
  if (a.cols() != b.rows()) throw ShapeError(detail::dims_msg("matmul", a.dims(), b.dims()));
  Tensor<T> out({a.rows(), b.cols()});
  detail::map(out).noalias() = detail::cmap(a.value()) * detail::cmap(b.value());
  const auto ia = a.id, ib = b.id;
  return a.tape->record(
      "matmul", std::move(out), detail::any_grad({a, b}),
      [ia, ib](Tape<T>& tp, const Tensor<T>& g) {
        const auto gm = detail::cmap(g);
        if (tp.requires_grad(ia)) {
          detail::map(tp.grad_buffer(ia)).noalias() +=
              gm * detail::cmap(tp.value(ib)).transpose();
        }
        if (tp.requires_grad(ib)) {
          detail::map(tp.grad_buffer(ib)).noalias() +=
              detail::cmap(tp.value(ia)).transpose() * gm;
        }
      });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  detail::require_rank2("transpose", a);
  Tensor<T> out({a.cols(), a.rows()});
  detail::map(out) = detail::cmap(a.value()).transpose();
  const auto ia = a.id;
  return a.tape->record("transpose", std::move(out), a.requires_grad(),
                        [ia](Tape<T>& tp, const Tensor<T>& g) {
                          detail::map(tp.grad_buffer(ia)) += detail::cmap(g).transpose();
                        });
}

// x W + b for x[m,in], W[in,out], b[1,out].
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  return add_row(matmul(x, w), b);
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  bool needs = false;
  for (const auto& p : parts) {
    detail::require_rank2("concat_rows", p);
    if (p.cols() != n) throw ShapeError(detail::dims_msg("concat_rows", parts[0].dims(), p.dims()));
    if (p.tape != parts[0].tape) throw ArgumentError("concat_rows: vars on different tapes");
    m += p.rows();
    needs = needs || p.requires_grad();
  }
  Tensor<T> out({m, n});
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().raw(), p.value().raw() + p.value().size(), out.raw() + off * n);
    ids.push_back(p.id);
    offsets.push_back(off);
    off += p.rows();
  }
  return parts[0].tape->record(
      "concat_rows", std::move(out), needs,
      [ids, offsets, n](Tape<T>& tp, const Tensor<T>& g) {
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!tp.requires_grad(ids[k])) continue;
          auto& gp = tp.grad_buffer(ids[k]);
          const T* src = g.raw() + offsets[k] * n;
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += src[i];
        }
      });
}

// Rows [begin, end).
template <typename T>
Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t end) {
  detail::require_rank2("slice_rows", a);
  if (begin >= end || end > a.rows()) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") invalid for " + shape_str(a.dims()));
  }
  const std::size_t n = a.cols();
  Tensor<T> out({end - begin, n});
  std::copy(a.value().raw() + begin * n, a.value().raw() + end * n, out.raw());
  const auto ia = a.id;
  return a.tape->record("slice_rows", std::move(out), a.requires_grad(),
                        [ia, begin, n](Tape<T>& tp, const Tensor<T>& g) {
                          auto& ga = tp.grad_buffer(ia);
                          T* dst = ga.raw() + begin * n;
                          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                        });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  bool needs = false;
  for (const auto& p : parts) {
    detail::require_rank2("concat_cols", p);
    if (p.rows() != m) throw ShapeError(detail::dims_msg("concat_cols", parts[0].dims(), p.dims()));
    n += p.cols();
    needs = needs || p.requires_grad();
  }
  Tensor<T> out({m, n});
  std::vector<std::size_t> ids, offsets, widths;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    const std::size_t w = v.cols();
    for (std::size_t r = 0; r < m; ++r)
      std::copy(v.raw() + r * w, v.raw() + (r + 1) * w, out.raw() + r * n + off);
    ids.push_back(p.id);
    offsets.push_back(off);
    widths.push_back(w);
    off += w;
  }
  return parts[0].tape->record(
      "concat_cols", std::move(out), needs,
      [ids, offsets, widths, m, n](Tape<T>& tp, const Tensor<T>& g) {
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!tp.requires_grad(ids[k])) continue;
          auto& gp = tp.grad_buffer(ids[k]);
          const std::size_t w = widths[k];
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < w; ++c) gp[r * w + c] += g[r * n + offsets[k] + c];
        }
      });
}

// Columns [begin, end).
template <typename T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t end) {
  detail::require_rank2("slice_cols", a);
  if (begin >= end || end > a.cols()) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") invalid for " + shape_str(a.dims()));
  }
  const std::size_t m = a.rows(), n = a.cols(), w = end - begin;
  Tensor<T> out({m, w});
  const auto& av = a.value();
  for (std::size_t r = 0; r < m; ++r)
    std::copy(av.raw() + r * n + begin, av.raw() + r * n + end, out.raw() + r * w);
  const auto ia = a.id;
  return a.tape->record("slice_cols", std::move(out), a.requires_grad(),
                        [ia, begin, m, n, w](Tape<T>& tp, const Tensor<T>& g) {
                          auto& ga = tp.grad_buffer(ia);
                          for (std::size_t r = 0; r < m; ++r)
                            for (std::size_t c = 0; c < w; ++c)
                              ga[r * n + begin + c] += g[r * w + c];
                        });
}

// Copy of `base` with row indices[k] overwritten by src row k.
template <typename T>
Var<T> replace_rows(Var<T> base, const std::vector<std::size_t>& indices, Var<T> src) {
  detail::require_rank2("replace_rows", base);
  detail::require_rank2("replace_rows", src);
  if (src.rows() != indices.size() || src.cols() != base.cols()) {
    throw ShapeError(detail::dims_msg("replace_rows", base.dims(), src.dims()));
  }
  const std::size_t n = base.cols();
  std::vector<char> seen(base.rows(), 0);
  for (auto r : indices) {
    if (r >= base.rows()) throw ShapeError("replace_rows: row index out of range");
    if (seen[r]) throw ArgumentError("replace_rows: duplicate row index");
    seen[r] = 1;
  }
  Tensor<T> out = base.value();
  const auto& sv = src.value();
  for (std::size_t k = 0; k < indices.size(); ++k)
    std::copy(sv.raw() + k * n, sv.raw() + (k + 1) * n, out.raw() + indices[k] * n);
  const auto ib = base.id, is = src.id;
  return base.tape->record(
      "replace_rows", std::move(out), detail::any_grad({base, src}),
      [ib, is, indices, seen, n](Tape<T>& tp, const Tensor<T>& g) {
        if (tp.requires_grad(ib)) {
          auto& gb = tp.grad_buffer(ib);
          for (std::size_t r = 0; r < seen.size(); ++r) {
            if (seen[r]) continue;
            for (std::size_t c = 0; c < n; ++c) gb[r * n + c] += g[r * n + c];
          }
        }
        if (tp.requires_grad(is)) {
          auto& gs = tp.grad_buffer(is);
          for (std::size_t k = 0; k < indices.size(); ++k)
            for (std::size_t c = 0; c < n; ++c) gs[k * n + c] += g[indices[k] * n + c];
        }
      });
}

// base with rows [begin, begin + delta.rows) incremented by delta.
template <typename T>
Var<T> add_into_rows(Var<T> base, std::size_t begin, Var<T> delta) {
  detail::require_rank2("add_into_rows", base);
  if (delta.cols() != base.cols() || begin + delta.rows() > base.rows()) {
    throw ShapeError(detail::dims_msg("add_into_rows", base.dims(), delta.dims()));
  }
  const std::size_t n = base.cols();
  Tensor<T> out = base.value();
  const auto& dv = delta.value();
  T* dst = out.raw() + begin * n;
  for (std::size_t i = 0; i < dv.size(); ++i) dst[i] += dv[i];
  const auto ib = base.id, id = delta.id;
  const std::size_t len = dv.size();
  return base.tape->record("add_into_rows", std::move(out), detail::any_grad({base, delta}),
                           [ib, id, begin, n, len](Tape<T>& tp, const Tensor<T>& g) {
                             tp.accumulate(ib, g);
                             if (tp.requires_grad(id)) {
                               auto& gd = tp.grad_buffer(id);
                               const T* src = g.raw() + begin * n;
                               for (std::size_t i = 0; i < len; ++i) gd[i] += src[i];
                             }
                           });
}

// Row-wise softmax of (x + mask). `mask` is a constant additive bias with the
// same shape as x; entries at kMaskNeg underflow to exactly zero weight.
template <typename T>
Var<T> softmax_rows(Var<T> x, const Tensor<T>* mask = nullptr) {
  detail::require_rank2("softmax_rows", x);
  if (mask && mask->dims() != x.dims()) {
    throw ShapeError(detail::dims_msg("softmax_rows(mask)", x.dims(), mask->dims()));
  }
  const std::size_t m = x.rows(), n = x.cols();
  Tensor<T> out = x.value();
  if (mask) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += (*mask)[i];
  }
  detail::Vec<T> scratch(static_cast<Eigen::Index>(n));
  for (std::size_t r = 0; r < m; ++r) {
    T* row = out.raw() + r * n;
    T mx = row[0];
    for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, row[c]);
    scratch = Eigen::Map<const detail::Vec<T>>(row, static_cast<Eigen::Index>(n));
    scratch = (scratch - mx).exp();
    scratch /= scratch.sum();
    detail::from_vec(scratch, row);
  }
  const auto ix = x.id;
  // The backward reads the output, which is the node recorded next.
  const std::size_t iy = x.tape->size();
  return x.tape->record("softmax_rows", std::move(out), x.requires_grad(),
                     [ix, iy, m, n](Tape<T>& tp, const Tensor<T>& g) {
                       const auto& yv = tp.value(iy);
                       auto& gx = tp.grad_buffer(ix);
                       for (std::size_t r = 0; r < m; ++r) {
                         T dot = 0;
                         for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * yv[r * n + c];
                         for (std::size_t c = 0; c < n; ++c)
                           gx[r * n + c] += yv[r * n + c] * (g[r * n + c] - dot);
                       }
                     });
}

// Row-wise RMS normalization, optionally scaled by a learned [1,n] row.
template <typename T>
Var<T> rms_norm(Var<T> x, std::optional<Var<T>> gain = std::nullopt, T eps = T(1e-6)) {
  detail::require_rank2("rms_norm", x);
  const std::size_t m = x.rows(), n = x.cols();
  if (gain && (gain->rows() != 1 || gain->cols() != n)) {
    throw ShapeError(detail::dims_msg("rms_norm", x.dims(), gain->dims()));
  }
  const auto& xv = x.value();
  Tensor<T> out({m, n});
  std::vector<T> inv(m);
  for (std::size_t r = 0; r < m; ++r) {
    T ms = 0;
    for (std::size_t c = 0; c < n; ++c) ms += xv[r * n + c] * xv[r * n + c];
    inv[r] = T(1) / std::sqrt(ms / T(n) + eps);
    for (std::size_t c = 0; c < n; ++c) {
      out[r * n + c] = xv[r * n + c] * inv[r] * (gain ? gain->value()[c] : T(1));
    }
  }
  const auto ix = x.id;
  const bool has_gain = gain.has_value();
  const std::size_t ig = has_gain ? gain->id : 0;
  const bool needs = x.requires_grad() || (has_gain && gain->requires_grad());
  return x.tape->record(
      "rms_norm", std::move(out), needs,
      [ix, ig, has_gain, inv, m, n](Tape<T>& tp, const Tensor<T>& g) {
        const auto& xv = tp.value(ix);
        const T* gv = has_gain ? tp.value(ig).raw() : nullptr;
        if (tp.requires_grad(ix)) {
          auto& gx = tp.grad_buffer(ix);
          for (std::size_t r = 0; r < m; ++r) {
            T dot = 0;
            for (std::size_t c = 0; c < n; ++c) {
              const T gd = g[r * n + c] * (gv ? gv[c] : T(1));
              dot += gd * xv[r * n + c];
            }
            const T ir = inv[r];
            const T k = ir * ir * ir * dot / T(n);
            for (std::size_t c = 0; c < n; ++c) {
              const T gd = g[r * n + c] * (gv ? gv[c] : T(1));
              gx[r * n + c] += ir * gd - k * xv[r * n + c];
            }
          }
        }
        if (has_gain && tp.requires_grad(ig)) {
          auto& gg = tp.grad_buffer(ig);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) gg[c] += g[r * n + c] * xv[r * n + c] * inv[r];
        }
      });
}

// tanh-approximated GELU. tanh(u) is kept for the backward pass.
template <typename T>
Var<T> gelu(Var<T> x) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  const auto& xv = x.value();
  const detail::Vec<T> xa = detail::to_vec(xv);
  auto th = std::make_shared<const detail::Vec<T>>((kC * (xa + kA * xa.cube())).tanh());
  Tensor<T> out(xv.dims());
  detail::from_vec<T>(detail::Vec<T>(T(0.5) * xa * (T(1) + *th)), out.raw());
  const auto ix = x.id;
  return x.tape->record("gelu", std::move(out), x.requires_grad(),
                        [ix, th, kC = kC, kA = kA](Tape<T>& tp, const Tensor<T>& g) {
                          const detail::Vec<T> v = detail::to_vec(tp.value(ix));
                          const auto& t = *th;
                          const detail::Vec<T> d = detail::to_vec(g) *
                                                   (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t.square()) *
                                                                              (kC * (T(1) + T(3) * kA * v.square())));
                          T* gx = tp.grad_buffer(ix).raw();
                          for (Eigen::Index i = 0; i < d.size(); ++i) gx[i] += d[i];
                        });
}

template <typename T>
Var<T> silu(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = v / (T(1) + std::exp(-v));
  const auto ix = x.id;
  return x.tape->record("silu", std::move(out), x.requires_grad(),
                        [ix](Tape<T>& tp, const Tensor<T>& g) {
                          const auto& xv = tp.value(ix);
                          auto& gx = tp.grad_buffer(ix);
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            const T s = T(1) / (T(1) + std::exp(-xv[i]));
                            gx[i] += g[i] * s * (T(1) + xv[i] * (T(1) - s));
                          }
                        });
}

// Gathers rows of table[V,d] for each id.
template <typename T>
Var<T> embedding(Var<T> table, const std::vector<int>& ids) {
  detail::require_rank2("embedding", table);
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  const std::size_t vocab = table.rows(), d = table.cols();
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw ShapeError("embedding: id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
  }
  Tensor<T> out({ids.size(), d});
  const auto& tv = table.value();
  for (std::size_t k = 0; k < ids.size(); ++k)
    std::copy(tv.raw() + ids[k] * d, tv.raw() + (ids[k] + 1) * d, out.raw() + k * d);
  const auto it = table.id;
  return table.tape->record("embedding", std::move(out), table.requires_grad(),
                            [it, ids, d](Tape<T>& tp, const Tensor<T>& g) {
                              auto& gt = tp.grad_buffer(it);
                              for (std::size_t k = 0; k < ids.size(); ++k)
                                for (std::size_t c = 0; c < d; ++c)
                                  gt[ids[k] * d + c] += g[k * d + c];
                            });
}

// Output row k = mean of input rows groups[k].
template <typename T>
Var<T> pool_rows(Var<T> x, const std::vector<std::vector<std::size_t>>& groups) {
  detail::require_rank2("pool_rows", x);
  if (groups.empty()) throw ShapeError("pool_rows: no groups");
  const std::size_t n = x.cols();
  Tensor<T> out({groups.size(), n});
  const auto& xv = x.value();
  for (std::size_t k = 0; k < groups.size(); ++k) {
    if (groups[k].empty()) throw ShapeError("pool_rows: empty group");
    for (auto r : groups[k]) {
      if (r >= x.rows()) throw ShapeError("pool_rows: row index out of range");
      for (std::size_t c = 0; c < n; ++c) out[k * n + c] += xv[r * n + c];
    }
    const T inv = T(1) / T(groups[k].size());
    for (std::size_t c = 0; c < n; ++c) out[k * n + c] *= inv;
  }
  const auto ix = x.id;
  return x.tape->record("pool_rows", std::move(out), x.requires_grad(),
                        [ix, groups, n](Tape<T>& tp, const Tensor<T>& g) {
                          auto& gx = tp.grad_buffer(ix);
                          for (std::size_t k = 0; k < groups.size(); ++k) {
                            const T inv = T(1) / T(groups[k].size());
                            for (auto r : groups[k])
                              for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += g[k * n + c] * inv;
                          }
                        });
}

template <typename T>
Var<T> sum(Var<T> x) {
  T s = 0;
  for (auto v : x.value().data()) s += v;
  const auto ix = x.id;
  return x.tape->record("sum", Tensor<T>::scalar(s), x.requires_grad(),
                        [ix](Tape<T>& tp, const Tensor<T>& g) {
                          auto& gx = tp.grad_buffer(ix);
                          for (auto& v : gx.data()) v += g[0];
                        });
}

// mean((a - b)^2) over all elements.
template <typename T>
Var<T> mse(Var<T> a, Var<T> b) {
  detail::require_same("mse", a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  T s = 0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const T d = av[i] - bv[i];
    s += d * d;
  }
  const T count = T(av.size());
  const auto ia = a.id, ib = b.id;
  return a.tape->record("mse", Tensor<T>::scalar(s / count), detail::any_grad({a, b}),
                        [ia, ib, count](Tape<T>& tp, const Tensor<T>& g) {
                          const auto& av = tp.value(ia);
                          const auto& bv = tp.value(ib);
                          const T k = T(2) * g[0] / count;
                          if (tp.requires_grad(ia)) {
                            auto& ga = tp.grad_buffer(ia);
                            for (std::size_t i = 0; i < av.size(); ++i) ga[i] += k * (av[i] - bv[i]);
                          }
                          if (tp.requires_grad(ib)) {
                            auto& gb = tp.grad_buffer(ib);
                            for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= k * (av[i] - bv[i]);
                          }
                        });
}

// Sinusoidal embedding of a 1x1 timestep: [cos(s t f_i) | sin(s t f_i)],
// f_i = max_period^(-i/half). Differentiable in t.
template <typename T>
Var<T> timestep_embedding(Var<T> t, std::size_t dim, T time_scale = T(1000),
                          T max_period = T(10000)) {
  if (t.value().size() != 1) throw ShapeError("timestep_embedding: t must be 1x1");
  if (dim < 2 || dim % 2 != 0) throw ShapeError("timestep_embedding: dim must be even");
  const std::size_t half = dim / 2;
  std::vector<T> freqs(half);
  for (std::size_t i = 0; i < half; ++i)
    freqs[i] = std::exp(-std::log(max_period) * T(i) / T(half));
  const T tv = t.value()[0] * time_scale;
  Tensor<T> out({1, dim});
  for (std::size_t i = 0; i < half; ++i) {
    out[i] = std::cos(tv * freqs[i]);
    out[half + i] = std::sin(tv * freqs[i]);
  }
  const auto it = t.id;
  return t.tape->record("timestep_embedding", std::move(out), t.requires_grad(),
                        [it, freqs, half, time_scale](Tape<T>& tp, const Tensor<T>& g) {
                          const T tv = tp.value(it)[0] * time_scale;
                          T d = 0;
                          for (std::size_t i = 0; i < half; ++i) {
                            d += -g[i] * std::sin(tv * freqs[i]) * freqs[i];
                            d += g[half + i] * std::cos(tv * freqs[i]) * freqs[i];
                          }
                          tp.grad_buffer(it)[0] += d * time_scale;
                        });
}

}  // namespace aligngen::ad
