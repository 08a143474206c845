#pragma once

// Differentiable tensor operations. Every function validates shapes, checks
// that its output is finite, and records a backward closure when any input
// requires grad and recording is enabled.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "lvfsr/tensor.hpp"

namespace lvfsr {

namespace detail {

/// Neumaier-compensated running sum. Full reductions feed losses whose
/// finite differences would otherwise be swamped by summation error.
template <typename T>
class CompensatedSum {
 public:
  void add(T v) {
    const T t = total_ + v;
    carry_ += std::abs(total_) >= std::abs(v) ? (total_ - t) + v : (v - t) + total_;
    total_ = t;
  }
  T value() const { return total_ + carry_; }

 private:
  T total_ = 0;
  T carry_ = 0;
};

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1)
      fail(ErrorKind::shape, std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                                 shape_str(b));
    out[i] = std::max(ea, eb);
  }
  return out;
}

/// Strides of `in` expressed in the index space of `out`; broadcast axes get 0.
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t axis_in = in.size() - 1 - k;
    const std::size_t axis_out = out.size() - 1 - k;
    strides[axis_out] = in[axis_in] == 1 ? 0 : stride;
    stride *= in[axis_in];
  }
  return strides;
}

/// Calls f(out_index, a_index, b_index) for every element of `out`.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t total = numel(out);
  const std::size_t rank = out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < total; ++i) {
    f(i, ia, ib);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

enum class Binary { add, sub, mul };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, Binary kind, const char* op) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), op);
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  std::vector<T> out(numel(out_shape));
  const auto& av = a.values();
  const auto& bv = b.values();
  for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    switch (kind) {
      case Binary::add: out[i] = av[ia] + bv[ib]; break;
      case Binary::sub: out[i] = av[ia] - bv[ib]; break;
      case Binary::mul: out[i] = av[ia] * bv[ib]; break;
    }
  });
  return record<T>(op, out_shape, std::move(out), {a, b},
                   [out_shape, sa, sb, kind](Node<T>& self) {
                     Node<T>& pa = *self.parents[0];
                     Node<T>& pb = *self.parents[1];
                     const auto& g = self.grad;
                     T* ga = pa.requires_grad ? pa.grad_buffer().data() : nullptr;
                     T* gb = pb.requires_grad ? pb.grad_buffer().data() : nullptr;
                     for_each_broadcast(out_shape, sa, sb,
                                        [&](std::size_t i, std::size_t ia, std::size_t ib) {
                                          switch (kind) {
                                            case Binary::add:
                                              if (ga) ga[ia] += g[i];
                                              if (gb) gb[ib] += g[i];
                                              break;
                                            case Binary::sub:
                                              if (ga) ga[ia] += g[i];
                                              if (gb) gb[ib] -= g[i];
                                              break;
                                            case Binary::mul:
                                              if (ga) ga[ia] += g[i] * pb.data[ib];
                                              if (gb) gb[ib] += g[i] * pa.data[ia];
                                              break;
                                          }
                                        });
                   });
}

}  // namespace detail

/// Elementwise with numpy-style broadcasting.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::Binary::add, "add");
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::Binary::sub, "sub");
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::Binary::mul, "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return record<T>("scale", x.shape(), std::move(out), {x}, [factor](Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * self.grad[i];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  detail::CompensatedSum<T> total;
  for (T v : x.data()) total.add(v);
  return record<T>("sum", Shape{}, {total.value()}, {x}, [](Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (auto& v : gx) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require(numel(shape) == x.size(), ErrorKind::shape,
          "reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  return record<T>("reshape", std::move(shape), x.values(), {x}, [](Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  require(x.rank() == 2, ErrorKind::shape, "transpose expects a matrix, got " + shape_str(x.shape()));
  const std::size_t rows = x.extent(0), cols = x.extent(1);
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = x[r * cols + c];
  return record<T>("transpose", Shape{cols, rows}, std::move(out), {x},
                   [rows, cols](Node<T>& self) {
                     auto& gx = self.parents[0]->grad_buffer();
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t c = 0; c < cols; ++c)
                         gx[r * cols + c] += self.grad[c * rows + r];
                   });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.extent(1) == b.extent(0), ErrorKind::shape,
          "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  std::vector<T> out(m * n, T(0));
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = av[i * k + p];
      const T* brow = &bv[p * n];
      T* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  return record<T>("matmul", Shape{m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    Node<T>& pb = *self.parents[1];
    const auto& g = self.grad;
    if (pa.requires_grad) {
      auto& ga = pa.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * pb.data[p * n + j];
          ga[i * k + p] += acc;
        }
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const T aip = pa.data[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
        }
    }
  });
}

/// y = x·wᵀ + b over the last axis. `bias` may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require(x.rank() >= 1 && weight.rank() == 2, ErrorKind::shape,
          "linear: bad ranks " + shape_str(x.shape()) + ", " + shape_str(weight.shape()));
  const std::size_t din = weight.extent(1), dout = weight.extent(0);
  require(x.shape().back() == din, ErrorKind::shape,
          "linear: input last extent " + std::to_string(x.shape().back()) + " != " +
              std::to_string(din));
  const bool has_bias = bias.defined();
  if (has_bias)
    require(bias.rank() == 1 && bias.extent(0) == dout, ErrorKind::shape,
            "linear: bias shape " + shape_str(bias.shape()));
  const std::size_t rows = x.size() / din;
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  std::vector<T> out(rows * dout);
  const auto& xv = x.values();
  const auto& wv = weight.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < dout; ++o) {
      T acc = has_bias ? bias[o] : T(0);
      const T* xr = &xv[r * din];
      const T* wr = &wv[o * din];
      for (std::size_t i = 0; i < din; ++i) acc += xr[i] * wr[i];
      out[r * dout + o] = acc;
    }
  std::vector<Tensor<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return record<T>("linear", out_shape, std::move(out), inputs,
                   [rows, din, dout, has_bias](Node<T>& self) {
                     Node<T>& px = *self.parents[0];
                     Node<T>& pw = *self.parents[1];
                     const auto& g = self.grad;
                     if (px.requires_grad) {
                       auto& gx = px.grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t o = 0; o < dout; ++o) {
                           const T go = g[r * dout + o];
                           const T* wr = &pw.data[o * din];
                           T* gr = &gx[r * din];
                           for (std::size_t i = 0; i < din; ++i) gr[i] += go * wr[i];
                         }
                     }
                     if (pw.requires_grad) {
                       auto& gw = pw.grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t o = 0; o < dout; ++o) {
                           const T go = g[r * dout + o];
                           const T* xr = &px.data[r * din];
                           T* gr = &gw[o * din];
                           for (std::size_t i = 0; i < din; ++i) gr[i] += go * xr[i];
                         }
                     }
                     if (has_bias && self.parents[2]->requires_grad) {
                       auto& gb = self.parents[2]->grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t o = 0; o < dout; ++o) gb[o] += g[r * dout + o];
                     }
                   });
}

/// Zero-padded 2-D cross-correlation over [N,Cin,H,W]. `bias` may be undefined.
/// Even kernels are accepted; shape-preserving use needs an odd kernel with pad (k-1)/2.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t pad = 0) {
  require(x.rank() == 4 && weight.rank() == 4, ErrorKind::shape,
          "conv2d: expected 4-D input and weight, got " + shape_str(x.shape()) + ", " +
              shape_str(weight.shape()));
  const std::size_t n_batch = x.extent(0), cin = x.extent(1), h = x.extent(2), w = x.extent(3);
  const std::size_t cout = weight.extent(0), kh = weight.extent(2), kw = weight.extent(3);
  require(weight.extent(1) == cin, ErrorKind::shape,
          "conv2d: weight expects " + std::to_string(weight.extent(1)) + " input channels, got " +
              std::to_string(cin));
  require(stride >= 1, ErrorKind::shape, "conv2d: stride must be positive");
  require(h + 2 * pad >= kh && w + 2 * pad >= kw, ErrorKind::shape,
          "conv2d: kernel larger than padded input");
  const bool has_bias = bias.defined();
  if (has_bias)
    require(bias.rank() == 1 && bias.extent(0) == cout, ErrorKind::shape,
            "conv2d: bias shape " + shape_str(bias.shape()));
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
  const std::size_t ow = (w + 2 * pad - kw) / stride + 1;

  struct Geometry {
    std::size_t n, cin, h, w, cout, kh, kw, oh, ow, stride, pad;
  };
  const Geometry geo{n_batch, cin, h, w, cout, kh, kw, oh, ow, stride, pad};

  // Output positions o in [lo, hi) whose input o·stride + k − pad lies inside [0, n).
  struct Range {
    std::size_t lo, hi;
  };
  auto valid = [](std::size_t out_n, std::size_t in_n, std::size_t k, std::size_t stride, std::size_t pad) {
    const std::size_t lo = pad > k ? (pad - k + stride - 1) / stride : 0;
    if (in_n + pad <= k) return Range{0, 0};
    const std::size_t hi = std::min(out_n, (in_n - 1 + pad - k) / stride + 1);
    return Range{std::min(lo, hi), hi};
  };

  // Visits every (output pixel, input pixel) pair touched by kernel tap (ky,kx).
  auto for_each_tap = [valid](const Geometry& g, std::size_t ky, std::size_t kx, auto&& f) {
    const Range ry = valid(g.oh, g.h, ky, g.stride, g.pad);
    const Range rx = valid(g.ow, g.w, kx, g.stride, g.pad);
    for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
      const std::size_t iy = oy * g.stride + ky - g.pad;
      const std::size_t o_row = oy * g.ow, i_row = iy * g.w + kx - g.pad;
      for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) f(o_row + ox, i_row + ox * g.stride);
    }
  };

  // Lowers batch item n to columns [Cin·kh·kw, oh·ow]; padding taps stay zero.
  auto im2col = [for_each_tap](const Geometry& g, const T* x, std::size_t n, std::vector<T>& col) {
    const std::size_t p = g.oh * g.ow;
    col.assign(g.cin * g.kh * g.kw * p, T(0));
    for (std::size_t ci = 0; ci < g.cin; ++ci) {
      const T* in = x + (n * g.cin + ci) * g.h * g.w;
      for (std::size_t ky = 0; ky < g.kh; ++ky)
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          T* row = &col[((ci * g.kh + ky) * g.kw + kx) * p];
          for_each_tap(g, ky, kx, [&](std::size_t o, std::size_t i) { row[o] = in[i]; });
        }
    }
  };

  const std::size_t taps = cin * kh * kw, pixels = oh * ow;
  std::vector<T> out(n_batch * cout * pixels);
  std::vector<T> col;
  const T* wv = weight.values().data();
  for (std::size_t n = 0; n < n_batch; ++n) {
    im2col(geo, x.values().data(), n, col);
    for (std::size_t co = 0; co < cout; ++co) {
      T* plane = &out[(n * cout + co) * pixels];
      std::fill(plane, plane + pixels, has_bias ? bias[co] : T(0));
      for (std::size_t j = 0; j < taps; ++j) {
        const T wt = wv[co * taps + j];
        const T* row = &col[j * pixels];
        for (std::size_t p = 0; p < pixels; ++p) plane[p] += wt * row[p];
      }
    }
  }

  std::vector<Tensor<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return record<T>(
      "conv2d", Shape{n_batch, cout, oh, ow}, std::move(out), inputs,
      [geo, has_bias, for_each_tap, im2col](Node<T>& self) {
        Node<T>& px = *self.parents[0];
        Node<T>& pw = *self.parents[1];
        const auto& g = self.grad;
        const std::size_t taps = geo.cin * geo.kh * geo.kw, pixels = geo.oh * geo.ow;
        T* gx = px.requires_grad ? px.grad_buffer().data() : nullptr;
        T* gw = pw.requires_grad ? pw.grad_buffer().data() : nullptr;
        std::vector<T> col, gcol;
        for (std::size_t n = 0; n < geo.n; ++n) {
          const T* gn = &g[n * geo.cout * pixels];
          if (gw) {
            im2col(geo, px.data.data(), n, col);
            for (std::size_t co = 0; co < geo.cout; ++co)
              for (std::size_t j = 0; j < taps; ++j) {
                const T* row = &col[j * pixels];
                const T* gplane = gn + co * pixels;
                T acc = 0;
                for (std::size_t p = 0; p < pixels; ++p) acc += gplane[p] * row[p];
                gw[co * taps + j] += acc;
              }
          }
          if (gx) {
            gcol.assign(taps * pixels, T(0));
            for (std::size_t co = 0; co < geo.cout; ++co)
              for (std::size_t j = 0; j < taps; ++j) {
                const T wt = pw.data[co * taps + j];
                T* row = &gcol[j * pixels];
                const T* gplane = gn + co * pixels;
                for (std::size_t p = 0; p < pixels; ++p) row[p] += wt * gplane[p];
              }
            for (std::size_t ci = 0; ci < geo.cin; ++ci) {
              T* gin = gx + (n * geo.cin + ci) * geo.h * geo.w;
              for (std::size_t ky = 0; ky < geo.kh; ++ky)
                for (std::size_t kx = 0; kx < geo.kw; ++kx) {
                  const T* row = &gcol[((ci * geo.kh + ky) * geo.kw + kx) * pixels];
                  for_each_tap(geo, ky, kx, [&](std::size_t o, std::size_t i) { gin[i] += row[o]; });
                }
            }
          }
        }
        if (has_bias && self.parents[2]->requires_grad) {
          auto& gb = self.parents[2]->grad_buffer();
          for (std::size_t n = 0; n < geo.n; ++n)
            for (std::size_t co = 0; co < geo.cout; ++co) {
              const T* gplane = &g[(n * geo.cout + co) * geo.oh * geo.ow];
              for (std::size_t o = 0; o < geo.oh * geo.ow; ++o) gb[co] += gplane[o];
            }
        }
      });
}

/// Normalizes over the last axis, then applies gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  require(x.rank() >= 1, ErrorKind::shape, "layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  require(gamma.rank() == 1 && gamma.extent(0) == d && beta.rank() == 1 && beta.extent(0) == d,
          ErrorKind::shape, "layer_norm: affine parameters must have extent " + std::to_string(d));
  require(eps > T(0), ErrorKind::config, "layer_norm: eps must be positive");
  const std::size_t rows = x.size() / d;
  std::vector<T> out(x.size()), xhat(x.size()), inv_std(rows);
  const auto& xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = &xv[r * d];
    T mu = 0;
    for (std::size_t i = 0; i < d; ++i) mu += xr[i];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= static_cast<T>(d);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) {
      xhat[r * d + i] = (xr[i] - mu) * inv_std[r];
      out[r * d + i] = gamma[i] * xhat[r * d + i] + beta[i];
    }
  }
  return record<T>(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        Node<T>& px = *self.parents[0];
        Node<T>& pg = *self.parents[1];
        Node<T>& pb = *self.parents[2];
        const auto& g = self.grad;
        if (pg.requires_grad || pb.requires_grad) {
          auto& gg = pg.grad_buffer();
          auto& gb = pb.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < d; ++i) {
              gg[i] += g[r * d + i] * xhat[r * d + i];
              gb[i] += g[r * d + i];
            }
        }
        if (px.requires_grad) {
          auto& gx = px.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_dxhat = 0, mean_dxhat_xhat = 0;
            for (std::size_t i = 0; i < d; ++i) {
              const T dxh = g[r * d + i] * pg.data[i];
              mean_dxhat += dxh;
              mean_dxhat_xhat += dxh * xhat[r * d + i];
            }
            mean_dxhat /= static_cast<T>(d);
            mean_dxhat_xhat /= static_cast<T>(d);
            for (std::size_t i = 0; i < d; ++i) {
              const T dxh = g[r * d + i] * pg.data[i];
              gx[r * d + i] += inv_std[r] * (dxh - mean_dxhat - xhat[r * d + i] * mean_dxhat_xhat);
            }
          }
        }
      });
}

enum class Activation { sigmoid, gelu };

/// Logistic sigmoid, kept strictly inside (0,1) even where the format would round to an endpoint.
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  const T lo = std::numeric_limits<T>::denorm_min();
  const T hi = std::nextafter(T(1), T(0));
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x[i];
    const T s = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
    out[i] = std::clamp(s, lo, hi);
  }
  return record<T>("sigmoid", x.shape(), std::move(out), {x}, [](Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const T y = self.data[i];
      gx[i] += self.grad[i] * y * (T(1) - y);
    }
  });
}

/// Exact GELU: x·Φ(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
  return record<T>("gelu", x.shape(), std::move(out), {x}, [](Node<T>& self) {
    constexpr T inv_sqrt2pi = T(0.39894228040143267794);
    Node<T>& px = *self.parents[0];
    auto& gx = px.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const T v = px.data[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      gx[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  return kind == Activation::sigmoid ? sigmoid(x) : gelu(x);
}

/// Max-subtracted softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  require(axis < x.rank(), ErrorKind::shape,
          "softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  const Shape& s = x.shape();
  const std::size_t len = s[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, x[base + k * inner]);
      T total = 0;
      for (std::size_t k = 0; k < len; ++k) {
        const T e = std::exp(x[base + k * inner] - mx);
        out[base + k * inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= total;
    }
  return record<T>("softmax", s, std::move(out), {x}, [outer, inner, len](Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T dot = 0;
        for (std::size_t k = 0; k < len; ++k)
          dot += self.grad[base + k * inner] * self.data[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t i = base + k * inner;
          gx[i] += self.data[i] * (self.grad[i] - dot);
        }
      }
  });
}

namespace detail {

struct AttentionDims {
  std::size_t t, s, d, dv, heads, dh, dvh;
};

template <typename T>
AttentionDims attention_dims(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                             std::size_t heads) {
  require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2, ErrorKind::shape,
          "attention: Q, K, V must be matrices");
  require(q.extent(1) == k.extent(1), ErrorKind::shape,
          "attention: query width " + std::to_string(q.extent(1)) + " != key width " +
              std::to_string(k.extent(1)));
  require(k.extent(0) == v.extent(0), ErrorKind::shape,
          "attention: key count " + std::to_string(k.extent(0)) + " != value count " +
              std::to_string(v.extent(0)));
  require(heads >= 1 && q.extent(1) % heads == 0 && v.extent(1) % heads == 0, ErrorKind::shape,
          "attention: widths must be divisible by " + std::to_string(heads) + " heads");
  return {q.extent(0), k.extent(0), q.extent(1), v.extent(1), heads, q.extent(1) / heads,
          v.extent(1) / heads};
}

/// Row-stochastic attention weights laid out [heads, T, S].
template <typename T>
std::vector<T> attention_probs(const AttentionDims& a, const std::vector<T>& q,
                               const std::vector<T>& k) {
  const T scale = T(1) / std::sqrt(static_cast<T>(a.dh));
  std::vector<T> probs(a.heads * a.t * a.s);
  for (std::size_t h = 0; h < a.heads; ++h)
    for (std::size_t t = 0; t < a.t; ++t) {
      T* row = &probs[(h * a.t + t) * a.s];
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t s = 0; s < a.s; ++s) {
        T dot = 0;
        for (std::size_t e = 0; e < a.dh; ++e) dot += q[t * a.d + h * a.dh + e] * k[s * a.d + h * a.dh + e];
        row[s] = dot * scale;
        mx = std::max(mx, row[s]);
      }
      T total = 0;
      for (std::size_t s = 0; s < a.s; ++s) {
        row[s] = std::exp(row[s] - mx);
        total += row[s];
      }
      for (std::size_t s = 0; s < a.s; ++s) row[s] /= total;
    }
  return probs;
}

}  // namespace detail

/// Attention weights softmax(QKᵀ/sqrt(D/heads)) as a [heads,T,S] tensor (not recorded).
template <typename T>
Tensor<T> attention_weights(const Tensor<T>& q, const Tensor<T>& k, std::size_t heads) {
  const auto dims = detail::attention_dims(q, k, k, heads);
  return Tensor<T>(Shape{heads, dims.t, dims.s}, detail::attention_probs(dims, q.values(), k.values()));
}

/// Multi-head scaled dot-product attention; heads split Q/K and V column-wise
/// and the per-head outputs are concatenated back in head order.
template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               std::size_t heads) {
  const auto a = detail::attention_dims(q, k, v, heads);
  std::vector<T> probs = detail::attention_probs(a, q.values(), k.values());
  std::vector<T> out(a.t * a.dv, T(0));
  const auto& vv = v.values();
  for (std::size_t h = 0; h < a.heads; ++h)
    for (std::size_t t = 0; t < a.t; ++t) {
      const T* row = &probs[(h * a.t + t) * a.s];
      T* orow = &out[t * a.dv + h * a.dvh];
      for (std::size_t s = 0; s < a.s; ++s) {
        const T p = row[s];
        const T* vrow = &vv[s * a.dv + h * a.dvh];
        for (std::size_t e = 0; e < a.dvh; ++e) orow[e] += p * vrow[e];
      }
    }
  return record<T>(
      "scaled_dot_attention", Shape{a.t, a.dv}, std::move(out), {q, k, v},
      [a, probs = std::move(probs)](Node<T>& self) {
        Node<T>& pq = *self.parents[0];
        Node<T>& pk = *self.parents[1];
        Node<T>& pv = *self.parents[2];
        const auto& g = self.grad;
        const T scale = T(1) / std::sqrt(static_cast<T>(a.dh));
        std::vector<T> dscore(a.s);
        for (std::size_t h = 0; h < a.heads; ++h)
          for (std::size_t t = 0; t < a.t; ++t) {
            const T* row = &probs[(h * a.t + t) * a.s];
            const T* grow = &g[t * a.dv + h * a.dvh];
            T dot = 0;
            for (std::size_t s = 0; s < a.s; ++s) {
              T dp = 0;
              const T* vrow = &pv.data[s * a.dv + h * a.dvh];
              for (std::size_t e = 0; e < a.dvh; ++e) dp += grow[e] * vrow[e];
              dscore[s] = dp;
              dot += dp * row[s];
            }
            for (std::size_t s = 0; s < a.s; ++s) dscore[s] = row[s] * (dscore[s] - dot) * scale;
            if (pv.requires_grad) {
              auto& gv = pv.grad_buffer();
              for (std::size_t s = 0; s < a.s; ++s)
                for (std::size_t e = 0; e < a.dvh; ++e) gv[s * a.dv + h * a.dvh + e] += row[s] * grow[e];
            }
            if (pq.requires_grad) {
              auto& gq = pq.grad_buffer();
              for (std::size_t s = 0; s < a.s; ++s)
                for (std::size_t e = 0; e < a.dh; ++e)
                  gq[t * a.d + h * a.dh + e] += dscore[s] * pk.data[s * a.d + h * a.dh + e];
            }
            if (pk.requires_grad) {
              auto& gk = pk.grad_buffer();
              for (std::size_t s = 0; s < a.s; ++s)
                for (std::size_t e = 0; e < a.dh; ++e)
                  gk[s * a.d + h * a.dh + e] += dscore[s] * pq.data[t * a.d + h * a.dh + e];
            }
          }
      });
}

/// Mean over spatial axes of [N,C,H,W] -> [N,C], or over tokens of [T,D] -> [D].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  std::size_t groups, span;
  Shape out_shape;
  if (x.rank() == 4) {
    groups = x.extent(0) * x.extent(1);
    span = x.extent(2) * x.extent(3);
    out_shape = {x.extent(0), x.extent(1)};
    std::vector<T> out(groups, T(0));
    for (std::size_t gidx = 0; gidx < groups; ++gidx) {
      T acc = 0;
      for (std::size_t i = 0; i < span; ++i) acc += x[gidx * span + i];
      out[gidx] = acc / static_cast<T>(span);
    }
    return record<T>("global_avg_pool", out_shape, std::move(out), {x}, [span](Node<T>& self) {
      auto& gx = self.parents[0]->grad_buffer();
      for (std::size_t gidx = 0; gidx < self.grad.size(); ++gidx)
        for (std::size_t i = 0; i < span; ++i) gx[gidx * span + i] += self.grad[gidx] / static_cast<T>(span);
    });
  }
  require(x.rank() == 2, ErrorKind::shape,
          "global_avg_pool expects [N,C,H,W] or [T,D], got " + shape_str(x.shape()));
  const std::size_t tokens = x.extent(0), d = x.extent(1);
  std::vector<T> out(d, T(0));
  for (std::size_t j = 0; j < d; ++j) {
    T acc = 0;
    for (std::size_t t = 0; t < tokens; ++t) acc += x[t * d + j];
    out[j] = acc / static_cast<T>(tokens);
  }
  return record<T>("global_avg_pool", Shape{d}, std::move(out), {x}, [tokens, d](Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t t = 0; t < tokens; ++t)
      for (std::size_t j = 0; j < d; ++j) gx[t * d + j] += self.grad[j] / static_cast<T>(tokens);
  });
}

namespace detail {
/// Index map of pixel shuffle: for each output position, the input flat index.
inline std::vector<std::size_t> pixel_shuffle_map(std::size_t n_batch, std::size_t c,
                                                  std::size_t h, std::size_t w, std::size_t r) {
  std::vector<std::size_t> map(n_batch * c * h * r * w * r);
  const std::size_t oh = h * r, ow = w * r, cin = c * r * r;
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          const std::size_t i = y % r, j = x % r;
          const std::size_t src_c = ch * r * r + i * r + j;
          map[((n * c + ch) * oh + y) * ow + x] = ((n * cin + src_c) * h + y / r) * w + x / r;
        }
  return map;
}

template <typename T>
Tensor<T> gather(const Tensor<T>& x, Shape out_shape, std::vector<std::size_t> map, const char* op) {
  std::vector<T> out(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = x[map[i]];
  return record<T>(op, std::move(out_shape), std::move(out), {x}, [map = std::move(map)](Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < map.size(); ++i) gx[map[i]] += self.grad[i];
  });
}
}  // namespace detail

/// [N, C·r², H, W] -> [N, C, rH, rW] with out[n,c,rh+i,rw+j] = in[n, c·r²+i·r+j, h, w].
template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, std::size_t r) {
  require(x.rank() == 4, ErrorKind::shape, "pixel_shuffle expects [N,C,H,W], got " + shape_str(x.shape()));
  require(r >= 1 && x.extent(1) % (r * r) == 0, ErrorKind::shape,
          "pixel_shuffle: channel count " + std::to_string(x.extent(1)) + " not divisible by " +
              std::to_string(r * r));
  const std::size_t n = x.extent(0), c = x.extent(1) / (r * r), h = x.extent(2), w = x.extent(3);
  return detail::gather(x, Shape{n, c, h * r, w * r}, detail::pixel_shuffle_map(n, c, h, w, r),
                        "pixel_shuffle");
}

/// Inverse permutation of pixel_shuffle.
template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, std::size_t r) {
  require(x.rank() == 4 && r >= 1 && x.extent(2) % r == 0 && x.extent(3) % r == 0, ErrorKind::shape,
          "pixel_unshuffle: extents of " + shape_str(x.shape()) + " not divisible by " +
              std::to_string(r));
  const std::size_t n = x.extent(0), c = x.extent(1), h = x.extent(2) / r, w = x.extent(3) / r;
  const auto forward = detail::pixel_shuffle_map(n, c, h, w, r);
  std::vector<std::size_t> inverse(forward.size());
  for (std::size_t i = 0; i < forward.size(); ++i) inverse[forward[i]] = i;
  return detail::gather(x, Shape{n, c * r * r, h, w}, std::move(inverse), "pixel_unshuffle");
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
  require(!xs.empty(), ErrorKind::shape, "concat: no inputs");
  const Shape& first = xs.front().shape();
  require(axis < first.size(), ErrorKind::shape, "concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& x : xs) {
    bool ok = x.rank() == first.size();
    for (std::size_t d = 0; ok && d < first.size(); ++d) ok = d == axis || x.extent(d) == first[d];
    require(ok, ErrorKind::shape,
            "concat: incompatible shapes " + shape_str(first) + " and " + shape_str(x.shape()));
    out_shape[axis] += x.extent(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  const std::size_t out_block = out_shape[axis] * inner;
  std::vector<T> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& x : xs) {
    offsets.push_back(offset);
    const std::size_t block = x.extent(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(&x.values()[o * block], block, &out[o * out_block + offset]);
    offset += block;
  }
  return record<T>("concat", out_shape, std::move(out), xs,
                   [outer, out_block, offsets](Node<T>& self) {
                     for (std::size_t p = 0; p < self.parents.size(); ++p) {
                       Node<T>& px = *self.parents[p];
                       if (!px.requires_grad) continue;
                       auto& gx = px.grad_buffer();
                       const std::size_t block = gx.size() / outer;
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t i = 0; i < block; ++i)
                           gx[o * block + i] += self.grad[o * out_block + offsets[p] + i];
                     }
                   });
}

/// Contiguous range [start, start+length) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  require(axis < x.rank() && length >= 1 && start + length <= x.extent(axis), ErrorKind::shape,
          "slice: range out of bounds for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= x.extent(d);
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.extent(d);
  const std::size_t in_block = x.extent(axis) * inner, out_block = length * inner;
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::vector<T> out(outer * out_block);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(&x.values()[o * in_block + start * inner], out_block, &out[o * out_block]);
  return record<T>("slice", out_shape, std::move(out), {x},
                   [outer, in_block, out_block, offset = start * inner](Node<T>& self) {
                     auto& gx = self.parents[0]->grad_buffer();
                     for (std::size_t o = 0; o < outer; ++o)
                       for (std::size_t i = 0; i < out_block; ++i)
                         gx[o * in_block + offset + i] += self.grad[o * out_block + i];
                   });
}

/// Mean absolute deviation; the subgradient at exact ties is 0.
template <typename T>
Tensor<T> l1_loss(const Tensor<T>& prediction, const Tensor<T>& target) {
  require(prediction.shape() == target.shape(), ErrorKind::shape,
          "l1_loss: " + shape_str(prediction.shape()) + " vs " + shape_str(target.shape()));
  detail::CompensatedSum<T> total;
  for (std::size_t i = 0; i < prediction.size(); ++i) total.add(std::abs(prediction[i] - target[i]));
  const T inv_n = T(1) / static_cast<T>(prediction.size());
  return record<T>("l1_loss", Shape{}, {total.value() * inv_n}, {prediction, target}, [inv_n](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    Node<T>& pb = *self.parents[1];
    const T g = self.grad[0] * inv_n;
    for (std::size_t i = 0; i < pa.data.size(); ++i) {
      const T diff = pa.data[i] - pb.data[i];
      const T sign = diff > T(0) ? T(1) : (diff < T(0) ? T(-1) : T(0));
      if (pa.requires_grad) pa.grad_buffer()[i] += g * sign;
      if (pb.requires_grad) pb.grad_buffer()[i] -= g * sign;
    }
  });
}

}  // namespace lvfsr
