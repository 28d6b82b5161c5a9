#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "pairaug/autodiff.hpp"

namespace pairaug::nn {

// ---------------------------------------------------------------------------
// conv / pool / resize on [N, C, H, W]
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
void im2col(const S* img, int64_t cin, int64_t h, int64_t w, int64_t kh, int64_t kw, int64_t stride,
            int64_t pad, int64_t hout, int64_t wout, S* cols) {
  // cols laid out [cin*kh*kw, hout*wout] row-major
  const int64_t hw = hout * wout;
  for (int64_t c = 0; c < cin; ++c) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        S* dst = cols + ((c * kh + ki) * kw + kj) * hw;
        for (int64_t oy = 0; oy < hout; ++oy) {
          const int64_t iy = oy * stride + ki - pad;
          for (int64_t ox = 0; ox < wout; ++ox) {
            const int64_t ix = ox * stride + kj - pad;
            dst[oy * wout + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                      ? img[(c * h + iy) * w + ix]
                                      : S(0);
          }
        }
      }
    }
  }
}

template <typename S>
void col2im_add(const S* cols, int64_t cin, int64_t h, int64_t w, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t hout, int64_t wout, S* img) {
  const int64_t hw = hout * wout;
  for (int64_t c = 0; c < cin; ++c) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        const S* src = cols + ((c * kh + ki) * kw + kj) * hw;
        for (int64_t oy = 0; oy < hout; ++oy) {
          const int64_t iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= h) continue;
          for (int64_t ox = 0; ox < wout; ++ox) {
            const int64_t ix = ox * stride + kj - pad;
            if (ix < 0 || ix >= w) continue;
            img[(c * h + iy) * w + ix] += src[oy * wout + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D convolution, weight [cout, cin, kh, kw], bias [cout], x [n, cin, h, w].
template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, int64_t stride,
              int64_t pad) {
  PAIRAUG_CHECK(x->value.rank() == 4 && weight->value.rank() == 4, NumericError,
                "conv2d expects rank-4 input and weight");
  const int64_t n = x->value.dim(0), cin = x->value.dim(1), h = x->value.dim(2), w = x->value.dim(3);
  const int64_t cout = weight->value.dim(0), kh = weight->value.dim(2), kw = weight->value.dim(3);
  PAIRAUG_CHECK(weight->value.dim(1) == cin, NumericError, "conv2d: cin mismatch");
  PAIRAUG_CHECK(bias->value.numel() == cout, NumericError, "conv2d: bias size mismatch");
  const int64_t hout = (h + 2 * pad - kh) / stride + 1;
  const int64_t wout = (w + 2 * pad - kw) / stride + 1;
  PAIRAUG_CHECK(hout > 0 && wout > 0, NumericError, "conv2d: empty output");
  const int64_t kdim = cin * kh * kw, hw = hout * wout;

  Tensor<S> out({n, cout, hout, wout});
  Tensor<S> cols({n, kdim, hw});
  detail::ECMap<S> wm(weight->value.data.data(), cout, kdim);
  for (int64_t s = 0; s < n; ++s) {
    S* cp = cols.data.data() + s * kdim * hw;
    detail::im2col(x->value.data.data() + s * cin * h * w, cin, h, w, kh, kw, stride, pad, hout,
                   wout, cp);
    detail::EMap<S> om(out.data.data() + s * cout * hw, cout, hw);
    om.noalias() = wm * detail::ECMap<S>(cp, kdim, hw);
    for (int64_t c = 0; c < cout; ++c)
      om.row(c).array() += bias->value.data[static_cast<size_t>(c)];
  }
  return detail::make_op<S>(
      std::move(out), {x, weight, bias},
      [x, weight, bias, n, cin, h, w, cout, kh, kw, stride, pad, hout, wout, kdim, hw,
       cols = std::move(cols)](Node<S>& self) {
        if (x->requires_grad) x->ensure_grad();
        if (weight->requires_grad) weight->ensure_grad();
        if (bias->requires_grad) bias->ensure_grad();
        detail::ECMap<S> wm(weight->value.data.data(), cout, kdim);
        Tensor<S> dcols({kdim, hw});
        for (int64_t s = 0; s < n; ++s) {
          detail::ECMap<S> dy(self.grad.data.data() + s * cout * hw, cout, hw);
          const S* cp = cols.data.data() + s * kdim * hw;
          if (bias->requires_grad) {
            // sequential sum: Eigen's redux order depends on pointer
            // alignment, which would break run-to-run determinism
            const S* dyp = self.grad.data.data() + s * cout * hw;
            for (int64_t c = 0; c < cout; ++c) {
              S acc = S(0);
              for (int64_t j = 0; j < hw; ++j) acc += dyp[c * hw + j];
              bias->grad.data[static_cast<size_t>(c)] += acc;
            }
          }
          if (weight->requires_grad) {
            detail::EMap<S> dw(weight->grad.data.data(), cout, kdim);
            dw.noalias() += dy * detail::ECMap<S>(cp, kdim, hw).transpose();
          }
          if (x->requires_grad) {
            detail::EMap<S> dc(dcols.data.data(), kdim, hw);
            dc.noalias() = wm.transpose() * dy;
            detail::col2im_add(dcols.data.data(), cin, h, w, kh, kw, stride, pad, hout, wout,
                               x->grad.data.data() + s * cin * h * w);
          }
        }
      });
}

/// 2x2 average pooling with stride 2.
template <typename S>
Var<S> avgpool2(const Var<S>& x) {
  PAIRAUG_CHECK(x->value.rank() == 4, NumericError, "avgpool2 expects rank 4");
  const int64_t n = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2), w = x->value.dim(3);
  PAIRAUG_CHECK(h % 2 == 0 && w % 2 == 0, NumericError, "avgpool2 expects even spatial dims");
  const int64_t ho = h / 2, wo = w / 2;
  Tensor<S> out({n, c, ho, wo});
  for (int64_t i = 0; i < n * c; ++i) {
    const S* src = x->value.data.data() + i * h * w;
    S* dst = out.data.data() + i * ho * wo;
    for (int64_t y = 0; y < ho; ++y)
      for (int64_t z = 0; z < wo; ++z)
        dst[y * wo + z] = (src[(2 * y) * w + 2 * z] + src[(2 * y) * w + 2 * z + 1] +
                           src[(2 * y + 1) * w + 2 * z] + src[(2 * y + 1) * w + 2 * z + 1]) /
                          S(4);
  }
  return detail::make_op<S>(std::move(out), {x}, [x, n, c, h, w, ho, wo](Node<S>& self) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (int64_t i = 0; i < n * c; ++i) {
      const S* dy = self.grad.data.data() + i * ho * wo;
      S* dx = x->grad.data.data() + i * h * w;
      for (int64_t y = 0; y < ho; ++y)
        for (int64_t z = 0; z < wo; ++z) {
          const S g = dy[y * wo + z] / S(4);
          dx[(2 * y) * w + 2 * z] += g;
          dx[(2 * y) * w + 2 * z + 1] += g;
          dx[(2 * y + 1) * w + 2 * z] += g;
          dx[(2 * y + 1) * w + 2 * z + 1] += g;
        }
    }
  });
}

/// Nearest-neighbour 2x upsample.
template <typename S>
Var<S> upsample_nearest2(const Var<S>& x) {
  PAIRAUG_CHECK(x->value.rank() == 4, NumericError, "upsample_nearest2 expects rank 4");
  const int64_t n = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2), w = x->value.dim(3);
  const int64_t ho = h * 2, wo = w * 2;
  Tensor<S> out({n, c, ho, wo});
  for (int64_t i = 0; i < n * c; ++i) {
    const S* src = x->value.data.data() + i * h * w;
    S* dst = out.data.data() + i * ho * wo;
    for (int64_t y = 0; y < ho; ++y)
      for (int64_t z = 0; z < wo; ++z) dst[y * wo + z] = src[(y / 2) * w + (z / 2)];
  }
  return detail::make_op<S>(std::move(out), {x}, [x, n, c, h, w, ho, wo](Node<S>& self) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (int64_t i = 0; i < n * c; ++i) {
      const S* dy = self.grad.data.data() + i * ho * wo;
      S* dx = x->grad.data.data() + i * h * w;
      for (int64_t y = 0; y < ho; ++y)
        for (int64_t z = 0; z < wo; ++z) dx[(y / 2) * w + (z / 2)] += dy[y * wo + z];
    }
  });
}

template <typename S>
Var<S> concat_channels(const Var<S>& a, const Var<S>& b) {
  PAIRAUG_CHECK(a->value.rank() == 4 && b->value.rank() == 4 && a->value.dim(0) == b->value.dim(0) &&
                    a->value.dim(2) == b->value.dim(2) && a->value.dim(3) == b->value.dim(3),
                NumericError, "concat_channels: shape mismatch");
  const int64_t n = a->value.dim(0), ca = a->value.dim(1), cb = b->value.dim(1);
  const int64_t hw = a->value.dim(2) * a->value.dim(3);
  Tensor<S> out({n, ca + cb, a->value.dim(2), a->value.dim(3)});
  for (int64_t s = 0; s < n; ++s) {
    std::copy(a->value.data.begin() + s * ca * hw, a->value.data.begin() + (s + 1) * ca * hw,
              out.data.begin() + s * (ca + cb) * hw);
    std::copy(b->value.data.begin() + s * cb * hw, b->value.data.begin() + (s + 1) * cb * hw,
              out.data.begin() + s * (ca + cb) * hw + ca * hw);
  }
  return detail::make_op<S>(std::move(out), {a, b}, [a, b, n, ca, cb, hw](Node<S>& self) {
    for (int64_t s = 0; s < n; ++s) {
      if (a->requires_grad) {
        a->ensure_grad();
        for (int64_t i = 0; i < ca * hw; ++i)
          a->grad.data[static_cast<size_t>(s * ca * hw + i)] +=
              self.grad.data[static_cast<size_t>(s * (ca + cb) * hw + i)];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (int64_t i = 0; i < cb * hw; ++i)
          b->grad.data[static_cast<size_t>(s * cb * hw + i)] +=
              self.grad.data[static_cast<size_t>(s * (ca + cb) * hw + ca * hw + i)];
      }
    }
  });
}

/// Adds v [n, c] across the spatial extent of x [n, c, h, w] (time-embedding
/// injection in residual blocks).
template <typename S>
Var<S> add_channel_bias(const Var<S>& x, const Var<S>& v) {
  PAIRAUG_CHECK(x->value.rank() == 4 && v->value.rank() == 2 && v->value.dim(0) == x->value.dim(0) &&
                    v->value.dim(1) == x->value.dim(1),
                NumericError, "add_channel_bias: shape mismatch");
  const int64_t nc = x->value.dim(0) * x->value.dim(1);
  const int64_t hw = x->value.dim(2) * x->value.dim(3);
  Tensor<S> out = x->value;
  for (int64_t i = 0; i < nc; ++i) {
    const S b = v->value.data[static_cast<size_t>(i)];
    S* dst = out.data.data() + i * hw;
    for (int64_t j = 0; j < hw; ++j) dst[j] += b;
  }
  return detail::make_op<S>(std::move(out), {x, v}, [x, v, nc, hw](Node<S>& self) {
    if (x->requires_grad) {
      x->ensure_grad();
      for (int64_t i = 0; i < self.grad.numel(); ++i) x->grad.data[i] += self.grad.data[i];
    }
    if (v->requires_grad) {
      v->ensure_grad();
      for (int64_t i = 0; i < nc; ++i) {
        const S* dy = self.grad.data.data() + i * hw;
        S acc = S(0);
        for (int64_t j = 0; j < hw; ++j) acc += dy[j];
        v->grad.data[static_cast<size_t>(i)] += acc;
      }
    }
  });
}

/// GroupNorm over [n, c, h, w] with per-channel affine.
template <typename S>
Var<S> group_norm(const Var<S>& x, int64_t groups, const Var<S>& gamma, const Var<S>& beta,
                  S eps = S(1e-5)) {
  PAIRAUG_CHECK(x->value.rank() == 4, NumericError, "group_norm expects rank 4");
  const int64_t n = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2), w = x->value.dim(3);
  PAIRAUG_CHECK(groups > 0 && c % groups == 0, NumericError, "group_norm: channels (", c,
                ") not divisible by groups (", groups, ")");
  PAIRAUG_CHECK(gamma->value.numel() == c && beta->value.numel() == c, NumericError,
                "group_norm: affine shape mismatch");
  const int64_t cg = c / groups, hw = h * w, m = cg * hw;
  Tensor<S> out({n, c, h, w});
  Tensor<S> xhat({n, c, h, w});
  std::vector<S> inv_sigma(static_cast<size_t>(n * groups));
  for (int64_t s = 0; s < n; ++s) {
    for (int64_t g = 0; g < groups; ++g) {
      const S* base = x->value.data.data() + (s * c + g * cg) * hw;
      S mu = S(0);
      for (int64_t i = 0; i < m; ++i) mu += base[i];
      mu /= static_cast<S>(m);
      S var = S(0);
      for (int64_t i = 0; i < m; ++i) var += (base[i] - mu) * (base[i] - mu);
      var /= static_cast<S>(m);
      const S is = S(1) / std::sqrt(var + eps);
      inv_sigma[static_cast<size_t>(s * groups + g)] = is;
      S* xh = xhat.data.data() + (s * c + g * cg) * hw;
      S* o = out.data.data() + (s * c + g * cg) * hw;
      for (int64_t ch = 0; ch < cg; ++ch) {
        const S ga = gamma->value.data[static_cast<size_t>(g * cg + ch)];
        const S be = beta->value.data[static_cast<size_t>(g * cg + ch)];
        for (int64_t j = 0; j < hw; ++j) {
          const S xv = (base[ch * hw + j] - mu) * is;
          xh[ch * hw + j] = xv;
          o[ch * hw + j] = xv * ga + be;
        }
      }
    }
  }
  return detail::make_op<S>(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, n, c, groups, cg, hw, m, xhat = std::move(xhat),
       inv_sigma = std::move(inv_sigma)](Node<S>& self) {
        if (x->requires_grad) x->ensure_grad();
        if (gamma->requires_grad) gamma->ensure_grad();
        if (beta->requires_grad) beta->ensure_grad();
        for (int64_t s = 0; s < n; ++s) {
          for (int64_t g = 0; g < groups; ++g) {
            const int64_t off = (s * c + g * cg) * hw;
            const S* dy = self.grad.data.data() + off;
            const S* xh = xhat.data.data() + off;
            if (gamma->requires_grad || beta->requires_grad) {
              for (int64_t ch = 0; ch < cg; ++ch) {
                S dg = S(0), db = S(0);
                for (int64_t j = 0; j < hw; ++j) {
                  dg += dy[ch * hw + j] * xh[ch * hw + j];
                  db += dy[ch * hw + j];
                }
                if (gamma->requires_grad) gamma->grad.data[static_cast<size_t>(g * cg + ch)] += dg;
                if (beta->requires_grad) beta->grad.data[static_cast<size_t>(g * cg + ch)] += db;
              }
            }
            if (x->requires_grad) {
              S mean_a = S(0), mean_ax = S(0);
              for (int64_t ch = 0; ch < cg; ++ch) {
                const S ga = gamma->value.data[static_cast<size_t>(g * cg + ch)];
                for (int64_t j = 0; j < hw; ++j) {
                  const S a = dy[ch * hw + j] * ga;
                  mean_a += a;
                  mean_ax += a * xh[ch * hw + j];
                }
              }
              mean_a /= static_cast<S>(m);
              mean_ax /= static_cast<S>(m);
              const S is = inv_sigma[static_cast<size_t>(s * groups + g)];
              S* dx = x->grad.data.data() + off;
              for (int64_t ch = 0; ch < cg; ++ch) {
                const S ga = gamma->value.data[static_cast<size_t>(g * cg + ch)];
                for (int64_t j = 0; j < hw; ++j) {
                  const S a = dy[ch * hw + j] * ga;
                  dx[ch * hw + j] += is * (a - mean_a - xh[ch * hw + j] * mean_ax);
                }
              }
            }
          }
        }
      });
}

/// [n, c, h, w] -> [n*h*w, c] token layout (spatial positions as rows).
template <typename S>
Var<S> nchw_to_tokens(const Var<S>& x) {
  PAIRAUG_CHECK(x->value.rank() == 4, NumericError, "nchw_to_tokens expects rank 4");
  const int64_t n = x->value.dim(0), c = x->value.dim(1), hw = x->value.dim(2) * x->value.dim(3);
  Tensor<S> out({n * hw, c});
  for (int64_t s = 0; s < n; ++s)
    for (int64_t ch = 0; ch < c; ++ch) {
      const S* src = x->value.data.data() + (s * c + ch) * hw;
      for (int64_t j = 0; j < hw; ++j) out.data[static_cast<size_t>((s * hw + j) * c + ch)] = src[j];
    }
  return detail::make_op<S>(std::move(out), {x}, [x, n, c, hw](Node<S>& self) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (int64_t s = 0; s < n; ++s)
      for (int64_t ch = 0; ch < c; ++ch) {
        S* dst = x->grad.data.data() + (s * c + ch) * hw;
        for (int64_t j = 0; j < hw; ++j)
          dst[j] += self.grad.data[static_cast<size_t>((s * hw + j) * c + ch)];
      }
  });
}

/// Inverse of nchw_to_tokens.
template <typename S>
Var<S> tokens_to_nchw(const Var<S>& x, int64_t n, int64_t h, int64_t w) {
  PAIRAUG_CHECK(x->value.rank() == 2 && x->value.dim(0) == n * h * w, NumericError,
                "tokens_to_nchw: row count mismatch");
  const int64_t c = x->value.dim(1), hw = h * w;
  Tensor<S> out({n, c, h, w});
  for (int64_t s = 0; s < n; ++s)
    for (int64_t j = 0; j < hw; ++j) {
      const S* src = x->value.data.data() + (s * hw + j) * c;
      for (int64_t ch = 0; ch < c; ++ch) out.data[static_cast<size_t>((s * c + ch) * hw + j)] = src[ch];
    }
  return detail::make_op<S>(std::move(out), {x}, [x, n, c, hw](Node<S>& self) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (int64_t s = 0; s < n; ++s)
      for (int64_t j = 0; j < hw; ++j) {
        S* dst = x->grad.data.data() + (s * hw + j) * c;
        for (int64_t ch = 0; ch < c; ++ch)
          dst[ch] += self.grad.data[static_cast<size_t>((s * c + ch) * hw + j)];
      }
  });
}

// ---------------------------------------------------------------------------
// fused masked attention
// ---------------------------------------------------------------------------

/// Observes and optionally replaces the row-stochastic attention map of one
/// sample before it multiplies V. Replacement is a sampling-time facility;
/// attaching a hook to a graph built with grad enabled is a state error.
template <typename S>
using AttnHook = std::function<void(int64_t sample, Tensor<S>& probs)>;

/// Scaled dot-product attention over a packed batch. q is [n*tq, dk], k is
/// [n*tk, dk], v is [n*tk, dv]; key_valid holds one byte per packed key row.
/// Returns [n*tq, dv].
///
/// Masked keys are excluded from the softmax exactly (probability 0), so
/// every map row sums to one in any precision. A sample whose keys are all
/// masked attends uniformly over them, which turns empty text into the
/// learned null conditioning: the output is the mean padding value and no
/// gradient reaches the logits.
template <typename S>
Var<S> masked_attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, int64_t n, int64_t tq,
                        int64_t tk, const std::vector<uint8_t>& key_valid, S scale,
                        const AttnHook<S>* hook = nullptr) {
  PAIRAUG_CHECK(q->value.rank() == 2 && k->value.rank() == 2 && v->value.rank() == 2, NumericError,
                "masked_attention expects rank-2 inputs");
  const int64_t dk = q->value.dim(1), dv = v->value.dim(1);
  PAIRAUG_CHECK(q->value.dim(0) == n * tq && k->value.dim(0) == n * tk && v->value.dim(0) == n * tk,
                NumericError, "masked_attention: packed shape mismatch");
  PAIRAUG_CHECK(k->value.dim(1) == dk, NumericError, "masked_attention: key width mismatch");
  PAIRAUG_CHECK(static_cast<int64_t>(key_valid.size()) == n * tk, NumericError,
                "masked_attention: key_valid size mismatch");
  const bool grads = GradMode::enabled() &&
                     (q->requires_grad || k->requires_grad || v->requires_grad);
  PAIRAUG_CHECK(hook == nullptr || !grads, StateError,
                "masked_attention: map hooks are only valid with grads disabled");

  std::vector<uint8_t> has_valid(static_cast<size_t>(n), 0);
  for (int64_t s = 0; s < n; ++s)
    for (int64_t cidx = 0; cidx < tk; ++cidx)
      if (key_valid[static_cast<size_t>(s * tk + cidx)]) has_valid[static_cast<size_t>(s)] = 1;

  Tensor<S> out({n * tq, dv});
  Tensor<S> probs({n, tq, tk});
  for (int64_t s = 0; s < n; ++s) {
    detail::ECMap<S> qm(q->value.data.data() + s * tq * dk, tq, dk);
    detail::ECMap<S> km(k->value.data.data() + s * tk * dk, tk, dk);
    Tensor<S> pm({tq, tk});
    detail::EMap<S> pmap(pm.data.data(), tq, tk);
    pmap.noalias() = qm * km.transpose() * scale;
    const uint8_t* valid = key_valid.data() + s * tk;
    for (int64_t r = 0; r < tq; ++r) {
      S* row = pm.data.data() + r * tk;
      if (!has_valid[static_cast<size_t>(s)]) {
        for (int64_t cidx = 0; cidx < tk; ++cidx) row[cidx] = S(1) / static_cast<S>(tk);
        continue;
      }
      S mx = -std::numeric_limits<S>::infinity();
      for (int64_t cidx = 0; cidx < tk; ++cidx)
        if (valid[cidx]) mx = std::max(mx, row[cidx]);
      S sum = S(0);
      for (int64_t cidx = 0; cidx < tk; ++cidx) {
        row[cidx] = valid[cidx] ? std::exp(row[cidx] - mx) : S(0);
        sum += row[cidx];
      }
      for (int64_t cidx = 0; cidx < tk; ++cidx) row[cidx] /= sum;
    }
    if (hook && *hook) (*hook)(s, pm);
    std::copy(pm.data.begin(), pm.data.end(), probs.data.begin() + s * tq * tk);
    detail::ECMap<S> vm(v->value.data.data() + s * tk * dv, tk, dv);
    detail::EMap<S> om(out.data.data() + s * tq * dv, tq, dv);
    om.noalias() = detail::ECMap<S>(pm.data.data(), tq, tk) * vm;
  }
  return detail::make_op<S>(
      std::move(out), {q, k, v},
      [q, k, v, n, tq, tk, dk, dv, scale, probs = std::move(probs),
       has_valid = std::move(has_valid)](Node<S>& self) {
        if (q->requires_grad) q->ensure_grad();
        if (k->requires_grad) k->ensure_grad();
        if (v->requires_grad) v->ensure_grad();
        Tensor<S> dp({tq, tk});
        Tensor<S> dl({tq, tk});
        for (int64_t s = 0; s < n; ++s) {
          detail::ECMap<S> dy(self.grad.data.data() + s * tq * dv, tq, dv);
          detail::ECMap<S> pm(probs.data.data() + s * tq * tk, tq, tk);
          detail::ECMap<S> vm(v->value.data.data() + s * tk * dv, tk, dv);
          if (v->requires_grad) {
            detail::EMap<S> dvm(v->grad.data.data() + s * tk * dv, tk, dv);
            dvm.noalias() += pm.transpose() * dy;
          }
          // Uniform rows of an all-masked sample are constants: no logit grad.
          if ((q->requires_grad || k->requires_grad) && has_valid[static_cast<size_t>(s)]) {
            detail::EMap<S> dpm(dp.data.data(), tq, tk);
            dpm.noalias() = dy * vm.transpose();
            for (int64_t r = 0; r < tq; ++r) {
              const S* pr = probs.data.data() + (s * tq + r) * tk;
              const S* dpr = dp.data.data() + r * tk;
              S dot = S(0);
              for (int64_t cidx = 0; cidx < tk; ++cidx) dot += pr[cidx] * dpr[cidx];
              S* dlr = dl.data.data() + r * tk;
              for (int64_t cidx = 0; cidx < tk; ++cidx)
                dlr[cidx] = pr[cidx] * (dpr[cidx] - dot) * scale;
            }
            detail::ECMap<S> dlm(dl.data.data(), tq, tk);
            detail::ECMap<S> qm(q->value.data.data() + s * tq * dk, tq, dk);
            detail::ECMap<S> km(k->value.data.data() + s * tk * dk, tk, dk);
            if (q->requires_grad) {
              detail::EMap<S> dqm(q->grad.data.data() + s * tq * dk, tq, dk);
              dqm.noalias() += dlm * km;
            }
            if (k->requires_grad) {
              detail::EMap<S> dkm(k->grad.data.data() + s * tk * dk, tk, dk);
              dkm.noalias() += dlm.transpose() * qm;
            }
          }
        }
      });
}

}  // namespace pairaug::nn
