"""Compiled inner loops for the convolution and batchnorm kernels.

Zero padding is handled by bounds tests, so no padded copies are materialised.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _valid(n_out, n_in, stride, pad, k):
    """Output index range [lo, hi) whose input index o * stride - pad + k lies inside [0, n_in)."""
    lo = 0
    while lo < n_out and lo * stride - pad + k < 0:
        lo += 1
    hi = n_out
    while hi > lo and (hi - 1) * stride - pad + k >= n_in:
        hi -= 1
    return lo, hi


# Indices are cast to unsigned once they are known to be in range; this drops
# numba's negative-index wraparound and lets LLVM vectorise the inner loops.
_u = np.uintp


@njit(cache=True)
def dw_forward(x, w, sh, sw, ph, pw, ho, wo):
    b_, c_, h_, w_ = x.shape
    kh, kw = w.shape[2], w.shape[3]
    out = np.zeros((b_, c_, ho, wo), dtype=x.dtype)
    for i in range(kh):
        oh0, oh1 = _valid(ho, h_, sh, ph, i)
        for j in range(kw):
            ow0, ow1 = _valid(wo, w_, sw, pw, j)
            for b in range(b_):
                for c in range(c_):
                    wv = w[c, 0, i, j]
                    ub, uc = _u(b), _u(c)
                    for oh in range(oh0, oh1):
                        ih = _u(oh * sh - ph + i)
                        for ow in range(ow0, ow1):
                            out[ub, uc, _u(oh), _u(ow)] += x[ub, uc, ih, _u(ow * sw - pw + j)] * wv
    return out


@njit(cache=True, fastmath=True)
def dw_backward(x, w, g, sh, sw, ph, pw, need_dx):
    b_, c_, h_, w_ = x.shape
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = g.shape[2], g.shape[3]
    dx = np.zeros_like(x)
    dw = np.zeros(w.shape, dtype=np.float64)
    for i in range(kh):
        oh0, oh1 = _valid(ho, h_, sh, ph, i)
        for j in range(kw):
            ow0, ow1 = _valid(wo, w_, sw, pw, j)
            for b in range(b_):
                for c in range(c_):
                    wv = w[c, 0, i, j]
                    ub, uc = _u(b), _u(c)
                    acc = 0.0
                    for oh in range(oh0, oh1):
                        ih = _u(oh * sh - ph + i)
                        for ow in range(ow0, ow1):
                            iw = _u(ow * sw - pw + j)
                            gv = g[ub, uc, _u(oh), _u(ow)]
                            acc += gv * x[ub, uc, ih, iw]
                            if need_dx:
                                dx[ub, uc, ih, iw] += gv * wv
                    dw[c, 0, i, j] += acc
    return dx, dw.astype(x.dtype)


@njit(cache=True)
def im2col(x, kh, kw, sh, sw, ph, pw, ho, wo):
    """Rows ordered (b, oh, ow); columns ordered (c, i, j)."""
    b_, c_, h_, w_ = x.shape
    cols = np.zeros((b_, ho, wo, c_, kh, kw), dtype=x.dtype)
    for i in range(kh):
        oh0, oh1 = _valid(ho, h_, sh, ph, i)
        for j in range(kw):
            ow0, ow1 = _valid(wo, w_, sw, pw, j)
            for b in range(b_):
                ub = _u(b)
                for oh in range(oh0, oh1):
                    ih = _u(oh * sh - ph + i)
                    for ow in range(ow0, ow1):
                        iw = _u(ow * sw - pw + j)
                        for c in range(c_):
                            cols[ub, _u(oh), _u(ow), _u(c), _u(i), _u(j)] = x[ub, _u(c), ih, iw]
    return cols.reshape(b_ * ho * wo, c_ * kh * kw)


@njit(cache=True)
def col2im(dcols, b_, c_, h_, w_, kh, kw, sh, sw, ph, pw, ho, wo):
    d = dcols.reshape(b_, ho, wo, c_, kh, kw)
    dx = np.zeros((b_, c_, h_, w_), dtype=dcols.dtype)
    for i in range(kh):
        oh0, oh1 = _valid(ho, h_, sh, ph, i)
        for j in range(kw):
            ow0, ow1 = _valid(wo, w_, sw, pw, j)
            for b in range(b_):
                ub = _u(b)
                for oh in range(oh0, oh1):
                    ih = _u(oh * sh - ph + i)
                    for ow in range(ow0, ow1):
                        iw = _u(ow * sw - pw + j)
                        for c in range(c_):
                            dx[ub, _u(c), ih, iw] += d[ub, _u(oh), _u(ow), _u(c), _u(i), _u(j)]
    return dx


@njit(cache=True)
def channel_moments(x):
    """Per-channel mean and biased variance of [B, C, H, W], float64 accumulation."""
    b_, c_, h_, w_ = x.shape
    n = b_ * h_ * w_
    mean = np.zeros(c_, dtype=np.float64)
    var = np.zeros(c_, dtype=np.float64)
    for c in range(c_):
        s = 0.0
        for b in range(b_):
            for i in range(h_):
                for j in range(w_):
                    s += x[b, c, i, j]
        m = s / n
        q = 0.0
        for b in range(b_):
            for i in range(h_):
                for j in range(w_):
                    d = x[b, c, i, j] - m
                    q += d * d
        mean[c] = m
        var[c] = q / n
    return mean, var


@njit(cache=True)
def bn_apply(x, mean, inv_std, gamma, beta):
    b_, c_, h_, w_ = x.shape
    xhat = np.empty_like(x)
    out = np.empty_like(x)
    for b in range(b_):
        for c in range(c_):
            m = mean[c]
            s = inv_std[c]
            ga = gamma[c]
            be = beta[c]
            for i in range(h_):
                for j in range(w_):
                    v = (x[b, c, i, j] - m) * s
                    xhat[b, c, i, j] = v
                    out[b, c, i, j] = v * ga + be
    return out, xhat


@njit(cache=True)
def bn_grad_sums(g, xhat):
    b_, c_, h_, w_ = g.shape
    s1 = np.zeros(c_, dtype=np.float64)
    s2 = np.zeros(c_, dtype=np.float64)
    for b in range(b_):
        for c in range(c_):
            a1 = 0.0
            a2 = 0.0
            for i in range(h_):
                for j in range(w_):
                    gv = g[b, c, i, j]
                    a1 += gv
                    a2 += gv * xhat[b, c, i, j]
            s1[c] += a1
            s2[c] += a2
    return s1, s2


@njit(cache=True)
def bn_input_grad(g, xhat, scale, m1, m2):
    """dx = scale * (g - m1 - xhat * m2) per channel."""
    b_, c_, h_, w_ = g.shape
    dx = np.empty_like(g)
    for b in range(b_):
        for c in range(c_):
            sc = scale[c]
            a = m1[c]
            q = m2[c]
            for i in range(h_):
                for j in range(w_):
                    dx[b, c, i, j] = sc * (g[b, c, i, j] - a - xhat[b, c, i, j] * q)
    return dx
