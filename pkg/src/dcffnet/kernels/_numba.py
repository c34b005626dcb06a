"""njit loops. Per-output reduction order: channels outer, window row-major inner.

Every kernel writes into a caller-allocated, zero-filled ``out`` so the
accumulator inherits the array dtype (f32 stays f32).
"""
import numpy as np
from numba import njit


@njit(cache=True)
def _gather(xpad, kh, kw, stride, ho, wo):
    # contiguous copies of every strided window, so inner loops stay unit-stride
    n_in = xpad.shape[0]
    cols = np.empty((n_in, kh, kw, ho, wo), dtype=xpad.dtype)
    for c in range(n_in):
        for ky in range(kh):
            for kx in range(kw):
                for y in range(ho):
                    row = xpad[c, y * stride + ky]
                    for x in range(wo):
                        cols[c, ky, kx, y, x] = row[x * stride + kx]
    return cols


@njit(cache=True)
def _windows(xpad, kh, kw, stride, ho, wo):
    if stride == 1:
        return None
    return _gather(xpad, kh, kw, stride, ho, wo)


@njit(cache=True)
def conv2d_forward(xpad, w, b, stride, out):
    # (o, c, ky, kx) outer, output row inner: each output still sums in
    # channel-then-window order, but the innermost loop vectorises
    n_out, n_in, kh, kw = w.shape
    ho, wo = out.shape[1], out.shape[2]
    if stride == 1:
        for o in range(n_out):
            for c in range(n_in):
                for ky in range(kh):
                    for kx in range(kw):
                        wv = w[o, c, ky, kx]
                        for y in range(ho):
                            row = xpad[c, y + ky]
                            orow = out[o, y]
                            for x in range(wo):
                                orow[x] += wv * row[x + kx]
    else:
        cols = _gather(xpad, kh, kw, stride, ho, wo)
        for o in range(n_out):
            for c in range(n_in):
                for ky in range(kh):
                    for kx in range(kw):
                        wv = w[o, c, ky, kx]
                        for y in range(ho):
                            row = cols[c, ky, kx, y]
                            orow = out[o, y]
                            for x in range(wo):
                                orow[x] += wv * row[x]
    for o in range(n_out):
        bo = b[o]
        for y in range(ho):
            for x in range(wo):
                out[o, y, x] += bo
    return out


@njit(cache=True)
def conv2d_backward_input(gout, w, stride, gxpad):
    n_out, n_in, kh, kw = w.shape
    ho, wo = gout.shape[1], gout.shape[2]
    if stride == 1:
        for o in range(n_out):
            for c in range(n_in):
                for ky in range(kh):
                    for kx in range(kw):
                        wv = w[o, c, ky, kx]
                        for y in range(ho):
                            grow = gout[o, y]
                            xrow = gxpad[c, y + ky]
                            for x in range(wo):
                                xrow[x + kx] += wv * grow[x]
        return gxpad
    # accumulate per window position contiguously, then scatter once
    gcols = np.zeros((n_in, kh, kw, ho, wo), dtype=gxpad.dtype)
    for o in range(n_out):
        for c in range(n_in):
            for ky in range(kh):
                for kx in range(kw):
                    wv = w[o, c, ky, kx]
                    for y in range(ho):
                        grow = gout[o, y]
                        crow = gcols[c, ky, kx, y]
                        for x in range(wo):
                            crow[x] += wv * grow[x]
    for c in range(n_in):
        for ky in range(kh):
            for kx in range(kw):
                for y in range(ho):
                    xrow = gxpad[c, y * stride + ky]
                    crow = gcols[c, ky, kx, y]
                    for x in range(wo):
                        xrow[x * stride + kx] += crow[x]
    return gxpad


@njit(cache=True)
def conv2d_backward_weight(gout, xpad, stride, gw):
    # per-column partial sums keep the inner loop free of a scalar dependency
    n_out, n_in, kh, kw = gw.shape
    ho, wo = gout.shape[1], gout.shape[2]
    cols = _windows(xpad, kh, kw, stride, ho, wo)
    part = np.zeros(wo, dtype=gw.dtype)
    for o in range(n_out):
        for c in range(n_in):
            for ky in range(kh):
                for kx in range(kw):
                    part[:] = 0
                    for y in range(ho):
                        grow = gout[o, y]
                        if stride == 1:
                            xrow = xpad[c, y + ky]
                            for x in range(wo):
                                part[x] += grow[x] * xrow[x + kx]
                        else:
                            crow = cols[c, ky, kx, y]
                            for x in range(wo):
                                part[x] += grow[x] * crow[x]
                    acc = gw[o, c, ky, kx]
                    for x in range(wo):
                        acc += part[x]
                    gw[o, c, ky, kx] = acc
    return gw


@njit(cache=True)
def xcorr_forward(search, template, out):
    n_ch, ht, wt = template.shape
    ho, wo = out.shape[1], out.shape[2]
    for c in range(n_ch):
        for i in range(ht):
            for j in range(wt):
                tv = template[c, i, j]
                for y in range(ho):
                    srow = search[c, y + i]
                    orow = out[c, y]
                    for x in range(wo):
                        orow[x] += tv * srow[x + j]
    return out


@njit(cache=True)
def xcorr_backward(gout, search, template, gsearch, gtemplate):
    n_ch, ht, wt = template.shape
    ho, wo = gout.shape[1], gout.shape[2]
    part = np.zeros(wo, dtype=gtemplate.dtype)
    for c in range(n_ch):
        for i in range(ht):
            for j in range(wt):
                tv = template[c, i, j]
                part[:] = 0
                for y in range(ho):
                    grow = gout[c, y]
                    srow = search[c, y + i]
                    gsrow = gsearch[c, y + i]
                    for x in range(wo):
                        part[x] += grow[x] * srow[x + j]
                        gsrow[x + j] += grow[x] * tv
                acc = gtemplate[c, i, j]
                for x in range(wo):
                    acc += part[x]
                gtemplate[c, i, j] = acc
    return gsearch, gtemplate


@njit(cache=True)
def resize_forward(x, c0, c1, wc0, wc1, y0, y1, wy0, wy1, x0, x1, wx0, wx1, out):
    n_c, n_y, n_x = out.shape
    for c in range(n_c):
        ca, cb = c0[c], c1[c]
        for i in range(n_y):
            ya, yb = y0[i], y1[i]
            for j in range(n_x):
                xa, xb = x0[j], x1[j]
                # x first, then y, then channel; the numpy path uses the same nesting
                v00 = x[ca, ya, xa] * wx0[j] + x[ca, ya, xb] * wx1[j]
                v01 = x[ca, yb, xa] * wx0[j] + x[ca, yb, xb] * wx1[j]
                v10 = x[cb, ya, xa] * wx0[j] + x[cb, ya, xb] * wx1[j]
                v11 = x[cb, yb, xa] * wx0[j] + x[cb, yb, xb] * wx1[j]
                v0 = v00 * wy0[i] + v01 * wy1[i]
                v1 = v10 * wy0[i] + v11 * wy1[i]
                out[c, i, j] = v0 * wc0[c] + v1 * wc1[c]
    return out


@njit(cache=True)
def resize_backward(gout, c0, c1, wc0, wc1, y0, y1, wy0, wy1, x0, x1, wx0, wx1, gx):
    n_c, n_y, n_x = gout.shape
    for c in range(n_c):
        ca, cb = c0[c], c1[c]
        for i in range(n_y):
            ya, yb = y0[i], y1[i]
            for j in range(n_x):
                xa, xb = x0[j], x1[j]
                g = gout[c, i, j]
                g0 = g * wc0[c]
                g1 = g * wc1[c]
                g00 = g0 * wy0[i]
                g01 = g0 * wy1[i]
                g10 = g1 * wy0[i]
                g11 = g1 * wy1[i]
                gx[ca, ya, xa] += g00 * wx0[j]
                gx[ca, ya, xb] += g00 * wx1[j]
                gx[ca, yb, xa] += g01 * wx0[j]
                gx[ca, yb, xb] += g01 * wx1[j]
                gx[cb, ya, xa] += g10 * wx0[j]
                gx[cb, ya, xb] += g10 * wx1[j]
                gx[cb, yb, xa] += g11 * wx0[j]
                gx[cb, yb, xb] += g11 * wx1[j]
    return gx
