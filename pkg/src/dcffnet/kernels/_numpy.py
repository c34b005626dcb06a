"""Pure-numpy fallback.

Vectorised over output positions while looping the reduction index in the
same order as the njit kernels, which keeps forward results bit-identical.
"""
import numpy as np


def _window(a, ky, kx, stride, ho, wo):
    return a[..., ky:ky + stride * (ho - 1) + 1:stride, kx:kx + stride * (wo - 1) + 1:stride]


def conv2d_forward(xpad, w, b, stride, out):
    n_out, n_in, kh, kw = w.shape
    ho, wo = out.shape[1], out.shape[2]
    for c in range(n_in):
        for ky in range(kh):
            for kx in range(kw):
                out += w[:, c, ky, kx, None, None] * _window(xpad[c], ky, kx, stride, ho, wo)[None]
    out += b[:, None, None]
    return out


def conv2d_backward_input(gout, w, stride, gxpad):
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = gout.shape[1], gout.shape[2]
    for ky in range(kh):
        for kx in range(kw):
            _window(gxpad, ky, kx, stride, ho, wo)[...] += np.einsum("oc,oyx->cyx", w[:, :, ky, kx], gout)
    return gxpad


def conv2d_backward_weight(gout, xpad, stride, gw):
    kh, kw = gw.shape[2], gw.shape[3]
    ho, wo = gout.shape[1], gout.shape[2]
    for ky in range(kh):
        for kx in range(kw):
            gw[:, :, ky, kx] += np.einsum("oyx,cyx->oc", gout, _window(xpad, ky, kx, stride, ho, wo))
    return gw


def xcorr_forward(search, template, out):
    ht, wt = template.shape[1], template.shape[2]
    ho, wo = out.shape[1], out.shape[2]
    for i in range(ht):
        for j in range(wt):
            out += template[:, i, j, None, None] * search[:, i:i + ho, j:j + wo]
    return out


def xcorr_backward(gout, search, template, gsearch, gtemplate):
    ht, wt = template.shape[1], template.shape[2]
    ho, wo = gout.shape[1], gout.shape[2]
    for i in range(ht):
        for j in range(wt):
            win = search[:, i:i + ho, j:j + wo]
            gtemplate[:, i, j] += np.einsum("cyx,cyx->c", gout, win)
            gsearch[:, i:i + ho, j:j + wo] += gout * template[:, i, j, None, None]
    return gsearch, gtemplate


def resize_forward(x, c0, c1, wc0, wc1, y0, y1, wy0, wy1, x0, x1, wx0, wx1, out):
    along_x = x[:, :, x0] * wx0 + x[:, :, x1] * wx1
    along_y = along_x[:, y0, :] * wy0[:, None] + along_x[:, y1, :] * wy1[:, None]
    out[...] = along_y[c0] * wc0[:, None, None] + along_y[c1] * wc1[:, None, None]
    return out


def _adjoint(idx0, idx1, w0, w1, n_in):
    m = np.zeros((len(idx0), n_in), dtype=w0.dtype)
    np.add.at(m, (np.arange(len(idx0)), idx0), w0)
    np.add.at(m, (np.arange(len(idx1)), idx1), w1)
    return m


def resize_backward(gout, c0, c1, wc0, wc1, y0, y1, wy0, wy1, x0, x1, wx0, wx1, gx):
    mc = _adjoint(c0, c1, wc0, wc1, gx.shape[0])
    my = _adjoint(y0, y1, wy0, wy1, gx.shape[1])
    mx = _adjoint(x0, x1, wx0, wx1, gx.shape[2])
    gx += np.einsum("cyx,cC,yY,xX->CYX", gout, mc, my, mx, optimize=True)
    return gx
