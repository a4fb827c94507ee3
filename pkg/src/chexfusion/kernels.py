"""Hot inner loops: patch extraction, pooling and tie-averaged ranks.

Each kernel exists twice, as a numba-compiled loop nest and as a vectorised
numpy routine. The module-level names dispatch to one of them depending on
:data:`chexfusion._accel.USE_NUMBA`. Both variants accumulate in the same
order, so they agree bit for bit on the same inputs.

Patch layout used throughout: ``cols[(c*kh + i)*kw + j, (n*OH + oh)*OW + ow]``
holds ``xpad[n, c, i + stride*oh, j + stride*ow]``.
"""

import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# numpy implementations


def _im2col_np(xpad, kh, kw, stride, oh, ow):
    n, c = xpad.shape[:2]
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=xpad.dtype)
    for i in range(kh):
        for j in range(kw):
            win = xpad[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
            cols[:, i, j] = win.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * oh * ow)


def _col2im_np(dcols, n, c, hp, wp, kh, kw, stride, oh, ow):
    d = dcols.reshape(c, kh, kw, n, oh, ow)
    dxpad = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxpad[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += d[:, i, j].transpose(
                1, 0, 2, 3
            )
    return dxpad


def _maxpool_fwd_np(xpad, kh, kw, stride, oh, ow):
    n, c = xpad.shape[:2]
    win = np.empty((n, c, oh, ow, kh * kw), dtype=xpad.dtype)
    for i in range(kh):
        for j in range(kw):
            win[..., i * kw + j] = xpad[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    # np.argmax returns the first maximum, i.e. the first in row-major window order
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg.astype(np.int64)


def _maxpool_bwd_np(dout, arg, hp, wp, kh, kw, stride):
    n, c, oh, ow = dout.shape
    dxpad = np.zeros((n, c, hp, wp), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            routed = np.where(arg == i * kw + j, dout, 0).astype(dout.dtype)
            dxpad[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += routed
    return dxpad


def _window_sum_np(x, kh, kw, stride, oh, ow):
    n, c = x.shape[:2]
    acc = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            acc += x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return acc


def _window_spread_np(share, h, w, kh, kw, stride):
    n, c, oh, ow = share.shape
    dx = np.zeros((n, c, h, w), dtype=share.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += share
    return dx


def _average_ranks_np(values):
    n = values.shape[0]
    order = np.argsort(values, kind="mergesort")
    ranked = values[order]
    # start index of each run of equal values
    starts = np.flatnonzero(np.r_[True, ranked[1:] != ranked[:-1]])
    ends = np.r_[starts[1:], n]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


# ---------------------------------------------------------------------------
# numba implementations


@njit
def _im2col_nb(xpad, kh, kw, stride, oh, ow):
    n, c = xpad.shape[0], xpad.shape[1]
    cols = np.empty((c * kh * kw, n * oh * ow), dtype=xpad.dtype)
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                r = (ci * kh + i) * kw + j
                for ni in range(n):
                    for y in range(oh):
                        base = (ni * oh + y) * ow
                        row = i + stride * y
                        for x in range(ow):
                            cols[r, base + x] = xpad[ni, ci, row, j + stride * x]
    return cols


@njit
def _col2im_nb(dcols, n, c, hp, wp, kh, kw, stride, oh, ow):
    dxpad = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                r = (ci * kh + i) * kw + j
                for ni in range(n):
                    for y in range(oh):
                        base = (ni * oh + y) * ow
                        row = i + stride * y
                        for x in range(ow):
                            dxpad[ni, ci, row, j + stride * x] += dcols[r, base + x]
    return dxpad


@njit
def _maxpool_fwd_nb(xpad, kh, kw, stride, oh, ow):
    n, c = xpad.shape[0], xpad.shape[1]
    out = np.empty((n, c, oh, ow), dtype=xpad.dtype)
    arg = np.empty((n, c, oh, ow), dtype=np.int64)
    for ni in range(n):
        for ci in range(c):
            for y in range(oh):
                for x in range(ow):
                    best = xpad[ni, ci, stride * y, stride * x]
                    best_k = 0
                    for i in range(kh):
                        for j in range(kw):
                            v = xpad[ni, ci, stride * y + i, stride * x + j]
                            if v > best:
                                best = v
                                best_k = i * kw + j
                    out[ni, ci, y, x] = best
                    arg[ni, ci, y, x] = best_k
    return out, arg


@njit
def _maxpool_bwd_nb(dout, arg, hp, wp, kh, kw, stride):
    n, c, oh, ow = dout.shape
    dxpad = np.zeros((n, c, hp, wp), dtype=dout.dtype)
    # same (i, j)-major accumulation order as the numpy path
    for i in range(kh):
        for j in range(kw):
            k = i * kw + j
            for ni in range(n):
                for ci in range(c):
                    for y in range(oh):
                        for x in range(ow):
                            if arg[ni, ci, y, x] == k:
                                dxpad[ni, ci, stride * y + i, stride * x + j] += dout[ni, ci, y, x]
    return dxpad


@njit
def _window_sum_nb(x, kh, kw, stride, oh, ow):
    n, c = x.shape[0], x.shape[1]
    acc = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            for ni in range(n):
                for ci in range(c):
                    for y in range(oh):
                        for xx in range(ow):
                            acc[ni, ci, y, xx] += x[ni, ci, stride * y + i, stride * xx + j]
    return acc


@njit
def _window_spread_nb(share, h, w, kh, kw, stride):
    n, c, oh, ow = share.shape
    dx = np.zeros((n, c, h, w), dtype=share.dtype)
    for i in range(kh):
        for j in range(kw):
            for ni in range(n):
                for ci in range(c):
                    for y in range(oh):
                        for xx in range(ow):
                            dx[ni, ci, stride * y + i, stride * xx + j] += share[ni, ci, y, xx]
    return dx


@njit
def _average_ranks_nb(values):
    n = values.shape[0]
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(n, dtype=np.float64)
    start = 0
    while start < n:
        end = start + 1
        while end < n and values[order[end]] == values[order[start]]:
            end += 1
        avg = (start + end + 1) / 2.0
        for k in range(start, end):
            ranks[order[k]] = avg
        start = end
    return ranks


NUMPY_KERNELS = {
    "im2col": _im2col_np,
    "col2im": _col2im_np,
    "maxpool_forward": _maxpool_fwd_np,
    "maxpool_backward": _maxpool_bwd_np,
    "window_sum": _window_sum_np,
    "window_spread": _window_spread_np,
    "average_ranks": _average_ranks_np,
}

NUMBA_KERNELS = {
    "im2col": _im2col_nb,
    "col2im": _col2im_nb,
    "maxpool_forward": _maxpool_fwd_nb,
    "maxpool_backward": _maxpool_bwd_nb,
    "window_sum": _window_sum_nb,
    "window_spread": _window_spread_nb,
    "average_ranks": _average_ranks_nb,
}

BACKEND = "numba" if USE_NUMBA else "numpy"
_ACTIVE = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS

im2col = _ACTIVE["im2col"]
col2im = _ACTIVE["col2im"]
maxpool_forward = _ACTIVE["maxpool_forward"]
maxpool_backward = _ACTIVE["maxpool_backward"]


def avgpool_forward(x, kh, kw, stride, oh, ow, kernels=None):
    k = kernels or _ACTIVE
    return k["window_sum"](x, kh, kw, stride, oh, ow) / (kh * kw)


def avgpool_backward(dout, h, w, kh, kw, stride, kernels=None):
    k = kernels or _ACTIVE
    return k["window_spread"](np.ascontiguousarray(dout / (kh * kw)), h, w, kh, kw, stride)


def average_ranks(values):
    """1-based ranks of ``values`` with ties sharing their average rank."""
    return _ACTIVE["average_ranks"](np.ascontiguousarray(values, dtype=np.float64))
