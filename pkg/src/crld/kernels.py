"""Hot inner loops: 3x3 convolution lowering and per-pixel image kernels.

Every kernel has a vectorised numpy implementation and a numba loop
implementation. The module-level names dispatch to one of them according to
``crld._accel.USE_NUMBA``. The two paths produce bit-identical results: the
numba loops accumulate in the same order as the numpy slicing.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from crld._accel import USE_NUMBA, njit


def conv_out_size(n, stride):
    return (n - 1) // stride + 1


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def im2col_np(x, stride):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * 9)


def col2im_np(cols, n, c, h, w, stride):
    ho, wo = conv_out_size(h, stride), conv_out_size(w, stride)
    d = cols.reshape(n, ho, wo, c, 3, 3).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2, w + 2), dtype=cols.dtype)
    for ki in range(3):
        for kj in range(3):
            out[:, :, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride] += d[:, :, ki, kj]
    return np.ascontiguousarray(out[:, :, 1:-1, 1:-1])


def warp_nearest_np(img, m, fill):
    h, w = img.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = m[0, 0] * xs + m[0, 1] * ys + m[0, 2]
    sy = m[1, 0] * xs + m[1, 1] * ys + m[1, 2]
    ix = np.floor(sx + 0.5).astype(np.int64)
    iy = np.floor(sy + 0.5).astype(np.int64)
    inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    out = np.full_like(img, fill)
    out[inside] = img[iy[inside], ix[inside]]
    return out


def _equalize_lut(hist):
    nz = np.flatnonzero(hist)
    lut = np.arange(256, dtype=np.int64)
    if nz.size <= 1:
        return lut
    step = (int(hist.sum()) - int(hist[nz[-1]])) // 255
    if step == 0:
        return lut
    cum = np.concatenate(([0], np.cumsum(hist)[:-1]))
    return np.minimum((step // 2 + cum) // step, 255)


def equalize_np(img):
    out = np.empty_like(img)
    for ch in range(img.shape[2]):
        plane = img[:, :, ch]
        lut = _equalize_lut(np.bincount(plane.ravel(), minlength=256).astype(np.int64))
        out[:, :, ch] = lut[plane]
    return out


def smooth3x3_np(img):
    """PIL-style SMOOTH filter: weights 1 with centre 5, /13; border pixels untouched."""
    src = img.astype(np.int64)
    h, w = img.shape[:2]
    out = img.copy()
    if h < 3 or w < 3:
        return out
    acc = 4 * src[1:-1, 1:-1]
    for dy in range(3):
        for dx in range(3):
            acc = acc + src[dy:dy + h - 2, dx:dx + w - 2]
    out[1:-1, 1:-1] = ((acc + 6) // 13).astype(np.uint8)
    return out


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------


@njit
def im2col_nb(x, stride):
    n, c, h, w = x.shape
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    cols = np.zeros((n * ho * wo, c * 9), dtype=x.dtype)
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                row = (b * ho + oy) * wo + ox
                for ch in range(c):
                    for ki in range(3):
                        iy = oy * stride + ki - 1
                        if iy < 0 or iy >= h:
                            continue
                        for kj in range(3):
                            ix = ox * stride + kj - 1
                            if ix < 0 or ix >= w:
                                continue
                            cols[row, ch * 9 + ki * 3 + kj] = x[b, ch, iy, ix]
    return cols


@njit
def col2im_nb(cols, n, c, h, w, stride):
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    out = np.zeros((n, c, h + 2, w + 2), dtype=cols.dtype)
    # (ki, kj) outermost so each pixel sums its contributions in numpy's order
    for ki in range(3):
        for kj in range(3):
            for b in range(n):
                for ch in range(c):
                    col = ch * 9 + ki * 3 + kj
                    for oy in range(ho):
                        for ox in range(wo):
                            out[b, ch, oy * stride + ki, ox * stride + kj] += cols[(b * ho + oy) * wo + ox, col]
    return np.ascontiguousarray(out[:, :, 1:h + 1, 1:w + 1])


@njit
def warp_nearest_nb(img, m, fill):
    h, w, nc = img.shape
    out = np.empty_like(img)
    for y in range(h):
        for x in range(w):
            fx = float(x)
            fy = float(y)
            sx = m[0, 0] * fx + m[0, 1] * fy + m[0, 2]
            sy = m[1, 0] * fx + m[1, 1] * fy + m[1, 2]
            ix = int(math.floor(sx + 0.5))
            iy = int(math.floor(sy + 0.5))
            if 0 <= ix < w and 0 <= iy < h:
                for ch in range(nc):
                    out[y, x, ch] = img[iy, ix, ch]
            else:
                for ch in range(nc):
                    out[y, x, ch] = fill
    return out


@njit
def equalize_nb(img):
    h, w, nc = img.shape
    out = np.empty_like(img)
    for ch in range(nc):
        hist = np.zeros(256, dtype=np.int64)
        for y in range(h):
            for x in range(w):
                hist[img[y, x, ch]] += 1
        last = -1
        count = 0
        for i in range(256):
            if hist[i] > 0:
                last = i
                count += 1
        lut = np.arange(256).astype(np.int64)
        if count > 1:
            step = (h * w - hist[last]) // 255
            if step > 0:
                acc = step // 2
                for i in range(256):
                    v = acc // step
                    lut[i] = v if v < 255 else 255
                    acc += hist[i]
        for y in range(h):
            for x in range(w):
                out[y, x, ch] = lut[img[y, x, ch]]
    return out


@njit
def smooth3x3_nb(img):
    h, w, nc = img.shape
    out = img.copy()
    if h < 3 or w < 3:
        return out
    for y in range(1, h - 1):
        for x in range(1, w - 1):
            for ch in range(nc):
                acc = 4 * np.int64(img[y, x, ch])
                for dy in range(-1, 2):
                    for dx in range(-1, 2):
                        acc += np.int64(img[y + dy, x + dx, ch])
                out[y, x, ch] = (acc + 6) // 13
    return out


if USE_NUMBA:
    im2col, col2im = im2col_nb, col2im_nb
    warp_nearest, equalize, smooth3x3 = warp_nearest_nb, equalize_nb, smooth3x3_nb
else:
    im2col, col2im = im2col_np, col2im_np
    warp_nearest, equalize, smooth3x3 = warp_nearest_np, equalize_np, smooth3x3_np

BACKEND = "numba" if USE_NUMBA else "numpy"
