"""Numba-compiled kernels. Same contracts as :mod:`pkgnet.kernels._numpy`."""
import numpy as np
from numba import njit


@njit(cache=True)
def _crop_resize(frame, x1, y1, x2, y2, out_h, out_w):
    c, h, w = frame.shape
    out = np.empty((c, out_h, out_w), dtype=np.float32)
    sy = (y2 - y1) / out_h
    sx = (x2 - x1) / out_w
    for oy in range(out_h):
        fy = y1 + (oy + 0.5) * sy - 0.5
        fy = min(max(fy, 0.0), h - 1.0)
        y0 = int(np.floor(fy))
        y1i = min(y0 + 1, h - 1)
        wy = fy - y0
        for ox in range(out_w):
            fx = x1 + (ox + 0.5) * sx - 0.5
            fx = min(max(fx, 0.0), w - 1.0)
            x0 = int(np.floor(fx))
            x1i = min(x0 + 1, w - 1)
            wx = fx - x0
            for ch in range(c):
                top = frame[ch, y0, x0] * (1.0 - wx) + frame[ch, y0, x1i] * wx
                bot = frame[ch, y1i, x0] * (1.0 - wx) + frame[ch, y1i, x1i] * wx
                out[ch, oy, ox] = top * (1.0 - wy) + bot * wy
    return out


def crop_resize(frame, x1, y1, x2, y2, out_h, out_w):
    return _crop_resize(np.ascontiguousarray(frame, dtype=np.float32),
                        float(x1), float(y1), float(x2), float(y2), int(out_h), int(out_w))


@njit(cache=True)
def _median_filter(x, window):
    n = x.size
    out = np.empty(n, dtype=np.float64)
    half = window // 2
    buf = np.empty(window, dtype=np.float64)
    for i in range(n):
        for j in range(window):
            k = min(max(i - half + j, 0), n - 1)
            buf[j] = x[k]
        buf.sort()
        if window % 2 == 1:
            out[i] = buf[half]
        else:
            out[i] = 0.5 * (buf[half - 1] + buf[half])
    return out


def median_filter(x, window):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if window == 1 or x.size == 0:
        return x.copy()
    return _median_filter(x, int(window))


@njit(cache=True)
def _auroc(scores, labels):
    n = scores.size
    order = np.argsort(scores, kind="mergesort")
    n_pos = 0
    for i in range(n):
        if labels[i]:
            n_pos += 1
    n_neg = n - n_pos
    rank_sum = 0.0
    i = 0
    while i < n:
        j = i
        while j + 1 < n and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        r = (i + j + 2) / 2.0
        for k in range(i, j + 1):
            if labels[order[k]]:
                rank_sum += r
        i = j + 1
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auroc(scores, labels):
    return _auroc(np.ascontiguousarray(scores, dtype=np.float64),
                  np.ascontiguousarray(labels).astype(np.bool_))
