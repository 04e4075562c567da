"""Pure-numpy reference implementations of the numeric kernels."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def crop_resize(frame, x1, y1, x2, y2, out_h, out_w):
    """Bilinear crop of ``frame[:, y1:y2, x1:x2]`` resampled to ``(out_h, out_w)``.

    Sampling uses pixel-center alignment (``align_corners=False``) with edge
    clamping, so an integer box already of size ``out_h x out_w`` is copied
    unchanged.
    """
    c, h, w = frame.shape
    sy = (y2 - y1) / out_h
    sx = (x2 - x1) / out_w
    ys = y1 + (np.arange(out_h) + 0.5) * sy - 0.5
    xs = x1 + (np.arange(out_w) + 0.5) * sx - 0.5
    ys = np.clip(ys, 0.0, h - 1)
    xs = np.clip(xs, 0.0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1i = np.minimum(y0 + 1, h - 1)
    x1i = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]

    f = frame.astype(np.float64, copy=False)
    top = f[:, y0][:, :, x0] * (1 - wx) + f[:, y0][:, :, x1i] * wx
    bot = f[:, y1i][:, :, x0] * (1 - wx) + f[:, y1i][:, :, x1i] * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


def median_filter(x, window):
    """Sliding median with edge-replication padding; output length equals input."""
    x = np.asarray(x, dtype=np.float64)
    if window == 1 or x.size == 0:
        return x.copy()
    half = window // 2
    padded = np.pad(x, half, mode="edge")
    return np.median(sliding_window_view(padded, window), axis=1)


def auroc(scores, labels):
    """Rank-based (Mann-Whitney) AUROC with tied scores sharing the mean rank."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    # average ranks over tie groups
    boundaries = np.flatnonzero(np.diff(sorted_scores)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [scores.size]))
    group_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(scores.size, dtype=np.float64)
    ranks[order] = np.repeat(group_rank, ends - starts)
    n_pos = labels.sum()
    n_neg = labels.size - n_pos
    return (ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
