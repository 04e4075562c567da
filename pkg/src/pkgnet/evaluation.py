"""Frame-level AUROC and score-curve export."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .data import LabelTrack
from .scoring import RunScores


class EvalError(ValueError):
    pass


@dataclass
class EvalReport:
    auroc_micro: float
    per_video_auroc: dict[str, float]
    n_frames: int
    n_anomalous: int
    smoothed: bool = True
    fingerprint: str = ""
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path


def auroc(scores, labels) -> float:
    """Rank-based area under the ROC curve; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise EvalError(f"length mismatch: {scores.size} scores vs {labels.size} labels")
    if not np.isin(labels, (0, 1)).all():
        raise EvalError("labels must be binary")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise EvalError("single-class labels: AUROC needs both normal and anomalous frames")
    if not np.isfinite(scores).all():
        raise EvalError("scores contain non-finite values")
    return float(kernels.auroc(scores, labels.astype(bool)))


def _fingerprint(run: RunScores) -> str:
    blob = json.dumps({"stats": run.stats.to_dict(), "weights": run.weights.to_dict(), "meta": run.meta},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _aligned(run: RunScores, labels: dict[str, LabelTrack], smoothed: bool):
    for vid in sorted(run.series):
        if vid not in labels:
            raise EvalError(f"video {vid!r} has no labels")
        s = run.series[vid]
        y = labels[vid].labels
        x = s.smoothed if smoothed else s.raw
        if len(x) != len(y):
            raise EvalError(f"video {vid!r}: {len(x)} scores vs {len(y)} labels")
        yield vid, x, y


def evaluate(run: RunScores, labels: dict[str, LabelTrack], smoothed: bool = True) -> EvalReport:
    """Micro AUROC over all videos' frames concatenated in sorted video order."""
    xs, ys, per_video = [], [], {}
    for vid, x, y in _aligned(run, labels, smoothed):
        xs.append(x)
        ys.append(y)
        if 0 < y.sum() < len(y):
            per_video[vid] = auroc(x, y)
    if not xs:
        raise EvalError("no scored videos")
    x, y = np.concatenate(xs), np.concatenate(ys)
    return EvalReport(auroc(x, y), per_video, int(y.size), int(y.sum()), smoothed, _fingerprint(run),
                      dict(run.meta))


def _intervals(y: np.ndarray) -> list[tuple[int, int]]:
    padded = np.concatenate(([0], (y > 0).astype(int), [0]))
    d = np.diff(padded)
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))


def export_curves(run: RunScores, labels: dict[str, LabelTrack], out_dir: str | Path) -> list[Path]:
    """One PNG per video plus ``curves.csv`` with every per-frame column.

    CSV columns: ``video_id, frame, label, raw, smoothed, n_objects`` then one
    column per score component.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise EvalError(f"cannot write to {out}: {exc}") from None
    written = []
    comp_names = sorted({c for s in run.series.values() for c in s.components})
    rows = []
    for vid, _, y in _aligned(run, labels, True):
        s = run.series[vid]
        frames = np.arange(len(y))
        fig, ax = plt.subplots(figsize=(8, 3))
        for a, b in _intervals(y):
            ax.axvspan(a - 0.5, b - 0.5, color="red", alpha=0.2, lw=0)
        for name in comp_names:
            if name in s.components:
                c = s.components[name]
                span = np.ptp(c) or 1.0
                ax.plot(frames, (c - c.min()) / span, lw=0.8, label=f"{name} (min-max)")
        span = np.ptp(s.smoothed) or 1.0
        ax.plot(frames, (s.smoothed - s.smoothed.min()) / span, lw=1.5, color="green", label="score")
        ax.set_xlabel("frame")
        ax.set_title(vid)
        ax.legend(fontsize=6, loc="upper right")
        fig.tight_layout()
        p = out / f"{vid}.png"
        fig.savefig(p, dpi=80)
        plt.close(fig)
        written.append(p)
        for i in frames:
            rows.append([vid, int(i), int(y[i]), repr(float(s.raw[i])), repr(float(s.smoothed[i])),
                         int(s.n_objects[i])] +
                        [repr(float(s.components[n][i])) if n in s.components else "" for n in comp_names])
    csv_path = out / "curves.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["video_id", "frame", "label", "raw", "smoothed", "n_objects"] + comp_names)
        w.writerows(rows)
    written.append(csv_path)
    return written
