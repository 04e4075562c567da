"""Per-clip anomaly components, training-set calibration, score combination,
frame aggregation and temporal smoothing."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .kernels import median_filter
from .loss import feature_inconsistency_map

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-8
SCORES_FORMAT = "pkgnet-scores/1"


class ScoringError(ValueError):
    pass


@dataclass
class ClipScore:
    S_e: float
    S_c: dict[int, float]
    video_id: str = ""
    frame_index: int = -1


@dataclass
class ScoreStats:
    mu_e: float
    sigma_e: float
    mu_c: dict[int, float] = field(default_factory=dict)
    sigma_c: dict[int, float] = field(default_factory=dict)
    min_e: float = 0.0
    min_c: dict[int, float] = field(default_factory=dict)
    n: int = 0
    ddof: int = 1
    no_object_score: float | None = None

    def to_dict(self) -> dict:
        return {
            "mu_e": self.mu_e, "sigma_e": self.sigma_e,
            "mu_c": {str(k): v for k, v in self.mu_c.items()},
            "sigma_c": {str(k): v for k, v in self.sigma_c.items()},
            "min_e": self.min_e, "min_c": {str(k): v for k, v in self.min_c.items()},
            "n": self.n, "ddof": self.ddof, "no_object_score": self.no_object_score,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreStats":
        ik = lambda m: {int(k): float(v) for k, v in m.items()}
        return cls(d["mu_e"], d["sigma_e"], ik(d["mu_c"]), ik(d["sigma_c"]), d.get("min_e", 0.0),
                   ik(d.get("min_c", {})), d.get("n", 0), d.get("ddof", 1), d.get("no_object_score"))


@dataclass
class ScoreWeights:
    w_e: float
    w_c: dict[int, float] = field(default_factory=dict)

    def for_mode(self, mode: str) -> "ScoreWeights":
        """AE-only scores use the prediction error alone, KD-only the inconsistency alone."""
        if mode == "AE_only":
            return ScoreWeights(self.w_e if self.w_e > 0 else 1.0, {})
        if mode == "KD_only":
            w_c = self.w_c if any(v > 0 for v in self.w_c.values()) else {k: 1.0 for k in self.w_c}
            return ScoreWeights(0.0, dict(w_c))
        return self

    def to_dict(self) -> dict:
        return {"w_e": self.w_e, "w_c": {str(k): v for k, v in self.w_c.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreWeights":
        return cls(float(d["w_e"]), {int(k): float(v) for k, v in d.get("w_c", {}).items()})


@dataclass
class ScoreSeries:
    video_id: str
    raw: np.ndarray
    smoothed: np.ndarray
    components: dict[str, np.ndarray]
    n_objects: np.ndarray

    def to_dict(self) -> dict:
        return {"raw": self.raw.tolist(), "smoothed": self.smoothed.tolist(),
                "components": {k: v.tolist() for k, v in self.components.items()},
                "n_objects": self.n_objects.tolist()}

    @classmethod
    def from_dict(cls, vid: str, d: dict) -> "ScoreSeries":
        return cls(vid, np.asarray(d["raw"], float), np.asarray(d["smoothed"], float),
                   {k: np.asarray(v, float) for k, v in d["components"].items()},
                   np.asarray(d.get("n_objects", np.zeros(len(d["raw"]))), int))


# --------------------------------------------------------------------------- components

def clip_scores(output, target: torch.Tensor, clips: Sequence | None = None) -> list[ClipScore]:
    """Prediction error and per-block inconsistency for each clip of a batch."""
    with torch.no_grad():
        pred = output.prediction
        if target.shape != pred.shape:
            raise ScoringError(f"target shape {tuple(target.shape)} != prediction {tuple(pred.shape)}")
        s_e = ((pred - target) ** 2).flatten(1).mean(1).cpu().numpy().astype(np.float64)
        s_c = {}
        for k, fs in output.student_taps.items():
            if k not in output.teacher_taps:
                raise ScoringError(f"missing teacher tap for block {k}")
            s_c[k] = feature_inconsistency_map(fs, output.teacher_taps[k]).flatten(1).mean(1).cpu().numpy()
    out = []
    for i in range(len(s_e)):
        vid, fi = (clips[i].video_id, clips[i].frame_index) if clips is not None else ("", -1)
        out.append(ClipScore(float(s_e[i]), {k: float(v[i]) for k, v in s_c.items()}, vid, fi))
    return out


def infer_components(student, teacher, cubes: np.ndarray, batch_size: int = 256,
                     teacher_taps: dict[int, np.ndarray] | None = None) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Batched components for ``cubes`` of shape ``(N, t, C, 32, 32)``."""
    from .model import forward

    student.eval()
    n = len(cubes)
    s_e = np.empty(n, dtype=np.float64)
    s_c: dict[int, np.ndarray] = {}
    with torch.no_grad():
        for lo in range(0, n, batch_size):
            x = torch.as_tensor(cubes[lo:lo + batch_size])
            tt = None
            if teacher_taps is not None:
                tt = {k: torch.as_tensor(v[lo:lo + batch_size]) for k, v in teacher_taps.items()}
            out = forward(student, teacher, x, teacher_taps=tt)
            for j, cs in enumerate(clip_scores(out, x[:, -1])):
                s_e[lo + j] = cs.S_e
                for k, v in cs.S_c.items():
                    s_c.setdefault(k, np.empty(n, dtype=np.float64))[lo + j] = v
    return s_e, s_c


# --------------------------------------------------------------------------- calibration

def _moments(x: np.ndarray, ddof: int, name: str) -> tuple[float, float]:
    mu = float(np.mean(x))
    sigma = float(np.std(x, ddof=ddof))
    if not sigma > SIGMA_FLOOR:
        warnings.warn(f"degenerate spread for {name} (sigma={sigma:g}); floored at {SIGMA_FLOOR}", RuntimeWarning,
                      stacklevel=3)
        sigma = SIGMA_FLOOR
    return mu, sigma


def stats_from_components(s_e: np.ndarray, s_c: dict[int, np.ndarray], ddof: int = 1,
                          weights: ScoreWeights | None = None) -> ScoreStats:
    s_e = np.asarray(s_e, dtype=np.float64)
    if s_e.size < 2:
        raise ScoringError(f"calibration needs at least 2 clips, got {s_e.size}")
    mu_e, sigma_e = _moments(s_e, ddof, "S_e")
    mu_c, sigma_c, min_c = {}, {}, {}
    for k in sorted(s_c):
        mu_c[k], sigma_c[k] = _moments(np.asarray(s_c[k], dtype=np.float64), ddof, f"S_c{k}")
        min_c[k] = float(np.min(s_c[k]))
    stats = ScoreStats(mu_e, sigma_e, mu_c, sigma_c, float(s_e.min()), min_c, int(s_e.size), ddof)
    if weights is not None:
        stats.no_object_score = float(np.min(combine(s_e, s_c, stats, weights)))
    return stats


def calibrate(student, teacher, train_clips: Iterable, weights: ScoreWeights | None = None, ddof: int = 1,
              batch_size: int = 256) -> ScoreStats:
    """Mean and standard deviation of every component over all training clips.

    With ``weights`` the minimum combined training score is recorded as the
    score for frames without objects.
    """
    if isinstance(train_clips, np.ndarray):
        cubes = train_clips
    else:
        clips = list(train_clips)
        cubes = np.stack([c.cube for c in clips]) if clips else np.empty((0,))
    if len(cubes) < 2:
        raise ScoringError(f"calibration needs at least 2 clips, got {len(cubes)}")
    s_e, s_c = infer_components(student, teacher, cubes, batch_size)
    return stats_from_components(s_e, s_c, ddof, weights)


# --------------------------------------------------------------------------- combination

def _check_blocks(blocks: Iterable[int], stats: ScoreStats, weights: ScoreWeights) -> None:
    blocks = set(blocks)
    if blocks != set(weights.w_c):
        raise ScoringError(f"block mismatch: scores have {sorted(blocks)}, weights have {sorted(weights.w_c)}")
    missing = blocks - set(stats.mu_c)
    if missing:
        raise ScoringError(f"stats lack blocks {sorted(missing)}")


def combined_score(cs: ClipScore, stats: ScoreStats, weights: ScoreWeights) -> float:
    _check_blocks(cs.S_c, stats, weights)
    s = weights.w_e * (cs.S_e - stats.mu_e) / stats.sigma_e
    for k in sorted(cs.S_c):
        s += weights.w_c[k] * (cs.S_c[k] - stats.mu_c[k]) / stats.sigma_c[k]
    return s


def combine(s_e: np.ndarray, s_c: dict[int, np.ndarray], stats: ScoreStats, weights: ScoreWeights) -> np.ndarray:
    """Vectorised :func:`combined_score`."""
    _check_blocks(s_c, stats, weights)
    s = weights.w_e * (np.asarray(s_e, float) - stats.mu_e) / stats.sigma_e
    for k in sorted(s_c):
        s = s + weights.w_c[k] * (np.asarray(s_c[k], float) - stats.mu_c[k]) / stats.sigma_c[k]
    return s


# --------------------------------------------------------------------------- frames

def parse_policy(policy: str) -> tuple[str, int]:
    """``"max"`` or ``"top_k_mean:<k>"``."""
    if policy == "max":
        return "max", 1
    name, _, k = policy.partition(":")
    if name == "top_k_mean" and k.isdigit() and int(k) >= 1:
        return name, int(k)
    raise ScoringError(f"unknown aggregation policy {policy!r} (use 'max' or 'top_k_mean:<k>')")


def aggregate_frame(object_scores: Sequence[float], policy: str = "max") -> float:
    """Frame score from its object scores. Fewer than k objects: mean of all of them."""
    name, k = parse_policy(policy)
    if len(object_scores) == 0:
        raise ScoringError("no object scores to aggregate")
    x = np.asarray(object_scores, dtype=np.float64)
    if name == "max":
        return float(x.max())
    return float(np.sort(x)[::-1][:k].mean())


def smooth_series(raw: np.ndarray, window: int) -> np.ndarray:
    if window < 1 or window % 2 == 0:
        raise ScoringError(f"median window must be an odd integer >= 1, got {window}")
    return median_filter(np.asarray(raw, dtype=np.float64), window)


def series_from_clip_scores(video_id: str, scores: Sequence[ClipScore], frame_count: int, stats: ScoreStats,
                            weights: ScoreWeights, policy: str = "max", window: int = 15) -> ScoreSeries:
    blocks = sorted(weights.w_c)
    per_frame: dict[int, list[ClipScore]] = {}
    for cs in scores:
        if cs.video_id != video_id:
            raise ScoringError(f"clip from video {cs.video_id!r} passed to series for {video_id!r}")
        if not 0 <= cs.frame_index < frame_count:
            raise ScoringError(f"clip frame {cs.frame_index} outside video {video_id!r} ({frame_count} frames)")
        per_frame.setdefault(cs.frame_index, []).append(cs)

    if stats.no_object_score is not None:
        empty = stats.no_object_score
    else:
        empty = float(combined_score(ClipScore(stats.min_e, {k: stats.min_c[k] for k in blocks}), stats, weights))
    raw = np.full(frame_count, empty, dtype=np.float64)
    comps = {"S_e": np.full(frame_count, stats.min_e)}
    for k in blocks:
        comps[f"S_c{k}"] = np.full(frame_count, stats.min_c.get(k, 0.0))
    n_obj = np.zeros(frame_count, dtype=np.int64)
    for fi, group in per_frame.items():
        raw[fi] = aggregate_frame([combined_score(cs, stats, weights) for cs in group], policy)
        comps["S_e"][fi] = aggregate_frame([cs.S_e for cs in group], policy)
        for k in blocks:
            comps[f"S_c{k}"][fi] = aggregate_frame([cs.S_c[k] for cs in group], policy)
        n_obj[fi] = len(group)
    return ScoreSeries(video_id, raw, smooth_series(raw, window), comps, n_obj)


def score_video(student, teacher, stats: ScoreStats, weights: ScoreWeights, clips: Sequence, frame_count: int,
                policy: str = "max", window: int = 15, video_id: str | None = None) -> ScoreSeries:
    clips = list(clips)
    if video_id is None:
        if not clips:
            raise ScoringError("video_id is required when there are no clips")
        video_id = clips[0].video_id
    scores: list[ClipScore] = []
    if clips:
        s_e, s_c = infer_components(student, teacher, np.stack([c.cube for c in clips]))
        scores = [ClipScore(float(s_e[i]), {k: float(v[i]) for k, v in s_c.items()}, c.video_id, c.frame_index)
                  for i, c in enumerate(clips)]
    return series_from_clip_scores(video_id, scores, frame_count, stats, weights, policy, window)


# --------------------------------------------------------------------------- export

@dataclass
class RunScores:
    series: dict[str, ScoreSeries]
    stats: ScoreStats
    weights: ScoreWeights
    meta: dict = field(default_factory=dict)


def export_scores(path: str | Path, run: RunScores) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": SCORES_FORMAT,
        "meta": run.meta,
        "stats": run.stats.to_dict(),
        "weights": run.weights.to_dict(),
        "videos": {vid: s.to_dict() for vid, s in sorted(run.series.items())},
    }
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))
    return path


def load_scores(path: str | Path) -> RunScores:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing score file {path}")
    d = json.loads(path.read_text())
    if d.get("format") != SCORES_FORMAT:
        raise ScoringError(f"{path}: unsupported score file format {d.get('format')!r}")
    series = {vid: ScoreSeries.from_dict(vid, v) for vid, v in d["videos"].items()}
    return RunScores(series, ScoreStats.from_dict(d["stats"]), ScoreWeights.from_dict(d["weights"]),
                     d.get("meta", {}))
