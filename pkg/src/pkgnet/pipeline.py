"""Training loop, calibration/scoring/eval stages over a run directory.

A run directory holds::

    config.yaml        resolved configuration
    manifest.json      seed, checkpoints, per-epoch loss history, artifact paths
    checkpoints/       epoch_XXXX.pt and final.pt
    stats.json         calibration statistics and score weights
    scores.json        per-video score series
    eval_report.json   frame-level AUROC
"""
from __future__ import annotations

import json
import logging
import math
import random
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .config import Config
from .data import (DatasetLayout, FrameStore, IngestReport, LabelTrack, ObjectBox, assemble_stclips,
                   generate_synthetic_dataset, load_boxes, load_frame_store, load_labels)
from .evaluation import EvalReport, evaluate
from .loss import LossBreakdown, compute_losses
from .model import Student, Teacher, build_student, build_teacher, forward, load_checkpoint, make_tap_spec, \
    save_checkpoint
from .scoring import (ClipScore, RunScores, ScoreStats, ScoreWeights, export_scores, infer_components,
                      load_scores, series_from_clip_scores, stats_from_components)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class SplitData:
    store: FrameStore
    boxes: list[ObjectBox]
    labels: dict[str, LabelTrack] | None


@dataclass
class ClipArrays:
    cubes: np.ndarray
    video_ids: list[str]
    frame_indices: np.ndarray
    report: IngestReport


@dataclass
class RunManifest:
    run_dir: str
    seed: int
    config: dict
    checkpoints: list[str] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    stats_path: str | None = None
    scores_path: str | None = None
    report_path: str | None = None
    n_train_clips: int = 0
    train_seconds: float = 0.0

    @property
    def final_checkpoint(self) -> str:
        return self.checkpoints[-1]

    def write(self) -> Path:
        p = Path(self.run_dir) / "manifest.json"
        p.write_text(json.dumps(asdict(self), indent=1))
        return p

    @classmethod
    def read(cls, run_dir: str | Path) -> "RunManifest":
        p = Path(run_dir) / "manifest.json"
        if not p.is_file():
            raise FileNotFoundError(f"missing run manifest {p}")
        return cls(**json.loads(p.read_text()))


# --------------------------------------------------------------------------- data

def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def load_split(cfg: Config, split: str) -> SplitData:
    d = cfg.data
    if d.source == "synthetic":
        ds = generate_synthetic_dataset(d.synthetic)
        s = ds.train if split == d.train_split else ds.test
        return SplitData(s.store, s.boxes, s.labels)
    root = Path(d.root)
    store = load_frame_store(root, DatasetLayout(split, d.channels))
    boxes = load_boxes(root / f"boxes_{split}.csv", store, d.confidence_threshold)
    lp = root / f"labels_{split}.json"
    return SplitData(store, boxes, load_labels(lp) if lp.is_file() else None)


def clip_arrays(data: SplitData, temporal_window: int) -> ClipArrays:
    report = IngestReport()
    clips = list(assemble_stclips(data.store, data.boxes, temporal_window, report=report))
    if clips:
        cubes = np.stack([c.cube for c in clips])
    else:
        cubes = np.empty((0, temporal_window + 1, data.store.frame_shape(data.store.video_ids[0])[0], 32, 32),
                         np.float32)
    return ClipArrays(cubes, [c.video_id for c in clips], np.array([c.frame_index for c in clips], int), report)


# --------------------------------------------------------------------------- training

def build_models(cfg: Config) -> tuple[Teacher | None, Student]:
    teacher = None
    tap = None
    if cfg.student.mode != "AE_only":
        teacher = build_teacher(cfg.teacher)
        tap = make_tap_spec(teacher, cfg.student.bottleneck_block, cfg.student.input_size)
    return teacher, build_student(cfg.student, tap)


def teacher_features(teacher: Teacher, cubes: np.ndarray, batch_size: int = 512) -> dict[int, torch.Tensor]:
    out: dict[int, list[torch.Tensor]] = {}
    for lo in range(0, len(cubes), batch_size):
        taps = teacher.tap(torch.as_tensor(cubes[lo:lo + batch_size, -1]))
        for k, v in taps.items():
            out.setdefault(k, []).append(v)
    return {k: torch.cat(v) for k, v in out.items()}


def train_step(student: Student, teacher: Teacher | None, optimizer: torch.optim.Optimizer, batch: torch.Tensor,
               cfg: Config, teacher_taps: dict[int, torch.Tensor] | None = None) -> LossBreakdown:
    student.train()
    out = forward(student, teacher, batch, teacher_taps=teacher_taps)
    losses = compute_losses(out, batch[:, -1], cfg.loss, cfg.student.mode)
    if not torch.isfinite(losses.total):
        raise TrainingError(f"non-finite loss: {losses.as_floats()}")
    optimizer.zero_grad(set_to_none=True)
    losses.total.backward()
    optimizer.step()
    return losses


def make_optimizer(student: Student, cfg: Config):
    t = cfg.train
    opt = torch.optim.Adam(student.parameters(), lr=t.learning_rate, betas=tuple(t.adam_betas))
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=t.lr_decay_every, gamma=t.lr_decay_factor)
    return opt, sched


def lr_at_epoch(cfg: Config, epoch: int) -> float:
    t = cfg.train
    return t.learning_rate * t.lr_decay_factor ** (epoch // t.lr_decay_every)


def train(cfg: Config, out_dir: str | Path, train_data: SplitData | None = None) -> RunManifest:
    """Train a student under ``cfg`` and write checkpoints plus the manifest to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    cfgmod.dump(cfg, out / "config.yaml")
    seed_everything(cfg.train.seed)

    data = train_data or load_split(cfg, cfg.data.train_split)
    arrays = clip_arrays(data, cfg.data.temporal_window)
    n = len(arrays.cubes)
    if n == 0:
        raise TrainingError("no training clips (check boxes and temporal_window)")
    teacher, student = build_models(cfg)
    opt, sched = make_optimizer(student, cfg)
    cached = None
    if teacher is not None and cfg.train.cache_teacher:
        cached = teacher_features(teacher, arrays.cubes)

    manifest = RunManifest(str(out), cfg.train.seed, cfgmod.to_dict(cfg), n_train_clips=n)
    cubes = torch.as_tensor(arrays.cubes)
    gen = torch.Generator().manual_seed(cfg.train.seed)
    t0 = time.perf_counter()
    best, stale = math.inf, 0
    for epoch in range(cfg.train.epochs):
        lr = opt.param_groups[0]["lr"]
        perm = torch.randperm(n, generator=gen)
        sums = {"L_e": 0.0, "L_g": 0.0, "L_c": 0.0, "total": 0.0}
        for lo in range(0, n, cfg.train.batch_size):
            idx = perm[lo:lo + cfg.train.batch_size]
            tt = {k: v[idx] for k, v in cached.items()} if cached is not None else None
            losses = train_step(student, teacher, opt, cubes[idx], cfg, tt)
            for k, v in losses.as_floats().items():
                sums[k] += v * len(idx)
        sched.step()
        rec = {k: v / n for k, v in sums.items()}
        rec.update(epoch=epoch, lr=lr)
        manifest.history.append(rec)
        log.info("epoch %d lr %.2e total %.5f (L_e %.5f L_g %.5f L_c %.5f)", epoch, lr, rec["total"],
                 rec["L_e"], rec["L_g"], rec["L_c"])
        if cfg.train.checkpoint_every and (epoch + 1) % cfg.train.checkpoint_every == 0 \
                and epoch + 1 < cfg.train.epochs:
            p = save_checkpoint(out / "checkpoints" / f"epoch_{epoch + 1:04d}.pt", student, opt.state_dict(),
                                epoch + 1, manifest.config, teacher)
            manifest.checkpoints.append(str(p))
        if cfg.train.patience:
            if rec["total"] < best - 1e-12:
                best, stale = rec["total"], 0
            else:
                stale += 1
                if stale >= cfg.train.patience:
                    log.info("early stop at epoch %d", epoch)
                    break
    manifest.train_seconds = time.perf_counter() - t0
    p = save_checkpoint(out / "checkpoints" / "final.pt", student, opt.state_dict(), len(manifest.history),
                        manifest.config, teacher)
    manifest.checkpoints.append(str(p))
    manifest.write()
    return manifest


# --------------------------------------------------------------------------- stages

def _load_run(run_dir: str | Path):
    manifest = RunManifest.read(run_dir)
    cfg = cfgmod.from_dict(manifest.config)
    ckpt = load_checkpoint(manifest.final_checkpoint)
    teacher = ckpt.teacher() if ckpt.student.cfg.mode != "AE_only" else None
    return manifest, cfg, ckpt.student, teacher


def score_weights(cfg: Config) -> ScoreWeights:
    return ScoreWeights(cfg.score.w_e, dict(cfg.score.w_c)).for_mode(cfg.student.mode)


def calibrate_run(run_dir: str | Path, train_data: SplitData | None = None) -> ScoreStats:
    manifest, cfg, student, teacher = _load_run(run_dir)
    data = train_data or load_split(cfg, cfg.data.train_split)
    arrays = clip_arrays(data, cfg.data.temporal_window)
    s_e, s_c = infer_components(student, teacher, arrays.cubes, cfg.score.batch_size)
    weights = score_weights(cfg)
    stats = stats_from_components(s_e, s_c, cfg.score.ddof, weights)
    path = Path(run_dir) / "stats.json"
    path.write_text(json.dumps({"stats": stats.to_dict(), "weights": weights.to_dict()}, indent=1))
    manifest.stats_path = str(path)
    manifest.write()
    return stats


def read_stats(path: str | Path) -> tuple[ScoreStats, ScoreWeights]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"missing stats file {p}")
    d = json.loads(p.read_text())
    return ScoreStats.from_dict(d["stats"]), ScoreWeights.from_dict(d["weights"])


def score_run(run_dir: str | Path, test_data: SplitData | None = None) -> RunScores:
    manifest, cfg, student, teacher = _load_run(run_dir)
    stats, weights = read_stats(Path(run_dir) / "stats.json")
    data = test_data or load_split(cfg, cfg.data.test_split)
    arrays = clip_arrays(data, cfg.data.temporal_window)
    s_e, s_c = infer_components(student, teacher, arrays.cubes, cfg.score.batch_size)
    by_video: dict[str, list[ClipScore]] = {}
    for i, vid in enumerate(arrays.video_ids):
        by_video.setdefault(vid, []).append(
            ClipScore(float(s_e[i]), {k: float(v[i]) for k, v in s_c.items()}, vid, int(arrays.frame_indices[i])))
    series = {vid: series_from_clip_scores(vid, by_video.get(vid, []), data.store.frame_count(vid), stats, weights,
                                           cfg.score.policy, cfg.score.window)
              for vid in data.store.video_ids}
    run = RunScores(series, stats, weights, {"mode": cfg.student.mode, "policy": cfg.score.policy,
                                             "window": cfg.score.window, "checkpoint": manifest.final_checkpoint})
    path = export_scores(Path(run_dir) / "scores.json", run)
    manifest.scores_path = str(path)
    manifest.write()
    return run


def split_labels(cfg: Config, test_data: SplitData | None = None) -> dict[str, LabelTrack]:
    if test_data is not None and test_data.labels is not None:
        return test_data.labels
    if cfg.data.source == "synthetic":
        return generate_synthetic_dataset(cfg.data.synthetic).test.labels
    return load_labels(Path(cfg.data.root) / f"labels_{cfg.data.test_split}.json")


def eval_run(run_dir: str | Path, scores_path: str | Path | None = None, labels_path: str | Path | None = None,
             smoothed: bool | None = None) -> EvalReport:
    run_dir = Path(run_dir)
    scores_path = Path(scores_path) if scores_path else run_dir / "scores.json"
    run = load_scores(scores_path)
    cfg = cfgmod.from_dict(RunManifest.read(run_dir).config) if (run_dir / "manifest.json").is_file() else None
    if labels_path:
        labels = load_labels(labels_path)
    elif cfg is not None:
        labels = split_labels(cfg)
    else:
        raise FileNotFoundError(f"no labels given and no run manifest in {run_dir}")
    if smoothed is None:
        smoothed = cfg.eval.smoothed if cfg is not None else True
    report = evaluate(run, labels, smoothed)
    report.write(run_dir / "eval_report.json")
    return report


def run_all(cfg: Config, out_dir: str | Path, train_data: SplitData | None = None,
            test_data: SplitData | None = None) -> tuple[RunManifest, EvalReport]:
    """Train, calibrate, score and evaluate in one go."""
    manifest = train(cfg, out_dir, train_data)
    calibrate_run(out_dir, train_data)
    score_run(out_dir, test_data)
    report = eval_run(out_dir, smoothed=cfg.eval.smoothed) if test_data is None else \
        _eval_with(out_dir, test_data, cfg)
    return RunManifest.read(out_dir), report


def _eval_with(out_dir, test_data: SplitData, cfg: Config) -> EvalReport:
    run = load_scores(Path(out_dir) / "scores.json")
    report = evaluate(run, test_data.labels, cfg.eval.smoothed)
    report.write(Path(out_dir) / "eval_report.json")
    return report
