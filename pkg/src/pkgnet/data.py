"""Frame stores, object boxes, spatio-temporal cubes and a synthetic dataset.

On-disk layout::

    <root>/<split>/<video_id>/frame_000000.png
    <root>/boxes_<split>.csv      video_id,frame_index,x1,y1,x2,y2,confidence
    <root>/labels_<split>.json    {"<video_id>": [0, 0, 1, ...], ...}

Coordinates are pixel edges: a box ``(x1, y1, x2, y2)`` covers columns
``x1 <= x < x2`` and rows ``y1 <= y < y2``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import re
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np
from PIL import Image

from .kernels import crop_resize

log = logging.getLogger(__name__)

CROP_SIZE = 32
BOX_HEADER = ["video_id", "frame_index", "x1", "y1", "x2", "y2", "confidence"]
FRAME_EXTENSIONS = (".png", ".jpg", ".jpeg")
_FRAME_RE = re.compile(r"^frame_(\d{6})$")


class DataError(ValueError):
    """Raised for malformed datasets, box files and label files."""


@dataclass
class VideoFrames:
    video_id: str
    frame_count: int
    loader: Callable[[int], np.ndarray]
    shape: tuple[int, int, int]  # (channels, H, W)


class FrameStore:
    """Read-only, lazily loaded collection of videos ordered by ``video_id``."""

    def __init__(self, videos: Iterable[VideoFrames]):
        self._videos = OrderedDict((v.video_id, v) for v in sorted(videos, key=lambda v: v.video_id))

    @property
    def video_ids(self) -> list[str]:
        return list(self._videos)

    def __len__(self) -> int:
        return len(self._videos)

    def __contains__(self, video_id: str) -> bool:
        return video_id in self._videos

    def video(self, video_id: str) -> VideoFrames:
        return self._videos[video_id]

    def frame_count(self, video_id: str) -> int:
        return self._videos[video_id].frame_count

    def frame_shape(self, video_id: str) -> tuple[int, int, int]:
        return self._videos[video_id].shape

    def frame(self, video_id: str, index: int) -> np.ndarray:
        v = self._videos[video_id]
        if not 0 <= index < v.frame_count:
            raise IndexError(f"frame {index} out of range for video {video_id!r} ({v.frame_count} frames)")
        return v.loader(index)


@dataclass(frozen=True)
class ObjectBox:
    video_id: str
    frame_index: int
    x1: float
    y1: float
    x2: float
    y2: float
    confidence: float = 1.0

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise DataError(f"degenerate box {self.as_tuple()} in video {self.video_id!r} frame {self.frame_index}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass
class STClip:
    """Crops of one object over ``t`` consecutive frames, shape ``(t, C, 32, 32)``.

    ``frame_index`` is the index of the last frame of the cube; every crop uses
    ``box`` (the box detected in that last frame).
    """
    cube: np.ndarray
    video_id: str
    frame_index: int
    box: ObjectBox

    @property
    def t(self) -> int:
        return self.cube.shape[0]


@dataclass
class LabelTrack:
    video_id: str
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int8)


@dataclass
class DatasetLayout:
    split: str = "train"
    channels: int = 3


@dataclass
class IngestReport:
    rows: int = 0
    kept: int = 0
    dropped_low_confidence: int = 0
    dropped_out_of_frame: int = 0
    clips: int = 0
    skipped_short_history: int = 0
    skipped_unknown_video: int = 0


# --------------------------------------------------------------------------- frames

def _to_chw(img: Image.Image, channels: int) -> np.ndarray:
    img = img.convert("L" if channels == 1 else "RGB")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return np.ascontiguousarray(arr)


def _disk_loader(files: list[Path], channels: int) -> Callable[[int], np.ndarray]:
    def load(index: int) -> np.ndarray:
        with Image.open(files[index]) as img:
            return _to_chw(img, channels)
    return load


def load_frame_store(dataset_root: str | Path, layout: DatasetLayout | None = None) -> FrameStore:
    """Index ``<root>/<split>/<video_id>/frame_%06d.<ext>`` without decoding pixels."""
    layout = layout or DatasetLayout()
    split_dir = Path(dataset_root) / layout.split
    if not split_dir.is_dir():
        raise DataError(f"missing directory {split_dir}")
    videos = []
    for vdir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        files = sorted(p for p in vdir.iterdir() if p.suffix.lower() in FRAME_EXTENSIONS)
        if not files:
            raise DataError(f"video {vdir.name!r} has zero frames ({vdir})")
        size = None
        for i, f in enumerate(files):
            m = _FRAME_RE.match(f.stem)
            if m is None or int(m.group(1)) != i:
                raise DataError(f"non-contiguous or misnamed frame file {f} (expected frame_{i:06d})")
            with Image.open(f) as img:
                if size is None:
                    size = img.size
                elif img.size != size:
                    raise DataError(f"inconsistent frame size in {f}: {img.size[1]}x{img.size[0]}, "
                                    f"expected {size[1]}x{size[0]}")
        shape = (layout.channels, size[1], size[0])
        videos.append(VideoFrames(vdir.name, len(files), _disk_loader(files, layout.channels), shape))
    if not videos:
        raise DataError(f"no videos found in {split_dir}")
    return FrameStore(videos)


def memory_store(frames: dict[str, np.ndarray]) -> FrameStore:
    """FrameStore over in-memory uint8 arrays of shape ``(frames, C, H, W)``."""
    videos = []
    for vid, arr in frames.items():
        if arr.shape[0] == 0:
            raise DataError(f"video {vid!r} has zero frames")
        videos.append(VideoFrames(vid, arr.shape[0], lambda i, a=arr: a[i].astype(np.float32) / 255.0,
                                  tuple(arr.shape[1:])))
    return FrameStore(videos)


# --------------------------------------------------------------------------- boxes

def load_boxes(box_file: str | Path, store: FrameStore | None = None, threshold: float = 0.5,
               report: IngestReport | None = None) -> list[ObjectBox]:
    """Read a box CSV, drop rows under ``threshold`` and clamp to frame bounds.

    Without a ``store`` the frame size is unknown and only the lower bound
    (0) is enforced: negative coordinates are an error.
    """
    report = report if report is not None else IngestReport()
    path = Path(box_file)
    if not path.is_file():
        raise DataError(f"missing box file {path}")
    boxes = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != BOX_HEADER:
            raise DataError(f"{path}: header must be {','.join(BOX_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(BOX_HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(BOX_HEADER)} fields, got {len(row)}")
            try:
                vid = row[0].strip()
                fi = int(row[1])
                x1, y1, x2, y2, conf = (float(v) for v in row[2:])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: malformed row ({exc})") from None
            report.rows += 1
            if not (x1 < x2 and y1 < y2):
                raise DataError(f"{path}:{lineno}: degenerate box ({x1}, {y1}, {x2}, {y2})")
            if conf < threshold:
                report.dropped_low_confidence += 1
                continue
            if store is not None and vid in store:
                _, h, w = store.frame_shape(vid)
                x1, x2 = min(max(x1, 0.0), w), min(max(x2, 0.0), w)
                y1, y2 = min(max(y1, 0.0), h), min(max(y2, 0.0), h)
                if not (x1 < x2 and y1 < y2):
                    report.dropped_out_of_frame += 1
                    continue
            elif min(x1, y1) < 0:
                raise DataError(f"{path}:{lineno}: negative coordinates after clamping")
            boxes.append(ObjectBox(vid, fi, x1, y1, x2, y2, conf))
            report.kept += 1
    if report.dropped_low_confidence:
        log.info("%s: dropped %d boxes below confidence %.2f", path.name,
                 report.dropped_low_confidence, threshold)
    return boxes


def write_boxes(boxes: Iterable[ObjectBox], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BOX_HEADER)
        for b in boxes:
            w.writerow([b.video_id, b.frame_index, f"{b.x1:g}", f"{b.y1:g}", f"{b.x2:g}", f"{b.y2:g}",
                        f"{b.confidence:g}"])


# --------------------------------------------------------------------------- labels

def load_labels(path: str | Path) -> dict[str, LabelTrack]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing label file {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    return {vid: LabelTrack(vid, np.asarray(arr)) for vid, arr in sorted(raw.items())}


def write_labels(tracks: dict[str, LabelTrack], path: str | Path) -> None:
    payload = {vid: t.labels.astype(int).tolist() for vid, t in sorted(tracks.items())}
    Path(path).write_text(json.dumps(payload))


# --------------------------------------------------------------------------- cubes

def assemble_stclips(store: FrameStore, boxes: Iterable[ObjectBox], temporal_window: int = 4,
                     size: int = CROP_SIZE, report: IngestReport | None = None) -> Iterator[STClip]:
    """Yield one cube per box with at least ``temporal_window`` frames of history.

    Output is ordered by ``(video_id, frame_index)``; boxes sharing a frame keep
    their input order.
    """
    if temporal_window < 1:
        raise ValueError("temporal_window must be >= 1")
    report = report if report is not None else IngestReport()
    t = temporal_window + 1
    ordered = sorted(boxes, key=lambda b: (b.video_id, b.frame_index))
    cache: OrderedDict[int, np.ndarray] = OrderedDict()
    current = None
    for box in ordered:
        if box.video_id not in store:
            report.skipped_unknown_video += 1
            continue
        if box.frame_index < temporal_window:
            report.skipped_short_history += 1
            continue
        if box.video_id != current:
            current = box.video_id
            cache.clear()
        cube = np.empty((t, store.frame_shape(current)[0], size, size), dtype=np.float32)
        for j, fi in enumerate(range(box.frame_index - temporal_window, box.frame_index + 1)):
            frame = cache.get(fi)
            if frame is None:
                frame = store.frame(current, fi)
                cache[fi] = frame
                if len(cache) > 4 * t:
                    cache.popitem(last=False)
            cube[j] = crop_resize(frame, box.x1, box.y1, box.x2, box.y2, size, size)
        report.clips += 1
        yield STClip(cube, box.video_id, box.frame_index, box)
    if report.skipped_short_history:
        log.debug("skipped %d boxes with insufficient history", report.skipped_short_history)


def stack_clips(clips: Iterable[STClip]) -> tuple[np.ndarray, list[STClip]]:
    clips = list(clips)
    if not clips:
        return np.empty((0,), dtype=np.float32), clips
    return np.stack([c.cube for c in clips]), clips


# --------------------------------------------------------------------------- synthetic

@dataclass
class SyntheticConfig:
    n_train_videos: int = 8
    n_test_videos: int = 4
    frames_per_video: int = 200
    image_size: int = 64
    anomaly_rate: float = 0.25
    seed: int = 0
    channels: int = 3
    max_objects: int = 3

    def validate(self) -> list[str]:
        errs = []
        if not 0.0 <= self.anomaly_rate < 1.0:
            errs.append(f"anomaly_rate must lie in [0, 1), got {self.anomaly_rate}")
        if self.image_size < 32:
            errs.append("image_size must be >= 32")
        if self.frames_per_video < 10:
            errs.append("frames_per_video must be >= 10")
        if self.channels not in (1, 3):
            errs.append("channels must be 1 or 3")
        if self.n_train_videos < 1 or self.n_test_videos < 0:
            errs.append("need n_train_videos >= 1 and n_test_videos >= 0")
        return errs


@dataclass
class Split:
    store: FrameStore
    boxes: list[ObjectBox]
    labels: dict[str, LabelTrack]
    frames: dict[str, np.ndarray] = field(repr=False, default_factory=dict)


@dataclass
class SyntheticDataset:
    train: Split
    test: Split
    config: SyntheticConfig


_NORMAL_COLORS = np.array([[200, 60, 50], [60, 80, 200], [190, 90, 160]], dtype=np.float64)
_ANOMALY_COLORS = np.array([[60, 200, 70], [230, 210, 40]], dtype=np.float64)
_MARGIN = 2
NOISE_SD = 2.0
# two one-way lanes: (centre as a fraction of image height, direction)
LANES = ((0.42, 1.0), (0.68, -1.0))
LANE_SPEED = 1.2
ANOMALY_KINDS = ("fast", "foreign", "striped")


@dataclass
class _Obj:
    x: float
    y: float
    vx: float
    size: float
    color: np.ndarray
    shape: str = "square"
    kind: str = "normal"

    @property
    def anomalous(self) -> bool:
        return self.kind != "normal"


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = 110 + 30 * yy + 15 * xx
    band = ((yy > 0.2) & (yy < 0.9)) * 25.0   # walkway, wider than the lanes
    texture = rng.normal(0, 4, (size, size))
    bg = np.clip(base + band + texture, 0, 255)
    return np.repeat(bg[None], 3, axis=0)


def _alpha(obj: _Obj, size: int) -> np.ndarray:
    cols = np.arange(size)
    if obj.shape in ("square", "striped"):
        cx = np.clip(np.minimum(cols + 1, obj.x + obj.size) - np.maximum(cols, obj.x), 0, 1)
        cy = np.clip(np.minimum(cols + 1, obj.y + obj.size) - np.maximum(cols, obj.y), 0, 1)
        return cy[:, None] * cx[None, :]
    r = obj.size / 2
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - (obj.y + r), xx - (obj.x + r)
    if obj.shape == "circle":
        d = np.hypot(dx, dy)
    else:  # diamond
        d = np.abs(dx) + np.abs(dy)
    return np.clip(r + 0.5 - d, 0, 1)


def _box_of(obj: _Obj, size: int) -> tuple[float, float, float, float] | None:
    """Box of an object whose box (object plus margin) fits in the frame, else None."""
    x1, y1 = math.floor(obj.x) - _MARGIN, math.floor(obj.y) - _MARGIN
    x2, y2 = math.ceil(obj.x + obj.size) + _MARGIN, math.ceil(obj.y + obj.size) + _MARGIN
    if x1 < 0 or y1 < 0 or x2 > size or y2 > size:
        return None
    return (x1, y1, x2, y2)


def _spawn_normal(rng: np.random.Generator, size: int, anywhere: bool = False) -> _Obj:
    s = rng.uniform(8, 11)
    centre, direction = LANES[rng.integers(len(LANES))]
    speed = LANE_SPEED + rng.uniform(-0.05, 0.05)
    if anywhere:
        x = rng.uniform(0, size - s)
    else:
        x = -s if direction > 0 else float(size)
    y = centre * size - s / 2 + rng.uniform(-1.5, 1.5)
    color = _NORMAL_COLORS[rng.integers(len(_NORMAL_COLORS))] + rng.normal(0, 8, 3)
    return _Obj(x, y, direction * speed, s, color)


def _spawn_anomaly(rng: np.random.Generator, size: int) -> _Obj:
    obj = _spawn_normal(rng, size)
    obj.kind = str(ANOMALY_KINDS[rng.integers(len(ANOMALY_KINDS))])
    if obj.kind == "fast":
        # a cyclist among pedestrians
        obj.vx *= rng.uniform(1.8, 2.4)
    elif obj.kind == "foreign":
        obj.shape = str(rng.choice(["circle", "diamond"]))
        obj.size = rng.uniform(10, 12)
        obj.color = _ANOMALY_COLORS[rng.integers(len(_ANOMALY_COLORS))] + rng.normal(0, 8, 3)
    else:
        obj.shape = "striped"
    return obj


def _clear(new: _Obj, objs: list[_Obj], gap: float = 6.0) -> bool:
    """True when ``new`` keeps at least ``gap`` px from every existing object."""
    for o in objs:
        if (abs((new.x + new.size / 2) - (o.x + o.size / 2)) < (new.size + o.size) / 2 + gap and
                abs((new.y + new.size / 2) - (o.y + o.size / 2)) < (new.size + o.size) / 2 + gap):
            return False
    return True


def _on_screen(obj: _Obj, size: int) -> bool:
    # objects enter from just outside the frame
    return -obj.size - 1 <= obj.x <= size + 1


def _render_video(rng: np.random.Generator, cfg: SyntheticConfig, bg: np.ndarray, video_id: str,
                  anomaly_starts: list[int]) -> tuple[np.ndarray, list[ObjectBox], np.ndarray]:
    size, n = cfg.image_size, cfg.frames_per_video
    frames = np.empty((n, 3, size, size), dtype=np.uint8)
    labels = np.zeros(n, dtype=np.int8)
    boxes = []
    objs: list[_Obj] = []
    for _ in range(rng.integers(1, cfg.max_objects + 1)):
        cand = _spawn_normal(rng, size, anywhere=True)
        if _clear(cand, objs):
            objs.append(cand)
    pending = sorted(anomaly_starts)
    for fi in range(n):
        if pending and fi >= pending[0]:
            cand = _spawn_anomaly(rng, size)
            if _clear(cand, objs):
                objs.append(cand)
                pending.pop(0)
        n_normal = sum(not o.anomalous for o in objs)
        if n_normal == 0 or (n_normal < cfg.max_objects and rng.random() < 0.05):
            cand = _spawn_normal(rng, size)
            if _clear(cand, objs):
                objs.append(cand)
        img = bg.copy()
        for obj in objs:
            a = _alpha(obj, size)[None]
            color = obj.color[:, None, None]
            if obj.shape == "striped":
                rows = np.arange(size)[:, None] - obj.y
                color = color * np.where((np.floor(rows / 2) % 2) == 0, 1.0, 0.35)[None]
            img = img * (1 - a) + color * a
            box = _box_of(obj, size)
            if box is not None:
                boxes.append(ObjectBox(video_id, fi, *box, confidence=1.0))
                if obj.anomalous:
                    labels[fi] = 1
        img += rng.normal(0, NOISE_SD, img.shape)
        frames[fi] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        for obj in objs:
            obj.x += obj.vx
        objs = [o for o in objs if _on_screen(o, size)]
    if cfg.channels == 1:
        gray = frames.astype(np.float64).transpose(0, 2, 3, 1) @ np.array([0.299, 0.587, 0.114])
        frames = np.clip(np.rint(gray), 0, 255).astype(np.uint8)[:, None]
    return frames, boxes, labels


def _anomaly_schedule(rng: np.random.Generator, cfg: SyntheticConfig) -> list[int]:
    if cfg.anomaly_rate <= 0:
        return []
    n = cfg.frames_per_video
    # an anomalous object is on screen for roughly image_size / speed frames
    typical = cfg.image_size / 2.0
    n_events = max(1, int(round(cfg.anomaly_rate * n / typical)))
    slots = np.linspace(10, n - typical / 2, n_events + 1)
    return sorted(int(rng.uniform(lo, max(lo + 1, hi - typical * 0.5))) for lo, hi in zip(slots[:-1], slots[1:]))


def generate_synthetic_dataset(config: SyntheticConfig | None = None, seed: int | None = None) -> SyntheticDataset:
    """Deterministic moving-shapes dataset.

    Train videos hold only squares from a fixed palette walking along two
    one-way lanes at a common pace. Test videos additionally contain anomalous
    objects: fast squares, foreign shapes
    in foreign colours, and striped squares. Frames in which an anomalous
    object has a box are labelled 1. Boxes are exact (object extent plus a
    2 px margin) and only emitted when the whole box lies inside the frame.
    """
    cfg = config or SyntheticConfig()
    if seed is not None:
        cfg = SyntheticConfig(**{**asdict(cfg), "seed": seed})
    errs = cfg.validate()
    if errs:
        raise ValueError("; ".join(errs))
    root = np.random.default_rng(cfg.seed)
    bg = _background(np.random.default_rng(root.integers(2**32)), cfg.image_size)

    def make(split: str, count: int, anomalous: bool) -> Split:
        frames, boxes, labels = {}, [], {}
        for k in range(count):
            rng = np.random.default_rng(root.integers(2**32))
            vid = f"{split}_{k:02d}"
            starts = _anomaly_schedule(rng, cfg) if anomalous else []
            f, b, lab = _render_video(rng, cfg, bg, vid, starts)
            frames[vid], labels[vid] = f, LabelTrack(vid, lab)
            boxes.extend(b)
        return Split(memory_store(frames), boxes, labels, frames)

    return SyntheticDataset(make("train", cfg.n_train_videos, False), make("test", cfg.n_test_videos, True), cfg)


def write_dataset(ds: SyntheticDataset, root: str | Path) -> Path:
    """Write a synthetic dataset in the on-disk layout (PNG frames, CSV boxes, JSON labels)."""
    root = Path(root)
    for name in ("train", "test"):
        split: Split = getattr(ds, name)
        for vid, arr in split.frames.items():
            vdir = root / name / vid
            vdir.mkdir(parents=True, exist_ok=True)
            for i, frame in enumerate(arr):
                img = frame[0] if frame.shape[0] == 1 else frame.transpose(1, 2, 0)
                Image.fromarray(img).save(vdir / f"frame_{i:06d}.png")
        write_boxes(split.boxes, root / f"boxes_{name}.csv")
        write_labels(split.labels, root / f"labels_{name}.json")
    (root / "synthetic.json").write_text(json.dumps(asdict(ds.config), indent=2))
    return root
