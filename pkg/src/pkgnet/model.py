"""Frozen residual-network teacher and the student auto-encoder.

Reference student layout for a 32x32 input and ``bottleneck_block = b``::

    stem   conv3x3                         32x32   width
    enc_s  strided conv3x3 + conv3x3       32/2^s  (s = 1 .. b+1)
    bottleneck  1x1 projection + 2 residual bottleneck units at 32/2^(b+1),
                width = channels of teacher block b
    dec_r  2x transposed conv, concat encoder skip, conv3x3 + BN + ReLU
           at each resolution back up to 32; a stage whose resolution matches
           a tapped teacher block gets that block's channel count and is tapped
    head   conv3x3 -> channels_per_frame, sigmoid

Teacher block k of a ResNet sees a 32x32 input at 32/2^(k+1), so block 1 is
8x8, block 2 is 4x4, block 3 is 2x2 and block 4 is 1x1.
"""
from __future__ import annotations

import io
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision.models as tvm

CHECKPOINT_FORMAT = "pkgnet-checkpoint"
CHECKPOINT_VERSION = 1
WEIGHTS_ENV = "PKGNET_WEIGHTS_DIR"
MODES = ("PKG", "AE_only", "KD_only")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

_BACKBONES = {
    "resnet18": (tvm.resnet18, tvm.ResNet18_Weights, (64, 128, 256, 512)),
    "resnet50": (tvm.resnet50, tvm.ResNet50_Weights, (256, 512, 1024, 2048)),
    "resnext50": (tvm.resnext50_32x4d, tvm.ResNeXt50_32X4D_Weights, (256, 512, 1024, 2048)),
    "wide_resnet50": (tvm.wide_resnet50_2, tvm.Wide_ResNet50_2_Weights, (256, 512, 1024, 2048)),
}


class ModelError(ValueError):
    pass


class WeightsNotFoundError(FileNotFoundError):
    pass


class CheckpointError(RuntimeError):
    pass


# --------------------------------------------------------------------------- specs

@dataclass
class TeacherSpec:
    """``pretrained_weights`` is ``"imagenet"`` (torchvision file looked up in
    ``$PKGNET_WEIGHTS_DIR`` or the torch hub cache), ``"random"`` /
    ``"random:<seed>"`` (seeded, frozen random initialisation), or a path to a
    state dict."""
    backbone: str = "resnet50"
    pretrained_weights: str = "imagenet"
    tap_blocks: list[int] = field(default_factory=lambda: [1, 2])

    def validate(self) -> list[str]:
        errs = []
        if self.backbone not in _BACKBONES:
            errs.append(f"unknown backbone {self.backbone!r}; choose from {sorted(_BACKBONES)}")
        if not self.tap_blocks:
            errs.append("tap_blocks must be non-empty")
        elif any(b not in (1, 2, 3, 4) for b in self.tap_blocks):
            errs.append(f"tap_blocks must be a subset of {{1,2,3,4}}, got {self.tap_blocks}")
        elif any(a >= b for a, b in zip(self.tap_blocks, self.tap_blocks[1:])):
            errs.append(f"tap_blocks must be strictly increasing, got {self.tap_blocks}")
        return errs


@dataclass
class TapSpec:
    pairs: list[tuple[int, str]]
    shapes: dict[int, tuple[int, int, int]]

    @property
    def K(self) -> int:
        return len(self.pairs)

    @property
    def blocks(self) -> list[int]:
        return [b for b, _ in self.pairs]

    def to_dict(self) -> dict:
        return {"pairs": [list(p) for p in self.pairs],
                "shapes": {str(k): list(v) for k, v in self.shapes.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "TapSpec":
        return cls([(int(b), s) for b, s in d["pairs"]], {int(k): tuple(v) for k, v in d["shapes"].items()})


@dataclass
class StudentConfig:
    input_frames: int = 4
    channels_per_frame: int = 3
    bottleneck_block: int = 2
    skip_connections: bool = True
    mode: str = "PKG"
    width: int = 32
    input_size: int = 32

    def validate(self) -> list[str]:
        errs = []
        if self.mode not in MODES:
            errs.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.bottleneck_block not in (2, 3, 4):
            errs.append(f"bottleneck_block must be in {{2,3,4}}, got {self.bottleneck_block}")
        if self.input_frames < 1:
            errs.append("input_frames must be >= 1")
        if self.channels_per_frame not in (1, 3):
            errs.append("channels_per_frame must be 1 or 3")
        if self.width < 4:
            errs.append("width must be >= 4")
        return errs


@dataclass
class ForwardOutput:
    prediction: torch.Tensor
    student_taps: dict[int, torch.Tensor]
    teacher_taps: dict[int, torch.Tensor]


# --------------------------------------------------------------------------- teacher

def _weights_file(backbone: str) -> Path:
    _, weights_enum, _ = _BACKBONES[backbone]
    name = Path(weights_enum.DEFAULT.url).name
    dirs = []
    if os.environ.get(WEIGHTS_ENV):
        dirs.append(Path(os.environ[WEIGHTS_ENV]))
    dirs.append(Path(torch.hub.get_dir()) / "checkpoints")
    for d in dirs:
        # accept the torchvision file name or a plain <backbone>.pth
        for cand in (d / name, d / f"{backbone}.pth"):
            if cand.is_file():
                return cand
    raise WeightsNotFoundError(
        f"missing weights for {backbone}: place {name} in ${WEIGHTS_ENV} or {dirs[-1]}, "
        f"or set pretrained_weights to a state-dict path or 'random[:seed]'")


class Teacher(nn.Module):
    """Truncated ResNet returning post-block activations for the tapped blocks.

    Parameters never require grad and the module stays in eval mode, so batch
    norm uses its stored statistics.
    """

    def __init__(self, spec: TeacherSpec, backbone: nn.Module, channels_in: int = 3):
        super().__init__()
        self.spec = spec
        self.channels_in = channels_in
        self.stem = nn.Sequential(backbone.conv1, backbone.bn1, backbone.relu, backbone.maxpool)
        depth = max(spec.tap_blocks)
        self.blocks = nn.ModuleList([getattr(backbone, f"layer{k}") for k in range(1, depth + 1)])
        self.block_channels = _BACKBONES[spec.backbone][2]
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        super().train(False)

    def train(self, mode: bool = True) -> "Teacher":
        return super().train(False)

    @torch.no_grad()
    def tap(self, image: torch.Tensor) -> dict[int, torch.Tensor]:
        """``image`` is ``(B, C, H, W)`` in [0, 1]; grayscale is replicated to RGB."""
        if image.shape[1] == 1:
            image = image.expand(-1, 3, -1, -1)
        x = self.stem((image - self.mean) / self.std)
        out = {}
        for k, block in enumerate(self.blocks, start=1):
            x = block(x)
            if k in self.spec.tap_blocks:
                out[k] = x
        return out

    forward = tap


def build_teacher(spec: TeacherSpec) -> Teacher:
    errs = spec.validate()
    if errs:
        raise ModelError("; ".join(errs))
    ctor = _BACKBONES[spec.backbone][0]
    w = spec.pretrained_weights
    if w.startswith("random"):
        seed = int(w.split(":", 1)[1]) if ":" in w else 0
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            backbone = ctor(weights=None)
    else:
        path = _weights_file(spec.backbone) if w == "imagenet" else Path(w)
        if not path.is_file():
            raise WeightsNotFoundError(f"missing weights file {path}")
        backbone = ctor(weights=None)
        backbone.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    return Teacher(spec, backbone)


def make_tap_spec(teacher: Teacher, bottleneck_block: int = 2, input_size: int = 32) -> TapSpec:
    """Record teacher tap shapes for an ``input_size`` square input."""
    with torch.no_grad():
        taps = teacher.tap(torch.zeros(1, 3, input_size, input_size))
    pairs, shapes = [], {}
    for k in teacher.spec.tap_blocks:
        shapes[k] = tuple(taps[k].shape[1:])
        stage = "bottleneck" if k == bottleneck_block else f"decoder_{shapes[k][1]}"
        pairs.append((k, stage))
    return TapSpec(pairs, shapes)


# --------------------------------------------------------------------------- student

def _conv_bn_relu(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class _ResidualUnit(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        mid = max(c // 4, 8)
        self.body = nn.Sequential(
            nn.Conv2d(c, mid, 1, bias=False), nn.BatchNorm2d(mid), nn.ReLU(inplace=True),
            nn.Conv2d(mid, mid, 3, 1, 1, bias=False), nn.BatchNorm2d(mid), nn.ReLU(inplace=True),
            nn.Conv2d(mid, c, 1, bias=False), nn.BatchNorm2d(c),
        )

    def forward(self, x):
        return F.relu(x + self.body(x))


class _UpStage(nn.Module):
    def __init__(self, cin: int, cskip: int, cout: int):
        super().__init__()
        self.up = nn.ConvTranspose2d(cin, cout, 2, 2)
        self.fuse = _conv_bn_relu(cout + cskip, cout)

    def forward(self, x, skip):
        x = self.up(x)
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        return self.fuse(x)


class Student(nn.Module):
    """Auto-encoder mapping ``(B, input_frames * C, 32, 32)`` to a predicted frame
    plus feature maps at the tapped stages."""

    def __init__(self, cfg: StudentConfig, tap: TapSpec | None):
        super().__init__()
        self.cfg = cfg
        self.tap_spec = tap if cfg.mode != "AE_only" else TapSpec([], {})
        b = cfg.bottleneck_block
        size = cfg.input_size
        n_down = b + 1
        if size % (2 ** n_down):
            raise ModelError(f"input size {size} is not divisible by 2^{n_down}")
        res = [size // 2 ** s for s in range(n_down + 1)]      # res[s] = resolution after s downsamplings
        enc_ch = [cfg.width * min(2 ** max(s - 1, 0), 8) for s in range(n_down + 1)]
        shapes = self.tap_spec.shapes

        taps_at: dict[int, int] = {}  # resolution -> teacher block
        for k, stage in self.tap_spec.pairs:
            c, m, n = shapes[k]
            if m != n:
                raise ModelError(f"tap block {k}: non-square feature {m}x{n}")
            if k > b:
                raise ModelError(f"tap block {k} is deeper than the bottleneck block {b}")
            if k == b and m != res[-1]:
                raise ModelError(f"tap block {k} has resolution {m}, bottleneck is {res[-1]}")
            if k < b and m not in res[:-1]:
                raise ModelError(f"tap block {k} resolution {m} matches no decoder stage")
            taps_at[m] = k

        self.stem = _conv_bn_relu(cfg.input_frames * cfg.channels_per_frame, enc_ch[0])
        self.encoder = nn.ModuleList(
            nn.Sequential(_conv_bn_relu(enc_ch[s - 1], enc_ch[s], 2), _conv_bn_relu(enc_ch[s], enc_ch[s]))
            for s in range(1, n_down + 1))

        if b in shapes and cfg.mode != "AE_only":
            c_bot = shapes[b][0]
        else:
            c_bot = enc_ch[-1] * 2
        self.bottleneck = nn.Sequential(
            nn.Conv2d(enc_ch[-1], c_bot, 1, bias=False), nn.BatchNorm2d(c_bot), nn.ReLU(inplace=True),
            _ResidualUnit(c_bot), _ResidualUnit(c_bot))
        self._bottleneck_block = b if b in taps_at.values() else None

        stages, cin = [], c_bot
        self._stage_block: list[int | None] = []
        for s in range(n_down - 1, -1, -1):
            r = res[s]
            k = taps_at.get(r)
            cout = shapes[k][0] if k is not None and k != b else enc_ch[s]
            cskip = enc_ch[s] if cfg.skip_connections else 0
            stages.append(_UpStage(cin, cskip, cout))
            self._stage_block.append(k if k is not None and k != b else None)
            cin = cout
        self.decoder = nn.ModuleList(stages)
        self.head = nn.Conv2d(cin, cfg.channels_per_frame, 3, 1, 1)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
        taps: dict[int, torch.Tensor] = {}
        skips = [self.stem(x)]
        for stage in self.encoder:
            skips.append(stage(skips[-1]))
        h = self.bottleneck(skips[-1])
        if self._bottleneck_block is not None:
            taps[self._bottleneck_block] = h
        for i, stage in enumerate(self.decoder):
            skip = skips[-2 - i] if self.cfg.skip_connections else None
            h = stage(h, skip)
            if self._stage_block[i] is not None:
                taps[self._stage_block[i]] = h
        return torch.sigmoid(self.head(h)), taps

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "encoder": list(self.stem.parameters()) + list(self.encoder.parameters()),
            "bottleneck": list(self.bottleneck.parameters()),
            "decoder": list(self.decoder.parameters()) + list(self.head.parameters()),
        }


def build_student(cfg: StudentConfig, tap: TapSpec | None) -> Student:
    errs = cfg.validate()
    if errs:
        raise ModelError("; ".join(errs))
    if cfg.mode != "AE_only" and (tap is None or not tap.pairs):
        raise ModelError(f"mode {cfg.mode} needs at least one tap")
    return Student(cfg, tap)


def _as_batch(clip: Any) -> torch.Tensor:
    if hasattr(clip, "cube"):
        clip = clip.cube
    x = torch.as_tensor(np.asarray(clip) if not isinstance(clip, torch.Tensor) else clip, dtype=torch.float32)
    return x.unsqueeze(0) if x.dim() == 4 else x


def forward(student: Student, teacher: Teacher | None, clip: Any,
            teacher_taps: dict[int, torch.Tensor] | None = None, check_shapes: bool = False) -> ForwardOutput:
    """Run one clip (``STClip`` or ``(t, C, H, W)``) or a batch ``(B, t, C, H, W)``.

    The first ``input_frames`` frames are channel-concatenated into the
    student; the last frame goes to the teacher. Precomputed ``teacher_taps``
    skip the teacher pass.
    """
    x = _as_batch(clip)
    cfg = student.cfg
    if x.shape[1] != cfg.input_frames + 1:
        raise ModelError(f"clip has {x.shape[1]} frames, expected input_frames + 1 = {cfg.input_frames + 1}")
    b = x.shape[0]
    inputs = x[:, :cfg.input_frames].reshape(b, -1, x.shape[-2], x.shape[-1])
    pred, s_taps = student(inputs)
    if cfg.mode == "AE_only":
        return ForwardOutput(pred, {}, {})
    if teacher_taps is None:
        if teacher is None:
            raise ModelError(f"mode {cfg.mode} needs a teacher")
        teacher_taps = teacher.tap(x[:, -1])
    t_taps = {k: teacher_taps[k].detach() for k in s_taps}
    if check_shapes:
        for k in s_taps:
            if s_taps[k].shape != t_taps[k].shape:
                raise ModelError(f"tap {k}: student {tuple(s_taps[k].shape)} != teacher {tuple(t_taps[k].shape)}")
    return ForwardOutput(pred, s_taps, t_taps)


# --------------------------------------------------------------------------- checkpoints

def save_checkpoint(path: str | Path, student: Student, optimizer_state: dict | None, epoch: int,
                    config: dict, teacher: Teacher | None = None) -> Path:
    """Write a single-file checkpoint. A randomly initialised teacher is embedded
    so scoring does not depend on the RNG stream that produced it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "config": config,
        "student_config": asdict(student.cfg),
        "tap_spec": student.tap_spec.to_dict(),
        "student_state": student.state_dict(),
        "optimizer_state": optimizer_state,
        "teacher_spec": asdict(teacher.spec) if teacher is not None else None,
        "teacher_state": (teacher.state_dict() if teacher is not None
                          and teacher.spec.pretrained_weights.startswith("random") else None),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


@dataclass
class Checkpoint:
    student: Student
    optimizer_state: dict | None
    epoch: int
    config: dict
    teacher_spec: TeacherSpec | None
    teacher_state: dict | None

    def teacher(self) -> Teacher:
        if self.teacher_spec is None:
            raise CheckpointError("checkpoint carries no teacher spec")
        if self.teacher_state is not None:
            with torch.random.fork_rng(devices=[]):
                backbone = _BACKBONES[self.teacher_spec.backbone][0](weights=None)
            t = Teacher(self.teacher_spec, backbone)
            t.load_state_dict(self.teacher_state)
            return t
        return build_teacher(self.teacher_spec)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"missing checkpoint {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"corrupted checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a pkgnet checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')!r} "
                              f"(expected {CHECKPOINT_VERSION})")
    cfg = StudentConfig(**payload["student_config"])
    student = Student(cfg, TapSpec.from_dict(payload["tap_spec"]))
    student.load_state_dict(payload["student_state"])
    student.eval()
    ts = payload.get("teacher_spec")
    return Checkpoint(student, payload.get("optimizer_state"), payload["epoch"], payload["config"],
                      TeacherSpec(**ts) if ts else None, payload.get("teacher_state"))
