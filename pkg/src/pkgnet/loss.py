"""Training objectives: prediction MSE, gradient (sharpness) loss and
teacher/student feature inconsistency."""
from __future__ import annotations

from dataclasses import dataclass

import torch

EPS = 1e-8


@dataclass
class LossWeights:
    lambda_e: float = 0.7
    lambda_g: float = 0.1
    lambda_c: float = 0.2
    alpha: int = 1

    def validate(self) -> list[str]:
        errs = []
        if min(self.lambda_e, self.lambda_g, self.lambda_c) < 0:
            errs.append("loss weights must be nonnegative")
        if max(self.lambda_e, self.lambda_g, self.lambda_c) <= 0:
            errs.append("at least one loss weight must be positive")
        if int(self.alpha) != self.alpha or self.alpha < 1:
            errs.append(f"alpha must be an integer >= 1, got {self.alpha}")
        return errs

    def for_mode(self, mode: str) -> "LossWeights":
        if mode == "AE_only":
            return LossWeights(self.lambda_e, self.lambda_g, 0.0, self.alpha)
        if mode == "KD_only":
            return LossWeights(0.0, 0.0, self.lambda_c, self.alpha)
        return self


@dataclass
class LossBreakdown:
    L_e: torch.Tensor
    L_g: torch.Tensor
    L_c: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("L_e", "L_g", "L_c", "total")}


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def prediction_loss(pred: torch.Tensor, target: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    _check_shapes(pred, target)
    sq = (pred - target) ** 2
    return sq.sum() if reduction == "sum" else sq.mean()


def gradient_loss(pred: torch.Tensor, target: torch.Tensor, alpha: int = 1,
                  reduction: str = "mean") -> torch.Tensor:
    """Difference of absolute image gradients along rows and columns.

    Positions without an upper (resp. left) neighbour are dropped. With
    ``reduction="mean"`` each direction is averaged over its own valid
    positions (and all leading dims) and the two means are added.
    """
    _check_shapes(pred, target)
    if alpha < 1:
        raise ValueError(f"alpha must be >= 1, got {alpha}")
    dy_t = (target[..., 1:, :] - target[..., :-1, :]).abs()
    dy_p = (pred[..., 1:, :] - pred[..., :-1, :]).abs()
    dx_t = (target[..., :, :-1] - target[..., :, 1:]).abs()
    dx_p = (pred[..., :, :-1] - pred[..., :, 1:]).abs()
    gy = (dy_t - dy_p).abs() ** alpha
    gx = (dx_t - dx_p).abs() ** alpha
    if reduction == "sum":
        return gy.sum() + gx.sum()
    zero = pred.new_zeros(())
    return (gy.mean() if gy.numel() else zero) + (gx.mean() if gx.numel() else zero)


def feature_inconsistency_map(f_s: torch.Tensor, f_t: torch.Tensor) -> torch.Tensor:
    """``1 - cos`` along the channel axis of ``(..., C, M, N)`` tensors -> ``(..., M, N)``.

    The teacher side is detached. A zero vector gives 1.
    """
    _check_shapes(f_s, f_t)
    f_t = f_t.detach()
    dot = (f_s * f_t).sum(dim=-3)
    denom = (f_s.norm(dim=-3) * f_t.norm(dim=-3)).clamp_min(EPS)
    return 1.0 - dot / denom


def feature_inconsistency_loss(taps: list[tuple[torch.Tensor, torch.Tensor]]) -> torch.Tensor:
    if not taps:
        raise ValueError("feature_inconsistency_loss needs at least one (student, teacher) pair")
    per_block = [feature_inconsistency_map(s, t).mean() for s, t in taps]
    return torch.stack(per_block).mean()


def total_loss(L_e: torch.Tensor, L_g: torch.Tensor, L_c: torch.Tensor, weights: LossWeights,
               mode: str = "PKG") -> LossBreakdown:
    w = weights.for_mode(mode)
    L_e, L_g, L_c = (torch.as_tensor(v, dtype=torch.float32) if not torch.is_tensor(v) else v
                     for v in (L_e, L_g, L_c))
    total = w.lambda_e * L_e + w.lambda_g * L_g + w.lambda_c * L_c
    return LossBreakdown(L_e, L_g, L_c, total)


def compute_losses(out, target: torch.Tensor, weights: LossWeights, mode: str = "PKG") -> LossBreakdown:
    """All three terms for a :class:`~pkgnet.model.ForwardOutput` batch.

    Terms switched off by ``mode`` are reported as 0 and not computed.
    """
    zero = out.prediction.new_zeros(())
    if mode == "KD_only":
        L_e = L_g = zero
    else:
        L_e = prediction_loss(out.prediction, target)
        L_g = gradient_loss(out.prediction, target, int(weights.alpha))
    if mode == "AE_only" or not out.student_taps:
        L_c = zero
    else:
        L_c = feature_inconsistency_loss([(out.student_taps[k], out.teacher_taps[k]) for k in out.student_taps])
    return total_loss(L_e, L_g, L_c, weights, mode)
