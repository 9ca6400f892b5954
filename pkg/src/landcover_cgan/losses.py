"""Adversarial and class-weighted reconstruction losses.

All functions take torch tensors and are differentiable w.r.t. the
predictions. Probabilities are clamped to ``[EPS, 1 - EPS]`` before logs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal

import torch

from .errors import DegenerateWeightsError

log = logging.getLogger(__name__)

EPS = 1e-7
DEFAULT_LAMBDA = 100.0


@dataclass(frozen=True)
class LossConfig:
    lam: float = DEFAULT_LAMBDA
    adversarial_g_form: Literal["non_saturating", "literal"] = "non_saturating"
    reconstruction: Literal["l2", "l1"] = "l2"
    per_tile: bool = True
    num_classes: int = 6

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.adversarial_g_form not in ("non_saturating", "literal"):
            raise ValueError(f"unknown adversarial form {self.adversarial_g_form!r}")
        if self.reconstruction not in ("l2", "l1"):
            raise ValueError(f"unknown reconstruction norm {self.reconstruction!r}")


@dataclass(frozen=True)
class LossValue:
    total: torch.Tensor
    adversarial: torch.Tensor
    reconstruction: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {"g_total": self.total.item(), "g_adv": self.adversarial.item(),
                "g_rec": self.reconstruction.item()}


def _clamp(scores: torch.Tensor, what: str) -> torch.Tensor:
    if log.isEnabledFor(logging.DEBUG):
        n = int(((scores < EPS) | (scores > 1 - EPS)).sum())
        if n:
            log.debug("clamped %d %s scores to [%g, 1 - %g]", n, what, EPS, EPS)
    return scores.clamp(EPS, 1 - EPS)


def d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """``-mean log D(X, Y) - mean log(1 - D(X, G(X)))``; minimised by the discriminator."""
    real = _clamp(real_scores, "real")
    fake = _clamp(fake_scores, "fake")
    return -torch.log(real).mean() - torch.log1p(-fake).mean()


def g_adv_loss(fake_scores: torch.Tensor, form: str = "non_saturating") -> torch.Tensor:
    """Generator's adversarial term.

    ``non_saturating``: ``-mean log D(X, G(X))``; ``literal``: ``mean log(1 - D(X, G(X)))``.
    """
    fake = _clamp(fake_scores, "fake")
    if form == "non_saturating":
        return -torch.log(fake).mean()
    if form == "literal":
        return torch.log1p(-fake).mean()
    raise ValueError(f"unknown adversarial form {form!r}")


def _inverse_weights(w, like: torch.Tensor) -> torch.Tensor:
    w = torch.as_tensor(getattr(w, "w", w), dtype=like.dtype, device=like.device)
    if w.ndim != 1 or w.shape[0] != like.shape[1]:
        raise ValueError(f"need {like.shape[1]} class weights, got shape {tuple(w.shape)}")
    if not torch.all(w > 0):
        raise DegenerateWeightsError("class weights must be strictly positive")
    return 1.0 / w


def _batched(t: torch.Tensor) -> torch.Tensor:
    return t.unsqueeze(0) if t.ndim == 3 else t


def weighted_l2(target: torch.Tensor, pred: torch.Tensor, w, per_tile: bool = True,
                norm: str = "l2") -> torch.Tensor:
    """Inverse-frequency weighted mean of per-class channel norms.

    For each class ``c`` the residual channel ``Y_c - Yhat_c`` is reduced to its
    root-sum-of-squares over pixels; the class norms are averaged with weights
    ``1/w_c``. With ``per_tile`` the norm is taken per sample and averaged over
    the batch, otherwise over the whole batch at once. ``norm="l1"`` swaps in
    sum of absolute residuals (ablation only).
    """
    target, pred = _batched(target), _batched(pred)
    if target.shape != pred.shape:
        raise ValueError(f"target {tuple(target.shape)} and prediction {tuple(pred.shape)} differ")
    inv = _inverse_weights(w, pred)
    diff = target - pred
    dims = (2, 3) if per_tile else (0, 2, 3)
    if norm == "l2":
        class_norms = torch.sqrt(diff.pow(2).sum(dim=dims))
    elif norm == "l1":
        class_norms = diff.abs().sum(dim=dims)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    per_sample = (class_norms * inv).sum(dim=-1) / inv.sum()
    return per_sample.mean()


def weighted_cross_entropy(target: torch.Tensor, pred: torch.Tensor, w) -> torch.Tensor:
    """``-mean_pixels sum_c (y_c / w_c) log(yhat_c)`` with ``yhat`` clamped at ``EPS``."""
    target, pred = _batched(target), _batched(pred)
    if target.shape != pred.shape:
        raise ValueError(f"target {tuple(target.shape)} and prediction {tuple(pred.shape)} differ")
    inv = _inverse_weights(w, pred).view(1, -1, 1, 1)
    per_pixel = (target * inv * torch.log(pred.clamp_min(EPS))).sum(dim=1)
    return -per_pixel.mean()


def g_total_loss(adv: torch.Tensor, rec: torch.Tensor, config: LossConfig | None = None) -> LossValue:
    """``adv + lambda * rec``."""
    config = config or LossConfig()
    adv = torch.as_tensor(adv)
    rec = torch.as_tensor(rec)
    for name, v in (("adversarial", adv), ("reconstruction", rec)):
        if not torch.isfinite(v).all():
            raise ValueError(f"{name} loss is not finite: {v.item()}")
    return LossValue(adv + config.lam * rec, adv, rec)
