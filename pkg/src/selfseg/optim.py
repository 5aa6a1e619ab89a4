"""Training losses, the all-background gate and poly-scheduled momentum SGD."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import numcore as nc
from .numcore import Tensor
from .structures import PseudoMask

DEFAULT_BASE_LRS = {"encoder": 0.1, "decoder": 0.01, "classifier": 1.0}


class StepOverflowError(RuntimeError):
    pass


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def multilabel_soft_margin(class_logits: Tensor, targets) -> Tensor:
    """Mean over samples and classes of binary cross-entropy on sigmoid(logits)."""
    y = np.asarray(targets, dtype=np.float64)
    x = class_logits.data
    if x.shape != y.shape:
        raise nc.ShapeError(f"logits {x.shape} vs targets {y.shape}")
    # -[y log s(x) + (1-y) log(1-s(x))] == softplus(x) - y*x
    loss = (_softplus(x) - y * x).mean()
    scale = 1.0 / x.size

    def bw(g):
        return ((nc._stable_sigmoid(x) - y) * (float(g) * scale),)

    return nc.make_op(np.array(loss), (class_logits,), bw, "multilabel_soft_margin")


def background_gate(masks: Iterable[PseudoMask | np.ndarray]) -> np.ndarray:
    """1 for masks with any foreground pixel, 0 for all-background masks."""
    out = []
    for m in masks:
        labels = m.labels if isinstance(m, PseudoMask) else np.asarray(m)
        out.append(1.0 if labels.any() else 0.0)
    return np.array(out)


def _labels_array(masks) -> np.ndarray:
    if isinstance(masks, np.ndarray):
        return masks.astype(np.int64)
    return np.stack([m.labels if isinstance(m, PseudoMask) else np.asarray(m) for m in masks]).astype(np.int64)


def pixel_cross_entropy(pixel_logits: Tensor, labels: np.ndarray, weights: np.ndarray, denom: float) -> Tensor:
    """sum_i weights[i] * mean_pixels(CE_i) / denom for logits N x L x H x W."""
    z = pixel_logits.data
    n, nl, h, w = z.shape
    if labels.shape != (n, h, w):
        raise nc.ShapeError(f"labels {labels.shape} do not match logits {z.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= nl:
        raise ValueError(f"labels must lie in 0..{nl - 1}")
    m = z.max(axis=1, keepdims=True)
    logp = z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    picked = np.take_along_axis(logp, labels[:, None], axis=1)[:, 0]
    per_sample = -picked.reshape(n, -1).mean(axis=1)
    live = weights != 0
    loss = float((weights[live] * per_sample[live]).sum() / denom) if live.any() else 0.0

    def bw(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, labels[:, None], np.take_along_axis(grad, labels[:, None], axis=1) - 1.0, axis=1)
        grad *= (float(g) * weights / (denom * h * w))[:, None, None, None]
        grad[~live] = 0.0
        return (grad,)

    return nc.make_op(np.array(loss), (pixel_logits,), bw, "pixel_cross_entropy")


def modified_cross_entropy(
    pixel_logits: Tensor,
    masks: Sequence[PseudoMask] | np.ndarray,
    gate: np.ndarray | None = None,
    normalize: str = "gated",
    literal: bool = False,
) -> Tensor:
    """Pixel cross-entropy that ignores all-background pseudo-masks.

    ``normalize="gated"`` divides by the number of gated-in samples (at least
    one), ``"batch"`` by the batch size.  ``literal=True`` multiplies the logits
    by the gate before an ungated cross-entropy instead of gating the loss.
    """
    labels = _labels_array(masks)
    r = background_gate(labels) if gate is None else np.asarray(gate, dtype=np.float64)
    n = labels.shape[0]
    if r.shape != (n,):
        raise nc.ShapeError(f"gate has shape {r.shape}, expected ({n},)")
    if literal:
        scaled = nc.mul(pixel_logits, r[:, None, None, None])
        return pixel_cross_entropy(scaled, labels, np.ones(n), float(n))
    if normalize == "gated":
        denom = max(1.0, float(r.sum()))
    elif normalize == "batch":
        denom = float(n)
    else:
        raise ValueError(f"unknown normalization {normalize!r}")
    return pixel_cross_entropy(pixel_logits, labels, r, denom)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class PolySchedule:
    base_lrs: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_BASE_LRS))
    momentum: float = 0.9
    power: float = 0.9
    max_steps: int = 1
    current_step: int = 0

    def lr(self, group: str, step: int | None = None) -> float:
        step = self.current_step if step is None else step
        if not 0 <= step <= self.max_steps:
            raise StepOverflowError(f"step {step} outside [0, {self.max_steps}]")
        return self.base_lrs[group] * (1.0 - step / self.max_steps) ** self.power


@dataclass
class PolySGD:
    """Classical momentum SGD, ``v <- m*v - lr*g; p <- p + v``, per-group poly LR."""

    schedule: PolySchedule
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params, grads: dict[str, np.ndarray] | None = None) -> None:
        """Update every parameter that has a gradient; others stay frozen this step."""
        poly_sgd_step(params, self.schedule, self.velocity, grads)


def poly_sgd_step(params, schedule: PolySchedule, velocity: dict[str, np.ndarray], grads=None) -> None:
    if schedule.current_step >= schedule.max_steps:
        raise StepOverflowError(f"schedule exhausted ({schedule.max_steps} steps)")
    m = schedule.momentum
    for name, t in params.tensors.items():
        g = t.grad if grads is None else grads.get(name)
        if g is None:
            continue
        lr = schedule.lr(params.group_of(name))
        v = velocity.get(name)
        v = -lr * g if v is None else m * v - lr * g
        velocity[name] = v
        t.data = t.data + v
    schedule.current_step += 1
