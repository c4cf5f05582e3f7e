"""Training objectives as graph ops with analytic gradients.

All losses reduce to a scalar :class:`LossValue`. Batch reduction is a mean
over samples; every probability entering a log is clamped by ``EPS``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor, as_tensor
from .geometry import LandmarkSet

EPS = 1e-7


@dataclass
class LossValue:
    tensor: Tensor
    breakdown: dict[str, tuple[float, float]] = field(default_factory=dict)

    @property
    def scalar(self) -> float:
        return float(self.tensor.data)

    def backward(self) -> None:
        self.tensor.backward()

    def log_line(self, step: int) -> str:
        parts = [str(step)] + [f"{k}={v!r}" for k, (v, _) in self.breakdown.items()]
        return ",".join(parts)


def _term(name: str, t: Tensor) -> LossValue:
    return LossValue(t, {name: (float(t.data), 1.0)})


def _batched(x, ndim: int) -> Tensor:
    if isinstance(x, LandmarkSet):
        x = x.points
    t = as_tensor(x)
    if t.ndim == ndim - 1:
        t = ops.reshape(t, (1,) + t.shape)
    return t


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------


def loss_reg_backward(g, diff, norm, n, l):
    safe = np.where(norm > 0, norm, 1.0)
    unit = np.where(norm[..., None] > 0, diff / safe[..., None], 0.0)
    return g * unit / (n * l), -g * unit / (n * l)


def loss_reg(detected, truth) -> LossValue:
    """Mean per-landmark Euclidean distance, then mean over the batch.

    Inputs are (L, 2) or (batch, L, 2) coordinates.
    """
    d = _batched(detected, 3)
    t = _batched(truth, 3)
    _same_shape(d, t, "loss_reg")
    diff = d.data - t.data
    norm = np.sqrt((diff * diff).sum(axis=-1))
    n, l = norm.shape
    out = np.asarray(norm.sum() / (n * l), dtype=d.dtype)
    tensor = Tensor.from_op(out, (d, t), lambda g: loss_reg_backward(g, diff, norm, n, l), "loss_reg")
    return _term("reg", tensor)


def loss_dist_backward(g, p, t, live, n, direction):
    pc = np.clip(p, EPS, 1.0)
    if direction == "forward":
        gp = np.where(t > 0, -t / pc, 0.0) * live
        gt = np.where(t > 0, np.log(np.where(t > 0, t, 1.0) / pc) + 1.0, 0.0)
    else:
        tc = np.clip(t, EPS, 1.0)
        gp = np.where(p > 0, np.log(pc / tc) + 1.0, 0.0) * live
        gt = -np.where(p > 0, pc / tc, 0.0) * ((t >= EPS) & (t <= 1.0))
    return g * gp / n, g * gt / n


def loss_dist(predicted, truth, direction: str = "forward") -> LossValue:
    """Sum over landmark channels of KL divergence, mean over the batch.

    ``direction="forward"`` is KL(truth || predicted); ``"reverse"`` swaps the
    arguments. Maps are (h, w, L) or (batch, h, w, L) distributions.
    """
    if direction not in ("forward", "reverse"):
        raise ValueError("direction must be 'forward' or 'reverse'")
    p = _batched(predicted.data if hasattr(predicted, "semantics") else predicted, 4)
    t = _batched(truth.data if hasattr(truth, "semantics") else truth, 4)
    _same_shape(p, t, "loss_dist")
    pc = np.clip(p.data, EPS, 1.0)
    live = (p.data >= EPS) & (p.data <= 1.0)
    if direction == "forward":
        tt = t.data
        terms = np.where(tt > 0, tt * np.log(np.where(tt > 0, tt, 1.0) / pc), 0.0)
    else:
        tc = np.clip(t.data, EPS, 1.0)
        terms = np.where(p.data > 0, pc * np.log(pc / tc), 0.0)
    n = p.shape[0]
    out = np.asarray(terms.sum() / n, dtype=p.dtype)
    tensor = Tensor.from_op(out, (p, t), lambda g: loss_dist_backward(g, p.data, t.data, live, n, direction),
                            "loss_dist")
    return _term("dist", tensor)


def loss_hreg_backward(g, diff, n):
    return 2.0 * g * diff / n, -2.0 * g * diff / n


def loss_hreg(predicted, truth) -> LossValue:
    """Sum of squared differences over all landmark and background channels, mean over the batch."""
    p = _batched(predicted.data if hasattr(predicted, "semantics") else predicted, 4)
    t = _batched(truth.data if hasattr(truth, "semantics") else truth, 4)
    _same_shape(p, t, "loss_hreg")
    diff = p.data - t.data
    n = p.shape[0]
    out = np.asarray((diff * diff).sum() / n, dtype=p.dtype)
    tensor = Tensor.from_op(out, (p, t), lambda g: loss_hreg_backward(g, diff, n), "loss_hreg")
    return _term("hreg", tensor)


def loss_pwc_backward(g, picked, live, index, shape, count):
    grad = np.zeros(shape, dtype=picked.dtype)
    vals = -g * live / (np.clip(picked, EPS, 1.0) * count)
    np.put_along_axis(grad, index, vals[..., None], axis=-1)
    return (grad,)


def loss_pwc(predicted, labels) -> LossValue:
    """Cross-entropy: mean over all pixels of -log p(true class).

    ``predicted`` is (h, w, K) or (batch, h, w, K) per-pixel class
    probabilities; ``labels`` the matching integer class map(s).
    """
    p = _batched(predicted.data if hasattr(predicted, "semantics") else predicted, 4)
    lab = np.asarray(labels.labels if hasattr(labels, "labels") else labels)
    if lab.ndim == 2:
        lab = lab[None]
    if lab.shape != p.shape[:-1]:
        raise ValueError(f"loss_pwc: label shape {lab.shape} does not match {p.shape[:-1]}")
    index = lab[..., None].astype(np.int64)
    picked = np.take_along_axis(p.data, index, axis=-1)[..., 0]
    live = (picked >= EPS) & (picked <= 1.0)
    count = picked.size
    out = np.asarray(-np.log(np.clip(picked, EPS, 1.0)).sum() / count, dtype=p.dtype)
    tensor = Tensor.from_op(out, (p,), lambda g: loss_pwc_backward(g, picked, live, index, p.shape, count),
                            "loss_pwc")
    return _term("pwc", tensor)


def loss_hybrid(pwc_term: LossValue, reg_term: LossValue, alpha: float = 1.0, beta: float = 0.25) -> LossValue:
    """alpha * pwc + beta * reg."""
    if alpha < 0 or beta < 0:
        raise ValueError("loss weights must be non-negative")
    tensor = ops.add(ops.mul(pwc_term.tensor, alpha), ops.mul(reg_term.tensor, beta))
    return LossValue(tensor, {"pwc": (pwc_term.scalar, alpha), "reg": (reg_term.scalar, beta),
                              "hybrid": (float(tensor.data), 1.0)})


def _log_clamped(x: Tensor) -> Tensor:
    return ops.log(x, eps=EPS)


def loss_face(disc_scores) -> LossValue:
    """-mean(log D(S)) over the batch."""
    s = as_tensor(disc_scores)
    tensor = ops.mul(ops.mean(_log_clamped(s)), -1.0)
    return _term("face", tensor)


def loss_disc(real_scores, fake_scores) -> LossValue:
    """-(mean log D(real) + mean log(1 - D(fake)))."""
    r = as_tensor(real_scores)
    f = as_tensor(fake_scores)
    real_part = ops.mean(_log_clamped(r))
    fake_part = ops.mean(_log_clamped(ops.sub(1.0, f)))
    tensor = ops.mul(ops.add(real_part, fake_part), -1.0)
    return LossValue(tensor, {"disc": (float(tensor.data), 1.0)})


def loss_total(hybrid: LossValue, face: LossValue, face_weight: float = 1.0) -> LossValue:
    """hybrid + face_weight * face; the breakdown of both terms is kept."""
    tensor = ops.add(hybrid.tensor, ops.mul(face.tensor, face_weight))
    breakdown = dict(hybrid.breakdown)
    breakdown["face"] = (face.scalar, face_weight)
    breakdown["total"] = (float(tensor.data), 1.0)
    return LossValue(tensor, breakdown)
