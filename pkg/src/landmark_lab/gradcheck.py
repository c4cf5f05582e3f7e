"""Finite-difference verification of every differentiable component.

Each check builds a scalar ``sum(R * f(inputs))`` with a fixed random ``R``,
back-propagates it, and compares against central differences at float64.
The error measure is ``|a - n| / max(|a|, |n|)`` over whole gradient arrays
(Euclidean norms), so a single tiny entry cannot dominate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses
from .autodiff import ops
from .autodiff.tensor import Tensor
from .heatmap_codec import softargmax
from .models import ModelSpec, build_detector, build_discriminator

TOLERANCE = 1e-4
STEP = 1e-5
INSTANCES = 5
SCOPES = ("primitive", "loss", "model")


@dataclass
class CheckResult:
    component: str
    scope: str
    max_rel_error: float
    instances: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < TOLERANCE

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.scope:9s} {self.component:22s} max_rel_error={self.max_rel_error:.3e} {status}"


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def _scalar(out: Tensor, proj: np.ndarray) -> float:
    return float(np.sum(out.data * proj))


def check_function(fn: Callable[..., Tensor], inputs: list[np.ndarray], wrt: list[int] | None = None,
                   rng: np.random.Generator | None = None, step: float = STEP) -> float:
    """Max relative error between backprop and central differences of ``fn`` over ``wrt`` inputs."""
    rng = rng or np.random.default_rng(0)
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    wrt = list(range(len(inputs))) if wrt is None else wrt
    probe = fn(*[Tensor(x) for x in inputs])
    proj = rng.standard_normal(probe.shape) if probe.data.ndim else np.array(1.0)
    tensors = [Tensor(x.copy(), requires_grad=i in wrt) for i, x in enumerate(inputs)]
    fn(*tensors).backward(proj)
    worst = 0.0
    for i in wrt:
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(inputs[i])
        numeric = np.zeros_like(inputs[i])
        x = inputs[i]
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + step
            up = _scalar(fn(*[Tensor(v) for v in inputs]), proj)
            x[idx] = orig - step
            down = _scalar(fn(*[Tensor(v) for v in inputs]), proj)
            x[idx] = orig
            numeric[idx] = (up - down) / (2 * step)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def _directional_error(params, grads, forward, proj, vs, step) -> float:
    analytic = sum(float(np.sum(g * v)) for g, v in zip(grads, vs))
    base = [p.data.copy() for p in params]
    try:
        for p, b, v in zip(params, base, vs):
            p.data = b + step * v
        up = _scalar(forward(), proj)
        for p, b, v in zip(params, base, vs):
            p.data = b - step * v
        down = _scalar(forward(), proj)
    finally:
        for p, b in zip(params, base):
            p.data = b
    return rel_error(np.array([analytic]), np.array([(up - down) / (2 * step)]))


def check_network(net, forward: Callable, rng: np.random.Generator, directions: int = 3,
                  steps: tuple[float, ...] = (STEP, STEP / 10)) -> float:
    """Directional-derivative check over all parameters of ``net`` jointly.

    A whole network has thousands of ReLU and max-pool kinks, and a difference
    step can straddle one. Such a crossing vanishes at a smaller step while a
    wrong gradient does not, so each direction keeps its best error over
    ``steps``.
    """
    params = net.parameters()
    proj = rng.standard_normal(forward().shape)
    net.zero_grad()
    forward().backward(proj)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    worst = 0.0
    for _ in range(directions):
        vs = [rng.standard_normal(p.data.shape) for p in params]
        # unit direction: a fixed step then moves every activation by a small amount
        norm = np.sqrt(sum(float(np.sum(v * v)) for v in vs))
        vs = [v / norm for v in vs]
        worst = max(worst, min(_directional_error(params, grads, forward, proj, vs, h) for h in steps))
    return worst


# --------------------------------------------------------------------------
# instances


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape):
    return rng.permutation(np.prod(shape)).reshape(shape) / np.prod(shape) + rng.uniform(0, 1e-3, size=shape)


def _primitives(rng) -> dict[str, Callable[[int], float]]:
    def conv(i):
        stride, pad = (1, 1) if i % 2 == 0 else (2, 0 if i % 4 == 1 else 1)
        x = rng.standard_normal((2, 4, 4, 2))
        k = rng.standard_normal((3, 3, 2, 3))
        b = rng.standard_normal(3)
        return check_function(lambda a, w, c: ops.conv2d(a, w, c, stride, pad), [x, k, b], rng=rng)

    def deconv(i):
        kern, stride, pad = [(4, 2, 1), (3, 1, 1), (2, 2, 0), (3, 2, 1), (1, 1, 0)][i % 5]
        x = rng.standard_normal((2, 3, 3, 2))
        k = rng.standard_normal((kern, kern, 3, 2))
        b = rng.standard_normal(3)
        return check_function(lambda a, w, c: ops.deconv2d(a, w, c, stride, pad), [x, k, b], rng=rng)

    def maxpool(i):
        shape = (2, 4, 4, 2) if i % 2 == 0 else (2, 3, 5, 2)
        return check_function(ops.maxpool2, [_distinct(rng, shape)], rng=rng)

    def batchnorm(i):
        x = rng.standard_normal((3, 3, 2, 2)) * rng.uniform(0.5, 2.0) + rng.standard_normal(2)
        s = rng.uniform(0.5, 1.5, size=2)
        t = rng.standard_normal(2)

        def fn(a, sc, sh):
            return ops.batchnorm(a, sc, sh, np.zeros(2), np.ones(2), training=True)
        return check_function(fn, [x, s, t], rng=rng)

    def fully_connected(i):
        return check_function(ops.fully_connected, [rng.standard_normal((3, 4)), rng.standard_normal((4, 2)),
                                                    rng.standard_normal(2)], rng=rng)

    def spatial(i):
        return check_function(ops.spatial_softmax, [rng.standard_normal((2, 3, 4, 2))], rng=rng)

    def channel(i):
        return check_function(ops.channel_softmax, [rng.standard_normal((2, 3, 4, 3))], rng=rng)

    def soft_argmax(i):
        temp = [0.5, 1.0, 2.0, 0.25, 1.5][i % 5]
        return check_function(lambda m: softargmax(m, temp), [rng.standard_normal((2, 4, 3, 2))], rng=rng)

    def relu(i):
        return check_function(ops.relu, [_away_from_zero(rng, (2, 3, 3))], rng=rng)

    def sigmoid(i):
        return check_function(ops.sigmoid, [rng.standard_normal((2, 5)) * 3], rng=rng)

    return {"conv2d": conv, "deconv2d": deconv, "maxpool2": maxpool, "batchnorm": batchnorm,
            "fully_connected": fully_connected, "spatial_softmax": spatial, "channel_softmax": channel,
            "decode_softargmax": soft_argmax, "relu": relu, "sigmoid": sigmoid}


def _hybrid_fn(labels, landmarks, alpha, beta):
    def fn(logits, truth):
        probs = ops.channel_softmax(logits)
        logp = ops.log(ops.index(probs, (Ellipsis, slice(0, landmarks))), eps=losses.EPS)
        coords = softargmax(logp, 1.0)
        return losses.loss_hybrid(losses.loss_pwc(probs, labels), losses.loss_reg(coords, truth), alpha, beta).tensor
    return fn


def _losses(rng) -> dict[str, Callable[[int], float]]:
    def reg(i):
        return check_function(lambda d, t: losses.loss_reg(d, t).tensor,
                              [rng.standard_normal((2, 5, 2)), rng.standard_normal((2, 5, 2))], rng=rng)

    def dist(i):
        direction = "forward" if i % 2 == 0 else "reverse"
        p = rng.uniform(0.05, 0.9, size=(2, 3, 3, 2))
        t = rng.uniform(0.05, 0.9, size=(2, 3, 3, 2))
        return check_function(lambda a, b: losses.loss_dist(a, b, direction).tensor, [p, t], rng=rng)

    def hreg(i):
        return check_function(lambda a, b: losses.loss_hreg(a, b).tensor,
                              [rng.standard_normal((2, 3, 3, 3)), rng.standard_normal((2, 3, 3, 3))], rng=rng)

    def pwc(i):
        p = rng.uniform(0.05, 0.95, size=(2, 3, 4, 3))
        labels = rng.integers(0, 3, size=(2, 3, 4))
        return check_function(lambda a: losses.loss_pwc(a, labels).tensor, [p], rng=rng)

    def hybrid(i):
        landmarks = 2
        labels = rng.integers(0, landmarks + 1, size=(2, 4, 4))
        fn = _hybrid_fn(labels, landmarks, rng.uniform(0.2, 1.5), rng.uniform(0.1, 1.0))
        return check_function(fn, [rng.standard_normal((2, 4, 4, landmarks + 1)), rng.uniform(0, 3, (2, landmarks, 2))],
                              rng=rng)

    def face(i):
        return check_function(lambda s: losses.loss_face(s).tensor, [rng.uniform(0.05, 0.95, size=6)], rng=rng)

    def disc(i):
        return check_function(lambda r, f: losses.loss_disc(r, f).tensor,
                              [rng.uniform(0.05, 0.95, size=4), rng.uniform(0.05, 0.95, size=4)], rng=rng)

    def total(i):
        landmarks = 2
        labels = rng.integers(0, landmarks + 1, size=(2, 4, 4))
        hyb = _hybrid_fn(labels, landmarks, 1.0, 0.25)
        weight = rng.uniform(0.5, 2.0)

        def fn(logits, truth, scores):
            h = losses.LossValue(hyb(logits, truth))
            return losses.loss_total(h, losses.loss_face(scores), weight).tensor
        return check_function(fn, [rng.standard_normal((2, 4, 4, landmarks + 1)), rng.uniform(0, 3, (2, landmarks, 2)),
                                   rng.uniform(0.05, 0.95, size=2)], rng=rng)

    return {"loss_reg": reg, "loss_dist": dist, "loss_hreg": hreg, "loss_pwc": pwc, "loss_hybrid": hybrid,
            "loss_face": face, "loss_disc": disc, "loss_total": total}


TINY = dict(num_landmarks=3, input_size=32, map_size=16, stage_blocks=(1, 1, 1, 1, 1), scale=1 / 32)


def _models(rng) -> dict[str, Callable[[int], float]]:
    def head(kind):
        def run(i):
            spec = ModelSpec(head=kind, **TINY)
            net = build_detector(spec, seed=int(rng.integers(1 << 30)), dtype=np.float64)
            x = Tensor(rng.uniform(0, 1, size=(3, 32, 32, 3)))
            return check_network(net, lambda: net(x), rng)
        return run

    def discriminator(i):
        net = build_discriminator(3, seed=int(rng.integers(1 << 30)), widths=(8, 8), dtype=np.float64)
        x = Tensor(rng.uniform(0, 1, size=(4, 3, 2)))
        return check_network(net, lambda: net(x), rng)

    out = {f"model_{k}": head(k) for k in ("direct", "cascaded", "distribution", "heatmap_regression", "pwc")}
    out["discriminator"] = discriminator
    return out


def components(scope: str, seed: int = 0) -> dict[str, Callable[[int], float]]:
    rng = np.random.default_rng(seed)
    if scope == "primitive":
        return _primitives(rng)
    if scope == "loss":
        return _losses(rng)
    if scope == "model":
        return _models(rng)
    raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES}")


def run_checks(scopes=SCOPES, instances: int = INSTANCES, seed: int = 0, only: set[str] | None = None,
               model_instances: int = 2) -> list[CheckResult]:
    results = []
    for scope in scopes:
        count = model_instances if scope == "model" else instances
        for name, check in components(scope, seed).items():
            if only and name not in only:
                continue
            errs = []
            for i in range(count):
                try:
                    errs.append(check(i))
                except FloatingPointError:
                    errs.append(float("inf"))
            worst = max(errs) if errs else 0.0
            results.append(CheckResult(name, scope, float(worst) if np.isfinite(worst) else float("inf"), count))
    return results
