"""Training loops for every head, the alternating adversarial schedule,
early stopping and checkpointing."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import losses
from .autodiff import ops
from .autodiff.checkpoint import load_checkpoint, save_checkpoint
from .autodiff.layers import Module
from .autodiff.optim import Adam
from .autodiff.tensor import Tensor, no_grad
from .data import (
    REGRESSION_HEADS,
    Example,
    FaceSample,
    augmented_example,
    make_example,
    mean_shape,
    sample_seed,
)
from .geometry import LandmarkSet, nmse
from .heatmap_codec import argmax_points, softargmax
from .models import Discriminator, ModelSpec, build_detector, build_discriminator, desk_spec

# loss kinds each head can be trained with
HEAD_LOSSES = {
    "direct": ("reg",),
    "cascaded": ("reg",),
    "distribution": ("dist",),
    "heatmap_regression": ("hreg",),
    "pwc": ("pwc", "hybrid", "hybrid+disc", "pwc+disc"),
}
DEFAULT_LOSS = {head: kinds[0] for head, kinds in HEAD_LOSSES.items()}
ADVERSARIAL = ("hybrid+disc", "pwc+disc")


class TrainConfigError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    def __init__(self, message: str, snapshot: Path | None = None):
        super().__init__(message if snapshot is None else f"{message} (snapshot: {snapshot})")
        self.snapshot = snapshot


@dataclass(frozen=True)
class TrainConfig:
    head: str = "pwc"
    loss: str = "pwc"
    alpha: float = 1.0
    beta: float = 0.25
    face_weight: float = 1.0
    temperature: float = 1.0
    kl_direction: str = "forward"
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    val_interval: int = 100
    patience: int = 10
    max_steps: int = 3000
    seed: int = 0
    scale: float = 0.125
    input_size: int = 64
    map_size: int = 32
    sigma: float = 3.0
    radius: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.head not in HEAD_LOSSES:
            raise TrainConfigError(f"unknown head {self.head!r}")
        if self.loss not in HEAD_LOSSES[self.head]:
            raise TrainConfigError(f"loss {self.loss!r} does not fit head {self.head!r}; "
                                   f"choose from {HEAD_LOSSES[self.head]}")
        if self.val_interval < 1:
            raise TrainConfigError("val_interval must be >= 1")
        if self.patience < 1:
            raise TrainConfigError("patience must be >= 1")
        if self.alpha < 0 or self.beta < 0 or self.face_weight < 0:
            raise TrainConfigError("loss weights must be non-negative")
        if self.batch_size < 2:
            raise TrainConfigError("batch_size must be >= 2 (batch normalization needs it)")
        if self.max_steps < 0:
            raise TrainConfigError("max_steps must be >= 0")
        if self.lr < 0:
            raise TrainConfigError("lr must be >= 0")
        if self.kl_direction not in ("forward", "reverse"):
            raise TrainConfigError("kl_direction must be 'forward' or 'reverse'")

    @property
    def adversarial(self) -> bool:
        return self.loss in ADVERSARIAL

    @property
    def target_kind(self) -> str:
        return self.head

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


# --------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    images: np.ndarray  # (n, s, s, 3)
    points: np.ndarray  # (n, L, 2) crop-frame coordinates
    targets: np.ndarray  # (n, L, 2) coordinates, (n, m, m, C) maps or (n, m, m) labels
    ids: list[str]

    def __len__(self) -> int:
        return len(self.images)


def collate(examples: list[Example]) -> Batch:
    first = examples[0].target
    if hasattr(first, "labels"):
        targets = np.stack([e.target.labels for e in examples])
    elif hasattr(first, "semantics"):
        targets = np.stack([e.target.data for e in examples])
    else:
        targets = np.stack([e.target for e in examples])
    return Batch(np.stack([e.image for e in examples]).astype(np.float32),
                 np.stack([e.points for e in examples]), targets, [e.sample_id for e in examples])


def examples_for(samples: list[FaceSample], config: TrainConfig) -> list[Example]:
    return [make_example(s, config.map_size, config.target_kind, config.input_size, config.sigma, config.radius)
            for s in samples]


class BatchStream:
    """Deterministic minibatches: a seeded permutation per epoch and, when enabled,
    an augmentation stream per (epoch, sample) split off the master seed."""

    def __init__(self, samples: list[FaceSample], config: TrainConfig):
        if len(samples) < config.batch_size:
            raise TrainConfigError(f"need at least batch_size={config.batch_size} training samples")
        self.samples = samples
        self.config = config
        self.plain = None if config.augment else examples_for(samples, config)
        self.epoch = 0
        self.order: list[int] = []

    def _refill(self) -> None:
        rng = np.random.default_rng(sample_seed(self.config.seed, 0xE, self.epoch))
        self.order = list(rng.permutation(len(self.samples)))
        self.epoch += 1

    def next(self) -> Batch:
        c = self.config
        picked = []
        while len(picked) < c.batch_size:
            if not self.order:
                self._refill()
            picked.append((self.epoch, self.order.pop(0)))
        if self.plain is not None:
            return collate([self.plain[i] for _, i in picked])
        return collate([augmented_example(self.samples[i], sample_seed(c.seed, 0xA, e, i), c.map_size,
                                          c.target_kind, c.input_size, c.sigma, c.radius) for e, i in picked])


# --------------------------------------------------------------------------
# forward passes and losses


def map_coordinates(probs: Tensor, landmarks: int, temperature: float) -> Tensor:
    """Differentiable (n, L, 2) map-frame coordinates from pwc probabilities.

    The soft-argmax runs on the log-probabilities of each landmark class, so at
    temperature 1 each channel's spatial weights are that class's own
    probabilities, renormalized over the map.
    """
    logp = ops.log(ops.index(probs, (Ellipsis, slice(0, landmarks))), eps=losses.EPS)
    return softargmax(logp, temperature)


def detections(net: Module, out: Tensor, config: TrainConfig) -> Tensor:
    """Differentiable crop-frame coordinates (n, L, 2) in input pixels."""
    if config.head in REGRESSION_HEADS:
        return out
    landmarks = net.spec.num_landmarks
    coords = map_coordinates(out, landmarks, config.temperature)
    return ops.mul(coords, config.input_size / config.map_size)


def head_loss(net: Module, out: Tensor, batch: Batch, config: TrainConfig) -> tuple[losses.LossValue, Tensor | None]:
    """Detector loss without the adversarial face term, plus coordinates when the loss needs them."""
    if config.head in REGRESSION_HEADS:
        return losses.loss_reg(out, batch.targets), out
    if config.loss == "dist":
        return losses.loss_dist(out, batch.targets, config.kl_direction), None
    if config.loss == "hreg":
        return losses.loss_hreg(out, batch.targets), None
    pwc = losses.loss_pwc(out, batch.targets)
    if config.loss in ("pwc", "pwc+disc"):
        coords = detections(net, out, config) if config.adversarial else None
        return pwc, coords
    coords = detections(net, out, config)
    reg = losses.loss_reg(coords, batch.points)
    return losses.loss_hybrid(pwc, reg, config.alpha, config.beta), coords


def normalized(coords: Tensor, input_size: int) -> Tensor:
    return ops.mul(coords, 1.0 / input_size)


# --------------------------------------------------------------------------
# state and steps


@dataclass
class TrainState:
    detector: Module
    optimizer: Adam
    discriminator: Discriminator | None = None
    disc_optimizer: Adam | None = None
    step: int = 0
    best_loss: float = math.inf
    best_step: int = -1
    streak: int = 0
    history: list[float] = field(default_factory=list)
    best_params: dict[str, np.ndarray] | None = None
    # (optimizer name, ids of the tensors it updated) for every call in the latest step
    last_updates: list[tuple[str, frozenset[int]]] = field(default_factory=list)
    last_loss: losses.LossValue | None = None


def new_state(config: TrainConfig, spec: ModelSpec, initial_shape=None) -> TrainState:
    detector = build_detector(spec, initial_shape=initial_shape, seed=config.seed)
    opt = Adam(detector.parameters(), config.lr, config.beta1, config.beta2, config.adam_eps)
    disc = disc_opt = None
    if config.adversarial:
        disc = build_discriminator(spec.num_landmarks, seed=config.seed + 1)
        disc_opt = Adam(disc.parameters(), config.lr, config.beta1, config.beta2, config.adam_eps)
    return TrainState(detector, opt, disc, disc_opt)


def _update(state: TrainState, name: str, opt: Adam) -> None:
    opt.step()
    state.last_updates.append((name, opt.last_update))


def _check_finite(loss: losses.LossValue, state: TrainState, snapshot_dir: Path | None) -> None:
    if math.isfinite(loss.scalar):
        return
    path = None
    if snapshot_dir is not None:
        snapshot_dir.mkdir(parents=True, exist_ok=True)
        path = snapshot_dir / f"nonfinite_step{state.step}.ckpt"
        save_checkpoint(path, state.detector.state_dict(),
                        {"step": state.step, "breakdown": {k: v for k, (v, _) in loss.breakdown.items()}})
    raise NonFiniteLossError(f"non-finite loss at step {state.step}: {loss.breakdown}", path)


def _detector_update(state: TrainState, batch: Batch, config: TrainConfig, snapshot_dir) -> losses.LossValue:
    net = state.detector
    net.train()
    x = Tensor(batch.images)
    out = net(x)
    loss, coords = head_loss(net, out, batch, config)
    if config.adversarial:
        disc = state.discriminator
        disc.eval()  # running statistics; the face term must not move them
        face = losses.loss_face(disc(normalized(coords, config.input_size)))
        loss = losses.loss_total(loss, face, config.face_weight)
    _check_finite(loss, state, snapshot_dir)
    state.optimizer.zero_grad()
    loss.backward()
    _update(state, "detector", state.optimizer)
    if config.adversarial:
        state.disc_optimizer.zero_grad()
    return loss


def _discriminator_update(state: TrainState, batch: Batch, config: TrainConfig, snapshot_dir) -> losses.LossValue:
    net, disc = state.detector, state.discriminator
    with no_grad():
        net.train()
        out = net(Tensor(batch.images))
        _, coords = head_loss(net, out, batch, config)
    fake = coords.data / config.input_size
    real = batch.points.astype(fake.dtype) / config.input_size
    disc.train()
    # real and fake go through one forward so batch statistics see both, 1:1
    scores = disc(Tensor(np.concatenate([real, fake], axis=0)))
    n = len(real)
    loss = losses.loss_disc(ops.index(scores, slice(0, n)), ops.index(scores, slice(n, 2 * n)))
    _check_finite(loss, state, snapshot_dir)
    state.disc_optimizer.zero_grad()
    loss.backward()
    _update(state, "discriminator", state.disc_optimizer)
    return loss


def train_step(state: TrainState, batch: Batch, config: TrainConfig, snapshot_dir=None) -> TrainState:
    """One training step.

    Adversarial losses: one discriminator update against the current
    detections, then two detector updates on the same batch.
    """
    state.last_updates = []
    snapshot_dir = Path(snapshot_dir) if snapshot_dir is not None else None
    if config.adversarial:
        disc_loss = _discriminator_update(state, batch, config, snapshot_dir)
        _detector_update(state, batch, config, snapshot_dir)
        loss = _detector_update(state, batch, config, snapshot_dir)
        loss.breakdown.update(disc_loss.breakdown)
    else:
        loss = _detector_update(state, batch, config, snapshot_dir)
    state.last_loss = loss
    state.step += 1
    return state


# --------------------------------------------------------------------------
# validation and stopping


def validation_loss(net: Module, examples: list[Example], config: TrainConfig, batch_size: int = 32) -> float:
    """Mean per-sample detector loss in eval mode (the face term is left out)."""
    if not examples:
        raise ValueError("validation set is empty")
    was = net.training
    net.eval()
    total = 0.0
    try:
        with no_grad():
            for i in range(0, len(examples), batch_size):
                batch = collate(examples[i:i + batch_size])
                loss, _ = head_loss(net, net(Tensor(batch.images)), batch, config)
                # every loss is a batch mean, so weighting by batch size gives the per-sample mean
                total += loss.scalar * len(batch)
    finally:
        net.train(was)
    return total / len(examples)


def validate(state: TrainState, val_set: list[Example], config: TrainConfig) -> float:
    return validation_loss(state.detector, val_set, config)


def early_stop(history: list[float], patience: int = 10) -> bool:
    """True iff each of the last ``patience`` values failed to beat the best value before it."""
    if patience < 1:
        raise ValueError("patience must be >= 1")
    if len(history) <= patience:
        return False
    best = min(history[:-patience])
    for v in history[-patience:]:
        if v < best:
            return False
    return True


def _record_validation(state: TrainState, value: float) -> None:
    state.history.append(value)
    if value < state.best_loss:
        state.best_loss = value
        state.best_step = state.step
        state.streak = 0
        state.best_params = {k: np.array(v, copy=True) for k, v in state.detector.state_dict().items()}
    else:
        state.streak += 1


# --------------------------------------------------------------------------
# inference and metrics


def predict_coordinates(net: Module, images: np.ndarray, config: TrainConfig, batch_size: int = 32,
                        decode: str = "argmax") -> np.ndarray:
    """Crop-frame (n, L, 2) coordinates in input pixels; heatmaps are decoded with argmax."""
    was = net.training
    net.eval()
    outs = []
    try:
        with no_grad():
            for i in range(0, len(images), batch_size):
                out = net(Tensor(images[i:i + batch_size].astype(np.float32)))
                if config.head in REGRESSION_HEADS:
                    outs.append(out.data.astype(np.float64))
                elif decode == "argmax":
                    pts = argmax_points(out.data, net.spec.num_landmarks)
                    outs.append(pts * (config.input_size / config.map_size))
                else:
                    outs.append(detections(net, out, config).data.astype(np.float64))
    finally:
        net.train(was)
    return np.concatenate(outs, axis=0)


def original_frame(coords: np.ndarray, examples: list[Example]) -> np.ndarray:
    return np.stack([e.to_crop.inverse().apply(c) for c, e in zip(coords, examples)])


def evaluate_nmse(net: Module, samples: list[FaceSample], config: TrainConfig,
                  examples: list[Example] | None = None) -> list[tuple[str, float]]:
    """Per-sample NMSE in the original image frame."""
    examples = examples if examples is not None else examples_for(samples, config)
    coords = predict_coordinates(net, np.stack([e.image for e in examples]), config)
    orig = original_frame(coords, examples)
    return [(s.sample_id, nmse(LandmarkSet(p, s.landmarks.scheme), s.landmarks)) for p, s in zip(orig, samples)]


# --------------------------------------------------------------------------
# fit


@dataclass
class FitResult:
    state: TrainState
    report: dict
    log_lines: list[str]
    spec: ModelSpec

    @property
    def detector(self) -> Module:
        return self.state.detector


LOG_HEADER = "step,split,loss,breakdown"


def _log_row(step: int, split: str, loss: float, breakdown: dict) -> str:
    parts = [str(step), split, repr(float(loss))] + [f"{k}={v!r}" for k, (v, _) in breakdown.items()]
    return ",".join(parts)


def checkpoint_tensors(state: TrainState) -> dict[str, np.ndarray]:
    tensors = dict(state.detector.state_dict())
    for k, v in state.optimizer.state_dict().items():
        tensors[f"opt/detector/{k}"] = v
    if state.discriminator is not None:
        for k, v in state.discriminator.state_dict().items():
            tensors[f"disc/{k}"] = v
        for k, v in state.disc_optimizer.state_dict().items():
            tensors[f"opt/disc/{k}"] = v
    return tensors


def save_model(path, state: TrainState, config: TrainConfig, spec: ModelSpec, extra: dict | None = None) -> None:
    meta = {"config": config.to_dict(), "spec": spec.to_dict(), "step": state.step,
            "best_step": state.best_step, "scheme_landmarks": spec.num_landmarks}
    meta.update(extra or {})
    save_checkpoint(path, checkpoint_tensors(state), meta)


def load_model(path) -> tuple[Module, TrainConfig, ModelSpec, dict]:
    """Rebuild the detector stored by :func:`save_model`."""
    tensors, meta = load_checkpoint(path)
    config = TrainConfig.from_dict(meta["config"])
    spec = ModelSpec.from_dict(meta["spec"])
    net = build_detector(spec, seed=config.seed)
    net.load_state_dict({k: v for k, v in tensors.items() if not k.startswith(("opt/", "disc/"))})
    return net, config, spec, meta


def fit(config: TrainConfig, train: list[FaceSample], val: list[FaceSample], spec: ModelSpec | None = None,
        out_dir=None, log_every: int = 1) -> FitResult:
    """Train to early stop or ``max_steps``; the returned detector holds the best-validation parameters.

    With ``out_dir`` the log (``train_log.csv``), best checkpoint
    (``best.ckpt``) and report (``report.json``) are written there.
    """
    if not val:
        raise ValueError("fit needs a nonempty validation set")
    num_landmarks = train[0].landmarks.scheme.count
    if spec is None:
        spec = desk_spec(config.head, num_landmarks=num_landmarks, input_size=config.input_size, scale=config.scale)
    spec = spec.with_(head=config.head)
    if spec.num_landmarks != num_landmarks:
        raise TrainConfigError(f"model expects {spec.num_landmarks} landmarks, data has {num_landmarks}")
    if spec.input_size != config.input_size or spec.map_size != config.map_size and config.head not in REGRESSION_HEADS:
        raise TrainConfigError("model and training config disagree on input or map size")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    init = mean_shape(train, config.input_size) if config.head == "cascaded" else None
    state = new_state(config, spec, init)
    val_examples = examples_for(val, config)
    stream = BatchStream(train, config) if config.max_steps > 0 else None
    log = [LOG_HEADER]
    val_steps: list[int] = []
    stop_reason = "max_steps"
    while state.step < config.max_steps:
        train_step(state, stream.next(), config, snapshot_dir=out)
        loss = state.last_loss
        if state.step % log_every == 0:
            log.append(_log_row(state.step, "train", loss.scalar, loss.breakdown))
        if state.step % config.val_interval == 0 or state.step == config.max_steps:
            value = validate(state, val_examples, config)
            _record_validation(state, value)
            val_steps.append(state.step)
            log.append(_log_row(state.step, "val", value, {}))
            if early_stop(state.history, config.patience):
                stop_reason = "early_stop"
                break
    if state.best_params is not None:
        state.detector.load_state_dict(state.best_params)
    if config.max_steps == 0:
        stop_reason = "max_steps"
    report = {
        "best_step": state.best_step,
        "best_loss": state.best_loss if state.history else None,
        "stop_reason": stop_reason,
        "steps": state.step,
        "validations": len(state.history),
        "val_history": [[s, v] for s, v in zip(val_steps, state.history)],
    }
    if out is not None:
        (out / "train_log.csv").write_text("\n".join(log) + "\n")
        save_model(out / "best.ckpt", state, config, spec, {"scheme": train[0].landmarks.scheme.name})
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return FitResult(state, report, log, spec)
