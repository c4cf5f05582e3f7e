"""Landmark <-> heatmap encodings and coordinate decoders.

Maps are indexed ``[row, col]``; a landmark at (x, y) sits at column x, row y,
and an integer pixel index is its own coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor, as_tensor
from .geometry import LandmarkScheme, LandmarkSet

DISTRIBUTION = "distribution"
HEATMAP_REGRESSION = "heatmap_regression"
PWC_PROBABILITY = "pwc_probability"
SEMANTICS = (DISTRIBUTION, HEATMAP_REGRESSION, PWC_PROBABILITY)


class OffMapError(ValueError):
    pass


@dataclass
class HeatmapStack:
    data: np.ndarray  # (height, width, channels)
    semantics: str

    def __post_init__(self):
        if self.semantics not in SEMANTICS:
            raise ValueError(f"unknown heatmap semantics {self.semantics!r}")
        if self.data.ndim != 3:
            raise ValueError("heatmap data must be (height, width, channels)")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def landmark_channels(self) -> int:
        c = self.data.shape[-1]
        return c if self.semantics == DISTRIBUTION else c - 1

    def check(self, tol: float = 1e-6) -> None:
        """Raise if the normalization invariant of the semantics does not hold."""
        d = self.data
        if self.semantics == DISTRIBUTION:
            if d.min() < 0 or not np.allclose(d.sum(axis=(0, 1)), 1.0, atol=tol, rtol=0):
                raise ValueError("distribution channels must be non-negative and sum to 1")
        elif self.semantics == PWC_PROBABILITY:
            if d.min() < 0 or not np.allclose(d.sum(axis=-1), 1.0, atol=tol, rtol=0):
                raise ValueError("pwc per-pixel vectors must be non-negative and sum to 1")


@dataclass
class PwcLabelMap:
    labels: np.ndarray  # (height, width) ints; num_landmarks is background
    num_landmarks: int
    off_map: tuple[int, ...] = field(default=())

    @property
    def background(self) -> int:
        return self.num_landmarks


def _points(landmarks) -> np.ndarray:
    if isinstance(landmarks, LandmarkSet):
        return landmarks.points
    return np.asarray(landmarks, dtype=np.float64).reshape(-1, 2)


def _hw(map_size) -> tuple[int, int]:
    """(rows, cols) from a square side or an (h, w) pair."""
    if np.ndim(map_size) == 0:
        return int(map_size), int(map_size)
    h, w = map_size
    return int(h), int(w)


def _gaussians(points: np.ndarray, map_size, sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h, w = _hw(map_size)
    cols = np.arange(w, dtype=np.float64)
    rows = np.arange(h, dtype=np.float64)
    gx = np.exp(-((cols[None, :] - points[:, :1]) ** 2) / (2 * sigma * sigma))  # (L, w)
    gy = np.exp(-((rows[None, :] - points[:, 1:]) ** 2) / (2 * sigma * sigma))  # (L, h)
    return np.einsum("lh,lw->hwl", gy, gx)


def encode_gaussian(landmarks, map_size, sigma: float = 3.0) -> HeatmapStack:
    """Per-landmark isotropic Gaussian, cut to the map and renormalized to sum 1."""
    pts = _points(landmarks)
    g = _gaussians(pts, map_size, sigma)
    mass = g.sum(axis=(0, 1))
    dead = np.flatnonzero(mass == 0)
    if dead.size:
        raise OffMapError(f"landmarks {dead.tolist()} are too far outside the map to encode")
    return HeatmapStack(g / mass, DISTRIBUTION)


def encode_hreg(landmarks, map_size, sigma: float = 3.0) -> HeatmapStack:
    """Peak-1 Gaussians plus a trailing background channel ``1 - max(landmark channels)``."""
    pts = _points(landmarks)
    g = _gaussians(pts, map_size, sigma)
    dead = np.flatnonzero(g.max(axis=(0, 1)) == 0)
    if dead.size:
        raise OffMapError(f"landmarks {dead.tolist()} are too far outside the map to encode")
    bg = np.clip(1.0 - g.max(axis=-1, keepdims=True), 0.0, 1.0)
    return HeatmapStack(np.concatenate([g, bg], axis=-1), HEATMAP_REGRESSION)


def round_half_up(v) -> np.ndarray:
    return np.floor(np.asarray(v, dtype=np.float64) + 0.5).astype(np.int64)


def encode_pwc(landmarks, map_size, radius: int = 0) -> PwcLabelMap:
    """Label pixels within Chebyshev ``radius`` of each rounded landmark with its class.

    Overlaps go to the lower landmark index. Landmarks that round outside the
    map label nothing and are listed in ``off_map``.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    pts = _points(landmarks)
    h, w = _hw(map_size)
    n = len(pts)
    labels = np.full((h, w), n, dtype=np.int64)
    off = []
    rounded = round_half_up(pts)
    for l in range(n - 1, -1, -1):
        x, y = rounded[l]
        if not (0 <= x < w and 0 <= y < h):
            off.append(l)
            continue
        labels[max(0, y - radius):y + radius + 1, max(0, x - radius):x + radius + 1] = l
    return PwcLabelMap(labels, n, tuple(sorted(off)))


def onehot(labels: PwcLabelMap | np.ndarray, classes: int | None = None) -> HeatmapStack:
    lab = labels.labels if isinstance(labels, PwcLabelMap) else np.asarray(labels)
    if classes is None:
        classes = labels.num_landmarks + 1
    if lab.size and lab.max() >= classes:
        raise ValueError(f"label {lab.max()} needs more than {classes} classes")
    out = np.zeros(lab.shape + (classes,), dtype=np.float64)
    np.put_along_axis(out, lab[..., None], 1.0, axis=-1)
    return HeatmapStack(out, PWC_PROBABILITY)


def _as_landmarks(points: np.ndarray, scheme: LandmarkScheme | None):
    return points if scheme is None else LandmarkSet(points, scheme)


def argmax_points(data: np.ndarray, channels: int) -> np.ndarray:
    """(..., h, w, c) -> (..., channels, 2) argmax (x, y); ties go to the lowest row-major index."""
    h, w = data.shape[-3], data.shape[-2]
    flat = data[..., :channels].reshape(data.shape[:-3] + (h * w, channels))
    idx = flat.argmax(axis=-2)
    return np.stack([idx % w, idx // w], axis=-1).astype(np.float64)


def decode_argmax(maps: HeatmapStack, scheme: LandmarkScheme | None = None):
    """Position of the maximum of every landmark channel (background ignored).

    Returns a LandmarkSet when ``scheme`` is given, else an (L, 2) array.
    """
    return _as_landmarks(argmax_points(maps.data, maps.landmark_channels), scheme)


def softargmax(maps: Tensor, temperature: float = 1.0) -> Tensor:
    """Differentiable (batch, h, w, L) -> (batch, L, 2) expected (x, y) under a spatial softmax."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    maps = as_tensor(maps)
    _, h, w, _ = maps.shape
    p = ops.spatial_softmax(ops.mul(maps, 1.0 / temperature))
    xs = np.arange(w, dtype=maps.dtype).reshape(1, 1, w, 1)
    ys = np.arange(h, dtype=maps.dtype).reshape(1, h, 1, 1)
    x = ops.sum(ops.mul(p, xs), axis=(1, 2))
    y = ops.sum(ops.mul(p, ys), axis=(1, 2))
    n, l = x.shape
    return ops.concat([ops.reshape(x, (n, l, 1)), ops.reshape(y, (n, l, 1))], axis=-1)


def decode_softargmax(maps: HeatmapStack, temperature: float = 1.0, scheme: LandmarkScheme | None = None):
    """Probability-weighted mean coordinate of each landmark channel after a spatial softmax."""
    c = maps.landmark_channels
    pts = softargmax(Tensor(maps.data[None, :, :, :c]), temperature).data[0]
    return _as_landmarks(pts, scheme)


def dump_pgm(maps: HeatmapStack, out_dir, sample: str) -> list[Path]:
    """Write each channel as an 8-bit binary PGM scaled by the channel maximum."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    h, w, c = maps.data.shape
    paths = []
    for ch in range(c):
        plane = maps.data[:, :, ch]
        peak = plane.max()
        scaled = np.zeros_like(plane) if peak <= 0 else plane / peak
        pix = np.clip(np.rint(scaled * 255), 0, 255).astype(np.uint8)
        path = out_dir / f"{sample}_{ch}.pgm"
        path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())
        paths.append(path)
    return paths
