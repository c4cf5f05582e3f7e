"""Landmark containers, the crop procedure and evaluation metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    pass


class DegenerateShapeError(GeometryError):
    pass


class OutOfFrameError(GeometryError):
    pass


class DegenerateIodError(GeometryError):
    pass


class SchemeMismatchError(GeometryError):
    pass


@dataclass(frozen=True)
class LandmarkScheme:
    name: str
    count: int
    outer_eye: tuple[int, int]
    eye_anchors: tuple[int, ...]

    def __post_init__(self):
        a, b = self.outer_eye
        if a == b:
            raise ValueError("outer-eye corner indices must be distinct")
        for i in (a, b, *self.eye_anchors):
            if not 0 <= i < self.count:
                raise ValueError(f"index {i} outside a {self.count}-point scheme")


# 300-W convention, zero-based: 36/45 outer eye corners, 36..47 the two eye contours
SCHEME_68 = LandmarkScheme("ibug68", 68, (36, 45), tuple(range(36, 48)))
# synthetic faces: 0-3 eye corners (outer, inner, inner, outer), 4 nose tip,
# 5-8 mouth (left, top, right, bottom), 9 chin
SCHEME_TOY10 = LandmarkScheme("toy10", 10, (0, 3), (0, 1, 2, 3))

SCHEMES = {s.name: s for s in (SCHEME_68, SCHEME_TOY10)}


def get_scheme(name: str) -> LandmarkScheme:
    try:
        return SCHEMES[name]
    except KeyError:
        raise KeyError(f"unknown landmark scheme {name!r}; known: {sorted(SCHEMES)}") from None


@dataclass(frozen=True)
class LandmarkSet:
    """Ordered (x, y) pixel coordinates; x is the column, y the row."""

    points: np.ndarray
    scheme: LandmarkScheme = SCHEME_68

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if len(pts) != self.scheme.count:
            raise GeometryError(f"{self.scheme.name} expects {self.scheme.count} points, got {len(pts)}")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("landmark coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    def with_points(self, points) -> "LandmarkSet":
        return LandmarkSet(points, self.scheme)

    def transformed(self, transform: "CoordTransform") -> "LandmarkSet":
        return self.with_points(transform.apply(self.points))

    def flat(self) -> np.ndarray:
        return self.points.reshape(-1).copy()


@dataclass(frozen=True)
class CropBox:
    center: tuple[float, float]
    side: float

    def __post_init__(self):
        if not self.side > 0:
            raise DegenerateShapeError(f"crop side must be positive, got {self.side}")

    @property
    def left(self) -> float:
        return self.center[0] - self.side / 2

    @property
    def top(self) -> float:
        return self.center[1] - self.side / 2


@dataclass(frozen=True)
class CoordTransform:
    """Affine map ``p' = A @ p + t`` on (x, y) points."""

    matrix: np.ndarray
    offset: np.ndarray

    @classmethod
    def identity(cls) -> "CoordTransform":
        return cls(np.eye(2), np.zeros(2))

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix.T + self.offset

    def inverse(self) -> "CoordTransform":
        inv = np.linalg.inv(self.matrix)
        return CoordTransform(inv, -inv @ self.offset)

    def then(self, other: "CoordTransform") -> "CoordTransform":
        """Composition: apply ``self`` first, then ``other``."""
        return CoordTransform(other.matrix @ self.matrix, other.matrix @ self.offset + other.offset)

    @property
    def scale(self) -> tuple[float, float]:
        return float(np.hypot(*self.matrix[:, 0])), float(np.hypot(*self.matrix[:, 1]))


def crop_box(landmarks: LandmarkSet | np.ndarray) -> CropBox:
    """Square box of side 1.3 * max(horizontal, vertical extent), centred on the centroid."""
    pts = landmarks.points if isinstance(landmarks, LandmarkSet) else np.asarray(landmarks, dtype=np.float64)
    if len(pts) < 2:
        raise DegenerateShapeError("crop_box needs at least two landmarks")
    if not np.all(np.isfinite(pts)):
        raise GeometryError("landmark coordinates must be finite")
    extent = pts.max(axis=0) - pts.min(axis=0)
    side = 1.3 * float(extent.max())
    if side <= 0:
        raise DegenerateShapeError("all landmarks coincide; crop box has zero extent")
    cx, cy = pts.mean(axis=0)
    return CropBox((float(cx), float(cy)), side)


def warp_affine(image: np.ndarray, out_to_src: CoordTransform, out_shape: tuple[int, int],
                fill: float = 0.0) -> np.ndarray:
    """Bilinear resampling; ``out_to_src`` maps output pixel coordinates to source ones.

    Source pixels outside the image read as ``fill``.
    """
    img = np.asarray(image)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    h, w, c = img.shape
    oh, ow = out_shape
    ys, xs = np.mgrid[0:oh, 0:ow]
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    src = out_to_src.apply(grid)
    sx, sy = src[:, 0], src[:, 1]
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    out = np.zeros((oh * ow, c), dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = np.full((len(xi), c), fill, dtype=np.float64)
            vals[inside] = img[yi[inside], xi[inside]]
            out += (wx * wy)[:, None] * vals
    out = out.reshape(oh, ow, c).astype(img.dtype if img.dtype.kind == "f" else np.float64)
    return out[..., 0] if squeeze else out


def crop_transform(box: CropBox, out_size: int) -> CoordTransform:
    """Original-frame -> output-frame map: ``x' = (x - left) * out_size / side``."""
    s = out_size / box.side
    return CoordTransform(np.eye(2) * s, np.array([-box.left * s, -box.top * s]))


def apply_crop(image: np.ndarray, box: CropBox, out_size: int) -> tuple[np.ndarray, CoordTransform]:
    """Cut ``box`` out of ``image`` and resize it to ``out_size`` x ``out_size``.

    Returns the resampled image and the original-to-crop coordinate transform.
    Pixels that fall outside the source are black.
    """
    if out_size <= 0:
        raise GeometryError("out_size must be positive")
    h, w = image.shape[:2]
    if box.left >= w or box.top >= h or box.left + box.side <= 0 or box.top + box.side <= 0:
        raise OutOfFrameError(f"crop box {box} does not overlap the {w}x{h} image")
    fwd = crop_transform(box, out_size)
    return warp_affine(image, fwd.inverse(), (out_size, out_size)), fwd


def _check_pair(detected: LandmarkSet, truth: LandmarkSet) -> None:
    if detected.scheme != truth.scheme or len(detected) != len(truth):
        raise SchemeMismatchError(f"scheme mismatch: {detected.scheme.name} vs {truth.scheme.name}")


def inter_ocular_distance(truth: LandmarkSet) -> float:
    a, b = truth.scheme.outer_eye
    d = float(np.linalg.norm(truth.points[a] - truth.points[b]))
    if d == 0.0:
        raise DegenerateIodError("outer eye corners coincide; inter-ocular distance is zero")
    return d


def nmse(detected: LandmarkSet, truth: LandmarkSet) -> float:
    """Mean per-landmark Euclidean error divided by the ground-truth outer-eye distance."""
    _check_pair(detected, truth)
    d_iod = inter_ocular_distance(truth)
    err = np.linalg.norm(detected.points - truth.points, axis=1)
    return float(err.mean() / d_iod)


def nmse_subset(detected: LandmarkSet, truth: LandmarkSet, indices) -> float:
    """NMSE over ``indices`` only; the normalizer still comes from the full ground truth."""
    _check_pair(detected, truth)
    idx = np.asarray(list(indices), dtype=np.int64)
    if idx.size == 0:
        raise GeometryError("nmse_subset needs at least one index")
    if idx.min() < 0 or idx.max() >= len(truth):
        raise GeometryError(f"landmark index out of range for {truth.scheme.name}")
    d_iod = inter_ocular_distance(truth)
    err = np.linalg.norm(detected.points[idx] - truth.points[idx], axis=1)
    return float(err.mean() / d_iod)


def ecdf(values) -> list[tuple[float, float]]:
    """Right-continuous empirical CDF: one (value, fraction <= value) step per distinct value."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("ecdf needs at least one value")
    if not np.all(np.isfinite(v)):
        raise ValueError("ecdf values must be finite")
    thresholds, counts = np.unique(v, return_counts=True)
    fractions = np.cumsum(counts) / v.size
    fractions[-1] = 1.0
    return [(float(t), float(f)) for t, f in zip(thresholds, fractions)]


def ecdf_to_csv(curve: list[tuple[float, float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["threshold", "fraction"])
    for t, f in curve:
        writer.writerow([repr(t), repr(f)])
    return buf.getvalue()


@dataclass
class NmseReport:
    per_sample: list[tuple[str, float]]
    subset: str = "all"
    landmark_subset: str = "all-68"
    detected: int | None = None
    total: int | None = None
    mean: float = field(init=False)

    def __post_init__(self):
        vals = [v for _, v in self.per_sample]
        self.mean = float(np.mean(vals)) if vals else float("nan")
        if self.total is None:
            self.total = len(self.per_sample)
        if self.detected is None:
            self.detected = len(self.per_sample)
        if not 0 <= self.detected <= self.total:
            raise ValueError("detected count must lie in [0, total]")

    @property
    def detection_rate(self) -> float:
        return self.detected / self.total if self.total else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["sample_id", "nmse"])
        for sid, v in self.per_sample:
            writer.writerow([sid, repr(v)])
        buf.write(f"#mean={self.mean!r}\n")
        buf.write(f"#detection_rate={self.detection_rate!r}\n")
        return buf.getvalue()
