"""Annotation and image IO, dataset manifests, augmentation, training examples
and a procedural toy-face generator."""

from __future__ import annotations

import csv
import io
import math
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import (
    SCHEME_68,
    SCHEME_TOY10,
    CoordTransform,
    CropBox,
    LandmarkScheme,
    LandmarkSet,
    OutOfFrameError,
    crop_box,
    crop_transform,
    warp_affine,
)
from .heatmap_codec import encode_gaussian, encode_hreg, encode_pwc

ANGLE_RANGE = (-30.0, 30.0)
SCALE_RANGE = (0.6, 1.0)


# --------------------------------------------------------------------------
# samples


@dataclass(frozen=True)
class SampleMeta:
    dataset: str
    split: str
    sample_id: str
    occluded: bool = False
    group: str | None = None  # report sub-row, e.g. the Indoor/Outdoor halves of 300-W
    # box to crop with; set by augmentation so the crop stays in the pre-augmentation frame
    crop: CropBox | None = None


@dataclass(frozen=True)
class FaceSample:
    image: np.ndarray  # (h, w, 3) float32 in [0, 1]
    landmarks: LandmarkSet
    meta: SampleMeta

    def __post_init__(self):
        if self.image.size == 0 or self.image.ndim != 3:
            raise ValueError("image must be a nonempty (h, w, channels) array")

    @property
    def sample_id(self) -> str:
        return self.meta.sample_id


# --------------------------------------------------------------------------
# pts annotations


class PtsError(ValueError):
    pass


class PtsHeaderError(PtsError):
    pass


class PtsCountError(PtsError):
    pass


class PtsValueError(PtsError):
    pass


def parse_pts(text: str, scheme: LandmarkScheme | None = None) -> LandmarkSet | np.ndarray:
    """Parse a 300-W style ``.pts`` file.

    File coordinates are 1-based; the returned ones are 0-based pixel
    coordinates. Without a scheme, 68 points map to the standard scheme, 10 to
    the toy scheme, and anything else is returned as a raw (n, 2) array.
    """
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if len(lines) < 3 or not lines[0].lower().startswith("version"):
        raise PtsHeaderError("pts: expected a 'version:' line first")
    head = lines[1].split(":")
    if len(head) != 2 or head[0].strip().lower() != "n_points":
        raise PtsHeaderError("pts: expected an 'n_points: <count>' line")
    try:
        n = int(head[1])
    except ValueError:
        raise PtsHeaderError(f"pts: bad point count {head[1].strip()!r}") from None
    if lines[2] != "{" or "}" not in lines:
        raise PtsHeaderError("pts: coordinates must sit in a '{' ... '}' block")
    body = lines[3:lines.index("}")]
    if len(body) != n:
        raise PtsCountError(f"pts: header announces {n} points, block has {len(body)}")
    pts = np.empty((n, 2), dtype=np.float64)
    for i, row in enumerate(body):
        parts = row.split()
        if len(parts) != 2:
            raise PtsValueError(f"pts: line {i + 4} needs two numbers, got {row!r}")
        try:
            pts[i] = float(parts[0]), float(parts[1])
        except ValueError:
            raise PtsValueError(f"pts: non-numeric coordinate on line {i + 4}: {row!r}") from None
    if not np.all(np.isfinite(pts)):
        raise PtsValueError("pts: coordinates must be finite")
    pts -= 1.0
    if scheme is None:
        scheme = {68: SCHEME_68, 10: SCHEME_TOY10}.get(n)
        if scheme is None:
            return pts
    return LandmarkSet(pts, scheme)


def serialize_pts(landmarks: LandmarkSet | np.ndarray) -> str:
    pts = landmarks.points if isinstance(landmarks, LandmarkSet) else np.asarray(landmarks, dtype=np.float64)
    rows = [f"{x + 1:.6f} {y + 1:.6f}" for x, y in pts]
    return "version: 1\nn_points: {}\n{{\n{}\n}}\n".format(len(rows), "\n".join(rows))


# --------------------------------------------------------------------------
# images


class ImageFormatError(ValueError):
    pass


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6; float images in [0, 1] are quantized to 8 bits."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img[..., :3].tobytes())


def _ppm_tokens(raw: bytes, count: int) -> tuple[list[int], int]:
    tokens, pos = [], 2
    while len(tokens) < count:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(raw[start:pos]))
    return tokens, pos + 1


def read_ppm(data: bytes) -> np.ndarray:
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError("only binary PPM (P6) and PGM (P5) are supported")
    (w, h, maxval), offset = _ppm_tokens(data, 3)
    if maxval != 255:
        raise ImageFormatError("only 8-bit PPM/PGM is supported")
    c = 3 if magic == b"P6" else 1
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h * c, offset=offset).reshape(h, w, c)
    return np.repeat(pix, 3, axis=-1) if c == 1 else pix.copy()


def _paeth(a, b, c):
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def _unfilter(raw: bytes, h: int, stride: int, bpp: int) -> np.ndarray:
    out = bytearray(h * stride)
    prev = [0] * stride
    pos = 0
    for y in range(h):
        kind = raw[pos]
        cur = list(raw[pos + 1:pos + 1 + stride])
        pos += stride + 1
        if kind == 1:
            for i in range(bpp, stride):
                cur[i] = (cur[i] + cur[i - bpp]) & 0xFF
        elif kind == 2:
            cur = [(c + p) & 0xFF for c, p in zip(cur, prev)]
        elif kind == 3:
            for i in range(stride):
                left = cur[i - bpp] if i >= bpp else 0
                cur[i] = (cur[i] + ((left + prev[i]) >> 1)) & 0xFF
        elif kind == 4:
            for i in range(stride):
                left = cur[i - bpp] if i >= bpp else 0
                upleft = prev[i - bpp] if i >= bpp else 0
                cur[i] = (cur[i] + _paeth(left, prev[i], upleft)) & 0xFF
        elif kind != 0:
            raise ImageFormatError(f"png: unknown filter type {kind}")
        out[y * stride:(y + 1) * stride] = bytes(cur)
        prev = cur
    return np.frombuffer(bytes(out), dtype=np.uint8).reshape(h, stride)


def read_png(data: bytes) -> np.ndarray:
    """Decode a non-interlaced 8-bit PNG (gray, gray+alpha, RGB, RGBA or palette) to RGB uint8."""
    if data[:8] != b"\x89PNG\r\n\x1a\n":
        raise ImageFormatError("not a PNG file")
    pos, idat, palette = 8, [], None
    w = h = depth = ctype = interlace = None
    while pos < len(data):
        length, kind = struct.unpack(">I4s", data[pos:pos + 8])
        chunk = data[pos + 8:pos + 8 + length]
        pos += 12 + length
        if kind == b"IHDR":
            w, h, depth, ctype, _, _, interlace = struct.unpack(">IIBBBBB", chunk)
        elif kind == b"PLTE":
            palette = np.frombuffer(chunk, dtype=np.uint8).reshape(-1, 3)
        elif kind == b"IDAT":
            idat.append(chunk)
        elif kind == b"IEND":
            break
    if w is None:
        raise ImageFormatError("png: missing IHDR")
    if depth != 8 or interlace != 0:
        raise ImageFormatError("png: only 8-bit, non-interlaced images are supported")
    channels = {0: 1, 2: 3, 3: 1, 4: 2, 6: 4}.get(ctype)
    if channels is None:
        raise ImageFormatError(f"png: unsupported color type {ctype}")
    raw = zlib.decompress(b"".join(idat))
    pix = _unfilter(raw, h, w * channels, channels).reshape(h, w, channels)
    if ctype == 3:
        if palette is None:
            raise ImageFormatError("png: palette image without PLTE")
        return palette[pix[..., 0]]
    if ctype in (0, 4):
        return np.repeat(pix[..., :1], 3, axis=-1)
    return pix[..., :3].copy()


def write_png(path, image: np.ndarray) -> None:
    """Minimal RGB PNG writer (filter 0); used for tests and conversions."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape

    def chunk(kind: bytes, payload: bytes) -> bytes:
        return struct.pack(">I", len(payload)) + kind + payload + struct.pack(">I", zlib.crc32(kind + payload))

    rows = b"".join(b"\x00" + img[y, :, :3].tobytes() for y in range(h))
    png = (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0))
           + chunk(b"IDAT", zlib.compress(rows)) + chunk(b"IEND", b""))
    Path(path).write_bytes(png)


def load_image(path) -> np.ndarray:
    """Read a PPM/PGM or PNG file as float32 RGB in [0, 1]."""
    data = Path(path).read_bytes()
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        pix = read_png(data)
    elif data[:2] in (b"P5", b"P6"):
        pix = read_ppm(data)
    else:
        raise ImageFormatError(f"{path}: unsupported image container (convert JPEG sources to PNG first)")
    return pix.astype(np.float32) / 255.0


# --------------------------------------------------------------------------
# manifests


# images per dataset as (training, validation)
REFERENCE_COUNTS = {
    "AFW": (337, 0),
    "Helen": (2000, 330),
    "LFPW": (811, 224),
    "300-W": (0, 600),
    "IBUG": (0, 135),
    "COFW": (0, 507),
}
# 300-W validation images by sub-directory
INDOOR_OUTDOOR = {"01_Indoor": "Indoor", "02_Outdoor": "Outdoor"}
INDOOR_OUTDOOR_COUNTS = {"Indoor": 300, "Outdoor": 300}
SPLITS = ("train", "val")
MANIFEST_HEADER = ["image_path", "pts_path", "dataset", "split"]


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    pts_path: str
    dataset: str
    split: str

    @property
    def sample_id(self) -> str:
        return f"{self.dataset}/{Path(self.image_path).stem}"

    @property
    def subgroup(self) -> str | None:
        """Indoor/Outdoor for 300-W images, inferred from the directory name."""
        for part in Path(self.image_path).parts:
            if part in INDOOR_OUTDOOR:
                return INDOOR_OUTDOOR[part]
        return None


@dataclass
class Discrepancy:
    dataset: str
    split: str
    expected: int
    found: int

    def __str__(self) -> str:
        return f"{self.dataset} {self.split}: expected {self.expected}, found {self.found}"


@dataclass
class ManifestReport:
    counts: dict[tuple[str, str], int]
    discrepancies: list[Discrepancy]
    missing_files: list[str]

    @property
    def ok(self) -> bool:
        return not self.discrepancies and not self.missing_files

    def lines(self) -> list[str]:
        out = [f"{d}/{s}: {n}" for (d, s), n in sorted(self.counts.items())]
        out += [f"DISCREPANCY {d}" for d in self.discrepancies]
        out += [f"MISSING {p}" for p in self.missing_files]
        return out


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.root / path

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != MANIFEST_HEADER:
                raise ValueError(f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}")
            entries = []
            for row in reader:
                if row["split"] not in SPLITS:
                    raise ValueError(f"{path}: split must be train or val, got {row['split']!r}")
                entries.append(ManifestEntry(row["image_path"], row["pts_path"], row["dataset"], row["split"]))
        return cls(entries, path.parent)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for e in self.entries:
            writer.writerow([e.image_path, e.pts_path, e.dataset, e.split])
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())

    def counts(self) -> dict[tuple[str, str], int]:
        out: dict[tuple[str, str], int] = {}
        for e in self.entries:
            out[(e.dataset, e.split)] = out.get((e.dataset, e.split), 0) + 1
        return out

    def split(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def check(self, expected: dict[str, tuple[int, int]] | None = None, check_files: bool = True) -> ManifestReport:
        """Compare per-dataset counts with the reference table and list missing files.

        Only datasets present in the manifest are compared, so a partial
        download reports on what is there rather than failing on what is not.
        """
        expected = REFERENCE_COUNTS if expected is None else expected
        counts = self.counts()
        present = {d for d, _ in counts}
        issues = []
        for name in sorted(present):
            if name not in expected:
                continue
            for split, want in zip(SPLITS, expected[name]):
                got = counts.get((name, split), 0)
                if got != want:
                    issues.append(Discrepancy(name, split, want, got))
        if "300-W" in present:
            groups: dict[str, int] = {}
            for e in self.entries:
                if e.dataset == "300-W":
                    g = e.subgroup or "unassigned"
                    groups[g] = groups.get(g, 0) + 1
            for g, want in INDOOR_OUTDOOR_COUNTS.items():
                if groups.get(g, 0) != want:
                    issues.append(Discrepancy(f"300-W {g}", "val", want, groups.get(g, 0)))
        missing = []
        if check_files:
            for e in self.entries:
                for p in (e.image_path, e.pts_path):
                    if not self.resolve(p).is_file():
                        missing.append(p)
        return ManifestReport(counts, issues, missing)


# directory layout of the usual 300-W-family downloads: (dataset, split, relative dir)
STANDARD_LAYOUT = (
    ("AFW", "train", "afw"),
    ("Helen", "train", "helen/trainset"),
    ("Helen", "val", "helen/testset"),
    ("LFPW", "train", "lfpw/trainset"),
    ("LFPW", "val", "lfpw/testset"),
    ("300-W", "val", "300W/01_Indoor"),
    ("300-W", "val", "300W/02_Outdoor"),
    ("IBUG", "val", "ibug"),
    ("COFW", "val", "cofw"),
)
IMAGE_SUFFIXES = (".png", ".ppm", ".pgm")


def scan_standard(root) -> DatasetManifest:
    """Build a manifest from the standard directory layout; images need a sibling ``.pts`` file."""
    root = Path(root)
    entries = []
    for dataset, split, rel in STANDARD_LAYOUT:
        folder = root / rel
        if not folder.is_dir():
            continue
        for img in sorted(folder.iterdir()):
            if img.suffix.lower() in IMAGE_SUFFIXES:
                entries.append(ManifestEntry(str(img.relative_to(root)), str(img.with_suffix(".pts").relative_to(root)),
                                             dataset, split))
    return DatasetManifest(entries, root)


def read_occlusion_subset(path) -> set[str]:
    return {ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")}


def load_sample(manifest: DatasetManifest, entry: ManifestEntry, occluded: set[str] = frozenset(),
                scheme: LandmarkScheme | None = SCHEME_68) -> FaceSample:
    """Read one manifest row; ``scheme=None`` picks the scheme from the point count."""
    image = load_image(manifest.resolve(entry.image_path))
    landmarks = parse_pts(manifest.resolve(entry.pts_path).read_text(), scheme)
    if not isinstance(landmarks, LandmarkSet):
        raise PtsCountError(f"{entry.pts_path}: {len(landmarks)} points match no known scheme")
    sid = entry.sample_id
    flag = sid in occluded or Path(entry.image_path).stem in occluded
    return FaceSample(image, landmarks, SampleMeta(entry.dataset, entry.split, sid, flag, entry.subgroup))


def load_manifest_samples(manifest: DatasetManifest, split: str | None = None, occluded: set[str] = frozenset(),
                          scheme: LandmarkScheme | None = SCHEME_68) -> list[FaceSample]:
    entries = manifest.entries if split is None else manifest.split(split)
    return [load_sample(manifest, e, occluded, scheme) for e in entries]


# --------------------------------------------------------------------------
# augmentation


def sample_seed(master: int, *keys: int) -> np.random.SeedSequence:
    """Independent random stream per (epoch, sample, ...) key, derived from the master seed."""
    return np.random.SeedSequence([int(master) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])


def draw_augmentation(seed) -> tuple[float, float]:
    """(angle in degrees, scale) drawn uniformly from the augmentation ranges."""
    rng = np.random.default_rng(seed)
    angle = rng.uniform(*ANGLE_RANGE)
    scale = rng.uniform(*SCALE_RANGE)
    return float(angle), float(scale)


def similarity_about(center, angle_deg: float, scale: float) -> CoordTransform:
    """Rotate by ``angle_deg`` (x toward y), then scale, about ``center``."""
    t = math.radians(angle_deg)
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    m = scale * rot
    c = np.asarray(center, dtype=np.float64)
    return CoordTransform(m, c - m @ c)


def augment(sample: FaceSample, seed, angle: float | None = None, scale: float | None = None) -> FaceSample:
    """Random rotation and rescaling about the crop center; image and landmarks move together.

    ``angle``/``scale`` override the random draw. The returned sample remembers
    the pre-augmentation crop box so that a later crop sees the rescaled face
    rather than re-framing it.
    """
    a, s = draw_augmentation(seed)
    a = a if angle is None else angle
    s = s if scale is None else scale
    box = sample.meta.crop or crop_box(sample.landmarks)
    fwd = similarity_about(box.center, a, s)
    h, w = sample.image.shape[:2]
    image = warp_affine(sample.image, fwd.inverse(), (h, w))
    return FaceSample(image, sample.landmarks.transformed(fwd), replace(sample.meta, crop=box))


# --------------------------------------------------------------------------
# training examples

REGRESSION_HEADS = ("direct", "cascaded")


@dataclass
class Example:
    image: np.ndarray  # (input, input, 3) float32
    points: np.ndarray  # (L, 2) crop-frame coordinates
    target: object  # (L, 2) array, HeatmapStack or PwcLabelMap
    to_crop: CoordTransform  # original frame -> crop frame
    sample_id: str

    @property
    def flat_target(self) -> np.ndarray:
        return self.points.reshape(-1)


def encode_target(points_crop: np.ndarray, head_kind: str, input_size: int, map_size: int,
                  sigma: float = 3.0, radius: int = 0):
    if head_kind in REGRESSION_HEADS:
        return points_crop.copy()
    pm = points_crop * (map_size / input_size)
    shape = (map_size, map_size)
    if head_kind == "distribution":
        return encode_gaussian(pm, shape, sigma)
    if head_kind == "heatmap_regression":
        return encode_hreg(pm, shape, sigma)
    if head_kind in ("pwc", "hybrid"):
        return encode_pwc(pm, shape, radius)
    raise ValueError(f"unknown head kind {head_kind!r}")


def make_example(sample: FaceSample, map_size: int, head_kind: str, input_size: int = 224,
                 sigma: float = 3.0, radius: int = 0, pre: CoordTransform | None = None) -> Example:
    """Crop to the landmark box, resize to ``input_size`` and encode the target in the crop frame.

    ``pre`` is an optional original-frame transform (an augmentation) folded
    into the same single resampling.
    """
    if head_kind not in REGRESSION_HEADS + ("distribution", "heatmap_regression", "pwc", "hybrid"):
        raise ValueError(f"unknown head kind {head_kind!r}")
    box = sample.meta.crop or crop_box(sample.landmarks)
    to_crop = crop_transform(box, input_size)
    if pre is not None:
        to_crop = pre.then(to_crop)
    h, w = sample.image.shape[:2]
    # same overlap test as apply_crop, done in the crop frame
    corners = to_crop.apply(np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], dtype=np.float64))
    if corners.max() < 0 or corners.min() >= input_size:
        raise OutOfFrameError("crop box does not overlap the image")
    image = warp_affine(sample.image, to_crop.inverse(), (input_size, input_size)).astype(np.float32)
    pts = to_crop.apply(sample.landmarks.points)
    target = encode_target(pts, head_kind, input_size, map_size, sigma, radius)
    return Example(image, pts, target, to_crop, sample.sample_id)


def augmented_example(sample: FaceSample, seed, map_size: int, head_kind: str, input_size: int = 224,
                      sigma: float = 3.0, radius: int = 0) -> Example:
    """``make_example(augment(sample))`` with a single resampling of the source image."""
    angle, scale = draw_augmentation(seed)
    box = sample.meta.crop or crop_box(sample.landmarks)
    pre = similarity_about(box.center, angle, scale)
    framed = FaceSample(sample.image, sample.landmarks, replace(sample.meta, crop=box))
    return make_example(framed, map_size, head_kind, input_size, sigma, radius, pre=pre)


# --------------------------------------------------------------------------
# synthetic faces


@dataclass(frozen=True)
class Ellipse:
    center: tuple[float, float]
    axes: tuple[float, float]
    angle: float  # radians

    def inside(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        dx, dy = x - self.center[0], y - self.center[1]
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (u / self.axes[0]) ** 2 + (v / self.axes[1]) ** 2 <= 1.0

    def point(self, t: float) -> np.ndarray:
        """Boundary point at parameter angle ``t``."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        u, v = self.axes[0] * math.cos(t), self.axes[1] * math.sin(t)
        return np.array([self.center[0] + c * u - s * v, self.center[1] + s * u + c * v])


@dataclass(frozen=True)
class Polygon:
    vertices: tuple[tuple[float, float], ...]

    def inside(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        # even-odd rule
        v = np.asarray(self.vertices)
        out = np.zeros(np.broadcast(x, y).shape, dtype=bool)
        for (x0, y0), (x1, y1) in zip(v, np.roll(v, -1, axis=0)):
            crosses = (y0 > y) != (y1 > y)
            with np.errstate(divide="ignore", invalid="ignore"):
                xi = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
            out ^= crosses & (x < xi)
        return out


@dataclass(frozen=True)
class FaceLayout:
    """Generation parameters of one toy face; ``features`` pairs each landmark with the shape it sits on."""

    head: Ellipse
    eyes: tuple[Ellipse, Ellipse]
    nose: Polygon
    mouth: Polygon
    landmarks: np.ndarray  # (10, 2)
    skin: float
    feature: float
    background: float
    occluder: tuple[float, float, float, float] | None  # x0, y0, x1, y1

    def feature_of(self, index: int):
        if index < 2:
            return self.eyes[0]
        if index < 4:
            return self.eyes[1]
        if index == 4:
            return self.nose
        if index < 9:
            return self.mouth
        return self.head


def _face_layout(rng: np.random.Generator, size: int, occlusion_rate: float) -> FaceLayout:
    a = size * rng.uniform(0.24, 0.32)  # head half-width
    b = a * rng.uniform(1.15, 1.35)  # head half-height
    theta = math.radians(rng.uniform(-20.0, 20.0))
    cx = size / 2 + rng.uniform(-0.08, 0.08) * size
    cy = size / 2 + rng.uniform(-0.06, 0.06) * size
    c, s = math.cos(theta), math.sin(theta)

    def place(u, v):
        return (cx + c * u - s * v, cy + s * u + c * v)

    eye_dx = a * rng.uniform(0.34, 0.46)
    eye_y = -b * rng.uniform(0.18, 0.32)
    ew = a * rng.uniform(0.14, 0.2)
    eh = ew * rng.uniform(0.35, 0.6)
    eyes = (Ellipse(place(-eye_dx, eye_y), (ew, eh), theta), Ellipse(place(eye_dx, eye_y), (ew, eh), theta))
    nose_y = b * rng.uniform(0.08, 0.2)
    nose_w = a * rng.uniform(0.08, 0.14)
    nose = Polygon((place(0.0, eye_y + eh), place(nose_w, nose_y), place(-nose_w, nose_y)))
    mouth_y = b * rng.uniform(0.42, 0.55)
    mw = a * rng.uniform(0.25, 0.4)
    up = b * rng.uniform(0.04, 0.1)
    down = b * rng.uniform(0.04, 0.14)
    mouth_pts = (place(-mw, mouth_y), place(0.0, mouth_y - up), place(mw, mouth_y), place(0.0, mouth_y + down))
    mouth = Polygon(mouth_pts)
    head = Ellipse((cx, cy), (a, b), theta)
    lms = np.array([
        eyes[0].point(math.pi),  # left eye, outer corner
        eyes[0].point(0.0),  # left eye, inner corner
        eyes[1].point(math.pi),  # right eye, inner corner
        eyes[1].point(0.0),  # right eye, outer corner
        np.array(place(0.0, nose_y)),  # nose tip: midpoint of the nose base
        *[np.array(p) for p in mouth_pts],
        head.point(math.pi / 2),  # chin
    ])
    skin = rng.uniform(0.45, 0.85)
    feature = skin - rng.uniform(0.25, 0.4)
    background = rng.uniform(0.05, 0.35) if rng.random() < 0.5 else rng.uniform(0.9, 1.0)
    occluder = None
    if rng.random() < occlusion_rate:
        ox, oy = rng.uniform(0.2, 0.8, size=2) * size
        half = rng.uniform(0.08, 0.16, size=2) * size
        occluder = (ox - half[0], oy - half[1], ox + half[0], oy + half[1])
    return FaceLayout(head, eyes, nose, mouth, lms, skin, feature, background, occluder)


def _coverage(shape, xs: np.ndarray, ys: np.ndarray, ss: int) -> np.ndarray:
    """Fraction of an ``ss`` x ``ss`` subsample grid per pixel that falls inside ``shape``."""
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    acc = np.zeros(xs.shape, dtype=np.float64)
    for oy in offs:
        for ox in offs:
            acc += shape.inside(xs + ox, ys + oy)
    return acc / (ss * ss)


def render_face(layout: FaceLayout, size: int, rng: np.random.Generator, supersample: int = 3,
                noise: float = 0.02) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.full((size, size), layout.background)
    head = _coverage(layout.head, xs, ys, supersample)
    img = img * (1 - head) + layout.skin * head
    for shape in (*layout.eyes, layout.nose, layout.mouth):
        cov = _coverage(shape, xs, ys, supersample)
        img = img * (1 - cov) + layout.feature * cov
    if layout.occluder is not None:
        x0, y0, x1, y1 = layout.occluder
        box = (xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)
        img[box] = rng.uniform(0.0, 1.0)
    tint = rng.uniform(0.85, 1.15, size=3)
    rgb = np.clip(img[..., None] * tint, 0.0, 1.0)
    rgb = rgb + rng.normal(0.0, noise, size=rgb.shape)
    return np.clip(rgb, 0.0, 1.0).astype(np.float32)


def synth_faces(count: int, size: int = 64, seed: int = 0, occlusion_rate: float = 0.0,
                split: str = "train", with_layouts: bool = False):
    """Procedural toy faces with exact 10-point landmarks; deterministic per seed.

    Each sample draws from its own stream split off ``seed``, so sample ``i``
    does not depend on ``count``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    samples, layouts = [], []
    for i in range(count):
        rng = np.random.default_rng(sample_seed(seed, i))
        layout = _face_layout(rng, size, occlusion_rate)
        image = render_face(layout, size, rng)
        meta = SampleMeta("synthetic", split, f"synth_{seed}_{i:05d}", layout.occluder is not None)
        samples.append(FaceSample(image, LandmarkSet(layout.landmarks, SCHEME_TOY10), meta))
        layouts.append(layout)
    return (samples, layouts) if with_layouts else samples


def boundary_distances(layout: FaceLayout, radius: float = 0.5, probes: int = 32) -> np.ndarray:
    """Per landmark, whether the rendered shape's edge passes within ``radius`` px.

    Probes a circle of ``radius`` around each landmark with the renderer's own
    inside test; the edge is within reach when both inside and outside probes
    exist. Returns 0.0 for such landmarks and ``inf`` otherwise.
    """
    t = np.linspace(0, 2 * np.pi, probes, endpoint=False)
    out = np.empty(len(layout.landmarks))
    for i, (x, y) in enumerate(layout.landmarks):
        shape = layout.feature_of(i)
        hits = shape.inside(x + radius * np.cos(t), y + radius * np.sin(t))
        out[i] = 0.0 if hits.any() and not hits.all() else np.inf
    return out


def mean_shape(samples: list[FaceSample], input_size: int) -> np.ndarray:
    """Average crop-frame landmark positions over ``samples``: the cascade's starting shape."""
    acc = []
    for s in samples:
        box = s.meta.crop or crop_box(s.landmarks)
        acc.append(crop_transform(box, input_size).apply(s.landmarks.points))
    return np.mean(acc, axis=0)


def write_synth(out_dir, samples: list[FaceSample]) -> DatasetManifest:
    """Write PPM images, pts files and ``manifest.csv`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        stem = s.sample_id
        write_ppm(out / f"{stem}.ppm", s.image)
        (out / f"{stem}.pts").write_text(serialize_pts(s.landmarks))
        entries.append(ManifestEntry(f"{stem}.ppm", f"{stem}.pts", s.meta.dataset, s.meta.split))
    manifest = DatasetManifest(entries, out)
    manifest.write(out / "manifest.csv")
    return manifest
