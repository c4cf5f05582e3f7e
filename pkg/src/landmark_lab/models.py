"""Backbone, the five detection heads and the shape discriminator.

All networks consume NHWC images. Regression heads return (batch, L, 2)
coordinates in input pixels; heatmap heads return (batch, h, w, C) maps at
``map_size`` resolution.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .autodiff import ops
from .autodiff.layers import BatchNorm, Conv2d, ConvBlock, Deconv2d, DenseBlock, Linear, Module
from .autodiff.tensor import Tensor, no_grad

HEAD_KINDS = ("direct", "cascaded", "distribution", "heatmap_regression", "pwc")
HEATMAP_KINDS = ("distribution", "heatmap_regression", "pwc")


class ModelSpecError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    """Declarative network description; the defaults are the reference configuration."""

    head: str = "pwc"
    num_landmarks: int = 68
    input_size: int = 224
    map_size: int = 112
    stage_channels: tuple[int, ...] = (64, 128, 256, 512, 512)
    stage_blocks: tuple[int, ...] = (2, 2, 4, 4, 4)
    final_channels: int = 2048
    shortcut_stages: tuple[int, ...] = (1, 2)
    deconv_channels: tuple[int, ...] = (512, 256, 128, 64)
    fc_widths: tuple[int, ...] = (1024, 1024)
    cascade_stages: int = 3
    cascade_feature_stage: int = 2
    cascade_channels: int = 256
    cascade_fc: int = 256
    scale: float = 1.0

    def __post_init__(self):
        if self.head not in HEAD_KINDS:
            raise ModelSpecError(f"unknown head {self.head!r}; expected one of {HEAD_KINDS}")
        if not 0 < self.scale <= 1:
            raise ModelSpecError("width scale must lie in (0, 1]")
        if len(self.stage_channels) != len(self.stage_blocks) or not self.stage_channels:
            raise ModelSpecError("stage_channels and stage_blocks must be equally long and non-empty")
        if min(self.stage_blocks) < 1:
            raise ModelSpecError("every stage needs at least one block")
        if self.cascade_stages < 1:
            raise ModelSpecError("cascade stage count must be >= 1")
        if self.num_landmarks < 1:
            raise ModelSpecError("need at least one landmark")
        depth = 2 ** len(self.stage_channels)
        if self.input_size % depth:
            raise ModelSpecError(f"input_size must be divisible by {depth}")
        deepest = self.input_size // depth
        ups = self.map_size / deepest
        if ups < 1 or ups != 2 ** round(math.log2(ups)):
            raise ModelSpecError("map_size must be the deepest feature size times a power of two")
        if len(self.deconv_channels) != round(math.log2(ups)):
            raise ModelSpecError(f"need {round(math.log2(ups))} deconv channel entries for this map size")
        sizes = self.decoder_sizes()
        prev = -1
        for s in self.shortcut_stages:
            if not 0 <= s < len(self.stage_channels):
                raise ModelSpecError(f"shortcut source stage {s} does not exist")
            if s <= prev:
                raise ModelSpecError("shortcut stages must be strictly increasing")
            prev = s
            if self.pooled_size(s) not in sizes:
                raise ModelSpecError(f"shortcut from stage {s} has no decoder stage at {self.pooled_size(s)} px")
        if not 0 <= self.cascade_feature_stage < len(self.stage_channels):
            raise ModelSpecError("cascade_feature_stage does not exist")

    def ch(self, c: int) -> int:
        return max(1, math.ceil(self.scale * c))

    def pooled_size(self, stage: int) -> int:
        return self.input_size // 2 ** (stage + 1)

    def decoder_sizes(self) -> list[int]:
        deepest = self.input_size // 2 ** len(self.stage_channels)
        return [deepest * 2 ** (i + 1) for i in range(len(self.deconv_channels))]

    @property
    def out_channels(self) -> int:
        return self.num_landmarks if self.head == "distribution" else self.num_landmarks + 1

    def with_(self, **kw) -> "ModelSpec":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        kw = {}
        for f in fields(cls):
            if f.name in d:
                v = d[f.name]
                kw[f.name] = tuple(int(x) for x in v) if isinstance(v, (list, tuple)) else v
        return cls(**kw)


def desk_spec(head: str = "pwc", num_landmarks: int = 10, input_size: int = 64, scale: float = 0.125,
              **kw) -> ModelSpec:
    """Reference layout at desk scale: narrow widths and half-depth stages."""
    kw.setdefault("stage_blocks", (1, 1, 2, 2, 2))
    return ModelSpec(head=head, num_landmarks=num_landmarks, input_size=input_size,
                     map_size=input_size // 2, scale=scale, **kw)


# --------------------------------------------------------------------------


class Backbone(Module):
    """VGG-style conv blocks with a 2x2 max pool closing every stage, then one wide block."""

    def __init__(self, spec: ModelSpec, rng, dtype=np.float32):
        self.stages = []
        cin = 3
        for c, b in zip(spec.stage_channels, spec.stage_blocks):
            cout = spec.ch(c)
            blocks = []
            for _ in range(b):
                blocks.append(ConvBlock(cin, cout, rng, dtype=dtype))
                cin = cout
            self.stages.append(blocks)
        self.final = ConvBlock(cin, spec.ch(spec.final_channels), rng, dtype=dtype)
        self.out_channels = spec.ch(spec.final_channels)

    def forward(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        pooled = []
        h = x
        for blocks in self.stages:
            for block in blocks:
                h = block(h)
            h = ops.maxpool2(h)
            pooled.append(h)
        return self.final(h), pooled


class DeconvBlock(Module):
    """2x transposed convolution, batch normalization, ReLU."""

    def __init__(self, cin: int, cout: int, rng, dtype=np.float32):
        self.deconv = Deconv2d(cin, cout, 4, rng, stride=2, padding=1, dtype=dtype)
        self.bn = BatchNorm(cout, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.deconv(x)))


class HeatmapNet(Module):
    """Backbone plus a deconvolution decoder with shortcut fusions from pooled stages."""

    def __init__(self, spec: ModelSpec, rng, dtype=np.float32):
        self.spec = spec
        self.kind = spec.head
        self.backbone = Backbone(spec, rng, dtype)
        self.ups = []
        self.fuse = []
        cin = self.backbone.out_channels
        sources = {spec.pooled_size(s): s for s in spec.shortcut_stages}
        self.fuse_sources = []
        for size, c in zip(spec.decoder_sizes(), spec.deconv_channels):
            cout = spec.ch(c)
            self.ups.append(DeconvBlock(cin, cout, rng, dtype))
            if size in sources:
                s = sources[size]
                skip = spec.ch(spec.stage_channels[s])
                self.fuse.append(ConvBlock(cout + skip, cout, rng, dtype=dtype))
                self.fuse_sources.append(s)
            else:
                self.fuse.append(None)
                self.fuse_sources.append(None)
            cin = cout
        self.fuse = [f for f in self.fuse if f is not None]
        self.out = Conv2d(cin, spec.out_channels, 1, rng, dtype=dtype, init="xavier")

    def logits(self, x: Tensor) -> Tensor:
        h, pooled = self.backbone(x)
        k = 0
        for up, src in zip(self.ups, self.fuse_sources):
            h = up(h)
            if src is not None:
                h = self.fuse[k](ops.concat([h, pooled[src]], axis=-1))
                k += 1
        return self.out(h)

    def forward(self, x: Tensor) -> Tensor:
        z = self.logits(x)
        if self.kind == "distribution":
            return ops.spatial_softmax(z)
        if self.kind == "pwc":
            return ops.channel_softmax(z)
        return z


class DirectNet(Module):
    """Backbone features flattened into a fully connected regression stack."""

    kind = "direct"

    def __init__(self, spec: ModelSpec, rng, dtype=np.float32):
        self.spec = spec
        self.backbone = Backbone(spec, rng, dtype)
        deepest = spec.input_size // 2 ** len(spec.stage_channels)
        fin = deepest * deepest * self.backbone.out_channels
        self.fcs = []
        for wdt in spec.fc_widths:
            self.fcs.append(DenseBlock(fin, spec.ch(wdt), rng, dtype))
            fin = spec.ch(wdt)
        self.out = Linear(fin, 2 * spec.num_landmarks, rng, dtype=dtype, init="xavier")
        # start every landmark at the image centre
        self.out.bias.data[...] = 0.5

    def forward(self, x: Tensor) -> Tensor:
        h, _ = self.backbone(x)
        h = ops.flatten(h)
        for fc in self.fcs:
            h = fc(h)
        u = self.out(h)
        coords = ops.mul(u, float(self.spec.input_size))
        return ops.reshape(coords, (x.shape[0], self.spec.num_landmarks, 2))


def rasterize_backward(g, gx, gy, offx, offy, sigma, size):
    g = g[..., 0]
    a = np.einsum("nhw,nlh->nlw", g, gy)
    b = np.einsum("nhw,nlw->nlh", g, gx)
    dpx = (a * gx * offx).sum(axis=-1) / sigma ** 2
    dpy = (b * gy * offy).sum(axis=-1) / sigma ** 2
    return (np.stack([dpx, dpy], axis=-1) * size,)


def rasterize_shape(shape_norm: Tensor, size: int, sigma: float = 1.0) -> Tensor:
    """(batch, L, 2) coordinates in [0, 1] -> (batch, size, size, 1) sum of unit-peak Gaussians.

    Differentiable in the coordinates, so each stage's update also trains the
    stages before it.
    """
    pts = shape_norm.data * size
    grid = np.arange(size, dtype=pts.dtype)
    offx = grid[None, None, :] - pts[..., :1]  # (n, L, size)
    offy = grid[None, None, :] - pts[..., 1:]
    gx = np.exp(-offx ** 2 / (2 * sigma * sigma))
    gy = np.exp(-offy ** 2 / (2 * sigma * sigma))
    out = np.einsum("nlh,nlw->nhw", gy, gx)[..., None]
    return Tensor.from_op(out, (shape_norm,),
                          lambda g: rasterize_backward(g, gx, gy, offx, offy, sigma, size), "rasterize")


class CascadeStage(Module):
    def __init__(self, cin: int, spec: ModelSpec, size: int, rng, dtype=np.float32):
        self.block = ConvBlock(cin + 1, spec.ch(spec.cascade_channels), rng, dtype=dtype)
        pooled = (size + 1) // 2
        self.fc = DenseBlock(pooled * pooled * spec.ch(spec.cascade_channels), spec.ch(spec.cascade_fc), rng, dtype)
        self.out = Linear(spec.ch(spec.cascade_fc), 2 * spec.num_landmarks, rng, dtype=dtype, init="xavier")

    def forward(self, features: Tensor, shape_map: Tensor) -> Tensor:
        h = ops.concat([features, shape_map], axis=-1)
        h = ops.maxpool2(self.block(h))
        return self.out(self.fc(ops.flatten(h)))


class CascadedNet(Module):
    """S_i = S_{i-1} + dS_i starting from a fixed mean shape.

    Each stage sees backbone features concatenated with a rasterized map of the
    current shape estimate.
    """

    kind = "cascaded"
    buffer_names = ("initial_shape",)

    def __init__(self, spec: ModelSpec, initial_shape: np.ndarray, rng, dtype=np.float32):
        self.spec = spec
        self.backbone = Backbone(spec, rng, dtype)
        init = np.asarray(initial_shape, dtype=np.float64).reshape(spec.num_landmarks, 2)
        # normalized to [0, 1] of the input frame; not trainable
        self.initial_shape = init / spec.input_size
        s = spec.cascade_feature_stage
        self.feature_stage = s
        self.feature_size = spec.pooled_size(s)
        cin = spec.ch(spec.stage_channels[s])
        self.stages = [CascadeStage(cin, spec, self.feature_size, rng, dtype) for _ in range(spec.cascade_stages)]

    def forward_stages(self, x: Tensor) -> list[Tensor]:
        """Normalized shape after every stage (batch, L, 2); index 0 is the initial shape."""
        _, pooled = self.backbone(x)
        feats = pooled[self.feature_stage]
        n = x.shape[0]
        cur = Tensor(np.broadcast_to(self.initial_shape, (n,) + self.initial_shape.shape).astype(x.dtype))
        shapes = [cur]
        for stage in self.stages:
            smap = rasterize_shape(cur, self.feature_size)
            delta = ops.reshape(stage(feats, smap), (n, self.spec.num_landmarks, 2))
            cur = ops.add(cur, delta)
            shapes.append(cur)
        return shapes

    def forward(self, x: Tensor) -> Tensor:
        return ops.mul(self.forward_stages(x)[-1], float(self.spec.input_size))


class Discriminator(Module):
    """Three fully connected layers judging whether normalized coordinates form a face."""

    def __init__(self, landmark_count: int, rng, widths=(128, 128), dtype=np.float32):
        if landmark_count < 2:
            raise ModelSpecError("discriminator needs at least two landmarks")
        self.landmark_count = landmark_count
        self.blocks = []
        fin = 2 * landmark_count
        for w in widths:
            self.blocks.append(DenseBlock(fin, w, rng, dtype))
            fin = w
        self.out = Linear(fin, 1, rng, dtype=dtype, init="xavier")

    def logit(self, coords: Tensor) -> Tensor:
        h = ops.reshape(coords, (coords.shape[0], 2 * self.landmark_count))
        for b in self.blocks:
            h = b(h)
        return ops.reshape(self.out(h), (coords.shape[0],))

    def forward(self, coords: Tensor) -> Tensor:
        return ops.sigmoid(self.logit(coords))


# --------------------------------------------------------------------------


def build_backbone(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Backbone:
    return Backbone(spec, np.random.default_rng(seed), dtype)


def build_direct_head(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> DirectNet:
    return DirectNet(spec.with_(head="direct"), np.random.default_rng(seed), dtype)


def build_cascaded_head(spec: ModelSpec, initial_shape, stages: int | None = None, seed: int = 0,
                        dtype=np.float32) -> CascadedNet:
    spec = spec.with_(head="cascaded", cascade_stages=stages or spec.cascade_stages)
    return CascadedNet(spec, initial_shape, np.random.default_rng(seed), dtype)


def build_heatmap_head(spec: ModelSpec, kind: str | None = None, seed: int = 0, dtype=np.float32) -> HeatmapNet:
    kind = kind or spec.head
    if kind not in HEATMAP_KINDS:
        raise ModelSpecError(f"{kind!r} is not a heatmap head")
    return HeatmapNet(spec.with_(head=kind), np.random.default_rng(seed), dtype)


def build_discriminator(landmark_count: int, seed: int = 0, widths=(128, 128), dtype=np.float32) -> Discriminator:
    return Discriminator(landmark_count, np.random.default_rng(seed), widths, dtype)


def build_detector(spec: ModelSpec, initial_shape=None, seed: int = 0, dtype=np.float32) -> Module:
    if spec.head == "direct":
        return build_direct_head(spec, seed, dtype)
    if spec.head == "cascaded":
        if initial_shape is None:
            initial_shape = np.full((spec.num_landmarks, 2), spec.input_size / 2.0)
        return build_cascaded_head(spec, initial_shape, seed=seed, dtype=dtype)
    return build_heatmap_head(spec, seed=seed, dtype=dtype)


# --------------------------------------------------------------------------


@dataclass
class ParamCount:
    per_layer: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.per_layer.values())


def count_params(network: Module) -> ParamCount:
    """Trainable parameter count per layer (weights, biases, batch-norm scale/shift)."""
    per_layer: dict[str, int] = {}
    for name, p in network.named_parameters():
        layer = name.rsplit(".", 1)[0] if "." in name else name
        per_layer[layer] = per_layer.get(layer, 0) + int(p.data.size)
    return ParamCount(per_layer)


def _conv(k, cin, cout):
    return k * k * cin * cout + cout


def _bn(c):
    return 2 * c


def _fc(fin, fout):
    return fin * fout + fout


def analytic_param_count(spec: ModelSpec) -> int:
    """Closed-form parameter total from the spec alone."""
    total = 0
    cin = 3
    for c, b in zip(spec.stage_channels, spec.stage_blocks):
        c = spec.ch(c)
        for _ in range(b):
            total += _conv(3, cin, c) + _bn(c)
            cin = c
    fc = spec.ch(spec.final_channels)
    total += _conv(3, cin, fc) + _bn(fc)
    if spec.head in HEATMAP_KINDS:
        cin = fc
        sizes = spec.decoder_sizes()
        fused = {spec.pooled_size(s): spec.ch(spec.stage_channels[s]) for s in spec.shortcut_stages}
        for size, c in zip(sizes, spec.deconv_channels):
            c = spec.ch(c)
            total += _conv(4, cin, c) + _bn(c)
            if size in fused:
                total += _conv(3, c + fused[size], c) + _bn(c)
            cin = c
        total += _conv(1, cin, spec.out_channels)
    elif spec.head == "direct":
        deepest = spec.input_size // 2 ** len(spec.stage_channels)
        fin = deepest * deepest * fc
        for w in spec.fc_widths:
            total += _fc(fin, spec.ch(w)) + _bn(spec.ch(w))
            fin = spec.ch(w)
        total += _fc(fin, 2 * spec.num_landmarks)
    else:
        s = spec.cascade_feature_stage
        cin = spec.ch(spec.stage_channels[s]) + 1
        cc, cf = spec.ch(spec.cascade_channels), spec.ch(spec.cascade_fc)
        pooled = (spec.pooled_size(s) + 1) // 2
        per_stage = (_conv(3, cin, cc) + _bn(cc) + _fc(pooled * pooled * cc, cf) + _bn(cf)
                     + _fc(cf, 2 * spec.num_landmarks))
        total += spec.cascade_stages * per_stage
    return total


def analytic_discriminator_count(landmark_count: int, widths=(128, 128)) -> int:
    total = 0
    fin = 2 * landmark_count
    for w in widths:
        total += _fc(fin, w) + _bn(w)
        fin = w
    return total + _fc(fin, 1)


def predict(network: Module, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Eval-mode forward over an (N, H, W, 3) array, batched, without graph construction."""
    was_training = network.training
    network.eval()
    outs = []
    try:
        with no_grad():
            for i in range(0, len(images), batch_size):
                outs.append(network(Tensor(images[i:i + batch_size])).data)
    finally:
        network.train(was_training)
    return np.concatenate(outs, axis=0)
