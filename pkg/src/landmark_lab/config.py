"""Flat ``[section] key = value`` run configuration with documented defaults."""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

from .models import ModelSpec, ModelSpecError
from .training import DEFAULT_LOSS, TrainConfig, TrainConfigError


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    section: str
    name: str
    default: object
    doc: str

    @property
    def dotted(self) -> str:
        return f"{self.section}.{self.name}"


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


_reference = ModelSpec()
KEYS: tuple[Key, ...] = (
    Key("data", "source", "synthetic", "synthetic | manifest"),
    Key("data", "manifest", "", "manifest CSV (image_path,pts_path,dataset,split) when source = manifest"),
    Key("data", "occlusion_file", "", "newline-separated sample ids flagged as occluded"),
    Key("data", "synth_count", 500, "number of synthetic faces"),
    Key("data", "synth_size", 64, "synthetic image side in pixels"),
    Key("data", "synth_seed", 1000, "seed of the synthetic face generator"),
    Key("data", "val_fraction", 0.2, "trailing fraction of synthetic faces used for validation"),
    Key("data", "occlusion_rate", 0.0, "probability that a synthetic face gets an occluder"),
    Key("model", "head", "pwc", "direct | cascaded | distribution | heatmap_regression | pwc"),
    Key("model", "scale", 0.125, "width scale factor in (0, 1]; channels round up"),
    Key("model", "input_size", 64, "crop side fed to the network (reference: 224)"),
    Key("model", "map_size", 32, "heatmap side (reference: 112)"),
    Key("model", "stage_channels", _reference.stage_channels, "backbone channels per stage"),
    Key("model", "stage_blocks", (1, 1, 2, 2, 2), "conv blocks per stage (reference: 2,2,4,4,4)"),
    Key("model", "final_channels", _reference.final_channels, "channels of the last backbone block"),
    Key("model", "shortcut_stages", _reference.shortcut_stages, "stages whose pooled output feeds the decoder"),
    Key("model", "deconv_channels", _reference.deconv_channels, "decoder channels per 2x upsampling"),
    Key("model", "fc_widths", _reference.fc_widths, "hidden widths of the direct regression head"),
    Key("model", "cascade_stages", _reference.cascade_stages, "refinement stages of the cascaded head"),
    Key("model", "cascade_feature_stage", _reference.cascade_feature_stage, "backbone stage the cascade reads"),
    Key("model", "cascade_channels", _reference.cascade_channels, "conv channels per cascade stage"),
    Key("model", "cascade_fc", _reference.cascade_fc, "hidden width per cascade stage"),
    Key("train", "loss", "", "reg | dist | hreg | pwc | hybrid | hybrid+disc | pwc+disc (empty: head default)"),
    Key("train", "alpha", 1.0, "weight of the pixel-classification term of the hybrid loss"),
    Key("train", "beta", 0.25, "weight of the coordinate term of the hybrid loss"),
    Key("train", "face_weight", 1.0, "weight of the adversarial face term"),
    Key("train", "temperature", 1.0, "soft-argmax temperature for the coordinate term"),
    Key("train", "kl_direction", "forward", "forward (truth || prediction) or reverse KL"),
    Key("train", "batch_size", 8, "samples per step"),
    Key("train", "lr", 1e-4, "Adam learning rate"),
    Key("train", "beta1", 0.9, "Adam first-moment decay"),
    Key("train", "beta2", 0.999, "Adam second-moment decay"),
    Key("train", "adam_eps", 1e-8, "Adam denominator epsilon"),
    Key("train", "val_interval", 100, "steps between validations"),
    Key("train", "patience", 10, "validations without improvement before stopping"),
    Key("train", "max_steps", 3000, "step limit"),
    Key("train", "seed", 0, "master seed (overridden by --seed)"),
    Key("train", "sigma", 3.0, "Gaussian std of heatmap targets, in map pixels"),
    Key("train", "radius", 0, "pwc label radius (Chebyshev, map pixels)"),
    Key("train", "augment", True, "random rotation and rescaling of training faces"),
    Key("train", "log_every", 1, "training-loss log period in steps"),
    Key("eval", "checkpoints", "", "comma-separated name=path checkpoints (models become table columns)"),
    Key("eval", "passthrough", False, "add a ground-truth column (sanity check: NMSE 0)"),
    Key("eval", "split", "val", "split to evaluate"),
    Key("eval", "svg", False, "also write ECDF staircase plots as SVG"),
)
KEY_INDEX = {k.dotted: k for k in KEYS}


def _coerce(key: Key, text: str):
    d = key.default
    try:
        if isinstance(d, bool):
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(d, int):
            return int(text)
        if isinstance(d, float):
            return float(text)
        if isinstance(d, tuple):
            return _ints(text)
        return text.strip()
    except ValueError:
        raise ConfigError(f"{key.dotted}: cannot read {text!r} as {type(d).__name__}") from None


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


class RunConfig:
    """Resolved configuration: defaults, then the file, then ``--set`` overrides."""

    def __init__(self, values: dict[str, object] | None = None):
        self.values = {k.dotted: k.default for k in KEYS}
        if values:
            self.values.update(values)

    def __getitem__(self, dotted: str):
        return self.values[dotted]

    def section(self, name: str) -> dict[str, object]:
        return {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith(name + ".")}

    @classmethod
    def load(cls, path=None, overrides: list[str] = ()) -> "RunConfig":
        cfg = cls()
        if path is not None:
            cfg._read_file(Path(path))
        for item in overrides:
            cfg.set(item)
        return cfg

    def _read_file(self, path: Path) -> None:
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        text = path.read_text()
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",),
                                           interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        lines = text.splitlines()

        def where(section, key):
            current = None
            for i, ln in enumerate(lines, 1):
                s = ln.strip()
                if s.startswith("["):
                    current = s.strip("[]").strip()
                elif current == section and s.split("=", 1)[0].strip() == key:
                    return f"{path}:{i}"
            return str(path)

        for section in parser.sections():
            for key, raw in parser.items(section):
                dotted = f"{section}.{key}"
                if dotted not in KEY_INDEX:
                    raise ConfigError(f"{where(section, key)}: unknown key {dotted!r}")
                try:
                    self.values[dotted] = _coerce(KEY_INDEX[dotted], raw)
                except ConfigError as exc:
                    raise ConfigError(f"{where(section, key)}: {exc}") from None

    def set(self, item: str) -> None:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        dotted = dotted.strip()
        if dotted not in KEY_INDEX:
            raise ConfigError(f"--set: unknown key {dotted!r}")
        self.values[dotted] = _coerce(KEY_INDEX[dotted], raw)

    def to_text(self) -> str:
        out, section = [], None
        for key in KEYS:
            if key.section != section:
                section = key.section
                out.append(f"{'' if not out else chr(10)}[{section}]")
            out.append(f"{key.name} = {_format(self.values[key.dotted])}")
        return "\n".join(out) + "\n"

    # ----------------------------------------------------------------------

    def model_spec(self, num_landmarks: int) -> ModelSpec:
        m = self.section("model")
        try:
            return self._spec(m, num_landmarks)
        except ModelSpecError as exc:
            raise ConfigError(f"model: {exc}") from None

    @staticmethod
    def _spec(m: dict, num_landmarks: int) -> ModelSpec:
        return ModelSpec(head=m["head"], num_landmarks=num_landmarks, input_size=m["input_size"],
                         map_size=m["map_size"], stage_channels=m["stage_channels"], stage_blocks=m["stage_blocks"],
                         final_channels=m["final_channels"], shortcut_stages=m["shortcut_stages"],
                         deconv_channels=m["deconv_channels"], fc_widths=m["fc_widths"],
                         cascade_stages=m["cascade_stages"], cascade_feature_stage=m["cascade_feature_stage"],
                         cascade_channels=m["cascade_channels"], cascade_fc=m["cascade_fc"], scale=m["scale"])

    def train_config(self) -> TrainConfig:
        t = self.section("train")
        m = self.section("model")
        head = m["head"]
        if head not in DEFAULT_LOSS:
            raise ConfigError(f"model.head: unknown head {head!r}")
        t.pop("log_every")
        loss = t.pop("loss") or DEFAULT_LOSS[head]
        try:
            return TrainConfig(head=head, loss=loss, scale=m["scale"], input_size=m["input_size"],
                               map_size=m["map_size"], **t)
        except TrainConfigError as exc:
            raise ConfigError(f"train: {exc}") from None


def help_text() -> str:
    """Every key as it is spelled for ``--set``, with its default, grouped by section."""
    width = max(len(f"{k.dotted} = {_format(k.default)}") for k in KEYS)
    rows, section = [], None
    for key in KEYS:
        if key.section != section:
            section = key.section
            rows.append(f"[{section}]")
        rows.append(f"  {f'{key.dotted} = {_format(key.default)}':{width}s}  # {key.doc}")
    return "\n".join(rows)
