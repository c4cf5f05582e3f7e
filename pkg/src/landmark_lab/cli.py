"""``landmark-lab`` command line: train, eval, gradcheck and synth."""

from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import gradcheck
from .config import ConfigError, RunConfig, help_text
from .data import (
    DatasetManifest,
    FaceSample,
    ImageFormatError,
    PtsError,
    load_manifest_samples,
    read_occlusion_subset,
    synth_faces,
    write_synth,
)
from .geometry import (LandmarkSet, NmseReport, OutOfFrameError, SchemeMismatchError, ecdf, ecdf_to_csv, nmse,
                       nmse_subset)
from .training import examples_for, fit, load_model, original_frame, predict_coordinates

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2

# canonical report rows; datasets outside this list are appended in name order
ROW_ORDER = ("Helen", "LFPW", "300-W Indoor", "300-W Outdoor", "IBUG")
TOTAL = "Total"


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


# --------------------------------------------------------------------------
# data


def load_split(cfg: RunConfig, split: str) -> list[FaceSample]:
    """Samples of one split from the configured source."""
    source = cfg["data.source"]
    if source == "synthetic":
        count = cfg["data.synth_count"]
        frac = cfg["data.val_fraction"]
        if not 0 < frac < 1:
            raise ConfigError("data.val_fraction must lie in (0, 1)")
        samples = synth_faces(count, cfg["data.synth_size"], seed=cfg["data.synth_seed"],
                              occlusion_rate=cfg["data.occlusion_rate"])
        n_val = max(1, int(round(count * frac)))
        if n_val >= count:
            raise ConfigError("data.synth_count too small for a train/val split")
        if split == "train":
            return samples[:count - n_val]
        return [replace(s, meta=replace(s.meta, split="val")) for s in samples[count - n_val:]]
    if source != "manifest":
        raise ConfigError(f"data.source must be synthetic or manifest, got {source!r}")
    path = cfg["data.manifest"]
    if not path:
        raise ConfigError("data.manifest is required when data.source = manifest")
    if not Path(path).is_file():
        raise ConfigError(f"data.manifest: file not found: {path}")
    occluded: set[str] = set()
    if cfg["data.occlusion_file"]:
        occ = Path(cfg["data.occlusion_file"])
        if not occ.is_file():
            raise ConfigError(f"data.occlusion_file: file not found: {occ}")
        occluded = read_occlusion_subset(occ)
    manifest = DatasetManifest.read(path)
    samples = load_manifest_samples(manifest, split, occluded, scheme=None)
    if not samples:
        raise ConfigError(f"data.manifest: no {split} samples in {path}")
    schemes = {s.landmarks.scheme.name for s in samples}
    if len(schemes) > 1:
        raise ConfigError(f"data.manifest: mixed landmark schemes {sorted(schemes)}")
    return samples


def row_label(sample: FaceSample) -> str:
    meta = sample.meta
    return f"{meta.dataset} {meta.group}" if meta.group else meta.dataset


# --------------------------------------------------------------------------
# train


def cmd_train(cfg: RunConfig, out: Path) -> int:
    train = load_split(cfg, "train")
    val = load_split(cfg, "val")
    config = cfg.train_config()
    spec = cfg.model_spec(train[0].landmarks.scheme.count)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.to_text())
    result = fit(config, train, val, spec=spec, out_dir=out, log_every=cfg["train.log_every"])
    r = result.report
    print(f"steps={r['steps']} best_step={r['best_step']} best_val_loss={r['best_loss']!r} stop={r['stop_reason']}")
    print(f"wrote {out / 'best.ckpt'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# eval


@dataclass
class ModelScores:
    name: str
    full: list[float]  # per sample, nan when not detected
    eyes: list[float]

    def report(self, samples: list[FaceSample], idx=None, eyes: bool = False) -> NmseReport:
        idx = range(len(samples)) if idx is None else idx
        vals = self.eyes if eyes else self.full
        pairs = [(samples[i].sample_id, vals[i]) for i in idx]
        found = [(sid, v) for sid, v in pairs if np.isfinite(v)]
        return NmseReport(found, detected=len(found), total=len(pairs))


def _score(samples: list[FaceSample], points: list[np.ndarray | None]) -> tuple[list[float], list[float]]:
    full, eyes = [], []
    for s, p in zip(samples, points):
        if p is None or not np.all(np.isfinite(p)):
            full.append(float("nan"))
            eyes.append(float("nan"))
            continue
        det = LandmarkSet(p, s.landmarks.scheme)
        full.append(nmse(det, s.landmarks))
        eyes.append(nmse_subset(det, s.landmarks, s.landmarks.scheme.eye_anchors))
    return full, eyes


def _predict(path: Path, samples: list[FaceSample]) -> list[np.ndarray | None]:
    net, config, spec, meta = load_model(path)
    scheme = samples[0].landmarks.scheme
    saved = meta.get("scheme")
    if spec.num_landmarks != scheme.count or (saved is not None and saved != scheme.name):
        raise SchemeMismatchError(f"{path}: checkpoint is for {saved or spec.num_landmarks} landmarks, "
                                  f"data uses {scheme.name} ({scheme.count})")
    points: list[np.ndarray | None] = [None] * len(samples)
    ok, examples = [], []
    for i, s in enumerate(samples):
        try:
            examples.append(examples_for([s], config)[0])
            ok.append(i)
        except OutOfFrameError:
            continue
    if examples:
        coords = predict_coordinates(net, np.stack([e.image for e in examples]), config)
        for i, p in zip(ok, original_frame(coords, examples)):
            points[i] = p
    return points


def _rows(samples: list[FaceSample]) -> list[tuple[str, list[int]]]:
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(row_label(s), []).append(i)
    names = [r for r in ROW_ORDER if r in groups] + sorted(set(groups) - set(ROW_ORDER))
    return [(n, groups[n]) for n in names] + [(TOTAL, list(range(len(samples))))]


def _fmt(v: float) -> str:
    return f"{v:.4f}" if np.isfinite(v) else "-"


def _table(models: list[ModelScores], samples, rows, eyes: bool) -> tuple[str, str]:
    """(csv, aligned text) with datasets as rows and models as columns."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["dataset", "samples"] + [m.name for m in models])
    text = [f"{'dataset':16s}{'n':>6s}" + "".join(f"{m.name:>14s}" for m in models)]
    for name, idx in rows:
        means = [m.report(samples, idx, eyes).mean for m in models]
        writer.writerow([name, len(idx)] + [repr(v) for v in means])
        text.append(f"{name:16s}{len(idx):6d}" + "".join(f"{_fmt(v):>14s}" for v in means))
    return buf.getvalue(), "\n".join(text)


def ecdf_svg(curves: dict[str, list[tuple[float, float]]], width: int = 480, height: int = 320) -> str:
    """Staircase ECDF plot, one polyline per model."""
    pad = 40
    xmax = max((c[-1][0] for c in curves.values() if c), default=1.0) or 1.0
    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

    def sx(v):
        return pad + (width - 2 * pad) * v / xmax

    def sy(f):
        return height - pad - (height - 2 * pad) * f

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{sy(0)}" x2="{width - pad}" y2="{sy(0)}" stroke="black"/>',
             f'<line x1="{pad}" y1="{sy(0)}" x2="{pad}" y2="{sy(1)}" stroke="black"/>',
             f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">NMSE (max {xmax:.3g})</text>',
             f'<text x="12" y="{sy(1)}" font-size="12">1.0</text>']
    for k, (name, curve) in enumerate(curves.items()):
        pts, prev = [f"{sx(0):.2f},{sy(0):.2f}"], 0.0
        for t, f in curve:
            pts.append(f"{sx(t):.2f},{sy(prev):.2f}")
            pts.append(f"{sx(t):.2f},{sy(f):.2f}")
            prev = f
        color = colors[k % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(pts)}"/>')
        parts.append(f'<text x="{width - pad - 100}" y="{pad + 14 * k}" font-size="12" fill="{color}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _checkpoint_args(cfg: RunConfig, extra: list[str]) -> list[tuple[str, Path]]:
    items = [c for c in cfg["eval.checkpoints"].split(",") if c.strip()] + list(extra)
    out = []
    for item in items:
        name, sep, path = item.strip().partition("=")
        if not sep:
            name, path = Path(item).parent.name or Path(item).stem, item
        if not Path(path).is_file():
            raise ConfigError(f"eval.checkpoints: file not found: {path}")
        out.append((name.strip(), Path(path.strip())))
    return out


def cmd_eval(cfg: RunConfig, out: Path, checkpoints: list[str], passthrough: bool = False) -> int:
    samples = load_split(cfg, cfg["eval.split"])
    models: list[ModelScores] = []
    if passthrough or cfg["eval.passthrough"]:
        models.append(ModelScores("ground_truth", *_score(samples, [s.landmarks.points for s in samples])))
    for name, path in _checkpoint_args(cfg, checkpoints):
        models.append(ModelScores(name, *_score(samples, _predict(path, samples))))
    if not models:
        raise ConfigError("eval needs --checkpoint name=path, eval.checkpoints or --passthrough")
    names = [m.name for m in models]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate model names {names}")

    out.mkdir(parents=True, exist_ok=True)
    rows = _rows(samples)
    table_csv, table_txt = _table(models, samples, rows, eyes=False)
    eye_csv, eye_txt = _table(models, samples, rows, eyes=True)
    (out / "nmse_table.csv").write_text(table_csv)
    (out / "eye_table.csv").write_text(eye_csv)
    print("Average NMSE")
    print(table_txt)
    print("\nAverage NMSE, eye anchors")
    print(eye_txt)

    det = ["model,detected,total,detection_rate"]
    curves = {}
    for m in models:
        rep = m.report(samples)
        det.append(f"{m.name},{rep.detected},{rep.total},{rep.detection_rate!r}")
        (out / f"per_sample_{m.name}.csv").write_text(rep.to_csv())
        if rep.per_sample:
            curves[m.name] = ecdf(v for _, v in rep.per_sample)
            (out / f"ecdf_{m.name}.csv").write_text(ecdf_to_csv(curves[m.name]))
            eye_rep = m.report(samples, eyes=True)
            (out / f"ecdf_eyes_{m.name}.csv").write_text(ecdf_to_csv(ecdf(v for _, v in eye_rep.per_sample)))
    (out / "detection.csv").write_text("\n".join(det) + "\n")
    print("\nDetection rate")
    print("\n".join("  " + ln for ln in det[1:]))
    if cfg["eval.svg"] and curves:
        (out / "ecdf.svg").write_text(ecdf_svg(curves))

    if any(s.meta.occluded for s in samples):
        occ = [i for i, s in enumerate(samples) if s.meta.occluded]
        clear = [i for i, s in enumerate(samples) if not s.meta.occluded]
        lines = ["subset,samples," + ",".join(names)]
        for label, idx in (("with_occlusion", occ), ("without_occlusion", clear)):
            means = [m.report(samples, idx).mean for m in models]
            lines.append(f"{label},{len(idx)}," + ",".join(repr(v) for v in means))
        (out / "occlusion.csv").write_text("\n".join(lines) + "\n")
        print("\nOcclusion split")
        print("\n".join("  " + ln for ln in lines))
    return EXIT_OK


# --------------------------------------------------------------------------
# gradcheck and synth


def cmd_gradcheck(scopes: list[str], only: list[str], instances: int, seed: int) -> int:
    results = gradcheck.run_checks(scopes, instances=instances, seed=seed, only=set(only) or None)
    if not results:
        _err(f"no component matched {only}")
        return EXIT_CONFIG
    for r in results:
        print(r.line())
    failed = [r.component for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_FAILED
    print(f"all {len(results)} components pass (relative error < {gradcheck.TOLERANCE:g})")
    return EXIT_OK


def cmd_synth(count: int, size: int, seed: int, out: Path, occlusion_rate: float = 0.0) -> int:
    samples = synth_faces(count, size, seed=seed, occlusion_rate=occlusion_rate)
    manifest = write_synth(out, samples)
    print(f"wrote {len(manifest)} faces and {out / 'manifest.csv'}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="config file with [section] key = value lines")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
    common.add_argument("--seed", type=int, help="master seed; overrides train.seed (synth: data.synth_seed)")

    parser = argparse.ArgumentParser(prog="landmark-lab", description="Facial landmark detection workbench.",
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     epilog="configuration keys and defaults:\n" + help_text())
    sub = parser.add_subparsers(dest="verb", required=True)
    fmt = argparse.RawDescriptionHelpFormatter
    sub.add_parser("train", parents=[common], formatter_class=fmt, help="train a detector",
                   epilog=help_text())
    ev = sub.add_parser("eval", parents=[common], formatter_class=fmt, help="evaluate checkpoints",
                        epilog=help_text())
    ev.add_argument("--checkpoint", action="append", default=[], metavar="NAME=PATH",
                    help="checkpoint to evaluate; NAME becomes the table column (repeatable)")
    ev.add_argument("--passthrough", action="store_true", help="add a ground-truth column")
    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    gc.add_argument("--scope", action="append", choices=gradcheck.SCOPES,
                    help="primitive, loss or model (repeatable; default: all)")
    gc.add_argument("--component", action="append", default=[], help="run only this component (repeatable)")
    gc.add_argument("--instances", type=int, default=gradcheck.INSTANCES, help="random instances per component")
    sy = sub.add_parser("synth", parents=[common], help="write synthetic faces (PPM, pts, manifest)")
    sy.add_argument("--count", type=int, help="faces to write (default: data.synth_count)")
    sy.add_argument("--size", type=int, help="image side (default: data.synth_size)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, args.overrides)
        if args.verb == "train":
            if args.seed is not None:
                cfg.set(f"train.seed={args.seed}")
            return cmd_train(cfg, args.out)
        if args.verb == "eval":
            return cmd_eval(cfg, args.out, args.checkpoint, args.passthrough)
        if args.verb == "gradcheck":
            seed = 0 if args.seed is None else args.seed
            return cmd_gradcheck(args.scope or list(gradcheck.SCOPES), args.component, args.instances, seed)
        seed = cfg["data.synth_seed"] if args.seed is None else args.seed
        count = cfg["data.synth_count"] if args.count is None else args.count
        size = cfg["data.synth_size"] if args.size is None else args.size
        return cmd_synth(count, size, seed, args.out, cfg["data.occlusion_rate"])
    except (ConfigError, SchemeMismatchError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except (PtsError, ImageFormatError, OSError) as exc:
        _err(str(exc))
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
