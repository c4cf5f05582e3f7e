"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line through the ``acceptance`` fixture before
asserting, so the terminal summary lists every criterion even when some fail.
"""

import math
import time

import numpy as np
import pytest

from landmark_lab import cli, losses
from landmark_lab.autodiff import Tensor
from landmark_lab.data import (
    ANGLE_RANGE,
    REFERENCE_COUNTS,
    SCALE_RANGE,
    STANDARD_LAYOUT,
    augment,
    draw_augmentation,
    mean_shape,
    parse_pts,
    sample_seed,
    scan_standard,
    serialize_pts,
    synth_faces,
)
from landmark_lab.geometry import SCHEME_68, LandmarkSet, crop_box, nmse
from landmark_lab.gradcheck import TOLERANCE, run_checks
from landmark_lab.heatmap_codec import decode_argmax, encode_gaussian, encode_pwc, onehot, round_half_up
from landmark_lab.models import analytic_discriminator_count, build_detector, build_discriminator, count_params, desk_spec
from landmark_lab.training import (
    DEFAULT_LOSS,
    TrainConfig,
    collate,
    early_stop,
    evaluate_nmse,
    examples_for,
    fit,
    new_state,
    train_step,
)

PRIMITIVES = ("conv2d", "deconv2d", "maxpool2", "batchnorm", "fully_connected", "spatial_softmax",
              "channel_softmax", "decode_softargmax")
LOSSES = ("loss_reg", "loss_dist", "loss_hreg", "loss_pwc", "loss_hybrid", "loss_face", "loss_disc", "loss_total")


def test_c01_gradient_integrity(acceptance):
    t0 = time.perf_counter()
    results = run_checks(["primitive", "loss"], instances=5)
    elapsed = time.perf_counter() - t0
    by_name = {r.component: r for r in results}
    wanted = list(PRIMITIVES) + list(LOSSES)
    missing = [w for w in wanted if w not in by_name]
    failing = [w for w in wanted if w in by_name and not by_name[w].passed]
    worst = max((by_name[w].max_rel_error for w in wanted if w in by_name), default=math.inf)
    ok = not missing and not failing and all(by_name[w].instances >= 5 for w in wanted) and elapsed < 120
    acceptance(1, "gradient integrity", ok,
               f"worst rel err {worst:.2e} < {TOLERANCE:g}, {elapsed:.1f}s, failing={failing}, missing={missing}")
    assert ok


def test_c02_discriminator_count(acceptance):
    disc = build_discriminator(SCHEME_68.count)
    walked = count_params(disc).total
    # independent route: sum the array sizes directly off the parameter list
    raw = sum(int(np.prod(p.data.shape)) for p in disc.parameters())
    analytic = analytic_discriminator_count(SCHEME_68.count)
    ok = walked == analytic == raw == 34_689
    acceptance(2, "discriminator parameter count", ok, f"walk={walked} params={raw} analytic={analytic}")
    assert ok


def test_c03_loss_oracles(acceptance):
    checks = {}
    k = 11
    labels = np.random.default_rng(0).integers(0, k, (2, 8, 8))
    checks["pwc log K"] = abs(losses.loss_pwc(np.full((2, 8, 8, k), 1 / k), labels).scalar - math.log(k))
    h, w = 16, 12
    truth = np.zeros((1, h, w, 1))
    truth[0, 5, 7, 0] = 1.0
    checks["dist log n"] = abs(losses.loss_dist(np.full((1, h, w, 1), 1 / (h * w)), truth).scalar - math.log(h * w))
    checks["disc 2 log 2"] = abs(losses.loss_disc(np.array([0.5]), np.array([0.5])).scalar - 2 * math.log(2))
    hyb = losses.loss_hybrid(losses.LossValue(Tensor(np.array(0.8))), losses.LossValue(Tensor(np.array(0.4))),
                             alpha=1.0, beta=0.25).scalar
    ok = all(v <= 1e-9 for v in checks.values()) and hyb == 0.9
    detail = ", ".join(f"{n} err {v:.1e}" for n, v in checks.items()) + f", hybrid={hyb!r}"
    acceptance(3, "loss oracles", ok, detail)
    assert ok


def test_c04_codec_roundtrips(acceptance):
    rng = np.random.default_rng(4)
    size, sigma = 32, 2.0
    pts = rng.uniform(2 * sigma, size - 1 - 2 * sigma, (1000, 2))
    gauss_ok = True
    for chunk in np.split(pts, 50):
        maps = encode_gaussian(chunk, size, sigma)
        gauss_ok &= bool(np.array_equal(decode_argmax(maps), round_half_up(chunk)))
        gauss_ok &= bool(np.allclose(maps.data.sum(axis=(0, 1)), 1.0, atol=1e-6))

    pwc_ok = True
    pwc_sum_ok = True
    for _ in range(100):
        # distinct pixels, anywhere on the map including the border
        cells = rng.choice(size * size, 10, replace=False)
        grid = np.stack([cells % size, cells // size], axis=1).astype(float)
        jittered = grid + rng.uniform(-0.5, 0.5 - 1e-9, grid.shape)
        probs = onehot(encode_pwc(jittered, size, radius=0))
        pwc_ok &= bool(np.array_equal(decode_argmax(probs), grid))
        pwc_sum_ok &= bool(np.allclose(probs.data.sum(axis=-1), 1.0, atol=1e-6))

    # softmax outputs of the networks themselves
    x = Tensor(rng.uniform(size=(2, 64, 64, 3)).astype(np.float32))
    pwc_out = build_detector(desk_spec("pwc"))(x).data
    dist_out = build_detector(desk_spec("distribution"))(x).data
    net_ok = bool(np.allclose(pwc_out.sum(axis=-1), 1.0, atol=1e-6)
                  and np.allclose(dist_out.sum(axis=(1, 2)), 1.0, atol=1e-6))
    ok = gauss_ok and pwc_ok and pwc_sum_ok and net_ok
    acceptance(4, "codec roundtrips", ok,
               f"gaussian={gauss_ok} pwc={pwc_ok} pwc sums={pwc_sum_ok} network sums={net_ok}")
    assert ok


def loop_nmse(det, truth):
    a, b = 36, 45
    d_iod = math.sqrt((truth[a][0] - truth[b][0]) ** 2 + (truth[a][1] - truth[b][1]) ** 2)
    total = 0.0
    for (dx, dy), (tx, ty) in zip(det, truth):
        total += math.sqrt((dx - tx) ** 2 + (dy - ty) ** 2)
    return total / len(truth) / d_iod


def test_c05_metric_oracle(acceptance):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        truth = rng.uniform(0, 200, (68, 2))
        det = truth + rng.normal(0, 5, (68, 2))
        got = nmse(LandmarkSet(det), LandmarkSet(truth))
        worst = max(worst, abs(got - loop_nmse(det.tolist(), truth.tolist())))
    truth = rng.uniform(0, 100, (68, 2))
    truth[36] = [0.0, 0.0]
    truth[45] = [10.0, 0.0]
    hand = nmse(LandmarkSet(truth + [3.0, 4.0]), LandmarkSet(truth))
    ok = worst <= 1e-12 and hand == 0.5
    acceptance(5, "metric oracle", ok, f"max |diff| {worst:.1e}, hand case {hand!r}")
    assert ok


def loop_crop(points):
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    side = 1.3 * max(max(xs) - min(xs), max(ys) - min(ys))
    return (sum(xs) / len(xs), sum(ys) / len(ys)), side


def recovered_similarity(before, after, center):
    """Rotation (degrees) and scale of the map taking ``before`` to ``after`` about ``center``."""
    u = (before - center) @ np.array([1, 1j])
    v = (after - center) @ np.array([1, 1j])
    z = np.vdot(u, v) / np.vdot(u, u)
    return math.degrees(np.angle(z)), abs(z)


def test_c06_procedure_fidelity(acceptance, faces):
    rng = np.random.default_rng(6)
    crop_err = 0.0
    for _ in range(100):
        pts = rng.uniform(0, 300, (68, 2)) * rng.uniform(0.2, 1.0, 2)
        box = crop_box(LandmarkSet(pts))
        (cx, cy), side = loop_crop(pts.tolist())
        crop_err = max(crop_err, abs(box.center[0] - cx), abs(box.center[1] - cy), abs(box.side - side))
    crop_ok = crop_err <= 1e-9

    draws = np.array([draw_augmentation(sample_seed(2024, i)) for i in range(10_000)])
    angles, scales = draws[:, 0], draws[:, 1]
    in_range = bool(angles.min() >= ANGLE_RANGE[0] and angles.max() <= ANGLE_RANGE[1]
                    and scales.min() >= SCALE_RANGE[0] and scales.max() <= SCALE_RANGE[1])
    # 2% of each interval's width around its midpoint
    a_mid, s_mid = sum(ANGLE_RANGE) / 2, sum(SCALE_RANGE) / 2
    a_tol = 0.02 * (ANGLE_RANGE[1] - ANGLE_RANGE[0])
    s_tol = 0.02 * (SCALE_RANGE[1] - SCALE_RANGE[0])
    means_ok = abs(angles.mean() - a_mid) <= a_tol and abs(scales.mean() - s_mid) <= s_tol

    # the draws actually reach the samples: recover them from the moved landmarks
    applied_err = 0.0
    for i, s in enumerate(faces):
        seed = sample_seed(2024, i)
        out = augment(s, seed)
        ang, sc = recovered_similarity(s.landmarks.points, out.landmarks.points, np.array(crop_box(s.landmarks).center))
        want_a, want_s = draw_augmentation(seed)
        applied_err = max(applied_err, abs(ang - want_a), abs(sc - want_s))
    applied_ok = applied_err < 1e-9

    histories = {
        "ten flat": ([1.0] * 11, True),
        "nine flat": ([1.0] * 10, False),
        "improve then ten worse": ([2.0, 1.0] + [1.5] * 10, True),
        "improve then nine worse": ([2.0, 1.0] + [1.5] * 9, False),
        "late improvement": ([2.0, 1.0] + [1.5] * 9 + [0.9], False),
    }
    stop_ok = all(early_stop(h, 10) is want for h, want in histories.values())
    # the first step at which it fires on a long flat run is the 10th non-improvement
    flat = [1.0] * 30
    first = next(i for i in range(1, 31) if early_stop(flat[:i], 10))
    stop_ok &= first == 11

    ok = crop_ok and in_range and means_ok and applied_ok and stop_ok
    acceptance(6, "procedure fidelity", ok,
               f"crop err {crop_err:.1e}, ranges={in_range}, mean angle {angles.mean():+.3f} (tol {a_tol:g}), "
               f"mean scale {scales.mean():.4f} (tol {s_tol:g}), applied err {applied_err:.1e}, early stop={stop_ok}")
    assert ok


def test_c07_adversarial_schedule(acceptance, faces):
    cfg = TrainConfig(loss="hybrid+disc", batch_size=4, augment=False)
    state = new_state(cfg, desk_spec("pwc"))
    det_ids = frozenset(id(p) for p in state.detector.parameters())
    disc_ids = frozenset(id(p) for p in state.discriminator.parameters())
    batch = collate(examples_for(faces[:4], cfg))
    ok = True
    for step in range(3):
        train_step(state, batch, cfg)
        names = [n for n, _ in state.last_updates]
        ok &= names.count("discriminator") == 1 and names.count("detector") == 2
        for name, ids in state.last_updates:
            ok &= ids == (disc_ids if name == "discriminator" else det_ids)
            ok &= not (ids & (det_ids if name == "discriminator" else disc_ids))
    # second route: the optimizers' own step counters
    ok &= state.optimizer.updates == 6 and state.disc_optimizer.updates == 3
    ok &= not det_ids & disc_ids
    acceptance(7, "adversarial schedule", ok,
               f"detector updates {state.optimizer.updates}, discriminator updates {state.disc_optimizer.updates}")
    assert ok


# fixed desk protocol for the convergence comparison
PROTOCOL = dict(head="pwc", lr=1e-3, batch_size=4, radius=1, augment=False, max_steps=3000, val_interval=250)


@pytest.mark.slow
def test_c08_desk_convergence(acceptance):
    samples = synth_faces(500, 64, seed=1000)
    train, val = samples[:400], samples[400:]
    t0 = time.perf_counter()
    scores = {"pwc": [], "hybrid": []}
    for seed in range(5):
        for loss in scores:
            cfg = TrainConfig(loss=loss, seed=seed, **PROTOCOL)
            res = fit(cfg, train, val)
            scores[loss].append(float(np.mean([v for _, v in evaluate_nmse(res.detector, val, cfg)])))
            print(f"seed {seed} {loss:6s} val NMSE {scores[loss][-1]:.4f}", flush=True)
    elapsed = time.perf_counter() - t0
    pwc, hyb = np.array(scores["pwc"]), np.array(scores["hybrid"])
    wins = int(np.sum(hyb <= pwc))
    under = int(np.sum(hyb < 0.05))
    ok_a = bool(np.all(pwc < 0.08))
    # the 0.05 bar holds for every seed; only the ordering is allowed one miss
    ok_b = under == 5 and wins >= 4
    ok = ok_a and ok_b and elapsed < 30 * 60
    acceptance(8, "desk-scale convergence", ok,
               f"pwc {np.round(pwc, 4).tolist()}, hybrid {np.round(hyb, 4).tolist()}, "
               f"hybrid<0.05 in {under}/5, hybrid<=pwc in {wins}/5, {elapsed / 60:.1f} min")
    assert ok


# coordinate heads see pixel-scale losses, map heads train through softmax outputs
OVERFIT_LR = {"direct": 1e-3, "cascaded": 1e-3, "distribution": 3e-3, "heatmap_regression": 3e-3, "pwc": 3e-3}


def overfit(head: str, steps: int = 2000) -> tuple[float, float, int]:
    samples = synth_faces(4, 64, seed=99)
    cfg = TrainConfig(head=head, loss=DEFAULT_LOSS[head], lr=OVERFIT_LR[head], batch_size=4, augment=False, seed=0)
    spec = desk_spec(head)
    init = mean_shape(samples, cfg.input_size) if head == "cascaded" else None
    state = new_state(cfg, spec, init)
    batch = collate(examples_for(samples, cfg))
    train_step(state, batch, cfg)
    first = last = state.last_loss.scalar
    # last_loss is measured before each update, so step k reports the loss after k - 1 updates
    while state.step < steps:
        train_step(state, batch, cfg)
        last = state.last_loss.scalar
        if last < 0.01 * first:
            break
    return first, last, state.step


@pytest.mark.slow
@pytest.mark.parametrize("head", ["direct", "cascaded", "distribution", "heatmap_regression", "pwc"])
def test_c09_overfit(acceptance, head):
    first, last, steps = overfit(head)
    ok = last < 0.01 * first
    acceptance(9, f"overfit smoke test ({head})", ok,
               f"loss {first:.4g} -> {last:.4g} ({last / first:.2%}) after {steps} steps")
    assert ok


def test_c10_determinism(acceptance, tmp_path):
    argv = ["train", "--seed", "3", "--set", "data.synth_count=24", "--set", "train.max_steps=12",
            "--set", "train.batch_size=4", "--set", "train.val_interval=4", "--set", "model.head=pwc",
            "--set", "train.loss=hybrid+disc"]
    assert cli.main(argv + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(argv + ["--out", str(tmp_path / "b")]) == 0
    same = {name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
            for name in ("train_log.csv", "best.ckpt", "report.json")}
    # a different seed must change the run, or byte equality proves nothing
    assert cli.main(argv[:1] + ["--seed", "4"] + argv[3:] + ["--out", str(tmp_path / "c")]) == 0
    differs = (tmp_path / "a" / "best.ckpt").read_bytes() != (tmp_path / "c" / "best.ckpt").read_bytes()
    ok = all(same.values()) and differs
    acceptance(10, "determinism", ok, f"identical={same}, other seed differs={differs}")
    assert ok


def test_c11_data_fidelity(acceptance, tmp_path):
    rng = np.random.default_rng(11)
    pts_ok = True
    for _ in range(200):
        p = rng.uniform(-50, 2000, (68, 2))
        text = serialize_pts(p)
        back = parse_pts(text)
        pts_ok &= serialize_pts(back) == text
        pts_ok &= bool(np.all(np.abs(back.points - p) <= 5e-7 + 1e-12 * np.abs(p)))

    root = tmp_path / "standard"
    per_dir = {"afw": 337, "helen/trainset": 2000, "helen/testset": 330, "lfpw/trainset": 811,
               "lfpw/testset": 224, "300W/01_Indoor": 300, "300W/02_Outdoor": 300, "ibug": 135, "cofw": 507}
    for _, _, rel in STANDARD_LAYOUT:
        folder = root / rel
        folder.mkdir(parents=True)
        for i in range(per_dir[rel]):
            (folder / f"image_{i:04d}.png").touch()
            (folder / f"image_{i:04d}.pts").touch()
    manifest = scan_standard(root)
    clean = manifest.check()
    counts = {name: (manifest.counts().get((name, "train"), 0), manifest.counts().get((name, "val"), 0))
              for name in REFERENCE_COUNTS}
    counts_ok = clean.ok and counts == REFERENCE_COUNTS and counts["Helen"] == (2000, 330) and counts["COFW"] == (0, 507)

    (root / "cofw" / "image_0000.png").unlink()
    (root / "300W/01_Indoor/image_0000.png").unlink()
    short = scan_standard(root).check()
    reported = sorted(str(d) for d in short.discrepancies)
    disc_ok = reported == ["300-W Indoor val: expected 300, found 299", "300-W val: expected 600, found 599",
                           "COFW val: expected 507, found 506"]
    disc_ok &= any(line.startswith("DISCREPANCY COFW") for line in short.lines())

    ok = pts_ok and counts_ok and disc_ok
    acceptance(11, "data fidelity", ok, f"pts roundtrip={pts_ok}, table counts={counts_ok}, discrepancies={reported}")
    assert ok
