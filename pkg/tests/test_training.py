import json

import numpy as np
import pytest

from landmark_lab.autodiff.checkpoint import load_checkpoint
from landmark_lab.models import desk_spec
from landmark_lab.training import (
    HEAD_LOSSES,
    LOG_HEADER,
    BatchStream,
    NonFiniteLossError,
    TrainConfig,
    TrainConfigError,
    collate,
    early_stop,
    evaluate_nmse,
    examples_for,
    fit,
    load_model,
    new_state,
    predict_coordinates,
    train_step,
    validation_loss,
)

FAST = dict(batch_size=2, max_steps=4, val_interval=2, augment=False)


def test_config_validation():
    with pytest.raises(TrainConfigError):
        TrainConfig(head="direct", loss="pwc")
    with pytest.raises(TrainConfigError):
        TrainConfig(batch_size=1)
    with pytest.raises(TrainConfigError):
        TrainConfig(kl_direction="both")
    with pytest.raises(TrainConfigError):
        TrainConfig(beta=-1.0)
    cfg = TrainConfig(loss="hybrid+disc")
    assert cfg.adversarial and TrainConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("history, stop", [
    ([1.0] * 10, False),
    ([1.0] * 11, True),
    ([1.0, 0.9] + [0.95] * 10, True),
    ([1.0, 0.9] + [0.95] * 9, False),
    ([1.0] + [1.1] * 9 + [0.99], False),
    ([1.0, 0.5, 0.4] + [0.4] * 10, True),
])
def test_early_stop_on_constructed_histories(history, stop):
    assert early_stop(history, 10) is stop


def test_early_stop_small_patience():
    assert early_stop([3.0, 2.0, 2.5], 1)
    assert not early_stop([3.0, 2.0, 1.5], 1)
    with pytest.raises(ValueError):
        early_stop([1.0], 0)


def test_batch_stream_is_deterministic(faces):
    cfg = TrainConfig(batch_size=4, seed=3)
    a, b = BatchStream(faces, cfg), BatchStream(faces, cfg)
    for _ in range(5):
        x, y = a.next(), b.next()
        assert x.ids == y.ids and np.array_equal(x.images, y.images)
    other = BatchStream(faces, cfg.with_(seed=4)).next()
    assert other.ids != BatchStream(faces, cfg).next().ids


def test_batch_stream_covers_epoch(faces):
    stream = BatchStream(faces, TrainConfig(batch_size=4, augment=False))
    seen = sum((stream.next().ids for _ in range(3)), [])
    assert sorted(seen) == sorted(s.sample_id for s in faces)


def test_batch_stream_needs_enough_samples(faces):
    with pytest.raises(TrainConfigError):
        BatchStream(faces[:3], TrainConfig(batch_size=4))


def test_collate_target_shapes(faces):
    for head in HEAD_LOSSES:
        batch = collate(examples_for(faces[:3], TrainConfig(head=head, loss=HEAD_LOSSES[head][0])))
        assert batch.images.shape == (3, 64, 64, 3)
        if head in ("direct", "cascaded"):
            assert batch.targets.shape == (3, 10, 2)
        elif head == "pwc":
            assert batch.targets.shape == (3, 32, 32)
        elif head == "distribution":
            assert batch.targets.shape == (3, 32, 32, 10)
        else:
            # heatmap regression carries a trailing background channel
            assert batch.targets.shape == (3, 32, 32, 11)


def test_adversarial_schedule_updates(faces):
    cfg = TrainConfig(loss="hybrid+disc", batch_size=2)
    state = new_state(cfg, desk_spec("pwc"))
    det_ids = frozenset(id(p) for p in state.detector.parameters())
    disc_ids = frozenset(id(p) for p in state.discriminator.parameters())
    batch = BatchStream(faces, cfg).next()
    train_step(state, batch, cfg)
    assert state.last_updates == [("discriminator", disc_ids), ("detector", det_ids), ("detector", det_ids)]
    assert not det_ids & disc_ids
    assert state.optimizer.updates == 2 and state.disc_optimizer.updates == 1
    assert {"disc", "face", "pwc", "reg"} <= set(state.last_loss.breakdown)


def test_plain_schedule_single_update(faces):
    cfg = TrainConfig(loss="hybrid", batch_size=2)
    state = new_state(cfg, desk_spec("pwc"))
    train_step(state, BatchStream(faces, cfg).next(), cfg)
    assert [name for name, _ in state.last_updates] == ["detector"]
    assert state.discriminator is None and state.step == 1


def test_nonfinite_loss_writes_snapshot(faces, tmp_path):
    cfg = TrainConfig(batch_size=2)
    state = new_state(cfg, desk_spec("pwc"))
    batch = BatchStream(faces, cfg).next()
    batch.images[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteLossError) as err:
        train_step(state, batch, cfg, snapshot_dir=tmp_path)
    assert err.value.snapshot is not None and err.value.snapshot.exists()
    tensors, meta = load_checkpoint(err.value.snapshot)
    assert meta["step"] == 0 and "pwc" in meta["breakdown"]


def test_validation_loss_is_per_sample_mean(faces):
    cfg = TrainConfig(head="direct", loss="reg")
    state = new_state(cfg, desk_spec("direct"))
    ex = examples_for(faces[:5], cfg)
    whole = validation_loss(state.detector, ex, cfg, batch_size=5)
    split = validation_loss(state.detector, ex, cfg, batch_size=2)
    assert whole == pytest.approx(split, rel=1e-5)
    assert state.detector.training


def test_fit_writes_artifacts_and_is_deterministic(faces, tmp_path):
    cfg = TrainConfig(**FAST)
    a = fit(cfg, faces[:8], faces[8:], out_dir=tmp_path / "a")
    b = fit(cfg, faces[:8], faces[8:], out_dir=tmp_path / "b")
    for name in ("train_log.csv", "best.ckpt", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["steps"] == 4 and report["validations"] == 2
    assert report["best_step"] in (2, 4)
    assert a.log_lines[0] == LOG_HEADER
    assert sum(1 for line in a.log_lines if ",train," in line) == 4
    net, loaded_cfg, spec, meta = load_model(tmp_path / "a" / "best.ckpt")
    assert loaded_cfg == cfg and meta["scheme"] == "toy10"
    images = np.stack([e.image for e in examples_for(faces[8:], cfg)])
    assert np.array_equal(predict_coordinates(net, images, cfg), predict_coordinates(b.detector, images, cfg))


def test_fit_early_stop_reason(faces):
    cfg = TrainConfig(head="direct", loss="reg", lr=0.0, batch_size=2, max_steps=10, val_interval=1,
                      patience=2, augment=False)
    res = fit(cfg, faces[:8], faces[8:])
    # lr 0 still moves the batch-norm running statistics, so only the rule itself is fixed
    history = [v for _, v in res.report["val_history"]]
    assert res.report["stop_reason"] == "early_stop"
    assert early_stop(history, 2) and not early_stop(history[:-1], 2)
    assert res.report["steps"] == len(history) < 10
    assert res.report["best_loss"] == min(history)


def test_evaluate_nmse_uses_original_frame(faces):
    cfg = TrainConfig(head="direct", loss="reg")
    state = new_state(cfg, desk_spec("direct"))
    scores = evaluate_nmse(state.detector, faces[:3], cfg)
    assert [sid for sid, _ in scores] == [s.sample_id for s in faces[:3]]
    assert all(np.isfinite(v) and v > 0 for _, v in scores)
