import json

import numpy as np
import pytest
import torch
from conftest import tiny_net

from cdgan.ct_ingest import SliceSet, load_slices
from cdgan.errors import ConfigurationError, NumericError
from cdgan.networks import build_cdgan
from cdgan.trainer import (
    EpochSampler,
    TrainConfig,
    checkpoint_path,
    init_state,
    load_state,
    lr_at,
    make_batch,
    train,
    train_step,
)


def _fake_slices(n=12, size=16):
    rng = np.random.default_rng(0)
    return SliceSet(
        pixels=rng.uniform(-1, 1, size=(n, size, size)).astype(np.float32),
        labels=np.arange(n) % 3,
        subject_ids=np.array([f"s{i}" for i in range(n)]),
        slice_indices=np.zeros(n, dtype=int),
    )


def test_defaults():
    c = TrainConfig()
    assert (c.lr, c.beta1, c.beta2, c.batch_size, c.d_steps) == (1e-4, 0.5, 0.999, 8, 1)


@pytest.mark.parametrize("kw", [dict(d_steps=0), dict(batch_size=0), dict(target_codes="all"), dict(lambda_cls=-1.0)])
def test_config_validation(kw):
    with pytest.raises((ConfigurationError, ValueError)):
        TrainConfig(**kw).validate()


def test_config_unknown_field():
    with pytest.raises(ConfigurationError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})


def test_lr_schedule():
    c = TrainConfig(lr=1e-4, lr_decay=0.1, lr_decay_period=100)
    assert lr_at(0, c) == 1e-4
    assert lr_at(99, c) == 1e-4
    assert lr_at(100, c) == pytest.approx(1e-5)
    assert lr_at(250, c) == pytest.approx(1e-6)


def test_sampler_covers_each_slice_once_per_epoch():
    s = EpochSampler(24, seed=3)
    seen = np.concatenate([s.next_indices(8) for _ in range(3)])
    assert sorted(seen.tolist()) == list(range(24))


def test_sampler_state_round_trip():
    a = EpochSampler(10, seed=1)
    a.next_indices(4)
    b = EpochSampler(10, seed=99)
    b.set_state(a.get_state(), a.perm.copy())
    for _ in range(5):
        np.testing.assert_array_equal(a.next_indices(4), b.next_indices(4))


def test_enumerate_batch_layout():
    slices = _fake_slices()
    cfg = TrainConfig(batch_size=4)
    batch = make_batch(slices, EpochSampler(len(slices), 0), cfg)
    assert batch.x.shape == (4, 1, 16, 16)
    assert batch.target_codes.shape == (12, 3)
    assert batch.gen_source.tolist() == [0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]
    assert batch.target_labels.tolist() == [0, 1, 2] * 4


def test_sample_mode_batch_layout():
    slices = _fake_slices()
    batch = make_batch(slices, EpochSampler(len(slices), 0), TrainConfig(batch_size=4, target_codes="sample"))
    assert batch.target_codes.shape == (4, 3)
    assert torch.all(batch.target_codes.sum(1) == 1)


def test_one_step_updates_both_players_and_logs_losses():
    slices = _fake_slices()
    cfg = TrainConfig(batch_size=4, lr=1e-3)
    state = init_state(build_cdgan(tiny_net(), seed=0), len(slices), cfg)
    before = {k: v.clone() for k, v in state.bundle.named_arrays().items()}
    _, values, extras = train_step(state, make_batch(slices, state.sampler, cfg), cfg)
    after = state.bundle.named_arrays()
    for prefix in ("G_enc.", "G_dec.", "D."):
        assert any(not torch.equal(before[k], after[k]) for k in before if k.startswith(prefix)), prefix
    assert state.iteration == 1
    assert values.d_total == pytest.approx(values.adv_d + values.cls_real + values.cls_fake_d, rel=1e-6)
    assert values.g_total == pytest.approx(values.adv_g + values.cls_fake, rel=1e-6)
    assert 0.0 <= extras["acc_real"] <= 1.0
    assert extras["lr"] == 1e-3


def test_zero_lr_leaves_weights_alone():
    slices = _fake_slices()
    cfg = TrainConfig(batch_size=4, lr=0.0)
    state = init_state(build_cdgan(tiny_net(), seed=0), len(slices), cfg)
    before = {k: v.clone() for k, v in state.bundle.named_arrays().items() if "running" not in k and "num_batches" not in k}
    train_step(state, make_batch(slices, state.sampler, cfg), cfg)
    after = state.bundle.named_arrays()
    assert all(torch.equal(before[k], after[k]) for k in before)


def _train(tiny_dataset, out, iterations, resume=None, **kw):
    root, train_m, test_m = tiny_dataset
    cfg = TrainConfig(iterations=iterations, batch_size=4, checkpoint_interval=3, seed=5, **kw)
    return train(cfg, train_m, out, eval_manifest=test_m, net_config=tiny_net(), resume=resume)


def test_train_writes_metrics_and_checkpoints(tiny_dataset, tmp_path):
    res = _train(tiny_dataset, tmp_path / "run", 7)
    records = [json.loads(line) for line in res.metrics_path.read_text().splitlines()]
    steps = [r for r in records if r["type"] == "step"]
    evals = [r for r in records if r["type"] == "eval"]
    assert [r["iteration"] for r in steps] == list(range(1, 8))
    assert [r["iteration"] for r in evals] == [3, 6, 7]
    assert set(steps[0]) >= {"adv_d", "adv_g", "cls_real", "cls_fake", "d_total", "g_total", "lr", "model"}
    assert np.sum(evals[0]["confusion"]) == len(load_slices(tiny_dataset[2]))
    assert [p.name for p in res.checkpoints] == ["iter_0000003.ckpt", "iter_0000006.ckpt", "iter_0000007.ckpt"]


def test_resume_matches_uninterrupted(tiny_dataset, tmp_path):
    full = _train(tiny_dataset, tmp_path / "full", 6)
    _train(tiny_dataset, tmp_path / "part", 3)
    part = _train(tiny_dataset, tmp_path / "part", 6, resume=checkpoint_path(tmp_path / "part", 3))
    assert full.metrics_path.read_bytes() == part.metrics_path.read_bytes()
    a, b = full.state.bundle.named_arrays(), part.state.bundle.named_arrays()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_load_state_restores_optimizer_moments(tiny_dataset, tmp_path):
    res = _train(tiny_dataset, tmp_path / "r", 3)
    state, cfg, _ = load_state(res.final_checkpoint)
    assert state.iteration == 3
    for name in ("G", "D"):
        orig = res.state.optimizers[name].state_dict()["state"]
        back = state.optimizers[name].state_dict()["state"]
        assert orig.keys() == back.keys()
        for pid in orig:
            assert torch.equal(orig[pid]["exp_avg"], back[pid]["exp_avg"])
            assert torch.equal(orig[pid]["exp_avg_sq"], back[pid]["exp_avg_sq"])


def test_nan_batch_raises_with_snapshot(tmp_path):
    from cdgan.ct_ingest import DatasetManifest, HUVolume, ManifestEntry, PhaseLabel, write_volume
    vol = HUVolume(np.zeros((4, 16, 16), np.int16), (5, 1, 1), "s", PhaseLabel.NON_CONTRAST)
    write_volume(vol, tmp_path / "v.json")
    m = DatasetManifest([ManifestEntry("v.json", "s", PhaseLabel.NON_CONTRAST)], "train", root=tmp_path)
    cfg = TrainConfig(iterations=2, batch_size=2, lr=float("inf"))
    with pytest.raises(NumericError) as info:
        train(cfg, m, tmp_path / "out", net_config=tiny_net())
    assert info.value.snapshot_path is not None and info.value.snapshot_path.exists()
