import json
from collections import OrderedDict

import numpy as np
import pytest
import torch

from scl_lle.data import RngState, make_batch, scan_dataset
from scl_lle.enhancer import init_params
from scl_lle.trainer import (
    AdamState,
    ConfigError,
    NonFiniteLossError,
    TrainConfig,
    _adam_update,
    batch_loss,
    build_backends,
    load_checkpoint,
    save_checkpoint,
    train,
    train_step,
)

FAST = dict(image_size=16, augment=False, seg_backend="oracle", num_classes=3, width=8, iterations=4)


def _setup(corpus, **overrides):
    cfg = TrainConfig(**{**FAST, **overrides})
    records, bank = scan_dataset(corpus)
    batch = make_batch(records[:2], bank, RngState(cfg.seed), cfg)
    params = init_params(cfg.seed, cfg.width, cfg.iterations)
    return cfg, batch, params, AdamState.zeros_like(params), build_backends(cfg)


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.batch_size, cfg.max_epochs) == (1e-4, 2, 50)
    assert (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps) == (0.9, 0.999, 1e-8)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(max_epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 1.0})
    cfg = TrainConfig(seed=4, gamma_range=(2.0, 3.0))
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_adam_matches_torch_optim(rng):
    params = init_params(0, width=4, iterations=1, std=0.3)
    adam = AdamState.zeros_like(params)
    ref = OrderedDict((k, v.clone().requires_grad_(True)) for k, v in params.tensors.items())
    opt = torch.optim.Adam(ref.values(), lr=1e-3, betas=(0.9, 0.999), eps=1e-8)
    for _ in range(5):
        grads = OrderedDict((k, torch.from_numpy(rng.normal(size=v.shape)).float()) for k, v in params.tensors.items())
        params, adam = _adam_update(params, grads, adam, 1e-3)
        opt.zero_grad()
        for k, t in ref.items():
            t.grad = grads[k].clone()
        opt.step()
    for k in ref:
        assert torch.allclose(params.tensors[k], ref[k].detach(), atol=1e-7, rtol=1e-6)


def test_zero_weights_leave_params_unchanged(small_corpus):
    cfg, batch, params, adam, backends = _setup(small_corpus, w_c=0, w_sc=0, w_fr=0, w_cc=0)
    new, new_adam, report = train_step(params, adam, batch, backends, cfg)
    assert float(report.total) == 0.0
    assert all(torch.equal(params.tensors[k], new.tensors[k]) for k in params.names())
    assert new_adam.step == 1


def test_train_step_is_pure(small_corpus):
    cfg, batch, params, adam, backends = _setup(small_corpus)
    before = {k: v.clone() for k, v in params.tensors.items()}
    inputs = batch.inputs.clone()
    new, _, _ = train_step(params, adam, batch, backends, cfg)
    assert all(torch.equal(before[k], params.tensors[k]) for k in before)
    assert torch.equal(inputs, batch.inputs)
    assert any(not torch.equal(before[k], new.tensors[k]) for k in before)


def test_backends_stay_frozen(small_corpus):
    cfg, batch, params, adam, backends = _setup(small_corpus, seg_backend="tinycnn")
    feat, seg = backends.features.parameter_bytes(), backends.seg.parameter_bytes()
    for _ in range(100):
        params, adam, _ = train_step(params, adam, batch, backends, cfg)
    assert backends.features.parameter_bytes() == feat
    assert backends.seg.parameter_bytes() == seg


def test_single_batch_overfit(small_corpus):
    cfg, batch, params, adam, backends = _setup(small_corpus, width=32, iterations=8)
    totals = []
    for _ in range(200):
        params, adam, report = train_step(params, adam, batch, backends, cfg)
        totals.append(float(report.total))
    assert totals[-1] <= 0.5 * totals[0]


def test_batch_order_invariance(small_corpus):
    cfg, batch, params, _, backends = _setup(small_corpus, seg_backend="tinycnn")
    rep, _ = batch_loss(params, batch, backends, cfg.loss_config())
    flip = [1, 0]
    batch.inputs, batch.labels = batch.inputs[flip], batch.labels[flip]
    batch.positives, batch.negatives = batch.positives[flip], batch.negatives[flip]
    rep2, _ = batch_loss(params, batch, backends, cfg.loss_config())
    for k in rep.as_dict():
        assert abs(rep.as_dict()[k] - rep2.as_dict()[k]) <= 1e-6


def test_non_finite_loss_is_named(small_corpus):
    cfg, batch, params, adam, backends = _setup(small_corpus)
    batch.positives[0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError, match="l_c"):
        train_step(params, adam, batch, backends, cfg)


def test_checkpoint_roundtrip(tmp_path, small_corpus):
    cfg, batch, params, adam, backends = _setup(small_corpus)
    params, adam, _ = train_step(params, adam, batch, backends, cfg)
    save_checkpoint(tmp_path / "a.ckpt", params, adam, cfg, 1)
    p2, a2, c2, step = load_checkpoint(tmp_path / "a.ckpt")
    assert (c2, step, a2.step) == (cfg, 1, 1)
    save_checkpoint(tmp_path / "b.ckpt", p2, a2, c2, step)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def _log(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_train_is_deterministic(tmp_path, small_corpus):
    cfg = TrainConfig(**FAST, max_steps=6, seed=3)
    a = train(cfg, small_corpus, tmp_path / "a")
    b = train(cfg, small_corpus, tmp_path / "b")
    assert _log(tmp_path / "a" / "train_log.jsonl") == _log(tmp_path / "b" / "train_log.jsonl")
    assert a.read_bytes() == b.read_bytes()
    assert len(_log(tmp_path / "a" / "train_log.jsonl")) == 6


def test_resume_equivalence(tmp_path, small_corpus):
    cfg = TrainConfig(**FAST, max_steps=8, seed=1, augment_fraction=0.5, checkpoint_every=3)
    cfg = cfg.updated(augment=True)
    straight = train(cfg, small_corpus, tmp_path / "s")
    resumed = train(cfg, small_corpus, tmp_path / "r", resume=tmp_path / "s" / "step_0000003.ckpt")
    p1, _, _, _ = load_checkpoint(straight)
    p2, _, _, _ = load_checkpoint(resumed)
    for k in p1.names():
        assert float((p1.tensors[k] - p2.tensors[k]).abs().max()) <= 1e-6
    tail_s = _log(tmp_path / "s" / "train_log.jsonl")[3:]
    tail_r = _log(tmp_path / "r" / "train_log.jsonl")
    assert [r["step"] for r in tail_r] == list(range(4, 9))
    assert all(abs(x["total"] - y["total"]) <= 1e-6 for x, y in zip(tail_s, tail_r))
