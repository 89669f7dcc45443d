import json

import pytest
import torch

from hbridge.config import tiny_config
from hbridge.errors import FrozenTensorUpdateError
from hbridge.gradcheck import finite_diff_check
from hbridge.model import ROLES, HBridgeModel, role_of
from hbridge.optim import AdamW
from hbridge.trainer import TrainBatch, Trainer, task_pool


def _fixed_batch(model, n, seed=0):
    g = torch.Generator().manual_seed(seed)
    pool = task_pool()
    idx = torch.randint(0, 128, (n,), generator=g)
    from hbridge.model import latents_of

    x1 = latents_of(pool.patterns[idx.numpy()], model.dtype)
    return TrainBatch(
        torch.as_tensor(pool.tokens[idx.numpy()]),
        x1,
        x0=torch.randn(x1.shape, generator=g, dtype=model.dtype),
        t=torch.rand(n, generator=g, dtype=model.dtype),
    )


def test_srt_disabled_total_is_fm_loss():
    cfg = tiny_config(train=dict(srt_enabled=False))
    m = HBridgeModel(cfg)
    assert m.srt is None
    rec = Trainer(m).train_step()
    assert set(rec) == {"step", "fm_loss", "total"}
    assert rec["total"] == rec["fm_loss"]


def test_srt_enabled_total_is_sum(cfg):
    rec = Trainer(HBridgeModel(cfg)).train_step()
    assert rec["total"] == pytest.approx(rec["fm_loss"] + rec["srt_loss"], rel=1e-6)


def test_grad_accumulation_matches_big_batch():
    base = tiny_config(train=dict(batch_size=4, grad_accum=1))
    big = HBridgeModel(base).double()
    acc = HBridgeModel(base.replace(train=dict(batch_size=2, grad_accum=2))).double()
    batch = _fixed_batch(big, 4)
    tb = Trainer(big)
    tb.train_step(batch)
    ta = Trainer(acc)
    halves = [TrainBatch(batch.tokens[s], batch.x1[s], batch.x0[s], batch.t[s]) for s in (slice(0, 2), slice(2, 4))]
    assert ta.train_step(halves[0]) is None
    assert ta.train_step(halves[1])["step"] == 1
    for (n, p), q in zip(big.trainable().items(), acc.trainable().values()):
        assert torch.allclose(p, q, rtol=0, atol=1e-10), n


def test_zero_learning_rate_freezes_weights_but_moves_moments(cfg):
    m = HBridgeModel(cfg.replace(train=dict(learning_rate=0.0)))
    before = {n: p.clone() for n, p in m.named_parameters()}
    tr = Trainer(m)
    tr.train_step()
    assert all(torch.equal(before[n], p) for n, p in m.named_parameters())
    moments = [st["exp_avg"] for st in tr.optimizer.state.values()]
    assert moments and any(torch.count_nonzero(x) for x in moments)


def test_frozen_tensors_untouched_by_training(cfg):
    m = HBridgeModel(cfg)
    frozen = {n: p.clone() for n, p in m.frozen().items()}
    assert any(n.startswith("und.") for n in frozen) and any(n.startswith("vit.") for n in frozen)
    Trainer(m).fit(5)
    for n, p in m.frozen().items():
        assert p.detach().numpy().tobytes() == frozen[n].numpy().tobytes(), n


def test_optimizer_rejects_frozen_tensors():
    p = torch.nn.Parameter(torch.ones(2), requires_grad=False)
    with pytest.raises(FrozenTensorUpdateError):
        AdamW([p])
    q = torch.nn.Parameter(torch.ones(2))
    opt = AdamW([q])
    q.requires_grad_(False)
    with pytest.raises(FrozenTensorUpdateError):
        opt.step()


def test_frozen_gradient_is_refused(cfg):
    m = HBridgeModel(cfg)
    tr = Trainer(m)
    p = next(iter(m.und.parameters()))
    p.grad = torch.zeros_like(p)
    with pytest.raises(FrozenTensorUpdateError):
        tr.train_step()


def test_adamw_first_step_matches_hand_computation():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0], dtype=torch.float64))
    opt = AdamW([p], lr=0.1, weight_decay=0.01)
    p.grad = torch.tensor([0.5, -4.0], dtype=torch.float64)
    opt.step()
    # bias-corrected first step moves each weight by lr*sign(g) (up to eps), after decay
    want = torch.tensor([1.0 * (1 - 0.001) - 0.1, -2.0 * (1 - 0.001) + 0.1], dtype=torch.float64)
    assert torch.allclose(p.detach(), want, atol=1e-7)


def test_every_trainable_role_gets_gradient(cfg):
    m = HBridgeModel(cfg)
    tr = Trainer(m)
    total, _, _ = tr.losses(tr.sample_batch())
    total.backward()
    seen = {}
    for n, p in m.trainable().items():
        g = 0.0 if p.grad is None else float(p.grad.abs().sum())
        seen[role_of(n)] = seen.get(role_of(n), 0.0) + g
    assert set(seen) == set(ROLES)
    assert all(v > 0 for v in seen.values())


def test_training_is_deterministic(cfg, tmp_path):
    logs = []
    for i in range(2):
        path = tmp_path / f"m{i}.jsonl"
        Trainer(HBridgeModel(cfg)).fit(4, path)
        logs.append([{k: v for k, v in json.loads(l).items() if k != "wall"} for l in path.read_text().splitlines()])
    assert logs[0] == logs[1] and len(logs[0]) == 4


def test_gradcheck_quadratic_oracle():
    theta = torch.tensor([3.0], dtype=torch.float64, requires_grad=True)
    res = finite_diff_check(lambda: (theta**2).sum(), {"theta": theta}, coords_per_role=1)
    (c,) = res.coords
    assert c.analytic == pytest.approx(6.0) and c.rel_error <= 1e-9


def test_gradcheck_skips_frozen_and_handles_empty():
    a = torch.ones(2, dtype=torch.float64, requires_grad=True)
    b = torch.ones(2, dtype=torch.float64)
    res = finite_diff_check(lambda: (a * b).sum(), {"a": a, "b": b}, coords_per_role=3)
    assert res.skipped == ["b"] and len(res.coords) == 3
    empty = finite_diff_check(lambda: b.sum(), {"b": b})
    assert empty.coords == [] and empty.max_rel_error == 0.0


def test_model_gradcheck_tiny(model64):
    tr = Trainer(model64)
    batch = _fixed_batch(model64, 2)
    res = finite_diff_check(
        lambda: tr.losses(batch)[0], dict(model64.named_parameters()), coords_per_role=16, role_of=role_of
    )
    assert len(res.coords) >= 64
    assert set(res.by_role()) == set(ROLES)
    assert res.max_rel_error <= 1e-3
