"""Run orchestration shared by the CLI and the acceptance suite: pretraining,
bridged training from a checkpoint, validation loss, ablation sweeps."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch

from .checkpoint import Checkpoint, check_experts_match
from .config import HBridgeConfig
from .data import Dataset, sample_dataset
from .flowmatch import fm_loss, make_flow_batch
from .model import HBridgeModel, latents_of
from .trainer import Trainer, task_pool, window_mean
from .understanding import und_pretrain

VAL_SEED = 10_007


def build_model(cfg: HBridgeConfig, init: Checkpoint | None = None, dtype=torch.float32) -> HBridgeModel:
    """Fresh model; tensors present in ``init`` with matching names and shapes are copied in."""
    model = HBridgeModel(cfg)
    if init is not None:
        check_experts_match(init, cfg)
        init.load_into(model, strict=False)
    return model.to(dtype)


def pretrain_und(model: HBridgeModel, data: Dataset | None, steps: int, lr: float, seed: int) -> list[dict]:
    data = data if data is not None else task_pool()
    for p in model.und.parameters():
        p.requires_grad_(True)
    try:
        losses = und_pretrain(
            model.und, data.tokens, steps, seed=seed, lr=lr, batch_size=model.cfg.train.batch_size
        )
    finally:
        for p in model.und.parameters():
            p.requires_grad_(False)
    return [{"step": i + 1, "lm_loss": v} for i, v in enumerate(losses)]


def pretrain_gen(model: HBridgeModel, data: Dataset | None, steps: int, log_path=None) -> list[dict]:
    """Unconditional flow matching: every bridge disconnected, no understanding cache."""
    trainer = Trainer(model, data=data, unconditional=True)
    return trainer.fit(steps, log_path)


@torch.no_grad()
def validation_fm_loss(model: HBridgeModel, n: int = 256, seed: int = VAL_SEED, disconnect=()) -> float:
    """Flow-matching loss on a fixed caption/noise/time draw, so runs are comparable."""
    ds = sample_dataset(n, seed)
    x1 = latents_of(ds.patterns, model.dtype)
    fb = make_flow_batch(x1, torch.Generator().manual_seed(seed))
    cache = model.encode(ds.tokens)
    v, _, _ = model.forward_flow(cache, fb.x_t, fb.t, disconnect)
    return float(fm_loss(v, fb.v_target))


@dataclass
class SweepPoint:
    name: str
    cfg: HBridgeConfig


def sweep_grid(base: HBridgeConfig, skips=(0, 1, 2)) -> list[SweepPoint]:
    """M=N over ``skips`` plus full decoupling, crossed with SRT on/off and deep/shallow fusion.

    The decoupled model has no bridge, so fusion mode is irrelevant there and
    it appears once per SRT setting.
    """
    aligned = base.und.n_layers
    points = []
    for srt in (True, False):
        for fusion in ("deep", "shallow"):
            for k in skips:
                if 2 * k >= aligned:
                    continue
                cfg = base.replace(
                    bridge=dict(skip_front=k, skip_back=k, fusion_mode=fusion, decoupled=False),
                    train=dict(srt_enabled=srt),
                )
                points.append(SweepPoint(f"mn{k}_{fusion}_{'srt' if srt else 'nosrt'}", cfg))
        front = aligned // 2
        cfg = base.replace(
            bridge=dict(skip_front=front, skip_back=aligned - front, fusion_mode="deep", decoupled=True),
            train=dict(srt_enabled=srt),
        )
        points.append(SweepPoint(f"decoupled_{'srt' if srt else 'nosrt'}", cfg))
    return points


def run_training(cfg: HBridgeConfig, init: Checkpoint | None, data: Dataset | None, log_path=None):
    model = build_model(cfg, init)
    trainer = Trainer(model, data=data)
    history = trainer.fit(cfg.train.steps, log_path)
    return model, trainer, history


def summarize(history: list[dict], key: str = "fm_loss", frac: float = 0.1) -> float:
    width = max(1, int(len(history) * frac))
    return window_mean(history, key, len(history), width) if history else float("nan")


SWEEP_FIELDS = [
    "run",
    "skip_front",
    "skip_back",
    "fusion_mode",
    "srt",
    "decoupled",
    "n_bridged",
    "train_fm_loss",
    "val_fm_loss",
    "baseline_val_fm_loss",
    "below_baseline",
]


def run_sweep(base: HBridgeConfig, out_dir: Path, init: Checkpoint | None = None, data: Dataset | None = None):
    """Train every grid point; returns CSV rows (dicts keyed by SWEEP_FIELDS)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    results = {}
    for point in sweep_grid(base):
        log = out_dir / f"{point.name}.jsonl"
        log.unlink(missing_ok=True)
        model, _, history = run_training(point.cfg, init, data, log)
        results[point.name] = (point, summarize(history), validation_fm_loss(model))
    rows = []
    for name, (point, train_fm, val_fm) in results.items():
        b = point.cfg.bridge
        srt = point.cfg.train.srt_enabled
        baseline = results[f"decoupled_{'srt' if srt else 'nosrt'}"][2]
        rows.append(
            {
                "run": name,
                "skip_front": b.skip_front,
                "skip_back": b.skip_back,
                "fusion_mode": b.fusion_mode,
                "srt": int(srt),
                "decoupled": int(b.decoupled),
                "n_bridged": len(point.cfg.plan.bridged),
                "train_fm_loss": train_fm,
                "val_fm_loss": val_fm,
                "baseline_val_fm_loss": baseline,
                "below_baseline": int(val_fm < baseline) if not b.decoupled else "",
            }
        )
    return rows


def mean_fm_at(history: list[dict], fraction: float, width_frac: float = 0.1) -> float:
    """Mean fm_loss over the window of records ending at ``fraction`` of the run."""
    end = max(1, int(round(len(history) * fraction)))
    return window_mean(history, "fm_loss", end, max(1, int(len(history) * width_frac)))


def init_trend(base: HBridgeConfig, seeds, pretrain_steps: int = 300, budget: int | None = None):
    """Bridged training from an unconditional generator pretrain vs. from scratch.

    Returns one record per seed with the mean fm_loss at 25% and 50% of the
    budget for both starts.
    """
    budget = base.train.steps if budget is None else budget
    out = []
    for seed in seeds:
        cfg = base.replace(train=dict(seed=seed, steps=budget))
        pre = HBridgeModel(cfg)
        pretrain_gen(pre, None, pretrain_steps)
        init = Checkpoint.from_model(pre)
        _, _, warm = run_training(cfg, init, None)
        _, _, cold = run_training(cfg, None, None)
        rec = {"seed": seed}
        for frac in (0.25, 0.5):
            rec[f"pretrained@{frac}"] = mean_fm_at(warm, frac)
            rec[f"scratch@{frac}"] = mean_fm_at(cold, frac)
        rec["pretrained_wins"] = all(rec[f"pretrained@{f}"] < rec[f"scratch@{f}"] for f in (0.25, 0.5))
        out.append(rec)
    return out
