"""Bridge training loop: flow matching + SRT loss, gradient accumulation,
JSONL metrics."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .config import HBridgeConfig
from .data import Dataset, reference_renders, sample_dataset, ALL_TUPLES, caption_tokens
from .errors import DivergenceError, FrozenTensorUpdateError
from .flowmatch import FlowBatch, fm_loss, make_flow_batch
from .layers import check_finite
from .model import HBridgeModel, latents_of
from .optim import AdamW
from .srt import srt_loss, target_features

BETAS = (0.9, 0.999)
EPS = 1e-8
WEIGHT_DECAY = 0.01


@dataclass
class TrainBatch:
    tokens: torch.Tensor  # (B, 6) long
    x1: torch.Tensor  # (B, 16, 48)
    x0: torch.Tensor | None = None
    t: torch.Tensor | None = None


def task_pool() -> Dataset:
    """The 128 reference (caption, pattern) pairs, used when no dataset file is given."""
    tokens = np.array([caption_tokens(*a) for a in ALL_TUPLES], dtype=np.int64)
    return Dataset(tokens, reference_renders().astype(np.float32))


class Trainer:
    """Owns the optimizer and the random stream for one training run.

    ``unconditional=True`` disconnects every bridge, which is how the
    generator is pretrained without an understanding cache.
    """

    def __init__(
        self,
        model: HBridgeModel,
        cfg: HBridgeConfig | None = None,
        data: Dataset | None = None,
        *,
        unconditional: bool = False,
        generator: torch.Generator | None = None,
    ):
        self.model = model
        self.cfg = cfg or model.cfg
        self.data = data if data is not None else task_pool()
        if len(self.data) == 0:
            raise ValueError("training data is empty")
        self.unconditional = unconditional
        self._latents = latents_of(self.data.patterns, model.dtype)
        self._tokens = torch.as_tensor(self.data.tokens, dtype=torch.long)
        self.generator = generator or torch.Generator().manual_seed(self.cfg.train.seed)
        self.optimizer = AdamW(
            list(model.trainable().values()),
            lr=self.cfg.train.learning_rate,
            betas=BETAS,
            eps=EPS,
            weight_decay=WEIGHT_DECAY,
        )
        self.step = 0
        self._micro = 0
        self._pending: list[dict[str, float]] = []

    @property
    def disconnect(self) -> tuple[int, ...]:
        return self.model.plan.gen_layers if self.unconditional else ()

    def sample_batch(self, batch_size: int | None = None) -> TrainBatch:
        n = batch_size or self.cfg.train.batch_size
        idx = torch.randint(0, len(self._tokens), (n,), generator=self.generator)
        return TrainBatch(self._tokens[idx], self._latents[idx])

    def losses(self, batch: TrainBatch) -> tuple[torch.Tensor, dict[str, torch.Tensor], FlowBatch]:
        """Total loss and its parts for one micro-batch (no backward)."""
        model = self.model
        fb = make_flow_batch(batch.x1, self.generator, t=batch.t, x0=batch.x0)
        cache = None if self.unconditional else model.encode(batch.tokens)
        velocity, srt_out, _ = model.forward_flow(cache, fb.x_t, fb.t, self.disconnect)
        parts = {"fm_loss": fm_loss(velocity, fb.v_target)}
        total = parts["fm_loss"]
        if self.cfg.train.srt_enabled and model.srt is not None:
            target = target_features(model.vit, batch.x1, model.srt.n_srt)
            parts["srt_loss"] = srt_loss(model.srt, srt_out, target)
            total = total + parts["srt_loss"]
        return total, parts, fb

    def train_step(self, batch: TrainBatch | None = None) -> dict[str, float] | None:
        """Accumulate one micro-batch; returns a metrics record when an update is applied."""
        if batch is None:
            batch = self.sample_batch()
        total, parts, _ = self.losses(batch)
        if not check_finite(total):
            raise DivergenceError(self.step)
        (total / self.cfg.train.grad_accum).backward()
        rec = {k: v.item() for k, v in parts.items()}
        rec["total"] = total.item()
        self._pending.append(rec)
        self._micro += 1
        if self._micro < self.cfg.train.grad_accum:
            return None
        self._check_frozen_grads()
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)
        self._micro = 0
        self.step += 1
        out: dict[str, float] = {"step": self.step}
        for key in self._pending[0]:
            out[key] = float(np.mean([r[key] for r in self._pending]))
        self._pending = []
        return out

    def _check_frozen_grads(self) -> None:
        for name, p in self.model.frozen().items():
            if p.grad is not None:
                raise FrozenTensorUpdateError(f"frozen tensor {name} received a gradient")

    def fit(
        self,
        steps: int | None = None,
        log_path: str | Path | None = None,
        callback: Callable[[dict], None] | None = None,
    ) -> list[dict[str, float]]:
        steps = self.cfg.train.steps if steps is None else steps
        log = open(log_path, "a", encoding="utf-8") if log_path else None
        history = []
        try:
            t0 = time.perf_counter()
            while len(history) < steps:
                rec = self.train_step()
                if rec is None:
                    continue
                history.append(rec)
                if log is not None:
                    line = dict(rec, wall=round(time.perf_counter() - t0, 4))
                    log.write(json.dumps(line, sort_keys=True) + "\n")
                if callback is not None:
                    callback(rec)
        finally:
            if log is not None:
                log.close()
        return history


def window_mean(history: list[dict], key: str, end: int, width: int) -> float:
    """Mean of ``key`` over the ``width`` records ending at position ``end`` (exclusive)."""
    lo = max(0, end - width)
    return float(np.mean([r[key] for r in history[lo:end]]))


def decode_accuracy(
    model: HBridgeModel, n: int, *, steps: int = 32, seed: int = 0, batch: int = 64
) -> float:
    """Fraction of sampled captions whose generated pattern decodes to the captioned tuple."""
    from .data import decode_batch, tuple_index

    ds = sample_dataset(n, seed)
    attrs = ds.attributes()
    want = np.array([tuple_index(*a) for a in attrs])
    g = torch.Generator().manual_seed(seed)
    got = []
    for lo in range(0, n, batch):
        pats = model.sample_patterns(ds.tokens[lo : lo + batch], steps, g)
        got.append(decode_batch(pats))
    return float(np.mean(np.concatenate(got) == want)) if n else 0.0
