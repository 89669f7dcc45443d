"""Per-layer bridge ablation: feature drift and loss change when one bridge is cut."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .errors import InputError, UndefinedReferenceError
from .flowmatch import make_flow_batch
from .model import HBridgeModel, latents_of


def nmse(a, b) -> float:
    """Squared-error energy of ``a - b`` relative to the energy of reference ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {a.shape} vs {b.shape}")
    energy = float((b * b).sum())
    if energy == 0.0:
        raise UndefinedReferenceError("reference features are identically zero")
    return float(((a - b) ** 2).sum()) / energy


@dataclass
class DriftRow:
    layer: int
    bridged: bool
    nmse: float
    loss_delta: float


@dataclass
class DriftReport:
    rows: list[DriftRow]
    n_samples: int
    intact_loss: float
    config: dict[str, Any] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "bridged", "nmse", "loss_delta"])
        for r in self.rows:
            w.writerow([r.layer, int(r.bridged), repr(r.nmse), repr(r.loss_delta)])
        return buf.getvalue()


@torch.no_grad()
def drift_profile(
    model: HBridgeModel,
    tokens,
    patterns,
    *,
    seed: int = 0,
    batch_size: int = 64,
) -> DriftReport:
    """Disconnect each aligned layer's bridge in turn and measure the damage.

    Noise and time draws are made once from ``seed`` and shared by the intact
    and every ablated pass. Drift is taken on the final latent-token hidden
    states: per sample sum((a-b)^2)/sum(b^2), averaged over samples.
    """
    tokens = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    if len(tokens) == 0:
        raise InputError("evaluation set is empty")
    x1 = latents_of(patterns, model.dtype)
    fb = make_flow_batch(x1, torch.Generator().manual_seed(seed))
    cache = model.encode(tokens)
    chunks = [slice(lo, lo + batch_size) for lo in range(0, len(tokens), batch_size)]

    def run(disconnect: tuple[int, ...]):
        hidden, sq = [], []
        for sl in chunks:
            v, _, h = model.forward_flow(cache.index(sl), fb.x_t[sl], fb.t[sl], disconnect)
            hidden.append(h.double())
            sq.append(((v - fb.v_target[sl]) ** 2).double().reshape(len(v), -1))
        err = torch.cat(sq)
        return torch.cat(hidden), float(err.mean())

    ref_h, ref_loss = run(())
    ref_energy = (ref_h**2).flatten(1).sum(1)
    if bool((ref_energy == 0).any()):
        raise UndefinedReferenceError("a reference sample has zero feature energy")
    bridged = set(model.plan.gen_layers)
    rows = []
    for layer in range(model.plan.aligned_count):
        h, loss = run((layer,))
        per_sample = ((h - ref_h) ** 2).flatten(1).sum(1) / ref_energy
        rows.append(DriftRow(layer, layer in bridged, float(per_sample.mean()), loss - ref_loss))
    return DriftReport(rows, len(tokens), ref_loss, model.cfg.to_dict())


def _svg(report: DriftReport) -> str:
    w, h, pad = 640, 360, 48
    xs = [r.layer for r in report.rows]
    series = [("nmse", "#1f77b4", [r.nmse for r in report.rows]), ("loss_delta", "#d62728", [r.loss_delta for r in report.rows])]
    allv = [v for _, _, vals in series for v in vals] + [0.0]
    lo, hi = min(allv), max(allv)
    if hi == lo:
        hi = lo + 1.0
    xmax = max(max(xs), 1)

    def px(x):
        return pad + (w - 2 * pad) * x / xmax

    def py(y):
        return h - pad - (h - 2 * pad) * (y - lo) / (hi - lo)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<line x1="{pad}" y1="{py(0):.2f}" x2="{w - pad}" y2="{py(0):.2f}" stroke="#888"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="#888"/>',
        f'<text x="{w / 2:.0f}" y="{h - 12}" text-anchor="middle" font-size="12">aligned layer</text>',
        f'<text x="{pad}" y="{pad - 8}" font-size="11">{hi:.4g}</text>',
        f'<text x="{pad}" y="{h - pad + 14}" font-size="11">{lo:.4g}</text>',
    ]
    for x in xs:
        out.append(f'<text x="{px(x):.2f}" y="{h - pad + 28}" text-anchor="middle" font-size="10">{x}</text>')
    for k, (name, color, vals) in enumerate(series):
        pts = " ".join(f"{px(x):.2f},{py(v):.2f}" for x, v in zip(xs, vals))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, v in zip(xs, vals):
            out.append(f'<circle cx="{px(x):.2f}" cy="{py(v):.2f}" r="3" fill="{color}"/>')
        out.append(f'<text x="{w - pad - 90}" y="{pad + 14 * k}" font-size="12" fill="{color}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(report: DriftReport, prefix: str | Path) -> tuple[Path, Path]:
    """Write ``<prefix>.csv`` and ``<prefix>.svg``; both are deterministic."""
    if report.n_samples == 0 or not report.rows:
        raise InputError("refusing to emit a report built from an empty evaluation set")
    prefix = Path(prefix)
    csv_path = prefix.with_name(prefix.name + ".csv")
    svg_path = prefix.with_name(prefix.name + ".svg")
    csv_path.write_text(report.to_csv(), encoding="utf-8")
    svg_path.write_text(_svg(report), encoding="utf-8")
    return csv_path, svg_path


def micro_config(seed: int = 0):
    """Two-layer experts where only aligned layer 1 is bridged and SRT is off,
    so the understanding cache is the generator's sole source of class information."""
    from .config import BridgeSpec, ExpertSpec, HBridgeConfig, TrainSpec

    return HBridgeConfig(
        und=ExpertSpec(n_layers=2, d_model=16, n_heads=2, d_ff=32, max_seq=8, vocab_size=16),
        gen=ExpertSpec(n_layers=2, d_model=16, n_heads=2, d_ff=32, max_seq=16),
        bridge=BridgeSpec(skip_front=1, skip_back=0),
        train=TrainSpec(learning_rate=3e-3, steps=150, batch_size=32, seed=seed, srt_enabled=False),
        d_feat=8,
        time_embed_dim=8,
    )


def micro_model(seed: int = 0, steps: int | None = None) -> HBridgeModel:
    """The micro-model above after a short bridged training run."""
    from .trainer import Trainer

    cfg = micro_config(seed)
    model = HBridgeModel(cfg)
    Trainer(model).fit(cfg.train.steps if steps is None else steps)
    return model
