"""Command-line entry point.

Exit codes: 0 success, 1 gradient check failed, 2 usage error,
3 numeric divergence, 4 I/O or format error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch

from . import data as D
from .analysis import drift_profile, emit_report
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import HBridgeConfig, small_config, task_config, tiny_config
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetFormatError,
    DivergenceError,
    HBridgeError,
    InputError,
)
from .gradcheck import finite_diff_check
from .model import ROLES, role_of
from .runs import (
    SWEEP_FIELDS,
    build_model,
    pretrain_gen,
    pretrain_und,
    run_sweep,
    run_training,
    validation_fm_loss,
)
from .trainer import Trainer

EXIT_OK, EXIT_GRADCHECK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4
GRADCHECK_TOL = 1e-3
LOCK_NAME = ".hbridge.lock"


class UsageError(Exception):
    pass


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@contextmanager
def _locked(directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OSError(f"{directory} is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _write_manifest(path: Path, **fields) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(fields, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    tmp.replace(path)


def _load_config(args) -> HBridgeConfig:
    if getattr(args, "preset", None) and args.config:
        raise UsageError("--config and --preset are mutually exclusive")
    if args.config:
        cfg = HBridgeConfig.load(args.config)
    else:
        cfg = {"tiny": tiny_config, "small": small_config, "task": task_config}[getattr(args, "preset", None) or "tiny"]()
    train, bridge = {}, {}
    for flag, key in (("steps", "steps"), ("lr", "learning_rate"), ("seed", "seed"), ("batch_size", "batch_size")):
        if getattr(args, flag, None) is not None:
            train[key] = getattr(args, flag)
    if getattr(args, "srt", None) is not None:
        train["srt_enabled"] = args.srt
    for flag, key in (("skip_front", "skip_front"), ("skip_back", "skip_back"), ("fusion", "fusion_mode")):
        if getattr(args, flag, None) is not None:
            bridge[key] = getattr(args, flag)
    if getattr(args, "decoupled", False):
        bridge["decoupled"] = True
    if train or bridge:
        cfg = cfg.replace(**({"train": train} if train else {}), **({"bridge": bridge} if bridge else {}))
    return cfg


def _load_data(path) -> D.Dataset | None:
    if path is None:
        return None
    ds = D.read_dataset(path)
    if len(ds) == 0:
        raise InputError(f"{path} holds no records")
    return ds


def _plan_echo(cfg: HBridgeConfig) -> dict:
    plan = cfg.plan
    return {
        "projector_depth": plan.projector_depth,
        "aligned_count": plan.aligned_count,
        "bridged": [list(p) for p in plan.bridged],
    }


def _common_manifest(args, cfg: HBridgeConfig | None, out: Path, started: str) -> dict:
    return {
        "command": args.command,
        "argv": sys.argv[1:],
        "config_path": getattr(args, "config", None),
        "config_hash": cfg.digest() if cfg else None,
        "output": str(out),
        "seed": cfg.train.seed if cfg else getattr(args, "seed", None),
        "started": started,
    }


# -- commands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    started = _now()
    with _locked(out.parent if str(out.parent) else Path(".")):
        D.make_dataset(args.n, args.seed, out)
        man = _common_manifest(args, None, out, started)
        man.update(seed=args.seed, n=args.n, finished=_now(), artifacts=[out.name])
        _write_manifest(out.with_name(out.name + ".manifest.json"), **man)
    print(f"wrote {args.n} records to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    started = _now()
    data = _load_data(args.data)
    init = load_checkpoint(args.init_from) if args.init_from else None
    with _locked(out):
        model = build_model(cfg, init)
        log = out / "metrics.jsonl"
        log.unlink(missing_ok=True)
        if args.target == "und":
            history = pretrain_und(model, data, cfg.train.steps, cfg.train.learning_rate, cfg.train.seed)
            with open(log, "w", encoding="utf-8") as fh:
                for rec in history:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
        else:
            history = pretrain_gen(model, data, cfg.train.steps, log)
        save_checkpoint(out / "checkpoint.hbrd", Checkpoint.from_model(model, meta={"pretrain": args.target}))
        (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")
        man = _common_manifest(args, cfg, out, started)
        man.update(
            target=args.target,
            steps=len(history),
            finished=_now(),
            artifacts=["checkpoint.hbrd", "config.json", "metrics.jsonl"],
        )
        _write_manifest(out / "manifest.json", **man)
    key = "lm_loss" if args.target == "und" else "fm_loss"
    if history:
        print(f"{key}: {history[0][key]:.4f} -> {history[-1][key]:.4f} over {len(history)} steps")
    else:
        print("0 steps: checkpoint holds the initial weights")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    started = _now()
    data = _load_data(args.data)
    init = load_checkpoint(args.init_from) if args.init_from else None
    with _locked(out):
        log = out / "metrics.jsonl"
        log.unlink(missing_ok=True)
        model, trainer, history = run_training(cfg, init, data, log)
        save_checkpoint(out / "checkpoint.hbrd", Checkpoint.from_model(model, trainer))
        (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")
        val = validation_fm_loss(model)
        man = _common_manifest(args, cfg, out, started)
        man.update(
            init_from=args.init_from,
            plan=_plan_echo(cfg),
            steps=len(history),
            val_fm_loss=val,
            finished=_now(),
            artifacts=["checkpoint.hbrd", "config.json", "metrics.jsonl"],
        )
        _write_manifest(out / "manifest.json", **man)
    if history:
        print(f"fm_loss {history[0]['fm_loss']:.4f} -> {history[-1]['fm_loss']:.4f}; validation {val:.4f}")
    return EXIT_OK


def _parse_caption(text: str) -> tuple[int, int, int, int]:
    parts = text.split()
    if len(parts) != 4:
        raise UsageError(f"caption must be four integers 'shape color quadrant size', got {text!r}")
    try:
        attrs = tuple(int(p) for p in parts)
        D.caption_tokens(*attrs)
    except (ValueError, InputError) as exc:
        raise UsageError(f"bad caption {text!r}: {exc}") from None
    return attrs  # type: ignore[return-value]


def _write_ppm(path: Path, pattern: np.ndarray, scale: int = 8) -> None:
    img = np.clip((pattern + 1.0) * 127.5, 0, 255).round().astype(np.uint8)
    img = img.repeat(scale, axis=0).repeat(scale, axis=1)
    h, w, _ = img.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def cmd_sample(args) -> int:
    attrs = _parse_caption(args.caption)
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    ckpt = load_checkpoint(args.checkpoint)
    model = build_model(ckpt.config)
    ckpt.load_into(model)
    out = Path(args.out)
    started = _now()
    tokens = np.array([D.caption_tokens(*attrs)])
    with _locked(out):
        pattern = model.sample_patterns(tokens, args.steps, torch.Generator().manual_seed(args.seed))[0]
        D.write_dataset(D.Dataset(tokens, pattern[None].astype(np.float32)), out / "sample.hbds")
        _write_ppm(out / "sample.ppm", pattern)
        decoded = D.decode_attributes(pattern)
        man = _common_manifest(args, ckpt.config, out, started)
        man.update(
            seed=args.seed,
            caption=list(attrs),
            decoded=list(decoded),
            finished=_now(),
            artifacts=["sample.hbds", "sample.ppm"],
        )
        _write_manifest(out / "manifest.json", **man)
    names = (D.SHAPES[decoded[0]], D.COLORS[decoded[1]], f"quadrant {decoded[2]}", ("small", "large")[decoded[3]])
    print("decoded:", " ".join(str(a) for a in decoded), f"({', '.join(names)})")
    return EXIT_OK


def cmd_ablate(args) -> int:
    eval_path = Path(args.eval_data)
    if not eval_path.exists():
        raise OSError(f"evaluation data {eval_path} does not exist")
    ds = D.read_dataset(eval_path)
    if len(ds) == 0:
        raise InputError("evaluation set is empty")
    ckpt = load_checkpoint(args.checkpoint)
    model = build_model(ckpt.config)
    ckpt.load_into(model)
    prefix = Path(args.out)
    started = _now()
    with _locked(prefix.parent if str(prefix.parent) else Path(".")):
        report = drift_profile(model, ds.tokens, ds.patterns, seed=args.seed)
        csv_path, svg_path = emit_report(report, prefix)
        man = _common_manifest(args, ckpt.config, prefix, started)
        man.update(
            seed=args.seed,
            n_samples=report.n_samples,
            intact_val_loss=report.intact_loss,
            plan=_plan_echo(ckpt.config),
            finished=_now(),
            artifacts=[csv_path.name, svg_path.name],
        )
        _write_manifest(prefix.with_name(prefix.name + ".manifest.json"), **man)
    for row in report.rows:
        print(f"layer {row.layer:2d} bridged={int(row.bridged)} nmse={row.nmse:.6g} loss_delta={row.loss_delta:.6g}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    if args.coords < 1:
        raise UsageError("--coords must be >= 1")
    roles = set(args.roles.split(",")) if args.roles else set(ROLES)
    unknown = roles - set(ROLES) - {"und", "vit"}
    if unknown:
        raise UsageError(f"unknown role(s): {', '.join(sorted(unknown))}")
    model = build_model(cfg, dtype=torch.float64)
    trainer = Trainer(model)
    batch = trainer.sample_batch(2)
    g = torch.Generator().manual_seed(cfg.train.seed + 1)
    batch.x0 = torch.randn(batch.x1.shape, generator=g, dtype=torch.float64)
    batch.t = torch.rand(len(batch.x1), generator=g, dtype=torch.float64)
    params = {n: p for n, p in model.named_parameters() if role_of(n) in roles}

    def loss():
        return trainer.losses(batch)[0]

    result = finite_diff_check(loss, params, coords_per_role=args.coords, role_of=role_of, eps=args.eps)
    if not result.coords:
        print("nothing to check: the selection holds only frozen tensors" if result.skipped else "nothing selected")
        return EXIT_OK
    for role, err in sorted(result.by_role().items()):
        print(f"{role:12s} max_rel_err={err:.3e} {'ok' if err <= GRADCHECK_TOL else 'FAIL'}")
    print(f"coordinates={len(result.coords)} skipped_frozen={len(result.skipped)} max={result.max_rel_error:.3e}")
    return EXIT_OK if result.max_rel_error <= GRADCHECK_TOL else EXIT_GRADCHECK


def cmd_sweep(args) -> int:
    base = _load_config(args)
    out = Path(args.out)
    started = _now()
    data = _load_data(args.data)
    init = load_checkpoint(args.init_from) if args.init_from else None
    with _locked(out):
        rows = run_sweep(base, out, init, data)
        with open(out / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        man = _common_manifest(args, base, out, started)
        man.update(runs=[r["run"] for r in rows], finished=_now(), artifacts=["sweep.csv"])
        _write_manifest(out / "manifest.json", **man)
    for r in rows:
        print(f"{r['run']:22s} val_fm_loss={r['val_fm_loss']:.4f} baseline={r['baseline_val_fm_loss']:.4f}")
    return EXIT_OK


def cmd_config(args) -> int:
    sys.stdout.write(_load_config(args).to_json())
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def _add_overrides(p: argparse.ArgumentParser, bridge: bool = True) -> None:
    p.add_argument("--config", help="JSON config document")
    p.add_argument("--preset", choices=("tiny", "small", "task"), help="built-in config instead of --config")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--srt", action=argparse.BooleanOptionalAction, default=None)
    if bridge:
        p.add_argument("--skip-front", type=int)
        p.add_argument("--skip-back", type=int)
        p.add_argument("--fusion", choices=("deep", "shallow"))
        p.add_argument("--decoupled", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hbridge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic caption/pattern dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain one expert alone")
    _add_overrides(p)
    p.add_argument("--target", choices=("und", "gen"), required=True)
    p.add_argument("--init-from")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="bridged training")
    _add_overrides(p)
    p.add_argument("--init-from")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate a pattern for one caption")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--caption", required=True, help='four integers, e.g. "1 2 3 0"')
    p.add_argument("--steps", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("ablate", help="per-layer bridge disconnection analysis")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eval-data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="file prefix for .csv/.svg/.manifest.json")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check in double precision")
    _add_overrides(p)
    p.add_argument("--coords", type=int, default=16, help="coordinates per tensor role")
    p.add_argument("--roles", help=f"comma list from {','.join(ROLES + ('und', 'vit'))}")
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="M/N x SRT x fusion ablation sweep")
    _add_overrides(p, bridge=False)
    p.add_argument("--init-from")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("config", help="print the resolved config document")
    _add_overrides(p)
    p.set_defaults(func=cmd_config)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    torch.set_num_threads(int(os.environ.get("HBRIDGE_THREADS", "1")))
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))  # exits 2
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, CheckpointError, DatasetFormatError, ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except HBridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
