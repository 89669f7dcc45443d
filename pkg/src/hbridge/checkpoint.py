"""Binary checkpoint container.

Layout (little-endian)::

    b"HBRD" | u32 version | u64 header length | JSON header | raw f32 payload

The header lists every tensor with its shape, byte offset into the payload
and frozen flag, plus the config snapshot, optimizer step counters and the
training RNG state. Parsing is all-or-nothing: a file is fully validated
before any model state is touched.
"""

from __future__ import annotations

import base64
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .config import HBridgeConfig, config_diff
from .errors import (
    ConfigError,
    ConfigMismatchError,
    CorruptCheckpointError,
    UnsupportedVersionError,
)

MAGIC = b"HBRD"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    config: HBridgeConfig
    tensors: dict[str, np.ndarray]
    frozen: dict[str, bool]
    step: int = 0
    optim: dict[str, Any] | None = None  # {"steps": {name: k}, "exp_avg": {...}, "exp_avg_sq": {...}}
    rng: bytes | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    # -- serialization -------------------------------------------------

    def to_bytes(self) -> bytes:
        entries, chunks, offset = [], [], 0

        def add(table: list, name: str, arr: np.ndarray, **extra) -> None:
            nonlocal offset
            data = np.ascontiguousarray(arr, dtype=_F32).tobytes()
            table.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset, **extra})
            chunks.append(data)
            offset += len(data)

        for name in self.tensors:
            add(entries, name, self.tensors[name], frozen=bool(self.frozen[name]))
        optim_hdr = None
        if self.optim is not None:
            moments: list = []
            for name in self.optim["steps"]:
                add(moments, name, self.optim["exp_avg"][name], kind="exp_avg")
                add(moments, name, self.optim["exp_avg_sq"][name], kind="exp_avg_sq")
            optim_hdr = {"steps": self.optim["steps"], "moments": moments}
        header = {
            "config": self.config.to_dict(),
            "step": self.step,
            "tensors": entries,
            "optimizer": optim_hdr,
            "rng": base64.b64encode(self.rng).decode("ascii") if self.rng is not None else None,
            "meta": self.meta,
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        try:
            return cls._parse(raw)
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptCheckpointError(f"malformed checkpoint: {exc!r}") from None

    @classmethod
    def _parse(cls, raw: bytes) -> "Checkpoint":
        if len(raw) < _PREFIX.size:
            raise CorruptCheckpointError("file shorter than checkpoint prefix")
        magic, version, hlen = _PREFIX.unpack_from(raw)
        if magic != MAGIC:
            raise CorruptCheckpointError(f"bad magic {magic!r}")
        if version != VERSION:
            raise UnsupportedVersionError(f"checkpoint version {version} (supported: {VERSION})")
        start = _PREFIX.size + hlen
        if len(raw) < start:
            raise CorruptCheckpointError("truncated header")
        try:
            header = json.loads(raw[_PREFIX.size : start])
            config = HBridgeConfig.from_dict(header["config"])
        except (ValueError, KeyError, ConfigError) as exc:
            raise CorruptCheckpointError(f"unreadable header: {exc}") from None
        payload = raw[start:]

        def read(entry: dict) -> np.ndarray:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape, dtype=np.int64)) * _F32.itemsize
            lo = entry["offset"]
            if entry.get("dtype") != "f32" or lo < 0 or lo + n > len(payload):
                raise CorruptCheckpointError(f"tensor {entry['name']!r} extends past the payload")
            return np.frombuffer(payload, dtype=_F32, count=n // 4, offset=lo).reshape(shape).copy()

        tensors, frozen = {}, {}
        end = 0
        for entry in header["tensors"]:
            if entry["name"] in tensors:
                raise CorruptCheckpointError(f"duplicate tensor name {entry['name']!r}")
            tensors[entry["name"]] = read(entry)
            frozen[entry["name"]] = bool(entry["frozen"])
        optim = None
        if header.get("optimizer") is not None:
            oh = header["optimizer"]
            optim = {"steps": dict(oh["steps"]), "exp_avg": {}, "exp_avg_sq": {}}
            for entry in oh["moments"]:
                optim[entry["kind"]][entry["name"]] = read(entry)
        all_entries = list(header["tensors"]) + (header["optimizer"]["moments"] if optim else [])
        for entry in all_entries:
            end = max(end, entry["offset"] + int(np.prod(entry["shape"], dtype=np.int64)) * 4)
        if end != len(payload):
            raise CorruptCheckpointError(f"payload is {len(payload)} bytes, header describes {end}")
        rng = base64.b64decode(header["rng"]) if header.get("rng") is not None else None
        return cls(config, tensors, frozen, int(header["step"]), optim, rng, header.get("meta", {}))

    # -- model glue ----------------------------------------------------

    @classmethod
    def from_model(cls, model, trainer=None, meta: dict | None = None) -> "Checkpoint":
        tensors = {n: p.detach().to(torch.float32).numpy().copy() for n, p in model.named_parameters()}
        frozen = {n: not p.requires_grad for n, p in model.named_parameters()}
        ckpt = cls(model.cfg, tensors, frozen, meta=dict(meta or {}))
        if trainer is not None:
            ckpt.step = trainer.step
            ckpt.rng = trainer.generator.get_state().numpy().tobytes()
            names = {id(p): n for n, p in model.named_parameters()}
            steps, m, v = {}, {}, {}
            for p, st in trainer.optimizer.state.items():
                n = names[id(p)]
                steps[n] = int(st["step"])
                m[n] = st["exp_avg"].detach().to(torch.float32).numpy().copy()
                v[n] = st["exp_avg_sq"].detach().to(torch.float32).numpy().copy()
            order = sorted(steps)
            ckpt.optim = {
                "steps": {n: steps[n] for n in order},
                "exp_avg": {n: m[n] for n in order},
                "exp_avg_sq": {n: v[n] for n in order},
            }
        return ckpt

    def load_into(self, model, strict: bool = True) -> list[str]:
        """Copy tensors into ``model``; returns the names that were copied."""
        params = dict(model.named_parameters())
        if strict:
            missing = sorted(set(params) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(params))
            if missing or extra:
                raise CorruptCheckpointError(f"tensor set mismatch: missing {missing}, unexpected {extra}")
        copied = []
        with torch.no_grad():
            for name, p in params.items():
                arr = self.tensors.get(name)
                if arr is None or tuple(arr.shape) != tuple(p.shape):
                    if strict and arr is not None:
                        raise CorruptCheckpointError(f"shape mismatch for {name}")
                    continue
                p.copy_(torch.from_numpy(arr))
                copied.append(name)
        return copied

    def restore_trainer(self, trainer) -> None:
        if self.rng is not None:
            trainer.generator.set_state(torch.frombuffer(bytearray(self.rng), dtype=torch.uint8))
        trainer.step = self.step
        if self.optim is None:
            return
        params = dict(trainer.model.named_parameters())
        for name, k in self.optim["steps"].items():
            p = params[name]
            trainer.optimizer.state[p] = {
                "step": k,
                "exp_avg": torch.from_numpy(self.optim["exp_avg"][name].copy()).to(p.dtype),
                "exp_avg_sq": torch.from_numpy(self.optim["exp_avg_sq"][name].copy()).to(p.dtype),
            }


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(ckpt.to_bytes())
    tmp.replace(path)


def load_checkpoint(path: str | Path, expected: HBridgeConfig | None = None) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptCheckpointError(f"cannot read {path}: {exc}") from None
    ckpt = Checkpoint.from_bytes(raw)
    if expected is not None:
        diff = config_diff(ckpt.config, expected)
        if diff:
            raise ConfigMismatchError(diff)
    return ckpt


def check_experts_match(ckpt: Checkpoint, cfg: HBridgeConfig) -> None:
    """Initialization across runs only needs the expert shapes to agree."""
    diff = [
        f
        for f in config_diff(ckpt.config, cfg)
        if f.startswith(("und.", "gen.")) or f in ("time_embed_dim", "d_feat", "vit_seed")
    ]
    if diff:
        raise ConfigMismatchError(diff)
