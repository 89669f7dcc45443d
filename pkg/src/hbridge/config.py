"""Configuration records and bridge-plan resolution.

Every record is a frozen dataclass that validates itself on construction and
round-trips through plain dicts (and therefore JSON). Unknown keys are
rejected so that a typo in a sweep config fails loudly instead of silently
falling back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

from .errors import ConfigError, UnsupportedConfigError

FusionMode = Literal["deep", "shallow"]

# Fixed by the synthetic task: 16x16x3 patterns cut into 4x4 patches.
N_LATENT_TOKENS = 16
PATCH_DIM = 48


def _positive(name: str, value: Any) -> None:
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ConfigError(f"{name} must be a positive integer, got {value!r}")


def _non_negative(name: str, value: Any) -> None:
    if not isinstance(value, int) or isinstance(value, bool) or value < 0:
        raise ConfigError(f"{name} must be a non-negative integer, got {value!r}")


@dataclass(frozen=True)
class ExpertSpec:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    max_seq: int
    vocab_size: int | None = None

    def __post_init__(self) -> None:
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "max_seq"):
            _positive(name, getattr(self, name))
        if self.vocab_size is not None:
            _positive("vocab_size", self.vocab_size)
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class BridgeSpec:
    skip_front: int = 0
    skip_back: int = 0
    fusion_mode: FusionMode = "deep"
    decoupled: bool = False

    def __post_init__(self) -> None:
        _non_negative("skip_front", self.skip_front)
        _non_negative("skip_back", self.skip_back)
        if self.fusion_mode not in ("deep", "shallow"):
            raise ConfigError(f"fusion_mode must be 'deep' or 'shallow', got {self.fusion_mode!r}")
        if not isinstance(self.decoupled, bool):
            raise ConfigError("decoupled must be a boolean")


@dataclass(frozen=True)
class TrainSpec:
    learning_rate: float = 1e-4
    steps: int = 1000
    batch_size: int = 32
    grad_accum: int = 1
    seed: int = 0
    srt_enabled: bool = True
    n_srt_tokens: int = 16

    def __post_init__(self) -> None:
        if not isinstance(self.learning_rate, (int, float)) or isinstance(self.learning_rate, bool):
            raise ConfigError("learning_rate must be a real number")
        # lr = 0 is allowed as a diagnostic mode (moments update, weights do not).
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        _non_negative("steps", self.steps)
        _positive("batch_size", self.batch_size)
        _positive("grad_accum", self.grad_accum)
        _non_negative("seed", self.seed)
        _positive("n_srt_tokens", self.n_srt_tokens)
        if not isinstance(self.srt_enabled, bool):
            raise ConfigError("srt_enabled must be a boolean")


@dataclass(frozen=True)
class BridgePlan:
    projector_depth: int
    aligned_count: int
    bridged: tuple[tuple[int, int], ...]

    @property
    def gen_layers(self) -> tuple[int, ...]:
        """Aligned generative indices that carry a bridge."""
        return tuple(g for _, g in self.bridged)

    def und_layer_for(self, gen_aligned: int) -> int | None:
        for u, g in self.bridged:
            if g == gen_aligned:
                return u
        return None

    def without(self, gen_aligned: set[int] | frozenset[int] | tuple[int, ...]) -> "BridgePlan":
        drop = set(gen_aligned)
        return BridgePlan(
            self.projector_depth,
            self.aligned_count,
            tuple(p for p in self.bridged if p[1] not in drop),
        )


def resolve_bridge_plan(u: ExpertSpec, g: ExpertSpec, b: BridgeSpec) -> BridgePlan:
    """Pair understanding and generative layers and pick the bridged range.

    Surplus generative layers form a prefix (the noise projector); the
    remaining ``u.n_layers`` generative layers are paired i <-> i with the
    understanding stack. Only pairs in ``[skip_front, aligned - skip_back)``
    are bridged. In shallow mode every bridged generative layer reads the
    last understanding layer instead.
    """
    if g.n_layers < u.n_layers:
        raise UnsupportedConfigError(
            f"generative depth {g.n_layers} is smaller than understanding depth {u.n_layers}"
        )
    aligned = u.n_layers
    skipped = b.skip_front + b.skip_back
    if skipped > aligned:
        raise ConfigError(f"skip_front + skip_back = {skipped} exceeds aligned count {aligned}")
    if b.decoupled:
        if skipped != aligned:
            raise ConfigError(
                f"decoupled mode requires skip_front + skip_back = {aligned}, got {skipped}"
            )
    elif skipped == aligned:
        raise ConfigError(
            "bridge is empty; set decoupled=true to request a fully decoupled model"
        )
    layers = range(b.skip_front, aligned - b.skip_back)
    if b.fusion_mode == "deep":
        pairs = tuple((i, i) for i in layers)
    else:
        pairs = tuple((u.n_layers - 1, i) for i in layers)
    return BridgePlan(g.n_layers - u.n_layers, aligned, pairs)


@dataclass(frozen=True)
class HBridgeConfig:
    und: ExpertSpec
    gen: ExpertSpec
    bridge: BridgeSpec = field(default_factory=BridgeSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    d_feat: int = 32
    time_embed_dim: int = 32
    vit_seed: int = 1234

    def __post_init__(self) -> None:
        _positive("d_feat", self.d_feat)
        _positive("time_embed_dim", self.time_embed_dim)
        if self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be even")
        _non_negative("vit_seed", self.vit_seed)
        if self.und.vocab_size is None:
            raise ConfigError("understanding expert needs vocab_size")
        n_srt = self.n_srt
        if self.gen.max_seq < N_LATENT_TOKENS + n_srt:
            raise ConfigError(
                f"gen.max_seq={self.gen.max_seq} cannot hold {N_LATENT_TOKENS} latents + {n_srt} SRT tokens"
            )
        if self.train.n_srt_tokens > N_LATENT_TOKENS:
            raise ConfigError(
                f"n_srt_tokens={self.train.n_srt_tokens} exceeds the {N_LATENT_TOKENS} target patches"
            )
        self.plan  # validates the bridge against the expert depths

    @property
    def plan(self) -> BridgePlan:
        return resolve_bridge_plan(self.und, self.gen, self.bridge)

    @property
    def n_srt(self) -> int:
        """SRT tokens actually appended to the generative sequence."""
        return self.train.n_srt_tokens if self.train.srt_enabled else 0

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "HBridgeConfig":
        data = _checked(cls, data, "config")
        kwargs: dict[str, Any] = dict(data)
        sub = {"und": ExpertSpec, "gen": ExpertSpec, "bridge": BridgeSpec, "train": TrainSpec}
        for key, kind in sub.items():
            if key in kwargs:
                kwargs[key] = kind(**_checked(kind, kwargs[key], key))
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "HBridgeConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config document must be a JSON object")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: str | Path) -> "HBridgeConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def replace(self, **sections: Any) -> "HBridgeConfig":
        """Override fields; nested sections accept dicts of field overrides."""
        kwargs: dict[str, Any] = {}
        for key, value in sections.items():
            current = getattr(self, key)
            if isinstance(value, dict) and dataclasses.is_dataclass(current):
                _checked(type(current), value, key)
                value = dataclasses.replace(current, **value)
            kwargs[key] = value
        return dataclasses.replace(self, **kwargs)


def _checked(kind: type, data: Any, where: str) -> dict[str, Any]:
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in dataclasses.fields(kind)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return data


def config_diff(a: HBridgeConfig, b: HBridgeConfig) -> list[str]:
    """Dotted names of every leaf field that differs between two configs."""
    out: list[str] = []

    def walk(x: Any, y: Any, prefix: str) -> None:
        if isinstance(x, dict) and isinstance(y, dict):
            for key in sorted(set(x) | set(y)):
                walk(x.get(key), y.get(key), f"{prefix}.{key}" if prefix else key)
        elif x != y:
            out.append(prefix)

    walk(a.to_dict(), b.to_dict(), "")
    return out


def tiny_config(**overrides: Any) -> HBridgeConfig:
    """Small configuration used by the gradient check and unit tests."""
    cfg = HBridgeConfig(
        und=ExpertSpec(n_layers=4, d_model=32, n_heads=4, d_ff=64, max_seq=8, vocab_size=16),
        gen=ExpertSpec(n_layers=6, d_model=48, n_heads=4, d_ff=96, max_seq=N_LATENT_TOKENS + 4),
        bridge=BridgeSpec(skip_front=1, skip_back=1),
        train=TrainSpec(steps=10, batch_size=2, n_srt_tokens=4),
        d_feat=16,
        time_embed_dim=16,
    )
    return cfg.replace(**overrides) if overrides else cfg


def task_config(**overrides: Any) -> HBridgeConfig:
    """The conditional-learning configuration for the synthetic task."""
    cfg = HBridgeConfig(
        und=ExpertSpec(n_layers=6, d_model=64, n_heads=4, d_ff=128, max_seq=8, vocab_size=16),
        gen=ExpertSpec(n_layers=8, d_model=64, n_heads=4, d_ff=256, max_seq=N_LATENT_TOKENS + 16),
        bridge=BridgeSpec(skip_front=1, skip_back=1),
        train=TrainSpec(learning_rate=1e-4, steps=3000, batch_size=32, n_srt_tokens=16),
        d_feat=32,
        time_embed_dim=32,
    )
    return cfg.replace(**overrides) if overrides else cfg


def small_config(**overrides: Any) -> HBridgeConfig:
    """Task-shaped (6/8 layers) but half width, for sweeps and trend studies
    that train many short runs."""
    cfg = HBridgeConfig(
        und=ExpertSpec(n_layers=6, d_model=32, n_heads=4, d_ff=64, max_seq=8, vocab_size=16),
        gen=ExpertSpec(n_layers=8, d_model=32, n_heads=4, d_ff=128, max_seq=N_LATENT_TOKENS + 8),
        bridge=BridgeSpec(skip_front=1, skip_back=1),
        train=TrainSpec(learning_rate=1e-3, steps=400, batch_size=32, n_srt_tokens=8),
        d_feat=16,
        time_embed_dim=16,
    )
    return cfg.replace(**overrides) if overrides else cfg
