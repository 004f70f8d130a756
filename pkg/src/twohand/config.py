"""Run configuration stored as a flat ``key = value`` text file."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .storage import format_kv, kv_hash, parse_kv


@dataclass(frozen=True)
class Config:
    # mesh and model
    template: str = "small"
    feature_dim: int = 64
    heads: int = 4
    cheb_order: int = 3
    res_blocks: int = 2
    global_dim: int = 64
    patch_grids: tuple = (4, 8, 16)
    use_pifa: bool = True
    use_cha: bool = True
    reinject_encoding: bool = True
    # synthetic data
    map_resolutions: tuple = (16, 32, 64)
    splat_sigma: float = 1.5
    noise_std: float = 0.02
    proximity: float = 0.5
    camera_scale: float = 5.0
    camera_jitter: float = 0.05
    n_samples: int = 250
    split_ratio: float = 0.8
    # optimisation
    seed: int = 0
    epochs: int = 40
    batch_size: int = 4
    max_steps: int = 2000
    lr: float = 1e-3
    lr_decayed: float = 1e-4
    decay_step: int = 1500
    eval_every: int = 250
    checkpoint_every: int = 10
    pretrain_meshes: int = 200
    pretrain_ridge: float = 1e-4
    w_vertex: float = 1.0
    w_joint: float = 1.0
    w_normal: float = 0.1
    w_edge: float = 1.0

    def __post_init__(self):
        if self.feature_dim % self.heads:
            raise ConfigError(f"feature_dim {self.feature_dim} is not divisible by heads {self.heads}")
        if self.feature_dim <= 3:
            raise ConfigError("feature_dim must exceed 3 (3 entries hold the matching encoding)")
        if len(self.patch_grids) != 3 or len(self.map_resolutions) != 3:
            raise ConfigError("exactly three patch grids and map resolutions are required")
        for g, r in zip(self.patch_grids, self.map_resolutions):
            if r % g:
                raise ConfigError(f"map resolution {r} is not divisible by patch grid {g}")
        if self.cheb_order < 1:
            raise ConfigError("cheb_order must be at least 1")
        if not 0 < self.split_ratio < 1:
            raise ConfigError("split_ratio must lie strictly between 0 and 1")

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_kv(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out[f.name] = str(v)
        return out

    def hash(self) -> str:
        return kv_hash(self.to_kv())

    @classmethod
    def from_kv(cls, items: dict[str, str]) -> "Config":
        known = {f.name: f for f in fields(cls)}
        defaults = cls()
        values = {}
        for key, raw in items.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(key, raw, getattr(defaults, key))
        return cls(**values)

    @classmethod
    def load(cls, path) -> "Config":
        try:
            items = parse_kv(Path(path).read_text())
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return cls.from_kv(items)

    def save(self, path) -> None:
        Path(path).write_text(format_kv(self.to_kv()))


def _coerce(key, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return type(default)(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
