"""Simulator configuration: defaults, validation and file loading."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict

from .metadata import DEFAULT_MEM_SIZE, make_geometry

SCHEMES = ("eager", "lazy", "lc", "scue", "bmt-eager", "bmt-lazy")
ROOT_PERSIST_MODES = ("tagged", "direct")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    mem_size: int = DEFAULT_MEM_SIZE
    cache_kib: int = 256
    cache_ways: int = 8
    wq_user: int = 64
    wq_meta: int = 10
    hash_cycles: int = 80
    # 2 GHz core: tRCD 48 ns -> 96 cycles, tWR 300 ns -> 600 cycles per queued write
    nvm_read_cycles: int = 96
    nvm_write_cycles: int = 600
    nvm_write_banks: int = 8
    otp_cycles: int = 40
    scheme: str = "scue"
    minor_bits: int = 7
    osiris_limit: int = 4
    osiris_stop_loss: bool = True
    tag_refill_cycles: int = 8
    eager_parallel_hashes: int = 1
    bg_jobs_per_op: int = 1
    root_persist: str = "tagged"
    check_otp_unique: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            want = bool if f.type in ("bool", bool) else (str if f.type in ("str", str) else int)
            if want is int and (isinstance(v, bool) or not isinstance(v, int)):
                raise ConfigError(f"{f.name} must be an integer, got {v!r}")
            if want is not int and not isinstance(v, want):
                raise ConfigError(f"{f.name} must be {want.__name__}, got {v!r}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {', '.join(SCHEMES)}")
        if self.root_persist not in ROOT_PERSIST_MODES:
            raise ConfigError(f"root_persist must be one of {ROOT_PERSIST_MODES}")
        try:
            make_geometry(self.mem_size)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        positive = ("cache_kib", "cache_ways", "wq_user", "wq_meta", "nvm_write_banks", "hash_cycles",
                    "eager_parallel_hashes", "osiris_limit")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        nonneg = ("nvm_read_cycles", "nvm_write_cycles", "otp_cycles", "tag_refill_cycles",
                  "bg_jobs_per_op", "seed")
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 1 <= self.minor_bits <= 31:
            raise ConfigError("minor_bits must be within 1..31")
        if (self.cache_kib * 1024 // 64) % self.cache_ways:
            raise ConfigError("cache lines must divide evenly into ways")

    @property
    def cache_lines(self) -> int:
        return self.cache_kib * 1024 // 64

    @property
    def is_bmt(self) -> bool:
        return self.scheme.startswith("bmt")

    def replace(self, **changes) -> "SimConfig":
        d = asdict(self)
        unknown = set(changes) - set(d)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        d.update(changes)
        return SimConfig(**d)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def digest(self) -> bytes:
        """sha256 over the canonical JSON form; stored in crash image headers."""
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


def config_from_dict(raw: Dict[str, Any]) -> SimConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a mapping")
    return SimConfig().replace(**raw)


def load_config(path: str | Path) -> SimConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if path.suffix.lower() in (".yaml", ".yml"):
        import yaml
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"bad YAML in {path}: {exc}") from None
    else:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad JSON in {path}: {exc}") from None
    return config_from_dict(raw)
