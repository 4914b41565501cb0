"""Flat ``key=value`` experiment configuration.

::

    # 2D SUMMA on 16 ranks
    mode = 2d
    world_size = 16
    seed = 7

Blank lines and lines starting with ``#`` are ignored. Unknown or repeated
keys are errors.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

from .errors import ConfigError, ConstraintViolation
from .mesh import DeviceMesh, ParallelMode, build_mesh


def _int_list(text: str) -> tuple[int, ...]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise ValueError("empty list")
    return tuple(int(t) for t in items)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_PARSERS = {
    "mode": str,
    "world_size": int,
    "depth": int,
    "b": int,
    "s": int,
    "h": int,
    "r": int,
    "L": int,
    "d_k": int,
    "seed": int,
    "stage": int,
    "budgets": _int_list,
    "out": str,
    "trials": int,
    "p_sweep": _int_list,
    "depths": _int_list,
    "batch_sweep": _int_list,
    "hidden_sweep": _int_list,
    "world_sizes": _int_list,
    "segments": _int_list,
    "steps": int,
    "lr": float,
    "n_params": int,
    "reuse": _bool,
}
_ALIASES = {"size": "world_size", "layers": "L"}


@dataclass
class ExperimentConfig:
    mode: str | None = None
    world_size: int | None = None
    depth: int | None = None
    b: int | None = None
    s: int | None = None
    h: int | None = None
    r: int | None = None
    L: int | None = None
    d_k: int | None = None
    seed: int = 42
    stage: int | None = None
    budgets: tuple[int, ...] | None = None
    out: str | None = None
    trials: int | None = None
    p_sweep: tuple[int, ...] | None = None
    depths: tuple[int, ...] | None = None
    batch_sweep: tuple[int, ...] | None = None
    hidden_sweep: tuple[int, ...] | None = None
    world_sizes: tuple[int, ...] | None = None
    segments: tuple[int, ...] | None = None
    steps: int | None = None
    lr: float | None = None
    n_params: int | None = None
    reuse: bool | None = None

    def get(self, key: str, default):
        v = getattr(self, key)
        return default if v is None else v

    def parallel_mode(self) -> ParallelMode:
        if self.mode is None:
            raise ConfigError("missing key 'mode'", "mode")
        try:
            return ParallelMode.parse(self.mode, self.depth or 1)
        except ConstraintViolation as exc:
            raise ConfigError(str(exc), "mode") from None

    def mesh(self, default_world: int | None = None) -> DeviceMesh:
        """Validate the mode/world_size pair before any rank is spawned."""
        mode = self.parallel_mode()
        p = self.world_size if self.world_size is not None else default_world
        if p is None:
            raise ConfigError("missing key 'world_size'", "world_size")
        try:
            return build_mesh(mode, p)
        except ConstraintViolation as exc:
            raise ConfigError(str(exc), "world_size") from None

    def digest(self, command: str) -> str:
        """Hash of everything that can change results (output path excluded)."""
        lines = [f"command={command}"]
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "out" or v is None:
                continue
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            lines.append(f"{f.name}={v}")
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]


def parse_config(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key not in _PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}", key)
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}", key)
        seen.add(key)
        try:
            parsed = _PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}", key) from None
        if isinstance(parsed, int) and not isinstance(parsed, bool) and key != "seed" and parsed < 0:
            raise ConfigError(f"line {lineno}: {key!r} must be non-negative", key)
        setattr(cfg, key, parsed)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
