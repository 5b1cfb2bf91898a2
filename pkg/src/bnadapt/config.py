"""Plain-text ``key=value`` run configuration."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    epochs: int = 15
    lr: float = 0.1
    adapt_lr: float = 1e-3
    batch_size: int = 16
    momentum: float = 0.1
    eta0: float = 0.9
    tau: float = 1.0
    lambda_start: float = 10.0
    lambda_end: float = 0.0
    adapt_iters: int = 100
    adaptive_channels: bool = True
    use_se: bool = True
    freeze_non_bn: bool = False
    dtype: str = "float32"
    data: str = ""

    def validate(self) -> "RunConfig":
        checks = [
            (self.seed >= 0, "seed must be non-negative"),
            (self.epochs >= 0, "epochs must be non-negative"),
            (self.lr > 0, "lr must be positive"),
            (self.adapt_lr > 0, "adapt_lr must be positive"),
            (self.batch_size >= 2, "batch_size must be at least 2"),
            (0.0 <= self.momentum <= 1.0, "momentum must lie in [0, 1]"),
            (0.0 <= self.eta0 <= 1.0, "eta0 must lie in [0, 1]"),
            (self.tau > 0, "tau must be positive"),
            (self.adapt_iters >= 0, "adapt_iters must be non-negative"),
            (self.dtype in ("float32", "float64"), "dtype must be float32 or float64"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, typ, raw: str):
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ.__name__}") from None


def parse_config(text: str) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    pytypes = {"int": int, "float": float, "bool": bool, "str": str}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, pytypes[types[key]], raw)
    return RunConfig(**values).validate()


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    return parse_config(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    out = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        out.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(out) + "\n"
