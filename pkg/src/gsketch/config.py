"""Run configuration: defaults, key=value files, environment and flag overrides."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import InputError
from .measures import Kind, MeasureSpec

SEED_ENV = "GSKETCH_SEED"


@dataclass(frozen=True)
class RunConfig:
    input: str | None = None
    format: str | None = None
    generator: str = "gaussian"
    n: int = 256
    d: int = 8
    nu: float = 1 / 16
    measure: str = "l2"
    tau: float = 1.0
    lam: float = 0.0
    groups: str | None = None
    T: int = 100
    eta: float | None = None
    eps: float = 0.5
    alpha: float | None = None
    delta: float | None = None
    seed: int = 0
    out: str | None = None
    mode: str = "sketch"
    draws: int = 1000
    x: str | None = None
    order: int = 2
    batch: int | None = None
    sensitivity: bool = True

    def measure_spec(self) -> MeasureSpec:
        groups = None
        if self.groups:
            groups = tuple(tuple(int(i) for i in g.split()) for g in self.groups.split(";"))
        return MeasureSpec(Kind(self.measure), self.tau, self.lam, groups)

    def dump(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            lines.append(f"{key}={'' if value is None else value}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, text: str):
    kind = _TYPES[key]
    text = text.strip()
    if text == "" and "None" in kind:
        return None
    try:
        if kind.startswith("int"):
            return int(text, 0)
        if kind.startswith("float"):
            return float(text)
        if kind == "bool":
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
    except ValueError:
        raise InputError(f"bad value for {key}: {text!r}") from None
    return text


def parse_config_text(text: str) -> dict:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for num, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"config line {num}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = {"lambda": "lam"}.get(key, key)
        if key not in _TYPES:
            raise InputError(f"config line {num}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config(path: str | None = None, overrides: dict | None = None, environ=None) -> RunConfig:
    """Defaults, then GSKETCH_SEED, then the config file, then explicit overrides."""
    environ = os.environ if environ is None else environ
    values: dict = {}
    if environ.get(SEED_ENV):
        values["seed"] = _coerce("seed", environ[SEED_ENV])
    if path is not None:
        try:
            values.update(parse_config_text(Path(path).read_text()))
        except OSError as exc:
            raise InputError(f"cannot read config {path}: {exc.strerror}") from None
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return replace(RunConfig(), **values)
