"""Flat ``section.key = value`` run configuration.

Blank lines and ``#`` comments are ignored.  Every key must appear in
:data:`SCHEMA`; list values are comma separated.  ``None`` defaults under
``ppo`` mean "take the value from the preset matching the actor's origin".
"""

from __future__ import annotations

import copy
from pathlib import Path

from .errors import ConfigError

_INT, _FLOAT, _STR, _INTS = "int", "float", "str", "ints"

SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "run": {
        "seeds": (_INTS, (0, 1, 56, 123)),
        "out": (_STR, "runs"),
    },
    "terrain": {
        "variant": (_STR, "empty"),
        "half_width": (_FLOAT, 5.0),
    },
    "train": {
        "epochs": (_INT, 200),
        "lr": (_FLOAT, 2e-4),
        "milestones": (_INTS, (30, 80)),
        "decay": (_FLOAT, 0.5),
        "k": (_INT, 5),
        "envs": (_INT, 1000),
        "heads": (_INT, 10),
        "horizon": (_INT, 600),
        "projection": (_STR, "xy"),
        "max_grad_norm": (_FLOAT, 0.5),
    },
    "ppo": {
        "gamma": (_FLOAT, None),
        "lam": (_FLOAT, None),
        "clip": (_FLOAT, None),
        "entropy_coef": (_FLOAT, None),
        "value_coef": (_FLOAT, None),
        "max_grad_norm": (_FLOAT, None),
        "epochs": (_INT, None),
        "warmup": (_INT, None),
        "minibatch_per_replica": (_INT, None),
        "horizon": (_INT, None),
        "replicas": (_INT, None),
        "total_steps": (_INT, None),
        "actor_lr": (_FLOAT, None),
        "critic_lr": (_FLOAT, None),
        "updates": (_INT, None),
    },
    "task": {
        "radius": (_FLOAT, 1.0),
        "r_min": (_FLOAT, 3.0),
        "r_max": (_FLOAT, 4.5),
        "eval_rollouts": (_INT, 100),
        "eval_horizon": (_INT, 600),
    },
    "diversity": {
        "rollouts": (_INT, 1000),
        "horizon": (_INT, 600),
        "k": (_INT, 5),
        "stride": (_INT, 10),
        "seed": (_INT, 0),
    },
    "heatmap": {
        "bins": (_INT, 50),
        "envs": (_INT, 1000),
        "horizon": (_INT, 600),
        "seed": (_INT, 0),
    },
}


def _parse(kind: str, text: str, line: int | None):
    try:
        if kind == _INT:
            return int(text)
        if kind == _FLOAT:
            return float(text)
        if kind == _INTS:
            return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"cannot read {text!r} as {kind}", line) from None
    return text


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Resolved settings, ``cfg["train"]["epochs"]`` style."""

    def __init__(self, values: dict | None = None):
        self.values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
        for section, keys in (values or {}).items():
            for key, value in keys.items():
                self.set(f"{section}.{key}", value)

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def set(self, dotted: str, value, line: int | None = None) -> None:
        section, _, key = dotted.partition(".")
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {dotted!r}", line)
        kind = SCHEMA[section][key][0]
        if isinstance(value, str):
            value = _parse(kind, value.strip(), line)
        self.values[section][key] = value

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        cfg = cls()
        for n, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, eq, value = line.partition("=")
            if not eq or "." not in key.strip():
                raise ConfigError(f"expected 'section.key = value', got {raw.strip()!r}", n)
            cfg.set(key.strip(), value, n)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text())

    def dumps(self) -> str:
        lines = []
        for section, keys in self.values.items():
            for key, value in keys.items():
                if value is not None:
                    lines.append(f"{section}.{key} = {_format(value)}")
        return "\n".join(lines) + "\n"

    def write(self, directory, name: str = "resolved.cfg") -> Path:
        path = Path(directory) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path

    def copy(self) -> "RunConfig":
        return copy.deepcopy(self)
