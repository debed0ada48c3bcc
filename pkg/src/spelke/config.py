"""Run configuration: defaults < key=value file < SPELKE_* environment < flags.

A config file holds one ``key = value`` per line; ``#`` starts a comment.
Every key is listed in :data:`FIELDS` with its type and bounds; unknown keys
are rejected. The effective configuration is serialized back to the same
format (sorted keys) and written next to every command's outputs.
"""

import os
from dataclasses import dataclass

from .pipeline import ModelConfig
from .synthscene import PALETTES, SHAPES, TEXTURES, SceneConfig
from .training import LOSS_MODES, TrainConfig

ENV_PREFIX = "SPELKE_"
CONFIG_ECHO = "config.txt"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Field:
    kind: type
    default: object
    lo: float = None
    hi: float = None
    choices: tuple = None


def _bool(text):
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


FIELDS = {
    # general
    "seed": Field(int, 0, 0, 2**63 - 1),
    "data": Field(str, ""),
    "out": Field(str, "out"),
    "checkpoint": Field(str, ""),
    # scenes
    "count": Field(int, 200, 0, 10**7),
    "image_size": Field(int, 64, 8, 4096),
    "min_objects": Field(int, 2, 1, 64),
    "max_objects": Field(int, 5, 1, 64),
    "shapes": Field(str, ",".join(SHAPES)),
    "agent_mode": Field(bool, False),
    "texture": Field(str, "noise", choices=TEXTURES),
    "palette": Field(str, "distinct", choices=tuple(PALETTES)),
    "agent_alone_fraction": Field(float, 0.4, 0.0, 1.0),
    # training
    "learning_rate": Field(float, 0.005, 0.0, 10.0),
    "steps": Field(int, 2000, 1, 10**7),
    "batch_size": Field(int, 8, 1, 4096),
    "poly_power": Field(float, 0.9, 0.0, 10.0),
    "rounds": Field(int, 3, 1, 100),
    "optimizer": Field(str, "adam", choices=("adam", "sgd")),
    "loss_mode": Field(str, "softmax", choices=LOSS_MODES),
    "confident_runs": Field(int, 5, 1, 100),
    # model
    "embed_dim": Field(int, 32, 1, 4096),
    "q_dim": Field(int, 256, 2, 65536),
    "k_max": Field(int, 32, 1, 4096),
    "comp_rounds": Field(int, 3, 1, 100),
    "kprop_iters": Field(int, 40, 1, 10000),
    "theta": Field(float, 0.2, 0.0, 1.0),
    "window": Field(int, 12, 0, 4096),
    "global_samples": Field(int, 16, 0, 1 << 20),
    "tau": Field(float, 0.5, 0.0, 1e6),
    "downsample": Field(int, 4, 1, 64),
}


def _coerce(key, value):
    fld = FIELDS[key]
    try:
        if fld.kind is bool:
            v = _bool(value)
        elif fld.kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            v = int(value)
        elif fld.kind is float:
            v = float(value)
        else:
            v = str(value).strip()
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {fld.kind.__name__}, got {value!r}") from None
    if fld.lo is not None and v < fld.lo:
        raise ConfigError(f"{key}={v} below minimum {fld.lo}")
    if fld.hi is not None and v > fld.hi:
        raise ConfigError(f"{key}={v} above maximum {fld.hi}")
    if fld.choices is not None and v not in fld.choices:
        raise ConfigError(f"{key}={v!r} not one of {fld.choices}")
    return v


def parse_text(text, source="<config>"):
    values = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in FIELDS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        values[key] = _coerce(key, value)
    return values


def env_overrides(environ=None):
    environ = os.environ if environ is None else environ
    values = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        if key not in FIELDS:
            raise ConfigError(f"unknown environment override {name}")
        values[key] = _coerce(key, value)
    return values


class RunConfig:
    """Flat, validated mapping of every run setting."""

    def __init__(self, **values):
        self._values = {k: f.default for k, f in FIELDS.items()}
        self.update(values)

    def update(self, values):
        for key, value in values.items():
            if key not in FIELDS:
                raise ConfigError(f"unknown key {key!r}")
            self._values[key] = _coerce(key, value)
        self._check()
        return self

    def _check(self):
        v = self._values
        if v["max_objects"] < v["min_objects"]:
            raise ConfigError("max_objects must be >= min_objects")
        if v["image_size"] % v["downsample"]:
            raise ConfigError("image_size must be divisible by downsample")
        bad = [s for s in self.shapes_tuple() if s not in SHAPES]
        if bad:
            raise ConfigError(f"unknown shapes {bad}")
        if v["max_objects"] + 1 > len(PALETTES[v["palette"]]):
            raise ConfigError(f"palette {v['palette']!r} is too small for max_objects")

    def __getattr__(self, key):
        values = self.__dict__.get("_values")
        if values is not None and key in values:
            return values[key]
        raise AttributeError(key)

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self._values == other._values

    def as_dict(self):
        return dict(self._values)

    def shapes_tuple(self):
        return tuple(s.strip() for s in self._values["shapes"].split(",") if s.strip())

    def dumps(self):
        lines = []
        for key in sorted(self._values):
            value = self._values[key]
            if isinstance(value, float):
                value = repr(value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text):
        return cls(**parse_text(text))

    def echo(self, out_dir):
        path = os.path.join(out_dir, CONFIG_ECHO)
        with open(path, "w") as f:
            f.write(self.dumps())
        return path

    def scene_config(self):
        v = self._values
        return SceneConfig(
            image_size=v["image_size"],
            min_objects=v["min_objects"],
            max_objects=v["max_objects"],
            shapes=self.shapes_tuple(),
            agent_mode=v["agent_mode"],
            texture=v["texture"],
            seed=v["seed"],
            agent_alone_fraction=v["agent_alone_fraction"],
            palette=v["palette"],
        )

    def train_config(self):
        v = self._values
        return TrainConfig(
            learning_rate=v["learning_rate"],
            steps=v["steps"],
            batch_size=v["batch_size"],
            poly_power=v["poly_power"],
            seed=v["seed"],
            rounds=v["rounds"],
            optimizer=v["optimizer"],
            loss_mode=v["loss_mode"],
            confident_runs=v["confident_runs"],
        )

    def model_config(self):
        v = self._values
        return ModelConfig(
            embed_dim=v["embed_dim"],
            q_dim=v["q_dim"],
            k_max=v["k_max"],
            comp_rounds=v["comp_rounds"],
            kprop_iters=v["kprop_iters"],
            theta=v["theta"],
            window=v["window"],
            global_samples=v["global_samples"],
            downsample=v["downsample"],
            tau=v["tau"],
        )


def load_config(path=None, environ=None, overrides=None):
    """Resolve defaults, then *path*, then the environment, then *overrides*."""
    cfg = RunConfig()
    if path:
        try:
            with open(path) as f:
                text = f.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg.update(parse_text(text, str(path)))
    cfg.update(env_overrides(environ))
    cfg.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return cfg
