"""Plain-text ``key=value`` run configuration.

Keys are ``<section>.<field>`` with sections ``net``, ``asm``, ``train`` and
``data``. Tuples are comma separated, booleans are ``true``/``false``. Blank
lines and ``#`` comments are ignored; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .asm import AsmConfig
from .unet import NetConfig


class ConfigKeyError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 2
    lr0: float = 0.01
    poly_exp: float = 0.9
    max_epochs: int = 60
    val_every: int = 5
    patience: int = 8
    seed: int = 0
    patch: tuple = (16, 16, 16)
    iters_per_epoch: int = 25
    dice_weight: float = 1.0
    ce_weight: float = 1.0
    improve_tol: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.patch = tuple(int(p) for p in self.patch)
        for name in ("batch_size", "max_epochs", "val_every", "patience", "iters_per_epoch"):
            if getattr(self, name) < 1:
                raise ValueError(f"train.{name} must be >= 1")
        if self.lr0 < 0 or self.poly_exp <= 0:
            raise ValueError("train.lr0 must be >= 0 and train.poly_exp > 0")


@dataclass
class DataConfig:
    fg_prob: float = 0.5
    augment: bool = True
    aug_prob: float = 0.2
    flip_prob: float = 0.5
    max_angle: float = 30.0
    scale_min: float = 0.7
    scale_max: float = 1.4
    sw_stride: float = 0.5


@dataclass
class RunConfig:
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @property
    def asm(self):
        return self.net.asm

    def sections(self):
        return {"net": self.net, "asm": self.net.asm, "train": self.train, "data": self.data}

    def to_dict(self):
        out = {}
        for sec, obj in self.sections().items():
            for f in dataclasses.fields(obj):
                if sec == "net" and f.name == "asm":
                    continue
                out[f"{sec}.{f.name}"] = _format(getattr(obj, f.name))
        return out

    def to_text(self):
        return "".join(f"{k}={v}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_dict(cls, items):
        defaults = cls()
        values = {sec: {} for sec in defaults.sections()}
        for key, raw in items.items():
            sec, _, name = key.partition(".")
            obj = defaults.sections().get(sec)
            names = {f.name for f in dataclasses.fields(obj)} - {"asm"} if obj is not None else set()
            if name not in names:
                raise ConfigKeyError(f"unknown config key {key!r}")
            values[sec][name] = _parse(raw, getattr(obj, name), key)
        try:
            asm = AsmConfig(**{**_fields(defaults.net.asm), **values["asm"]})
            net = NetConfig(**{**_fields(defaults.net), **values["net"], "asm": asm})
            train = TrainConfig(**{**_fields(defaults.train), **values["train"]})
            data = DataConfig(**{**_fields(defaults.data), **values["data"]})
        except (TypeError, ValueError) as exc:
            raise ConfigKeyError(str(exc)) from None
        return cls(net, train, data)

    @classmethod
    def from_text(cls, text):
        items = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigKeyError(f"line {lineno}: expected key=value, got {line!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            if k in items:
                raise ConfigKeyError(f"line {lineno}: duplicate key {k!r}")
            items[k] = v
        return cls.from_dict(items)

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text())

    def save(self, path):
        Path(path).write_text(self.to_text())

    def with_overrides(self, **flat):
        """Copy with dotted-key overrides, e.g. ``{"asm.n_branches": "0"}``."""
        items = self.to_dict()
        items.update({k: v if isinstance(v, str) else _format(v) for k, v in flat.items()})
        return type(self).from_dict(items)


def _fields(obj):
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw, default, key):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        if isinstance(default, tuple):
            elem = type(default[0]) if default else str
            return tuple(elem(x.strip()) for x in raw.split(",") if x.strip())
        return type(default)(raw)
    except ValueError:
        raise ConfigKeyError(f"bad value for {key}: {raw!r}") from None


PRESETS = {
    "m1": {"asm.n_branches": "0"},
    "m2": {"asm.score_mode": "none"},
    "m3": {"asm.score_mode": "individual_only"},
    "m4": {"asm.score_mode": "group_only"},
    "m5": {"asm.score_mode": "both"},
}


def preset(name, base=None):
    """Ablation presets: m1 no ASM, m2 fixed scan, m3 individual score only,
    m4 group score only, m5 both scores."""
    base = base or RunConfig()
    if name not in PRESETS:
        raise ConfigKeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    overrides = dict(PRESETS[name])
    if name != "m1" and base.asm.n_branches == 0:
        overrides["asm.n_branches"] = "1"
    return base.with_overrides(**overrides)
