"""Declarative model descriptions.

A model config is a mapping (YAML or JSON on disk)::

    name: cifar-dynamic
    input_shape: [3, 32, 32]
    activation: dynamic          # default for blocks that do not set one
    reduction: 16
    seed: 0
    stem: {out_channels: 16, kernel: 3, stride: 1}
    blocks:
      - {in_channels: 16, out_channels: 16, stride: 1}
      - {in_channels: 16, out_channels: 32, stride: 2, activation: static}
    classifier: {classes: 10}

``stem`` and ``classifier`` may be omitted (``null``).  A block either keeps
its width or doubles it; doubling duplicates the 1x1 stage.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import yaml

from .errors import InvalidConfig

STATIC = "static"
DYNAMIC = "dynamic"
DYNAMIC_SIGN_ONLY = "dynamic-sign-only"
REAL = "real"
ACTIVATION_MODES = (STATIC, DYNAMIC, DYNAMIC_SIGN_ONLY, REAL)


@dataclass(frozen=True)
class StemSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1


@dataclass(frozen=True)
class BlockSpec:
    in_channels: int
    out_channels: int
    stride: int = 1
    activation: str = DYNAMIC

    @property
    def sign_dynamic(self) -> bool:
        return self.activation in (DYNAMIC, DYNAMIC_SIGN_ONLY)

    @property
    def prelu_dynamic(self) -> bool:
        return self.activation == DYNAMIC

    @property
    def branches(self) -> int:
        return self.out_channels // self.in_channels


@dataclass(frozen=True)
class ClassifierSpec:
    classes: int


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple
    stem: StemSpec | None = None
    blocks: tuple = ()
    classifier: ClassifierSpec | None = None
    reduction: int = 16
    seed: int = 0
    name: str = ""
    activation: str = DYNAMIC
    _shapes: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_shapes", tuple(_validate(self)))

    def with_activation(self, mode: str) -> "ModelConfig":
        """Same backbone with every block switched to ``mode``."""
        blocks = tuple(replace(b, activation=mode) for b in self.blocks)
        return replace(self, blocks=blocks, activation=mode)

    def with_seed(self, seed: int) -> "ModelConfig":
        return replace(self, seed=seed)

    def spatial_shapes(self):
        """``(c, h, w)`` entering each block, then the shape after the last."""
        return self._shapes

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "activation": self.activation,
            "reduction": self.reduction,
            "seed": self.seed,
            "stem": asdict(self.stem) if self.stem else None,
            "blocks": [asdict(b) for b in self.blocks],
            "classifier": asdict(self.classifier) if self.classifier else None,
        }
        return d

    def canonical_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return config_from_dict(d)


_TOP_KEYS = {"name", "input_shape", "activation", "reduction", "seed", "stem", "blocks", "classifier"}


def _int(value, path, minimum=None, allowed=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise InvalidConfig(path, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise InvalidConfig(path, f"must be >= {minimum}, got {value}")
    if allowed is not None and value not in allowed:
        raise InvalidConfig(path, f"must be one of {sorted(allowed)}, got {value}")
    return value


def _mapping(value, path, keys, required=()):
    if not isinstance(value, dict):
        raise InvalidConfig(path, f"expected a mapping, got {type(value).__name__}")
    unknown = set(value) - set(keys)
    if unknown:
        raise InvalidConfig(f"{path}.{sorted(unknown)[0]}", "unknown key")
    for k in required:
        if k not in value:
            raise InvalidConfig(f"{path}.{k}", "missing required key")
    return value


def _mode(value, path):
    if value not in ACTIVATION_MODES:
        raise InvalidConfig(path, f"activation must be one of {ACTIVATION_MODES}, got {value!r}")
    return value


def config_from_dict(d: dict) -> ModelConfig:
    d = _mapping(d, "config", _TOP_KEYS, required=("input_shape",))
    shape = d["input_shape"]
    if not isinstance(shape, (list, tuple)) or len(shape) != 3:
        raise InvalidConfig("input_shape", "expected [channels, height, width]")
    shape = tuple(_int(v, f"input_shape[{i}]", 1) for i, v in enumerate(shape))
    default_mode = _mode(d.get("activation", DYNAMIC), "activation")

    stem = None
    if d.get("stem") is not None:
        s = _mapping(d["stem"], "stem", {"out_channels", "kernel", "stride"}, ("out_channels",))
        stem = StemSpec(
            _int(s["out_channels"], "stem.out_channels", 1),
            _int(s.get("kernel", 3), "stem.kernel", 1),
            _int(s.get("stride", 1), "stem.stride", 1),
        )

    raw_blocks = d.get("blocks") or []
    if not isinstance(raw_blocks, list):
        raise InvalidConfig("blocks", "expected a list")
    blocks = []
    for i, b in enumerate(raw_blocks):
        p = f"blocks[{i}]"
        b = _mapping(b, p, {"in_channels", "out_channels", "stride", "activation"},
                     ("in_channels", "out_channels"))
        blocks.append(BlockSpec(
            _int(b["in_channels"], f"{p}.in_channels", 1),
            _int(b["out_channels"], f"{p}.out_channels", 1),
            _int(b.get("stride", 1), f"{p}.stride", allowed={1, 2}),
            _mode(b.get("activation", default_mode), f"{p}.activation"),
        ))

    classifier = None
    if d.get("classifier") is not None:
        c = _mapping(d["classifier"], "classifier", {"classes"}, ("classes",))
        classifier = ClassifierSpec(_int(c["classes"], "classifier.classes", 1))

    name = d.get("name", "") or ""
    if not isinstance(name, str):
        raise InvalidConfig("name", "expected a string")
    return ModelConfig(
        input_shape=shape,
        stem=stem,
        blocks=tuple(blocks),
        classifier=classifier,
        reduction=_int(d.get("reduction", 16), "reduction", 1),
        seed=_int(d.get("seed", 0), "seed", 0),
        name=name,
        activation=default_mode,
    )


def _validate(cfg: ModelConfig):
    c, h, w = cfg.input_shape
    if cfg.stem is not None:
        k, s = cfg.stem.kernel, cfg.stem.stride
        pad = k // 2
        h, w = (h + 2 * pad - k) // s + 1, (w + 2 * pad - k) // s + 1
        if h < 1 or w < 1:
            raise InvalidConfig("stem", "kernel larger than the input")
        c = cfg.stem.out_channels
    shapes = []
    for i, b in enumerate(cfg.blocks):
        p = f"blocks[{i}]"
        if b.in_channels != c:
            raise InvalidConfig(f"{p}.in_channels", f"expected {c} to chain with the previous layer")
        if b.out_channels not in (b.in_channels, 2 * b.in_channels):
            raise InvalidConfig(f"{p}.out_channels", "must equal in_channels or double it")
        if b.stride == 2 and (h % 2 or w % 2):
            raise InvalidConfig(f"{p}.stride", f"stride 2 needs even spatial size, got {h}x{w}")
        shapes.append((c, h, w))
        h, w = h // b.stride, w // b.stride
        c = b.out_channels
    shapes.append((c, h, w))
    return shapes


def load_config(path) -> ModelConfig:
    """Load a model config from a YAML/JSON file or a bundled config name."""
    p = Path(path)
    if not p.exists():
        bundled = bundled_config_path(str(path))
        if bundled is None:
            raise InvalidConfig("", f"no config file or bundled config named {path!r}")
        p = bundled
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise InvalidConfig("", f"{p}: not valid YAML ({exc})") from None
    return config_from_dict(data)


def bundled_config_names():
    root = resources.files("dybnn") / "configs"
    return sorted(f.name[:-5] for f in root.iterdir() if f.name.endswith(".yaml"))


def bundled_config_path(name: str):
    if name.endswith(".yaml"):
        name = name[:-5]
    candidate = resources.files("dybnn") / "configs" / f"{name}.yaml"
    return Path(str(candidate)) if candidate.is_file() else None
