"""Plain-text ``key = value`` run configuration.

Every key has a default and unknown keys are rejected. :func:`dumps`
emits keys in a fixed order with a canonical value format, so dumping a
parsed dump reproduces it byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from .phantom import PhantomSpec
from .regions import RegionTable, default_table
from .training import TrainConfig
from .unet import UNetConfig

DEFAULT_THRESHOLD = 1.11
DESK_BASE_CHANNELS = 8


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    model: UNetConfig = field(default_factory=lambda: UNetConfig(base_channels=DESK_BASE_CHANNELS))
    train: TrainConfig = field(default_factory=TrainConfig)
    threshold: float = DEFAULT_THRESHOLD
    region_table: str = ""

    def regions(self) -> RegionTable:
        return RegionTable.load(self.region_table) if self.region_table else default_table()


# section -> field names exposed as keys, in dump order
_SECTIONS = {
    "phantom": (
        "dims",
        "uptake_mean",
        "scalp_uptake",
        "cortical_uplift",
        "noise_sigma",
        "smooth_fwhm_vox",
        "jitter_rotation_deg",
        "jitter_scale",
        "jitter_shift_vox",
        "jitter_sector_deg",
        "seed",
    ),
    "model": ("in_channels", "num_classes", "base_channels"),
    "train": (
        "max_epochs",
        "patience",
        "lr",
        "beta1",
        "beta2",
        "eps",
        "batch_size",
        "seed",
        "split_fractions",
        "class_weighting",
        "checkpoint",
    ),
}
_TOP = {"eval.threshold": "threshold", "paths.region_table": "region_table"}


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(key: str, text: str, like):
    try:
        if isinstance(like, bool):
            if text not in ("true", "false"):
                raise ValueError("expected true or false")
            return text == "true"
        if isinstance(like, tuple):
            item = type(like[0])
            return tuple(item(v) for v in text.split(","))
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        return text or None
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}: {exc}") from None


def items(cfg: RunConfig) -> list[tuple[str, object]]:
    out = []
    for section, names in _SECTIONS.items():
        obj = getattr(cfg, section)
        out += [(f"{section}.{n}", getattr(obj, n)) for n in names]
    out += [(k, getattr(cfg, attr)) for k, attr in _TOP.items()]
    return out


def dumps(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in items(cfg))


def loads(text: str, source: str = "<config>") -> RunConfig:
    base = RunConfig()
    defaults = dict(items(base))
    updates: dict[str, dict[str, object]] = {s: {} for s in _SECTIONS}
    top: dict[str, object] = {}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        like = defaults[key]
        if like is None:
            like = ""
        parsed = _parse_value(key, value, like)
        if key in _TOP:
            top[_TOP[key]] = parsed if parsed is not None else ""
        else:
            section, name = key.split(".", 1)
            updates[section][name] = parsed
    try:
        return replace(
            base,
            phantom=replace(base.phantom, **updates["phantom"]),
            model=replace(base.model, **updates["model"]),
            train=replace(base.train, **updates["train"]),
            **top,
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    return loads(text, str(path))
