"""``key = value`` run configuration with a fixed schema.

Lines are ``key = value``; ``#`` starts a comment, blank lines are
ignored. Every key must be in :data:`SCHEMA`; unknown or repeated keys
are errors. Values are parsed by the key's type.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .cells import BASE_CELLS, VARIANTS
from .estimator import parse_milestones

__all__ = ["ConfigError", "SCHEMA", "RunConfig", "parse_config", "load_config", "estimator_params"]


class ConfigError(ValueError):
    pass


def _bool(s):
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _choice(options):
    def parse(s):
        if s not in options:
            raise ValueError(f"expected one of {sorted(options)}, got {s!r}")
        return s

    return parse


def _crop(s):
    if s.lower() == "none":
        return None
    return int(s)


def _path(s):
    return None if s.lower() == "none" else s


# key -> (parser, default); a default of ... marks a required key
SCHEMA = {
    "data": (str, ...),
    "eval_data": (_path, None),
    "out_dir": (str, ...),
    "log": (_path, None),
    "variant": (_choice(VARIANTS), "rirn"),
    "base_cell": (_choice(BASE_CELLS), "plain"),
    "feat_channels": (int, 16),
    "hidden_channels": (int, 16),
    "epochs": (int, 40),
    "batch_size": (int, 4),
    "lr": (float, 1e-3),
    "lr_milestones": (parse_milestones, ((25, 0.1),)),
    "unroll": (int, 8),
    "crop": (_crop, 64),
    "windows_per_clip": (int, 1),
    "flip": (_bool, True),
    "seed": (int, 0),
}

ESTIMATOR_KEYS = (
    "variant", "base_cell", "feat_channels", "hidden_channels", "epochs", "batch_size", "lr",
    "lr_milestones", "unroll", "crop", "windows_per_clip", "flip", "seed",
)


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    @property
    def log_path(self):
        return Path(self.values["log"] or Path(self.values["out_dir"]) / "train.log")


def _split(line, where):
    key, sep, value = line.partition("=")
    key, value = key.strip(), value.strip()
    if not sep or not key:
        raise ConfigError(f"{where}: expected 'key = value', got {line.strip()!r}")
    return key, value


def _convert(key, raw, where):
    if key not in SCHEMA:
        raise ConfigError(f"{where}: unknown key {key!r}")
    parser, _ = SCHEMA[key]
    try:
        return parser(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None


def parse_config(text, overrides=(), source="<config>"):
    """Parse config text plus ``key=value`` override strings into a RunConfig."""
    given = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0]
        if not line.strip():
            continue
        where = f"{source}:{lineno}"
        key, raw = _split(line, where)
        if key in given:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        given[key] = _convert(key, raw, where)
    for item in overrides:
        key, raw = _split(item, "--override")
        given[key] = _convert(key, raw, f"--override {item!r}")
    values = {}
    for key, (_, default) in SCHEMA.items():
        if key in given:
            values[key] = given[key]
        elif default is ...:
            raise ConfigError(f"{source}: missing required key {key!r}")
        else:
            values[key] = default
    return RunConfig(values)


def load_config(path, overrides=()):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, overrides, source=str(path))


def estimator_params(cfg):
    return {k: cfg.values[k] for k in ESTIMATOR_KEYS}
