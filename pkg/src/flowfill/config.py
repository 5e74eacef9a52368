"""Flat ``key = value`` run configuration shared by every command.

Keys mirror the fields of :class:`ModelConfig`, :class:`TrainConfig` and
:class:`SynthSpec`, plus a few run-level paths.  Lines starting with ``#``
are comments.  Unknown keys are rejected so typos never pass silently.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .model import ModelConfig
from .synth import SynthSpec
from .training import PATIENCE_PROFILES, TrainConfig


class ConfigError(ValueError):
    pass


# key -> (section, python type); "seed" is shared by every section
_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "synth": SynthSpec}
_RUN_KEYS = {
    "train_manifest": str,
    "val_manifest": str,
    "checkpoint_every": int,
    "profile": str,
}


def _field_types() -> dict[str, tuple[str, type]]:
    out: dict[str, tuple[str, type]] = {}
    for section, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            default = f.default
            typ = type(default) if default is not dataclasses.MISSING else str
            out.setdefault(f.name, (section, typ))
    for k, t in _RUN_KEYS.items():
        out[k] = ("run", t)
    return out


FIELDS = _field_types()


def _coerce(key: str, raw: str, typ: type):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is tuple:
            return tuple(float(x) for x in raw.replace(",", " ").split())
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


def parse_text(text: str, origin: str = "<config>") -> dict[str, object]:
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in FIELDS:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, FIELDS[key][1])
    return values


@dataclasses.dataclass
class RunConfig:
    values: dict[str, object] = dataclasses.field(default_factory=dict)

    @classmethod
    def load(cls, path=None, overrides: dict[str, str] | None = None) -> "RunConfig":
        """Read ``path`` (optional) then apply string ``overrides``."""
        values: dict[str, object] = {}
        if path is not None:
            values.update(parse_text(Path(path).read_text(), str(path)))
        for key, raw in (overrides or {}).items():
            if key not in FIELDS:
                raise ConfigError(f"unknown key {key!r}")
            values[key] = _coerce(key, str(raw), FIELDS[key][1])
        cfg = cls(values)
        cfg._apply_profile()
        return cfg

    def _apply_profile(self) -> None:
        prof = self.values.get("profile")
        if prof is None:
            return
        if prof not in PATIENCE_PROFILES:
            raise ConfigError(f"profile must be one of {sorted(PATIENCE_PROFILES)}, got {prof!r}")
        self.values.setdefault("patience", PATIENCE_PROFILES[prof])

    def get(self, key, default=None):
        return self.values.get(key, default)

    def _build(self, cls):
        names = {f.name for f in dataclasses.fields(cls)}
        kwargs = {k: v for k, v in self.values.items() if k in names}
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{cls.__name__}: {e}") from None

    def model(self) -> ModelConfig:
        return self._build(ModelConfig)

    def train(self, **defaults) -> TrainConfig:
        merged = RunConfig({**defaults, **self.values})
        return merged._build(TrainConfig)

    def synth(self) -> SynthSpec:
        return self._build(SynthSpec)

    def resolved_text(self, *objs) -> str:
        """Every field of the built config objects with its effective value,
        followed by the run-level keys."""
        lines = []
        seen = set()
        for obj in objs:
            lines.append(f"# {type(obj).__name__}")
            for f in dataclasses.fields(obj):
                if f.name in seen:
                    continue
                seen.add(f.name)
                lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
        run = [(k, v) for k, v in self.values.items() if FIELDS[k][0] == "run"]
        if run:
            lines.append("# run")
            lines += [f"{k} = {_fmt(v)}" for k, v in sorted(run)]
        return "\n".join(lines) + "\n"

    def write_resolved(self, out_dir, *objs) -> Path:
        path = Path(out_dir) / "config.resolved"
        path.write_text(self.resolved_text(*objs))
        return path


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return " ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)
