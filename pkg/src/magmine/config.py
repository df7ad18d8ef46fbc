"""Run configuration: nested sections, dotted flag overrides, derived seeds."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .mil_trainer import MilConfig
from .mining import MiningConfig
from .supervised_trainer import SupConfig
from .synthgen import SynthConfig

SECTIONS = {"synth": SynthConfig, "mil": MilConfig, "sup": SupConfig, "mining": MiningConfig}
TOP_LEVEL = ("master_seed", "iters", "manifest", "out")


class ConfigError(ValueError):
    """Unknown key, wrong type, or a value rejected by a section's invariants."""


def derive_seed(master_seed: int, stage: str) -> int:
    """Stage seed from the master seed: first 4 bytes of sha256("<master>:<stage>")."""
    digest = hashlib.sha256(f"{master_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def content_hash(*parts) -> str:
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, (bytes, bytearray)):
            h.update(part)
        else:
            h.update(canonical_json(part).encode())
    return h.hexdigest()


@dataclass
class RunConfig:
    master_seed: int = 0
    iters: int = 1
    manifest: str | None = None
    out: str | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    mil: MilConfig = field(default_factory=MilConfig)
    sup: SupConfig = field(default_factory=SupConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)

    def validate(self) -> None:
        if self.iters < 1:
            raise ConfigError("iters must be >= 1")
        for name in SECTIONS:
            try:
                getattr(self, name).validate()
            except ValueError as exc:
                raise ConfigError(f"{name}: {exc}") from exc

    def to_json(self) -> dict:
        doc = {k: getattr(self, k) for k in TOP_LEVEL}
        for name in SECTIONS:
            sec = asdict(getattr(self, name))
            doc[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
        return doc


def _coerce(where: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{where}: expected a list of integers, got {value!r}")
        if len(value) != len(default):
            raise ConfigError(f"{where}: expected {len(default)} entries, got {len(value)}")
        return tuple(value)
    if default is None:
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{where}: expected a path string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported field type")


def _build_section(name: str, raw: dict, master_seed: int):
    cls = SECTIONS[name]
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object")
    defaults = cls()
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{name}: unknown keys {sorted(unknown)}")
    values = {k: _coerce(f"{name}.{k}", v, getattr(defaults, k)) for k, v in raw.items()}
    values.setdefault("seed", derive_seed(master_seed, name))
    return cls(**values)


def resolve(doc: dict) -> RunConfig:
    """RunConfig from a nested dict; missing section seeds are derived from ``master_seed``."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - set(TOP_LEVEL) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}")
    base = RunConfig()
    top = {k: _coerce(k, doc[k], getattr(base, k)) for k in TOP_LEVEL if k in doc}
    master = top.get("master_seed", base.master_seed)
    secs = {name: _build_section(name, doc.get(name, {}), master) for name in SECTIONS}
    cfg = RunConfig(**top, **secs)
    cfg.validate()
    return cfg


def is_run_config(doc: dict) -> bool:
    return bool(set(doc) & (set(TOP_LEVEL) | set(SECTIONS)))


def _parse_flag_value(text: str, default):
    if isinstance(default, str) or (default is None and not text.startswith(("[", "{"))):
        return None if text == "null" else text
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse flag value {text!r}") from exc


def apply_overrides(doc: dict, overrides: list[tuple[str, str]]) -> dict:
    """Apply ``("mil.lr", "1e-3")`` style overrides (string values) to a raw config dict."""
    doc = json.loads(json.dumps(doc))
    base = RunConfig()
    for key, text in overrides:
        parts = key.split(".")
        if len(parts) == 1 and parts[0] in TOP_LEVEL:
            doc[parts[0]] = _parse_flag_value(text, getattr(base, parts[0]))
        elif len(parts) == 2 and parts[0] in SECTIONS:
            sec, name = parts
            defaults = SECTIONS[sec]()
            if not hasattr(defaults, name):
                raise ConfigError(f"unknown override --{key}")
            doc.setdefault(sec, {})[name] = _parse_flag_value(text, getattr(defaults, name))
        else:
            raise ConfigError(f"unknown override --{key}")
    return doc


def split_override_args(argv: list[str]) -> tuple[list[str], list[tuple[str, str]]]:
    """Separate ``--section.key value`` (or ``--section.key=value``) pairs from other arguments."""
    rest, overrides = [], []
    i = 0
    while i < len(argv):
        arg = argv[i]
        head = arg[2:].split("=", 1)[0] if arg.startswith("--") else ""
        if "." in head or head in ("master_seed",):
            if "=" in arg:
                key, val = arg[2:].split("=", 1)
            else:
                if i + 1 >= len(argv):
                    raise ConfigError(f"missing value for {arg}")
                key, val = arg[2:], argv[i + 1]
                i += 1
            overrides.append((key, val))
        else:
            rest.append(arg)
        i += 1
    return rest, overrides


def load_config_doc(path, section: str | None = None) -> dict:
    """Raw config dict from a JSON file.

    A file holding only one section's fields (e.g. a bare SynthConfig) is
    nested under ``section``.
    """
    if path is None:
        return {}
    with open(Path(path)) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    if doc and not is_run_config(doc):
        if section is None:
            raise ConfigError(f"{path}: not a run config")
        doc = {section: doc}
    return doc


def parse_config(path=None, overrides: list[tuple[str, str]] | None = None, section: str | None = None) -> RunConfig:
    """Resolved RunConfig: file values, then flag overrides, then derived seeds."""
    doc = load_config_doc(path, section)
    return resolve(apply_overrides(doc, overrides or []))
