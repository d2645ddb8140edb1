"""Run configuration: flat ``key = value`` text grouped in ``[section]`` blocks.

Sections are ``[federation] [cohort] [protocol] [model] [output]``. Every
diagnostic carries the 1-based line it refers to. Example::

    [federation]
    C = 1.0
    E = 1
    regimes = RND,BCDL,PFDL
    seeds = 0,1,2

    [cohort]
    n_test_clients = 2
    sessions_per_client = 2
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .cohort import CohortSpec
from .errors import ConfigError
from .federation import REGIMES, FederationConfig
from .regimes import ModelConfig, ProtocolConfig

SECTIONS = ("federation", "cohort", "protocol", "model", "output")

_FED_ALIASES = {"C": "client_fraction", "E": "local_epochs", "B": "batch_size",
                "F": "finetune_epochs", "alpha": "finetune_decay"}


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int_list(text: str) -> tuple:
    out = tuple(int(v) for v in text.split(",") if v.strip())
    if not out:
        raise ValueError("empty list")
    return out


def _regimes(text: str) -> tuple:
    out = tuple(v.strip().upper() for v in text.split(",") if v.strip())
    bad = [r for r in out if r not in REGIMES]
    if bad or not out:
        raise ValueError(f"unknown regime(s) {bad or text!r}; choose from {','.join(REGIMES)}")
    return out


def _typed(cls, key: str, text: str):
    """Convert ``text`` for dataclass field ``key`` by its annotated type."""
    kind = {f.name: f.type for f in fields(cls)}[key]
    if kind == "bool":
        return _bool(text)
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "tuple":
        return _int_list(text)
    return text


@dataclass(frozen=True)
class RunConfig:
    federation: FederationConfig = field(default_factory=FederationConfig)
    cohort: CohortSpec = field(default_factory=CohortSpec)
    corpus: Path | None = None
    n_pretrain_clients: int = 13  # corpus split only
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    regimes: tuple = REGIMES
    seeds: tuple = (0,)
    out_dir: Path = Path("out")
    inject_fault: bool = False  # test hook: leak one local block in the first PFDL upload
    cohort_per_seed: bool = False  # regenerate the synthetic cohort with each run seed
    digest: str = ""

    def with_overrides(self, seeds=None, out_dir=None) -> "RunConfig":
        cfg = self
        if seeds is not None:
            cfg = replace(cfg, seeds=tuple(seeds))
        if out_dir is not None:
            cfg = replace(cfg, out_dir=Path(out_dir))
        return cfg


def _sections(text: str, path):
    """``{section: {key: (value, line)}}`` plus each section's header line."""
    out = {name: {} for name in SECTIONS}
    headers = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", lineno, path)
            current = line[1:-1].strip().lower()
            if current not in out:
                raise ConfigError(f"unknown section [{current}]; expected one of {', '.join(SECTIONS)}",
                                  lineno, path)
            headers[current] = lineno
            continue
        if current is None:
            raise ConfigError("key outside of any section", lineno, path)
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno, path)
        key, value = (p.strip() for p in line.split("=", 1))
        if not key or not value:
            raise ConfigError("empty key or value", lineno, path)
        if key in out[current]:
            raise ConfigError(f"duplicate key {key!r} (first set on line {out[current][key][1]})", lineno, path)
        out[current][key] = (value, lineno)
    return out, headers


def _build(cls, entries: dict, header: int | None, path, aliases=None, extra=()):
    """Instantiate ``cls`` from section entries; keys in ``extra`` are returned aside."""
    names = {f.name for f in fields(cls)}
    kwargs, rest = {}, {}
    for key, (value, line) in entries.items():
        if key in extra:
            rest[key] = (value, line)
            continue
        name = (aliases or {}).get(key, key)
        if name not in names:
            raise ConfigError(f"unknown key {key!r}", line, path)
        try:
            kwargs[name] = value if cls is CohortSpec else _typed(cls, name, value)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}", line, path) from None
    try:
        obj = CohortSpec.from_mapping(kwargs) if cls is CohortSpec else cls(**kwargs)
    except (ValueError, TypeError) as exc:
        # cross-field checks cannot point at one key; blame the lone key or the header
        line = next(iter(entries.values()))[1] if len(entries) == 1 else header
        raise ConfigError(str(exc), line, path) from None
    return obj, rest


def parse_config(text: str, path=None) -> RunConfig:
    sections, headers = _sections(text, path)
    base = Path(path).parent if path is not None else Path(".")

    fed, rest = _build(FederationConfig, sections["federation"], headers.get("federation"), path,
                       _FED_ALIASES, extra=("regimes", "seeds", "inject_fault"))
    kwargs = {"federation": fed}
    for key, conv, name in (("regimes", _regimes, "regimes"), ("seeds", _int_list, "seeds"),
                            ("inject_fault", _bool, "inject_fault")):
        if key in rest:
            value, line = rest[key]
            try:
                kwargs[name] = conv(value)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}", line, path) from None

    cohort, rest = _build(CohortSpec, sections["cohort"], headers.get("cohort"), path,
                          extra=("corpus", "per_seed"))
    kwargs["cohort"] = cohort
    if "corpus" in rest:
        kwargs["corpus"] = base / rest["corpus"][0]
        kwargs["n_pretrain_clients"] = cohort.n_pretrain_clients
    if "per_seed" in rest:
        value, line = rest["per_seed"]
        try:
            kwargs["cohort_per_seed"] = _bool(value)
        except ValueError as exc:
            raise ConfigError(f"per_seed: {exc}", line, path) from None

    kwargs["protocol"], _ = _build(ProtocolConfig, sections["protocol"], headers.get("protocol"), path)
    kwargs["model"], _ = _build(ModelConfig, sections["model"], headers.get("model"), path)

    for key, (value, line) in sections["output"].items():
        if key != "dir":
            raise ConfigError(f"unknown key {key!r}", line, path)
        kwargs["out_dir"] = Path(value)
    kwargs["digest"] = hashlib.sha256(text.encode()).hexdigest()
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, path) from None
    return parse_config(text, p)
