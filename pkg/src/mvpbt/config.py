"""Engine configuration and the plain-text key=value config file format."""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import InvalidSpec


@dataclass
class Config:
    buffer_capacity_bytes: int = 4 * 1024 * 1024
    evict_threshold_pct: int = 90
    staleness_evictions: int = 4
    page_size: int = 8192
    write_buffer_bytes: int = 64 * 1024
    bloom_fpr: float = 0.02
    pbf_fpr: float = 0.10
    pbf_prefix_len: int = 4
    # Engine toggles beyond the core storage keys.
    filters_enabled: bool = True
    gc_enabled: bool = True
    visibility_check: bool = True
    unique: bool = False
    trace_enabled: bool = False
    value_bytes: int = 8

    def __post_init__(self) -> None:
        if self.page_size < 512:
            raise InvalidSpec("page_size must be at least 512 bytes")
        if not 0 < self.evict_threshold_pct <= 100:
            raise InvalidSpec("evict_threshold_pct must be in (0, 100]")
        if not 0.0 < self.bloom_fpr < 1.0 or not 0.0 < self.pbf_fpr < 1.0:
            raise InvalidSpec("filter target fpr must be in (0, 1)")


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def load_config(path: str) -> Config:
    """Parse a key=value file (blank lines and # comments allowed)."""
    values: dict[str, object] = {}
    typemap = {f.name: f.type for f in fields(Config)}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise InvalidSpec(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in typemap:
                raise InvalidSpec(f"{path}:{lineno}: unknown config key {key!r}")
            kind = typemap[key]
            try:
                if kind == "bool":
                    values[key] = _BOOL_WORDS[value.lower()]
                elif kind == "float":
                    values[key] = float(value)
                else:
                    values[key] = int(value)
            except (KeyError, ValueError) as exc:
                raise InvalidSpec(f"{path}:{lineno}: bad value for {key}: {value!r}") from exc
    return Config(**values)


def dump_config(cfg: Config, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in fields(Config):
            value = getattr(cfg, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            fh.write(f"{f.name}={value}\n")
