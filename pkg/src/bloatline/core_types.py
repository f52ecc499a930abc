"""Parameter model shared by the fluid, equilibrium and packet-level code.

Canonical units everywhere: windows and queues in packets, time in seconds,
capacity in packets per second. Conversions happen here and nowhere else.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping


class ConfigError(ValueError):
    """Raised for an invalid or unparsable scenario configuration."""


@dataclass(frozen=True)
class LinkParams:
    capacity_bits_per_s: float = 1e6
    packet_size_bytes: int = 1250
    buffer_packets: int = 100
    prop_delay_s: float = 0.05
    jitter_s: float = 0.001

    def __post_init__(self) -> None:
        if not self.capacity_bits_per_s > 0:
            raise ConfigError("capacity_bits_per_s must be > 0")
        if self.packet_size_bytes <= 0:
            raise ConfigError("packet_size_bytes must be > 0")
        if self.buffer_packets <= 0:
            raise ConfigError("buffer_packets must be > 0")
        if self.prop_delay_s < 0 or self.jitter_s < 0:
            raise ConfigError("delays must be >= 0")

    @property
    def capacity_pkts_per_s(self) -> float:
        return self.capacity_bits_per_s / (8.0 * self.packet_size_bytes)

    @property
    def packet_time_s(self) -> float:
        """Serialization time of one packet."""
        return 8.0 * self.packet_size_bytes / self.capacity_bits_per_s

    @property
    def bdp_packets(self) -> float:
        """Packets in flight on an empty pipe, C * Tp / P."""
        return self.capacity_pkts_per_s * self.prop_delay_s


@dataclass(frozen=True)
class RedProfile:
    min_th_packets: float = 10.0
    max_th_packets: float = 100.0
    max_p: float = 0.1
    ewma_weight: float = 0.002
    sample_period_s: float = 0.01

    def __post_init__(self) -> None:
        if self.min_th_packets < 0:
            raise ConfigError("min_th_packets must be >= 0")
        if not self.max_th_packets > self.min_th_packets:
            raise ConfigError("max_th_packets must exceed min_th_packets")
        if not 0 < self.max_p <= 1:
            raise ConfigError("max_p must lie in (0, 1]")
        if not 0 < self.ewma_weight < 1:
            raise ConfigError("ewma_weight must lie in (0, 1)")
        if not self.sample_period_s > 0:
            raise ConfigError("sample_period_s must be > 0")

    @property
    def ewma_rate(self) -> float:
        """Relaxation rate of the averaged queue toward the instantaneous one (1/s)."""
        return -math.log1p(-self.ewma_weight) / self.sample_period_s


@dataclass(frozen=True)
class LedbatParams:
    target_s: float = 0.1
    gain: float = 1.0

    def __post_init__(self) -> None:
        if not self.target_s > 0:
            raise ConfigError("target_s must be > 0")


@dataclass(frozen=True)
class FlowPopulation:
    n_tcp: int = 1
    n_ledbat: int = 1

    def __post_init__(self) -> None:
        if self.n_tcp < 0 or self.n_ledbat < 0:
            raise ConfigError("flow counts must be >= 0")
        if self.n_tcp + self.n_ledbat < 1:
            raise ConfigError("at least one flow is required")

    @property
    def total(self) -> int:
        return self.n_tcp + self.n_ledbat


@dataclass(frozen=True)
class ScenarioConfig:
    """Complete description of one experiment. ``red=None`` selects DropTail."""

    link: LinkParams = field(default_factory=LinkParams)
    red: RedProfile | None = None
    ledbat: LedbatParams = field(default_factory=LedbatParams)
    flows: FlowPopulation = field(default_factory=FlowPopulation)
    horizon_s: float = 300.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not self.horizon_s > 0:
            raise ConfigError("horizon_s must be > 0")
        if not self.horizon_s > 10 * self.link.prop_delay_s:
            raise ConfigError("horizon_s must exceed 10 propagation delays")
        if self.red is not None and self.red.max_th_packets > self.link.buffer_packets:
            raise ConfigError("max_th_packets must not exceed buffer_packets")

    @property
    def discipline(self) -> str:
        return "droptail" if self.red is None else "red"

    def replace(self, **changes: Any) -> ScenarioConfig:
        return dataclasses.replace(self, **changes)


def red_drop_prob(avg_queue_packets: float, red: RedProfile) -> float:
    """Piecewise-linear RED drop probability, with a hard jump to 1 above max_th."""
    if avg_queue_packets < red.min_th_packets:
        return 0.0
    if avg_queue_packets > red.max_th_packets:
        return 1.0
    span = red.max_th_packets - red.min_th_packets
    return red.max_p * (avg_queue_packets - red.min_th_packets) / span


def queue_delay_s(queue_packets: float, link: LinkParams) -> float:
    return queue_packets / link.capacity_pkts_per_s


def delay_to_packets(delay_s: float, link: LinkParams) -> float:
    return delay_s * link.capacity_pkts_per_s


# --------------------------------------------------------------------------
# flat key=value configuration

_SECTIONS = {
    "link": LinkParams,
    "red": RedProfile,
    "ledbat": LedbatParams,
    "flows": FlowPopulation,
}
_TOP_LEVEL = ("horizon_s", "rng_seed")


def _field_types() -> dict[str, tuple[str | None, type]]:
    """Map every accepted key (dotted and bare) to (section, python type)."""
    keys: dict[str, tuple[str | None, type]] = {}
    for section, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            kind = int if f.type in ("int", int) else float
            keys[f"{section}.{f.name}"] = (section, kind)
            keys[f.name] = (section, kind)
    keys["horizon_s"] = (None, float)
    keys["rng_seed"] = (None, int)
    keys["discipline"] = (None, str)
    return keys


CONFIG_KEYS = _field_types()


def canonical_key(key: str) -> str:
    """Resolve a bare or dotted key to its dotted form; raise ConfigError if unknown."""
    key = key.strip()
    if key not in CONFIG_KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    section, _ = CONFIG_KEYS[key]
    if section is None or "." in key:
        return key
    return f"{section}.{key}"


def _coerce(key: str, raw: Any) -> Any:
    _, kind = CONFIG_KEYS[key]
    if kind is str:
        return str(raw).strip().lower()
    try:
        if kind is int:
            value = float(raw)
            if value != int(value):
                raise ConfigError(f"{key} must be an integer, got {raw!r}")
            return int(value)
        return float(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def config_to_flat(cfg: ScenarioConfig) -> dict[str, Any]:
    """Flatten a config to dotted keys; ``discipline`` records RED vs DropTail."""
    flat: dict[str, Any] = {"discipline": cfg.discipline}
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        if obj is None:
            continue
        for f in dataclasses.fields(obj):
            flat[f"{section}.{f.name}"] = getattr(obj, f.name)
    flat["horizon_s"] = cfg.horizon_s
    flat["rng_seed"] = cfg.rng_seed
    return flat


def config_from_flat(values: Mapping[str, Any], base: ScenarioConfig | None = None) -> ScenarioConfig:
    """Build a config by overlaying ``values`` on ``base`` (defaults if omitted).

    Setting any ``red.*`` key implies RED unless ``discipline=droptail`` is
    also given; RED fields not mentioned fall back to the base profile or the
    RedProfile defaults.
    """
    base = base or ScenarioConfig()
    merged = config_to_flat(base)
    touched_red = False
    for key, raw in values.items():
        ckey = canonical_key(key)
        merged[ckey] = _coerce(ckey, raw)
        touched_red |= ckey.startswith("red.")

    discipline = merged.pop("discipline")
    explicit = {canonical_key(k) for k in values}
    if "discipline" not in explicit and touched_red:
        discipline = "red"
    if discipline not in ("red", "droptail"):
        raise ConfigError(f"discipline must be 'red' or 'droptail', got {discipline!r}")

    parts: dict[str, dict[str, Any]] = {s: {} for s in _SECTIONS}
    top: dict[str, Any] = {}
    for key, value in merged.items():
        if "." in key:
            section, name = key.split(".", 1)
            parts[section][name] = value
        else:
            top[key] = value
    red = RedProfile(**parts["red"]) if discipline == "red" else None
    return ScenarioConfig(
        link=LinkParams(**parts["link"]),
        red=red,
        ledbat=LedbatParams(**parts["ledbat"]),
        flows=FlowPopulation(**parts["flows"]),
        **top,
    )


def parse_assignments(lines: Iterable[str]) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(
    path: str | Path | None = None,
    overrides: Iterable[str] = (),
    base: ScenarioConfig | None = None,
) -> ScenarioConfig:
    """Read a flat config file and apply ``key=value`` overrides on top."""
    values: dict[str, str] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values.update(parse_assignments(text.splitlines()))
    values.update(parse_assignments(overrides))
    return config_from_flat(values, base)


def dump_config(cfg: ScenarioConfig) -> str:
    return "".join(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n"
                   for k, v in config_to_flat(cfg).items())


def config_hash(cfg: ScenarioConfig) -> str:
    """Short stable digest of the fully resolved configuration."""
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:16]


def default_red_scenario(**red_changes: Any) -> ScenarioConfig:
    """1 Mbps / 100 packet bottleneck with RED 10/100/0.1 and one flow per class."""
    return ScenarioConfig(red=RedProfile(**red_changes))
