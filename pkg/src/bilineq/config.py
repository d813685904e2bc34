"""Sectioned key-value scenario configuration.

The file format is INI-like::

    [network]
    users_per_cell = 5

    [channel]
    angular_spread_deg = 10

    [sim]
    antennas = 16, 32, 64
    snr_db = -6

Every key has a default except ``sim.antennas``. Unknown sections or keys are
rejected, and every error message carries the offending ``section.key`` path.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

METHODS = ("ls-mf", "mmse-mf", "obe", "obe-d", "lmmse", "mmse-zf")
METRICS = ("min-user-rate", "per-user-rate", "mean-rate")
COVARIANCE_MODES = ("toeplitz", "circulant", "diagonal")
ANGULAR_MODELS = ("laplace", "flat")
DROP_MODES = ("fixed", "per-point")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted path of the culprit."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class NetworkConfig:
    cells: int = 3
    cell_diameter_m: float = 500.0
    user_disc_radius_m: float | None = None  # None -> cell_diameter_m / 4
    users_per_cell: int = 5
    pilots: int | None = None  # None -> users_per_cell (full reuse)
    pathloss_exponent: float = 3.7
    reference_distance_m: float = 50.0

    @property
    def disc_radius(self):
        if self.user_disc_radius_m is None:
            return self.cell_diameter_m / 4.0
        return self.user_disc_radius_m

    @property
    def n_pilots(self):
        return self.users_per_cell if self.pilots is None else self.pilots


@dataclass(frozen=True)
class ChannelConfig:
    clusters: int = 3
    angular_spread_deg: float = 10.0
    cluster_offset_deg: float = 15.0
    angular_model: str = "laplace"
    covariance_mode: str = "toeplitz"
    quadrature_nodes: int = 2048
    # pilot index whose users all reuse the first member's density (engineered degeneracy)
    duplicate_group: int | None = None


@dataclass(frozen=True)
class SimConfig:
    antennas: tuple[int, ...]
    snr_db: tuple[float, ...] = (-6.0,)
    rho_tr_mode: str = "equal-to-data"  # or "fixed(<training SNR in dB>)"
    trials: int = 500
    seed: int = 0
    methods: tuple[str, ...] = METHODS
    metrics: tuple[str, ...] = ("min-user-rate", "per-user-rate")
    drop_mode: str = "fixed"

    @property
    def rho_tr_fixed_db(self):
        """Training SNR in dB for ``fixed(...)`` mode, else ``None``."""
        mode = self.rho_tr_mode
        if mode == "equal-to-data":
            return None
        return float(mode[len("fixed("):-1])


@dataclass(frozen=True)
class CheckConfig:
    oracle_tol: float = 1e-9
    oracle_antennas: int = 6
    gap_antennas: tuple[int, ...] = (64, 128, 256, 512)


@dataclass(frozen=True)
class ScenarioConfig:
    sim: SimConfig
    network: NetworkConfig = field(default_factory=NetworkConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    check: CheckConfig = field(default_factory=CheckConfig)

    def __post_init__(self):
        validate(self)

    def replace(self, **sections):
        """Copy with some sections replaced, e.g. ``cfg.replace(sim=...)``."""
        return dataclasses.replace(self, **sections)


_SECTIONS = {
    "network": NetworkConfig,
    "channel": ChannelConfig,
    "sim": SimConfig,
    "check": CheckConfig,
}


def _parse_value(key, raw, annotation):
    raw = raw.strip()
    try:
        if annotation.startswith("tuple[int"):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if annotation.startswith("tuple[float"):
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if annotation.startswith("tuple[str"):
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        if annotation.endswith("| None") and raw.lower() in ("", "none"):
            return None
        if annotation.startswith("int"):
            return int(raw)
        if annotation.startswith("float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {annotation}") from None


def _format_value(value):
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("<file>", f"malformed config: {exc}".replace("\n", " ")) from None

    unknown = [s for s in parser.sections() if s not in _SECTIONS]
    if unknown:
        raise ConfigError(unknown[0], "unknown section")

    sections = {}
    for name, cls in _SECTIONS.items():
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                path = f"{name}.{key}"
                if key not in fields:
                    raise ConfigError(path, "unknown key")
                values[key] = _parse_value(path, raw, str(fields[key].type))
        if name == "sim":
            if "antennas" not in values:
                raise ConfigError("sim.antennas", "missing required key")
            sections[name] = cls(**values)
        elif values:
            sections[name] = cls(**values)
    return ScenarioConfig(**sections)


def parse_config(path):
    """Read and validate a configuration file, filling documented defaults."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError("<file>", f"no such config file: {path}")
    return parse_config_text(path.read_text())


def dump_config(cfg):
    """Serialize to text that :func:`parse_config_text` maps back to ``cfg``."""
    lines = []
    for name in _SECTIONS:
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in dataclasses.fields(section):
            lines.append(f"{f.name} = {_format_value(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def _require(cond, key, message):
    if not cond:
        raise ConfigError(key, message)


def validate(cfg):
    net, ch, sim, chk = cfg.network, cfg.channel, cfg.sim, cfg.check
    _require(net.cells in (1, 3), "network.cells", "only 1 or 3 cells are supported")
    _require(net.cell_diameter_m > 0, "network.cell_diameter_m", "must be positive")
    _require(net.disc_radius > 0, "network.user_disc_radius_m", "must be positive")
    _require(net.users_per_cell >= 1, "network.users_per_cell", "must be at least 1")
    _require(net.n_pilots >= 1, "network.pilots", "must be at least 1")
    _require(
        net.users_per_cell <= net.n_pilots,
        "network.users_per_cell",
        f"users_per_cell ({net.users_per_cell}) exceeds the pilot count ({net.n_pilots}); "
        "users within a cell need distinct pilots",
    )
    _require(net.pathloss_exponent > 0, "network.pathloss_exponent", "must be positive")
    _require(net.reference_distance_m > 0, "network.reference_distance_m", "must be positive")

    _require(ch.clusters >= 1, "channel.clusters", "must be at least 1")
    _require(0 < ch.angular_spread_deg < 90, "channel.angular_spread_deg", "must lie in (0, 90)")
    _require(0 <= ch.cluster_offset_deg < 90, "channel.cluster_offset_deg", "must lie in [0, 90)")
    _require(ch.angular_model in ANGULAR_MODELS, "channel.angular_model", f"must be one of {ANGULAR_MODELS}")
    _require(ch.covariance_mode in COVARIANCE_MODES, "channel.covariance_mode", f"must be one of {COVARIANCE_MODES}")
    _require(ch.quadrature_nodes >= 64, "channel.quadrature_nodes", "must be at least 64")
    if ch.duplicate_group is not None:
        _require(0 <= ch.duplicate_group < net.users_per_cell, "channel.duplicate_group", "no such pilot group")

    _require(len(sim.antennas) > 0, "sim.antennas", "must be a nonempty list")
    _require(all(m >= 1 for m in sim.antennas), "sim.antennas", "antenna counts must be positive")
    _require(len(sim.snr_db) > 0, "sim.snr_db", "must be a nonempty list")
    mode = sim.rho_tr_mode
    if mode != "equal-to-data":
        ok = mode.startswith("fixed(") and mode.endswith(")")
        if ok:
            try:
                float(mode[len("fixed("):-1])
            except ValueError:
                ok = False
        _require(ok, "sim.rho_tr_mode", "must be 'equal-to-data' or 'fixed(<dB>)'")
    _require(sim.trials >= 1, "sim.trials", "must be at least 1")
    _require(sim.seed >= 0, "sim.seed", "must be nonnegative")
    _require(len(sim.methods) > 0, "sim.methods", "must be a nonempty list")
    for m in sim.methods:
        _require(m in METHODS, "sim.methods", f"unknown method {m!r}")
    _require(len(set(sim.methods)) == len(sim.methods), "sim.methods", "duplicate method")
    _require(len(sim.metrics) > 0, "sim.metrics", "must be a nonempty list")
    for m in sim.metrics:
        _require(m in METRICS, "sim.metrics", f"unknown metric {m!r}")
    _require(sim.drop_mode in DROP_MODES, "sim.drop_mode", f"must be one of {DROP_MODES}")

    _require(chk.oracle_tol > 0, "check.oracle_tol", "must be positive")
    _require(1 <= chk.oracle_antennas <= 8, "check.oracle_antennas", "must lie in [1, 8]")
    _require(len(chk.gap_antennas) >= 2, "check.gap_antennas", "need at least two antenna counts")
