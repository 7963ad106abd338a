"""Experiment configuration and its INI-style text format.

A config file holds one section per scenario. Keys in ``[DEFAULT]`` apply to
every section. The keys ``filter``, ``measurement`` and ``truth_forcing``
accept comma-separated lists, which expand into the cartesian product of
scenarios (section name suffixed accordingly).
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import itertools
from dataclasses import dataclass

SYSTEMS = ("lorenz63", "lorenz96")
FILTERS = ("enppca", "enfa", "enkf")
MEASUREMENTS = ("l63_range", "l96_linear", "l96_nl1", "l96_nl2")
_LIST_KEYS = ("filter", "measurement", "truth_forcing")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BenchConfig:
    name: str = "default"
    system: str = "lorenz96"
    filter: str = "enppca"
    measurement: str = "l96_linear"
    truth_forcing: float = 8.0
    model_forcing: float = 8.0
    n_ensemble: int = 30
    m_latent: int = 5
    n_trials: int = 20
    n_cycles: int = 100
    dt_model: float = 0.001
    dt_obs: float = 0.1
    obs_noise_var: float = 1.0
    master_seed: int = 0
    em_tol: float = 1e-8
    em_max_iter: int = 500
    inflation: bool = True
    warm_start: bool = False
    standardize: bool = True

    def __post_init__(self):
        if self.system not in SYSTEMS:
            raise ConfigError(f"unknown system {self.system!r}")
        if self.filter not in FILTERS:
            raise ConfigError(f"unknown filter {self.filter!r}")
        if self.measurement not in MEASUREMENTS:
            raise ConfigError(f"unknown measurement {self.measurement!r}")
        if (self.system == "lorenz63") != (self.measurement == "l63_range"):
            raise ConfigError(f"measurement {self.measurement!r} does not fit system {self.system!r}")
        if self.n_ensemble < 2:
            raise ConfigError("n_ensemble must be >= 2")
        if self.filter != "enkf" and not 1 <= self.m_latent < self.n_ensemble:
            raise ConfigError("m_latent must satisfy 1 <= m_latent < n_ensemble")
        if self.n_trials < 1 or self.n_cycles < 1:
            raise ConfigError("n_trials and n_cycles must be positive")
        if self.dt_model <= 0 or self.dt_obs <= 0:
            raise ConfigError("time steps must be positive")
        ratio = self.dt_obs / self.dt_model
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 1:
            raise ConfigError("dt_obs must be an integer multiple of dt_model")
        if self.obs_noise_var <= 0:
            raise ConfigError("obs_noise_var must be positive")

    @property
    def scenario_id(self) -> str:
        if self.system == "lorenz63":
            return "lorenz63/l63_range"
        return f"{self.system}/{self.measurement}/F{self.truth_forcing:g}"

    def replace(self, **changes) -> "BenchConfig":
        return dataclasses.replace(self, **changes)


def lorenz63_defaults(**changes) -> BenchConfig:
    base = BenchConfig(name="lorenz63", system="lorenz63", measurement="l63_range",
                       m_latent=2, n_cycles=10, dt_model=0.1, dt_obs=0.4, n_trials=10)
    return base.replace(**changes)


def table1_grid(**changes) -> list[BenchConfig]:
    """The 15 Lorenz 96 scenarios (3 measurement models x 5 truth forcings) for both filters."""
    out = []
    for meas in ("l96_linear", "l96_nl1", "l96_nl2"):
        for forcing in (8.0, 9.0, 10.0, 11.0, 12.0):
            for filt in ("enkf", "enppca"):
                out.append(BenchConfig(name=f"{meas}-F{forcing:g}-{filt}", measurement=meas,
                                       truth_forcing=forcing, filter=filt).replace(**changes))
    return out


_FIELDS = {f.name: f for f in dataclasses.fields(BenchConfig)}


def _convert(key: str, raw: str):
    typ = _FIELDS[key].type
    raw = raw.strip()
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def _section_configs(name: str, items: dict[str, str]) -> list[BenchConfig]:
    unknown = set(items) - set(_FIELDS) - {"name"}
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    lists = {k: [v.strip() for v in items[k].split(",")] for k in _LIST_KEYS if k in items}
    expand = {k: v for k, v in lists.items() if len(v) > 1}
    combos = itertools.product(*expand.values()) if expand else [()]
    out = []
    for combo in combos:
        vals = dict(items)
        vals.update(zip(expand.keys(), combo))
        label = name
        if combo:
            label = name + "-" + "-".join(str(c) for c in combo)
        kwargs = {k: _convert(k, v) for k, v in vals.items() if k != "name"}
        out.append(BenchConfig(name=label, **kwargs))
    return out


def parse_config(text: str) -> list[BenchConfig]:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    configs = []
    for section in cp.sections():
        configs.extend(_section_configs(section, dict(cp.items(section))))
    if not configs:
        raise ConfigError("config defines no scenarios")
    return configs


def load_config(path) -> list[BenchConfig]:
    with open(path) as fh:
        return parse_config(fh.read())


def dump_config(configs: list[BenchConfig]) -> str:
    """Serialise configs, one fully expanded section each."""
    cp = configparser.ConfigParser(interpolation=None)
    for cfg in configs:
        cp[cfg.name] = {
            k: (str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v))
            for k, v in dataclasses.asdict(cfg).items()
            if k != "name"
        }
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
