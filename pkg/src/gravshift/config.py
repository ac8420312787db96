"""INI-style configuration for pipeline runs and simulation scenarios.

Every section and key is whitelisted so a misspelling fails loudly rather
than silently falling back to a default.  Relative paths are resolved
against the directory holding the configuration file.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path

from .datamodel import RegressionSpec, WinsorRule
from .gravity import DEFAULT_COMPETITORS
from .simulate import ScenarioConfig, scenario_from_mapping

OUT_ENV = "GRAVSHIFT_OUT"


class ConfigError(ValueError):
    pass


PATH_KEYS = ("flows", "tariffs", "crosswalk", "production", "exposure_observed", "exposure_giv", "price_index",
             "panel", "exclusions", "limits")

ALLOWED: dict[str, set[str]] = {
    "paths": set(PATH_KEYS),
    "gravity": {"sigma", "competitors", "focal"},
    "shiftshare": {"lag_observed", "lag_giv", "from", "to"},
    "spec": {"outcome", "endogenous", "instruments", "controls", "periods", "flag_interaction",
             "interact_regressors", "interact_controls"},
    "panel": {"unit", "cluster", "period", "weight", "flags"},
    "winsor": {"lower", "upper", "per_period"},
    "merge": None,  # free-form: column name -> region-level CSV
    "output": {"dir"},
}
REQUIRED = {"spec": ("outcome", "endogenous", "instruments")}


@dataclass
class PipelineConfig:
    spec: RegressionSpec
    paths: dict[str, Path] = field(default_factory=dict)
    merge: dict[str, Path] = field(default_factory=dict)
    competitors: tuple[str, ...] = DEFAULT_COMPETITORS
    focal: str = "US"
    sigma: float = 3.0
    lag_observed: int = 1
    lag_giv: int = 3
    t1: int | None = None
    t2: int | None = None
    unit: str = "unit"
    cluster: str = "cluster"
    period: str = "period"
    weight: str | None = "weight"
    flags: tuple[str, ...] = ()
    output_dir: Path = Path(".")
    source: Path | None = None

    def __post_init__(self) -> None:
        if self.lag_observed <= 0 or self.lag_giv <= 0:
            raise ConfigError(f"lags must be positive (observed={self.lag_observed}, giv={self.lag_giv})")
        if not self.sigma > 1:
            raise ConfigError(f"sigma must exceed 1, got {self.sigma}")

    @property
    def winsor(self) -> WinsorRule | None:
        return self.spec.winsor

    def require(self, *keys: str) -> list[Path]:
        """Resolve path keys, failing if any is unset or missing on disk."""
        out = []
        for k in keys:
            p = self.paths.get(k)
            if p is None:
                raise ConfigError(f"[paths] {k} is required for this step")
            if not p.exists():
                raise ConfigError(f"[paths] {k}: file not found: {p}")
            out.append(p)
        return out


def _split(text: str) -> tuple[str, ...]:
    return tuple(x for x in text.replace(",", " ").split() if x)


def _bool(section: str, key: str, text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"[{section}] {key}: expected a boolean, got {text!r}")


def _num(section: str, key: str, text: str, kind: type):
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected {kind.__name__}, got {text!r}") from None


def _read(path: str | Path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keep column names case-sensitive
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return cp


def output_dir(configured: str | Path | None) -> Path:
    """The output directory, with the environment override taking precedence."""
    env = os.environ.get(OUT_ENV)
    if env:
        return Path(env)
    return Path(configured) if configured else Path(".")


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    cp = _read(path)
    base = path.resolve().parent
    for section in cp.sections():
        if section not in ALLOWED:
            raise ConfigError(f"{path}: unknown section [{section}]")
        allowed = ALLOWED[section]
        if allowed is None:
            continue
        for key in cp[section]:
            if key not in allowed:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
    for section, keys in REQUIRED.items():
        for key in keys:
            if not cp.has_option(section, key) or not cp.get(section, key).strip():
                raise ConfigError(f"{path}: missing required key {key!r} in [{section}]")

    def get(section: str, key: str, default: str | None = None) -> str | None:
        return cp.get(section, key) if cp.has_option(section, key) else default

    def resolve(p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else base / q

    winsor = None
    if cp.has_section("winsor"):
        lo = _num("winsor", "lower", get("winsor", "lower", "0.005"), float)
        hi = _num("winsor", "upper", get("winsor", "upper", "0.995"), float)
        try:
            winsor = WinsorRule(lo, hi, _bool("winsor", "per_period", get("winsor", "per_period", "false")))
        except ValueError as exc:
            raise ConfigError(f"[winsor] {exc}") from None

    weight = get("panel", "weight", "weight")
    weight = None if weight is not None and weight.strip().lower() in ("", "none") else weight
    cluster = get("panel", "cluster", "cluster")
    try:
        spec = RegressionSpec(
            outcome=get("spec", "outcome").strip(),
            endogenous=_split(get("spec", "endogenous")),
            instruments=_split(get("spec", "instruments")),
            controls=_split(get("spec", "controls", "")),
            periods=_split(get("spec", "periods", "all")),
            weight=weight,
            cluster=cluster,
            winsor=winsor,
            interact_regressors=_bool("spec", "interact_regressors", get("spec", "interact_regressors", "true")),
            interact_controls=_bool("spec", "interact_controls", get("spec", "interact_controls", "true")),
            flag_interaction=(get("spec", "flag_interaction") or "").strip() or None,
        )
    except ValueError as exc:
        raise ConfigError(f"[spec] {exc}") from None

    t1 = get("shiftshare", "from")
    t2 = get("shiftshare", "to")
    return PipelineConfig(
        spec=spec,
        paths={k: resolve(v) for k, v in (cp["paths"].items() if cp.has_section("paths") else [])},
        merge={k: resolve(v) for k, v in (cp["merge"].items() if cp.has_section("merge") else [])},
        competitors=_split(get("gravity", "competitors", " ".join(DEFAULT_COMPETITORS))),
        focal=get("gravity", "focal", "US").strip(),
        sigma=_num("gravity", "sigma", get("gravity", "sigma", "3"), float),
        lag_observed=_num("shiftshare", "lag_observed", get("shiftshare", "lag_observed", "1"), int),
        lag_giv=_num("shiftshare", "lag_giv", get("shiftshare", "lag_giv", "3"), int),
        t1=None if t1 is None else _num("shiftshare", "from", t1, int),
        t2=None if t2 is None else _num("shiftshare", "to", t2, int),
        unit=get("panel", "unit", "unit"),
        cluster=cluster,
        period=get("panel", "period", "period"),
        weight=weight,
        flags=_split(get("panel", "flags", "")),
        output_dir=output_dir(get("output", "dir")),
        source=path,
    )


def load_scenario(path: str | Path) -> ScenarioConfig:
    """Read a ``[scenario]`` section; keys are :class:`ScenarioConfig` fields."""
    cp = _read(path)
    extra = [s for s in cp.sections() if s != "scenario"]
    if extra:
        raise ConfigError(f"{path}: unknown section(s) {extra}; expected only [scenario]")
    values = dict(cp["scenario"]) if cp.has_section("scenario") else {}
    try:
        return scenario_from_mapping(values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
