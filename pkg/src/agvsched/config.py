"""Scenario and sweep configuration: schema, YAML loading, dotted overrides."""
from __future__ import annotations

import copy
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridSpec(_Strict):
    width: int = Field(10, ge=1)
    height: int = Field(10, ge=1)
    production: list[tuple[int, int]] | None = None  # None: default column layout
    resupply: list[tuple[int, int]] | None = None


class ChannelSpec(_Strict):
    C: int = Field(60, ge=1)
    S: int = Field(2, ge=1)
    D: int = Field(2, ge=1)
    sigma: float = Field(0.0, ge=0.0, lt=1.0)
    traffic: Literal["bernoulli", "periodic"] = "bernoulli"

    @model_validator(mode="after")
    def _s_le_c(self):
        if self.S > self.C:
            raise ValueError("S must not exceed C")
        return self


class TaskSpec(_Strict):
    lines: int = Field(60, ge=1)  # production lines over all waves
    per_line: int = Field(4, ge=1)
    qty: tuple[int, int] = (5, 10)
    proc: tuple[int, int] = (5, 10)
    waves: int = Field(3, ge=1)
    wave_interval: int = Field(60, ge=0)
    slack_factor: float = Field(6.0, gt=0)
    soft_delay: int = Field(20, ge=0)

    @field_validator("qty", "proc")
    @classmethod
    def _range(cls, v):
        if v[0] < 0 or v[0] > v[1]:
            raise ValueError("range must satisfy 0 <= lo <= hi")
        return v


class RouterSpec(_Strict):
    kappa: int = Field(3, ge=1)
    penalty: float = Field(50.0, gt=0)
    horizon: int = Field(40, ge=1)
    max_expansions: int = Field(20_000, ge=1)


class SaSpec(_Strict):
    t_init: float | None = Field(None, gt=0)
    t_stop: float = Field(1e-3, gt=0)
    alpha: float = Field(0.995, gt=0, lt=1)
    destroy_size: int | None = Field(None, ge=1)
    removal_bias: float = Field(1.0, ge=0)
    max_iterations: int = Field(10_000, ge=0)
    repair_noise: float = Field(0.5, ge=0.0, lt=1.0)


class ControlSpec(_Strict):
    patience: int = Field(10, ge=1)
    safety_hold: int = Field(2, ge=0)
    collision_stall: int = Field(10, ge=0)
    staleness_cap: int | None = Field(None, ge=0)


MODES = ("uncontrolled", "local_only", "comm_ideal", "comm_realistic")


class ScenarioConfig(_Strict):
    grid: GridSpec = GridSpec()
    agvs: int = Field(10, ge=1)
    capacity: int = Field(20, ge=1)
    sensing_range: int = Field(2, ge=0)
    mode: Literal["uncontrolled", "local_only", "comm_ideal", "comm_realistic"] = "comm_ideal"
    channel: ChannelSpec = ChannelSpec()
    tasks: TaskSpec = TaskSpec()
    router: RouterSpec = RouterSpec()
    sa: SaSpec = SaSpec()
    control: ControlSpec = ControlSpec()
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4], min_length=1)
    slot_cap: int = Field(5000, ge=1)

    @model_validator(mode="after")
    def _quantities_fit(self):
        if self.tasks.qty[1] > self.capacity:
            raise ValueError("tasks.qty upper bound exceeds capacity")
        return self


class Variant(_Strict):
    """A named set of dotted overrides applied on top of the base config."""
    name: str
    set: dict[str, Any] = Field(default_factory=dict)


class SweepSpec(_Strict):
    base: ScenarioConfig = ScenarioConfig()
    axis: str
    values: list[Any] = Field(min_length=1)
    variants: list[Variant] | None = None  # None: one curve, the base config
    replications: int | None = Field(None, ge=1)  # None: len(base.seeds)

    @model_validator(mode="after")
    def _axes_exist(self):
        dump = self.base.model_dump()
        names = [self.axis] + [k for v in (self.variants or []) for k in v.set]
        for name in names:
            try:
                get_dotted(dump, name)
            except KeyError:
                raise ValueError(f"{name!r} is not a config field") from None
        seen = [v.name for v in self.variants or []]
        if len(seen) != len(set(seen)):
            raise ValueError("variant names must be unique")
        return self

    def seeds(self) -> list[int]:
        seeds = list(self.base.seeds)
        n = self.replications or len(seeds)
        if n > len(seeds):
            seeds += list(range(max(seeds) + 1, max(seeds) + 1 + n - len(seeds)))
        return seeds[:n]


class ChannelCheckSpec(_Strict):
    """Grid of (K, C, S, D) points for the analytic vs Monte Carlo check."""
    kind: Literal["channel"] = "channel"
    K: list[int] = Field(min_length=1)
    C: list[int] = Field(min_length=1)
    S: list[int] = Field(min_length=1)
    D: list[int] = Field(min_length=1)
    slots: int = Field(1_000_000, ge=1)
    seed: int = 0
    sigma: float = Field(0.0, ge=0.0, lt=1.0)
    curve: Literal["C", "S", "D"] = "S"  # plot-data grouping
    y: Literal["p_success", "throughput"] = "throughput"

    @field_validator("K", "C", "S", "D")
    @classmethod
    def _positive(cls, v):
        if any(x < 1 for x in v):
            raise ValueError("values must be >= 1")
        return v

    def points(self) -> list[tuple[int, int, int, int]]:
        return [(k, c, s, d) for c in self.C for s in self.S if s <= c
                for d in self.D for k in self.K]


# --------------------------------------------------------------------------
# dotted-key helpers


def get_dotted(d: dict, key: str) -> Any:
    cur: Any = d
    for part in key.split("."):
        if not isinstance(cur, dict) or part not in cur:
            raise KeyError(key)
        cur = cur[part]
    return cur


def set_dotted(d: dict, key: str, value: Any) -> dict:
    """Copy of ``d`` with ``key`` (``a.b.c``) set to ``value``."""
    out = copy.deepcopy(d)
    cur = out
    parts = key.split(".")
    for part in parts[:-1]:
        nxt = cur.get(part)
        if nxt is None:
            nxt = {}
        elif not isinstance(nxt, dict):
            raise ConfigError(f"{key}: {part} is not a section")
        cur[part] = nxt
        cur = nxt
    cur[parts[-1]] = value
    return out


def parse_override(text: str) -> tuple[str, Any]:
    """``a.b=value`` with ``value`` parsed as YAML (so ``3``, ``0.1``, ``[1,2]`` work)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    return key, yaml.safe_load(raw)


def _raise_named(exc: ValidationError) -> None:
    err = exc.errors()[0]
    loc = ".".join(str(p) for p in err["loc"])
    raise ConfigError(f"{loc or 'config'}: {err['msg']}") from None


def scenario_from_dict(d: dict, overrides: list[str] | None = None) -> ScenarioConfig:
    for ov in overrides or []:
        k, v = parse_override(ov)
        d = set_dotted(d, k, v)
    try:
        return ScenarioConfig.model_validate(d)
    except ValidationError as exc:
        _raise_named(exc)
        raise  # pragma: no cover


SWEEP_KEYS = ("axis", "values", "variants", "replications")


def sweep_from_dict(d: dict, overrides: list[str] | None = None) -> SweepSpec:
    d = dict(d)
    base = d.get("base", {})
    for ov in overrides or []:
        k, v = parse_override(ov)
        if k.startswith("base."):
            base = set_dotted(base, k[5:], v)
        elif k in SWEEP_KEYS:
            d[k] = v
        else:
            base = set_dotted(base, k, v)
    d["base"] = base
    try:
        return SweepSpec.model_validate(d)
    except ValidationError as exc:
        _raise_named(exc)
        raise  # pragma: no cover


def load_yaml(path: str | Path) -> dict:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def channel_from_dict(d: dict, overrides: list[str] | None = None) -> ChannelCheckSpec:
    for ov in overrides or []:
        k, v = parse_override(ov)
        d = set_dotted(d, k, v)
    try:
        return ChannelCheckSpec.model_validate(d)
    except ValidationError as exc:
        _raise_named(exc)
        raise  # pragma: no cover


def config_kind(d: dict) -> str:
    """``channel``, ``sweep`` or ``scenario``, from the top-level keys."""
    if d.get("kind") == "channel":
        return "channel"
    if "axis" in d:
        return "sweep"
    return "scenario"


def with_value(config: ScenarioConfig, key: str, value: Any) -> ScenarioConfig:
    """Copy of ``config`` with one dotted field replaced (validated)."""
    return scenario_from_dict(set_dotted(config.model_dump(), key, value))
