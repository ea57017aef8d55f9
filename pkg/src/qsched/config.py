"""TOML experiment configuration: parse, validate, build an ExperimentPlan.

Layout::

    schema_version = 1

    [system]        num_types, num_servers, arrival_bound, service_bound, horizon
    [arrivals]      kind = "bernoulli" | "pattern"
    [services]      kind = "weibull" | "constant" | "two_point"
    [policies.NAME] kind plus its parameters
    [experiment]    runs, seed, sample_stride, tail_slots, tie_break

Unknown keys are rejected. Every error message starts with ``path:line:``.
"""

from __future__ import annotations

import re
import sys
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .capacity import scale_to_slackness
from .errors import ConfigError, InfeasibleTarget
from .experiments import ExperimentPlan
from .model import SystemConfig
from .policies import PolicySpec
from .stochastic import (
    ArrivalSpec, Timeline, constant_services, two_point_services, weibull_services,
)

SCHEMA_VERSION = 1
_REQUIRED = object()

SECTION_KEYS = {
    "": {"schema_version", "system", "arrivals", "services", "policies", "experiment"},
    "system": {"num_types", "num_servers", "arrival_bound", "service_bound", "horizon"},
    "arrivals": {"kind", "rates", "breakpoints", "direction", "target_slackness", "pattern"},
    "services": {"kind", "beta", "iota", "values", "breakpoints", "v1", "p1", "v2"},
    "policy": {"kind", "gamma", "c1", "frame", "epoch", "default_rate"},
    "experiment": {"runs", "seed", "sample_stride", "tail_slots", "tie_break"},
}


class _Anchored(ConfigError):
    """A ConfigError that already carries its path:line prefix."""


class _Locator:
    """Line numbers of table headers and keys, found by scanning the text."""

    header = re.compile(r"^\s*\[\s*([A-Za-z0-9_.\-\" ]+?)\s*\]\s*(#.*)?$")
    assign = re.compile(r"^\s*([A-Za-z0-9_\-]+)\s*=")

    def __init__(self, text: str):
        self.tables: dict[str, int] = {"": 1}
        self.keys: dict[tuple[str, str], int] = {}
        table = ""
        for n, line in enumerate(text.splitlines(), start=1):
            m = self.header.match(line)
            if m:
                table = m.group(1).replace('"', "").replace(" ", "")
                self.tables.setdefault(table, n)
                continue
            m = self.assign.match(line)
            if m:
                self.keys.setdefault((table, m.group(1)), n)

    def line(self, table: str, key: str | None = None) -> int:
        if key is not None and (table, key) in self.keys:
            return self.keys[(table, key)]
        return self.tables.get(table, 1)


class _Reader:
    def __init__(self, source: str, locator: _Locator):
        self.source = source
        self.loc = locator

    def fail(self, table: str, key: str | None, message: str):
        where = f"[{table}]" if table else "top level"
        if key:
            where += f" {key}"
        raise _Anchored(f"{self.source}:{self.loc.line(table, key)}: {where}: {message}")

    def rethrow(self, table: str, exc: ConfigError):
        if isinstance(exc, _Anchored):
            raise exc
        msg = str(exc)
        # point at the key the message names, if any
        named = [k for (tab, k) in self.loc.keys if tab == table and re.search(rf"\b{re.escape(k)}\b", msg)]
        self.fail(table, min(named, key=lambda k: self.loc.line(table, k)) if named else None, msg)

    def section(self, doc: dict, name: str, table: str, allowed: set[str], required: bool = True) -> dict:
        sec = doc.get(name)
        if sec is None:
            if required:
                self.fail("", None, f"missing section [{table}]")
            return {}
        if not isinstance(sec, dict):
            self.fail("", name, "must be a table")
        for key in sec:
            if key not in allowed:
                self.fail(table, key, f"unknown key {key!r}")
        return sec

    def get(self, sec: dict, table: str, key: str, kind, default=_REQUIRED):
        if key not in sec:
            if default is _REQUIRED:
                self.fail(table, None, f"missing required key {key!r}")
            return default
        value = sec[key]
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if (kind is not None and not isinstance(value, kind)) or (isinstance(value, bool) and kind is not bool):
            self.fail(table, key, f"expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}")
        return value

    def array(self, sec: dict, table: str, key: str, ndim: int | tuple[int, ...], dtype=float,
              default=_REQUIRED):
        if key not in sec:
            if default is _REQUIRED:
                self.fail(table, None, f"missing required key {key!r}")
            return default
        try:
            arr = np.array(sec[key], dtype=dtype)
        except (TypeError, ValueError):
            self.fail(table, key, "must be a rectangular numeric array")
        dims = (ndim,) if isinstance(ndim, int) else ndim
        if arr.ndim not in dims:
            self.fail(table, key, f"expected a {' or '.join(map(str, dims))}-d array, got {arr.ndim}-d")
        return arr


def parse_plan(text: str, source: str = "<config>") -> ExperimentPlan:
    loc = _Locator(text)
    rd = _Reader(source, loc)
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"{source}:{m.group(1) if m else 1}: {exc}") from None

    for key in doc:
        if key not in SECTION_KEYS[""]:
            rd.fail("", key, f"unknown key {key!r}")
    version = rd.get(doc, "", "schema_version", int)
    if version != SCHEMA_VERSION:
        rd.fail("", "schema_version", f"unsupported schema_version {version} (expected {SCHEMA_VERSION})")

    sys_sec = rd.section(doc, "system", "system", SECTION_KEYS["system"])
    try:
        config = SystemConfig(
            num_types=rd.get(sys_sec, "system", "num_types", int),
            num_servers=rd.get(sys_sec, "system", "num_servers", int),
            arrival_bound=rd.get(sys_sec, "system", "arrival_bound", int, 1),
            service_bound=rd.get(sys_sec, "system", "service_bound", int),
            horizon=rd.get(sys_sec, "system", "horizon", int),
        )
    except ConfigError as exc:
        rd.rethrow("system", exc)

    services = _services(rd, rd.section(doc, "services", "services", SECTION_KEYS["services"]), config)
    arrivals = _arrivals(rd, rd.section(doc, "arrivals", "arrivals", SECTION_KEYS["arrivals"]), config, services)

    policies = []
    pol_doc = doc.get("policies", {})
    if not isinstance(pol_doc, dict):
        rd.fail("", "policies", "must be a table of policy tables")
    for name, sec in pol_doc.items():
        table = f"policies.{name}"
        if not isinstance(sec, dict):
            rd.fail("policies", name, "must be a table")
        for key in sec:
            if key not in SECTION_KEYS["policy"]:
                rd.fail(table, key, f"unknown key {key!r}")
        kwargs = {"kind": rd.get(sec, table, "kind", str), "name": name}
        for key, kind in (("gamma", float), ("c1", float), ("frame", int), ("epoch", int),
                          ("default_rate", float)):
            if key in sec:
                kwargs[key] = rd.get(sec, table, key, kind)
        try:
            policies.append(PolicySpec(**kwargs))
        except ConfigError as exc:
            rd.rethrow(table, exc)

    exp = rd.section(doc, "experiment", "experiment", SECTION_KEYS["experiment"], required=False)
    tie = rd.get(exp, "experiment", "tie_break", str, "lowest")
    if tie not in ("lowest", "random"):
        rd.fail("experiment", "tie_break", f"must be 'lowest' or 'random', got {tie!r}")
    tails = rd.array(exp, "experiment", "tail_slots", 1, dtype=np.int64, default=np.array([], dtype=np.int64))
    seed = rd.get(exp, "experiment", "seed", int, 0)
    if seed < 0:
        rd.fail("experiment", "seed", "must be nonnegative")
    runs = rd.get(exp, "experiment", "runs", int, 1)
    if runs < 1:
        rd.fail("experiment", "runs", "must be >= 1")
    stride = rd.get(exp, "experiment", "sample_stride", int, 10)
    if stride < 1:
        rd.fail("experiment", "sample_stride", "must be >= 1")
    try:
        return ExperimentPlan(
            config=config, arrivals=arrivals, services=services, policies=policies,
            num_runs=runs,
            seed=seed,
            sample_stride=stride,
            tail_slots=tuple(int(t) for t in tails),
            random_ties=tie == "random",
        )
    except ConfigError as exc:
        rd.rethrow("experiment", exc)


def _segment_tables(rd, sec, table, key, breakpoints, ndim_single):
    arr = rd.array(sec, table, key, (ndim_single, ndim_single + 1))
    tables = [arr] if arr.ndim == ndim_single else list(arr)
    if len(tables) != len(breakpoints) + 1:
        rd.fail(table, key, f"{len(breakpoints)} breakpoints need {len(breakpoints) + 1} segments, "
                            f"got {len(tables)}")
    return tables


def _services(rd: _Reader, sec: dict, config: SystemConfig):
    kind = rd.get(sec, "services", "kind", str)
    bps = [int(b) for b in rd.array(sec, "services", "breakpoints", 1, np.int64, np.array([], np.int64))]
    shape = (config.num_types, config.num_servers)
    try:
        if kind == "weibull":
            beta = rd.get(sec, "services", "beta", float)
            tables = _segment_tables(rd, sec, "services", "iota", bps, 2)
            for tab in tables:
                if tab.shape != shape:
                    rd.fail("services", "iota", f"expected {shape} tables, got {tab.shape}")
            return weibull_services(tables, beta, config.service_bound, config.horizon, bps)
        if kind == "constant":
            tables = _segment_tables(rd, sec, "services", "values", bps, 2)
            for tab in tables:
                if tab.shape != shape or np.any(tab != np.round(tab)):
                    rd.fail("services", "values", f"expected {shape} integer tables")
                if np.any(tab < 1) or np.any(tab > config.service_bound):
                    rd.fail("services", "values", f"service times must lie in [1, {config.service_bound}]")
            return constant_services([t.astype(int) for t in tables], config.service_bound, config.horizon, bps)
        if kind == "two_point":
            if bps:
                rd.fail("services", "breakpoints", "two_point services are single-segment")
            v1, p1, v2 = (rd.array(sec, "services", k, 2) for k in ("v1", "p1", "v2"))
            for k, a in (("v1", v1), ("p1", p1), ("v2", v2)):
                if a.shape != shape:
                    rd.fail("services", k, f"expected a {shape} table")
            for k, a in (("v1", v1), ("v2", v2)):
                if np.any(a < 1) or np.any(a > config.service_bound) or np.any(a != np.round(a)):
                    rd.fail("services", k, f"service times must be integers in [1, {config.service_bound}]")
            if np.any(p1 < 0) or np.any(p1 > 1):
                rd.fail("services", "p1", "probabilities must lie in [0, 1]")
            return two_point_services(v1.astype(int), p1, v2.astype(int), config.service_bound, config.horizon)
    except ConfigError as exc:
        rd.rethrow("services", exc)
    rd.fail("services", "kind", f"unknown service kind {kind!r}")


def _arrivals(rd: _Reader, sec: dict, config: SystemConfig, services):
    kind = rd.get(sec, "arrivals", "kind", str)
    I = config.num_types
    try:
        if kind == "pattern":
            pattern = rd.array(sec, "arrivals", "pattern", 2, np.int64)
            spec = ArrivalSpec("pattern", pattern=pattern)
        elif kind == "bernoulli":
            bps = [int(b) for b in rd.array(sec, "arrivals", "breakpoints", 1, np.int64, np.array([], np.int64))]
            if "target_slackness" in sec:
                if "rates" in sec:
                    rd.fail("arrivals", "rates", "give either rates or target_slackness, not both")
                if bps:
                    rd.fail("arrivals", "breakpoints", "target_slackness builds a single-segment workload")
                target = rd.get(sec, "arrivals", "target_slackness", float)
                direction = rd.array(sec, "arrivals", "direction", 1, default=np.ones(I))
                if direction.shape != (I,):
                    rd.fail("arrivals", "direction", f"expected length {I}")
                try:
                    rates = scale_to_slackness(direction, services.rates(0), target)
                except InfeasibleTarget as exc:
                    rd.fail("arrivals", "target_slackness", str(exc))
                tables = [rates]
            else:
                tables = _segment_tables(rd, sec, "arrivals", "rates", bps, 1)
            spec = ArrivalSpec("bernoulli", rates=Timeline(tuple(bps), tuple(tables), config.horizon))
        else:
            rd.fail("arrivals", "kind", f"unknown arrival kind {kind!r}")
        spec.validate(I, config.arrival_bound)
        return spec
    except ConfigError as exc:
        rd.rethrow("arrivals", exc)


def load_plan(path: str | Path) -> ExperimentPlan:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}:1: cannot read config: {exc.strerror}") from None
    return parse_plan(text, str(path))
