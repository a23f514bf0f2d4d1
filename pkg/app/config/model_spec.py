# app/config/model_spec.py

import json
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple, Union

from app.services.model import ArrivalModel, CompatibilityGraph, MatchingModelError

logger = logging.getLogger(__name__)

SPEC_KEYS = ("name", "customers", "servers", "edges", "lambda", "mu", "sweep")
SWEEP_KEYS = ("parameter", "grid", "bindings")

_WHITESPACE = re.compile(r"[ \t\n\r]*")
_PATH_SEGMENT = re.compile(r"\[(\d+)\]|([^.\[\]]+)")


class ModelSpecError(Exception):
    """Raised when a model file is malformed; names the offending field or position."""
    def __init__(
        self,
        message: str,
        field_path: Optional[str] = None,
        line: Optional[int] = None,
        column: Optional[int] = None,
        source: Optional[str] = None
    ):
        self.message = message
        self.field_path = field_path
        self.line = line
        self.column = column
        self.source = source
        location = source or "<model>"
        if line is not None:
            location += f":{line}:{column}"
        if field_path:
            location += f" [{field_path}]"
        super().__init__(f"{location}: {message}")


@dataclass(frozen=True)
class LinearBinding:
    """An arrival probability bound to the sweep parameter as const + slope·ρ."""
    const: float
    slope: float

    def value(self, parameter: float) -> float:
        return self.const + self.slope * parameter

    def to_dict(self) -> Dict[str, float]:
        return {"const": self.const, "slope": self.slope}


@dataclass(frozen=True)
class SweepSpec:
    parameter: str
    grid: Tuple[float, ...]
    lambda_bindings: Dict[str, LinearBinding] = field(default_factory=dict)
    mu_bindings: Dict[str, LinearBinding] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        bindings: Dict[str, Any] = {}
        if self.lambda_bindings:
            bindings["lambda"] = {name: b.to_dict() for name, b in self.lambda_bindings.items()}
        if self.mu_bindings:
            bindings["mu"] = {name: b.to_dict() for name, b in self.mu_bindings.items()}
        return {"parameter": self.parameter, "grid": list(self.grid), "bindings": bindings}


@dataclass(frozen=True)
class ModelSpec:
    """
    A model file: class names per side, edges as name pairs, arrival
    probabilities by name, and an optional parameter sweep.
    """
    name: str
    customers: Tuple[str, ...]
    servers: Tuple[str, ...]
    edges: Tuple[Tuple[str, str], ...]
    lam: Dict[str, float]
    mu: Dict[str, float]
    sweep: Optional[SweepSpec] = None

    @classmethod
    def from_dict(cls, data: Any, source: Optional[str] = None) -> "ModelSpec":
        """
        Validate a decoded model file.

        :raises ModelSpecError: On the first malformed field
        """
        def fail(message: str, path: Optional[str] = None) -> ModelSpecError:
            return ModelSpecError(message, field_path=path, source=source)

        if not isinstance(data, dict):
            raise fail("model file must contain a JSON object")
        for key in data:
            if key not in SPEC_KEYS:
                raise fail(f"unknown field '{key}'", key)

        name = data.get("name", "model")
        if not isinstance(name, str) or not name:
            raise fail("must be a non-empty string", "name")

        customers = _names(data, "customers", fail)
        servers = _names(data, "servers", fail)

        raw_edges = data.get("edges")
        if not isinstance(raw_edges, list) or not raw_edges:
            raise fail("must be a non-empty list of [customer, server] pairs", "edges")
        edges = []
        for n, pair in enumerate(raw_edges):
            path = f"edges[{n}]"
            if not isinstance(pair, list) or len(pair) != 2:
                raise fail("must be a [customer, server] pair", path)
            customer, server = pair
            if customer not in customers:
                raise fail(f"unknown customer class {customer!r}", path)
            if server not in servers:
                raise fail(f"unknown server class {server!r}", path)
            edges.append((customer, server))

        sweep = _sweep(data.get("sweep"), customers, servers, fail) if "sweep" in data else None
        lam = _probabilities(data, "lambda", customers, sweep.lambda_bindings if sweep else {}, fail)
        mu = _probabilities(data, "mu", servers, sweep.mu_bindings if sweep else {}, fail)

        spec = cls(name, customers, servers, tuple(edges), lam, mu, sweep)
        try:
            spec.graph()
        except MatchingModelError as e:
            raise fail(str(e), "edges")
        return spec

    def graph(self) -> CompatibilityGraph:
        return CompatibilityGraph.from_names(self.customers, self.servers, self.edges)

    def build(self, parameter: Optional[float] = None) -> Tuple[CompatibilityGraph, ArrivalModel]:
        """
        Produce the graph and arrival probabilities, evaluating sweep bindings
        at parameter when given.

        :raises ModelSpecError: If a bound probability has no value without a parameter
        """
        lam = dict(self.lam)
        mu = dict(self.mu)
        if parameter is not None:
            if self.sweep is None:
                raise ModelSpecError("model has no sweep section", field_path="sweep")
            lam.update({n: b.value(parameter) for n, b in self.sweep.lambda_bindings.items()})
            mu.update({n: b.value(parameter) for n, b in self.sweep.mu_bindings.items()})

        for label, names, values in (("lambda", self.customers, lam), ("mu", self.servers, mu)):
            missing = [n for n in names if n not in values]
            if missing:
                raise ModelSpecError(
                    f"no value for {missing} without a sweep parameter", field_path=label
                )

        try:
            arrivals = ArrivalModel(
                tuple(lam[n] for n in self.customers),
                tuple(mu[n] for n in self.servers)
            )
        except MatchingModelError as e:
            suffix = f" at {self.sweep.parameter} = {parameter}" if parameter is not None else ""
            raise ModelSpecError(f"{e}{suffix}")
        return self.graph(), arrivals

    def grid(self) -> List[float]:
        if self.sweep is None:
            raise ModelSpecError("model has no sweep section", field_path="sweep")
        return list(self.sweep.grid)

    def to_dict(self) -> Dict[str, Any]:
        """Canonical form: declared class order, edges sorted by class order."""
        customer_order = {n: i for i, n in enumerate(self.customers)}
        server_order = {n: k for k, n in enumerate(self.servers)}
        edges = sorted(set(self.edges), key=lambda e: (customer_order[e[0]], server_order[e[1]]))
        data: Dict[str, Any] = {
            "name": self.name,
            "customers": list(self.customers),
            "servers": list(self.servers),
            "edges": [list(e) for e in edges],
            "lambda": {n: self.lam[n] for n in self.customers if n in self.lam},
            "mu": {n: self.mu[n] for n in self.servers if n in self.mu},
        }
        if self.sweep is not None:
            data["sweep"] = self.sweep.to_dict()
        return data


def _names(data: Dict[str, Any], key: str, fail) -> Tuple[str, ...]:
    names = data.get(key)
    if not isinstance(names, list) or not names:
        raise fail("must be a non-empty list of class names", key)
    for n, name in enumerate(names):
        if not isinstance(name, str) or not name:
            raise fail("class names must be non-empty strings", f"{key}[{n}]")
    if len(set(names)) != len(names):
        duplicates = sorted({n for n in names if names.count(n) > 1})
        raise fail(f"duplicate class names {duplicates}", key)
    return tuple(names)


def _number(value: Any, path: str, fail) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise fail("must be a finite number", path)
    return float(value)


def _probabilities(
    data: Dict[str, Any],
    key: str,
    names: Tuple[str, ...],
    bindings: Dict[str, "LinearBinding"],
    fail
) -> Dict[str, float]:
    raw = data.get(key, {})
    if not isinstance(raw, dict):
        raise fail("must be an object mapping class names to probabilities", key)
    values = {}
    for name, value in raw.items():
        if name not in names:
            raise fail(f"unknown class {name!r}", f"{key}.{name}")
        values[name] = _number(value, f"{key}.{name}", fail)
    missing = [n for n in names if n not in values and n not in bindings]
    if missing:
        raise fail(f"missing probabilities for {missing}", key)
    return values


def _grid(raw: Any, fail) -> Tuple[float, ...]:
    path = "sweep.grid"
    if isinstance(raw, list):
        if not raw:
            raise fail("must not be empty", path)
        return tuple(_number(v, f"{path}[{n}]", fail) for n, v in enumerate(raw))
    if isinstance(raw, dict):
        for key in raw:
            if key not in ("start", "stop", "step"):
                raise fail(f"unknown field '{key}'", f"{path}.{key}")
        start = _number(raw.get("start"), f"{path}.start", fail)
        stop = _number(raw.get("stop"), f"{path}.stop", fail)
        step = _number(raw.get("step"), f"{path}.step", fail)
        if step <= 0 or stop < start:
            raise fail("needs step > 0 and stop >= start", path)
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        return tuple(round(start + n * step, 12) for n in range(count))
    raise fail("must be a list of values or {start, stop, step}", path)


def _sweep(raw: Any, customers: Tuple[str, ...], servers: Tuple[str, ...], fail) -> SweepSpec:
    if not isinstance(raw, dict):
        raise fail("must be an object", "sweep")
    for key in raw:
        if key not in SWEEP_KEYS:
            raise fail(f"unknown field '{key}'", f"sweep.{key}")
    parameter = raw.get("parameter")
    if not isinstance(parameter, str) or not parameter:
        raise fail("must be a non-empty string", "sweep.parameter")
    grid = _grid(raw.get("grid"), fail)

    bindings = raw.get("bindings", {})
    if not isinstance(bindings, dict):
        raise fail("must be an object", "sweep.bindings")
    parsed: Dict[str, Dict[str, LinearBinding]] = {"lambda": {}, "mu": {}}
    for side, entries in bindings.items():
        if side not in parsed:
            raise fail("bindings apply to 'lambda' or 'mu'", f"sweep.bindings.{side}")
        names = customers if side == "lambda" else servers
        if not isinstance(entries, dict):
            raise fail("must be an object", f"sweep.bindings.{side}")
        for name, entry in entries.items():
            path = f"sweep.bindings.{side}.{name}"
            if name not in names:
                raise fail(f"unknown class {name!r}", path)
            if not isinstance(entry, dict) or set(entry) - {"const", "slope"}:
                raise fail("must be {const, slope}", path)
            parsed[side][name] = LinearBinding(
                _number(entry.get("const", 0.0), f"{path}.const", fail),
                _number(entry.get("slope", 0.0), f"{path}.slope", fail)
            )
    return SweepSpec(parameter, grid, parsed["lambda"], parsed["mu"])


def _path_segments(field_path: str) -> List[Union[str, int]]:
    return [int(index) if index else key for index, key in _PATH_SEGMENT.findall(field_path)]


def _skip(text: str, pos: int, separator: str = "") -> int:
    pos = _WHITESPACE.match(text, pos).end()
    if separator and text.startswith(separator, pos):
        pos = _WHITESPACE.match(text, pos + 1).end()
    return pos


def locate_field(text: str, field_path: str) -> Optional[Tuple[int, int]]:
    """
    Line and column (1-based) of the value a field path names in valid JSON
    text, or None when the path does not resolve.
    """
    decoder = json.JSONDecoder()
    pos = _skip(text, 0)
    try:
        for segment in _path_segments(field_path):
            if isinstance(segment, str):
                if not text.startswith("{", pos):
                    return None
                pos = _skip(text, pos + 1)
                while not text.startswith("}", pos):
                    key, pos = decoder.raw_decode(text, pos)
                    pos = _skip(text, pos, ":")
                    if key == segment:
                        break
                    _, pos = decoder.raw_decode(text, pos)
                    pos = _skip(text, pos, ",")
                else:
                    return None
            else:
                if not text.startswith("[", pos):
                    return None
                pos = _skip(text, pos + 1)
                for _ in range(segment):
                    if text.startswith("]", pos):
                        return None
                    _, pos = decoder.raw_decode(text, pos)
                    pos = _skip(text, pos, ",")
                if text.startswith("]", pos):
                    return None
    except (ValueError, IndexError):
        return None

    line = text.count("\n", 0, pos) + 1
    column = pos - text.rfind("\n", 0, pos)
    return line, column


def parse_model_spec(text: str, source: Optional[str] = None) -> ModelSpec:
    """
    Parse model JSON text.

    :raises ModelSpecError: With line and column for syntax errors, and for
        invalid field values the line and column of the offending value
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelSpecError(e.msg, line=e.lineno, column=e.colno, source=source)
    try:
        return ModelSpec.from_dict(data, source=source)
    except ModelSpecError as e:
        position = locate_field(text, e.field_path) if e.field_path else None
        if position is None:
            raise
        raise ModelSpecError(
            e.message, field_path=e.field_path, line=position[0], column=position[1], source=source
        ) from None


def load_model_spec(path: str) -> ModelSpec:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ModelSpecError(f"cannot read model file: {e.strerror}", source=path)
    spec = parse_model_spec(text, source=path)
    logger.info(
        f"Loaded model '{spec.name}' from {path}: "
        f"{len(spec.customers)} customer classes, {len(spec.servers)} server classes, {len(spec.edges)} edges"
    )
    return spec


def dump_model_spec(spec: ModelSpec, path: str) -> None:
    """Write the canonical form of a model file."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(spec.to_dict(), f, indent=2, ensure_ascii=False)
        f.write("\n")
