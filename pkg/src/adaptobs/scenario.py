"""Scenario files: YAML with one section per building block, plus builtins.

A scenario is kept as a plain nested dict (so serialisation round-trips
trivially) and validated/turned into a :class:`~adaptobs.hybrid.SimSetup`
by :func:`build_setup`.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .hybrid import ClockConfig, SimSetup
from .identifier import NullIdentifier
from .numerics import NoiseProcess
from .observer import ConfigError, make_gains, psi_bar_from_grid
from .plant import Box, make_custom_chain, make_example_va, make_example_vb
from .rls import RlsConfig, RlsIdentifier, make_regressor
from .wavelet import WaveletBasis, WaveletIdentifier


class ScenarioError(ConfigError):
    """Invalid scenario, with the offending file and dotted field."""

    def __init__(self, field: str, msg: str, path: str | None = None):
        self.field = field
        self.msg = msg
        self.path = path
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{field}: {msg}")


DEFAULTS: dict = {
    "name": "unnamed",
    "plant": {"name": "example_vb", "theta": [-1.0, 0.0, 0.5], "n": None, "coeffs": None},
    "observer": {"g": 25.0, "K": "binomial", "x_star": None, "xi_star": [-1000.0, 1000.0],
                 "psi_bar": None},
    "identifier": {"kind": "none"},
    "clock": {"t_low": 0.5, "t_high": 0.5, "period": None, "schedule": None},
    "simulation": {"horizon": 10.0, "h": 1e-3, "record_every": 1, "record_jumps_every": 1,
                   "backend": "numba"},
    "noise": {"q": 0.0, "seed": 0, "sample_period": 0.1},
    "disturbance": {"amplitude": None, "sample_period": 0.1},
    "initial": {"x": None, "xhat": None, "xi": 0.0, "tau": 0.0},
    "events": [],
    "sweep": None,
}

IDENTIFIER_DEFAULTS = {
    "none": {},
    "rls": {"regressor": "vb_basis", "mu": 0.995, "R": 0.0, "eps": 1e-3, "c_sigma": 1e7,
            "c_lambda": 1e8, "c_gamma": 10.0, "z1_0": 1.0, "z2_0": 0.0},
    "wavelet": {"i0": 3, "iT": 1, "mu": [0.999, 0.995, 0.99], "R": 1e-3,
                "enable_times": [0.0, 0.0, 0.0], "coords": [0], "box": None, "order": 3,
                "dual_order": 5, "eps": 1e-3, "c_sigma": 1e7, "c_lambda": 1e8, "c_gamma": 1e4},
}


def _vb(name, **over):
    cfg = {
        "name": name,
        "plant": {"name": "example_vb", "theta": [-1.0, 0.0, 0.5]},
        "observer": {"g": 25.0, "K": [4.0, 6.0, 4.0, 1.0],
                     "x_star": [[-10.0, 10.0], [-10.0, 10.0], [-100.0, 100.0]],
                     "xi_star": [-1000.0, 1000.0], "psi_bar": 1000.0},
        "identifier": {"kind": "rls", "regressor": "vb_basis", "mu": 0.995, "R": 0.0,
                       "c_sigma": 1e7, "c_lambda": 1e8, "c_gamma": 10.0, "z1_0": 1.0, "z2_0": 0.0},
        "clock": {"t_low": 0.5, "t_high": 0.5, "period": 0.5},
        "simulation": {"horizon": 2000.0, "h": 1e-3, "record_every": 100},
        "initial": {"x": [1.0, -1.0, 0.0], "xhat": [0.0, 0.0, 0.0], "xi": 0.0, "tau": 0.0},
        "events": [{"time": 1000.0, "theta": [1.0, -0.5, 0.0]}],
    }
    for k, v in over.items():
        # the identifier section is replaced whole: its keys depend on the kind
        merge = isinstance(v, dict) and k != "identifier"
        cfg[k] = {**cfg.get(k, {}), **v} if merge else v
    return cfg


def _va(phi):
    return {
        "name": f"va_phi{phi}",
        "plant": {"name": f"example_va_phi{phi}"},
        "observer": {"g": 25.0, "K": "binomial", "x_star": [[-10.0, 10.0], [-10.0, 10.0]],
                     "xi_star": [-1000.0, 1000.0], "psi_bar": None},
        "identifier": {"kind": "wavelet", "i0": 3, "iT": 1, "mu": [0.999, 0.995, 0.99], "R": 1e-3,
                       "enable_times": [50.0, 200.0, 350.0], "coords": [0], "box": [[-10.0, 10.0]],
                       "order": 3, "dual_order": 5, "c_gamma": 1e4},
        "clock": {"t_low": 0.1, "t_high": 0.1, "period": 0.1},
        "simulation": {"horizon": 500.0, "h": 1e-3, "record_every": 100, "record_jumps_every": 10},
        "initial": {"x": [-2.5, 3.0], "xhat": [0.0, 0.0], "xi": 0.0, "tau": 0.0},
    }


BUILTINS: dict[str, dict] = {
    "va_phi1": _va(1),
    "va_phi2": _va(2),
    "vb_noisefree": _vb("vb_noisefree"),
    "vb_baseline": _vb("vb_baseline", identifier={"kind": "none"}),
    "vb_noise_q": _vb("vb_noise_q", noise={"q": 1e-3, "seed": 0, "sample_period": 0.1},
                      sweep={"param": "noise.q", "values": [1e-3, 5e-3, 1e-2]}),
}

BUILTIN_HELP = {
    "va_phi1": "oscillator phi1 = 4x - x^3, 3-stage wavelet identifier enabled at 50/200/350 s",
    "va_phi2": "oscillator phi2 = 3 atan(x) - x, 3-stage wavelet identifier enabled at 50/200/350 s",
    "vb_noisefree": "third-order oscillator, RLS on 3 regressors, theta switch at 1000 s",
    "vb_baseline": "same plant with psi = 0 (non-adaptive extended high-gain observer)",
    "vb_noise_q": "vb_noisefree with output noise, sweep q in {1e-3, 5e-3, 1e-2}",
}


def _merge(base: dict, over: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{prefix}{k}"
        if k not in base:
            raise ScenarioError(key, "unknown key")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class Scenario:
    data: dict
    source: str | None = None

    @classmethod
    def from_dict(cls, raw: dict, source: str | None = None) -> "Scenario":
        if not isinstance(raw, dict):
            raise ScenarioError("<root>", "scenario must be a mapping", source)
        raw = copy.deepcopy(raw)
        ident = raw.pop("identifier", None) or {}
        try:
            data = _merge(DEFAULTS, raw)
            kind = ident.get("kind", "none")
            if kind not in IDENTIFIER_DEFAULTS:
                raise ScenarioError("identifier.kind", f"expected one of {sorted(IDENTIFIER_DEFAULTS)}, got {kind!r}")
            rest = {k: v for k, v in ident.items() if k != "kind"}
            data["identifier"] = {"kind": kind, **_merge(IDENTIFIER_DEFAULTS[kind], rest, "identifier.")}
        except ScenarioError as exc:
            raise ScenarioError(exc.field, exc.msg, source) from None
        return cls(data, source)

    @classmethod
    def load(cls, ref: str | Path) -> "Scenario":
        """Builtin name or path to a YAML file."""
        if str(ref) in BUILTINS:
            return cls.from_dict(BUILTINS[str(ref)], f"builtin:{ref}")
        p = Path(ref)
        if not p.exists():
            raise ScenarioError("<file>", f"no such scenario file or builtin: {ref}", str(ref))
        try:
            raw = yaml.safe_load(p.read_text())
        except yaml.YAMLError as exc:
            raise ScenarioError("<file>", f"YAML parse error: {exc}", str(p)) from None
        return cls.from_dict(raw or {}, str(p))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True)

    @property
    def name(self) -> str:
        return str(self.data["name"])

    def get(self, dotted: str):
        node = self.data
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                raise ScenarioError(dotted, "no such field", self.source)
            node = node[part]
        return node

    def with_value(self, dotted: str, value) -> "Scenario":
        data = copy.deepcopy(self.data)
        parts = dotted.split(".")
        node = data
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ScenarioError(dotted, "no such field", self.source)
            node = node[part]
        if parts[-1] not in node:
            raise ScenarioError(dotted, "no such field", self.source)
        node[parts[-1]] = value
        if dotted == "identifier.kind":
            data["identifier"] = {"kind": value, **IDENTIFIER_DEFAULTS.get(value, {})}
        return Scenario.from_dict(data, self.source)

    def with_overrides(self, assignments) -> "Scenario":
        """Apply ``key=value`` strings; values are parsed as YAML scalars/lists."""
        sc = self
        for item in assignments or ():
            if "=" not in item:
                raise ScenarioError(item, "override must look like key=value", self.source)
            key, raw = item.split("=", 1)
            sc = sc.with_value(key.strip(), yaml.safe_load(raw))
        return sc

    def with_seed(self, seed: int | None) -> "Scenario":
        return self if seed is None else self.with_value("noise.seed", int(seed))


def _vec(sc: Scenario, field: str, n: int | None = None, default=None) -> np.ndarray | None:
    v = sc.get(field)
    if v is None:
        return None if default is None else np.asarray(default, dtype=float)
    try:
        arr = np.asarray(v, dtype=float).reshape(-1)
    except (TypeError, ValueError):
        raise ScenarioError(field, f"expected a list of numbers, got {v!r}", sc.source) from None
    if n is not None and arr.size != n:
        raise ScenarioError(field, f"expected {n} entries, got {arr.size}", sc.source)
    return arr


def _num(sc: Scenario, field: str, positive: bool = False, nonneg: bool = False) -> float:
    v = sc.get(field)
    try:
        x = float(v)
    except (TypeError, ValueError):
        raise ScenarioError(field, f"expected a number, got {v!r}", sc.source) from None
    if positive and not x > 0:
        raise ScenarioError(field, f"must be > 0, got {x}", sc.source)
    if nonneg and x < 0:
        raise ScenarioError(field, f"must be >= 0, got {x}", sc.source)
    return x


def build_plant(sc: Scenario):
    name = sc.get("plant.name")
    try:
        if name == "example_va_phi1":
            return make_example_va(1)
        if name == "example_va_phi2":
            return make_example_va(2)
        if name == "example_vb":
            return make_example_vb(_vec(sc, "plant.theta", 3))
        if name == "custom_chain":
            n = sc.get("plant.n")
            if not isinstance(n, int) or n < 1:
                raise ScenarioError("plant.n", f"custom_chain needs an integer order >= 1, got {n!r}", sc.source)
            return make_custom_chain(n, _vec(sc, "plant.coeffs", n))
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError("plant", str(exc), sc.source) from None
    raise ScenarioError("plant.name", f"unknown plant {name!r}; expected example_va_phi1, "
                        "example_va_phi2, example_vb or custom_chain", sc.source)


def _box(sc: Scenario, field: str, dim: int, default) -> Box:
    v = sc.get(field)
    if v is None:
        v = default
    try:
        box = Box.from_pairs(v)
    except ValueError as exc:
        raise ScenarioError(field, f"bad box {v!r}: {exc}", sc.source) from None
    if box.dim != dim:
        raise ScenarioError(field, f"expected {dim} intervals, got {box.dim}", sc.source)
    return box


def build_identifier(sc: Scenario, n: int):
    kind = sc.get("identifier.kind")
    p = "identifier."
    try:
        if kind == "none":
            return NullIdentifier(n)
        if kind == "rls":
            reg = make_regressor(sc.get(p + "regressor"), n)
            cfg = RlsConfig(regressor=reg, mu=_num(sc, p + "mu"), R=np.asarray(sc.get(p + "R"), dtype=float),
                            eps=_num(sc, p + "eps"), c_sigma=_num(sc, p + "c_sigma"),
                            c_lambda=_num(sc, p + "c_lambda"), c_gamma=_num(sc, p + "c_gamma"),
                            z1_0=np.asarray(sc.get(p + "z1_0"), dtype=float),
                            z2_0=np.asarray(sc.get(p + "z2_0"), dtype=float))
            return RlsIdentifier(cfg)
        if kind == "wavelet":
            coords = [int(c) for c in sc.get(p + "coords")]
            if not coords or any(not 0 <= c < n for c in coords):
                raise ScenarioError(p + "coords", f"coordinates must lie in 0..{n - 1}", sc.source)
            i0, iT = int(sc.get(p + "i0")), int(sc.get(p + "iT"))
            if iT > i0:
                raise ScenarioError(p + "iT", "target scale must not exceed i0", sc.source)
            n_st = i0 - iT + 1
            box = _box(sc, p + "box", len(coords), _x_star(sc, n).to_pairs())
            mu = np.asarray(sc.get(p + "mu"), dtype=float)
            times = np.asarray(sc.get(p + "enable_times"), dtype=float)
            for field, arr in (("mu", mu), ("enable_times", times)):
                if arr.ndim and arr.size not in (1, n_st):
                    raise ScenarioError(p + field, f"need 1 or {n_st} values (one per stage)", sc.source)
            return WaveletIdentifier.build(
                WaveletBasis(int(sc.get(p + "order")), int(sc.get(p + "dual_order"))), box, coords, n,
                i0, iT, mu=mu, R=np.asarray(sc.get(p + "R"), dtype=float), enable_times=times,
                eps=_num(sc, p + "eps"), c_sigma=_num(sc, p + "c_sigma"),
                c_lambda=_num(sc, p + "c_lambda"), c_gamma=_num(sc, p + "c_gamma"))
    except ScenarioError:
        raise
    except (ValueError, TypeError) as exc:
        raise ScenarioError("identifier", str(exc), sc.source) from None
    raise ScenarioError("identifier.kind", f"unknown identifier kind {kind!r}", sc.source)


def _x_star(sc: Scenario, n: int) -> Box:
    return _box(sc, "observer.x_star", n, [[-10.0, 10.0]] * n)


def build_setup(sc: Scenario) -> SimSetup:
    """Validate the scenario and assemble the simulation inputs."""
    plant = build_plant(sc)
    n = plant.n
    K = sc.get("observer.K")
    K = None if K in (None, "binomial") else _vec(sc, "observer.K", n + 1)
    try:
        gains = make_gains(n, K, _num(sc, "observer.g", positive=True))
    except ConfigError as exc:
        raise ScenarioError("observer.K", str(exc), sc.source) from None
    ident = build_identifier(sc, n)
    x_star = _x_star(sc, n)
    xi_star = _vec(sc, "observer.xi_star", 2)
    if sc.get("observer.psi_bar") is None:
        c_gamma = sc.data["identifier"].get("c_gamma", 1.0)
        psi_bar = psi_bar_from_grid(ident.model_set, x_star, tuple(xi_star), float(c_gamma))
    else:
        psi_bar = _num(sc, "observer.psi_bar", positive=True)

    clock_d = sc.get("clock")
    try:
        clock = ClockConfig(float(clock_d["t_low"]), float(clock_d["t_high"]),
                            None if clock_d.get("period") is None else float(clock_d["period"]),
                            clock_d.get("schedule"))
    except (ValueError, TypeError) as exc:
        raise ScenarioError("clock", str(exc), sc.source) from None

    seed = int(sc.get("noise.seed"))
    q = _num(sc, "noise.q", nonneg=True)
    noise = NoiseProcess(seed=seed, sample_period=_num(sc, "noise.sample_period", positive=True), stream=0)
    d_amp = _vec(sc, "disturbance.amplitude")
    if d_amp is not None and d_amp.size == 1:
        d_amp = np.full(n, d_amp[0])
    if d_amp is not None and d_amp.size != n:
        raise ScenarioError("disturbance.amplitude", f"expected 1 or {n} entries", sc.source)
    d_period = _num(sc, "disturbance.sample_period", positive=True)
    d_noise = [NoiseProcess(seed=seed, sample_period=d_period, stream=1 + i) for i in range(n)]

    events = []
    for idx, ev in enumerate(sc.get("events") or []):
        if not isinstance(ev, dict) or "time" not in ev or "theta" not in ev:
            raise ScenarioError(f"events[{idx}]", "each event needs 'time' and 'theta'", sc.source)
        theta = np.asarray(ev["theta"], dtype=float)
        if theta.shape != plant.params.shape:
            raise ScenarioError(f"events[{idx}].theta", f"expected {plant.params.size} entries", sc.source)
        events.append((float(ev["time"]), theta))

    sim = sc.get("simulation")
    try:
        return SimSetup(
            plant=plant, gains=gains, psi_bar=psi_bar, identifier=ident, clock=clock,
            horizon=_num(sc, "simulation.horizon", positive=True), h=_num(sc, "simulation.h", positive=True),
            x0=_vec(sc, "initial.x", n, np.zeros(n)), xhat0=_vec(sc, "initial.xhat", n, np.zeros(n)),
            xi0=_num(sc, "initial.xi"), tau0=_num(sc, "initial.tau", nonneg=True),
            q=q, noise=noise, d_amp=d_amp, d_noise=d_noise, events=events,
            record_every=int(sim["record_every"]), record_jumps_every=int(sim["record_jumps_every"]),
            backend=str(sim["backend"]),
        )
    except ValueError as exc:
        raise ScenarioError("simulation", str(exc), sc.source) from None


def sweep_spec(sc: Scenario) -> tuple[str, list] | None:
    s = sc.get("sweep")
    if not s:
        return None
    if not isinstance(s, dict) or "param" not in s or "values" not in s:
        raise ScenarioError("sweep", "needs 'param' and 'values'", sc.source)
    return str(s["param"]), list(s["values"])
