"""Scenario configs, stability constants, study runners, and output emission.

This module strings the library together into reproducible studies:

* :func:`load_config` reads a flat INI file into a :class:`ScenarioConfig`
  and validates every field eagerly, so a bad config fails before any
  compute starts.
* :func:`stability_constant` evaluates the perturbation-growth constants
  for a mollified kernel on a ball, in log space so that short-horizon and
  absurdly-large values are handled with the same code path.
* ``run_simulate``, ``run_convergence_n``, ``run_convergence_delta`` and
  ``run_mean_field`` execute the four study types and return a
  :class:`RunReport` of tables, plots and binary artifacts.
* :func:`emit_outputs` writes the report to disk.  CSV and binary outputs
  are byte-deterministic given the same config and seed; the manifest
  additionally records wall times, which of course are not.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import math
import subprocess
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import snapshots
from .currents import (
    CurrentPolyline,
    DictionarySpec,
    Loop,
    bl_metric_lower,
    bl_metric_upper,
    conservation_report,
    empirical_current,
    mass_norm_upper,
    push_forward,
    suggest_grid,
)
from .errors import (
    ConstructionError,
    InvalidMatchingError,
    InvalidParameterError,
    NumericalError,
    SimulationAborted,
)
from .euler_ref import (
    PeriodicVorticityField,
    SobolevMonitor,
    SpectralBiotSavart,
    face_tail_fraction,
    filament_to_grid,
    fit_stability_horizon,
    init_vortex_ring,
    l2_distance,
    step_rk4_spectral,
)
from .filaments import Filament, FilamentEnsemble, RingVorticity, sample_initial_filaments, simulate
from .kernel import BiotSavartParams, build_mollifier, estimate_kernel_constants, mollified_kernel_build

__all__ = [
    "ScenarioConfig",
    "load_config",
    "StabilityConstants",
    "stability_constant",
    "SeriesPlot",
    "RunReport",
    "run_simulate",
    "run_convergence_n",
    "run_convergence_delta",
    "run_mean_field",
    "emit_outputs",
]


# --------------------------------------------------------------------------
# cached heavy builds (profiles and kernels are immutable, so sharing is safe)

@lru_cache(maxsize=None)
def _profile_cached(fourier_cutoff):
    return build_mollifier(fourier_cutoff)


@lru_cache(maxsize=None)
def _kernel_cached(fourier_cutoff, delta, gamma):
    return mollified_kernel_build(
        _profile_cached(fourier_cutoff), delta, params=BiotSavartParams(gamma=gamma)
    )


# --------------------------------------------------------------------------
# configuration

# section -> key -> (kind, default).  ``None`` defaults are resolved in
# load_config from other fields.  kinds: float / int / bool / str / floats /
# ints / floats3.
_SCHEMA = {
    "scenario": {"name": ("str", "unnamed")},
    "kernel": {
        "gamma": ("float", 1.0),
        "fourier_cutoff": ("float", 2.0),
        "deltas": ("floats", (0.2,)),
    },
    "filaments": {
        "n": ("ints", (8,)),
        "n_ref": ("int", 32),
        "nodes": ("int", 24),
        "seed": ("int", 0),
    },
    "target": {
        "circulation": ("float", 1.0),
        "radius": ("float", 1.0),
        "core_width": ("float", 0.2),
        "center": ("floats3", (0.0, 0.0, 0.0)),
    },
    "time": {
        "horizon": ("float", 0.5),
        "dt": ("float", 0.02),
        "snapshot_every": ("int", 1),
    },
    "grid": {
        "resolution": ("int", 64),
        "box_length": ("float", 1.6),
        "ring_radius": ("float", None),
        "core_width": ("float", None),
        "circulation": ("float", None),
        "pilot_steps": ("int", 40),
        "pilot_safety": ("float", 1.0 / 3.0),
        "monitor_s": ("float", 2.0),
        "mollify_initial": ("bool", False),
    },
    "metric": {
        "n_centers": ("int", 48),
        "width_factors": ("floats", (0.05, 0.125, 0.25, 0.5)),
        "n_wave_magnitudes": ("int", 2),
        "refine_passes": ("int", 2),
    },
    "mean_field": {
        "delta_grid": ("floats", (0.4, 0.3, 0.25)),
        "stability_radius": ("float", 1.25),
        "tolerance_scale": ("float", 1.0),
        "comparison_delta": ("float", 0.105),
        "comparison_resolution": ("int", 128),
        "comparison_box_length": ("float", 8.0),
        "comparison_core_width": ("float", None),
        "schedule_mode": ("str", "tightest"),
    },
    "output": {
        "directory": ("str", "out"),
        "threads": ("int", 1),
    },
}

# dataclass field -> (section, key), used both to fill the config and to
# render its canonical text.
_FIELD_MAP = [
    ("name", "scenario", "name"),
    ("gamma", "kernel", "gamma"),
    ("fourier_cutoff", "kernel", "fourier_cutoff"),
    ("deltas", "kernel", "deltas"),
    ("n_list", "filaments", "n"),
    ("n_ref", "filaments", "n_ref"),
    ("n_nodes", "filaments", "nodes"),
    ("seed", "filaments", "seed"),
    ("circulation", "target", "circulation"),
    ("ring_radius", "target", "radius"),
    ("ring_core_width", "target", "core_width"),
    ("ring_center", "target", "center"),
    ("horizon", "time", "horizon"),
    ("dt", "time", "dt"),
    ("snapshot_every", "time", "snapshot_every"),
    ("grid_resolution", "grid", "resolution"),
    ("grid_box_length", "grid", "box_length"),
    ("grid_ring_radius", "grid", "ring_radius"),
    ("grid_core_width", "grid", "core_width"),
    ("grid_circulation", "grid", "circulation"),
    ("pilot_steps", "grid", "pilot_steps"),
    ("pilot_safety", "grid", "pilot_safety"),
    ("monitor_s", "grid", "monitor_s"),
    ("mollify_initial", "grid", "mollify_initial"),
    ("dict_centers", "metric", "n_centers"),
    ("dict_width_factors", "metric", "width_factors"),
    ("dict_wave_magnitudes", "metric", "n_wave_magnitudes"),
    ("dict_refine_passes", "metric", "refine_passes"),
    ("mf_delta_grid", "mean_field", "delta_grid"),
    ("mf_stability_radius", "mean_field", "stability_radius"),
    ("mf_tolerance_scale", "mean_field", "tolerance_scale"),
    ("mf_comparison_delta", "mean_field", "comparison_delta"),
    ("mf_comparison_resolution", "mean_field", "comparison_resolution"),
    ("mf_comparison_box_length", "mean_field", "comparison_box_length"),
    ("mf_comparison_core_width", "mean_field", "comparison_core_width"),
    ("mf_schedule_mode", "mean_field", "schedule_mode"),
    ("out_dir", "output", "directory"),
    ("threads", "output", "threads"),
]


def _coerce(kind, raw, where):
    try:
        if kind == "float":
            return float(raw)
        if kind == "int":
            return int(raw)
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if kind == "str":
            return raw.strip()
        parts = raw.replace(",", " ").split()
        if kind == "floats":
            return tuple(float(p) for p in parts)
        if kind == "ints":
            return tuple(int(p) for p in parts)
        if kind == "floats3":
            vals = tuple(float(p) for p in parts)
            if len(vals) != 3:
                raise ValueError("needs exactly three components")
            return vals
    except ValueError as exc:
        raise InvalidParameterError(f"bad value for {where}: {raw!r} ({exc})") from None
    raise InvalidParameterError(f"unknown schema kind {kind!r}")


@dataclass(frozen=True)
class ScenarioConfig:
    """Fully-resolved scenario parameters.

    Every field has a concrete value by the time the instance exists;
    optional keys have been filled from their defaults (the grid-native
    ring inherits the sampling target's parameters via the shared-variance
    width bridge, the comparison instrument additionally folds in the
    deposit smearing).
    """

    name: str
    gamma: float
    fourier_cutoff: float
    deltas: tuple
    n_list: tuple
    n_ref: int
    n_nodes: int
    seed: int
    circulation: float
    ring_radius: float
    ring_core_width: float
    ring_center: tuple
    horizon: float
    dt: float
    snapshot_every: int
    grid_resolution: int
    grid_box_length: float
    grid_ring_radius: float
    grid_core_width: float
    grid_circulation: float
    pilot_steps: int
    pilot_safety: float
    monitor_s: float
    mollify_initial: bool
    dict_centers: int
    dict_width_factors: tuple
    dict_wave_magnitudes: int
    dict_refine_passes: int
    mf_delta_grid: tuple
    mf_stability_radius: float
    mf_tolerance_scale: float
    mf_comparison_delta: float
    mf_comparison_resolution: int
    mf_comparison_box_length: float
    mf_comparison_core_width: float
    mf_schedule_mode: str
    out_dir: str
    threads: int

    # -- derived helpers ---------------------------------------------------

    def target(self):
        return RingVorticity(
            circulation=self.circulation,
            ring_radius=self.ring_radius,
            core_width=self.ring_core_width,
            center=self.ring_center,
        )

    def dictionary_spec(self):
        return DictionarySpec(
            n_centers=self.dict_centers,
            width_factors=self.dict_width_factors,
            n_wave_magnitudes=self.dict_wave_magnitudes,
            refine_passes=self.dict_refine_passes,
        )

    def profile(self):
        return _profile_cached(self.fourier_cutoff)

    def kernel(self, delta):
        return _kernel_cached(self.fourier_cutoff, float(delta), self.gamma)

    def n_steps(self):
        return int(round(self.horizon / self.dt))

    def render(self):
        """Canonical INI text of the effective config (hashed in manifests)."""
        lines = []
        last = None
        for fname, section, key in _FIELD_MAP:
            if section != last:
                if last is not None:
                    lines.append("")
                lines.append(f"[{section}]")
                last = section
            value = getattr(self, fname)
            if isinstance(value, tuple):
                text = " ".join(_scalar_text(v) for v in value)
            else:
                text = _scalar_text(value)
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"


def _scalar_text(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def load_config(path, *, seed=None, threads=None, out_dir=None):
    """Read a scenario INI file and validate it eagerly.

    ``seed``, ``threads`` and ``out_dir`` override the corresponding file
    entries (the command line wires its flags through here).  Unknown
    sections or keys, malformed values, and inconsistent parameter
    combinations all raise :class:`InvalidParameterError` before any
    compute happens.
    """
    parser = configparser.ConfigParser(interpolation=None)
    text = Path(path).read_text()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise InvalidParameterError(f"cannot parse config {path}: {exc}") from None

    values = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise InvalidParameterError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise InvalidParameterError(f"unknown config key {key!r} in [{section}]")
            kind, _ = _SCHEMA[section][key]
            values[(section, key)] = _coerce(kind, raw, f"[{section}] {key}")
    for section, keys in _SCHEMA.items():
        for key, (kind, default) in keys.items():
            values.setdefault((section, key), default)

    if seed is not None:
        values[("filaments", "seed")] = int(seed)
    if threads is not None:
        values[("output", "threads")] = int(threads)
    if out_dir is not None:
        values[("output", "directory")] = str(out_dir)

    # resolve derived defaults
    a_t = values[("target", "core_width")]
    if values[("grid", "ring_radius")] is None:
        values[("grid", "ring_radius")] = values[("target", "radius")]
    if values[("grid", "core_width")] is None:
        # same physical cross-section variance in the grid-native width
        # convention (variance a^2/2) as the target's (variance a^2)
        values[("grid", "core_width")] = math.sqrt(2.0) * a_t
    if values[("grid", "circulation")] is None:
        values[("grid", "circulation")] = values[("target", "circulation")]
    if values[("mean_field", "comparison_core_width")] is None:
        # the deposited ensemble spreads as ensemble cross-section plus
        # deposit smearing, added in quadrature
        d_cmp = values[("mean_field", "comparison_delta")]
        values[("mean_field", "comparison_core_width")] = math.sqrt(
            2.0 * a_t * a_t + (2.7 * d_cmp) ** 2
        )

    kwargs = {fname: values[(sec, key)] for fname, sec, key in _FIELD_MAP}
    cfg = ScenarioConfig(**kwargs)
    _validate_config(cfg)
    return cfg


def _require(cond, message):
    if not cond:
        raise InvalidParameterError(message)


def _validate_config(cfg):
    _require(cfg.gamma > 0.0, f"gamma must be positive, got {cfg.gamma!r}")
    _require(cfg.fourier_cutoff > 0.0, "fourier_cutoff must be positive")
    _require(len(cfg.deltas) >= 1, "deltas must list at least one width")
    _require(all(d > 0.0 for d in cfg.deltas), "every delta must be positive")
    _require(len(set(cfg.deltas)) == len(cfg.deltas), "deltas must be distinct")
    _require(len(cfg.n_list) >= 1, "n must list at least one ensemble size")
    _require(all(n >= 1 for n in cfg.n_list), "ensemble sizes must be >= 1")
    _require(
        list(cfg.n_list) == sorted(set(cfg.n_list)),
        "ensemble sizes must be strictly ascending",
    )
    _require(cfg.n_ref >= max(cfg.n_list), "n_ref must be at least max(n)")
    _require(cfg.n_nodes >= 8, "nodes must be >= 8")
    _require(cfg.seed >= 0, "seed must be nonnegative")
    cfg.target()  # RingVorticity enforces its own parameter constraints
    _require(cfg.horizon > 0.0, "horizon must be positive")
    _require(cfg.dt > 0.0, "dt must be positive")
    n_steps = int(round(cfg.horizon / cfg.dt))
    _require(
        n_steps >= 1 and abs(n_steps * cfg.dt - cfg.horizon) <= 1e-9 * max(1.0, cfg.horizon),
        f"horizon {cfg.horizon!r} is not an integer multiple of dt {cfg.dt!r}",
    )
    _require(cfg.snapshot_every >= 1, "snapshot_every must be >= 1")
    _require(cfg.grid_resolution >= 8, "grid resolution must be >= 8")
    _require(cfg.grid_box_length > 0.0, "grid box_length must be positive")
    _require(cfg.grid_ring_radius > 0.0, "grid ring_radius must be positive")
    _require(cfg.grid_core_width > 0.0, "grid core_width must be positive")
    _require(cfg.grid_circulation != 0.0, "grid circulation must be nonzero")
    _require(cfg.pilot_steps >= 2, "pilot_steps must be >= 2")
    _require(0.0 < cfg.pilot_safety <= 1.0, "pilot_safety must lie in (0, 1]")
    _require(cfg.monitor_s > 1.5, "monitor_s must exceed 3/2")
    cfg.dictionary_spec()  # DictionarySpec enforces its own constraints
    _require(len(cfg.mf_delta_grid) >= 1, "delta_grid must list at least one width")
    _require(all(d > 0.0 for d in cfg.mf_delta_grid), "delta_grid entries must be positive")
    _require(
        len(set(cfg.mf_delta_grid)) == len(cfg.mf_delta_grid),
        "delta_grid entries must be distinct",
    )
    _require(cfg.mf_stability_radius > 0.0, "stability_radius must be positive")
    _require(cfg.mf_tolerance_scale > 0.0, "tolerance_scale must be positive")
    _require(cfg.mf_comparison_delta > 0.0, "comparison_delta must be positive")
    _require(cfg.mf_comparison_resolution >= 8, "comparison_resolution must be >= 8")
    _require(cfg.mf_comparison_box_length > 0.0, "comparison_box_length must be positive")
    _require(cfg.mf_comparison_core_width > 0.0, "comparison_core_width must be positive")
    _require(
        cfg.mf_schedule_mode in ("tightest", "loosest"),
        f"schedule_mode must be 'tightest' or 'loosest', got {cfg.mf_schedule_mode!r}",
    )
    _require(cfg.threads >= 1, "threads must be >= 1")


# --------------------------------------------------------------------------
# stability constants

@dataclass(frozen=True)
class StabilityConstants:
    """Perturbation-growth constants of a mollified kernel on a ball.

    Stored in log space: the double-exponential dependence on the horizon
    overflows a float for modest parameters, and a bound that has become
    ``inf`` should say so rather than crash.
    """

    delta: float
    radius: float
    horizon: float
    c0: float
    c1: float
    c2: float
    log_c_star: float
    log_c_lower_star: float
    log_c_delta_r: float

    @staticmethod
    def _exp(logv):
        return math.exp(logv) if logv < 709.0 else math.inf

    @property
    def c_star(self):
        return self._exp(self.log_c_star)

    @property
    def c_lower_star(self):
        return self._exp(self.log_c_lower_star)

    @property
    def c_delta_r(self):
        return self._exp(self.log_c_delta_r)


def stability_constant(consts, radius, horizon):
    """Growth constants for initial data supported in a ball of ``radius``.

    ``consts`` carries the sup norms of the kernel and its first two
    derivatives.  The inner constant couples the zeroth and first
    derivative through a Gronwall factor, the outer one exponentiates the
    result once more; all arithmetic is done on logarithms.  A zero
    horizon is accepted and gives the exact limits (outer constant 2).
    """
    R = float(radius)
    T = float(horizon)
    if R <= 0.0:
        raise InvalidParameterError(f"radius must be positive, got {radius!r}")
    if T < 0.0:
        raise InvalidParameterError(f"horizon must be nonnegative, got {horizon!r}")
    c0, c1, c2 = float(consts.c0), float(consts.c1), float(consts.c2)
    if min(c0, c1, c2) <= 0.0:
        raise InvalidParameterError("kernel sup norms must be positive")

    lr = math.log(R)
    lt = math.log(T) if T > 0.0 else -math.inf
    l01 = math.log(c0) + math.log(c1)
    l2c = math.log(c2)
    growth = c1 * T * R
    inner = np.logaddexp(np.logaddexp(l01, l2c), l2c + l01 + lt + lr + growth)
    log_c_star = 2.0 * lr + float(inner) + 2.0 * growth
    log_c_lower = float(np.logaddexp(lt + l2c + lr, math.log(2.0))) + 2.0 * growth
    if T == 0.0:
        log_c_dr = log_c_lower
    elif log_c_star > 700.0:
        log_c_dr = math.inf
    else:
        log_c_dr = log_c_lower + T * math.exp(log_c_star)
    return StabilityConstants(
        delta=float(getattr(consts, "delta", float("nan"))),
        radius=R,
        horizon=T,
        c0=c0,
        c1=c1,
        c2=c2,
        log_c_star=float(log_c_star),
        log_c_lower_star=float(log_c_lower),
        log_c_delta_r=float(log_c_dr),
    )


# --------------------------------------------------------------------------
# reports

@dataclass
class SeriesPlot:
    """A small log-log (or linear) plot: named series over shared axes."""

    name: str
    x_label: str
    y_label: str
    series: list  # (label, xs, ys) triples
    log_x: bool = False
    log_y: bool = False


@dataclass
class RunReport:
    """Everything a runner produced, ready for :func:`emit_outputs`.

    ``tables`` maps a base name to ``(header, rows)``; ``records`` holds
    trajectory records to be flattened into node tables; ``currents`` and
    ``fields`` hold binary snapshot artifacts keyed by file name.
    """

    scenario: str
    config_text: str
    seed: int
    out_dir: str
    threads: int = 1
    tables: dict = field(default_factory=dict)
    records: dict = field(default_factory=dict)
    currents: dict = field(default_factory=dict)
    fields: dict = field(default_factory=dict)
    plots: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    wall_times: dict = field(default_factory=dict)


def _new_report(cfg, scenario):
    return RunReport(
        scenario=scenario,
        config_text=cfg.render(),
        seed=cfg.seed,
        out_dir=cfg.out_dir,
        threads=cfg.threads,
    )


# --------------------------------------------------------------------------
# shared runner helpers

def _current_at(record, index):
    return CurrentPolyline(
        loops=tuple(
            Loop(alpha=a, nodes=nd)
            for a, nd in zip(record.alphas, record.states[index])
        )
    )


def _final_ensemble(record, kernel):
    fils = tuple(
        Filament(id=fid, alpha=a, nodes=nd)
        for fid, a, nd in zip(record.filament_ids, record.alphas, record.states[-1])
    )
    return FilamentEnsemble(filaments=fils, kernel=kernel, time=record.times[-1])


def _expanded_upper(xi_coarse, xi_ref, circulation):
    """Dual-norm upper bound against a nested refinement of the same curve.

    When the reference carries ``per`` telescoped-weight loops for each
    coarse loop and the coarse weights are exactly the block sums, the
    coarse current is re-expressed as ``per`` weighted copies of each of
    its loops; the matched-splitting route then pairs copy against
    refinement instead of falling back to the (much cruder) mass bound.
    """
    n = len(xi_coarse.loops)
    n_ref = len(xi_ref.loops)
    if n_ref % n == 0:
        per = n_ref // n
        w = np.diff(float(circulation) * np.arange(n_ref + 1.0) / n_ref)
        blocks_ok = all(
            math.fsum(w[j * per: (j + 1) * per]) == lo.alpha
            for j, lo in enumerate(xi_coarse.loops)
        )
        ref_ok = all(wj == lo.alpha for wj, lo in zip(w, xi_ref.loops))
        if blocks_ok and ref_ok:
            loops = tuple(
                Loop(alpha=float(w[j * per + i]), nodes=lo.nodes)
                for j, lo in enumerate(xi_coarse.loops)
                for i in range(per)
            )
            try:
                return bl_metric_upper(CurrentPolyline(loops=loops), xi_ref)
            except InvalidMatchingError:
                pass
    return bl_metric_upper(xi_coarse, xi_ref)


def _loglog_slope(xs, ys):
    pts = [(x, y) for x, y in zip(xs, ys) if x > 0.0 and y > 0.0 and math.isfinite(y)]
    if len(pts) < 2:
        return float("nan")
    lx = np.log([p[0] for p in pts])
    ly = np.log([p[1] for p in pts])
    return float(np.polyfit(lx, ly, 1)[0])


def _mollify_field(fld, delta, profile):
    rho = SpectralBiotSavart.build(fld.resolution, fld.box_length, delta, profile).mollifier_hat
    return PeriodicVorticityField(
        box_length=fld.box_length,
        resolution=fld.resolution,
        xi_hat=fld.xi_hat * rho,
        time=fld.time,
    )


def _snapshot_steps(n_steps, every):
    steps = [0]
    steps += [k for k in range(1, n_steps + 1) if k % every == 0 or k == n_steps]
    return steps


# --------------------------------------------------------------------------
# runners

def run_simulate(cfg):
    """Single ensemble run with the conservation ledger and a final state.

    Uses the one configured width and the one configured ensemble size;
    emits the node trajectory, the conservation table (energy pairing
    drift, sampled sup bound, growth bound on the distance to zero), and
    the final state as a filament file.
    """
    t_begin = time.perf_counter()
    if len(cfg.deltas) != 1:
        raise InvalidParameterError("simulate expects exactly one delta")
    if len(cfg.n_list) != 1:
        raise InvalidParameterError("simulate expects exactly one ensemble size")
    delta = cfg.deltas[0]
    n = cfg.n_list[0]
    report = _new_report(cfg, "simulate")

    kern = cfg.kernel(delta)
    ens, _ = sample_initial_filaments(
        cfg.target(), n, cfg.n_nodes, cfg.seed, kern, with_error=False
    )
    xi0 = empirical_current(ens)
    t0 = time.perf_counter()
    rec = simulate(ens, cfg.horizon, cfg.dt, snapshot_every=cfg.snapshot_every)
    report.wall_times["run"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    grid = suggest_grid(xi0, kern)
    cons = conservation_report(
        rec, kern, grid, dictionary_spec=cfg.dictionary_spec(), seed=cfg.seed
    )
    report.wall_times["conservation"] = time.perf_counter() - t0

    rows = [
        (
            e.time,
            e.l2_norm,
            e.sup_norm,
            e.metric_lower,
            e.ee1_drift,
            int(e.ee1_ok),
            int(e.ee2_ok),
            e.ee3_bound,
            int(e.ee3_ok),
        )
        for e in cons.entries
    ]
    report.tables["conservation"] = (
        ("t", "l2", "sup", "metric_lower", "ee1_drift", "ee1_ok", "ee2_ok", "ee3_bound", "ee3_ok"),
        rows,
    )
    report.records["trajectory"] = rec
    report.currents["final_state.vfil"] = _final_ensemble(rec, kern)
    times = [e.time for e in cons.entries]
    report.plots.append(
        SeriesPlot(
            name="conservation",
            x_label="t",
            y_label="norms",
            series=[
                ("l2", times, [e.l2_norm for e in cons.entries]),
                ("sup", times, [e.sup_norm for e in cons.entries]),
                ("metric_lower", times, [e.metric_lower for e in cons.entries]),
            ],
        )
    )
    report.summary = {
        "delta": delta,
        "n": n,
        "all_ok": bool(cons.all_ok),
        "max_ee1_drift": max(abs(e.ee1_drift) for e in cons.entries),
        "initial_mass_upper": mass_norm_upper(xi0),
        "final_l2": cons.entries[-1].l2_norm,
    }
    report.wall_times["total"] = time.perf_counter() - t_begin
    return report


def run_convergence_n(cfg):
    """Ensemble-size study against one fine reference run.

    All runs share the kernel, the node count, the seed (hence the sampler
    phase) and the step size, so the per-snapshot upper bound uses the
    nested matched expansion whenever the telescoped weights line up.
    """
    t_begin = time.perf_counter()
    if len(cfg.deltas) != 1:
        raise InvalidParameterError("converge-n expects exactly one delta")
    if cfg.n_ref < 4 * max(cfg.n_list):
        raise InvalidParameterError(
            f"n_ref = {cfg.n_ref} too small: need at least 4 * max(n) = {4 * max(cfg.n_list)}"
        )
    delta = cfg.deltas[0]
    report = _new_report(cfg, "converge-n")
    kern = cfg.kernel(delta)
    target = cfg.target()
    dict_spec = cfg.dictionary_spec()

    t0 = time.perf_counter()
    ens_ref, _ = sample_initial_filaments(
        target, cfg.n_ref, cfg.n_nodes, cfg.seed, kern, with_error=False
    )
    rec_ref = simulate(ens_ref, cfg.horizon, cfg.dt, snapshot_every=cfg.snapshot_every)
    report.wall_times["reference_run"] = time.perf_counter() - t0

    rows = []
    failures = []
    final_upper = {}
    for n in cfg.n_list:
        ens, _ = sample_initial_filaments(
            target, n, cfg.n_nodes, cfg.seed, kern, with_error=False
        )
        t0 = time.perf_counter()
        try:
            rec = simulate(ens, cfg.horizon, cfg.dt, snapshot_every=cfg.snapshot_every)
        except SimulationAborted as exc:
            failures.append((f"n={n}", str(exc)))
            continue
        report.wall_times[f"run_n{n}"] = time.perf_counter() - t0
        if len(rec.times) != len(rec_ref.times) or any(
            a != b for a, b in zip(rec.times, rec_ref.times)
        ):
            raise ConstructionError("snapshot times diverged between runs")
        err0 = None
        for i, t in enumerate(rec.times):
            xi = _current_at(rec, i)
            xi_ref = _current_at(rec_ref, i)
            upper, tag = _expanded_upper(xi, xi_ref, target.circulation)
            lower, _ = bl_metric_lower(xi, xi_ref, dict_spec, seed=cfg.seed)
            if err0 is None:
                err0 = upper
            rows.append((n, t, lower, upper, err0, tag))
            if i == len(rec.times) - 1:
                final_upper[n] = upper

    report.tables["metric_vs_n"] = (
        ("n", "t", "lower", "upper", "initial_error", "method"),
        rows,
    )
    if failures:
        report.tables["failures"] = (("stage", "message"), failures)

    ns = sorted(final_upper)
    uppers = [final_upper[n] for n in ns]
    rate = -_loglog_slope(ns, uppers)
    report.plots.append(
        SeriesPlot(
            name="upper_vs_n",
            x_label="ensemble size",
            y_label="metric upper bound",
            series=[("final-time upper", list(map(float, ns)), uppers)],
            log_x=True,
            log_y=True,
        )
    )
    report.summary = {
        "delta": delta,
        "n_ref": cfg.n_ref,
        "fitted_rate": rate,
        "final_upper": {str(n): final_upper[n] for n in ns},
        "n_failed": len(failures),
    }
    report.wall_times["total"] = time.perf_counter() - t_begin
    return report


def run_convergence_delta(cfg):
    """Width study on a shared spectral initial condition.

    One ring is built once on the grid; every width in the sweep, plus the
    unmollified limit, is stepped from the same numbers.  The horizon is
    the pilot-rule estimate on the *unmollified* run (the most
    conservative of the family) capped by the configured horizon, rounded
    down to an even number of steps so a half-time snapshot exists.
    """
    t_begin = time.perf_counter()
    n = cfg.grid_resolution
    L = cfg.grid_box_length
    h = L / n
    d_min = min(cfg.deltas)
    if h > 0.5 * d_min + 1e-12:
        raise InvalidParameterError(
            f"grid spacing {h!r} cannot resolve delta = {d_min!r}: need h <= delta/2"
        )
    report = _new_report(cfg, "converge-delta")
    profile = cfg.profile()

    t0 = time.perf_counter()
    f_init = init_vortex_ring(
        L,
        n,
        radius=cfg.grid_ring_radius,
        core_width=cfg.grid_core_width,
        circulation=cfg.grid_circulation,
    )
    report.wall_times["initial_data"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    t_pilot, c_fit = fit_stability_horizon(
        f_init,
        0.0,
        cfg.dt,
        s=cfg.monitor_s,
        pilot_steps=cfg.pilot_steps,
        safety=cfg.pilot_safety,
        profile=profile,
    )
    report.wall_times["pilot"] = time.perf_counter() - t0
    horizon = min(t_pilot, cfg.horizon)
    n_steps = int(horizon / cfg.dt) // 2 * 2
    if n_steps < 2:
        raise InvalidParameterError(
            f"pilot horizon {t_pilot!r} shorter than two steps of dt = {cfg.dt!r}"
        )
    half = n_steps // 2

    deltas_all = (0.0,) + tuple(sorted(cfg.deltas, reverse=True))
    states = {}
    hs_rows = []
    failures = []
    initial_hs = {}
    tails = {}
    for d in deltas_all:
        fld = f_init
        if cfg.mollify_initial and d > 0.0:
            fld = _mollify_field(f_init, d, profile)
        monitor = SobolevMonitor(s=cfg.monitor_s)
        monitor.record(fld)
        initial_hs[d] = monitor.history[0][1]
        kept = {0: fld}
        t0 = time.perf_counter()
        try:
            for k in range(1, n_steps + 1):
                fld = step_rk4_spectral(fld, cfg.dt, d, profile=profile)
                monitor.record(fld)
                if k in (half, n_steps):
                    kept[k] = fld
        except NumericalError as exc:
            failures.append((f"delta={d!r}", str(exc)))
            continue
        report.wall_times[f"run_delta_{d:g}"] = time.perf_counter() - t0
        states[d] = kept
        tails[d] = face_tail_fraction(fld)
        hs_rows.extend((d, t, v) for t, v in monitor.history)

    dist_rows = []
    if 0.0 in states:
        base = states[0.0]
        for d in deltas_all:
            if d not in states:
                continue
            for k in (0, half, n_steps):
                dist_rows.append(
                    (d, states[d][k].time, l2_distance(states[d][k], base[k]))
                )
    report.tables["distances"] = (("delta", "t", "l2_distance"), dist_rows)
    report.tables["sobolev"] = (("delta", "t", "hs"), hs_rows)
    if failures:
        report.tables["failures"] = (("stage", "message"), failures)

    # final-time distances per positive width, for the trend fit
    final_d = sorted(d for d in cfg.deltas if d in states and dist_rows)
    final_dist = [
        next(dist for dd, _, dist in reversed(dist_rows) if dd == d) for d in final_d
    ]
    trend = _loglog_slope(final_d, final_dist)

    hs_by_delta = {}
    for d, _, v in hs_rows:
        hs_by_delta[d] = max(hs_by_delta.get(d, 0.0), v)
    max_initial = max(initial_hs.values()) if initial_hs else float("nan")
    sup_all = max(hs_by_delta.values()) if hs_by_delta else float("nan")

    report.plots.append(
        SeriesPlot(
            name="distance_vs_delta",
            x_label="delta",
            y_label="distance to unmollified run",
            series=[("final time", final_d, final_dist)],
            log_x=True,
            log_y=True,
        )
    )
    sob_series = []
    for d in deltas_all:
        pts = [(t, v) for dd, t, v in hs_rows if dd == d]
        if pts:
            sob_series.append((f"delta={d:g}", [p[0] for p in pts], [p[1] for p in pts]))
    report.plots.append(
        SeriesPlot(
            name="sobolev_history",
            x_label="t",
            y_label="H^s norm",
            series=sob_series,
        )
    )
    report.summary = {
        "pilot_horizon": t_pilot,
        "pilot_growth_constant": c_fit,
        "horizon_effective": n_steps * cfg.dt,
        "n_steps": n_steps,
        "distance_trend": trend,
        "hs_initial_max": max_initial,
        "hs_sup": sup_all,
        "hs_sup_ratio": sup_all / max_initial if max_initial > 0 else float("nan"),
        "face_tail_final": {f"{d:g}": tails[d] for d in sorted(tails)},
        "n_failed": len(failures),
    }
    report.wall_times["total"] = time.perf_counter() - t_begin
    return report


def run_mean_field(cfg):
    """Width-schedule study: pick a width per ensemble size, verify the bound.

    Phases: measure the initial sampling error of every ensemble size
    against the fine reference, evaluate the stability constants on the
    width grid, select the admissible width per size (smallest by default:
    that is the choice that actually shrinks the width as the tolerance
    tightens), then run the dynamics and check, in log space, that the
    distance to the spectral reference run is bounded by the stability
    constant times the initial error plus the reference deposit error.
    Infeasible sizes get a documented schedule row instead of a run.
    """
    t_begin = time.perf_counter()
    if cfg.n_ref < 4 * max(cfg.n_list):
        raise InvalidParameterError(
            f"n_ref = {cfg.n_ref} too small: need at least 4 * max(n) = {4 * max(cfg.n_list)}"
        )
    n_steps = cfg.n_steps()
    if n_steps % cfg.snapshot_every != 0:
        raise InvalidParameterError(
            "mean-field needs snapshot_every to divide the step count so grid "
            "and filament snapshots line up"
        )
    report = _new_report(cfg, "mean-field")
    target = cfg.target()
    profile = cfg.profile()
    grid_deltas = tuple(sorted(cfg.mf_delta_grid, reverse=True))

    # phase 1: initial sampling errors against the fine reference current
    t0 = time.perf_counter()
    kern_host = cfg.kernel(grid_deltas[0])
    ens_ref0, _ = sample_initial_filaments(
        target, cfg.n_ref, cfg.n_nodes, cfg.seed, kern_host, with_error=False
    )
    xi_ref0 = empirical_current(ens_ref0)
    err0 = {}
    for n in cfg.n_list:
        ens0, _ = sample_initial_filaments(
            target, n, cfg.n_nodes, cfg.seed, kern_host, with_error=False
        )
        err0[n], _ = _expanded_upper(
            empirical_current(ens0), xi_ref0, target.circulation
        )
    report.wall_times["initial_errors"] = time.perf_counter() - t0

    # phase 2: stability constants on the width grid
    t0 = time.perf_counter()
    stab = {}
    const_rows = []
    for d in grid_deltas:
        kc = estimate_kernel_constants(cfg.kernel(d))
        sc = stability_constant(kc, cfg.mf_stability_radius, cfg.horizon)
        stab[d] = sc
        const_rows.append(
            (d, sc.c0, sc.c1, sc.c2, sc.log_c_star, sc.log_c_lower_star, sc.log_c_delta_r)
        )
    report.tables["constants"] = (
        ("delta", "c0", "c1", "c2", "log_c_star", "log_c_lower_star", "log_c_delta_r"),
        const_rows,
    )
    report.wall_times["constants"] = time.perf_counter() - t0

    # phase 3: width schedule
    sched_rows = []
    delta_for = {}
    for n in cfg.n_list:
        tol = cfg.mf_tolerance_scale / math.log(n + math.e)
        log_err = math.log(err0[n]) if err0[n] > 0.0 else -math.inf
        admissible = [
            d for d in grid_deltas if stab[d].log_c_delta_r + log_err <= math.log(tol)
        ]
        if admissible:
            pick = min(admissible) if cfg.mf_schedule_mode == "tightest" else max(admissible)
            delta_for[n] = pick
            sched_rows.append(
                (n, err0[n], tol, pick, stab[pick].log_c_delta_r, 1)
            )
        else:
            sched_rows.append((n, err0[n], tol, float("nan"), float("nan"), 0))
    report.tables["schedule"] = (
        ("n", "initial_error", "tolerance", "delta", "log_c_delta_r", "feasible"),
        sched_rows,
    )
    report.summary = {
        "schedule": {str(n): delta_for.get(n, None) for n in cfg.n_list},
        "n_feasible": len(delta_for),
        "schedule_mode": cfg.mf_schedule_mode,
    }
    if not delta_for:
        report.summary["bound_ok_all"] = True  # vacuously: nothing to check
        report.wall_times["total"] = time.perf_counter() - t_begin
        return report

    # phase 4: reference dynamics per distinct selected width, plus the
    # unmollified spectral run on the comparison grid
    refs = {}
    for d in sorted(set(delta_for.values())):
        kern = cfg.kernel(d)
        ens, _ = sample_initial_filaments(
            target, cfg.n_ref, cfg.n_nodes, cfg.seed, kern, with_error=False
        )
        t0 = time.perf_counter()
        refs[d] = simulate(ens, cfg.horizon, cfg.dt, snapshot_every=cfg.snapshot_every)
        report.wall_times[f"reference_delta_{d:g}"] = time.perf_counter() - t0

    L_cmp = cfg.mf_comparison_box_length
    n_cmp = cfg.mf_comparison_resolution
    d_cmp = cfg.mf_comparison_delta
    shift = np.array([0.5 * L_cmp, 0.5 * L_cmp, 0.5 * L_cmp]) - np.asarray(
        cfg.ring_center, dtype=float
    )
    t0 = time.perf_counter()
    fld = init_vortex_ring(
        L_cmp,
        n_cmp,
        radius=target.ring_radius,
        core_width=cfg.mf_comparison_core_width,
        circulation=target.circulation,
    )
    snap_steps = _snapshot_steps(n_steps, cfg.snapshot_every)
    grid_states = {0: fld}
    for k in range(1, n_steps + 1):
        fld = step_rk4_spectral(fld, cfg.dt, 0.0, profile=profile)
        if k in snap_steps:
            grid_states[k] = fld
    report.wall_times["comparison_run"] = time.perf_counter() - t0

    def deposit(xi):
        shifted = push_forward(xi, lambda p: p + shift)
        dep, _ = filament_to_grid(shifted, d_cmp, L_cmp, n_cmp, profile=profile)
        return dep

    # phase 5: coarse runs and the triangle table
    col2_cache = {}
    tri_rows = []
    failures = []
    bound_ok = True
    for n in cfg.n_list:
        if n not in delta_for:
            continue
        d = delta_for[n]
        kern = cfg.kernel(d)
        ens, _ = sample_initial_filaments(
            target, n, cfg.n_nodes, cfg.seed, kern, with_error=False
        )
        t0 = time.perf_counter()
        try:
            rec = simulate(ens, cfg.horizon, cfg.dt, snapshot_every=cfg.snapshot_every)
        except SimulationAborted as exc:
            failures.append((f"n={n}", str(exc)))
            bound_ok = False
            continue
        report.wall_times[f"run_n{n}"] = time.perf_counter() - t0
        rec_ref = refs[d]
        log_cerr = stab[d].log_c_delta_r + (
            math.log(err0[n]) if err0[n] > 0.0 else -math.inf
        )
        for i, t in enumerate(rec.times):
            xi = _current_at(rec, i)
            col1, _ = _expanded_upper(xi, _current_at(rec_ref, i), target.circulation)
            key = (d, i)
            if key not in col2_cache:
                col2_cache[key] = l2_distance(
                    deposit(_current_at(rec_ref, i)), grid_states[snap_steps[i]]
                )
            col2 = col2_cache[key]
            total = l2_distance(deposit(xi), grid_states[snap_steps[i]])
            log_col2 = math.log(col2) if col2 > 0.0 else -math.inf
            log_rhs = float(np.logaddexp(log_cerr, log_col2))
            ok = (math.log(total) <= log_rhs) if total > 0.0 else True
            bound_ok = bound_ok and ok
            tri_rows.append((n, t, col1, col2, total, log_rhs, int(ok)))

    report.tables["triangle"] = (
        ("n", "t", "coarse_vs_ref", "ref_vs_grid", "total", "log_bound", "ok"),
        tri_rows,
    )
    if failures:
        report.tables["failures"] = (("stage", "message"), failures)

    ns = sorted(delta_for)
    report.plots.append(
        SeriesPlot(
            name="initial_error_vs_n",
            x_label="ensemble size",
            y_label="initial sampling error",
            series=[("upper bound", list(map(float, cfg.n_list)), [err0[n] for n in cfg.n_list])],
            log_x=True,
            log_y=True,
        )
    )
    finals = {
        n: max(r[4] for r in tri_rows if r[0] == n) for n in ns if any(r[0] == n for r in tri_rows)
    }
    if finals:
        report.plots.append(
            SeriesPlot(
                name="total_error_vs_n",
                x_label="ensemble size",
                y_label="distance to spectral reference",
                series=[
                    ("max over snapshots", list(map(float, sorted(finals))), [finals[n] for n in sorted(finals)])
                ],
                log_x=True,
                log_y=True,
            )
        )
    report.summary.update(
        {
            "bound_ok_all": bool(bound_ok),
            "initial_errors": {str(n): err0[n] for n in cfg.n_list},
            "n_failed": len(failures),
        }
    )
    report.wall_times["total"] = time.perf_counter() - t_begin
    return report


# --------------------------------------------------------------------------
# emission

def emit_outputs(report):
    """Write a report's tables, artifacts, plots and manifest to disk.

    Returns the sorted list of written paths.  Everything except the
    manifest is byte-deterministic for a fixed config and seed; the
    manifest carries wall times and the environment's version string.  An
    empty report still writes a manifest.
    """
    out = Path(report.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    for name in sorted(report.tables):
        header, rows = report.tables[name]
        p = out / f"{name}.csv"
        snapshots.write_csv(p, header, rows)
        written.append(p)
    for name in sorted(report.records):
        p = out / f"{name}.csv"
        snapshots.write_trajectory_csv(p, report.records[name])
        written.append(p)
    for fname in sorted(report.currents):
        p = out / fname
        snapshots.write_filaments(p, report.currents[fname])
        written.append(p)
    for fname in sorted(report.fields):
        p = out / fname
        snapshots.write_field(p, report.fields[fname])
        written.append(p)
    for plot in report.plots:
        p = out / f"{plot.name}.svg"
        _write_svg(p, plot)
        written.append(p)

    manifest = {
        "scenario": report.scenario,
        "config_sha256": hashlib.sha256(report.config_text.encode()).hexdigest(),
        "seed": report.seed,
        "threads": report.threads,
        "version": _version_string(),
        "wall_times": _sanitize(report.wall_times),
        "summary": _sanitize(report.summary),
        "files": sorted(p.name for p in written),
    }
    mp = out / "manifest.json"
    mp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    written.append(mp)
    return sorted(written)


def _version_string():
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5.0,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from . import __version__

    return f"filamentlab-{__version__}"


def _sanitize(obj):
    if isinstance(obj, dict):
        return {str(k): _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    return obj


# --------------------------------------------------------------------------
# SVG plots

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
_W, _H = 480, 360
_X0, _X1 = 64.0, 464.0
_Y_TOP, _Y_BOT = 16.0, 312.0


def _axis(values, log_wanted):
    vals = [v for v in values if math.isfinite(v)]
    use_log = bool(log_wanted) and bool(vals) and all(v > 0.0 for v in vals)
    if use_log:
        vals = [math.log10(v) for v in vals]
    if not vals:
        vals = [0.0, 1.0]
    lo, hi = min(vals), max(vals)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.04 * (hi - lo)
    return lo - pad, hi + pad, use_log


def _write_svg(path, plot):
    """Deterministic standalone SVG: frame, labeled axes, series with dots.

    Log axes fall back to linear when any plotted value is nonpositive, so
    a diagnostic that happens to hit zero still renders instead of crashing
    the emission step.
    """
    xs_all = [x for _, xs, _ in plot.series for x in xs]
    ys_all = [y for _, _, ys in plot.series for y in ys]
    x_lo, x_hi, log_x = _axis(xs_all, plot.log_x)
    y_lo, y_hi, log_y = _axis(ys_all, plot.log_y)

    def px(v):
        u = math.log10(v) if log_x else v
        return _X0 + (u - x_lo) / (x_hi - x_lo) * (_X1 - _X0)

    def py(v):
        u = math.log10(v) if log_y else v
        return _Y_BOT - (u - y_lo) / (y_hi - y_lo) * (_Y_BOT - _Y_TOP)

    def usable(x, y):
        if not (math.isfinite(x) and math.isfinite(y)):
            return False
        if log_x and x <= 0.0:
            return False
        if log_y and y <= 0.0:
            return False
        return True

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect class="frame" x="{_X0:.3f}" y="{_Y_TOP:.3f}" '
        f'width="{_X1 - _X0:.3f}" height="{_Y_BOT - _Y_TOP:.3f}" '
        'fill="none" stroke="#000000"/>',
        f'<text x="{0.5 * (_X0 + _X1):.3f}" y="348.000" text-anchor="middle" '
        f'font-size="12">{escape(plot.x_label)}{" (log)" if log_x else ""}</text>',
        f'<text x="16.000" y="{0.5 * (_Y_TOP + _Y_BOT):.3f}" text-anchor="middle" '
        f'font-size="12" transform="rotate(-90 16.000 {0.5 * (_Y_TOP + _Y_BOT):.3f})">'
        f'{escape(plot.y_label)}{" (log)" if log_y else ""}</text>',
    ]
    for i, (label, xs, ys) in enumerate(plot.series):
        color = _PALETTE[i % len(_PALETTE)]
        pts = [(px(x), py(y)) for x, y in zip(xs, ys) if usable(x, y)]
        if len(pts) >= 2:
            joined = " ".join(f"{cx:.3f},{cy:.3f}" for cx, cy in pts)
            lines.append(
                f'<polyline fill="none" stroke="{color}" points="{joined}"/>'
            )
        for cx, cy in pts:
            lines.append(
                f'<circle class="pt" cx="{cx:.3f}" cy="{cy:.3f}" r="3.000" '
                f'fill="{color}"/>'
            )
        lines.append(
            f'<text x="{_X0 + 8:.3f}" y="{_Y_TOP + 16 + 16 * i:.3f}" font-size="11" '
            f'fill="{color}">{escape(str(label))}</text>'
        )
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n")
