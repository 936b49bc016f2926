"""Closed vortex filaments and their mollified interaction dynamics.

A filament is a closed curve sampled at M uniformly spaced parameter
values; an ensemble couples N weighted filaments through the mollified
kernel: every node moves with the velocity

    v(x) = sum_j alpha_j * oint K_delta(x - gamma_j(sigma)) dgamma_j(sigma)

discretized with the trapezoidal rule in sigma and centered periodic
differences for the tangent -- both spectrally accurate on smooth closed
curves.  The same field transports passive tracer clouds, whose
finite-difference Jacobians feed the flow-bound diagnostics.

Sampling of initial ensembles from an axisymmetric ring vorticity works
in flux coordinates: the Gaussian cross-section is partitioned into N
patches of exactly equal flux by recursive bisection, each patch becomes
one circular filament through its flux-weighted centroid, and refining
every patch two more levels yields a nested reference ensemble against
which the initial discretization error is measured.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import ndtri

from ._pairwise import velocity_eval
from .errors import (
    InvalidParameterError,
    NonFiniteVelocityError,
    RemeshError,
    SimulationAborted,
    StepRejectedError,
    TracerDivergedError,
    UnsupportedTargetError,
)
from .kernel import FOUR_PI, MollifiedKernel

__all__ = [
    "Filament",
    "FilamentEnsemble",
    "TracerCloud",
    "TracerHistory",
    "TrajectoryRecord",
    "Observer",
    "RingVorticity",
    "make_ring",
    "node_velocity",
    "ensemble_rhs",
    "step_rk4",
    "simulate",
    "remesh",
    "evolve_tracers",
    "sample_initial_filaments",
]

_MIN_NODES = 8
_SPACING_RATIO = 4.0
_CFL_FRACTION = 0.2
_QUADRATURE_TAG = "trapezoid-centered"


@dataclass(frozen=True)
class Filament:
    """One closed curve with a signed weight.

    `nodes` holds the M distinct points gamma(m / M); closure is implicit
    (node M-1 connects back to node 0).
    """

    id: int
    alpha: float
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.ascontiguousarray(np.asarray(self.nodes, dtype=float))
        if nodes.ndim != 2 or nodes.shape[1] != 3:
            raise InvalidParameterError(f"nodes must be (M, 3), got {nodes.shape}")
        if nodes.shape[0] < _MIN_NODES:
            raise InvalidParameterError(
                f"filament needs at least {_MIN_NODES} nodes, got {nodes.shape[0]}"
            )
        if not np.all(np.isfinite(nodes)):
            raise InvalidParameterError("filament nodes contain non-finite coordinates")
        if not math.isfinite(self.alpha):
            raise InvalidParameterError(f"alpha must be finite, got {self.alpha!r}")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "alpha", float(self.alpha))

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    def segment_lengths(self):
        """Chord lengths of the M closing segments."""
        return np.linalg.norm(np.roll(self.nodes, -1, axis=0) - self.nodes, axis=1)

    def length(self):
        return float(self.segment_lengths().sum())

    def spacing_ok(self):
        """True while max spacing <= 4 x mean spacing (the remesh trigger)."""
        seg = self.segment_lengths()
        return bool(seg.max() <= _SPACING_RATIO * seg.mean())

    def tangent_weights(self):
        """alpha * (gamma_{m+1} - gamma_{m-1}) / 2: the per-node line element.

        Centered periodic difference of the tangent times the trapezoid
        weight 1/M; the 1/M cancels against the parameter derivative.
        """
        return 0.5 * self.alpha * (np.roll(self.nodes, -1, axis=0) - np.roll(self.nodes, 1, axis=0))


def make_ring(radius, n_nodes, *, center=(0.0, 0.0, 0.0), alpha=1.0, fid=0, phase=0.0):
    """Planar circular filament of given radius around the z axis."""
    if radius <= 0.0:
        raise InvalidParameterError(f"ring radius must be positive, got {radius!r}")
    theta = 2.0 * math.pi * np.arange(int(n_nodes)) / int(n_nodes) + phase
    nodes = np.stack(
        [radius * np.cos(theta), radius * np.sin(theta), np.zeros_like(theta)], axis=1
    )
    return Filament(id=fid, alpha=alpha, nodes=nodes + np.asarray(center, dtype=float))


@dataclass
class FilamentEnsemble:
    """N weighted closed filaments interacting through one mollified kernel.

    Treated as an immutable value between time steps; stepping returns a
    new ensemble.  The flat packed views used by the compiled loops are
    built lazily and cached.
    """

    filaments: tuple
    kernel: MollifiedKernel
    time: float = 0.0
    quadrature: str = _QUADRATURE_TAG
    _layout: tuple = field(default=None, repr=False)

    def __post_init__(self):
        self.filaments = tuple(self.filaments)
        if len(self.filaments) < 1:
            raise InvalidParameterError("ensemble needs at least one filament")
        if self.quadrature != _QUADRATURE_TAG:
            raise InvalidParameterError(
                f"unsupported quadrature rule {self.quadrature!r}; only {_QUADRATURE_TAG!r}"
            )
        total = math.fsum(abs(f.alpha) for f in self.filaments)
        if not math.isfinite(total):
            raise InvalidParameterError("ensemble weights do not sum to a finite mass")

    @property
    def n_filaments(self):
        return len(self.filaments)

    def node_counts(self):
        return [f.n_nodes for f in self.filaments]

    def mass_upper(self):
        """sum |alpha_j| * length_j: the mass bound of the induced current."""
        return math.fsum(abs(f.alpha) * f.length() for f in self.filaments)

    # -- packed layout for the compiled loops ---------------------------
    def layout(self):
        """(starts, alphas_per_node, ids) describing the flat node packing."""
        if self._layout is None:
            counts = self.node_counts()
            starts = np.concatenate([[0], np.cumsum(counts)])
            alphas = np.repeat([f.alpha for f in self.filaments], counts)
            ids = [f.id for f in self.filaments]
            self._layout = (starts, alphas, ids)
        return self._layout

    def packed_nodes(self):
        return np.ascontiguousarray(np.concatenate([f.nodes for f in self.filaments], axis=0))

    def locate(self, flat_index):
        """Map a flat node index back to (filament id, node index)."""
        starts, _, ids = self.layout()
        j = int(np.searchsorted(starts, flat_index, side="right") - 1)
        return ids[j], int(flat_index - starts[j])

    def with_nodes(self, flat_nodes, time=None):
        """Clone the ensemble with repositioned nodes from a flat array."""
        starts, _, _ = self.layout()
        fils = tuple(
            Filament(id=f.id, alpha=f.alpha, nodes=flat_nodes[starts[j] : starts[j + 1]])
            for j, f in enumerate(self.filaments)
        )
        return FilamentEnsemble(
            filaments=fils,
            kernel=self.kernel,
            time=self.time if time is None else time,
            quadrature=self.quadrature,
        )


def _packed_sources(ens, flat_nodes):
    """Source positions and weighted line elements at given node positions."""
    starts, alphas, _ = ens.layout()
    vec = np.empty_like(flat_nodes)
    for j in range(len(starts) - 1):
        a, b = starts[j], starts[j + 1]
        seg = flat_nodes[a:b]
        vec[a:b] = np.roll(seg, -1, axis=0) - np.roll(seg, 1, axis=0)
    vec *= 0.5 * alphas[:, None]
    return np.ascontiguousarray(flat_nodes), np.ascontiguousarray(vec)


def _field_at(ens, src_pos, src_vec, targets):
    """Induced velocity at arbitrary targets for fixed packed sources."""
    kern = ens.kernel
    inv_du, coeffs, n_int, rmax, r_series, g_series = kern.fast_tables()
    coef = kern.params.gamma / FOUR_PI
    return velocity_eval(
        np.ascontiguousarray(np.atleast_2d(targets)),
        src_pos,
        src_vec,
        coef,
        inv_du,
        coeffs,
        n_int,
        rmax,
        r_series,
        g_series,
    )


def node_velocity(ens, x):
    """Velocity induced by the whole ensemble at one point (or many).

    This is the discretized sum of line integrals; a point lying exactly
    on a node picks up zero from that node (the mollified kernel vanishes
    at the origin), so the evaluation is total.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    src_pos, src_vec = _packed_sources(ens, ens.packed_nodes())
    out = _field_at(ens, src_pos, src_vec, x)
    return out[0] if single else out


def _checked_rhs(ens, flat_nodes, extra_targets=None):
    """Stage velocities at the ensemble's own nodes (+ optional passives).

    Raises NonFiniteVelocityError naming the first offending node.
    """
    src_pos, src_vec = _packed_sources(ens, flat_nodes)
    if extra_targets is None:
        targets = flat_nodes
    else:
        targets = np.concatenate([flat_nodes, extra_targets], axis=0)
    vel = _field_at(ens, src_pos, src_vec, targets)
    if not np.all(np.isfinite(vel)):
        bad = int(np.flatnonzero(~np.isfinite(vel).all(axis=1))[0])
        if bad < flat_nodes.shape[0]:
            fid, node = ens.locate(bad)
            raise NonFiniteVelocityError(
                f"non-finite velocity at filament {fid}, node {node}",
                filament_id=fid,
                node_index=node,
            )
        raise NonFiniteVelocityError(
            f"non-finite velocity at passive point {bad - flat_nodes.shape[0]}"
        )
    n = flat_nodes.shape[0]
    return vel[:n], (None if extra_targets is None else vel[n:])


def ensemble_rhs(ens):
    """Velocity at every node of every filament, in packed node order.

    Summation order is fixed (targets outer, sources in filament-major
    node order), so repeated evaluation is bitwise reproducible.
    """
    vel, _ = _checked_rhs(ens, ens.packed_nodes())
    return vel


def step_rk4(ens, dt, *, passive=None, remesh_check=True):
    """One classical Runge-Kutta step of the full ensemble.

    The velocity field is re-evaluated from the displaced curves at every
    stage.  Passive points, if given, ride the same stage fields without
    influencing them; returns (ensemble, passive) in that case.

    Raises StepRejectedError if dt times the current peak node speed
    exceeds 0.2 delta (the field varies on scale delta), carrying the
    admissible dt.
    """
    if dt <= 0.0 or not math.isfinite(dt):
        raise InvalidParameterError(f"dt must be positive and finite, got {dt!r}")
    x0 = ens.packed_nodes()
    p0 = None if passive is None else np.ascontiguousarray(np.atleast_2d(passive))

    k1, q1 = _checked_rhs(ens, x0, p0)
    vmax = float(np.sqrt((k1 * k1).sum(axis=1).max()))
    limit = _CFL_FRACTION * ens.kernel.delta
    if dt * vmax > limit:
        raise StepRejectedError(
            f"dt * peak speed = {dt * vmax:.3g} exceeds {_CFL_FRACTION} delta",
            admissible_dt=limit / vmax if vmax > 0 else math.inf,
        )

    half = 0.5 * dt
    k2, q2 = _checked_rhs(ens, x0 + half * k1, None if p0 is None else p0 + half * q1)
    k3, q3 = _checked_rhs(ens, x0 + half * k2, None if p0 is None else p0 + half * q2)
    k4, q4 = _checked_rhs(ens, x0 + dt * k3, None if p0 is None else p0 + dt * q3)

    new_nodes = x0 + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    out = ens.with_nodes(new_nodes, time=ens.time + dt)
    if remesh_check:
        fixed = [f if f.spacing_ok() else remesh(f) for f in out.filaments]
        if any(g is not f for g, f in zip(fixed, out.filaments)):
            out = FilamentEnsemble(
                filaments=tuple(fixed), kernel=out.kernel, time=out.time, quadrature=out.quadrature
            )
    if p0 is None:
        return out
    new_passive = p0 + (dt / 6.0) * (q1 + 2.0 * q2 + 2.0 * q3 + q4)
    return out, new_passive


@dataclass
class Observer:
    """Named diagnostic sampled every `every` accepted steps."""

    name: str
    fn: object  # callable: ensemble -> value
    every: int = 1


@dataclass
class TrajectoryRecord:
    """Recorded states of a simulation run.

    `states[i]` is the list of per-filament node arrays at `times[i]`;
    index 0 is the initial condition.  `observations` maps observer name
    to a list of (time, value) pairs.  `completed` is False when the run
    aborted; the partial record is what the aborting exception carries.
    """

    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    alphas: list = field(default_factory=list)
    filament_ids: list = field(default_factory=list)
    passive: list = field(default_factory=list)
    observations: dict = field(default_factory=dict)
    completed: bool = False

    def record(self, ens, tracers=None):
        if not self.alphas:
            self.alphas = [f.alpha for f in ens.filaments]
            self.filament_ids = [f.id for f in ens.filaments]
        self.times.append(ens.time)
        self.states.append([f.nodes.copy() for f in ens.filaments])
        if tracers is not None:
            self.passive.append(tracers.copy())

    def final_state(self):
        return self.times[-1], self.states[-1]


def simulate(ens, horizon, dt, observers=(), *, snapshot_every=1, passive=None,
             remesh_check=True, domain_guard=None):
    """Advance the ensemble to time `horizon`, recording as it goes.

    `horizon` must be an integer number of dt steps (no silent step-size
    adjustment).  Snapshots of all node positions (and passive points)
    are stored every `snapshot_every` accepted steps, plus the initial
    state.  Observers run on the stepping thread at their own cadence.

    Raises SimulationAborted -- with the partial trajectory attached --
    if a step is rejected or a velocity turns non-finite.
    """
    if horizon <= 0.0:
        raise InvalidParameterError(f"horizon must be positive, got {horizon!r}")
    n_steps = int(round(horizon / dt))
    if n_steps < 1 or abs(n_steps * dt - horizon) > 1e-9 * max(1.0, abs(horizon)):
        raise InvalidParameterError(
            f"horizon {horizon!r} is not an integer multiple of dt {dt!r}"
        )
    obs = [o if isinstance(o, Observer) else Observer(o.__name__, o) for o in observers]

    rec = TrajectoryRecord(alphas=[f.alpha for f in ens.filaments],
                           filament_ids=[f.id for f in ens.filaments])
    tracers = None if passive is None else np.ascontiguousarray(np.atleast_2d(passive))
    rec.record(ens, tracers)
    for o in obs:
        rec.observations.setdefault(o.name, []).append((ens.time, o.fn(ens)))

    for step in range(1, n_steps + 1):
        try:
            if tracers is None:
                ens = step_rk4(ens, dt, remesh_check=remesh_check)
            else:
                ens, tracers = step_rk4(ens, dt, passive=tracers, remesh_check=remesh_check)
                if domain_guard is not None and np.abs(tracers).max() > domain_guard:
                    raise TracerDivergedError(
                        f"tracer left the domain guard |x| <= {domain_guard:g}"
                    )
        except (StepRejectedError, NonFiniteVelocityError, RemeshError, TracerDivergedError) as err:
            raise SimulationAborted(
                f"run aborted at t = {ens.time:.6g} (step {step}/{n_steps}): {err}",
                trajectory=rec,
                cause=err,
            ) from err
        if step % snapshot_every == 0 or step == n_steps:
            rec.record(ens, tracers)
        for o in obs:
            if step % o.every == 0 or step == n_steps:
                rec.observations[o.name].append((ens.time, o.fn(ens)))
    rec.completed = True
    return rec


def remesh(f, n_nodes=None):
    """Resample a closed filament at uniform arclength.

    Periodic cubic interpolation through the current nodes; the weight
    alpha is parametrization-independent and carried over unchanged.  The
    curve itself (measured by fine quadrature on the interpolant) keeps
    its length to 1e-6 relative, else the resampling is rejected.
    """
    m_out = f.n_nodes if n_nodes is None else int(n_nodes)
    if m_out < _MIN_NODES:
        raise InvalidParameterError(f"remesh target must keep at least {_MIN_NODES} nodes")
    closed = np.vstack([f.nodes, f.nodes[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    if np.any(seg == 0.0):
        raise RemeshError(f"filament {f.id} has coincident consecutive nodes")
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    try:
        curve = CubicSpline(s, closed, bc_type="periodic", axis=0)
    except ValueError as err:
        raise RemeshError(f"filament {f.id}: periodic interpolation failed: {err}") from err

    s_new = total * np.arange(m_out) / m_out
    nodes = curve(s_new)
    if not np.all(np.isfinite(nodes)):
        raise RemeshError(f"filament {f.id}: interpolant produced non-finite nodes")

    # length audit on the interpolants themselves (chord-length sums would
    # confuse resampling with discretization error)
    dense = np.linspace(0.0, total, 32 * m_out + 1)
    len_old = np.linalg.norm(curve(dense, 1), axis=1)
    len_old = np.trapezoid(len_old, dense)
    closed_new = np.vstack([nodes, nodes[:1]])
    seg_new = np.linalg.norm(np.diff(closed_new, axis=0), axis=1)
    s2 = np.concatenate([[0.0], np.cumsum(seg_new)])
    try:
        curve_new = CubicSpline(s2, closed_new, bc_type="periodic", axis=0)
    except ValueError as err:
        raise RemeshError(f"filament {f.id}: resampled curve degenerate: {err}") from err
    dense2 = np.linspace(0.0, s2[-1], 32 * m_out + 1)
    len_new = np.trapezoid(np.linalg.norm(curve_new(dense2, 1), axis=1), dense2)
    if abs(len_new - len_old) > 1e-6 * len_old:
        raise RemeshError(
            f"filament {f.id}: remesh changed curve length by "
            f"{abs(len_new - len_old) / len_old:.2e} (> 1e-6 relative)"
        )
    return Filament(id=f.id, alpha=f.alpha, nodes=nodes)


# ---------------------------------------------------------------------------
# passive tracers and flow Jacobians
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TracerCloud:
    """A base point with six axis-aligned offset points for FD Jacobians."""

    base_point: np.ndarray
    epsilon: float

    def __post_init__(self):
        bp = np.asarray(self.base_point, dtype=float).reshape(3)
        if not np.all(np.isfinite(bp)):
            raise InvalidParameterError("tracer base point must be finite")
        if not (self.epsilon > 0.0 and math.isfinite(self.epsilon)):
            raise InvalidParameterError(f"epsilon must be positive, got {self.epsilon!r}")
        object.__setattr__(self, "base_point", bp)
        object.__setattr__(self, "epsilon", float(self.epsilon))

    def points(self):
        """The 7 tracked points: base, then +/- epsilon along each axis."""
        out = np.tile(self.base_point, (7, 1))
        for k in range(3):
            out[1 + 2 * k, k] += self.epsilon
            out[2 + 2 * k, k] -= self.epsilon
        return out


@dataclass
class TracerHistory:
    """Flow-map Jacobian estimates along a trajectory.

    jacobians[i] has shape (n_clouds, 3, 3) at times[i]; op_norms[i] the
    matching spectral norms.
    """

    times: list
    jacobians: list
    op_norms: np.ndarray
    final_points: np.ndarray


def _cloud_jacobians(flat_points, n_clouds, epsilon):
    pts = flat_points.reshape(n_clouds, 7, 3)
    jac = np.empty((n_clouds, 3, 3))
    for k in range(3):
        jac[:, :, k] = (pts[:, 1 + 2 * k, :] - pts[:, 2 + 2 * k, :]) / (2.0 * epsilon)
    return jac


def evolve_tracers(ens, clouds, horizon, dt, *, record_every=1, domain_guard=None,
                   remesh_check=True):
    """Advect tracer clouds through the ensemble's evolving field.

    The clouds ride the exact same RK4 stages as the filaments.  Requires
    epsilon <= delta / 100 so the finite differences probe the field well
    below its variation scale.  Returns a TracerHistory with the Jacobian
    and its operator norm at every recorded time (index 0 is t = 0, where
    the Jacobian is the identity by construction).
    """
    clouds = [clouds] if isinstance(clouds, TracerCloud) else list(clouds)
    if not clouds:
        raise InvalidParameterError("need at least one tracer cloud")
    eps = {c.epsilon for c in clouds}
    if len(eps) != 1:
        raise InvalidParameterError("all tracer clouds must share one epsilon")
    epsilon = eps.pop()
    if epsilon > ens.kernel.delta / 100.0:
        raise InvalidParameterError(
            f"epsilon = {epsilon:g} must be <= delta/100 = {ens.kernel.delta / 100.0:g}"
        )
    pts = np.concatenate([c.points() for c in clouds], axis=0)
    rec = simulate(
        ens, horizon, dt,
        snapshot_every=record_every,
        passive=pts,
        remesh_check=remesh_check,
        domain_guard=domain_guard,
    )
    n_clouds = len(clouds)
    jacobians = [_cloud_jacobians(p, n_clouds, epsilon) for p in rec.passive]
    norms = np.array([[np.linalg.norm(j, 2) for j in jac] for jac in jacobians])
    return TracerHistory(
        times=list(rec.times),
        jacobians=jacobians,
        op_norms=norms,
        final_points=rec.passive[-1],
    )


# ---------------------------------------------------------------------------
# initial-data sampling from an axisymmetric ring vorticity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RingVorticity:
    """Axisymmetric vortex ring target with a Gaussian cross-section.

    The vorticity points in the azimuthal direction with profile
    circulation / (2 pi core_width^2) * exp(-((s-R)^2 + z^2) / (2 a^2))
    over the (radial, axial) half-plane; its integral curves are the
    circles s = const, z = const, which is what makes filament sampling
    exact.  Flux accounting uses the untruncated planar Gaussian; with
    core_width <= ring_radius / 4 the mass at s < 0 is negligible
    (< 3e-5) and every sampled circle has positive radius.
    """

    circulation: float
    ring_radius: float
    core_width: float
    center: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not (math.isfinite(self.circulation) and self.circulation != 0.0):
            raise InvalidParameterError("circulation must be finite and nonzero")
        if not (self.ring_radius > 0.0 and math.isfinite(self.ring_radius)):
            raise InvalidParameterError("ring_radius must be positive")
        if not (0.0 < self.core_width <= self.ring_radius / 4.0):
            raise InvalidParameterError(
                "core_width must lie in (0, ring_radius / 4] for a valid ring target"
            )

    def profile(self, s, z):
        """Azimuthal vorticity at radial distance s and height z."""
        a2 = self.core_width**2
        return (
            self.circulation
            / (2.0 * math.pi * a2)
            * np.exp(-(((np.asarray(s) - self.ring_radius) ** 2 + np.asarray(z) ** 2) / (2.0 * a2)))
        )


def _bisect_counts(count, depth, box, leaves):
    """Depth-first unequal bisection of a flux rectangle, alternating axes.

    box = (f1, f2, b1, b2) in cumulative-flux coordinates; each leaf ends
    up with exactly count 1, i.e. flux fraction 1/N.  For power-of-two N
    every split is an exact halving, so trees for N and N * 4^L nest.
    """
    if count == 1:
        leaves.append(box)
        return
    k1 = (count + 1) // 2
    f1, f2, b1, b2 = box
    if depth % 2 == 0:
        cut = f1 + (f2 - f1) * (k1 / count)
        _bisect_counts(k1, depth + 1, (f1, cut, b1, b2), leaves)
        _bisect_counts(count - k1, depth + 1, (cut, f2, b1, b2), leaves)
    else:
        cut = b1 + (b2 - b1) * (k1 / count)
        _bisect_counts(k1, depth + 1, (f1, f2, b1, cut), leaves)
        _bisect_counts(count - k1, depth + 1, (f1, f2, cut, b2), leaves)


def _refine_leaves(leaves, depth0, levels):
    """Split every leaf `levels` more alternating-axis halvings (4 children
    per level pair); continues the parent tree's axis alternation, so for
    power-of-two leaf counts the result is the leaf set of the deeper tree."""
    out = list(leaves)
    d = depth0
    for _ in range(levels):
        nxt = []
        for f1, f2, b1, b2 in out:
            if d % 2 == 0:
                cut = 0.5 * (f1 + f2)
                nxt.append((f1, cut, b1, b2))
                nxt.append((cut, f2, b1, b2))
            else:
                cut = 0.5 * (b1 + b2)
                nxt.append((f1, f2, b1, cut))
                nxt.append((f1, f2, cut, b2))
        out = nxt
        d += 1
    return out


def _truncated_gaussian_mean(mu, sigma, p1, p2):
    """Mean of N(mu, sigma^2) conditioned on the quantile band [p1, p2]."""
    if p1 <= 0.0 and p2 >= 1.0:
        return mu
    z1 = -math.inf if p1 <= 0.0 else ndtri(p1)
    z2 = math.inf if p2 >= 1.0 else ndtri(p2)
    pdf1 = 0.0 if math.isinf(z1) else math.exp(-0.5 * z1 * z1) / math.sqrt(2.0 * math.pi)
    pdf2 = 0.0 if math.isinf(z2) else math.exp(-0.5 * z2 * z2) / math.sqrt(2.0 * math.pi)
    return mu + sigma * (pdf1 - pdf2) / (p2 - p1)


def _leaves_to_filaments(target, leaves, weights, n_nodes, phase, id_base=0):
    fils = []
    for j, ((f1, f2, b1, b2), alpha) in enumerate(zip(leaves, weights)):
        s_bar = _truncated_gaussian_mean(target.ring_radius, target.core_width, f1, f2)
        z_bar = _truncated_gaussian_mean(0.0, target.core_width, b1, b2)
        if s_bar <= 0.0:
            raise InvalidParameterError(
                "flux partition produced a non-positive circle radius; "
                "reduce the filament count or the core width"
            )
        center = (target.center[0], target.center[1], target.center[2] + z_bar)
        fils.append(
            make_ring(s_bar, n_nodes, center=center, alpha=alpha, fid=id_base + j, phase=phase)
        )
    return fils


def _telescoped_weights(total, n):
    """n weights of total/n each whose exact real sum telescopes to total."""
    ks = np.arange(n + 1, dtype=float)
    cuts = total * (ks / n)
    return np.diff(cuts)


def sample_initial_filaments(target, n_filaments, n_nodes, seed, kernel, *,
                             reference_levels=2, with_error=True):
    """Draw N equal-flux filaments from a ring vorticity target.

    The Gaussian cross-section is mapped to the unit square by its two
    marginal CDFs, partitioned into N rectangles of exactly equal area by
    recursive bisection, and each rectangle becomes one circular filament
    through the flux-weighted centroid of its patch.  Weights telescope
    so their sum equals the total circulation exactly, independent of N.

    Returns (ensemble, initial_error): the error is a certified upper
    bound of the metric distance to a nested reference ensemble refined
    `reference_levels` further levels (4^levels more filaments), computed
    by the matched-loop estimator; None when with_error is False.
    """
    if not isinstance(target, RingVorticity):
        raise UnsupportedTargetError(
            f"only axisymmetric ring targets are supported, got {type(target).__name__}"
        )
    n = int(n_filaments)
    if n < 1:
        raise InvalidParameterError(f"n_filaments must be >= 1, got {n_filaments!r}")
    rng = np.random.default_rng(seed)
    phase = float(rng.uniform(0.0, 2.0 * math.pi))

    leaves = []
    _bisect_counts(n, 0, (0.0, 1.0, 0.0, 1.0), leaves)
    weights = _telescoped_weights(target.circulation, n)
    fils = _leaves_to_filaments(target, leaves, weights, n_nodes, phase)
    ens = FilamentEnsemble(filaments=tuple(fils), kernel=kernel)
    if not with_error:
        return ens, None

    # nested reference: every leaf split `reference_levels` more times,
    # with the weight of each child slice telescoped on the finer grid so
    # the children of leaf j sum exactly to alpha_j
    depth0 = max(1, math.ceil(math.log2(n))) if n > 1 else 0
    splits = 2 * reference_levels
    n_ref = n * (1 << splits)
    fine_leaves = _refine_leaves(leaves, depth0, splits)
    fine_weights = _telescoped_weights(target.circulation, n_ref)
    fine_fils = _leaves_to_filaments(target, fine_leaves, fine_weights, n_nodes, phase)
    fine_ens = FilamentEnsemble(filaments=tuple(fine_fils), kernel=kernel)

    # the coarse current, re-expressed as n_ref coincident copies so the
    # two ensembles are in matched one-to-one correspondence
    copies = []
    per = 1 << splits
    for j, f in enumerate(fils):
        for i in range(per):
            w = fine_weights[j * per + i]
            copies.append(Filament(id=j * per + i, alpha=w, nodes=f.nodes))
    copied_ens = FilamentEnsemble(filaments=tuple(copies), kernel=kernel)

    from .currents import bl_metric_upper, empirical_current

    err, _tag = bl_metric_upper(empirical_current(copied_ens), empirical_current(fine_ens))
    return ens, float(err)
