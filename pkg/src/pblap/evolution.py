"""Parabolic gradient flow of the discrete energy and its diagnostics.

The default scheme is fully implicit backward Euler. Each step is computed as
a proximal minimization of E(v) + vol |v - w|^2 / (2 dt), whose stationarity
condition is exactly (v - w)/dt + residual(v) = 0; solving the step as a
minimization keeps every accepted step energy-decreasing and makes the damped
Newton globalization inherit the robustness of the stationary solvers. A
semi-implicit variant freezes the gradient-dependent diffusion coefficient
and lags the reaction term, costing one linear solve per step.

The comparison harness evolves ordered initial pairs in lockstep and reports
the worst positive part of (low - high); the reaction term is pluggable so
general Lipschitz zero-order terms can be exercised, not only the energy's
own phase force.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .grid import Field, smooth_random_field
from .model import (
    ProblemSpec,
    energy_gradient,
    energy_of_values,
    hessian_matrix,
    residual_values,
)
from .stationary import SolveReport, _descend, _spsolve_quiet

__all__ = [
    "FlowParams",
    "EvolutionTrace",
    "FlowStepError",
    "AmbiguousLimitError",
    "flow_step",
    "evolve",
    "dissipation_report",
    "comparison_check",
    "ComparisonReport",
    "classify_limit",
    "destabilize_saddle",
]


class FlowStepError(RuntimeError):
    """An inner step solve failed; carries the partial trace when raised from
    :func:`evolve`. Reducing dt is the standard remedy."""

    def __init__(self, message: str, trace: "EvolutionTrace | None" = None):
        super().__init__(message)
        self.trace = trace


class AmbiguousLimitError(RuntimeError):
    """More than one candidate matches the terminal state (tolerance too loose)."""


@dataclass(frozen=True)
class FlowParams:
    """Time-stepping controls for one evolution run."""

    dt: float
    horizon: float
    scheme: str = "implicit"  # implicit | semi-implicit
    newton_tol: float = 1e-11
    state_tol: float = 1e-6
    residual_tol: float = 1e-6
    snapshot_stride: int = 10
    detection_window: int = 3  # consecutive strides required for a verdict
    max_newton: int = 200

    def __post_init__(self):
        if self.dt <= 0.0 or self.horizon <= 0.0:
            raise ValueError("dt and horizon must be positive")
        if min(self.newton_tol, self.state_tol, self.residual_tol) <= 0.0:
            raise ValueError("tolerances must be positive")
        if self.scheme not in ("implicit", "semi-implicit"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.snapshot_stride < 1:
            raise ValueError("snapshot_stride must be >= 1")

    @property
    def comparison_tol(self) -> float:
        return 10.0 * self.state_tol


@dataclass
class EvolutionTrace:
    """Time series of one flow run.

    ``energies`` holds the regularized energy after every step (index 0 is the
    initial state); ``dissipation`` holds the per-step increments
    vol * sum((w+ - w)/dt)^2 * dt. Snapshots are taken every
    ``snapshot_stride`` steps plus the final state.
    """

    dt: float
    times: np.ndarray
    snapshots: list
    snapshot_steps: np.ndarray
    energies: np.ndarray
    dissipation: np.ndarray
    newton_iterations: np.ndarray
    verdict: str
    boundary_adjusted: bool
    converged_time: float | None = None

    @property
    def final(self) -> Field:
        return self.snapshots[-1]


def _implicit_step(w: np.ndarray, spec: ProblemSpec, params: FlowParams):
    vol = spec.grid.node_volume
    u, its, rn, ok, msg, _ = _descend(
        w,
        spec,
        spec.grid.interior_mask,
        tol=params.newton_tol,
        max_iter=params.max_newton,
        include_phase=True,
        extra_quadratic=(w, vol / params.dt),
    )
    return u, its, ok, msg


def _semi_implicit_step(w: np.ndarray, spec: ProblemSpec, params: FlowParams):
    """Freeze the diffusion coefficient at w, lag the reaction term, solve the
    resulting linear system with boundary rows pinned."""
    g = spec.grid
    vol = g.node_volume
    free = g.interior_indices
    A = hessian_matrix(w, spec, include_phase=False, picard=True)
    phase = energy_gradient(w, spec) - energy_gradient(w, spec, include_phase=False)
    wflat = w.ravel()
    rhs = (vol / params.dt) * wflat[free] - phase.ravel()[free]
    bidx = g.boundary_indices
    rhs = rhs - np.asarray(A[free][:, bidx] @ wflat[bidx]).ravel()
    M = A[free][:, free] + (vol / params.dt) * sp.identity(free.size, format="csr")
    x = _spsolve_quiet(M, rhs)
    if x is None:
        return w, 0, False, "semi-implicit linear solve failed"
    out = wflat.copy()
    out[free] = x
    return out.reshape(g.shape), 1, True, ""


def flow_step(w: Field, spec: ProblemSpec, params: FlowParams) -> Field:
    """Advance one time step; boundary rows stay pinned to sigma.

    Raises :class:`FlowStepError` (suggesting a smaller dt) if the inner
    solve fails.
    """
    vals = spec.apply_boundary(w.values)
    if params.scheme == "implicit":
        out, _, ok, msg = _implicit_step(vals, spec, params)
    else:
        out, _, ok, msg = _semi_implicit_step(vals, spec, params)
    if not ok:
        raise FlowStepError(f"flow step failed ({msg}); reduce dt")
    return Field(spec.grid, spec.apply_boundary(out))


def evolve(
    v0: Field,
    spec: ProblemSpec,
    params: FlowParams,
    candidates: list | None = None,
    classify_tol: float = 1e-2,
) -> EvolutionTrace:
    """Run the flow from ``v0`` to the horizon or until converged.

    Convergence requires sup |w+ - w| / dt <= state_tol and residual sup-norm
    <= residual_tol over ``detection_window`` consecutive snapshot strides.
    Initial data whose boundary values disagree with sigma are overwritten at
    the first step and the adjustment is recorded on the trace.
    """
    g = spec.grid
    adjusted = not spec.boundary_matches(v0.values, tol=0.0)
    w = spec.apply_boundary(v0.values)
    vol = g.node_volume
    n_steps = max(1, int(round(params.horizon / params.dt)))
    stepper = _implicit_step if params.scheme == "implicit" else _semi_implicit_step

    energies = [energy_of_values(w, spec).regularized_total]
    diss = []
    newtons = []
    snapshots = [Field(g, w)]
    snapshot_steps = [0]
    window_hits = 0
    converged_time = None
    verdict = "not-converged"

    def make_trace(v):
        return EvolutionTrace(
            dt=params.dt,
            times=np.array(snapshot_steps, dtype=float) * params.dt,
            snapshots=snapshots,
            snapshot_steps=np.array(snapshot_steps),
            energies=np.array(energies),
            dissipation=np.array(diss),
            newton_iterations=np.array(newtons),
            verdict=v,
            boundary_adjusted=adjusted,
            converged_time=converged_time,
        )

    stride_ok = True
    for k in range(1, n_steps + 1):
        wp, its, ok, msg = stepper(w, spec, params)
        if not ok:
            raise FlowStepError(
                f"flow step {k} failed ({msg}); reduce dt", trace=make_trace("step-failure")
            )
        delta = float(np.max(np.abs(wp - w)))
        diss.append(vol * float(np.sum(((wp - w) / params.dt) ** 2)) * params.dt)
        w = wp
        energies.append(energy_of_values(w, spec).regularized_total)
        newtons.append(its)
        stride_ok = stride_ok and (delta / params.dt <= params.state_tol)
        if k % params.snapshot_stride == 0 or k == n_steps:
            snapshots.append(Field(g, w))
            snapshot_steps.append(k)
            res_ok = float(np.max(np.abs(residual_values(w, spec)))) <= params.residual_tol
            window_hits = window_hits + 1 if (stride_ok and res_ok) else 0
            stride_ok = True
            if window_hits >= params.detection_window:
                converged_time = k * params.dt
                verdict = "converged"
                break

    if verdict == "converged" and candidates:
        idx = classify_limit(make_trace(verdict), candidates, classify_tol)
        if idx is not None:
            verdict = f"converged-to:{candidates[idx].classification}"
    return make_trace(verdict)


def dissipation_report(trace: EvolutionTrace) -> np.ndarray:
    """Per-snapshot residual of the discrete energy identity: the accumulated
    dissipation plus the energy drop, |sum dt vol (w_t)^2 + J(t) - J(0)|."""
    if len(trace.snapshots) < 2:
        raise ValueError("need at least two snapshots")
    cum = np.concatenate([[0.0], np.cumsum(trace.dissipation)])
    out = []
    for s in trace.snapshot_steps[1:]:
        out.append(abs(cum[s] + trace.energies[s] - trace.energies[0]))
    return np.array(out)


# ---------------------------------------------------------------------------
# comparison harness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ComparisonReport:
    max_violation: float
    tolerance: float
    passed: bool
    steps: int
    lipschitz_bound: float
    custom_reaction: bool


def _reaction_lipschitz(spec: ProblemSpec) -> float:
    s = np.linspace(0.0, 1.0, 4001)
    return float(spec.q.max() * np.max(np.abs(spec.profile.beta_prime(s))) / spec.eps**2)


def _custom_reaction_step(w, spec, params, alpha, alpha_prime):
    """Implicit step with a general nodal reaction term alpha(x, w)."""
    g = spec.grid
    free = g.interior_indices
    vol = g.node_volume
    coords = g.coordinates()
    u = np.array(w, dtype=float)

    def F(v):
        r = energy_gradient(v, spec, include_phase=False).ravel()[free] / vol
        a = np.asarray(alpha(coords, v)).ravel()[free]
        return (v.ravel()[free] - w.ravel()[free]) / params.dt + r + a

    Fv = F(u)
    fn = float(np.linalg.norm(Fv))
    eye = sp.identity(free.size, format="csc")
    mu = 0.0
    for it in range(params.max_newton):
        if float(np.max(np.abs(Fv))) <= params.newton_tol:
            return u, it, True, ""
        H = hessian_matrix(u, spec, include_phase=False)[free][:, free] / vol
        if alpha_prime is not None:
            ap = np.asarray(alpha_prime(coords, u)).ravel()[free]
        else:
            h_fd = 1e-7
            ap = (
                np.asarray(alpha(coords, u + h_fd)).ravel()[free]
                - np.asarray(alpha(coords, u - h_fd)).ravel()[free]
            ) / (2.0 * h_fd)
        Jm = H + sp.diags(ap) + eye / params.dt
        accepted = False
        for _ in range(40):
            M = (Jm + mu * eye) if mu > 0.0 else Jm
            d = _spsolve_quiet(M.tocsc(), -Fv)
            if d is not None:
                lam = 1.0
                for _ in range(30):
                    un = u.copy()
                    un.ravel()[free] += lam * d
                    F2 = F(un)
                    fn2 = float(np.linalg.norm(F2))
                    if fn2 <= (1.0 - 1e-4 * lam) * fn or fn2 <= params.newton_tol:
                        u, Fv, fn = un, F2, fn2
                        accepted = True
                        mu = mu / 3.0 if mu > 1e-14 else 0.0
                        break
                    lam *= 0.5
            if accepted:
                break
            mu = max(mu * 4.0, 1e-8)
            if mu > 1e16:
                break
        if not accepted:
            return u, it, False, "reaction-step Newton stalled"
    return u, params.max_newton, float(np.max(np.abs(Fv))) <= params.newton_tol, ""


def comparison_check(
    v0_low: Field,
    v0_high: Field,
    spec: ProblemSpec,
    params: FlowParams,
    alpha=None,
    alpha_prime=None,
    tolerance: float | None = None,
) -> ComparisonReport:
    """Evolve an ordered pair in lockstep and report the worst ordering
    violation max over time and space of (w_low - w_high)+.

    ``alpha(coords, w)`` optionally replaces the energy's own reaction term by
    an arbitrary Lipschitz zero-order term (its derivative may be supplied as
    ``alpha_prime``); the recorded ``lipschitz_bound`` is sup Q sup |beta'|
    / eps^2 for the default reaction.
    """
    lo = spec.apply_boundary(v0_low.values)
    hi = spec.apply_boundary(v0_high.values)
    if np.any(v0_low.values > v0_high.values):
        raise ValueError("comparison_check requires v0_low <= v0_high nodewise")
    tol = params.comparison_tol if tolerance is None else tolerance
    n_steps = max(1, int(round(params.horizon / params.dt)))
    worst = 0.0
    for _ in range(n_steps):
        if alpha is None:
            lo2, _, ok1, m1 = _implicit_step(lo, spec, params)
            hi2, _, ok2, m2 = _implicit_step(hi, spec, params)
        else:
            lo2, _, ok1, m1 = _custom_reaction_step(lo, spec, params, alpha, alpha_prime)
            hi2, _, ok2, m2 = _custom_reaction_step(hi, spec, params, alpha, alpha_prime)
        if not (ok1 and ok2):
            raise FlowStepError(f"comparison leg failed ({m1 or m2}); reduce dt")
        lo, hi = lo2, hi2
        worst = max(worst, float(np.max(np.maximum(lo - hi, 0.0))))
    return ComparisonReport(
        max_violation=worst,
        tolerance=tol,
        passed=worst <= tol,
        steps=n_steps,
        lipschitz_bound=_reaction_lipschitz(spec),
        custom_reaction=alpha is not None,
    )


def classify_limit(trace: EvolutionTrace, candidates: list, tol: float) -> int | None:
    """Index of the unique candidate within ``tol`` (sup-norm) of the final
    snapshot; None when nothing matches.

    Raises :class:`AmbiguousLimitError` when several candidates match: the
    tolerance is too loose to separate the steady states.
    """
    if not trace.verdict.startswith("converged"):
        raise ValueError("classify_limit needs a converged trace")
    final = trace.final
    dists = [final.sup_distance(c.solution) for c in candidates]
    hits = [i for i, d in enumerate(dists) if d <= tol]
    if len(hits) > 1:
        raise AmbiguousLimitError(
            f"candidates {hits} all lie within {tol} of the terminal state "
            f"(distances {[dists[i] for i in hits]}); tighten the tolerance"
        )
    return hits[0] if hits else None


def destabilize_saddle(
    u1_report: SolveReport,
    spec: ProblemSpec,
    delta_pert: float,
    path: "PathState",
    seed: int | None = None,
) -> Field:
    """Initial datum within ``delta_pert`` of the saddle but strictly below it
    in energy, found by stepping along the final path direction through the
    maximum (optionally blended with a seeded smooth perturbation).

    The flow started from the returned field cannot converge back to the
    saddle: its energy stays below J(u1) for all time.
    """
    if u1_report.classification != "saddle":
        raise ValueError("destabilize_saddle needs a report classified as saddle")
    if delta_pert <= 0.0:
        raise ValueError("delta_pert must be positive")
    g = spec.grid
    k = path.max_index
    lo = max(k - 1, 0)
    hi = min(k + 1, len(path.entries) - 1)
    direction = path.entries[hi].values - path.entries[lo].values
    if seed is not None:
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xD5)))
        mix = smooth_random_field(g, rng)
        mix = mix / max(float(np.max(np.abs(mix))), 1e-300)
        direction = direction / max(float(np.max(np.abs(direction))), 1e-300) + 0.3 * mix
    nrm = float(np.max(np.abs(direction)))
    if nrm <= 0.0:
        raise RuntimeError("path direction through the maximum is degenerate")
    direction = direction / nrm

    u1 = u1_report.solution.values
    j1 = energy_of_values(u1, spec).total
    scale = 0.9 * delta_pert
    for _ in range(24):
        drops = []
        for sign in (1.0, -1.0):
            v0 = u1 + sign * scale * direction
            drops.append((j1 - energy_of_values(v0, spec).total, sign))
        drop, sign = max(drops)
        if drop > 0.0:
            return Field(g, u1 + sign * scale * direction)
        scale *= 0.5
    raise RuntimeError(
        "no energy-decreasing direction found at this resolution; "
        "the state is not resolved as a saddle"
    )
