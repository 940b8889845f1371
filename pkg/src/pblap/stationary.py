"""Steady states: the trivial p-harmonic solution, energy minimizers, and the
mountain-pass saddle between them.

All solvers share one damped-Newton descent core: the search direction is a
(possibly Levenberg-shifted) Newton direction on the exact discrete-energy
gradient, accepted under an Armijo decrease of the energy, so energies are
non-increasing across accepted steps by construction. The saddle search walks
the energy ridge between the two stable states: it re-locates the crossing of
the path by a golden-section maximization along the local path direction,
takes one descent step from the crossing, and periodically polishes with an
undamped-root Newton, which converges once the crossing is near the saddle.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import Field, Grid
from .model import (
    EnergyBreakdown,
    ProblemSpec,
    energy_of_values,
    energy_gradient,
    hessian_matrix,
    residual_values,
    shifted_energy,
)

__all__ = [
    "SolveReport",
    "PathState",
    "MountainPassPremiseError",
    "solve_p_harmonic",
    "minimize_energy",
    "wedge_initializer",
    "mountain_pass",
    "multistart_minimize",
]


class MountainPassPremiseError(RuntimeError):
    """The minimizer does not lie below the trivial solution in energy, so
    there is no mountain to pass; the boundary datum is above threshold."""


@dataclass(frozen=True)
class SolveReport:
    """Outcome of one stationary solve."""

    solution: Field
    residual_sup: float
    energy: EnergyBreakdown
    iterations: int
    classification: str  # trivial | minimizer | saddle | unclassified
    dead_core_indices: np.ndarray
    converged: bool
    tol: float
    message: str = ""
    energy_history: tuple = ()

    @property
    def dead_core_count(self) -> int:
        return int(self.dead_core_indices.size)

    def to_json_dict(self) -> dict:
        return {
            "classification": self.classification,
            "converged": self.converged,
            "iterations": self.iterations,
            "residual_sup": self.residual_sup,
            "tol": self.tol,
            "energy": self.energy.to_json_dict(),
            "dead_core_count": self.dead_core_count,
            "message": self.message,
        }


@dataclass
class PathState:
    """Discrete path of boundary-vanishing increments from 0 to v2."""

    entries: list  # list[Field], first == 0, last == v2
    energies: np.ndarray
    max_index: int

    def refresh_energies(self, u0: Field, spec: ProblemSpec) -> np.ndarray:
        self.energies = np.array(
            [shifted_energy(v, u0, spec) for v in self.entries]
        )
        return self.energies


def _dead_core(u: np.ndarray, spec: ProblemSpec) -> np.ndarray:
    return np.flatnonzero(np.asarray(u).ravel() < spec.eps)


def _spsolve_quiet(M, rhs):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            d = spla.spsolve(M.tocsc(), rhs)
        except Exception:
            return None
    if d is None or not np.all(np.isfinite(d)):
        return None
    return d


def _descend(
    u0: np.ndarray,
    spec: ProblemSpec,
    free: np.ndarray,
    tol: float,
    max_iter: int,
    include_phase: bool = True,
    extra_quadratic: tuple | None = None,
    ncg_warmup: int = 0,
):
    """Monotone energy descent to a critical point on the free node set.

    Directions are Levenberg-shifted Newton steps on the exact gradient,
    accepted under an Armijo decrease of the (regularized) energy; an optional
    nonlinear-CG warmup runs first. ``extra_quadratic=(center, coef)`` adds
    coef/2 * sum (u - center)^2 to the objective (used by the implicit flow
    step). Returns (u, iterations, residual_sup, converged, message, history).
    """
    g = spec.grid
    u = np.array(u0, dtype=float)
    freeflat = np.flatnonzero(free.ravel())
    nfree = freeflat.size
    eye = sp.identity(nfree, format="csc")
    vol = g.node_volume

    def objective(vals):
        e = energy_of_values(vals, spec)
        base = e.regularized_total if include_phase else e.regularized_total - e.phase
        if extra_quadratic is not None:
            center, coef = extra_quadratic
            base += 0.5 * coef * float(np.sum((vals - center) ** 2))
        return base

    def gradient(vals):
        grd = energy_gradient(vals, spec, include_phase).ravel()[freeflat]
        if extra_quadratic is not None:
            center, coef = extra_quadratic
            grd = grd + coef * (vals.ravel()[freeflat] - center.ravel()[freeflat])
        return grd

    def resid_sup(vals):
        return float(np.max(np.abs(gradient(vals)))) / vol

    history = [objective(u)]
    it_total = 0

    # optional nonlinear-CG (Polak-Ribiere+) warmup with Armijo backtracking
    if ncg_warmup > 0:
        gk = gradient(u)
        d = -gk
        alpha = 1.0
        for _ in range(ncg_warmup):
            it_total += 1
            rn = float(np.max(np.abs(gk))) / vol
            if rn <= tol:
                break
            gd = float(np.dot(gk, d))
            if gd >= 0.0:
                d = -gk
                gd = -float(np.dot(gk, gk))
            e0 = history[-1]
            ok = False
            step = alpha * 2.0
            for _ in range(50):
                un = u.copy()
                un.ravel()[freeflat] += step * d
                en = objective(un)
                if en <= e0 + 1e-4 * step * gd:
                    ok = True
                    break
                step *= 0.5
            if not ok:
                break
            alpha = step
            u = un
            history.append(en)
            gk1 = gradient(u)
            beta = max(0.0, float(np.dot(gk1, gk1 - gk) / max(np.dot(gk, gk), 1e-300)))
            d = -gk1 + beta * d
            gk = gk1

    mu = 0.0
    for _ in range(max_iter):
        it_total += 1
        gk = gradient(u)
        rn = float(np.max(np.abs(gk))) / vol
        if rn <= tol:
            return u, it_total, rn, True, "", history
        H = hessian_matrix(u, spec, include_phase)[freeflat][:, freeflat]
        if extra_quadratic is not None:
            H = H + extra_quadratic[1] * eye
        e0 = objective(u)
        base = max(1e-12, float(np.mean(np.abs(H.diagonal()))))
        accepted = False
        for _ in range(60):
            M = (H + (mu * base) * eye) if mu > 0.0 else H
            d = _spsolve_quiet(M, -gk)
            if d is not None:
                gd = float(np.dot(gk, d))
                if gd < 0.0:
                    un = u.copy()
                    un.ravel()[freeflat] += d
                    en = objective(un)
                    if en <= e0 + 1e-4 * gd:
                        u = un
                        history.append(en)
                        mu = mu / 3.0 if mu > 1e-14 else 0.0
                        accepted = True
                        break
            mu = max(mu * 4.0, 1e-8)
            if mu > 1e18:
                break
        if not accepted:
            return (
                u,
                it_total,
                rn,
                False,
                "line-search failure: no energy decrease at minimum step",
                history,
            )
    return u, it_total, resid_sup(u), False, "max_iter exhausted", history


def _report(
    u: np.ndarray,
    spec: ProblemSpec,
    iterations: int,
    converged: bool,
    tol: float,
    classification: str,
    message: str = "",
    history: tuple = (),
) -> SolveReport:
    fld = Field(spec.grid, u)
    return SolveReport(
        solution=fld,
        residual_sup=float(np.max(np.abs(residual_values(u, spec)))),
        energy=energy_of_values(u, spec),
        iterations=iterations,
        classification=classification if converged else "unclassified",
        dead_core_indices=_dead_core(u, spec),
        converged=converged,
        tol=tol,
        message=message,
        energy_history=tuple(history),
    )


def solve_p_harmonic(
    spec: ProblemSpec,
    init: Field | None = None,
    tol: float = 1e-10,
    max_iter: int = 200,
    pinned_zero: np.ndarray | None = None,
) -> SolveReport:
    """Solve the Dirichlet-term equation (phase forces off) for the boundary
    datum; damped Newton with step control. ``pinned_zero`` additionally pins
    a node set to zero (used by the collar initializer).

    The report is classified ``trivial`` when the solution stays above the
    phase width everywhere, so the full residual vanishes too.
    """
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    g = spec.grid
    u = spec.apply_boundary(init.values if init is not None else np.full(g.shape, spec.sigma_m))
    free = g.interior_mask.copy()
    if pinned_zero is not None:
        u = np.where(pinned_zero, 0.0, u)
        free &= ~pinned_zero
    u, its, rn, ok, msg, hist = _descend(
        u, spec, free, tol, max_iter, include_phase=False
    )
    rn_dirichlet = float(
        np.max(np.abs((energy_gradient(u, spec, include_phase=False) / g.node_volume).ravel()[np.flatnonzero(free.ravel())]))
    ) if free.any() else 0.0
    classification = "trivial" if (ok and float(u.min()) >= spec.eps) else "unclassified"
    rep = _report(u, spec, its, ok, tol, "unclassified", msg, hist)
    # residual in the report is the full operator's; classification follows the
    # Dirichlet solve outcome
    return SolveReport(
        solution=rep.solution,
        residual_sup=rn_dirichlet if pinned_zero is not None else rep.residual_sup,
        energy=rep.energy,
        iterations=its,
        classification=classification,
        dead_core_indices=rep.dead_core_indices,
        converged=ok,
        tol=tol,
        message=msg,
        energy_history=rep.energy_history,
    )


def minimize_energy(
    spec: ProblemSpec,
    init: Field,
    tol: float = 1e-10,
    max_iter: int = 800,
    ncg_warmup: int = 15,
) -> SolveReport:
    """Descend the discrete energy from ``init`` to a critical point.

    Backtracking line search on the energy keeps the accepted-iterate energy
    sequence non-increasing; a short nonlinear-CG warmup precedes the Newton
    descent. Fails explicitly when no decrease exists at the minimum step.
    """
    if not spec.boundary_matches(init.values, tol=0.0):
        raise ValueError("init must satisfy the boundary datum sigma")
    u, its, rn, ok, msg, hist = _descend(
        init.values,
        spec,
        spec.grid.interior_mask,
        tol,
        max_iter,
        include_phase=True,
        ncg_warmup=ncg_warmup,
    )
    return _report(u, spec, its, ok, tol, "minimizer", msg, hist)


def wedge_initializer(spec: ProblemSpec, collar_width: float) -> Field:
    """Field that is 0 deeper than ``collar_width`` from the boundary, sigma
    on the boundary, and p-harmonic across the collar."""
    g = spec.grid
    if not (0.0 < collar_width < 0.5 * min(g.extent)):
        raise ValueError(
            f"collar width must lie in (0, {0.5 * min(g.extent)}), got {collar_width}"
        )
    deep = (g.boundary_distance() > collar_width) & g.interior_mask
    if not deep.any():
        raise ValueError("collar width pins no interior node; widen the grid or delta")
    init = Field(g, np.where(deep, 0.0, spec.boundary_values()))
    rep = solve_p_harmonic(spec, init=init, tol=1e-11, max_iter=300, pinned_zero=deep)
    return rep.solution


def multistart_minimize(
    spec: ProblemSpec,
    seeds: list,
    tol: float = 1e-10,
    max_iter: int = 800,
) -> list:
    """Minimize from every seed; deduplicate converged results by sup-norm
    distance <= 10 tol and sort them by energy (failures appended last)."""
    if not seeds:
        raise ValueError("need at least one seed")
    reports = []
    failures = []
    for seed in seeds:
        try:
            rep = minimize_energy(spec, seed, tol=tol, max_iter=max_iter)
        except ValueError:
            raise
        (reports if rep.converged else failures).append(rep)
    distinct = []
    for rep in sorted(reports, key=lambda r: r.energy.total):
        if all(rep.solution.sup_distance(d.solution) > 10.0 * tol for d in distinct):
            distinct.append(rep)
    return distinct + failures


# ---------------------------------------------------------------------------
# mountain pass
# ---------------------------------------------------------------------------

def _newton_root(u0: np.ndarray, spec: ProblemSpec, tol: float, max_iter: int = 50):
    """Damped Newton on the full residual; accepts sup-norm decrease. Finds
    critical points of any index; convergence is local."""
    g = spec.grid
    freeflat = g.interior_indices
    u = np.array(u0, dtype=float)
    vol = g.node_volume
    for it in range(max_iter):
        gk = energy_gradient(u, spec).ravel()[freeflat]
        rn = float(np.max(np.abs(gk))) / vol
        if rn <= tol:
            return u, it, rn, True
        H = hessian_matrix(u, spec)[freeflat][:, freeflat]
        d = _spsolve_quiet(H, -gk)
        if d is None:
            return u, it, rn, False
        lam = 1.0
        ok = False
        for _ in range(50):
            un = u.copy()
            un.ravel()[freeflat] += lam * d
            rn2 = float(np.max(np.abs(energy_gradient(un, spec).ravel()[freeflat]))) / vol
            if rn2 < rn:
                ok = True
                break
            lam *= 0.5
        if not ok:
            return u, it, rn, False
        u = un
    gk = energy_gradient(u, spec).ravel()[freeflat]
    rn = float(np.max(np.abs(gk))) / vol
    return u, max_iter, rn, rn <= tol


def _golden_max(f, lo: float, hi: float, iters: int = 45):
    gr = (np.sqrt(5.0) - 1.0) / 2.0
    c = hi - gr * (hi - lo)
    d = lo + gr * (hi - lo)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc > fd:
            hi, d, fd = d, c, fc
            c = hi - gr * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + gr * (hi - lo)
            fd = f(d)
    t = 0.5 * (lo + hi)
    return t, f(t)


def _redistribute(path: np.ndarray, gap, m: int, max_allowed: float) -> np.ndarray:
    """Equal sup-norm arclength resampling of the polygonal path; skipped if
    it would raise the path maximum (keeps the max history monotone)."""
    seg = np.max(np.abs(np.diff(path, axis=0)), axis=tuple(range(1, path.ndim)))
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    if cum[-1] <= 0.0:
        return path
    want = np.linspace(0.0, cum[-1], m)
    out = np.empty_like(path)
    out[0], out[-1] = path[0], path[-1]
    for j in range(1, m - 1):
        idx = min(max(int(np.searchsorted(cum, want[j])) - 1, 0), m - 2)
        w = (want[j] - cum[idx]) / max(cum[idx + 1] - cum[idx], 1e-300)
        out[j] = (1.0 - w) * path[idx] + w * path[idx + 1]
    if max(gap(q) for q in out) <= max_allowed + 1e-12:
        return out
    return path


def mountain_pass(
    spec: ProblemSpec,
    u0_report: SolveReport,
    u2_report: SolveReport,
    path_size: int = 41,
    tol: float = 1e-8,
    max_iter: int = 400,
):
    """Saddle between the trivial solution and the minimizer by deforming the
    energy-maximizing state of a discrete path.

    The path starts as the straight segment t * v2. Each iteration locates
    the maximizing node, re-enforces the ridge crossing by a golden-section
    maximization along the local path direction, applies one descent step
    with line search to that state, and resamples the path for continuity;
    an undamped-root Newton polish is attempted from every crossing and
    terminates the loop once it lands on a critical point strictly above the
    trivial energy. Returns (SolveReport classified ``saddle``, PathState).

    Raises :class:`MountainPassPremiseError` if the minimizer does not lie
    strictly below the trivial solution (boundary datum above threshold).
    """
    g = spec.grid
    m = int(path_size)
    if m < 5:
        raise ValueError("path_size must be at least 5")
    u0 = u0_report.solution.values
    u2 = u2_report.solution.values
    v2 = u2 - u0
    e_u0 = energy_of_values(u0, spec)
    e_u2 = energy_of_values(u2, spec)
    if not e_u2.total < e_u0.total:
        raise MountainPassPremiseError(
            "shifted energy of v2 is nonnegative "
            f"(J(u2)={e_u2.total:.6g} >= J(u0)={e_u0.total:.6g}); "
            "sigma is above the bifurcation threshold"
        )

    ref = e_u0.regularized_total

    def gap(uvals):
        return energy_of_values(uvals, spec).regularized_total - ref

    path = np.array([u0 + t * v2 for t in np.linspace(0.0, 1.0, m)])
    v2sup = float(np.max(np.abs(v2)))
    dun = v2 / max(v2sup, 1e-300)  # local unstable (dip-depth) direction
    eta = v2sup / (m - 1)
    z = None
    alpha_prev = 1e-2
    history = []
    failure = None

    for move in range(max_iter):
        gaps = np.array([gap(q) for q in path])
        k = int(np.argmax(gaps))
        if k in (0, m - 1):
            failure = "path max collapsed onto an endpoint (path too coarse)"
            break
        base = path[k] if z is None else z
        tt, iz = _golden_max(lambda t: gap(base + t * dun), -eta, eta)
        cand = base + tt * dun
        if history and iz > history[-1] + 1e-12 * max(1.0, abs(history[-1])):
            # crossing must not rise; fall back to the node itself
            cand, iz = path[k], gaps[k]
            tt = 0.0
        z = cand
        history.append(iz)

        un, _, rn_newton, okn = _newton_root(z, spec, tol=tol, max_iter=50)
        if okn:
            e_un = energy_of_values(un, spec)
            d0 = float(np.max(np.abs(un - u0)))
            d2 = float(np.max(np.abs(un - u2)))
            if e_un.total > e_u0.total + 1e-13 and d0 > 1e-6 and d2 > 1e-6:
                path[k] = un
                history.append(gap(un))
                return _finish_mountain_pass(
                    spec, un, u0, path, k, tol, move + 1, history
                )

        grd = energy_gradient(z, spec)
        grd.ravel()[g.boundary_indices] = 0.0
        gd = -float(np.sum(grd * grd))
        step = alpha_prev * 2.0
        ok = False
        for _ in range(60):
            zn = z - step * grd
            if gap(zn) <= iz + 1e-4 * step * gd:
                ok = True
                break
            step *= 0.5
        if not ok:
            failure = "descent line search stalled on the ridge"
            break
        alpha_prev = step
        z = zn
        path[k] = zn
        eta = max(2.0 * abs(tt), v2sup / 400.0)
        if move % 5 == 4:
            path = _redistribute(path, gap, m, float(np.max([gap(q) for q in path])))

    if failure is None:
        failure = "saddle search budget exhausted before convergence"
    gaps = np.array([gap(q) for q in path])
    k = int(np.argmax(gaps))
    rep = _report(path[k], spec, max_iter, False, tol, "saddle", failure, history)
    state = _path_state(spec, u0, path, k)
    return rep, state


def _path_state(spec: ProblemSpec, u0: np.ndarray, path: np.ndarray, k: int) -> PathState:
    g = spec.grid
    entries = [Field(g, q - u0) for q in path]
    u0f = Field(g, u0)
    energies = np.array([shifted_energy(v, u0f, spec) for v in entries])
    return PathState(entries=entries, energies=energies, max_index=k)


def _finish_mountain_pass(spec, u1, u0, path, k, tol, iterations, history):
    rep = _report(u1, spec, iterations, True, tol, "saddle", "", history)
    state = _path_state(spec, u0, path, k)
    e0 = energy_of_values(u0, spec).total
    if not rep.energy.total > e0:
        rep = SolveReport(
            solution=rep.solution,
            residual_sup=rep.residual_sup,
            energy=rep.energy,
            iterations=rep.iterations,
            classification="unclassified",
            dead_core_indices=rep.dead_core_indices,
            converged=False,
            tol=tol,
            message="converged to a critical point at or below the trivial energy",
            energy_history=rep.energy_history,
        )
    return rep, state
