"""Boundary-datum sweeps, the critical threshold, and the ridge inequalities.

The bifurcation variable is a scalar multiplier on the boundary datum. A
sweep solves the trivial state and a multistart minimization per datum value
and records whether the minimizer drops strictly below the trivial energy
(the premise flag); the threshold is bracketed by bisection on that flag.
Two energy inequalities are probed numerically: the collar upper bound that
forces a nontrivial minimizer at small data, and the positive energy ridge
separating the origin from the minimizer in increment space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .grid import Field, integrate_cells, smooth_random_field
from .model import ProblemSpec, dirichlet_seminorm, energy_of_values, shifted_energy
from .stationary import (
    MountainPassPremiseError,
    SolveReport,
    minimize_energy,
    mountain_pass,
    multistart_minimize,
    solve_p_harmonic,
    wedge_initializer,
)

__all__ = [
    "SweepRow",
    "SweepResult",
    "CriticalBracket",
    "EnergyGapReport",
    "RidgeProbeReport",
    "sigma_sweep",
    "find_critical_sigma",
    "energy_gap_check",
    "mountain_ridge_probe",
]


@dataclass(frozen=True)
class SweepRow:
    sigma: float
    J_u0: float
    J_u2: float
    J_u1: float  # nan when unavailable
    deadcore_volume: float
    count: int
    premise: bool
    error: str = ""


@dataclass(frozen=True)
class SweepResult:
    rows: tuple
    p: float
    eps: float
    grid_label: str
    profile: str
    seed: int = 0

    def premise_flags(self) -> np.ndarray:
        return np.array([r.premise for r in self.rows], dtype=bool)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(
                f"# p={self.p:.17g} eps={self.eps:.17g} grid={self.grid_label} "
                f"profile={self.profile} seed={self.seed}\n"
            )
            fh.write("sigma,J_u0,J_u2,J_u1,deadcore_volume,count,premise\n")
            for r in self.rows:
                fh.write(
                    f"{r.sigma:.17g},{r.J_u0:.17g},{r.J_u2:.17g},{r.J_u1:.17g},"
                    f"{r.deadcore_volume:.17g},{r.count},{int(r.premise)}\n"
                )


def read_sweep_csv(path) -> SweepResult:
    with open(path) as fh:
        meta = fh.readline().strip()
        if not meta.startswith("#"):
            raise ValueError("sweep csv must start with a metadata header line")
        kv = dict(tok.split("=", 1) for tok in meta[1:].split())
        header = fh.readline().strip()
        if header != "sigma,J_u0,J_u2,J_u1,deadcore_volume,count,premise":
            raise ValueError(f"unexpected sweep csv columns: {header}")
        rows = []
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) != 7:
                continue
            rows.append(
                SweepRow(
                    sigma=float(parts[0]),
                    J_u0=float(parts[1]),
                    J_u2=float(parts[2]),
                    J_u1=float(parts[3]),
                    deadcore_volume=float(parts[4]),
                    count=int(parts[5]),
                    premise=bool(int(parts[6])),
                )
            )
    return SweepResult(
        rows=tuple(rows),
        p=float(kv["p"]),
        eps=float(kv["eps"]),
        grid_label=kv["grid"],
        profile=kv["profile"],
        seed=int(kv.get("seed", 0)),
    )


@dataclass(frozen=True)
class CriticalBracket:
    sigma_lo: float  # nontrivial minimizer here (premise true)
    sigma_hi: float  # trivial minimizer here (premise false)
    width: float
    iterations: int
    probes: tuple = ()  # (sigma, flag) pairs, in probe order

    def to_json_dict(self) -> dict:
        return {
            "sigma_lo": self.sigma_lo,
            "sigma_hi": self.sigma_hi,
            "width": self.width,
            "iterations": self.iterations,
            "probes": [[s, bool(f)] for s, f in self.probes],
        }


def _default_collar_widths(spec: ProblemSpec) -> tuple:
    L = min(spec.grid.extent)
    return (0.15 * L, 0.3 * L)


def _seeds(spec: ProblemSpec, u0: Field) -> list:
    out = [u0]
    for d in _default_collar_widths(spec):
        out.append(wedge_initializer(spec, d))
    return out


def solve_row(
    spec: ProblemSpec,
    tol: float = 1e-9,
    energy_margin: float | None = None,
    with_mountain_pass: bool = True,
    path_size: int = 41,
    mp_tol: float | None = None,
    max_iter: int = 800,
):
    """Solve one datum value: trivial state, multistart minimizer, premise
    flag, and (when the premise holds and requested) the saddle.

    Returns (SweepRow, reports dict).
    """
    margin = 10.0 * tol if energy_margin is None else energy_margin
    u0_rep = solve_p_harmonic(spec, tol=tol)
    reports = {"u0": u0_rep}
    err = ""
    try:
        minims = multistart_minimize(spec, _seeds(spec, u0_rep.solution), tol=tol, max_iter=max_iter)
        converged = [r for r in minims if r.converged]
        if not converged:
            raise RuntimeError("no minimization seed converged")
        u2_rep = converged[0]
    except (RuntimeError, ValueError) as exc:
        row = SweepRow(
            sigma=spec.sigma_M,
            J_u0=u0_rep.energy.total,
            J_u2=float("nan"),
            J_u1=float("nan"),
            deadcore_volume=float("nan"),
            count=1,
            premise=False,
            error=str(exc),
        )
        return row, reports
    reports["u2"] = u2_rep
    reports["minimizers"] = converged
    premise = u2_rep.energy.total < u0_rep.energy.total - margin
    j_u1 = float("nan")
    count = len(converged)
    if u0_rep.solution.sup_distance(u2_rep.solution) > 10.0 * tol:
        count += 0 if any(
            u0_rep.solution.sup_distance(r.solution) <= 10.0 * tol for r in converged
        ) else 1
    if premise and with_mountain_pass:
        try:
            u1_rep, path = mountain_pass(
                spec,
                u0_rep,
                u2_rep,
                path_size=path_size,
                tol=tol if mp_tol is None else mp_tol,
            )
            if u1_rep.converged:
                reports["u1"] = u1_rep
                reports["path"] = path
                j_u1 = u1_rep.energy.total
                count += 1
            else:
                err = f"mountain pass: {u1_rep.message}"
        except MountainPassPremiseError as exc:
            err = str(exc)
    deadcore = u2_rep.dead_core_count * spec.grid.node_volume
    row = SweepRow(
        sigma=spec.sigma_M,
        J_u0=u0_rep.energy.total,
        J_u2=u2_rep.energy.total,
        J_u1=j_u1,
        deadcore_volume=deadcore,
        count=count,
        premise=bool(premise),
        error=err,
    )
    return row, reports


def sigma_sweep(
    spec_template: ProblemSpec,
    sigma_values,
    tol: float = 1e-9,
    energy_margin: float | None = None,
    with_mountain_pass: bool = True,
    seed: int = 0,
    workers: int = 1,
) -> SweepResult:
    """One :func:`solve_row` per datum value, rows ordered by sigma."""
    sig = [float(s) for s in sigma_values]
    if any(s <= 0.0 for s in sig):
        raise ValueError("sigma values must be positive")
    if sorted(sig) != sig:
        raise ValueError("sigma values must be sorted ascending")

    def work(s):
        row, _ = solve_row(
            spec_template.with_sigma(s),
            tol=tol,
            energy_margin=energy_margin,
            with_mountain_pass=with_mountain_pass,
        )
        return row

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(work, sig))
    else:
        rows = [work(s) for s in sig]
    g = spec_template.grid
    label = "x".join(str(n) for n in g.nodes)
    return SweepResult(
        rows=tuple(rows),
        p=spec_template.p,
        eps=spec_template.eps,
        grid_label=f"{g.dimension}d:{label}",
        profile=spec_template.profile.name,
        seed=seed,
    )


def find_critical_sigma(
    spec_template: ProblemSpec,
    sigma_min: float,
    sigma_max: float,
    tol_sigma: float,
    tol: float = 1e-9,
    energy_margin: float | None = None,
) -> CriticalBracket:
    """Bisect the premise flag (minimizer strictly below trivial, with an
    energy margin of 10x solver tolerance by default) down to ``tol_sigma``.

    The probe record is checked for a single true-to-false transition; any
    interleaving aborts with the full probe list, since it would invalidate
    the bisection's premise.
    """
    if not (0.0 < sigma_min < sigma_max):
        raise ValueError("need 0 < sigma_min < sigma_max")
    margin = 10.0 * tol if energy_margin is None else energy_margin

    probes = []

    def flag(s: float) -> bool:
        row, _ = solve_row(
            spec_template.with_sigma(s),
            tol=tol,
            energy_margin=margin,
            with_mountain_pass=False,
        )
        if row.error and np.isnan(row.J_u2):
            raise RuntimeError(f"probe at sigma={s} failed: {row.error}")
        probes.append((s, row.premise))
        return row.premise

    lo_flag = flag(sigma_min)
    hi_flag = flag(sigma_max)
    if not lo_flag or hi_flag:
        raise ValueError(
            "bracket invalid: need the premise true at sigma_min and false at "
            f"sigma_max (got {lo_flag} at {sigma_min}, {hi_flag} at {sigma_max}); "
            "widen the bracket"
        )
    lo, hi = sigma_min, sigma_max
    iterations = 0
    while hi - lo > tol_sigma:
        iterations += 1
        mid = 0.5 * (lo + hi)
        if flag(mid):
            lo = mid
        else:
            hi = mid
        if iterations > 200:
            break

    by_sigma = sorted(probes)
    flags = [f for _, f in by_sigma]
    if any(flags[i] < flags[i + 1] for i in range(len(flags) - 1)):
        raise RuntimeError(
            "premise flag is not monotone across the probes: "
            + ", ".join(f"({s:.6g},{int(f)})" for s, f in by_sigma)
        )
    return CriticalBracket(
        sigma_lo=lo,
        sigma_hi=hi,
        width=hi - lo,
        iterations=iterations,
        probes=tuple(probes),
    )


# ---------------------------------------------------------------------------
# collar energy gap
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnergyGapReport:
    lhs: float  # J(collar wedge) - J(trivial)
    bound: float  # C sigma_M^p delta^{1-p} - integral of Q over the deep set
    satisfied: bool
    informative: bool  # the bound is negative, so it certifies lhs < 0
    constant: float
    delta: float
    wedge: Field
    trivial: Field

    def to_json_dict(self) -> dict:
        return {
            "lhs": self.lhs,
            "bound": self.bound,
            "satisfied": self.satisfied,
            "informative": self.informative,
            "constant": self.constant,
            "delta": self.delta,
        }


def _boundary_measure(spec: ProblemSpec) -> float:
    g = spec.grid
    if g.dimension == 1:
        return 2.0
    return 2.0 * (g.extent[0] + g.extent[1])


def energy_gap_check(spec: ProblemSpec, delta_collar: float) -> EnergyGapReport:
    """Compare the collar wedge's energy gap against the closed-form bound.

    The constant comes from the 1D ramp (per-side Dirichlet cost
    sigma^p delta^{1-p} / p) scaled by the boundary measure, so
    C = |boundary| / p. The report flags whether the bound is negative, i.e.
    actually certifies a nontrivial minimizer at this datum.
    """
    g = spec.grid
    wedge = wedge_initializer(spec, delta_collar)
    u0_rep = solve_p_harmonic(spec, tol=1e-10)
    lhs = (
        energy_of_values(wedge.values, spec).total
        - energy_of_values(u0_rep.solution.values, spec).total
    )
    C = _boundary_measure(spec) / spec.p
    deep = g.boundary_distance() > delta_collar
    q_deep = float(np.sum(spec.q.ravel()[deep.ravel()]) * g.node_volume)
    bound = C * spec.sigma_M**spec.p * delta_collar ** (1.0 - spec.p) - q_deep
    return EnergyGapReport(
        lhs=lhs,
        bound=bound,
        satisfied=lhs <= bound,
        informative=bound < 0.0,
        constant=C,
        delta=delta_collar,
        wedge=wedge,
        trivial=u0_rep.solution,
    )


# ---------------------------------------------------------------------------
# mountain ridge probe
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RidgeProbeReport:
    min_shifted_energy: float
    argmin_id: str
    delta_norm: float
    sample_count: int
    resampled: int
    values: tuple

    def to_json_dict(self) -> dict:
        return {
            "min_shifted_energy": self.min_shifted_energy,
            "argmin_id": self.argmin_id,
            "delta_norm": self.delta_norm,
            "sample_count": self.sample_count,
            "resampled": self.resampled,
        }


def mountain_ridge_probe(
    spec: ProblemSpec,
    u0: Field,
    delta_norm: float,
    sample_count: int = 256,
    seed: int = 0,
    v2: Field | None = None,
) -> RidgeProbeReport:
    """Sampled positivity check of the energy ridge at gradient-norm radius
    ``delta_norm``.

    Draws boundary-vanishing random fields, rescales each to the discrete
    W^{1,p} seminorm ``delta_norm``, and reports the minimum shifted energy.
    Sample k is generated from (seed, k), so enlarging the count with a fixed
    seed only appends samples. The rescaled direction of ``v2`` is always
    included as sample id "v2".
    """
    if delta_norm <= 0.0:
        raise ValueError("delta_norm must be positive")
    if sample_count < 1:
        raise ValueError("sample_count must be at least 1")
    g = spec.grid
    values = []
    resampled = 0

    def rescaled(raw: np.ndarray):
        nrm = dirichlet_seminorm(raw, spec)
        if nrm <= 1e-300:
            return None
        return raw * (delta_norm / nrm)

    if v2 is not None:
        vr = rescaled(v2.values)
        if vr is not None:
            values.append(("v2", shifted_energy(Field(g, vr), u0, spec)))
    for k in range(sample_count):
        attempt = 0
        while True:
            rng = np.random.default_rng(np.random.SeedSequence((int(seed), k, attempt)))
            vr = rescaled(smooth_random_field(g, rng))
            if vr is not None:
                break
            resampled += 1
            attempt += 1
        values.append((f"s{k}", shifted_energy(Field(g, vr), u0, spec)))
    best = min(values, key=lambda t: t[1])
    return RidgeProbeReport(
        min_shifted_energy=best[1],
        argmin_id=best[0],
        delta_norm=delta_norm,
        sample_count=sample_count,
        resampled=resampled,
        values=tuple(values),
    )
