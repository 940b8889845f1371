"""Phase profile, problem data, discrete energy, and its exact derivatives.

The functional is

    J(u) = sum_cells vol * [ (1/p) |grad u|^p  +  Qbar * G(ubar / eps) ]

with the cell gradient of :mod:`pblap.grid`, the cell averages ``ubar`` and
``Qbar`` of the nodal values, and a fixed smooth switch ``G`` rising from 0
to 1 over [0, 1]. A degeneracy regularizer ``eps_reg`` replaces |grad u|^2 by
``eps_reg + |grad u|^2`` inside the Dirichlet term; it defaults to 1e-10 for
p < 2 (where a vanishing gradient is singular) and to 0 for p >= 2.

The Euler-Lagrange residual is the exact gradient of this discrete energy
divided by the node volume, never an independently derived stencil, so
gradient-consistency between energy evaluation, minimization, and flow is a
structural identity rather than a numerical accident.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .grid import Field, Grid, cell_average

__all__ = [
    "PhaseProfile",
    "SMOOTH_BUMP",
    "ProblemSpec",
    "EnergyBreakdown",
    "gamma_eps",
    "beta_eps",
    "energy",
    "shifted_energy",
    "residual",
    "hessian_matrix",
    "inequality_oracle",
    "InequalityReport",
]


# ---------------------------------------------------------------------------
# phase profile
# ---------------------------------------------------------------------------

def _exp(e: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore", under="ignore"):
        return np.exp(np.minimum(e, 700.0))


def _switch(s: np.ndarray) -> np.ndarray:
    out = np.where(s >= 1.0, 1.0, 0.0).astype(float)
    m = (s > 0.0) & (s < 1.0)
    sm = s[m]
    a = _exp(-1.0 / sm)
    b = _exp(-1.0 / (1.0 - sm))
    out[m] = a / (a + b)
    return out


def _switch_d1(s: np.ndarray) -> np.ndarray:
    # all pieces written as exp(combined exponent): no 0*inf at the flat ends
    out = np.zeros_like(s, dtype=float)
    m = (s > 0.0) & (s < 1.0)
    sm = s[m]
    ls, l1 = np.log(sm), np.log(1.0 - sm)
    L = -1.0 / sm - 1.0 / (1.0 - sm)
    d = _exp(-1.0 / sm) + _exp(-1.0 / (1.0 - sm))
    n = _exp(L - 2.0 * ls) + _exp(L - 2.0 * l1)
    out[m] = n / (d * d)
    return out


def _switch_d2(s: np.ndarray) -> np.ndarray:
    out = np.zeros_like(s, dtype=float)
    m = (s > 0.0) & (s < 1.0)
    sm = s[m]
    ls, l1 = np.log(sm), np.log(1.0 - sm)
    L = -1.0 / sm - 1.0 / (1.0 - sm)
    d = _exp(-1.0 / sm) + _exp(-1.0 / (1.0 - sm))
    n = _exp(L - 2.0 * ls) + _exp(L - 2.0 * l1)
    np_ = (1.0 - 2.0 * sm) * (_exp(L - 4.0 * ls) + _exp(L - 4.0 * l1))
    dp = _exp(-1.0 / sm - 2.0 * ls) - _exp(-1.0 / (1.0 - sm) - 2.0 * l1)
    out[m] = (np_ * d - 2.0 * n * dp) / (d * d * d)
    return out


@dataclass(frozen=True)
class PhaseProfile:
    """Smooth switch G with G=0 for s<=0, G=1 for s>=1, and its derivatives.

    ``gamma``, ``beta`` = G', and ``beta_prime`` = G'' are vectorized over
    numpy arrays. ``symmetric`` records G(s) + G(1-s) = 1.
    """

    name: str
    gamma: callable = field(repr=False)
    beta: callable = field(repr=False)
    beta_prime: callable = field(repr=False)
    symmetric: bool = True


SMOOTH_BUMP = PhaseProfile(
    name="smooth_bump",
    gamma=_switch,
    beta=_switch_d1,
    beta_prime=_switch_d2,
    symmetric=True,
)

PROFILES = {"smooth_bump": SMOOTH_BUMP}


# ---------------------------------------------------------------------------
# problem data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProblemSpec:
    """Everything defining the discrete energy on one grid.

    Parameters
    ----------
    grid : Grid
    p : exponent, 1 < p < inf
    eps : phase-transition width (in value units of u), > 0
    q : positive weight; scalar or one value per node
    sigma : positive boundary datum; scalar or one value per boundary node
    profile : PhaseProfile, defaults to the smooth symmetric bump switch
    eps_reg : degeneracy regularizer added to |grad u|^2; ``None`` selects
        1e-10 for p < 2 and 0.0 for p >= 2
    """

    grid: Grid
    p: float
    eps: float
    q: np.ndarray | float = 1.0
    sigma: np.ndarray | float = 1.0
    profile: PhaseProfile = SMOOTH_BUMP
    eps_reg: float | None = None

    def __post_init__(self):
        if not (1.0 < self.p < np.inf):
            raise ValueError(f"p must lie in (1, inf), got {self.p}")
        if not (np.isfinite(self.eps) and self.eps > 0.0):
            raise ValueError(f"eps must be positive, got {self.eps}")
        q = np.asarray(self.q, dtype=float)
        if q.ndim == 0:
            q = np.full(self.grid.shape, float(q))
        elif q.shape != self.grid.shape:
            q = q.reshape(self.grid.shape)
        if q.min() <= 0.0 or not np.all(np.isfinite(q)):
            raise ValueError("weight q must be strictly positive and finite")
        q = q.copy()
        q.flags.writeable = False
        object.__setattr__(self, "q", q)

        nb = self.grid.boundary_indices.size
        s = np.asarray(self.sigma, dtype=float)
        if s.ndim == 0:
            s = np.full(nb, float(s))
        elif s.size != nb:
            raise ValueError(
                f"sigma needs one value per boundary node ({nb}), got {s.size}"
            )
        if s.min() <= 0.0 or not np.all(np.isfinite(s)):
            raise ValueError("boundary datum sigma must be strictly positive")
        s = s.copy()
        s.flags.writeable = False
        object.__setattr__(self, "sigma", s)

        if self.eps_reg is None:
            object.__setattr__(self, "eps_reg", 1e-10 if self.p < 2.0 else 0.0)
        elif self.eps_reg < 0.0:
            raise ValueError("eps_reg must be nonnegative")

    # -- derived accessors -------------------------------------------------

    @property
    def sigma_m(self) -> float:
        return float(self.sigma.min())

    @property
    def sigma_M(self) -> float:
        return float(self.sigma.max())

    def with_sigma(self, sigma) -> "ProblemSpec":
        return replace(self, sigma=sigma)

    def with_eps(self, eps: float) -> "ProblemSpec":
        return replace(self, eps=eps)

    def boundary_values(self) -> np.ndarray:
        """sigma as a full nodal array (zero at interior nodes)."""
        out = np.zeros(self.grid.node_count)
        out[self.grid.boundary_indices] = self.sigma
        return out.reshape(self.grid.shape)

    def apply_boundary(self, values: np.ndarray) -> np.ndarray:
        """Copy of ``values`` with the boundary rows pinned to sigma."""
        out = np.array(values, dtype=float)
        flat = out.ravel()
        flat[self.grid.boundary_indices] = self.sigma
        return flat.reshape(self.grid.shape)

    def boundary_field(self) -> Field:
        """The constant-extension field carrying sigma on the boundary."""
        return Field(self.grid, self.apply_boundary(np.full(self.grid.shape, self.sigma_m)))

    def boundary_matches(self, values: np.ndarray, tol: float = 0.0) -> bool:
        got = np.asarray(values).ravel()[self.grid.boundary_indices]
        return bool(np.all(np.abs(got - self.sigma) <= tol))


# ---------------------------------------------------------------------------
# profile evaluation at problem scale
# ---------------------------------------------------------------------------

def gamma_eps(s, spec: ProblemSpec):
    """Rescaled switch: 0 for s <= 0, 1 for s >= eps."""
    return spec.profile.gamma(np.asarray(s, dtype=float) / spec.eps)


def beta_eps(s, spec: ProblemSpec):
    """Derivative of the rescaled switch; supported on (0, eps)."""
    return spec.profile.beta(np.asarray(s, dtype=float) / spec.eps) / spec.eps


def beta_eps_prime(s, spec: ProblemSpec):
    return spec.profile.beta_prime(np.asarray(s, dtype=float) / spec.eps) / spec.eps**2


# ---------------------------------------------------------------------------
# energy and exact derivatives
# ---------------------------------------------------------------------------

def _cell_gradient_sq(u: np.ndarray, g: Grid):
    """Cell gradient components and |grad|^2, as raw arrays."""
    if g.dimension == 1:
        gx = np.diff(u) / g.spacing[0]
        return (gx,), gx * gx
    hx, hy = g.spacing
    gx = ((u[1:, :-1] - u[:-1, :-1]) + (u[1:, 1:] - u[:-1, 1:])) / (2.0 * hx)
    gy = ((u[:-1, 1:] - u[:-1, :-1]) + (u[1:, 1:] - u[1:, :-1])) / (2.0 * hy)
    return (gx, gy), gx * gx + gy * gy


def _weight(q2: np.ndarray, p: float) -> np.ndarray:
    """(eps_reg + |g|^2)^{(p-2)/2} with the correct 0-gradient limit."""
    with np.errstate(divide="ignore"):
        w = np.where(q2 > 0.0, q2 ** ((p - 2.0) / 2.0), 1.0 if p == 2.0 else 0.0)
    return w


@dataclass(frozen=True)
class EnergyBreakdown:
    """Dirichlet and phase parts of the discrete energy.

    ``total = dirichlet + phase`` uses the bare |grad u|^p Dirichlet term;
    ``regularized_total`` uses (eps_reg + |grad u|^2)^{p/2} and coincides with
    ``total`` when eps_reg = 0. Solvers descend ``regularized_total`` since the
    residual is its exact gradient.
    """

    dirichlet: float
    phase: float
    total: float
    regularized_total: float

    def to_json_dict(self) -> dict:
        return {
            "dirichlet": self.dirichlet,
            "phase": self.phase,
            "total": self.total,
            "regularized_total": self.regularized_total,
        }


def energy(u: Field, spec: ProblemSpec) -> EnergyBreakdown:
    """Discrete energy of a field; the phase term sees cell-averaged u."""
    if u.grid is not spec.grid and u.grid != spec.grid:
        raise ValueError("field and spec use different grids")
    return energy_of_values(u.values, spec)


def energy_of_values(u: np.ndarray, spec: ProblemSpec) -> EnergyBreakdown:
    g = spec.grid
    vol = g.cell_volume
    _, q2raw = _cell_gradient_sq(u, g)
    q2 = spec.eps_reg + q2raw
    dirichlet = vol * float(np.sum(q2raw ** (spec.p / 2.0))) / spec.p
    dir_reg = vol * float(np.sum(q2 ** (spec.p / 2.0))) / spec.p
    ubar = cell_average(g, u)
    qbar = cell_average(g, spec.q)
    phase = vol * float(np.sum(qbar * spec.profile.gamma(ubar / spec.eps)))
    return EnergyBreakdown(
        dirichlet=dirichlet,
        phase=phase,
        total=dirichlet + phase,
        regularized_total=dir_reg + phase,
    )


def energy_gradient(u: np.ndarray, spec: ProblemSpec, include_phase: bool = True) -> np.ndarray:
    """Exact nodal gradient dJ/du of the regularized discrete energy."""
    g = spec.grid
    vol = g.cell_volume
    comps, q2raw = _cell_gradient_sq(u, g)
    w = _weight(spec.eps_reg + q2raw, spec.p)
    dJ = np.zeros_like(np.asarray(u, dtype=float))
    if g.dimension == 1:
        flux = w * comps[0]  # vol/h = 1 in 1D
        dJ[:-1] -= flux * (vol / g.spacing[0])
        dJ[1:] += flux * (vol / g.spacing[0])
    else:
        hx, hy = g.spacing
        ax = vol * w * comps[0] / (2.0 * hx)
        ay = vol * w * comps[1] / (2.0 * hy)
        dJ[:-1, :-1] += -ax - ay
        dJ[1:, :-1] += ax - ay
        dJ[:-1, 1:] += -ax + ay
        dJ[1:, 1:] += ax + ay
    if include_phase:
        ubar = cell_average(g, u)
        qbar = cell_average(g, spec.q)
        share = 0.5 if g.dimension == 1 else 0.25
        c = vol * qbar * spec.profile.beta(ubar / spec.eps) / spec.eps * share
        if g.dimension == 1:
            dJ[:-1] += c
            dJ[1:] += c
        else:
            dJ[:-1, :-1] += c
            dJ[1:, :-1] += c
            dJ[:-1, 1:] += c
            dJ[1:, 1:] += c
    return dJ


def residual(u: Field, spec: ProblemSpec, include_phase: bool = True) -> Field:
    """Euler-Lagrange residual: energy gradient per node volume, zero on the
    boundary rows. Uses the eps_reg-regularized gradient when eps_reg > 0."""
    vals = residual_values(u.values, spec, include_phase)
    return Field(u.grid, vals)


def residual_values(u: np.ndarray, spec: ProblemSpec, include_phase: bool = True) -> np.ndarray:
    g = spec.grid
    r = energy_gradient(u, spec, include_phase) / g.node_volume
    flat = r.ravel()
    flat[g.boundary_indices] = 0.0
    return flat.reshape(g.shape)


def residual_sup(u: np.ndarray, spec: ProblemSpec, include_phase: bool = True) -> float:
    return float(np.max(np.abs(residual_values(u, spec, include_phase))))


def shifted_energy(v: Field, u0: Field, spec: ProblemSpec) -> float:
    """Energy gap J(u0 + v) - J(u0) for a boundary-vanishing increment v."""
    vb = np.asarray(v.values).ravel()[spec.grid.boundary_indices]
    scale = max(1.0, float(np.max(np.abs(v.values))))
    if np.max(np.abs(vb), initial=0.0) > 1e-12 * scale:
        raise ValueError("shifted_energy requires v = 0 on the boundary")
    return (
        energy_of_values(u0.values + v.values, spec).total
        - energy_of_values(u0.values, spec).total
    )


def hessian_matrix(
    u: np.ndarray,
    spec: ProblemSpec,
    include_phase: bool = True,
    picard: bool = False,
) -> sp.csr_matrix:
    """Exact second derivative d2J/du2 of the regularized energy (sparse,
    over all nodes; callers restrict to interior unknowns). With
    ``picard=True`` the gradient-direction term is dropped, leaving the
    frozen-coefficient diffusion operator of a Picard linearization."""
    g = spec.grid
    p = spec.p
    vol = g.cell_volume
    comps, q2raw = _cell_gradient_sq(u, g)
    q2 = spec.eps_reg + q2raw
    w = _weight(q2, p)
    if picard:
        wp = np.zeros_like(w)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            wp = np.where(q2 > 0.0, (p - 2.0) * q2 ** ((p - 4.0) / 2.0), 0.0)
    if include_phase:
        ubar = cell_average(g, u)
        qbar = cell_average(g, spec.q)
        share = 0.5 if g.dimension == 1 else 0.25
        cpp = vol * qbar * spec.profile.beta_prime(ubar / spec.eps) / spec.eps**2 * share**2
    else:
        cpp = 0.0

    if g.dimension == 1:
        n = g.nodes[0]
        h = g.spacing[0]
        k = (w + wp * comps[0] * comps[0]) * vol / (h * h)
        main = np.zeros(n)
        off = np.zeros(n - 1)
        main[:-1] += k
        main[1:] += k
        off[:] = -k
        if include_phase:
            main[:-1] += cpp
            main[1:] += cpp
            off += cpp
        return sp.diags([off, main, off], [-1, 0, 1], format="csr")

    nx, ny = g.nodes
    hx, hy = g.spacing
    gx, gy = comps
    idx = np.arange(nx * ny).reshape(nx, ny)
    corners = ((0, 0), (1, 0), (0, 1), (1, 1))
    coefx = {(0, 0): -1.0, (1, 0): 1.0, (0, 1): -1.0, (1, 1): 1.0}
    coefy = {(0, 0): -1.0, (1, 0): -1.0, (0, 1): 1.0, (1, 1): 1.0}
    ii, jj = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), indexing="ij")
    rows, cols, vals = [], [], []
    for A in corners:
        gax, gay = coefx[A] / (2 * hx), coefy[A] / (2 * hy)
        ida = idx[ii + A[0], jj + A[1]].ravel()
        proj_a = gx * gax + gy * gay
        for B in corners:
            gbx, gby = coefx[B] / (2 * hx), coefy[B] / (2 * hy)
            idb = idx[ii + B[0], jj + B[1]].ravel()
            proj_b = gx * gbx + gy * gby
            block = vol * (w * (gax * gbx + gay * gby) + wp * proj_a * proj_b)
            if include_phase:
                block = block + cpp
            rows.append(ida)
            cols.append(idb)
            vals.append(np.asarray(block).ravel())
    H = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nx * ny, nx * ny),
    )
    return H.tocsr()


def dirichlet_seminorm(v: np.ndarray, spec: ProblemSpec) -> float:
    """Discrete W^{1,p} seminorm (integral of |grad v|^p, then 1/p power)."""
    _, q2raw = _cell_gradient_sq(v, spec.grid)
    return float(
        (spec.grid.cell_volume * np.sum(q2raw ** (spec.p / 2.0))) ** (1.0 / spec.p)
    )


# ---------------------------------------------------------------------------
# vector inequality oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InequalityReport:
    """LHS - RHS residuals of the four p-Laplacian vector inequalities.

    Keys present depend on p: the monotonicity bounds ``mono_subquadratic``
    (valid 1 < p <= 2) and ``mono_superquadratic`` (p >= 2), and the Taylor
    lower bounds ``taylor_superquadratic`` (p >= 2, with the conservative
    constant 2^(2-p) / (p 2^p)) and ``taylor_subquadratic`` (1 < p <= 2, with
    constant p(p-1) and a nested-quadrature double integral). Each entry is
    an array of residuals, nonnegative up to round-off when the inequality
    holds. ``taylor_super_best`` reports the empirical best constant
    min (LHS - affine part) / |b-a|^p over the batch.
    """

    p: float
    residuals: dict
    taylor_super_best: float | None = None

    def min_residual(self) -> float:
        return float(min(np.min(v) for v in self.residuals.values()))


def _phi_p(v: np.ndarray, nv: np.ndarray, p: float) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(nv > 0.0, nv ** (p - 2.0), 0.0)
    return v * w[:, None]


def _nested_double_integral(a: np.ndarray, b: np.ndarray, p: float, n_gl: int = 16) -> np.ndarray:
    """D = int_0^1 int_0^t |(1-s) a + s b|^{p-2} ds dt by nested Gauss-Legendre.

    Both integrals are split at the segment's closest approach to the origin,
    so the quadrature never brackets the (integrable) singularity; the error
    then underestimates D, keeping the inequality residual one-sided.
    """
    N = a.shape[0]
    e = b - a
    ne2 = np.einsum("ij,ij->i", e, e)
    xg, wg = np.polynomial.legendre.leggauss(n_gl)
    xg = 0.5 * (xg + 1.0)
    wg = 0.5 * wg
    with np.errstate(divide="ignore", invalid="ignore"):
        sstar = np.where(ne2 > 0.0, -np.einsum("ij,ij->i", a, e) / np.where(ne2 > 0, ne2, 1.0), 0.0)
    sstar = np.clip(sstar, 0.0, 1.0)

    def g_eval(svals: np.ndarray) -> np.ndarray:
        gam = a[:, None, :] + svals[..., None] * e[:, None, :]
        ng = np.sqrt(np.einsum("ikj,ikj->ik", gam, gam))
        with np.errstate(divide="ignore"):
            f = np.where(ng > 0.0, ng ** (p - 2.0), np.inf)
        return np.where(np.isfinite(f), f, 0.0)  # measure-zero singular hits

    def inner(tv: np.ndarray) -> np.ndarray:
        c = np.minimum(sstar[:, None], tv)
        s1 = (c[..., None] * xg).reshape(N, -1)
        s2 = (c[..., None] + (tv - c)[..., None] * xg).reshape(N, -1)
        f1 = g_eval(s1).reshape(N, tv.shape[1], n_gl)
        f2 = g_eval(s2).reshape(N, tv.shape[1], n_gl)
        return c * np.sum(wg * f1, axis=2) + (tv - c) * np.sum(wg * f2, axis=2)

    t1 = sstar[:, None] * xg[None, :]
    t2 = sstar[:, None] + (1.0 - sstar)[:, None] * xg[None, :]
    return sstar * np.sum(wg * inner(t1), axis=1) + (1.0 - sstar) * np.sum(wg * inner(t2), axis=1)


def inequality_oracle(a, b, p: float, n_gl: int = 16) -> InequalityReport:
    """Evaluate the four elementary p-Laplacian inequalities on vector pairs.

    ``a`` and ``b`` are arrays of shape (N, d) or single vectors, 1 <= d <= 4.
    Returns LHS - RHS per pair for each inequality applicable at this ``p``.
    """
    if not (1.0 < p < np.inf):
        raise ValueError(f"p must lie in (1, inf), got {p}")
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape != b.shape:
        raise ValueError("a and b must have matching shapes")
    if not (1 <= a.shape[1] <= 4):
        raise ValueError("vector dimension must be between 1 and 4")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("a and b must be finite")

    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    e = b - a
    ne = np.linalg.norm(e, axis=1)
    mono = np.einsum("ij,ij->i", _phi_p(b, nb, p) - _phi_p(a, na, p), e)
    affine = na**p + p * np.einsum("ij,ij->i", _phi_p(a, na, p), e)

    out = {}
    best = None
    if p <= 2.0:
        out["mono_subquadratic"] = mono - (p - 1.0) * ne**2 * (1.0 + na**2 + nb**2) ** ((p - 2.0) / 2.0)
        D = _nested_double_integral(a, b, p, n_gl)
        out["taylor_subquadratic"] = nb**p - (affine + p * (p - 1.0) * ne**2 * D)
    if p >= 2.0:
        out["mono_superquadratic"] = mono - 2.0 ** (2.0 - p) * ne**p
        c_cons = 2.0 ** (2.0 - p) / (p * 2.0**p)
        gap = nb**p - affine
        out["taylor_superquadratic"] = gap - c_cons * ne**p
        pos = ne > 0
        if np.any(pos):
            best = float(np.min(gap[pos] / ne[pos] ** p))
    return InequalityReport(p=p, residuals=out, taylor_super_best=best)
