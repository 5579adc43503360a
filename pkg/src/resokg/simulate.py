"""Time integration of the quasilinear Klein-Gordon system and of Euler-Maxwell.

Both simulators advance a vector of half-spectrum transforms with the Lawson
(integrating-factor) RK4 scheme: the linear flow is applied exactly and only
the quadratic terms are integrated numerically.  For Klein-Gordon the exact
flow is the rotation of (u, du/dt) that corresponds to multiplying the normal
form variable U = du/dt - i Lambda u by exp(-i t Lambda).  For Euler-Maxwell it
is the closed-form exponential of the 10x10 linear symbol, which splits into a
longitudinal and a transverse block with frequencies Lambda_1 and Lambda_2.

The Euler-Maxwell momentum equation is evaluated as
    dv/dt = -grad(|v|^2/2) - T grad n - E - v x (B - curl v),
which equals the usual form pointwise and makes B - curl v an exactly
propagated quantity of the discrete system.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy import integrate, stats

from .dyadic import _smoothstep, symbol_on_grid
from .fields import (
    MAX_SOBOLEV_ORDER,
    Grid,
    SpectralField,
    _safe_inverse,
    fft,
    ifft,
    irfft,
    rfft,
    sobolev_norm,
)
from .params import ParameterError, ParameterTable, SignedIndex

BETA = 0.01
CFL_MAX = 2.0
GROWTH_LIMIT = 10.0


class IntegrationError(RuntimeError):
    pass


class DomainError(ValueError):
    pass


class MultiplierError(ValueError):
    pass


class InsufficientSpanError(ValueError):
    pass


# -- spectral helpers -------------------------------------------------------------

def multi_indices(order: int) -> list[tuple[int, int, int]]:
    """All rho in N^3 with |rho| <= order."""
    return [r for r in itertools.product(range(order + 1), repeat=3) if sum(r) <= order]


def _deriv_symbol(grid: Grid, rho, half: bool = True):
    k = grid.kvec(half)
    out = 1.0 + 0j
    for kk, p in zip(k, rho):
        if p:
            out = out * (1j * kk) ** p
    return out


def _derivative_weight(grid: Grid, order: int, half: bool = True) -> np.ndarray:
    """sum over |rho| <= order of xi^(2 rho)."""
    kx, ky, kz = (kk * kk for kk in grid.kvec(half))
    w = np.zeros(grid.kmag(half).shape)
    for a, b, c in multi_indices(order):
        w = w + kx**a * ky**b * kz**c
    return w


def _half_weights(grid: Grid) -> np.ndarray:
    """Multiplicity of each stored rfft column in the full spectrum."""
    m = np.full(grid.n // 2 + 1, 2.0)
    m[0] = m[-1] = 1.0
    return m[None, None, :]


def _half_energy(grid: Grid, hat, weight=1.0) -> float:
    """Box integral of sum |f|^2 for real fields stored as rfft data."""
    return float(grid.cell_volume * np.sum(_half_weights(grid) * weight * np.abs(hat) ** 2))


def _irfft(grid, h):
    return irfft(h, grid.n)


def _dealiased(grid, a):
    return rfft(a) * grid.dealias_half


def _cross(a, b):
    return np.stack([a[1] * b[2] - a[2] * b[1],
                     a[2] * b[0] - a[0] * b[2],
                     a[0] * b[1] - a[1] * b[0]])


def _grad_linf(grid: Grid, hat) -> float:
    """sup_x |grad f| (Euclidean over all components) for rfft data."""
    sq = 0.0
    for kk in grid.kvec(True):
        p = _irfft(grid, 1j * kk * hat)
        sq = sq + (p * p).reshape((-1,) + grid.shape).sum(axis=0)
    return float(np.sqrt(sq).max())


def _vec_linf(a) -> float:
    if a.ndim == 3:
        return float(np.abs(a).max())
    return float(np.sqrt(np.sum(a * a, axis=0)).max())


# -- integrator -------------------------------------------------------------------

def _lawson_rk4(x, h, prop, nonlin):
    """One Lawson RK4 step; prop(y, tau) = exp(tau L) y, nonlin(y) the quadratic part."""
    k1 = nonlin(x)
    xh = prop(x, h / 2)
    k1h = prop(k1, h / 2)
    k2 = nonlin(xh + (h / 2) * k1h)
    k3 = nonlin(xh + (h / 2) * k2)
    # exp(hL) x + h exp(hL/2) k3, using linearity to share propagations
    k4 = nonlin(prop(xh + h * k3, h / 2))
    return prop(xh + (h / 6) * k1h + (h / 3) * (k2 + k3), h / 2) + (h / 6) * k4


def _check_growth(x_old, x_new, t, step):
    a = float(np.linalg.norm(x_old))
    b = float(np.linalg.norm(x_new))
    if not math.isfinite(b) or (a > 0 and b > GROWTH_LIMIT * a):
        raise IntegrationError(
            f"unstable step {step} at t={t:.6g}: state norm {a:.6g} -> {b:.6g}")


def _step_count(t_end: float, dt: float) -> tuple[int, float]:
    if t_end < 0:
        raise ValueError("t_end must be nonnegative")
    if t_end == 0:
        return 0, dt
    steps = max(1, math.ceil(t_end / dt - 1e-12))
    return steps, t_end / steps


def default_dt(grid: Grid, c_max: float) -> float:
    return 0.25 * grid.dx / c_max


def _check_dt(grid: Grid, dt: float, c_max: float):
    if not dt > 0:
        raise ValueError("dt must be positive")
    if dt > CFL_MAX * grid.dx / c_max * (1 + 1e-12):
        raise ValueError(f"dt={dt} exceeds the stability bound {CFL_MAX} dx / c_max = "
                         f"{CFL_MAX * grid.dx / c_max}")


# -- run reports --------------------------------------------------------------------

@dataclass
class RunReport:
    """Time series of diagnostics; column 't' is first and nondecreasing."""

    columns: list[str]
    rows: list[list[float]] = field(default_factory=list)
    final: object = None
    meta: dict = field(default_factory=dict)

    def append(self, values: dict):
        if self.rows and values["t"] < self.rows[-1][0]:
            raise ValueError("time column must be nondecreasing")
        self.rows.append([float(values.get(c, float("nan"))) for c in self.columns])

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows])

    @property
    def t(self) -> np.ndarray:
        return self.column("t")

    def to_csv(self, path, comment: str | None = None):
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh)
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow(["%.17g" % v for v in r])

    @classmethod
    def from_csv(cls, path) -> "RunReport":
        with open(path, newline="") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        reader = csv.reader(lines)
        header = next(reader)
        if not header or header[0] != "t":
            raise ValueError(f"{path}: first column must be 't'")
        rep = cls(header)
        for row in reader:
            if row:
                rep.append(dict(zip(header, map(float, row))))
        return rep


# -- Klein-Gordon system --------------------------------------------------------------

@dataclass
class KGSystemSpec:
    """Quadratic quasilinear nonlinearity.

    g[j, k, l, mu, nu, sigma] multiplies d_l u_sigma (l = 0 is d/dt),
    h[j, k, mu, nu, sigma] multiplies u_sigma, and Q[mu, a, b] is a quadratic
    form in the jet J = (u, du/dt, d1 u, d2 u, d3 u) flattened as J[5 * sigma + slot].
    """

    table: ParameterTable
    g: np.ndarray
    h: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        d = self.table.d
        self.g = np.asarray(self.g, dtype=float)
        self.h = np.asarray(self.h, dtype=float)
        self.Q = np.asarray(self.Q, dtype=float)
        if self.g.shape != (3, 3, 4, d, d, d):
            raise ParameterError(f"g must have shape (3,3,4,{d},{d},{d})")
        if self.h.shape != (3, 3, d, d, d):
            raise ParameterError(f"h must have shape (3,3,{d},{d},{d})")
        if self.Q.shape != (d, 5 * d, 5 * d):
            raise ParameterError(f"Q must have shape ({d},{5 * d},{5 * d})")
        tol = 1e-12 * max(1.0, np.abs(self.g).max(initial=0), np.abs(self.h).max(initial=0))
        for arr, ax in ((self.g, (0, 1)), (self.g, (3, 4)), (self.h, (0, 1)), (self.h, (2, 3))):
            if np.abs(arr - np.swapaxes(arr, *ax)).max(initial=0) > tol:
                raise ParameterError(f"coefficients not symmetric in axes {ax}")
        self.Q = 0.5 * (self.Q + np.swapaxes(self.Q, 1, 2))

    @classmethod
    def zeros(cls, table: ParameterTable) -> "KGSystemSpec":
        d = table.d
        return cls(table, np.zeros((3, 3, 4, d, d, d)), np.zeros((3, 3, d, d, d)),
                   np.zeros((d, 5 * d, 5 * d)))

    @classmethod
    def symmetrized(cls, table, g, h, Q) -> "KGSystemSpec":
        g = np.asarray(g, dtype=float)
        h = np.asarray(h, dtype=float)
        g = 0.5 * (g + np.swapaxes(g, 0, 1))
        g = 0.5 * (g + np.swapaxes(g, 3, 4))
        h = 0.5 * (h + np.swapaxes(h, 0, 1))
        h = 0.5 * (h + np.swapaxes(h, 2, 3))
        return cls(table, g, h, Q)

    @classmethod
    def random(cls, table, rng: np.random.Generator, scale: float = 1.0,
               quasilinear: bool = True, semilinear: bool = True) -> "KGSystemSpec":
        d = table.d
        g = rng.uniform(-scale, scale, (3, 3, 4, d, d, d)) if quasilinear else np.zeros((3, 3, 4, d, d, d))
        h = rng.uniform(-scale, scale, (3, 3, d, d, d)) if quasilinear else np.zeros((3, 3, d, d, d))
        Q = rng.uniform(-scale, scale, (d, 5 * d, 5 * d)) if semilinear else np.zeros((d, 5 * d, 5 * d))
        return cls.symmetrized(table, g, h, Q)

    @property
    def is_linear(self) -> bool:
        return not (self.g.any() or self.h.any() or self.Q.any())


@dataclass
class KGState:
    grid: Grid
    t: float
    u: np.ndarray      # (d, n, n, n) real
    udot: np.ndarray   # (d, n, n, n) real

    def field(self, sigma: int) -> SpectralField:
        return SpectralField(self.grid, self.u[sigma - 1])


def _kg_pack(state: KGState):
    return np.stack([rfft(state.u), rfft(state.udot)])


def _kg_unpack(grid, t, x) -> KGState:
    return KGState(grid, t, _irfft(grid, x[0]), _irfft(grid, x[1]))


def _kg_lams(table: ParameterTable, grid: Grid, half: bool = True) -> np.ndarray:
    k2 = grid.kmag(half) ** 2
    return np.stack([np.sqrt(b * b + c * c * k2) for b, c in zip(table.b, table.c)])


class _KGPropagator:
    def __init__(self, table, grid):
        self.lam = _kg_lams(table, grid)
        self._cache = {}

    def __call__(self, x, tau):
        key = float(tau)
        if key not in self._cache:
            self._cache[key] = (np.cos(self.lam * tau), np.sin(self.lam * tau))
        cs, sn = self._cache[key]
        u, w = x[0], x[1]
        return np.stack([cs * u + sn / self.lam * w, -self.lam * sn * u + cs * w])


def _kg_jets(grid: Grid, uh, wh):
    """Physical u, (du/dt, d1 u, d2 u, d3 u) and second spatial derivatives."""
    k = grid.kvec(True)
    u = _irfft(grid, uh)
    du = np.stack([_irfft(grid, wh)] + [_irfft(grid, 1j * kk * uh) for kk in k])
    ddu = np.empty((3, 3) + uh.shape[:-3] + grid.shape)
    for j in range(3):
        for m in range(j, 3):
            ddu[j, m] = _irfft(grid, -k[j] * k[m] * uh)
            ddu[m, j] = ddu[j, m]
    return u, du, ddu


def _kg_G(spec: KGSystemSpec, u, du):
    """G[j, k, mu, nu] as physical fields."""
    return (np.einsum("jklmns,ls...->jkmn...", spec.g, du, optimize=True)
            + np.einsum("jkmns,s...->jkmn...", spec.h, u, optimize=True))


def _kg_F_phys(spec: KGSystemSpec, u, du, ddu):
    G = _kg_G(spec, u, du)
    F = np.einsum("jkmn...,jkn...->m...", G, ddu, optimize=True)
    if spec.Q.any():
        J = np.concatenate([u[None], du], axis=0)        # (5, d, ...)
        J = np.swapaxes(J, 0, 1).reshape((-1,) + u.shape[1:])
        F = F + np.einsum("mab,a...,b...->m...", spec.Q, J, J, optimize=True)
    return F


def _kg_nonlin(spec: KGSystemSpec, grid: Grid):
    def nonlin(x):
        out = np.zeros_like(x)
        u, du, ddu = _kg_jets(grid, x[0], x[1])
        out[1] = _dealiased(grid, _kg_F_phys(spec, u, du, ddu))
        return out
    return nonlin


def kg_rhs(spec: KGSystemSpec, state: KGState) -> np.ndarray:
    """Nonlinearity F (physical, dealiased) for every species."""
    if spec.is_linear:
        return np.zeros_like(state.u)
    u, du, ddu = _kg_jets(state.grid, rfft(state.u), rfft(state.udot))
    return _irfft(state.grid, _dealiased(state.grid, _kg_F_phys(spec, u, du, ddu)))


def kg_time_derivative(spec: KGSystemSpec, state: KGState):
    """(du/dt, d2u/dt2) from the full equation."""
    lam2 = _kg_lams(spec.table, state.grid) ** 2
    acc = _irfft(state.grid, -lam2 * rfft(state.u)) + kg_rhs(spec, state)
    return state.udot.copy(), acc


def kg_step(spec: KGSystemSpec, state: KGState, dt: float, linear: bool = False) -> KGState:
    grid = state.grid
    _check_dt(grid, dt, max(spec.table.c))
    prop = _KGPropagator(spec.table, grid)
    x = _kg_pack(state)
    if linear or spec.is_linear:
        y = prop(x, dt)
    else:
        y = _lawson_rk4(x, dt, prop, _kg_nonlin(spec, grid))
    _check_growth(x, y, state.t, 0)
    return _kg_unpack(grid, state.t + dt, y)


def kg_energy(spec: KGSystemSpec, state: KGState, N: int) -> float:
    """Higher order energy with the quasilinear correction (sum over |rho| <= N - 1)."""
    if N < 1 or N > MAX_SOBOLEV_ORDER:
        raise ValueError(f"energy order must lie in [1, {MAX_SOBOLEV_ORDER}]")
    grid = state.grid
    uh, wh = rfft(state.u), rfft(state.udot)
    W = _derivative_weight(grid, N - 1)
    k2 = grid.kmag(True) ** 2
    total = 0.0
    for s, (b, c) in enumerate(zip(spec.table.b, spec.table.c)):
        total += _half_energy(grid, wh[s], W) + _half_energy(grid, uh[s], W * (b * b + c * c * k2))
    if spec.g.any() or spec.h.any():
        k = grid.kvec(True)
        u = _irfft(grid, uh)
        du = np.stack([_irfft(grid, wh)] + [_irfft(grid, 1j * kk * uh) for kk in k])
        G = _kg_G(spec, u, du)
        for rho in multi_indices(N - 1):
            D = _deriv_symbol(grid, rho)
            a = np.stack([_irfft(grid, 1j * kk * D * uh) for kk in k])   # (j, mu, ...)
            total += grid.cell_volume * float(np.einsum("jkmn...,jm...,kn...->", G, a, a, optimize=True))
    return total


def kg_normal_form(spec: KGSystemSpec, state: KGState) -> np.ndarray:
    """U_sigma = du_sigma/dt - i Lambda_sigma u_sigma (complex physical fields)."""
    lam = _kg_lams(spec.table, state.grid)
    lam_u = _irfft(state.grid, lam * rfft(state.u))
    return state.udot - 1j * lam_u


def kg_normal_form_inverse(spec: KGSystemSpec, U: np.ndarray, grid: Grid, t: float = 0.0) -> KGState:
    """u = -Lambda^{-1} Im U, du/dt = Re U."""
    lam = _kg_lams(spec.table, grid)
    u = _irfft(grid, -rfft(np.ascontiguousarray(U.imag)) / lam)
    return KGState(grid, t, u, np.ascontiguousarray(U.real))


def kg_sup_norms(state: KGState, order: int = 2, order_dot: int = 1) -> float:
    """sum over |rho| <= order of |D u|_inf plus sum over |rho| <= order_dot of |D du/dt|_inf."""
    grid = state.grid
    uh, wh = rfft(state.u), rfft(state.udot)
    total = 0.0
    for rho in multi_indices(order):
        total += float(np.abs(_irfft(grid, _deriv_symbol(grid, rho) * uh)).max())
    for rho in multi_indices(order_dot):
        total += float(np.abs(_irfft(grid, _deriv_symbol(grid, rho) * wh)).max())
    return total


def kg_weighted_sup(state: KGState) -> float:
    """(1+t)^(1+beta) (sup_{|rho|<=4} |D u|_inf + sup_{|rho|<=3} |D du/dt|_inf)."""
    grid = state.grid
    uh, wh = rfft(state.u), rfft(state.udot)
    su = max(float(np.abs(_irfft(grid, _deriv_symbol(grid, r) * uh)).max()) for r in multi_indices(4))
    sw = max(float(np.abs(_irfft(grid, _deriv_symbol(grid, r) * wh)).max()) for r in multi_indices(3))
    return (1 + state.t) ** (1 + BETA) * (su + sw)


KG_COLUMNS = ["t", "E_N", "H^N", "Zprime", "constraint1", "constraint2", "wsup", "linf"]


def _kg_record(spec, state, N, diagnostics):
    row = {"t": state.t, "constraint1": 0.0, "constraint2": 0.0,
           "linf": float(np.abs(state.u).max())}
    if "energy" in diagnostics:
        row["E_N"] = kg_energy(spec, state, N)
    if "sobolev" in diagnostics:
        g = state.grid
        row["H^N"] = sum(sobolev_norm(SpectralField(g, state.u[s]), N)
                         + sobolev_norm(SpectralField(g, state.udot[s]), N - 1)
                         for s in range(spec.table.d))
    if "zprime" in diagnostics:
        row["Zprime"] = kg_sup_norms(state)
    if "wsup" in diagnostics:
        row["wsup"] = kg_weighted_sup(state)
    return row


ALL_DIAGNOSTICS = ("energy", "sobolev", "zprime", "constraints", "wsup")


def kg_run(spec: KGSystemSpec, initial: KGState, t_end: float, dt: float | None = None,
           N: int = 3, record_every: int = 1, diagnostics: Sequence[str] = ALL_DIAGNOSTICS,
           linear: bool = False, callback: Callable | None = None) -> RunReport:
    """Integrate to t_end; the final state is attached as report.final."""
    grid = initial.grid
    c_max = max(spec.table.c)
    steps, dt = _step_count(t_end, dt or default_dt(grid, c_max))
    _check_dt(grid, dt, c_max)
    prop = _KGPropagator(spec.table, grid)
    nonlin = None if (linear or spec.is_linear) else _kg_nonlin(spec, grid)
    report = RunReport(list(KG_COLUMNS), meta={"dt": dt, "steps": steps, "N": N})
    x = _kg_pack(initial)
    t0 = initial.t
    state = initial
    report.append(_kg_record(spec, state, N, diagnostics))
    if callback:
        callback(state)
    for i in range(1, steps + 1):
        y = prop(x, dt) if nonlin is None else _lawson_rk4(x, dt, prop, nonlin)
        _check_growth(x, y, t0 + (i - 1) * dt, i)
        x = y
        if i % record_every == 0 or i == steps or callback:
            state = _kg_unpack(grid, t0 + i * dt, x)
            if i % record_every == 0 or i == steps:
                report.append(_kg_record(spec, state, N, diagnostics))
            if callback:
                callback(state)
    report.final = _kg_unpack(grid, t0 + steps * dt, x) if steps else initial
    return report


def kg_initial_data(table: ParameterTable, grid: Grid, rng: np.random.Generator | None = None,
                    amplitude: float = 1e-3, kind: str = "bump", width: float = 2.0,
                    kmin: float = 0.2, kmax: float = 2.0) -> KGState:
    """Localized bumps (with species-dependent offsets) or annulus noise, at rest."""
    from .fields import annulus_noise, gaussian_bump

    d = table.d
    if kind == "bump":
        u = np.stack([gaussian_bump(grid, width * (1 + 0.25 * s)).values for s in range(d)])
    elif kind == "noise":
        rng = rng or np.random.default_rng(0)
        u = np.stack([annulus_noise(grid, rng, kmin, kmax).values for _ in range(d)])
        w = np.stack([annulus_noise(grid, rng, kmin, kmax).values for _ in range(d)])
        return KGState(grid, 0.0, amplitude * u, amplitude * w)
    else:
        raise ValueError(f"unknown initial data kind {kind!r}")
    u = np.stack([irfft(rfft(a) * grid.dealias_half, grid.n) for a in u])
    return KGState(grid, 0.0, amplitude * u / np.abs(u).max(), np.zeros_like(u))


# -- Euler-Maxwell --------------------------------------------------------------------

@dataclass
class EMState:
    grid: Grid
    t: float
    n: np.ndarray   # (n, n, n)
    v: np.ndarray   # (3, n, n, n)
    E: np.ndarray
    B: np.ndarray
    T: float = 1.0
    c: float = 1.0

    def __post_init__(self):
        if not (self.T > 0 and self.c > 0):
            raise ParameterError("T and c must be positive")

    def replace(self, **kw) -> "EMState":
        d = dict(grid=self.grid, t=self.t, n=self.n, v=self.v, E=self.E, B=self.B, T=self.T, c=self.c)
        d.update(kw)
        return EMState(**d)


def em_table(T: float, c: float) -> ParameterTable:
    """Dispersion pair (Lambda_1, Lambda_2) = (sqrt(1 + T xi^2), sqrt(1 + c^2 xi^2))."""
    A = max(10.0, math.sqrt(T), 1 / math.sqrt(T), c, 1 / c)
    return ParameterTable((1.0, 1.0), (math.sqrt(T), c), A=A)


def em_zero_state(grid: Grid, T: float = 1.0, c: float = 1.0) -> EMState:
    z = np.zeros(grid.shape)
    v = np.zeros((3,) + grid.shape)
    return EMState(grid, 0.0, z, v, v.copy(), v.copy(), T, c)


def em_nondimensionalize(e: float, P_e: float, m_e: float, c_light: float, n0: float,
                         n_e, v_e, E_phys, B_phys, L: float, t: float = 0.0):
    """Physical fields on a box of side L -> (EMState, scales) in plasma units.

    n_e = n0 (1 + n), v_e = v, E' = Z E, B' = c Z B, lengths and times scale by lambda.
    """
    for name, val in (("e", e), ("P_e", P_e), ("m_e", m_e), ("c_light", c_light), ("n0", n0), ("L", L)):
        if not val > 0:
            raise ParameterError(f"{name} must be positive, got {val}")
    lam = math.sqrt(4 * math.pi * e * e * n0 / m_e)
    Z = lam * m_e / e
    T = P_e * n0 / m_e
    n_e = np.asarray(n_e, dtype=float)
    grid = Grid(n_e.shape[-1], lam * L)
    state = EMState(grid, lam * t, n_e / n0 - 1.0, np.asarray(v_e, dtype=float),
                    np.asarray(E_phys, dtype=float) / Z, np.asarray(B_phys, dtype=float) / (c_light * Z),
                    T, c_light)
    return state, {"lambda": lam, "Z": Z, "T": T, "c": c_light, "n0": n0}


def em_dimensionalize(state: EMState, scales: dict):
    """Inverse of em_nondimensionalize: (n_e, v_e, E', B', L, t)."""
    lam, Z, n0, c = scales["lambda"], scales["Z"], scales["n0"], scales["c"]
    return (n0 * (1.0 + state.n), state.v.copy(), Z * state.E, c * Z * state.B,
            state.grid.L / lam, state.t / lam)


def _em_pack(s: EMState):
    return np.concatenate([rfft(s.n)[None], rfft(s.v), rfft(s.E), rfft(s.B)])


def _em_unpack(grid, x, t, T, c) -> EMState:
    p = _irfft(grid, x)
    return EMState(grid, t, p[0], p[1:4], p[4:7], p[7:10], T, c)


def _kdot(k, a):
    return k[0] * a[0] + k[1] * a[1] + k[2] * a[2]


def _kcross(k, a):
    return np.stack([k[1] * a[2] - k[2] * a[1], k[2] * a[0] - k[0] * a[2], k[0] * a[1] - k[1] * a[0]])


def _em_linear(grid, T, c):
    """The linear symbol M acting on packed rfft data."""
    k = grid.kvec(True)

    def M(x):
        n, v, E, B = x[0], x[1:4], x[4:7], x[7:10]
        out = np.empty_like(x)
        out[0] = -1j * _kdot(k, v)
        out[1:4] = -1j * T * np.stack([kk * n for kk in k]) - E
        out[4:7] = 1j * c * c * _kcross(k, B) + v
        out[7:10] = -1j * _kcross(k, E)
        return out
    return M


class _EMPropagator:
    """Exact linear flow.

    With a = khat.v, e = khat.E the longitudinal block acts on (n, a, e); with
    b = i khat x B the transverse block acts on (v_T, E_T, b).  Each 3x3 block
    A satisfies A^3 = -Lambda^2 A, so exp(tau A) = 1 + s A + (1 - cos)/Lambda^2 A^2.
    """

    def __init__(self, grid, T, c):
        k = grid.kvec(True)
        kappa = grid.kmag(True)
        kinv = _safe_inverse(kappa)
        self.khat = [kk * kinv for kk in k]
        z, one = np.zeros_like(kappa), np.ones_like(kappa)
        self.blocks = (
            (np.sqrt(1 + T * kappa**2), np.array([[z, -1j * kappa, z], [-1j * T * kappa, z, -one], [z, one, z]])),
            (np.sqrt(1 + c * c * kappa**2), np.array([[z, -one, z], [one, z, c * c * kappa], [z, -kappa, z]])),
        )
        self._cache = {}

    def _mats(self, tau):
        key = float(tau)
        if key not in self._cache:
            out = []
            for lam, A in self.blocks:
                A2 = np.einsum("ij...,jk...->ik...", A, A)
                s = np.sin(lam * tau) / lam
                cc = (1 - np.cos(lam * tau)) / lam**2
                out.append(np.eye(3)[:, :, None, None, None] + s * A + cc * A2)
            self._cache[key] = out
        return self._cache[key]

    def __call__(self, x, tau):
        mL, mT = self._mats(tau)
        kh = self.khat
        n, v, E, B = x[0], x[1:4], x[4:7], x[7:10]
        a, e = _kdot(kh, v), _kdot(kh, E)
        vT = v - np.stack([h * a for h in kh])
        ET = E - np.stack([h * e for h in kh])
        b = 1j * _kcross(kh, B)
        out = np.empty_like(x)
        out[0] = mL[0, 0] * n + mL[0, 1] * a + mL[0, 2] * e
        a2 = mL[1, 0] * n + mL[1, 1] * a + mL[1, 2] * e
        e2 = mL[2, 0] * n + mL[2, 1] * a + mL[2, 2] * e
        out[1:4] = mT[0, 0] * vT + mT[0, 1] * ET + mT[0, 2] * b + np.stack([h * a2 for h in kh])
        out[4:7] = mT[1, 0] * vT + mT[1, 1] * ET + mT[1, 2] * b + np.stack([h * e2 for h in kh])
        b2 = mT[2, 0] * vT + mT[2, 1] * ET + mT[2, 2] * b
        out[7:10] = B + 1j * _kcross(kh, b2 - b)
        return out


def _em_nonlin(grid: Grid):
    k = grid.kvec(True)

    def nonlin(x):
        nh, vh, Bh = x[0], x[1:4], x[7:10]
        n = _irfft(grid, nh)
        v = _irfft(grid, vh)
        w = _irfft(grid, Bh - 1j * _kcross(k, vh))
        half_v2 = _dealiased(grid, 0.5 * np.sum(v * v, axis=0))
        vxw = _dealiased(grid, _cross(v, w))
        nv = _dealiased(grid, n * v)
        out = np.zeros_like(x)
        out[0] = -1j * _kdot(k, nv)
        out[1:4] = -1j * np.stack([kk * half_v2 for kk in k]) - vxw
        out[4:7] = nv
        return out
    return nonlin


def em_rhs(state: EMState, nonlinear: bool = True):
    """(dn/dt, dv/dt, dE/dt, dB/dt) as physical arrays."""
    grid = state.grid
    x = _em_pack(state)
    d = _em_linear(grid, state.T, state.c)(x)
    if nonlinear:
        d = d + _em_nonlin(grid)(x)
    p = _irfft(grid, d)
    return p[0], p[1:4], p[4:7], p[7:10]


def em_step(state: EMState, dt: float, nonlinear: bool = True) -> EMState:
    grid = state.grid
    _check_dt(grid, dt, max(state.c, math.sqrt(state.T)))
    prop = _EMPropagator(grid, state.T, state.c)
    x = _em_pack(state)
    y = _lawson_rk4(x, dt, prop, _em_nonlin(grid)) if nonlinear else prop(x, dt)
    _check_growth(x, y, state.t, 0)
    return _em_unpack(grid, y, state.t + dt, state.T, state.c)


def em_constraints(state: EMState) -> tuple[float, float]:
    """(|n + div E|_2, |B - curl v|_2)."""
    grid = state.grid
    k = grid.kvec(True)
    r1 = rfft(state.n) + 1j * _kdot(k, rfft(state.E))
    r2 = rfft(state.B) - 1j * _kcross(k, rfft(state.v))
    return math.sqrt(_half_energy(grid, r1)), math.sqrt(_half_energy(grid, r2))


def em_energy(state: EMState, N: int) -> float:
    """sum over |rho| <= N of int T|D n|^2 + (1+n)|D v|^2 + |D E|^2 + c^2 |D B|^2."""
    if N < 0 or N > MAX_SOBOLEV_ORDER:
        raise ValueError(f"energy order must lie in [0, {MAX_SOBOLEV_ORDER}]")
    one_n = 1.0 + state.n
    if one_n.min() <= 0:
        raise DomainError("1 + n <= 0 somewhere (fluid vacuum)")
    grid = state.grid
    W = _derivative_weight(grid, N)
    total = (state.T * _half_energy(grid, rfft(state.n), W) + _half_energy(grid, rfft(state.E), W)
             + state.c**2 * _half_energy(grid, rfft(state.B), W))
    vh = rfft(state.v)
    for rho in multi_indices(N):
        Dv = _irfft(grid, _deriv_symbol(grid, rho) * vh)
        total += grid.cell_volume * float(np.sum(one_n * Dv * Dv))
    return total


def em_zprime(state: EMState) -> float:
    grid = state.grid
    return (_grad_linf(grid, rfft(state.n)) + _vec_linf(state.v) + _grad_linf(grid, rfft(state.v))
            + _grad_linf(grid, rfft(state.E)) + _vec_linf(state.B) + _grad_linf(grid, rfft(state.B)))


def em_weighted_sup(state: EMState) -> float:
    """sup_{|rho|<=4} (1+t)^(1+beta) (|D v|_inf + |D E|_inf)."""
    grid = state.grid
    vh, Eh = rfft(state.v), rfft(state.E)
    best = 0.0
    for rho in multi_indices(4):
        D = _deriv_symbol(grid, rho)
        best = max(best, _vec_linf(_irfft(grid, D * vh)) + _vec_linf(_irfft(grid, D * Eh)))
    return (1 + state.t) ** (1 + BETA) * best


def em_initial_data(grid: Grid, rng: np.random.Generator, amplitude: float = 1e-3,
                    kmin: float = 0.2, kmax: float = 2.0, T: float = 1.0, c: float = 1.0) -> EMState:
    """Random band-limited v, E projected onto the constraints n = -div E, B = curl v."""
    from .fields import annulus_noise, curl, divergence

    v = annulus_noise(grid, rng, kmin, kmax, components=(3,))
    E = annulus_noise(grid, rng, kmin, kmax, components=(3,))
    v = SpectralField(grid, amplitude * v.values)
    E = SpectralField(grid, amplitude * E.values)
    n = -divergence(E).values
    B = curl(v).values
    return EMState(grid, 0.0, n, v.values.copy(), E.values.copy(), B, T, c)


EM_COLUMNS = ["t", "E_N", "H^N", "Zprime", "constraint1", "constraint2", "wsup", "linf"]


def _em_record(state, N, diagnostics):
    row = {"t": state.t, "linf": _vec_linf(state.v) + _vec_linf(state.E)}
    if "energy" in diagnostics:
        row["E_N"] = em_energy(state, N)
    if "sobolev" in diagnostics:
        g = state.grid
        row["H^N"] = sum(sobolev_norm(SpectralField(g, a), N) for a in (state.n, state.v, state.E, state.B))
    if "zprime" in diagnostics:
        row["Zprime"] = em_zprime(state)
    if "constraints" in diagnostics:
        row["constraint1"], row["constraint2"] = em_constraints(state)
    if "wsup" in diagnostics:
        row["wsup"] = em_weighted_sup(state)
    return row


def em_run(initial: EMState, t_end: float, dt: float | None = None, N: int = 2,
           record_every: int = 1, diagnostics: Sequence[str] = ALL_DIAGNOSTICS,
           nonlinear: bool = True, callback: Callable | None = None) -> RunReport:
    grid = initial.grid
    c_max = max(initial.c, math.sqrt(initial.T))
    steps, dt = _step_count(t_end, dt or default_dt(grid, c_max))
    _check_dt(grid, dt, c_max)
    prop = _EMPropagator(grid, initial.T, initial.c)
    nonlin = _em_nonlin(grid)
    report = RunReport(list(EM_COLUMNS), meta={"dt": dt, "steps": steps, "N": N})
    x = _em_pack(initial)
    t0 = initial.t
    report.append(_em_record(initial, N, diagnostics))
    if callback:
        callback(initial)
    for i in range(1, steps + 1):
        y = _lawson_rk4(x, dt, prop, nonlin) if nonlinear else prop(x, dt)
        _check_growth(x, y, t0 + (i - 1) * dt, i)
        x = y
        rec = i % record_every == 0 or i == steps
        if rec or callback:
            state = _em_unpack(grid, x, t0 + i * dt, initial.T, initial.c)
            if rec:
                report.append(_em_record(state, N, diagnostics))
            if callback:
                callback(state)
    report.final = _em_unpack(grid, x, t0 + steps * dt, initial.T, initial.c) if steps else initial
    return report


# -- Euler-Maxwell normal form ----------------------------------------------------------

def _full(grid: Grid, a):
    return fft(np.asarray(a, dtype=complex))


def em_normal_form(state: EMState):
    """U1 = Lambda_1 |D|^-1 div E + i |D|^-1 div v,  U2 = Lambda_2^-1 |D|^-1 curl E + i |D|^-1 curl v."""
    grid = state.grid
    k = grid.kvec()
    kinv = _safe_inverse(grid.kmag())
    k2 = grid.kmag() ** 2
    lam1, lam2 = np.sqrt(1 + state.T * k2), np.sqrt(1 + state.c**2 * k2)
    vh, Eh = _full(grid, state.v), _full(grid, state.E)
    U1 = lam1 * kinv * 1j * _kdot(k, Eh) + 1j * kinv * 1j * _kdot(k, vh)
    U2 = kinv / lam2 * 1j * _kcross(k, Eh) + 1j * kinv * 1j * _kcross(k, vh)
    return ifft(U1), ifft(U2)


def em_normal_form_inverse(U1, U2, grid: Grid, T: float = 1.0, c: float = 1.0, t: float = 0.0) -> EMState:
    """Reconstruct (v, E) and the constraint-compliant n = -div E, B = curl v."""
    k = grid.kvec()
    k2 = grid.kmag() ** 2
    lam1, lam2 = np.sqrt(1 + T * k2), np.sqrt(1 + c * c * k2)
    R = [1j * kk * _safe_inverse(grid.kmag()) for kk in k]
    reU1, imU1 = _full(grid, np.real(U1)), _full(grid, np.imag(U1))
    reU2, imU2 = _full(grid, np.real(U2)), _full(grid, np.imag(U2))
    vh = np.stack([-R[j] * imU1 for j in range(3)]) + _kcross(R, imU2)
    Eh = np.stack([-R[j] / lam1 * reU1 for j in range(3)]) + lam2 * _kcross(R, reU2)
    v = ifft(vh).real
    E = ifft(Eh).real
    n = ifft(-1j * _kdot(k, Eh)).real
    B = ifft(1j * _kcross(k, vh)).real
    return EMState(grid, t, n, v, E, B, T, c)


def em_nonlinearity(state: EMState):
    """N1 = -sum Lambda_1 R_j(v_j div E) + (i/2) sum |D|(v_j^2),  N2_j = -sum eps_jmn Lambda_2^-1 R_m(v_n div E)."""
    grid = state.grid
    k = grid.kvec()
    kmag = grid.kmag()
    k2 = kmag**2
    lam1, lam2 = np.sqrt(1 + state.T * k2), np.sqrt(1 + state.c**2 * k2)
    R = [1j * kk * _safe_inverse(kmag) for kk in k]
    divE = ifft(1j * _kdot(k, _full(grid, state.E))).real
    p = fft(dealias_real(grid, state.v * divE))           # (3, ...) transforms of v_j div E
    v2 = fft(dealias_real(grid, state.v * state.v))
    N1 = -lam1 * _kdot(R, p) + 0.5j * kmag * v2.sum(axis=0)
    N2 = -_kcross(R, p) / lam2
    return ifft(N1), ifft(N2)


def dealias_real(grid: Grid, a):
    return _irfft(grid, _dealiased(grid, a))


def em_normal_form_derivative(state: EMState):
    """d/dt of (U1, U2) computed from the evolution equations."""
    nt, vt, Et, Bt = em_rhs(state)
    d = state.replace(n=nt, v=vt, E=Et, B=Bt)
    return em_normal_form(d)


def em_identity_residual(state: EMState) -> tuple[float, float]:
    """Relative L2 residuals of (d/dt + i Lambda) U - N for U1 and U2."""
    grid = state.grid
    k2 = grid.kmag() ** 2
    lam1, lam2 = np.sqrt(1 + state.T * k2), np.sqrt(1 + state.c**2 * k2)
    U1, U2 = em_normal_form(state)
    D1, D2 = em_normal_form_derivative(state)
    N1, N2 = em_nonlinearity(state)
    L1 = D1 + ifft(1j * lam1 * fft(U1)) - N1
    L2 = D2 + ifft(1j * lam2 * fft(U2)) - N2
    scale1 = max(np.linalg.norm(N1), np.linalg.norm(D1), 1e-300)
    scale2 = max(np.linalg.norm(N2), np.linalg.norm(D2), 1e-300)
    return float(np.linalg.norm(L1) / scale1), float(np.linalg.norm(L2) / scale2)


# -- profiles, time partition, bilinear operators ---------------------------------------

def profile(U, table: ParameterTable, sigma: int, t: float, grid: Grid | None = None) -> SpectralField:
    """V = exp(i t Lambda_sigma) U."""
    from .fields import kg_propagate

    if not isinstance(U, SpectralField):
        U = SpectralField(grid, np.asarray(U, dtype=complex))
    return kg_propagate(U, table, sigma, t, +1)


class TimeWeight:
    """A smooth cutoff q(s) with support inside [lo, hi]."""

    def __init__(self, m: int, lo: float, hi: float, fn: Callable):
        self.m, self.lo, self.hi, self._fn = m, lo, hi, fn

    def __call__(self, s):
        return self._fn(np.asarray(s, dtype=float))

    def __repr__(self):
        return f"TimeWeight(m={self.m}, support=[{self.lo:g}, {self.hi:g}])"


def time_partition(t_end: float) -> list[TimeWeight]:
    """q_0, ..., q_{L+1} summing to 1 on [0, t_end].

    q_0 lives on [0, 2], q_m on [2^(m-1), 2^(m+1)], q_{L+1} on [t_end - 2, t_end];
    each is a smoothed trapezoid built from one C-infinity step.
    """
    if t_end < 0:
        raise ValueError("t_end must be nonnegative")
    L = max(0, math.ceil(math.log2(t_end - 1))) if t_end > 2 else 0

    def S(x):
        return _smoothstep(x)

    def lg(s):
        with np.errstate(divide="ignore"):
            return np.log2(np.maximum(s, 1e-300))

    def end(s):
        return S(s - (t_end - 2))

    def q0(s):
        return (1 - S(lg(s))) * (1 - end(s))

    def make(m):
        return lambda s: (S(lg(s) - m + 1) - S(lg(s) - m)) * (1 - end(s))

    def last(s):
        return end(s) + (1 - end(s)) * S(lg(s) - L)

    out = [TimeWeight(0, 0.0, 2.0, q0)]
    out += [TimeWeight(m, 2.0 ** (m - 1), 2.0 ** (m + 1), make(m)) for m in range(1, L + 1)]
    out.append(TimeWeight(L + 1, max(0.0, t_end - 2), t_end, last))
    return out


class Leg(NamedTuple):
    """One term of a bilinear input: symbol(xi) * U_{index}, with U recovered from profiles."""

    index: SignedIndex
    profiles: object          # SpectralField / array, or a sequence aligned with the sample times
    symbol: object = None     # None, array on the grid, or callable xi -> values


def _symbol_values(m, grid: Grid):
    if m is None:
        return None
    if callable(m):
        return symbol_on_grid(m, grid)
    arr = np.asarray(m)
    if arr.ndim == 0:
        return arr
    if arr.shape != grid.shape:
        raise MultiplierError(f"symbol array shape {arr.shape} does not match grid {grid.shape}")
    return arr


def _flip_conj(h):
    return np.conj(np.roll(np.flip(h, axis=(-3, -2, -1)), 1, axis=(-3, -2, -1)))


def _profile_hat(p, i, grid):
    if isinstance(p, (list, tuple)):
        p = p[i]
    if isinstance(p, SpectralField):
        return p.hat
    return fft(np.asarray(p, dtype=complex))


def _leg_field(legs, grid, i, phases):
    h = 0
    for leg in legs:
        V = _profile_hat(leg.profiles, i, grid)
        U = phases[leg.index.sigma - 1] * V
        if leg.index.iota < 0:
            U = _flip_conj(U)
        sym = _symbol_values(leg.symbol, grid)
        h = h + (U if sym is None else sym * U)
    return ifft(h)


def _as_legs(x, idx, sym):
    if idx is None:
        if not isinstance(x, (list, tuple)) or not all(isinstance(t, Leg) for t in x):
            raise MultiplierError("without a signed index the input must be a list of Leg terms")
        return list(x)
    if sym is not None and not (callable(sym) or isinstance(sym, (np.ndarray, float, int, complex))):
        raise MultiplierError("leg multiplier must be a callable or an array")
    return [Leg(idx, x, sym)]


def bilinear_instant(table: ParameterTable, f_legs, g_legs, sigma: int, s: float, grid: Grid,
                     m_out=None, i: int = 0, dealias: bool = True) -> np.ndarray:
    """Transform of exp(i s Lambda_sigma) m_out [U_f U_g](s) for sample i."""
    phases = np.exp(-1j * s * _kg_lams(table, grid, half=False))
    a = _leg_field(f_legs, grid, i, phases)
    b = _leg_field(g_legs, grid, i, phases)
    ph = fft(a * b)
    if dealias:
        ph = ph * grid.dealias_full
    sym = _symbol_values(m_out, grid)
    if sym is not None:
        ph = sym * ph
    return np.conj(phases[sigma - 1]) * ph


def simpson_weights(times) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if times.size == 1:
        return np.ones(1)
    eye = np.eye(times.size)
    return np.array([integrate.simpson(eye[i], x=times) for i in range(times.size)])


def bilinear_T(table: ParameterTable, f, g, sigma: int, mu: SignedIndex | None = None,
               nu: SignedIndex | None = None, m=None, q: Callable | None = None,
               times=None, grid: Grid | None = None, dealias: bool = True) -> SpectralField:
    """Integral over the sample times of q(s) exp(i s Lambda_sigma) m0 [ (m1 U_mu)(m2 U_nu) ](s).

    f, g are profiles V = exp(i s Lambda) U (static, or sequences aligned with
    times) with signed indices mu, nu; alternatively pass lists of Leg terms
    and leave mu, nu as None.  m is None or a triple (m0, m1, m2) of symbols.
    """
    if m is None:
        m = (None, None, None)
    if not isinstance(m, (tuple, list)) or len(m) != 3:
        raise MultiplierError("multiplier must be None or a product triple (m_out, m_f, m_g)")
    f_legs = _as_legs(f, mu, m[1])
    g_legs = _as_legs(g, nu, m[2])
    if grid is None:
        for leg in f_legs + g_legs:
            p = leg.profiles[0] if isinstance(leg.profiles, (list, tuple)) else leg.profiles
            if isinstance(p, SpectralField):
                grid = p.grid
                break
    if grid is None:
        raise ValueError("grid required when profiles are plain arrays")
    times = np.atleast_1d(np.asarray(0.0 if times is None else times, dtype=float))
    w = simpson_weights(times)
    out = np.zeros(grid.shape, dtype=complex)
    for i, s in enumerate(times):
        wi = w[i] * (1.0 if q is None else float(q(s)))
        if wi == 0.0:
            continue
        out += wi * bilinear_instant(table, f_legs, g_legs, sigma, s, grid, m[0], i, dealias)
    return SpectralField(grid, hat=out, real=False)


def em_nonlinearity_legs(T: float, c: float, V1, V2, grid: Grid):
    """N1 and N2 written as sums of bilinear terms in (U1, U2) and their conjugates.

    Returns (terms1, terms2): each term is (m_out, f_legs, g_legs) with
    N = sum over terms of m_out [f g].  V1, V2 are profile sequences.
    """
    k = grid.kvec()
    kmag = grid.kmag()
    k2 = kmag**2
    lam1, lam2 = np.sqrt(1 + T * k2), np.sqrt(1 + c * c * k2)
    R = [1j * kk * _safe_inverse(kmag) for kk in k]
    p1, m1 = SignedIndex(1, 1), SignedIndex(1, -1)
    p2, m2 = SignedIndex(2, 1), SignedIndex(2, -1)

    def one(x, j):
        if isinstance(x, SpectralField):
            return SpectralField(grid, hat=x.hat[j], real=False)
        return np.asarray(x)[j]

    def comp(seq, j):
        if isinstance(seq, (list, tuple)):
            return [one(x, j) for x in seq]
        return one(seq, j)

    # Re U = (U + conj U)/2, Im U = (U - conj U)/(2i)
    def re(idx_p, idx_m, V, sym):
        return [Leg(idx_p, V, 0.5 * sym), Leg(idx_m, V, 0.5 * sym)]

    def im(idx_p, idx_m, V, sym):
        return [Leg(idx_p, V, -0.5j * sym), Leg(idx_m, V, 0.5j * sym)]

    eps = {(0, 1, 2): 1, (1, 2, 0): 1, (2, 0, 1): 1, (0, 2, 1): -1, (2, 1, 0): -1, (1, 0, 2): -1}
    v_legs = []
    for j in range(3):
        legs = im(p1, m1, V1, -R[j])
        for (jj, mm, nn), sgn in eps.items():
            if jj == j:
                legs += im(p2, m2, comp(V2, nn), sgn * R[mm])
        v_legs.append(legs)
    divE = re(p1, m1, V1, kmag / lam1)
    mask = grid.dealias_full
    terms1 = [(-lam1 * R[j] * mask, v_legs[j], divE) for j in range(3)]
    terms1 += [(0.5j * kmag * mask, v_legs[j], v_legs[j]) for j in range(3)]
    terms2 = [[] for _ in range(3)]
    for (jj, mm, nn), sgn in eps.items():
        terms2[jj].append((-sgn * R[mm] / lam2 * mask, v_legs[nn], divE))
    return terms1, terms2


def duhamel_increment(table: ParameterTable, terms, sigma: int, times, q: Callable | None = None,
                      grid: Grid | None = None) -> SpectralField:
    """Sum of bilinear_T over the terms of a derived nonlinearity."""
    total = None
    for m_out, fl, gl in terms:
        part = bilinear_T(table, fl, gl, sigma, m=(m_out, None, None), q=q, times=times,
                          grid=grid, dealias=False)
        total = part if total is None else SpectralField(grid, hat=total.hat + part.hat, real=False)
    return total


# -- decay fits ---------------------------------------------------------------------------

@dataclass
class DecayFit:
    slope: float
    intercept: float
    stderr: float
    ci_low: float
    ci_high: float
    points: int
    window: tuple


def decay_fit(t, values, window=None, min_decades: float = 1.0, level: float = 0.95) -> DecayFit:
    """Least-squares slope of log(values) against log(1 + t)."""
    t = np.asarray(t, dtype=float)
    values = np.asarray(values, dtype=float)
    lo, hi = window if window is not None else (t[t > 0].min() if np.any(t > 0) else 0.0, t.max())
    sel = (t >= lo) & (t <= hi) & (values > 0) & np.isfinite(values)
    if sel.sum() < 3 or lo <= 0 or math.log10(hi / lo) < min_decades - 1e-12:
        raise InsufficientSpanError(
            f"need at least 3 points spanning {min_decades} decade(s) in t; window [{lo}, {hi}]")
    x, y = np.log1p(t[sel]), np.log(values[sel])
    res = stats.linregress(x, y)
    tq = stats.t.ppf(0.5 + level / 2, sel.sum() - 2) if sel.sum() > 2 else float("inf")
    return DecayFit(float(res.slope), float(res.intercept), float(res.stderr),
                    float(res.slope - tq * res.stderr), float(res.slope + tq * res.stderr),
                    int(sel.sum()), (float(lo), float(hi)))


def decay_report(run: RunReport, column: str = "linf", window=None, min_decades: float = 1.0,
                 level: float = 0.95) -> DecayFit:
    """Fitted decay exponent of a sup-norm column of a run."""
    return decay_fit(run.t, run.column(column), window, min_decades, level)


def energy_constant(t, energy, zeta, max_span: float = 1.0) -> float:
    """Smallest C with |E(t') - E(t)| <= C int_t^t' E Z ds over pairs with t' - t <= max_span."""
    t = np.asarray(t, dtype=float)
    energy = np.asarray(energy, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    cum = np.concatenate([[0.0], integrate.cumulative_trapezoid(energy * zeta, t)])
    best = 0.0
    for i in range(len(t)):
        for j in range(i + 1, len(t)):
            if t[j] - t[i] > max_span + 1e-12:
                break
            den = cum[j] - cum[i]
            if den > 0:
                best = max(best, abs(energy[j] - energy[i]) / den)
    return best
