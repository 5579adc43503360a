"""Space-time resonant sets of the quadratic interactions.

Radial conventions: ``s`` is the output radius |xi| and ``r`` the signed
input radius of eta measured along xi/|xi|.  The first leg ``mu`` lives at
``xi - eta`` and the second leg ``nu`` at ``eta``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .params import (
    ParameterError,
    ParameterTable,
    SignedIndex,
    check_nonresonance,
    hessian_det,
    lam_radial,
    phase_hessian,
    phase_phi,
    phase_xi,
)

SAME_SIGN = "same-sign"
OPPOSITE_FAST = "opposite-fast"
OPPOSITE_SLOW = "opposite-slow"
UNDEFINED = "undefined"


class CurveUndefinedError(ParameterError):
    """The radial curve does not exist for this pair of waves."""


class RootFindingError(RuntimeError):
    pass


class ParameterOrderError(ParameterError):
    pass


@dataclass(frozen=True)
class ResonanceCurve:
    mu: SignedIndex
    nu: SignedIndex
    case_tag: str
    domain: tuple[float, float] = (0.0, math.inf)


@dataclass(frozen=True)
class ResonanceSphere:
    sigma: int
    mu: SignedIndex
    nu: SignedIndex
    r_xi: float
    r_eta: float
    psi_slope: float
    hessian_margin: float
    dr_ds: float = math.nan

    CSV_HEADER = ("sigma", "mu", "nu", "r_xi", "r_eta", "psi_slope", "hessian_margin", "dr_ds")

    def row(self):
        return [self.sigma, str(self.mu), str(self.nu), self.r_xi, self.r_eta,
                self.psi_slope, self.hessian_margin, self.dr_ds]


@dataclass
class LemmaReport:
    lemma_id: str
    samples: int
    worst_margin: float
    passed: bool
    hits: int = 0
    details: dict = field(default_factory=dict)

    CSV_HEADER = ("lemma_id", "samples", "worst_margin", "passed", "hits")

    def row(self):
        return [self.lemma_id, self.samples, self.worst_margin, int(self.passed), self.hits]


def classify(table: ParameterTable, mu: SignedIndex, nu: SignedIndex) -> ResonanceCurve:
    b1, c1 = table.bc(mu.sigma)
    b2, c2 = table.bc(nu.sigma)
    if mu.iota * nu.iota == 1:
        return ResonanceCurve(mu, nu, SAME_SIGN, (0.0, math.inf))
    if c1 > c2 or (c1 == c2 and b2 > b1):
        return ResonanceCurve(mu, nu, OPPOSITE_FAST, (0.0, math.inf))
    if c1 < c2 or (c1 == c2 and b1 > b2):
        return ResonanceCurve(mu, nu, OPPOSITE_SLOW, (0.0, math.inf))
    return ResonanceCurve(mu, nu, UNDEFINED, (0.0, 0.0))


# -- the q parametrization of space resonances ------------------------------

def _q_factors(table, mu, nu, s, epsilon):
    b1, c1 = table.bc(mu.sigma)
    b2, c2 = table.bc(nu.sigma)
    if epsilon is None:
        epsilon = mu.iota * nu.iota
    if epsilon not in (1, -1):
        raise ParameterError(f"epsilon must be +-1, got {epsilon!r}")
    s = np.asarray(s, dtype=float)
    rad = b2 * b2 * c1**4 + c1**4 * c2 * c2 * s * s - c2**4 * c1 * c1 * s * s
    if np.any(rad <= 0):
        raise ParameterOrderError(
            "nonpositive radicand: order the legs so that c_mu >= c_nu "
            "(and b_nu c_mu^2 >= b_mu c_nu^2)")
    return b1, c1, b2, c2, epsilon, rad


def q_of_eta(table: ParameterTable, mu: SignedIndex, nu: SignedIndex, epsilon, eta):
    """The unique xi with vanishing eta-gradient of the phase, as a function of eta.

    The formula is evaluated with the legs in the given order (``mu`` at
    xi-eta, ``nu`` at eta); it is valid whenever its radicand is positive,
    which the ordering c_mu >= c_nu guarantees for every eta.  The legs are
    not swapped: with c_mu < c_nu the equation has no solution for large
    |eta| and a parameter-order error is raised there.  ``epsilon`` is the
    relative sign iota_mu * iota_nu (pass None to use it); the eta-gradient
    vanishes at the returned point only for that sign.
    """
    eta = np.asarray(eta, dtype=float)
    s = np.linalg.norm(eta, axis=-1)
    b1, c1, b2, c2, eps, rad = _q_factors(table, mu, nu, s, epsilon)
    factor = 1.0 + eps * b1 * c2 * c2 / np.sqrt(rad)
    return factor[..., None] * eta


def dr_ds(table: ParameterTable, mu: SignedIndex, nu: SignedIndex, epsilon, s):
    """Radial derivative of the signed output radius along q."""
    b1, c1, b2, c2, eps, rad = _q_factors(table, mu, nu, s, epsilon)
    return 1.0 + eps * b1 * c2 * c2 * b2 * b2 * c1**4 / rad**1.5


def ordered_legs(table: ParameterTable, mu: SignedIndex, nu: SignedIndex) -> bool:
    """True when (mu, nu) already satisfies c_mu >= c_nu, b_nu c_mu^2 >= b_mu c_nu^2."""
    b1, c1 = table.bc(mu.sigma)
    b2, c2 = table.bc(nu.sigma)
    return c1 >= c2 and b2 * c1 * c1 >= b1 * c2 * c2


def dr_ds_at(table, mu, nu, r_xi: float, r_eta: float) -> float:
    """dr/ds at the collinear point (r_xi e, r_eta e), legs swapped if needed."""
    eps = mu.iota * nu.iota
    if ordered_legs(table, mu, nu):
        return float(dr_ds(table, mu, nu, eps, abs(r_eta)))
    return float(dr_ds(table, nu, mu, eps, abs(r_xi - r_eta)))


# -- the r curves ------------------------------------------------------------

def _curve_terms(case, b1, c1, b2, c2, s, r, w):
    # w = r - s, passed separately so that it carries no cancellation error
    if case == SAME_SIGN:
        t1 = c1**4 * w * w / (b1 * b1 + c1 * c1 * w * w)
        t2 = -(c2**4) * r * r / (b2 * b2 + c2 * c2 * r * r)
        return (t1, t2)
    if case == OPPOSITE_FAST:
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (c1**4 * c2 * c2 - c2**4 * c1 * c1) * w * w
            t2 = c1**4 * b2 * b2 * (w / r) ** 2
        t3 = -(c2**4) * b1 * b1 * np.ones_like(r)
        return (t1, t2, t3)
    if case == OPPOSITE_SLOW:
        t1 = (c2**4 * c1 * c1 - c1**4 * c2 * c2) * r * r
        t2 = c2**4 * b1 * b1 * r * r / (w * w)
        t3 = -(c1**4) * b2 * b2 * np.ones_like(r)
        return (t1, t2, t3)
    raise CurveUndefinedError("curve undefined")


def curve_residual(table, mu, nu, s, r, w=None) -> np.ndarray:
    """Residual of the defining radial equation, scaled by the size of its terms.

    ``w`` is r - s; pass the value returned by :func:`r_curve_offset` to
    avoid the rounding of forming r - s from a rounded r.
    """
    case = classify(table, mu, nu).case_tag
    b1, c1 = table.bc(mu.sigma)
    b2, c2 = table.bc(nu.sigma)
    s = np.asarray(s, dtype=float)
    r = np.asarray(r, dtype=float)
    w = r - s if w is None else np.asarray(w, dtype=float)
    terms = _curve_terms(case, b1, c1, b2, c2, s, r, w)
    total = sum(terms)
    scale = sum(np.abs(t) for t in terms)
    return np.abs(total) / np.where(scale > 0, scale, 1.0)


def _bisect(f, lo, hi, iters=200):
    """Vectorized bisection; f(lo) and f(hi) must have opposite signs."""
    flo = f(lo)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        done = (mid == lo) | (mid == hi)
        if np.all(done):
            break
        fm = f(mid)
        same = np.sign(fm) == np.sign(flo)
        lo = np.where(same, mid, lo)
        flo = np.where(same, fm, flo)
        hi = np.where(same, hi, mid)
    fl, fh = np.abs(f(lo)), np.abs(f(hi))
    return np.where(fl <= fh, lo, hi)


def _grow_bracket(f, start, cap, mu, nu):
    """Double ``start`` (elementwise) until f changes sign from its value at 0+."""
    x = start.copy()
    for _ in range(400):
        bad = f(x) <= 0
        if not np.any(bad):
            return x
        if np.any(bad & (x >= cap)):
            raise RootFindingError(
                f"root not bracketed for {mu}, {nu}: defining function still "
                f"nonpositive at offset {float(np.max(x)):g}")
        x = np.where(bad, np.minimum(2.0 * x, cap), x)
    raise RootFindingError(f"bracket growth did not terminate for {mu}, {nu}")


def r_curve_offset(table: ParameterTable, mu: SignedIndex, nu: SignedIndex, s):
    """Return ``(r, w)`` with w = r - s, each computed without cancellation.

    The root is bracketed in whichever variable is small: s - r when the
    first leg is at least as fast (r close to s), r otherwise, and r - s in
    the opposite-fast case.
    """
    case = classify(table, mu, nu).case_tag
    if case == UNDEFINED:
        raise CurveUndefinedError(f"curve undefined for {mu}, {nu}: equal speeds and masses")
    b1, c1 = table.bc(mu.sigma)
    b2, c2 = table.bc(nu.sigma)
    s_in = np.asarray(s, dtype=float)
    s = np.atleast_1d(s_in).astype(float)
    if np.any(s < 0) or (case != SAME_SIGN and np.any(s == 0)):
        raise ParameterError("s must be positive")
    cap = 1e6 * np.maximum(s, 1.0)

    if case == SAME_SIGN:
        # cleared denominators; the speed-difference term vanishes exactly for equal speeds
        def g(r, w):
            return (c1**4 * b2 * b2 * w * w - c2**4 * b1 * b1 * r * r
                    + c1 * c1 * c2 * c2 * (c1 * c1 - c2 * c2) * w * w * r * r)
        if c1 >= c2:
            x = _bisect(lambda x: g(s - x, -x), np.zeros_like(s), s.copy())
            r, w = s - x, -x
        else:
            r = _bisect(lambda r: g(r, r - s), np.zeros_like(s), s.copy())
            w = r - s
    elif case == OPPOSITE_FAST:
        def g(x):
            return sum(_curve_terms(case, b1, c1, b2, c2, s, s + x, x))
        hi = _grow_bracket(g, np.maximum(s, 1e-300), cap, mu, nu)
        x = _bisect(g, np.zeros_like(s), hi)
        r, w = s + x, x
    else:
        def g(y):
            return sum(_curve_terms(case, b1, c1, b2, c2, s, -y, -y - s))
        hi = _grow_bracket(g, np.maximum(s, 1e-300), cap, mu, nu)
        y = _bisect(g, np.zeros_like(s), hi)
        r, w = -y, -y - s
    if s_in.ndim == 0:
        return float(r[0]), float(w[0])
    return r.reshape(s_in.shape), w.reshape(s_in.shape)


def r_curve(table: ParameterTable, mu: SignedIndex, nu: SignedIndex, s):
    """Signed eta-radius of the space resonance for output radius ``s``."""
    return r_curve_offset(table, mu, nu, s)[0]


def r_curve_prime(table: ParameterTable, mu: SignedIndex, nu: SignedIndex, s):
    case = classify(table, mu, nu).case_tag
    r, w = (np.asarray(a, dtype=float) for a in r_curve_offset(table, mu, nu, s))
    s = np.asarray(s, dtype=float)
    b1, c1 = table.bc(mu.sigma)
    b2, c2 = table.bc(nu.sigma)
    if case == SAME_SIGN:
        num = b1 * b1 * c2**4 * r**3
        return num / (num - b2 * b2 * c1**4 * w**3)
    if case == OPPOSITE_FAST:
        return 1.0 + c1**4 * b2 * b2 * w / (
            (c1**4 * c2 * c2 - c2**4 * c1 * c1) * r**3 + c1**4 * b2 * b2 * s)
    return c2**4 * b1 * b1 * r / (
        -(c2**4 * c1 * c1 - c1**4 * c2 * c2) * w**3 + c2**4 * b1 * b1 * s)


def p_of_xi(table: ParameterTable, mu: SignedIndex, nu: SignedIndex, xi):
    xi = np.asarray(xi, dtype=float)
    s = np.linalg.norm(xi, axis=-1)
    if np.any(s == 0):
        raise ParameterError("p is undefined at xi = 0")
    r = np.asarray(r_curve(table, mu, nu, s))
    return (r / s)[..., None] * xi


def psi(table: ParameterTable, sigma: int, mu: SignedIndex, nu: SignedIndex, s):
    """Phase restricted to the space-resonant curve."""
    r, w = r_curve_offset(table, mu, nu, s)
    s = np.asarray(s, dtype=float)
    return (lam_radial(table, sigma, s) - mu.iota * lam_radial(table, mu.sigma, w)
            - nu.iota * lam_radial(table, nu.sigma, r))


def psi_prime(table: ParameterTable, sigma: int, mu: SignedIndex, nu: SignedIndex, s):
    r, w = r_curve_offset(table, mu, nu, s)
    s = np.asarray(s, dtype=float)
    bs, cs = table.bc(sigma)
    b1, c1 = table.bc(mu.sigma)
    return (cs * cs * s / np.sqrt(bs * bs + cs * cs * s * s)
            + mu.iota * c1 * c1 * w / np.sqrt(b1 * b1 + c1 * c1 * w * w))


# -- resonant spheres ----------------------------------------------------------

def find_resonant_spheres(table: ParameterTable, sigma: int, mu: SignedIndex, nu: SignedIndex,
                          s_range=(1e-3, 1e3), n_scan: int = 4000) -> list[ResonanceSphere]:
    """Locate all sign changes of psi on a log-spaced scan and refine them."""
    s_lo, s_hi = s_range
    grid = np.geomspace(s_lo, s_hi, n_scan)
    vals = psi(table, sigma, mu, nu, grid)
    roots = []
    for i in range(n_scan - 1):
        a, b = vals[i], vals[i + 1]
        if a == 0:
            roots.append(grid[i])
        elif a * b < 0:
            lo, hi = np.array([grid[i]]), np.array([grid[i + 1]])
            roots.append(float(_bisect(lambda x: psi(table, sigma, mu, nu, x), lo, hi)[0]))
    if vals[-1] == 0:
        roots.append(grid[-1])
    spheres = []
    for s in roots:
        r = float(r_curve(table, mu, nu, s))
        xi = np.array([s, 0.0, 0.0])
        eta = np.array([r, 0.0, 0.0])
        margin = abs(float(hessian_det(table, mu, nu, xi, eta)))
        slope = float(psi_prime(table, sigma, mu, nu, s))
        try:
            drds = dr_ds_at(table, mu, nu, s, r)
        except ParameterOrderError:
            drds = math.nan
        spheres.append(ResonanceSphere(sigma, mu, nu, float(s), r, slope, margin, drds))
    return spheres


def interaction_triples(table: ParameterTable):
    """All (sigma, mu, nu) with mu, nu signed indices."""
    from .params import all_signed_indices

    signed = all_signed_indices(table.d)
    for sigma in table.species():
        for mu, nu in itertools.product(signed, repeat=2):
            yield sigma, mu, nu


def scan_all_spheres(table: ParameterTable, s_range=(1e-3, 1e3), n_scan=4000):
    """Spheres for every defined triple, plus the list of skipped (undefined) triples."""
    spheres, skipped = [], []
    for sigma, mu, nu in interaction_triples(table):
        if classify(table, mu, nu).case_tag == UNDEFINED:
            skipped.append((sigma, mu, nu))
            continue
        spheres.extend(find_resonant_spheres(table, sigma, mu, nu, s_range, n_scan))
    return spheres, skipped


def psi_monotonicity(table, sigma, mu, nu, s_range=(1e-3, 1e3), n_scan=20000,
                     threshold=1e-3) -> LemmaReport:
    """Sign of psi' must be constant on each scanned interval where |psi| <= threshold."""
    grid = np.geomspace(*s_range, n_scan)
    vals = psi(table, sigma, mu, nu, grid)
    near = np.abs(vals) <= threshold
    if not np.any(near):
        return LemmaReport("psi-monotone", 0, math.inf, True)
    # split the near-zero set into runs of consecutive scan points
    edges = np.flatnonzero(np.diff(near.astype(np.int8)))
    bounds = np.concatenate([[0], edges + 1, [n_scan]])
    passed, margin, intervals = True, math.inf, 0
    for a, b in zip(bounds[:-1], bounds[1:]):
        if not near[a]:
            continue
        slopes = psi_prime(table, sigma, mu, nu, grid[a:b])
        signs = np.unique(np.sign(slopes))
        passed &= len(signs) == 1 and signs[0] != 0
        margin = min(margin, float(np.min(np.abs(slopes))))
        intervals += 1
    return LemmaReport("psi-monotone", int(near.sum()), margin, bool(passed and margin > 0),
                       details={"intervals": intervals})


# -- sampled lemma checks -------------------------------------------------------

def _unit_vectors(u, v):
    z = 2.0 * u - 1.0
    phi = 2.0 * math.pi * v
    rho = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=-1)


def _annulus_radius(u, k):
    # log-uniform in [2^(k-4), 2^(k+4)]
    return 2.0 ** (k - 4 + 8.0 * u)


def _in_annulus(x, k):
    n = np.linalg.norm(x, axis=-1)
    return (n >= 2.0 ** (k - 4)) & (n <= 2.0 ** (k + 4))


def almost_resonant_samples(k, k1, k2, samples, seed=0):
    """Quasi-random (xi, eta) pairs in the three annuli (rejection on |xi-eta|)."""
    sampler = qmc.Halton(d=6, scramble=True, seed=seed)
    u = sampler.random(samples)
    xi = _annulus_radius(u[:, 0], k)[:, None] * _unit_vectors(u[:, 1], u[:, 2])
    eta = _annulus_radius(u[:, 3], k2)[:, None] * _unit_vectors(u[:, 4], u[:, 5])
    keep = _in_annulus(xi - eta, k1)
    return xi[keep], eta[keep]


def verify_almost_resonant_empty(table, sigma, mu, nu, k, k1, k2, delta1, delta2,
                                 samples=100_000, seed=0, seeds=None) -> LemmaReport:
    """Search the almost-resonant set by sampling; ``passed`` means no point was found.

    ``seeds`` is an optional (xi, eta) pair of arrays appended to the sample
    (points outside the annuli are dropped).
    """
    xi, eta = almost_resonant_samples(k, k1, k2, samples, seed)
    if seeds is not None:
        sx, se = (np.atleast_2d(np.asarray(a, dtype=float)) for a in seeds)
        ok = _in_annulus(sx, k) & _in_annulus(se, k2) & _in_annulus(sx - se, k1)
        xi = np.concatenate([xi, sx[ok]])
        eta = np.concatenate([eta, se[ok]])
    if len(xi) == 0:
        return LemmaReport("almost-resonant-empty", 0, math.inf, True)
    grad = np.linalg.norm(phase_xi(table, mu, nu, xi, eta), axis=-1)
    ph = np.abs(phase_phi(table, sigma, mu, nu, xi, eta))
    margin = np.maximum(grad / delta1, ph / delta2)
    hits = int(np.sum(margin <= 1.0))
    worst = float(margin.min())
    return LemmaReport("almost-resonant-empty", len(xi), worst, hits == 0, hits,
                       details={"min_grad": float(grad.min()), "min_phase": float(ph.min())})


def verify_eta_pinning(table, sigma, mu, nu, k, k1, k2, delta, samples=10_000, seed=0,
                       D=None, seeds_only=False, max_rounds=50) -> LemmaReport:
    """Sample (xi, eta) with small eta-gradient and compare eta with p(xi).

    Proposals are eta = p(xi) + 1.5 * delta * H^{-1} z with z uniform in the
    unit ball and H the eta-Hessian at (xi, p(xi)); this covers the linearized
    sublevel set, and acceptance uses the exact gradient.  Batches are drawn
    until ``samples`` proposals are accepted.  With ``seeds_only`` the
    proposals are eta = p(xi) exactly.
    """
    D = table.D if D is None else D
    bound = 2.0 ** (8 * D)
    rng = np.random.default_rng(seed)
    dists = []
    accepted = 0
    for _ in range(max_rounds):
        n_xi = max(1, samples // 4)
        s = _annulus_radius(rng.random(n_xi), k)
        xi = s[:, None] * _unit_vectors(rng.random(n_xi), rng.random(n_xi))
        p = p_of_xi(table, mu, nu, xi)
        ok = _in_annulus(p, k2) & _in_annulus(xi - p, k1)
        if not np.any(ok):
            continue
        xi, p = xi[ok], p[ok]
        reps = int(math.ceil(samples / len(xi)))
        xi = np.repeat(xi, reps, axis=0)[:samples]
        p = np.repeat(p, reps, axis=0)[:samples]
        if seeds_only:
            eta = p.copy()
        else:
            z = rng.normal(size=(len(xi), 3))
            z *= (rng.random(len(xi)) ** (1.0 / 3.0) / np.linalg.norm(z, axis=-1))[:, None]
            H = phase_hessian(table, mu, nu, xi, p)
            eta = p + 1.5 * delta * np.linalg.solve(H, z[..., None])[..., 0]
        grad = np.linalg.norm(phase_xi(table, mu, nu, xi, eta), axis=-1)
        acc = (grad <= delta) & _in_annulus(eta, k2) & _in_annulus(xi - eta, k1)
        dists.append(np.linalg.norm(eta[acc] - p[acc], axis=-1))
        accepted += int(acc.sum())
        if accepted >= samples:
            break
    if accepted == 0:
        return LemmaReport("eta-pinning", 0, 0.0, True, details={"bound": bound, "worst_distance": 0.0})
    dist = np.concatenate(dists)[:samples]
    worst = float(dist.max() / delta)
    return LemmaReport("eta-pinning", len(dist), worst, worst <= bound,
                       details={"bound": bound, "worst_distance": float(dist.max())})


def sphere_table_report(table, s_range=(1e-3, 1e3), n_scan=4000, margin_threshold=1e-6):
    """Spheres of a table with the non-degeneracy checks applied to each."""
    cond = check_nonresonance(table)
    spheres, skipped = scan_all_spheres(table, s_range, n_scan)
    bad = [sp for sp in spheres
           if not (sp.hessian_margin > margin_threshold and sp.dr_ds > 0)]
    return cond, spheres, skipped, bad
