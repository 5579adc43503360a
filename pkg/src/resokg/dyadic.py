"""Littlewood-Paley cutoffs, atomic decomposition and the atomic Z norms.

Continuum conventions on the periodic box: the Fourier transform of a
field is approximated by ``hhat = dx^3 * DFT(h)`` on the lattice
``(2 pi / L) Z^3`` and integrals over frequency balls by lattice sums times
``dxi^3``.  Spatial cutoffs use the periodic distance to the origin.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable

import numpy as np
import scipy.fft as sfft

from .fields import Grid, SpectralField, ifft, threads

BETA = 1.0 / 100
ALPHA = BETA / 2
GAMMA = 11.0 / 8

_INNER, _OUTER = 5.0 / 4.0, 8.0 / 5.0


class DyadicError(ValueError):
    pass


# -- cutoffs --------------------------------------------------------------------

def _smoothstep(t):
    """C-infinity step: 0 for t <= 0, 1 for t >= 1."""
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
        b = np.where(t < 1, np.exp(-1.0 / np.where(t < 1, 1.0 - t, 1.0)), 0.0)
    return a / (a + b)


def phi(x):
    """Even bump, 1 on [-5/4, 5/4] and 0 outside (-8/5, 8/5)."""
    return _smoothstep((_OUTER - np.abs(x)) / (_OUTER - _INNER))


def _radius(x):
    x = np.asarray(x, dtype=float)
    if x.ndim >= 1 and x.shape[-1] == 3 and x.ndim > 0:
        return np.linalg.norm(x, axis=-1)
    return np.abs(x)


def cutoff_phi_le(k, x):
    """phi(|x| / 2^k), the multiplier of P_{<=k}."""
    return phi(_radius(x) / 2.0**k)


def cutoff_phi_k(k: int, x):
    r = _radius(x)
    return phi(r / 2.0**k) - phi(r / 2.0 ** (k - 1))


def cutoff_phi_interval(a: int, b: int, x):
    """Sum of phi_m over a <= m <= b (telescoped)."""
    if b < a:
        raise DyadicError(f"empty interval [{a}, {b}]")
    r = _radius(x)
    return phi(r / 2.0**b) - phi(r / 2.0 ** (a - 1))


def in_J(k: int, j: int) -> bool:
    return j >= 0 and k + j >= 0


def cutoff_phii(k: int, j: int, x):
    """The spatial cutoff attached to the index (k, j)."""
    if not in_J(k, j):
        raise DyadicError(f"({k}, {j}) is not in the index set")
    r = _radius(x)
    if k + j == 0 and k <= 0:
        return phi(r * 2.0**k)
    if j == 0 and k >= 0:
        return phi(r)
    return phi(r / 2.0**j) - phi(r / 2.0 ** (j - 1))


def cutoff_phii_interval(k: int, a: int, b: int, x):
    """Sum of the (k, j) spatial cutoffs over j in [a, b] with (k, j) in the index set."""
    jlo = max(a, -min(k, 0), 0)
    if b < jlo:
        return np.zeros_like(_radius(x))
    r = _radius(x)
    return phi(r / 2.0**b) - (phi(r / 2.0 ** (jlo - 1)) if jlo > max(-min(k, 0), 0) else 0.0)


def X_k(k: int, k1: int, k2: int) -> bool:
    """Membership of (k1, k2) in the bilinear index set attached to k."""
    m = max(k1, k2)
    return abs(m - k) <= 8 or (m - k >= 8 and abs(k1 - k2) <= 8)


# -- projections -------------------------------------------------------------------

def project(f: SpectralField, k) -> SpectralField:
    """P_k for an integer k, P_[a,b] for a pair (a, b)."""
    kmag = f.grid.kfull()
    if isinstance(k, (tuple, list)):
        a, b = k
        mult = cutoff_phi_interval(int(a), int(b), kmag)
    else:
        mult = cutoff_phi_k(int(k), kmag)
    return f.multiply(mult)


def frequency_range(grid: Grid) -> tuple[int, int]:
    """Smallest interval [k0, k1] whose multipliers sum to 1 on all nonzero lattice modes."""
    kmag = grid.kfull()
    nz = kmag[kmag > 0]
    kmin, kmax = nz.min(), nz.max()
    k0 = math.floor(math.log2(kmin / _OUTER)) + 1
    while _OUTER * 2.0 ** (k0 - 1) > kmin:
        k0 -= 1
    k1 = math.ceil(math.log2(kmax / _INNER))
    return k0, k1


def spatial_range(grid: Grid) -> int:
    """Smallest j_max with the spatial cutoffs summing to 1 on the whole box."""
    rmax = math.sqrt(3.0) * grid.L / 2
    return max(0, math.ceil(math.log2(rmax / _INNER)))


@dataclass(frozen=True)
class DyadicIndex:
    k: int
    j: int

    def __post_init__(self):
        if not in_J(self.k, self.j):
            raise DyadicError(f"({self.k}, {self.j}) is not in the index set")


@dataclass
class DyadicAtom:
    index: DyadicIndex
    data: SpectralField          # P_[k-2,k+2](phii_j^(k) P_k f)
    piece: SpectralField         # phii_j^(k) P_k f, the function the norms are taken of
    meta: dict = field(default_factory=dict)


@dataclass
class Decomposition:
    atoms: list
    k_range: tuple
    j_max: int
    remainder: float             # relative L2 norm of the untouched part (mean and truncation)
    j_max_warning: bool = False


def atom_decompose(f: SpectralField, k_range=None, j_max=None, keep_zero: bool = False) -> Decomposition:
    g = f.grid
    k_range = frequency_range(g) if k_range is None else tuple(k_range)
    need_j = spatial_range(g)
    j_max = need_j if j_max is None else int(j_max)
    kmag = g.kfull()
    r = g.radius
    atoms = []
    total = np.zeros_like(f.hat)
    for k in range(k_range[0], k_range[1] + 1):
        pk = f.multiply(cutoff_phi_k(k, kmag))
        if not keep_zero and not np.any(pk.hat):
            continue
        window = cutoff_phi_interval(k - 2, k + 2, kmag)
        for j in range(max(-k, 0), j_max + 1):
            piece = SpectralField(g, cutoff_phii(k, j, r) * pk.values)
            data = piece.multiply(window)
            if not keep_zero and not np.any(piece.values):
                continue
            atoms.append(DyadicAtom(DyadicIndex(k, j), data, piece,
                                    meta={"radius": 2.0**j}))
            total = total + data.hat
    norm = np.linalg.norm(f.hat)
    rem = float(np.linalg.norm(f.hat - total) / norm) if norm > 0 else 0.0
    return Decomposition(atoms, k_range, j_max, rem, j_max < need_j)


def reconstruct(dec: Decomposition, grid: Grid) -> SpectralField:
    if not dec.atoms:
        return SpectralField.zeros(grid)
    h = sum(a.data.hat for a in dec.atoms)
    real = all(a.data.real for a in dec.atoms)
    return SpectralField(grid, hat=h, real=real)


# -- norms -------------------------------------------------------------------------

def continuum_hat(f: SpectralField) -> np.ndarray:
    """dx^3 * unnormalized DFT, an approximation of the Fourier transform on the lattice."""
    g = f.grid
    return f.hat * (g.cell_volume * g.n**1.5)


def _l2(f: SpectralField) -> float:
    return float(math.sqrt(f.grid.cell_volume * np.sum(np.abs(f.values) ** 2)))


def _weights(k: int, j: int):
    kt, kp = min(k, 0), max(k, 0)
    pre = 2.0 ** (ALPHA * k) + 2.0 ** (10 * k)
    return {
        "pre": pre,
        "l2_1": 2.0 ** ((1 + BETA) * j),
        "linf": 2.0 ** ((0.5 - BETA) * kt),
        "l2_2": 2.0 ** (-2 * BETA * kt) * 2.0 ** ((1 - BETA) * j),
        "ball": 2.0 ** ((GAMMA - BETA - 0.5) * kt) * 2.0 ** (2 * kp) * 2.0 ** (GAMMA * j),
    }


@lru_cache(maxsize=256)
def _ball_kernel_hat(shape: tuple, radius_cells: float):
    """Transform of a ball indicator with linear fractional weights at its boundary."""
    rc = int(math.ceil(radius_cells + 0.5))
    ax = np.arange(-rc, rc + 1, dtype=float)
    d = np.sqrt(ax[:, None, None] ** 2 + ax[None, :, None] ** 2 + ax[None, None, :] ** 2)
    w = np.clip(radius_cells - d + 0.5, 0.0, 1.0)
    ker = np.zeros(shape)
    m = 2 * rc + 1
    ker[:m, :m, :m] = w
    ker = np.roll(ker, (-rc, -rc, -rc), axis=(0, 1, 2))
    return sfft.rfftn(ker, workers=threads())


def _crop_support(a: np.ndarray, rel_tol: float):
    """Shift the array so that its support box starts at index 0 and crop to it."""
    peak = a.max()
    if peak == 0:
        return a[:1, :1, :1] * 0
    mask = a > rel_tol * peak
    a = np.fft.fftshift(a)
    mask = np.fft.fftshift(mask)
    idx = [np.flatnonzero(mask.any(axis=tuple(i for i in range(3) if i != ax))) for ax in range(3)]
    sl = tuple(slice(i[0], i[-1] + 1) for i in idx)
    return a[sl]


def ball_l1_sup(fhat: np.ndarray, grid: Grid, j: int, k: int, stride: int = 1,
                r_values: Iterable[float] | None = None, rel_tol: float = 1e-14) -> float:
    """sup over dyadic R in [2^-j, 2^k] and lattice centers of R^-2 * L1(|fhat|, B(xi0, R)).

    ``fhat`` is the continuum transform on the lattice.  Centers are the
    lattice points with indices divisible by ``stride`` (in the shifted
    support box), so refining the stride only adds candidates.  Balls
    smaller than a lattice cell use the one-point value (4 pi / 3) R^3 |fhat|.
    """
    a = np.abs(np.asarray(fhat))
    if not np.any(a):
        return 0.0
    dxi = grid.dk
    vol = dxi**3
    if r_values is None:
        if 2.0 ** (-j) > 2.0**k:
            raise DyadicError("empty radius range")
        r_values = [2.0**e for e in range(-j, k + 1)]
    r_values = sorted(r_values)
    best = 0.0
    small = [R for R in r_values if R < dxi]
    if small:
        R = small[-1]
        best = (4.0 * math.pi / 3.0) * R * a.max()
    big = [R for R in r_values if R >= dxi]
    if not big:
        return best
    a = _crop_support(a, rel_tol)
    total = a.sum() * vol
    diam = math.sqrt(sum(s * s for s in a.shape)) * dxi
    for R in big:
        if R >= diam:
            # a ball centered at a support point already contains everything
            best = max(best, total / (R * R))
            break
        rc = R / dxi
        pad = int(math.ceil(rc + 1.5))
        shape = tuple(sfft.next_fast_len(s + 2 * pad, real=True) for s in a.shape)
        buf = np.zeros(shape)
        buf[pad:pad + a.shape[0], pad:pad + a.shape[1], pad:pad + a.shape[2]] = a
        conv = sfft.irfftn(sfft.rfftn(buf, workers=threads()) * _ball_kernel_hat(shape, rc),
                           s=shape, workers=threads())
        if stride > 1:
            conv = conv[pad % stride::stride, pad % stride::stride, pad % stride::stride]
        best = max(best, float(conv.max()) * vol / (R * R))
    return best


@dataclass
class NormProfile:
    k: int
    j: int
    b1: float
    b2: float
    b: float
    terms: dict = field(default_factory=dict)

    CSV_HEADER = ("k", "j", "b1", "b2", "b", "l2", "linf_hat", "ball")

    def row(self):
        t = self.terms
        return [self.k, self.j, self.b1, self.b2, self.b,
                t.get("l2", 0.0), t.get("linf_hat", 0.0), t.get("ball", 0.0)]


def _resolve(h, k, j):
    if isinstance(h, DyadicAtom):
        return h.piece, h.index.k, h.index.j
    if k is None or j is None:
        raise DyadicError("k and j are required for a bare field")
    return h, k, j


def norm_terms(h: SpectralField, k: int, j: int, ball: bool = True, stride: int = 1) -> dict:
    hh = continuum_hat(h)
    out = {"l2": _l2(h), "linf_hat": float(np.abs(hh).max())}
    if ball:
        out["ball"] = ball_l1_sup(hh, h.grid, j, k, stride=stride)
    return out


def b1_norm(h, k: int | None = None, j: int | None = None) -> float:
    h, k, j = _resolve(h, k, j)
    t = norm_terms(h, k, j, ball=False)
    w = _weights(k, j)
    return w["pre"] * (w["l2_1"] * t["l2"] + w["linf"] * t["linf_hat"])


def b2_norm(h, k: int | None = None, j: int | None = None, stride: int = 1) -> float:
    h, k, j = _resolve(h, k, j)
    t = norm_terms(h, k, j, stride=stride)
    w = _weights(k, j)
    return w["pre"] * (w["l2_2"] * t["l2"] + w["linf"] * t["linf_hat"] + w["ball"] * t["ball"])


def _b2_cheap(t, w):
    return w["pre"] * (w["l2_2"] * t["l2"] + w["linf"] * t["linf_hat"])


def b_norm(h, k: int | None = None, j: int | None = None, thresholds: int = 8,
           profile: bool = False, upper: float = math.inf):
    """Minimum of B1(g1) + B2(g2) over a finite family of splittings g = g1 + g2.

    The family: (g, 0), (0, g), and for i = 1..thresholds the split putting
    into g2 the frequencies where |ghat| >= 2^-i max|ghat|, multiplied by
    the spatial window over [j-2, j+2] (which is 1 on the support of g, so
    the split stays exact).  The result is an upper bound for the infimum.
    Candidates whose cheap lower bound already exceeds the running minimum
    (or ``upper``) skip the ball term.
    """
    h, k, j = _resolve(h, k, j)
    w = _weights(k, j)
    hh = continuum_hat(h)
    t1 = {"l2": _l2(h), "linf_hat": float(np.abs(hh).max())}
    b1 = w["pre"] * (w["l2_1"] * t1["l2"] + w["linf"] * t1["linf_hat"])
    if t1["l2"] == 0 and t1["linf_hat"] == 0:
        return NormProfile(k, j, 0.0, 0.0, 0.0, {"l2": 0.0, "linf_hat": 0.0, "ball": 0.0}) if profile else 0.0
    ball = ball_l1_sup(hh, h.grid, j, k)
    b2 = _b2_cheap(t1, w) + w["pre"] * w["ball"] * ball
    best = min(b1, b2)
    if thresholds and best > 0:
        window = cutoff_phii_interval(k, j - 2, j + 2, h.grid.radius)
        amp = np.abs(h.hat)
        peak = amp.max()
        for i in range(1, thresholds + 1):
            sel = amp >= peak * 2.0**-i
            g2 = SpectralField(h.grid, ifft(np.where(sel, h.hat, 0.0)) * window)
            if h.real:
                g2 = SpectralField(h.grid, g2.values.real)
            g1 = SpectralField(h.grid, h.values - g2.values)
            g1h, g2h = continuum_hat(g1), continuum_hat(g2)
            c1 = w["pre"] * (w["l2_1"] * _l2(g1) + w["linf"] * float(np.abs(g1h).max()))
            c2 = _b2_cheap({"l2": _l2(g2), "linf_hat": float(np.abs(g2h).max())}, w)
            if c1 + c2 >= min(best, upper):
                continue
            cand = c1 + c2 + w["pre"] * w["ball"] * ball_l1_sup(g2h, h.grid, j, k)
            best = min(best, cand)
    if profile:
        return NormProfile(k, j, b1, b2, best, {**t1, "ball": ball})
    return best


def _pieces(f: SpectralField, k_range, j_max):
    g = f.grid
    k_range = frequency_range(g) if k_range is None else tuple(k_range)
    j_max = spatial_range(g) if j_max is None else int(j_max)
    kmag = g.kfull()
    r = g.radius
    for k in range(k_range[0], k_range[1] + 1):
        pk = f.multiply(cutoff_phi_k(k, kmag))
        if not np.any(pk.hat):
            continue
        vals = pk.values
        for j in range(max(-k, 0), j_max + 1):
            piece = SpectralField(g, cutoff_phii(k, j, r) * vals)
            yield k, j, piece


def _weighted_sup(f, k_range, j_max, weight: Callable[[int, int], float], thresholds=8):
    cands = []
    for k, j, piece in _pieces(f, k_range, j_max):
        wt = weight(k, j)
        cands.append((wt * b1_norm(piece, k, j), wt, k, j, piece))
    cands.sort(key=lambda c: -c[0])
    best = 0.0
    for ub, wt, k, j, piece in cands:
        if ub <= best:
            break
        # b <= b1, so atoms with small b1 cannot raise the sup
        val = wt * b_norm(piece, k, j, thresholds=thresholds)
        best = max(best, val)
    return best


def z_norm(f: SpectralField, k_range=None, j_max=None, thresholds: int = 8) -> float:
    """sup over (k, j) of the B_{k,j} surrogate of phii_j^(k) P_k f."""
    return _weighted_sup(f, k_range, j_max, lambda k, j: 1.0, thresholds)


def zJ_norm(f: SpectralField, J: float, k_range=None, j_max=None, thresholds: int = 8) -> float:
    return _weighted_sup(f, k_range, j_max, lambda k, j: 2.0 ** min(0.0, 2 * J - 2 * j), thresholds)


def norm_profiles(f: SpectralField, k_range=None, j_max=None, thresholds: int = 8) -> list[NormProfile]:
    """Per-index breakdown (all atoms, no pruning)."""
    return [b_norm(piece, k, j, thresholds=thresholds, profile=True)
            for k, j, piece in _pieces(f, k_range, j_max)]


# -- symbols and multipliers ---------------------------------------------------------

def _multi_indices(n):
    for order in range(n + 1):
        for rho in itertools.product(range(order + 1), repeat=3):
            if sum(rho) == order:
                yield rho


def _stencil(m):
    """Central difference of order m with unit step: offsets and weights."""
    offs = np.array([m / 2.0 - l for l in range(m + 1)])
    wts = np.array([(-1) ** l * math.comb(m, l) for l in range(m + 1)], dtype=float)
    return offs, wts


def symbol_norm(q: Callable, n: int = 4, shells=None, directions: int = 24, seed: int = 0,
                rel_step: float = 1e-3, growth_tol: float = 0.1) -> float:
    """Estimate sup |xi|^|rho| |D^rho q(xi)| over |rho| <= n (n <= 4) by finite differences.

    ``q`` maps arrays of shape (..., 3) to values.  Sampling uses log-spaced
    shells with random directions.  Returns ``math.inf`` when the shell
    maxima keep growing toward 0 or infinity (an unbounded symbol).
    """
    if not 0 <= n <= 4:
        raise DyadicError("finite-difference symbol norms support n <= 4")
    shells = np.geomspace(1e-6, 1e6, 25) if shells is None else np.asarray(shells, dtype=float)
    rng = np.random.default_rng(seed)
    e = rng.normal(size=(directions, 3))
    e /= np.linalg.norm(e, axis=1)[:, None]
    pts = shells[:, None, None] * e[None, :, :]          # (S, M, 3)
    rad = np.linalg.norm(pts, axis=-1)
    shell_max = np.zeros(len(shells))
    for rho in _multi_indices(n):
        h = rel_step * rad
        acc = np.zeros(rad.shape, dtype=complex)
        sts = [_stencil(m) for m in rho]
        for combo in itertools.product(*[range(len(s[0])) for s in sts]):
            off = np.array([sts[a][0][combo[a]] for a in range(3)])
            wt = np.prod([sts[a][1][combo[a]] for a in range(3)])
            acc += wt * np.asarray(q(pts + h[..., None] * off), dtype=complex)
        order = sum(rho)
        val = np.abs(acc) / h**order * rad**order
        shell_max = np.maximum(shell_max, val.max(axis=1))
    # growth check on the outermost and innermost decades
    lo, hi = shell_max[:3], shell_max[-3:]
    span = math.log(shells[-1] / shells[-3])
    for end in (hi, lo[::-1]):
        if end[0] > 0 and math.log(max(end[-1], 1e-300) / end[0]) / span > growth_tol:
            return math.inf
    if not np.all(np.isfinite(shell_max)):
        return math.inf
    return float(shell_max.max())


def symbol_on_grid(q: Callable, grid: Grid) -> np.ndarray:
    kx, ky, kz = np.broadcast_arrays(*grid.kvec())
    xi = np.stack([kx, ky, kz], axis=-1)
    with np.errstate(all="ignore"):
        vals = np.asarray(q(xi), dtype=complex)
    vals = np.broadcast_to(vals, grid.shape).copy()
    bad = ~np.isfinite(vals)
    vals[bad] = 0.0
    return vals


def apply_multiplier(q: Callable, f: SpectralField) -> SpectralField:
    """Fourier multiplier with symbol q; undefined values (the origin) are set to zero."""
    vals = symbol_on_grid(q, f.grid)
    real = f.real and _is_real_even(vals)
    out = SpectralField(f.grid, hat=vals * f.hat, real=real)
    return out


def _is_real_even(vals):
    flipped = np.roll(np.flip(vals, axis=(0, 1, 2)), 1, axis=(0, 1, 2))
    return bool(np.allclose(vals, flipped.conj(), atol=1e-14, rtol=0))


def _norm(xi):
    return np.linalg.norm(xi, axis=-1)


def standard_symbols() -> dict:
    """Five Calderon-Zygmund symbols (before normalization)."""
    def riesz1(xi):
        return 1j * xi[..., 0] / _norm(xi)

    def riesz12(xi):
        return -xi[..., 0] * xi[..., 1] / _norm(xi) ** 2

    def bessel_ratio(xi):
        r = _norm(xi)
        return r / np.sqrt(1.0 + r * r)

    def axial(xi):
        return xi[..., 2] ** 2 / _norm(xi) ** 2

    def angular(xi):
        return (xi[..., 0] ** 4 + xi[..., 1] ** 4 + xi[..., 2] ** 4) / _norm(xi) ** 4

    return {"riesz1": riesz1, "riesz12": riesz12, "bessel_ratio": bessel_ratio,
            "axial": axial, "angular": angular}


def normalized_multipliers(n: int = 4) -> dict:
    """The standard symbols divided by their estimated symbol norms."""
    out = {}
    for name, q in standard_symbols().items():
        c = symbol_norm(q, n)
        out[name] = (lambda q, c: (lambda xi: q(xi) / c))(q, c)
    return out
