"""Periodic spectral fields on a cubic box.

Arrays are indexed ``[..., x, y, z]`` with any number of leading component
axes.  The discrete transform is the unitary one, so the box L2 norm of a
field is ``sqrt(dx^3 * sum |fhat|^2)``.  Derivative wavevectors have their
Nyquist entries set to zero, which keeps odd derivatives of real fields
real and makes every multiplier a function of the same wavevector.
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.fft as sfft

MAGIC = b"RKG1"
MAX_SOBOLEV_ORDER = 12

_workers = None


def set_threads(n: int | None) -> None:
    """Thread count used by the transforms (None: RESOKG_THREADS or 1)."""
    global _workers
    _workers = None if n is None else max(1, int(n))


def threads() -> int:
    if _workers is not None:
        return _workers
    try:
        return max(1, int(os.environ.get("RESOKG_THREADS", "1")))
    except ValueError:
        return 1


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    n: int
    L: float

    def __post_init__(self):
        if self.n < 8 or self.n & (self.n - 1):
            raise GridError(f"n must be a power of two >= 8, got {self.n}")
        if not self.L > 0:
            raise GridError(f"L must be positive, got {self.L}")

    @property
    def shape(self):
        return (self.n, self.n, self.n)

    @property
    def dx(self) -> float:
        return self.L / self.n

    @property
    def dk(self) -> float:
        return 2.0 * math.pi / self.L

    @property
    def cell_volume(self) -> float:
        return self.dx**3

    @cached_property
    def x1(self) -> np.ndarray:
        return np.arange(self.n) * self.dx

    @cached_property
    def k1(self) -> np.ndarray:
        k = sfft.fftfreq(self.n, d=1.0 / self.n) * self.dk
        k[self.n // 2] = 0.0
        return k

    @cached_property
    def k1_half(self) -> np.ndarray:
        return sfft.rfftfreq(self.n, d=1.0 / self.n) * self.dk * (np.arange(self.n // 2 + 1) < self.n // 2)

    def mesh(self):
        """Physical coordinates in [0, L)."""
        return np.meshgrid(self.x1, self.x1, self.x1, indexing="ij")

    def centered_mesh(self):
        """Coordinates in [-L/2, L/2), i.e. periodic displacement from the origin."""
        x = np.where(self.x1 < self.L / 2, self.x1, self.x1 - self.L)
        return np.meshgrid(x, x, x, indexing="ij")

    @cached_property
    def radius(self) -> np.ndarray:
        """Periodic distance to the origin."""
        X, Y, Z = self.centered_mesh()
        return np.sqrt(X * X + Y * Y + Z * Z)

    def kvec(self, half: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        k3 = self.k1_half if half else self.k1
        return (self.k1[:, None, None], self.k1[None, :, None], k3[None, None, :])

    def kmag(self, half: bool = False) -> np.ndarray:
        kx, ky, kz = self.kvec(half)
        return np.sqrt(kx * kx + ky * ky + kz * kz)

    def kfull(self) -> np.ndarray:
        """Full (unzeroed) lattice frequencies, used for mode bookkeeping."""
        k = sfft.fftfreq(self.n, d=1.0 / self.n) * self.dk
        return np.sqrt(k[:, None, None] ** 2 + k[None, :, None] ** 2 + k[None, None, :] ** 2)

    @cached_property
    def dealias_full(self) -> np.ndarray:
        return self._dealias(False)

    @cached_property
    def dealias_half(self) -> np.ndarray:
        return self._dealias(True)

    def _dealias(self, half):
        idx = sfft.fftfreq(self.n, d=1.0 / self.n)
        iz = sfft.rfftfreq(self.n, d=1.0 / self.n) if half else idx
        r2 = idx[:, None, None] ** 2 + idx[None, :, None] ** 2 + iz[None, None, :] ** 2
        return r2 < (self.n / 3.0) ** 2


# -- raw transforms --------------------------------------------------------------

_AX = (-3, -2, -1)


def fft(a):
    return sfft.fftn(a, axes=_AX, norm="ortho", workers=threads())


def ifft(a):
    return sfft.ifftn(a, axes=_AX, norm="ortho", workers=threads())


def rfft(a):
    return sfft.rfftn(a, axes=_AX, norm="ortho", workers=threads())


def irfft(a, n):
    return sfft.irfftn(a, s=(n, n, n), axes=_AX, norm="ortho", workers=threads())


# -- fields ------------------------------------------------------------------------

class SpectralField:
    """A (possibly vector-valued) field with cached unitary transform."""

    __slots__ = ("grid", "_values", "_hat", "real")

    def __init__(self, grid: Grid, values=None, hat=None, real: bool | None = None):
        if (values is None) == (hat is None):
            raise ValueError("give exactly one of values or hat")
        self.grid = grid
        arr = values if values is not None else hat
        arr = np.asarray(arr)
        if arr.shape[-3:] != grid.shape:
            raise GridError(f"array shape {arr.shape} does not end with grid shape {grid.shape}")
        if values is not None:
            self._values = arr if np.iscomplexobj(arr) else arr.astype(float, copy=False)
            self._hat = None
            self.real = (not np.iscomplexobj(arr)) if real is None else bool(real)
        else:
            self._hat = arr.astype(complex, copy=False)
            self._values = None
            self.real = bool(real)

    @classmethod
    def zeros(cls, grid: Grid, components: tuple = ()):
        return cls(grid, np.zeros(components + grid.shape))

    @property
    def values(self) -> np.ndarray:
        if self._values is None:
            v = ifft(self._hat)
            self._values = v.real.copy() if self.real else v
        return self._values

    @property
    def hat(self) -> np.ndarray:
        if self._hat is None:
            self._hat = fft(self._values)
        return self._hat

    transform = hat

    def inverse_transform(self) -> np.ndarray:
        return self.values

    @property
    def components(self) -> tuple:
        return self.values.shape[:-3] if self._values is not None else self._hat.shape[:-3]

    def conj_symmetry_error(self) -> float:
        """max |fhat(k) - conj(fhat(-k))|, relative to max |fhat|."""
        h = self.hat
        flipped = np.roll(np.flip(h, axis=_AX), 1, axis=_AX)
        scale = max(np.abs(h).max(), 1e-300)
        return float(np.abs(h - flipped.conj()).max() / scale)

    def with_hat(self, hat, real=None) -> "SpectralField":
        return SpectralField(self.grid, hat=hat, real=self.real if real is None else real)

    def multiply(self, symbol, real_symbol: bool = True) -> "SpectralField":
        """Pointwise frequency multiplier; real-even symbols keep real fields real."""
        return self.with_hat(symbol * self.hat, real=self.real and real_symbol)

    def __add__(self, other):
        return SpectralField(self.grid, self.values + other.values)

    def __sub__(self, other):
        return SpectralField(self.grid, self.values - other.values)

    def __mul__(self, c):
        if isinstance(c, SpectralField):
            return SpectralField(self.grid, dealias_product(self.grid, self.values, c.values))
        return SpectralField(self.grid, self.values * c)

    __rmul__ = __mul__

    def l2(self) -> float:
        return l2_norm(self.grid, self.hat, spectral=True)

    def linf(self) -> float:
        return float(np.abs(self.values).max())

    def mean(self):
        return self.values.mean(axis=_AX)


def l2_norm(grid: Grid, a, spectral: bool = False) -> float:
    a = np.asarray(a)
    return float(math.sqrt(grid.cell_volume * np.sum(np.abs(a) ** 2)))


def dealias_product(grid: Grid, a, b):
    """Physical product with the 2/3-rule truncation applied to the result."""
    p = a * b
    if np.iscomplexobj(p):
        return ifft(fft(p) * grid.dealias_full)
    return irfft(rfft(p) * grid.dealias_half, grid.n)


def dealias(grid: Grid, a):
    if np.iscomplexobj(a):
        return ifft(fft(a) * grid.dealias_full)
    return irfft(rfft(a) * grid.dealias_half, grid.n)


def plane_wave(grid: Grid, m, amplitude=1.0) -> SpectralField:
    """amplitude * exp(i xi.x) with xi = (2 pi / L) m for an integer triple m."""
    X, Y, Z = grid.mesh()
    kx, ky, kz = (grid.dk * mi for mi in m)
    return SpectralField(grid, amplitude * np.exp(1j * (kx * X + ky * Y + kz * Z)))


# -- differential operators and multipliers --------------------------------------

def _as_field(f, grid=None):
    if isinstance(f, SpectralField):
        return f
    return SpectralField(grid, np.asarray(f))


def gradient(f: SpectralField) -> SpectralField:
    kx, ky, kz = f.grid.kvec()
    h = f.hat
    return SpectralField(f.grid, hat=np.stack([1j * kx * h, 1j * ky * h, 1j * kz * h]), real=f.real)


def divergence(v: SpectralField) -> SpectralField:
    kx, ky, kz = v.grid.kvec()
    h = v.hat
    return SpectralField(v.grid, hat=1j * (kx * h[0] + ky * h[1] + kz * h[2]), real=v.real)


def curl(v: SpectralField) -> SpectralField:
    kx, ky, kz = v.grid.kvec()
    h = v.hat
    out = np.stack([
        1j * (ky * h[2] - kz * h[1]),
        1j * (kz * h[0] - kx * h[2]),
        1j * (kx * h[1] - ky * h[0]),
    ])
    return SpectralField(v.grid, hat=out, real=v.real)


def laplacian(f: SpectralField) -> SpectralField:
    return f.multiply(-f.grid.kmag() ** 2)


def abs_grad(f: SpectralField) -> SpectralField:
    return f.multiply(f.grid.kmag())


def _safe_inverse(k):
    out = np.zeros_like(k)
    nz = k > 0
    out[nz] = 1.0 / k[nz]
    return out


def inv_abs_grad(f: SpectralField) -> SpectralField:
    """|nabla|^{-1} with the zero mode annihilated."""
    return f.multiply(_safe_inverse(f.grid.kmag()))


def riesz_symbol(grid: Grid, j: int, half: bool = False) -> np.ndarray:
    """Symbol i xi_j / |xi| of R_j = d_j |nabla|^{-1} (zero at xi = 0)."""
    k = grid.kvec(half)
    return 1j * k[j] * _safe_inverse(grid.kmag(half))


def riesz(f: SpectralField, j: int) -> SpectralField:
    return SpectralField(f.grid, hat=riesz_symbol(f.grid, j) * f.hat, real=f.real)


def lam_symbol(grid: Grid, b: float, c: float, half: bool = False) -> np.ndarray:
    return np.sqrt(b * b + c * c * grid.kmag(half) ** 2)


def lam_multiplier(f: SpectralField, b: float, c: float) -> SpectralField:
    """sqrt(b^2 - c^2 Laplacian)."""
    return f.multiply(lam_symbol(f.grid, b, c))


DIFF_OPS = {
    "grad": gradient,
    "div": divergence,
    "curl": curl,
    "laplacian": laplacian,
    "abs_grad": abs_grad,
    "inv_abs_grad": inv_abs_grad,
}


def diff_op(f: SpectralField, tag: str, **kw) -> SpectralField:
    """Dispatch by name: grad, div, curl, laplacian, abs_grad, inv_abs_grad, riesz, lambda."""
    if tag in DIFF_OPS:
        return DIFF_OPS[tag](f)
    if tag == "riesz":
        return riesz(f, kw["j"])
    if tag == "lambda":
        return lam_multiplier(f, kw["b"], kw["c"])
    raise ValueError(f"unknown operator {tag!r}")


def kg_propagate(f: SpectralField, table, sigma: int, t: float, sign: int = 1) -> SpectralField:
    """Multiply by exp(sign * i t Lambda_sigma)."""
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    b, c = table.bc(sigma)
    phase = np.exp(sign * 1j * t * lam_symbol(f.grid, b, c))
    return SpectralField(f.grid, hat=phase * f.hat, real=False)


def sobolev_norm(f: SpectralField, N: float) -> float:
    if N < 0 or N > MAX_SOBOLEV_ORDER:
        raise ValueError(f"Sobolev order must lie in [0, {MAX_SOBOLEV_ORDER}]")
    w = (1.0 + f.grid.kmag() ** 2) ** (N / 2.0)
    return l2_norm(f.grid, w * f.hat)


def sobolev_tilde_norm(n: SpectralField, v: SpectralField, E: SpectralField, B: SpectralField, N: float) -> float:
    return sum(sobolev_norm(x, N) for x in (n, v, E, B))


# -- snapshots --------------------------------------------------------------------

def write_snapshot(path, f: SpectralField) -> None:
    """Scalar field to the little-endian snapshot format (x fastest)."""
    vals = f.values
    if vals.shape != f.grid.shape:
        raise GridError("snapshots hold scalar fields")
    data = np.asarray(vals, dtype="<c16").ravel(order="F")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IdB", f.grid.n, f.grid.L, 1 if f.real else 0))
        fh.write(data.tobytes())


def read_snapshot(path) -> SpectralField:
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head != MAGIC:
            raise GridError(f"{path}: bad magic {head!r}")
        n, L, real = struct.unpack("<IdB", fh.read(13))
        data = np.frombuffer(fh.read(), dtype="<c16")
    grid = Grid(int(n), float(L))
    if data.size != n**3:
        raise GridError(f"{path}: expected {n**3} values, found {data.size}")
    vals = data.reshape((n, n, n), order="F")
    if real:
        return SpectralField(grid, np.ascontiguousarray(vals.real))
    return SpectralField(grid, np.ascontiguousarray(vals))


def radial_spectrum(f: SpectralField, nbins: int | None = None):
    """Shell-summed |fhat|^2 dx^3 against lattice radius (for CSV export)."""
    g = f.grid
    k = g.kfull()
    nbins = nbins or g.n // 2
    edges = (np.arange(nbins + 1) + 0.5) * g.dk
    edges[0] = 0.0
    power = np.abs(f.hat) ** 2 * g.cell_volume
    if power.ndim > 3:
        power = power.reshape((-1,) + g.shape).sum(axis=0)
    idx = np.digitize(k.ravel(), edges) - 1
    ok = (idx >= 0) & (idx < nbins)
    spec = np.bincount(idx[ok], weights=power.ravel()[ok], minlength=nbins)
    centers = np.arange(nbins) * g.dk
    return centers, spec


# -- initial data helpers ------------------------------------------------------------

def gaussian_bump(grid: Grid, width: float = 1.0, center=None, amplitude: float = 1.0) -> SpectralField:
    """Periodized-distance Gaussian exp(-|x - x0|^2 / (2 width^2))."""
    X, Y, Z = grid.centered_mesh()
    if center is not None:
        X, Y, Z = (np.mod(A - c0 + grid.L / 2, grid.L) - grid.L / 2 for A, c0 in zip((X, Y, Z), center))
    return SpectralField(grid, amplitude * np.exp(-(X * X + Y * Y + Z * Z) / (2 * width * width)))


def annulus_noise(grid: Grid, rng: np.random.Generator, kmin: float, kmax: float,
                  amplitude: float = 1.0, components: tuple = ()) -> SpectralField:
    """Real random field with transform supported in kmin <= |xi| <= kmax, max-normalized."""
    k = grid.kfull()
    shape = components + grid.shape
    noise = rng.normal(size=shape)
    h = fft(noise) * ((k >= kmin) & (k <= kmax) & grid.dealias_full)
    vals = ifft(h).real
    peak = np.abs(vals).max()
    if peak > 0:
        vals *= amplitude / peak
    return SpectralField(grid, vals)
