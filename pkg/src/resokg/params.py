"""System parameters, dispersion relations and interaction phases.

Species are numbered ``1..d`` throughout, matching the way the systems are
written down; arrays are indexed with ``sigma - 1`` internally.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np


class ParameterError(ValueError):
    """Raised for invalid tables or species indices."""


@dataclass(frozen=True)
class ParameterTable:
    """Masses ``b``, speeds ``c`` and the bound ``A`` for ``d`` species."""

    b: tuple[float, ...]
    c: tuple[float, ...]
    A: float = 10.0
    D: float = 10.0

    def __post_init__(self):
        b = tuple(float(x) for x in self.b)
        c = tuple(float(x) for x in self.c)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        if len(b) == 0:
            raise ParameterError("need at least one species")
        if len(b) != len(c):
            raise ParameterError(f"len(b)={len(b)} but len(c)={len(c)}")
        if not self.A >= 1.0:
            raise ParameterError(f"A must be >= 1, got {self.A}")
        lo, hi = 1.0 / self.A, self.A
        for name, vals in (("b", b), ("c", c)):
            for i, v in enumerate(vals, start=1):
                if not lo <= v <= hi:
                    raise ParameterError(f"{name}_{i}={v} outside [1/A, A]=[{lo}, {hi}]")

    @property
    def d(self) -> int:
        return len(self.b)

    def species(self):
        return range(1, self.d + 1)

    def check_species(self, sigma: int) -> int:
        if not (isinstance(sigma, (int, np.integer)) and 1 <= sigma <= self.d):
            raise ParameterError(f"invalid species index {sigma!r} for d={self.d}")
        return int(sigma)

    def bc(self, sigma: int) -> tuple[float, float]:
        s = self.check_species(sigma)
        return self.b[s - 1], self.c[s - 1]

    def permuted(self, perm: Sequence[int]) -> "ParameterTable":
        """Table with species reordered; ``perm`` lists old indices (1-based)."""
        return ParameterTable(
            b=tuple(self.b[p - 1] for p in perm),
            c=tuple(self.c[p - 1] for p in perm),
            A=self.A,
            D=self.D,
        )


@dataclass(frozen=True, order=True)
class SignedIndex:
    """A wave label ``(sigma, iota)``; ``iota=-1`` marks the conjugated wave."""

    sigma: int
    iota: int = 1

    def __post_init__(self):
        if self.iota not in (1, -1):
            raise ParameterError(f"iota must be +1 or -1, got {self.iota!r}")
        if not (isinstance(self.sigma, (int, np.integer)) and self.sigma >= 1):
            raise ParameterError(f"invalid species index {self.sigma!r}")

    def __str__(self):
        return f"{self.sigma}{'+' if self.iota > 0 else '-'}"

    @classmethod
    def parse(cls, text: str) -> "SignedIndex":
        text = text.strip()
        if not text or text[-1] not in "+-":
            raise ParameterError(f"cannot parse signed index {text!r}")
        return cls(int(text[:-1]), 1 if text[-1] == "+" else -1)


def all_signed_indices(d: int) -> list[SignedIndex]:
    return [SignedIndex(s, i) for i in (1, -1) for s in range(1, d + 1)]


class Violation(NamedTuple):
    condition: str
    indices: tuple[int, ...]
    value: float


@dataclass
class ConditionReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def rows(self):
        for v in self.violations:
            yield [v.condition, " ".join(str(i) for i in v.indices), v.value]


def _check_table_index(table: ParameterTable, idx: SignedIndex) -> SignedIndex:
    table.check_species(idx.sigma)
    return idx


def lam(table: ParameterTable, sigma: int, xi) -> np.ndarray:
    """Dispersion relation sqrt(b^2 + c^2 |xi|^2); ``xi`` has trailing dim 3."""
    b, c = table.bc(sigma)
    xi = np.asarray(xi, dtype=float)
    return np.sqrt(b * b + c * c * np.sum(xi * xi, axis=-1))


def lam_radial(table: ParameterTable, sigma: int, s) -> np.ndarray:
    b, c = table.bc(sigma)
    s = np.asarray(s, dtype=float)
    return np.sqrt(b * b + c * c * s * s)


def phase_phi(table: ParameterTable, sigma: int, mu: SignedIndex, nu: SignedIndex, xi, eta):
    """Interaction phase of output ``sigma`` from legs ``mu`` at xi-eta and ``nu`` at eta."""
    table.check_species(sigma)
    _check_table_index(table, mu)
    _check_table_index(table, nu)
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    return (
        lam(table, sigma, xi)
        - mu.iota * lam(table, mu.sigma, xi - eta)
        - nu.iota * lam(table, nu.sigma, eta)
    )


def phase_xi(table: ParameterTable, mu: SignedIndex, nu: SignedIndex, xi, eta) -> np.ndarray:
    """Gradient of the phase in eta; independent of the output species."""
    _check_table_index(table, mu)
    _check_table_index(table, nu)
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    b1, c1 = table.bc(mu.sigma)
    b2, c2 = table.bc(nu.sigma)
    w = eta - xi
    l1 = np.sqrt(b1 * b1 + c1 * c1 * np.sum(w * w, axis=-1))[..., None]
    l2 = np.sqrt(b2 * b2 + c2 * c2 * np.sum(eta * eta, axis=-1))[..., None]
    return -mu.iota * c1 * c1 * w / l1 - nu.iota * c2 * c2 * eta / l2


def _lam_hessian(b: float, c: float, x: np.ndarray) -> np.ndarray:
    # Hessian of sqrt(b^2 + c^2|x|^2): c^2/L (I - c^2 x x^T / L^2)
    L = np.sqrt(b * b + c * c * np.sum(x * x, axis=-1))[..., None, None]
    outer = x[..., :, None] * x[..., None, :]
    eye = np.eye(3)
    return c * c / L * (eye - c * c * outer / (L * L))


def phase_hessian(table: ParameterTable, mu: SignedIndex, nu: SignedIndex, xi, eta) -> np.ndarray:
    """The 3x3 matrix of second eta-derivatives of the phase."""
    _check_table_index(table, mu)
    _check_table_index(table, nu)
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    b1, c1 = table.bc(mu.sigma)
    b2, c2 = table.bc(nu.sigma)
    return -mu.iota * _lam_hessian(b1, c1, xi - eta) - nu.iota * _lam_hessian(b2, c2, eta)


def hessian_det(table: ParameterTable, mu: SignedIndex, nu: SignedIndex, xi, eta):
    return np.linalg.det(phase_hessian(table, mu, nu, xi, eta))


def check_nonresonance(table: ParameterTable, tol: float = 0.0) -> ConditionReport:
    """Check the three non-resonance conditions over all index tuples.

    ``tol`` controls what counts as equal parameters in the second
    condition; the default treats only bitwise-equal values as equal.
    """
    report = ConditionReport()
    A = table.A
    b, c = table.b, table.c
    idx = range(table.d)
    for s1, s2, s3 in itertools.product(idx, repeat=3):
        val = abs(b[s1] + b[s2] - b[s3])
        if val < 1.0 / A:
            report.violations.append(Violation("mass-sum", (s1 + 1, s2 + 1, s3 + 1), val))
    for s1, s2 in itertools.product(idx, repeat=2):
        for name, vals in (("speed-gap", c), ("mass-gap", b)):
            gap = abs(vals[s1] - vals[s2])
            if gap > tol and gap < 1.0 / A:
                report.violations.append(Violation(name, (s1 + 1, s2 + 1), gap))
        val = (c[s1] - c[s2]) * (c[s1] ** 2 * b[s2] - c[s2] ** 2 * b[s1])
        if val < 0:
            report.violations.append(Violation("ordering", (s1 + 1, s2 + 1), val))
    return report


def random_admissible_table(rng: np.random.Generator, d: int = 2, A: float = 4.0,
                            equal_masses: bool = False, max_tries: int = 10000) -> ParameterTable:
    """Draw a table passing :func:`check_nonresonance` by rejection."""
    for _ in range(max_tries):
        c = rng.uniform(1.0 / A, A, size=d)
        if equal_masses:
            b = np.full(d, rng.uniform(1.0 / A, A))
        else:
            b = rng.uniform(1.0 / A, A, size=d)
        table = ParameterTable(tuple(b), tuple(c), A=A)
        if check_nonresonance(table).passed:
            return table
    raise ParameterError("could not draw an admissible table")
