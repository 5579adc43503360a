import math

import numpy as np
import pytest
from scipy.integrate import quad

from resokg.dyadic import (
    DyadicError,
    DyadicIndex,
    X_k,
    apply_multiplier,
    atom_decompose,
    b1_norm,
    b2_norm,
    b_norm,
    ball_l1_sup,
    continuum_hat,
    cutoff_phi_interval,
    cutoff_phi_k,
    cutoff_phii,
    cutoff_phii_interval,
    frequency_range,
    norm_profiles,
    phi,
    project,
    reconstruct,
    standard_symbols,
    symbol_norm,
    z_norm,
    zJ_norm,
)
from resokg.fields import Grid, SpectralField, annulus_noise, gaussian_bump


@pytest.fixture(scope="module")
def grid():
    return Grid(32, 8 * math.pi)


@pytest.fixture(scope="module")
def field(grid):
    rng = np.random.default_rng(11)
    f = annulus_noise(grid, rng, 0.3, 2.5)
    return SpectralField(grid, f.values * gaussian_bump(grid, 3.0).values)


def test_bump_shape():
    x = np.linspace(-2, 2, 4001)
    v = phi(x)
    assert np.all(v[np.abs(x) <= 1.25] == 1.0)
    assert np.all(v[np.abs(x) >= 1.6] == 0.0)
    assert np.allclose(v, v[::-1])
    assert np.all((v >= 0) & (v <= 1))


def test_frequency_partition_of_unity():
    r = np.geomspace(2.0**-35, 2.0**35, 20001)
    total = sum(cutoff_phi_k(k, r) for k in range(-40, 41))
    assert np.abs(total - 1).max() < 1e-12


@pytest.mark.parametrize("k", [-5, -1, 0, 2, 6])
def test_spatial_partition_of_unity(k):
    r = np.concatenate([[0.0], np.geomspace(1e-3, 2.0**20, 5001)])
    total = sum(cutoff_phii(k, j, r) for j in range(max(-k, 0), 25))
    assert np.abs(total - 1).max() < 1e-12


def test_cutoff_supports():
    r = np.linspace(0, 100, 100001)
    for k in range(-3, 5):
        assert np.all(cutoff_phi_k(k, r)[r >= 2.0 ** (k + 1)] == 0)
    with pytest.raises(DyadicError):
        cutoff_phii(2, -3, r)
    with pytest.raises(DyadicError):
        DyadicIndex(-3, 2)


def test_window_is_one_on_atom_support():
    r = np.geomspace(1e-3, 1e4, 20001)
    for k in (-3, 0, 4):
        for j in range(max(-k, 0), 8):
            sup = cutoff_phii(k, j, r) > 0
            w = cutoff_phii_interval(k, j - 2, j + 2, r)
            assert np.all(w[sup] == 1.0)


def test_vector_arguments():
    x = np.array([[0.3, 0.4, 0.0]])
    assert cutoff_phi_k(0, x)[0] == cutoff_phi_k(0, np.array([0.5, 0.5 + 1e-300]))[0]


def test_project_sum_and_orthogonality(grid, field):
    k0, k1 = frequency_range(grid)
    total = sum(project(field, k).hat for k in range(k0, k1 + 1))
    mean_free = field.hat.copy()
    mean_free[0, 0, 0] = 0
    assert np.linalg.norm(total - mean_free) < 1e-12 * np.linalg.norm(mean_free)
    a, b = project(field, 0), project(field, 2)
    assert np.abs(project(a, 2).values).max() < 1e-14
    assert np.abs(project(b, 0).values).max() < 1e-14
    for k in range(k0, k1 + 1):
        pk = project(field, k)
        assert pk.l2() <= field.l2()
        assert np.allclose(project(pk, (k - 1, k + 1)).hat, pk.hat, atol=1e-12 * np.abs(pk.hat).max() + 1e-300)
    with pytest.raises(DyadicError):
        cutoff_phi_interval(2, 1, 1.0)


def test_atom_reconstruction(grid, field):
    dec = atom_decompose(field)
    rec = reconstruct(dec, grid)
    mean_free = field.hat.copy()
    mean_free[0, 0, 0] = 0
    assert np.linalg.norm(rec.hat - mean_free) < 1e-10 * np.linalg.norm(mean_free)
    assert not dec.j_max_warning
    assert atom_decompose(field, j_max=1).j_max_warning


def test_zero_field(grid):
    z = SpectralField.zeros(grid)
    assert atom_decompose(z).atoms == []
    assert z_norm(z) == 0.0
    assert b_norm(z, 0, 0) == 0.0


def test_localized_atom_concentrates(grid):
    # a frequency-localized packet near the origin in space
    f = gaussian_bump(grid, 3.0)
    X = grid.centered_mesh()[0]
    f = SpectralField(grid, f.values * np.cos(1.0 * X))
    atom = project(f, 0)
    piece = SpectralField(grid, cutoff_phii(0, 2, grid.radius) * atom.values)
    dec = atom_decompose(piece)
    mass = {(a.index.k, a.index.j): np.sum(np.abs(a.data.values) ** 2) for a in dec.atoms}
    near = sum(v for (k, j), v in mass.items() if abs(k) <= 1 and abs(j - 2) <= 1)
    assert near >= 0.9 * sum(mass.values())


def test_membership_sets():
    assert X_k(0, 3, -20)
    assert X_k(0, 20, 18)
    assert not X_k(0, 20, 5)


def test_ball_indicator_volume():
    g = Grid(64, 32 * math.pi)   # lattice spacing 1/16
    kx, ky, kz = np.meshgrid(*(np.fft.fftfreq(64, 1 / 64) * g.dk,) * 3, indexing="ij")
    rho = 1.0
    fhat = (np.sqrt(kx**2 + ky**2 + kz**2) <= rho).astype(float)
    val = ball_l1_sup(fhat, g, j=0, k=0)   # R = 1 only
    assert val == pytest.approx(4 * math.pi / 3 * rho**3 / rho**2, rel=0.1)
    assert ball_l1_sup(2 * fhat, g, 0, 0) == pytest.approx(2 * val, rel=1e-12)


def test_ball_term_at_largest_radius_bounds_full_l1(grid, field):
    fh = continuum_hat(project(field, 1))
    R = 2.0
    fixed = ball_l1_sup(fh, grid, 0, 1, r_values=[R])
    total = np.abs(fh).sum() * grid.dk**3 / R**2
    assert fixed <= total * (1 + 1e-12)
    full = ball_l1_sup(fh, grid, 2, 1)
    assert full >= fixed


def test_ball_refinement_monotone(grid, field):
    fh = continuum_hat(project(field, 0))
    vals = [ball_l1_sup(fh, grid, 3, 0, stride=s) for s in (4, 2, 1)]
    assert vals[0] <= vals[1] <= vals[2]


def test_norm_relations(grid, field):
    piece = SpectralField(grid, cutoff_phii(0, 2, grid.radius) * project(field, 0).values)
    b1, b2 = b1_norm(piece, 0, 2), b2_norm(piece, 0, 2)
    b = b_norm(piece, 0, 2)
    assert 0 <= b <= min(b1, b2) * (1 + 1e-12)
    assert b_norm(3.0 * piece, 0, 2) == pytest.approx(3 * b, rel=1e-9)


def test_k0_reduces_to_simple_weights(grid, field):
    piece = SpectralField(grid, cutoff_phii(0, 2, grid.radius) * project(field, 0).values)
    l2 = math.sqrt(grid.cell_volume * np.sum(piece.values**2))
    linf = np.abs(continuum_hat(piece)).max()
    assert b1_norm(piece, 0, 2) == pytest.approx(2 * (2 ** (1.01 * 2) * l2 + linf), rel=1e-12)


def test_gaussian_terms_against_quadrature():
    g = Grid(64, 16 * math.pi)
    h = gaussian_bump(g, 1.0)
    l2 = math.pi ** 0.75
    linf = (2 * math.pi) ** 1.5
    radial, _ = quad(lambda r: math.exp(-r * r / 2) * r * r, 0, 1)
    ball = linf * 4 * math.pi * radial
    # b1 at (0, 0): 2 * (l2 + linf); b2 adds the ball term with weight 1
    assert b1_norm(h, 0, 0) == pytest.approx(2 * (l2 + linf), rel=1e-6)
    assert b2_norm(h, 0, 0) == pytest.approx(2 * (l2 + linf + ball), rel=2e-3)


def test_homogeneity_and_weights(grid, field):
    z = z_norm(field)
    assert z > 0
    assert z_norm(-2.5 * field) == pytest.approx(2.5 * z, rel=1e-9)
    assert zJ_norm(field, J=100) == pytest.approx(z, rel=1e-12)
    assert zJ_norm(field, J=0) <= z
    profiles = norm_profiles(field)
    assert max(p.b for p in profiles) == pytest.approx(z, rel=1e-12)


def test_symbol_norms():
    one = lambda xi: np.ones(xi.shape[:-1])
    assert symbol_norm(one) == pytest.approx(1.0, abs=1e-6)
    assert symbol_norm(lambda xi: np.linalg.norm(xi, axis=-1)) == math.inf
    assert symbol_norm(lambda xi: 1 / np.linalg.norm(xi, axis=-1)) == math.inf
    r = symbol_norm(standard_symbols()["riesz1"])
    assert 1.0 <= r < 100


def test_identity_multiplier(grid, field):
    out = apply_multiplier(lambda xi: np.ones(xi.shape[:-1]), field)
    assert np.allclose(out.values, field.values, atol=1e-14)
    assert out.real
