import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resokg.params import (
    ParameterError,
    ParameterTable,
    SignedIndex,
    all_signed_indices,
    check_nonresonance,
    hessian_det,
    lam,
    phase_hessian,
    phase_phi,
    phase_xi,
    random_admissible_table,
)


def test_lambda_values():
    t = ParameterTable((1.0,), (1.0,))
    assert lam(t, 1, [0.0, 0.0, 0.0]) == 1.0
    assert lam(t, 1, [1.0, 1.0, 1.0]) == pytest.approx(2.0, abs=1e-15)
    t2 = ParameterTable((2.0,), (0.5,))
    assert lam(t2, 1, [4.0, 0.0, 0.0]) == pytest.approx(math.sqrt(8.0), rel=1e-15)


def test_invalid_species_and_table():
    t = ParameterTable((1.0, 2.0), (1.0, 1.5), A=3.0)
    with pytest.raises(ParameterError):
        lam(t, 3, [0.0, 0.0, 0.0])
    with pytest.raises(ParameterError):
        ParameterTable((1.0,), (1.0, 2.0))
    with pytest.raises(ParameterError):
        ParameterTable((0.01,), (1.0,), A=10.0)
    with pytest.raises(ParameterError):
        SignedIndex(1, 0)


def test_signed_index_parse_roundtrip():
    for idx in all_signed_indices(3):
        assert SignedIndex.parse(str(idx)) == idx
    with pytest.raises(ParameterError):
        SignedIndex.parse("2")


def test_phase_at_origin():
    t = ParameterTable((1.0, 1.5, 2.7), (1.0, 2.0, 0.5), A=4.0)
    zero = np.zeros(3)
    val = phase_phi(t, 3, SignedIndex(1, 1), SignedIndex(2, 1), zero, zero)
    assert val == pytest.approx(2.7 - 1.0 - 1.5)


def test_phase_cancellation_and_value():
    t = ParameterTable((1.0, 1.0, 1.0), (1.0, 1.0, 1.0))
    xi = np.array([0.3, -0.2, 0.9])
    val = phase_phi(t, 1, SignedIndex(1, 1), SignedIndex(1, -1), xi, np.zeros(3))
    assert val == pytest.approx(1.0, abs=1e-14)
    val = phase_phi(t, 1, SignedIndex(2, 1), SignedIndex(3, 1), [1.0, 0, 0], [0.5, 0, 0])
    assert val == pytest.approx(math.sqrt(2) - 2 * math.sqrt(1.25), abs=1e-14)


def test_phase_xi_trivial_zeros():
    t = ParameterTable((1.3,), (0.7,))
    mu = SignedIndex(1, 1)
    assert np.allclose(phase_xi(t, mu, mu, np.zeros(3), np.zeros(3)), 0.0)
    eta = np.array([0.4, -1.1, 2.0])
    assert np.allclose(phase_xi(t, mu, mu, 2 * eta, eta), 0.0, atol=1e-15)


def _fd_grad(f, eta, h):
    g = np.zeros(3)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        g[i] = (f(eta + e) - f(eta - e)) / (2 * h)
    return g


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_phase_xi_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    t = random_admissible_table(rng, d=3, A=5.0)
    signed = all_signed_indices(3)
    for _ in range(100):
        mu, nu = (signed[i] for i in rng.integers(len(signed), size=2))
        xi, eta = rng.normal(size=(2, 3))
        f = lambda e: phase_phi(t, 1, mu, nu, xi, e)
        fd = _fd_grad(f, eta, 1e-5)
        an = phase_xi(t, mu, nu, xi, eta)
        assert np.linalg.norm(an - fd) <= 1e-6 * max(1.0, np.linalg.norm(an))


@pytest.mark.parametrize("seed", [0, 1])
def test_hessian_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    t = random_admissible_table(rng, d=2, A=4.0)
    signed = all_signed_indices(2)
    h = 1e-4
    for _ in range(100):
        mu, nu = (signed[i] for i in rng.integers(len(signed), size=2))
        xi, eta = rng.normal(size=(2, 3))
        fd = np.zeros((3, 3))
        for i, j in itertools.product(range(3), repeat=2):
            ei, ej = np.eye(3)[i] * h, np.eye(3)[j] * h
            f = lambda e: phase_phi(t, 2, mu, nu, xi, e)
            fd[i, j] = (f(eta + ei + ej) - f(eta + ei - ej) - f(eta - ei + ej) + f(eta - ei - ej)) / (4 * h * h)
        an = phase_hessian(t, mu, nu, xi, eta)
        assert np.allclose(an, an.T)
        d_an, d_fd = np.linalg.det(an), np.linalg.det(fd)
        assert abs(d_an - d_fd) <= 1e-4 * max(abs(d_an), np.abs(an).max() ** 3)


def test_hessian_det_decreases_along_ray():
    t = ParameterTable((1.0, 1.5), (1.0, 2.0), A=4.0)
    mu, nu = SignedIndex(1, 1), SignedIndex(2, 1)
    xi = np.array([0.5, 0.2, 0.0])
    e = np.array([0.3, 0.9, 0.1])
    e /= np.linalg.norm(e)
    radii = np.geomspace(5.0, 500.0, 30)
    dets = np.abs([hessian_det(t, mu, nu, xi, r * e) for r in radii])
    assert np.all(np.diff(dets) < 0)


def test_check_nonresonance_examples():
    assert check_nonresonance(ParameterTable((1.0, 1.0), (1.0, 2.0), A=2.0)).passed
    rep = check_nonresonance(ParameterTable((5.0, 1.0), (2.0, 1.0), A=10.0))
    assert not rep.passed
    ordering = [v for v in rep.violations if v.condition == "ordering"]
    assert any(v.value == pytest.approx(-1.0) for v in ordering)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.25, 4.0), st.lists(st.floats(0.25, 4.0), min_size=1, max_size=4))
def test_equal_masses_pass_mass_sum(b, cs):
    t = ParameterTable((b,) * len(cs), tuple(cs), A=4.0)
    rep = check_nonresonance(t)
    assert not [v for v in rep.violations if v.condition == "mass-sum"]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0.2, 5.0), st.floats(0.2, 5.0)), min_size=2, max_size=4),
       st.randoms(use_true_random=False))
def test_check_nonresonance_permutation_invariant(pairs, rnd):
    b, c = zip(*pairs)
    t = ParameterTable(b, c, A=5.0)
    perm = list(range(1, len(pairs) + 1))
    rnd.shuffle(perm)
    assert check_nonresonance(t).passed == check_nonresonance(t.permuted(perm)).passed
    assert len(check_nonresonance(t).violations) == len(check_nonresonance(t.permuted(perm)).violations)


def test_lambda_radially_increasing():
    t = ParameterTable((0.7,), (1.9,))
    s = np.linspace(0, 10, 200)
    vals = lam(t, 1, np.stack([s, 0 * s, 0 * s], -1))
    assert vals[0] == 0.7
    assert np.all(np.diff(vals) > 0)
