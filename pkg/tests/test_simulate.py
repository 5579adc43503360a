import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resokg.fields import Grid, SpectralField, annulus_noise, plane_wave
from resokg.params import ParameterError, ParameterTable, SignedIndex, phase_phi
from resokg.simulate import (
    BETA,
    DomainError,
    InsufficientSpanError,
    IntegrationError,
    KGState,
    KGSystemSpec,
    Leg,
    MultiplierError,
    RunReport,
    bilinear_T,
    decay_fit,
    decay_report,
    em_constraints,
    em_dimensionalize,
    em_energy,
    em_identity_residual,
    em_initial_data,
    em_nondimensionalize,
    em_normal_form,
    em_normal_form_inverse,
    em_rhs,
    em_run,
    em_step,
    em_zero_state,
    em_zprime,
    energy_constant,
    kg_energy,
    kg_initial_data,
    kg_normal_form,
    kg_normal_form_inverse,
    kg_rhs,
    kg_run,
    kg_step,
    multi_indices,
    profile,
    simpson_weights,
    time_partition,
)


@pytest.fixture(scope="module")
def small():
    return Grid(16, 4 * math.pi)


@pytest.fixture(scope="module")
def table2():
    return ParameterTable((1.0, 1.5), (1.0, 0.7), A=4.0)


# -- Klein-Gordon -----------------------------------------------------------------------

def test_spec_symmetry_enforced(table2):
    rng = np.random.default_rng(0)
    d = table2.d
    g = rng.normal(size=(3, 3, 4, d, d, d))
    with pytest.raises(ParameterError):
        KGSystemSpec(table2, g, np.zeros((3, 3, d, d, d)), np.zeros((d, 5 * d, 5 * d)))
    spec = KGSystemSpec.random(table2, rng)
    assert np.allclose(spec.g, np.swapaxes(spec.g, 0, 1))
    assert np.allclose(spec.g, np.swapaxes(spec.g, 3, 4))
    assert np.allclose(spec.h, np.swapaxes(spec.h, 2, 3))
    assert KGSystemSpec.zeros(table2).is_linear
    with pytest.raises(ParameterError):
        KGSystemSpec(table2, np.zeros((3, 3, 4, 1, 1, 1)), spec.h, spec.Q)


def test_multi_indices_count():
    assert len(multi_indices(4)) == 35
    assert len(multi_indices(0)) == 1


def test_kg_rhs_trivial_cases(small, table2):
    rng = np.random.default_rng(1)
    spec = KGSystemSpec.random(table2, rng)
    z = KGState(small, 0.0, np.zeros((2,) + small.shape), np.zeros((2,) + small.shape))
    assert np.abs(kg_rhs(spec, z)).max() == 0.0
    s = kg_initial_data(table2, small, rng, 0.3, kind="noise")
    assert np.abs(kg_rhs(KGSystemSpec.zeros(table2), s)).max() == 0.0


def test_kg_rhs_two_mode_product(small):
    table = ParameterTable((1.0,), (1.0,))
    h = np.zeros((3, 3, 1, 1, 1))
    h[0, 0, 0, 0, 0] = 1.0                       # F = u * d1 d1 u
    spec = KGSystemSpec(table, np.zeros((3, 3, 4, 1, 1, 1)), h, np.zeros((1, 5, 5)))
    X, Y, _ = small.mesh()
    a, b = 2 * small.dk, 3 * small.dk
    u = np.cos(a * X) + np.cos(b * Y)
    s = KGState(small, 0.0, u[None], np.zeros((1,) + small.shape))
    expected = -a * a / 2 * (1 + np.cos(2 * a * X)) - a * a / 2 * (np.cos(a * X + b * Y) + np.cos(a * X - b * Y))
    assert np.abs(kg_rhs(spec, s)[0] - expected).max() < 1e-12


def test_kg_energy_single_mode(small):
    table = ParameterTable((1.3,), (0.8,))
    spec = KGSystemSpec.zeros(table)
    A, m = 0.7, 2
    xi = m * small.dk
    omega = math.sqrt(1.3**2 + 0.8**2 * xi**2)
    X = small.mesh()[0]
    s = KGState(small, 0.0, (A * np.cos(xi * X))[None], (A * omega * np.sin(xi * X))[None])
    vol = small.L**3
    for N in (1, 2, 4):
        weight = sum(xi ** (2 * p) for p in range(N))
        expected = (omega**2 + 1.3**2 + 0.8**2 * xi**2) * A * A / 2 * vol * weight
        assert kg_energy(spec, s, N) == pytest.approx(expected, rel=1e-12)
    zero = KGState(small, 0.0, np.zeros_like(s.u), np.zeros_like(s.u))
    assert kg_energy(KGSystemSpec.random(table, np.random.default_rng(0)), zero, 3) == 0.0


def test_kg_normal_form_roundtrip(small, table2):
    rng = np.random.default_rng(2)
    spec = KGSystemSpec.zeros(table2)
    s = kg_initial_data(table2, small, rng, 1.0, kind="noise")
    U = kg_normal_form(spec, s)
    back = kg_normal_form_inverse(spec, U, small)
    assert np.abs(back.u - s.u).max() < 1e-12
    assert np.abs(back.udot - s.udot).max() < 1e-12
    rest = KGState(small, 0.0, np.zeros_like(s.u), s.udot)
    assert np.abs(kg_normal_form(spec, rest).imag).max() == 0.0


def test_kg_linear_flow_is_exact(small, table2):
    spec = KGSystemSpec.zeros(table2)
    s = kg_initial_data(table2, small, np.random.default_rng(3), 1.0, kind="noise")
    rep = kg_run(spec, s, 3.0, 0.1, diagnostics=())
    U0 = kg_normal_form(spec, s)
    U1 = kg_normal_form(spec, rep.final)
    for sig in (1, 2):
        V0 = profile(U0[sig - 1], table2, sig, 0.0, small)
        V1 = profile(U1[sig - 1], table2, sig, 3.0, small)
        assert np.abs(V1.values - V0.values).max() < 1e-12 * np.abs(V0.values).max()


def test_profile_identity_at_zero(small, table2):
    U = plane_wave(small, (1, 0, 0))
    assert np.allclose(profile(U, table2, 1, 0.0).values, U.values)


def test_kg_dt_bound_and_instability(small):
    table = ParameterTable((1.0,), (1.0,))
    spec = KGSystemSpec.zeros(table)
    s = kg_initial_data(table, small, amplitude=1.0)
    with pytest.raises(ValueError):
        kg_step(spec, s, 10.0)
    h = np.zeros((3, 3, 1, 1, 1))
    h[0, 0] = h[1, 1] = h[2, 2] = -50.0
    wild = KGSystemSpec(table, np.zeros((3, 3, 4, 1, 1, 1)), h, np.zeros((1, 5, 5)))
    big = kg_initial_data(table, small, amplitude=5.0, kind="noise", kmin=1.0, kmax=4.0)
    with pytest.raises(IntegrationError):
        with np.errstate(all="ignore"):
            kg_run(wild, big, 20.0, 0.5, diagnostics=())


def test_kg_step_matches_run(small, table2):
    rng = np.random.default_rng(4)
    spec = KGSystemSpec.random(table2, rng, 0.5)
    s = kg_initial_data(table2, small, rng, 0.1, kind="noise")
    a = kg_step(spec, kg_step(spec, s, 0.1), 0.1)
    b = kg_run(spec, s, 0.2, 0.1, diagnostics=()).final
    assert np.abs(a.u - b.u).max() < 1e-15 and a.t == pytest.approx(0.2)


def test_kg_run_report_columns(small, table2):
    spec = KGSystemSpec.random(table2, np.random.default_rng(5), 0.5)
    s = kg_initial_data(table2, small, amplitude=1e-2)
    rep = kg_run(spec, s, 1.0, 0.25, N=3)
    t = rep.t
    assert np.all(np.diff(t) > 0) and t[-1] == pytest.approx(1.0)
    assert np.all(rep.column("E_N") > 0)
    w = rep.column("wsup")
    assert w[0] > 0 and np.all(np.isfinite(w))


# -- Euler-Maxwell ----------------------------------------------------------------------

def test_em_equilibrium(small):
    z = em_zero_state(small, 1.3, 0.9)
    for part in em_rhs(z):
        assert np.abs(part).max() == 0.0
    assert em_energy(z, 2) == 0.0
    assert em_zprime(z) == 0.0
    assert em_constraints(z) == (0.0, 0.0)


@pytest.mark.parametrize("kind", ["longitudinal", "transverse"])
def test_em_linear_dispersion(small, kind):
    T, c, m, A = 0.6, 1.4, 2, 1e-3
    xi = m * small.dk
    s = em_zero_state(small, T, c)
    X = small.mesh()[0]
    E = np.zeros((3,) + small.shape)
    if kind == "longitudinal":
        E[0] = A * np.sin(xi * X)
        s = s.replace(E=E, n=-A * xi * np.cos(xi * X))
        lam = math.sqrt(1 + T * xi * xi)
    else:
        E[1] = A * np.sin(xi * X)
        s = s.replace(E=E)
        lam = math.sqrt(1 + c * c * xi * xi)
    rep = em_run(s, 3.0, 0.05, nonlinear=False, diagnostics=())
    out = rep.final
    assert np.abs(out.E - E * math.cos(lam * 3.0)).max() < 1e-14


def test_em_propagator_derivative_matches_rhs(small):
    s = em_initial_data(small, np.random.default_rng(6), 1.0, 0.0, 3.0, T=0.8, c=1.2)
    s = s.replace(n=s.n + 0.1 * np.cos(small.mesh()[1] * small.dk))
    h = 1e-4
    a = em_step(s, h, nonlinear=False)
    b = em_step(s, 2 * h, nonlinear=False)
    assert np.abs(em_run(s, 0.0, nonlinear=False, diagnostics=()).final.n - s.n).max() == 0.0
    lin = em_rhs(s, nonlinear=False)
    # Richardson-extrapolated difference quotient of the exact flow
    for x1, x2, x0, d in zip((a.n, a.v, a.E, a.B), (b.n, b.v, b.E, b.B), (s.n, s.v, s.E, s.B), lin):
        est = 2 * (x1 - x0) / h - (x2 - x0) / (2 * h)
        assert np.abs(est - d).max() < 1e-6 * max(np.abs(d).max(), 1e-12)
    assert a.t == pytest.approx(h)


def test_em_constraints_hand_value(small):
    s = em_initial_data(small, np.random.default_rng(7), 1e-2)
    r = em_constraints(s)
    assert r[0] < 1e-14 and r[1] < 1e-14
    delta = 3e-3
    bad = s.replace(n=s.n + delta * np.cos(small.dk * small.mesh()[2]))
    expected = delta * math.sqrt(small.L**3 / 2)
    assert em_constraints(bad)[0] == pytest.approx(expected, rel=1e-12)


def test_em_energy_weights(small):
    s = em_zero_state(small, 2.0, 1.0)
    v = np.zeros((3,) + small.shape)
    v[0] = 0.1
    base = em_energy(s.replace(v=v), 0)
    half = em_energy(s.replace(v=v, n=np.full(small.shape, -0.5)), 0)
    T_part = 2.0 * 0.25 * small.L**3
    assert half - T_part == pytest.approx(base / 2, rel=1e-12)
    with pytest.raises(DomainError):
        em_energy(s.replace(n=np.full(small.shape, -1.5)), 1)


def test_em_nondimensionalize():
    g = Grid(8, 2.0)
    rng = np.random.default_rng(8)
    e = 1.0
    n0 = 1 / (4 * math.pi)
    fields = (n0 * (1 + 0.01 * rng.normal(size=g.shape)), rng.normal(size=(3,) + g.shape),
              rng.normal(size=(3,) + g.shape), rng.normal(size=(3,) + g.shape))
    state, scales = em_nondimensionalize(e, 2.0, 1.0, 1.0, n0, *fields, L=g.L)
    assert scales["lambda"] == pytest.approx(1.0) and scales["Z"] == pytest.approx(1.0)
    assert np.allclose(state.v, fields[1]) and np.allclose(state.E, fields[2]) and np.allclose(state.B, fields[3])
    _, sc = em_nondimensionalize(1.0, 2.0, 6.0, 1.0, 3.0, *fields, L=1.0)
    assert sc["T"] == pytest.approx(1.0)
    st2, sc2 = em_nondimensionalize(0.3, 1.7, 2.2, 5.0, 0.8, *fields, L=3.0, t=0.4)
    back = em_dimensionalize(st2, sc2)
    for a, b in zip(back[:4], fields):
        assert np.abs(a - b).max() <= 1e-14 * max(1.0, np.abs(b).max())
    assert back[4] == pytest.approx(3.0, rel=1e-14) and back[5] == pytest.approx(0.4, rel=1e-14)
    with pytest.raises(ParameterError):
        em_nondimensionalize(-1.0, 1.0, 1.0, 1.0, 1.0, *fields, L=1.0)


def test_em_normal_form_roundtrip_and_curl_free(small):
    s = em_initial_data(small, np.random.default_rng(9), 1.0, 0.2, 3.0, T=0.7, c=1.6)
    U1, U2 = em_normal_form(s)
    back = em_normal_form_inverse(U1, U2, small, s.T, s.c)
    for a, b in ((back.n, s.n), (back.v, s.v), (back.E, s.E), (back.B, s.B)):
        assert np.abs(a - b).max() < 1e-10 * np.abs(s.v).max()
    # gradient fields have no curl part
    f = annulus_noise(small, np.random.default_rng(10), 0.2, 3.0)
    from resokg.fields import divergence, gradient
    grad = gradient(f).values
    cf = s.replace(v=grad, E=-grad, B=np.zeros_like(grad), n=divergence(gradient(f)).values)
    _, U2 = em_normal_form(cf)
    assert np.abs(U2).max() < 1e-13


def test_em_nonlinearity_identity(small):
    s = em_initial_data(small, np.random.default_rng(11), 0.05, 0.2, 3.0, T=0.9, c=1.3)
    s = em_run(s, 1.0, 0.1, diagnostics=()).final
    r1, r2 = em_identity_residual(s)
    assert r1 < 1e-10 and r2 < 1e-10


def test_em_time_derivative_of_normal_form_by_differences(small):
    from resokg.simulate import em_nonlinearity
    s = em_initial_data(small, np.random.default_rng(12), 0.05, 0.2, 2.0)
    h = 1e-3
    k2 = small.kmag() ** 2
    lam1 = np.sqrt(1 + s.T * k2)
    a = em_step(s, h)
    b = em_step(a, h)
    U0, _ = em_normal_form(s)
    Ub, _ = em_normal_form(b)
    Um, _ = em_normal_form(a)
    dU = (Ub - U0) / (2 * h)
    lhs = dU + np.fft.ifftn(1j * lam1 * np.fft.fftn(Um))
    N1, _ = em_nonlinearity(a)
    assert np.linalg.norm(lhs - N1) < 1e-3 * np.linalg.norm(N1)


# -- profiles, partitions and bilinear operators ------------------------------------------

@given(st.floats(0.0, 3000.0))
@settings(max_examples=40, deadline=None)
def test_time_partition_properties(t):
    qs = time_partition(t)
    s = np.linspace(0, t, 2001)
    total = sum(q(s) for q in qs)
    assert np.abs(total - 1).max() < 1e-12
    for q in qs:
        vals = q(s)
        outside = (s < q.lo - 1e-12) | (s > q.hi + 1e-12)
        assert np.all(vals[outside] == 0)
        assert np.all(vals >= -1e-15)
    L = len(qs) - 2
    assert abs(L - math.log2(2 + t)) <= 2
    assert qs[0].hi == 2.0 and qs[-1].lo == max(0.0, t - 2)


def test_partition_weights_have_bounded_variation():
    for t in (10.0, 1000.0):
        s = np.linspace(0, t, 200001)
        for q in time_partition(t):
            assert np.abs(np.diff(q(s))).sum() <= 2.0 + 1e-9


def test_simpson_weights_integrate_cubics():
    t = np.linspace(0, 3, 13)
    w = simpson_weights(t)
    assert w @ t**3 == pytest.approx(3**4 / 4, rel=1e-12)


def test_bilinear_zero_and_errors(small, table2):
    f = plane_wave(small, (1, 0, 0))
    z = SpectralField(small, np.zeros(small.shape, complex))
    out = bilinear_T(table2, f, z, 1, SignedIndex(1, 1), SignedIndex(2, -1), times=[0.0, 1.0])
    assert np.abs(out.hat).max() == 0.0
    with pytest.raises(MultiplierError):
        bilinear_T(table2, f, f, 1, SignedIndex(1, 1), SignedIndex(1, 1), m=(None, None), times=[0, 1])
    with pytest.raises(MultiplierError):
        bilinear_T(table2, f, f, 1, SignedIndex(1, 1), SignedIndex(1, 1), m=(None, "riesz", None), times=[0, 1])
    with pytest.raises(MultiplierError):
        bilinear_T(table2, f, f, 1, times=[0, 1])


@pytest.mark.parametrize("iota", [(1, 1), (1, -1), (-1, -1)])
def test_bilinear_plane_waves_match_phase_integral(small, table2, iota):
    m1, m2 = np.array([1, 0, 0]), np.array([0, 2, -1])
    f, g = plane_wave(small, m1), plane_wave(small, m2)
    mu, nu = SignedIndex(1, iota[0]), SignedIndex(2, iota[1])
    times = np.linspace(0, 2.0, 401)
    out = bilinear_T(table2, f, g, 1, mu, nu, times=times)
    # legs with iota = -1 are conjugated: frequency -m
    k1 = iota[0] * m1 * small.dk
    k2 = iota[1] * m2 * small.dk
    xi = k1 + k2
    Phi = float(phase_phi(table2, 1, mu, nu, xi, k2))
    exact = (np.exp(1j * 2.0 * Phi) - 1) / (1j * Phi)
    target = np.zeros(small.shape, complex)
    target[tuple(int(round(x / small.dk)) % small.n for x in xi)] = exact
    hat = out.hat / (small.n ** 1.5)   # unitary transform of exp(i xi x) has height n^1.5
    assert np.abs(hat - target).max() < 1e-8


def test_bilinear_frequency_support(small, table2):
    rng = np.random.default_rng(13)
    f = annulus_noise(small, rng, 0.9, 1.1)
    g = annulus_noise(small, rng, 1.9, 2.1)
    out = bilinear_T(table2, f, g, 2, SignedIndex(1, 1), SignedIndex(2, -1), times=np.linspace(0, 1, 5))
    k = small.kfull()
    outside = (k > 1.1 + 2.1 + 1e-9) | (k < 1.9 - 1.1 - 1e-9)
    total = np.sum(np.abs(out.hat) ** 2)
    assert np.sum(np.abs(out.hat[outside]) ** 2) < 1e-20 * total


def test_bilinear_leg_lists_are_linear(small, table2):
    rng = np.random.default_rng(14)
    f = SpectralField(small, annulus_noise(small, rng, 0.3, 1.5).values + 0j)
    g = SpectralField(small, annulus_noise(small, rng, 0.3, 1.5).values + 0j)
    p, m = SignedIndex(1, 1), SignedIndex(2, -1)
    times = [0.0, 0.5, 1.0]
    a = bilinear_T(table2, [Leg(p, f), Leg(p, g, 2.0)], [Leg(m, g)], 1, times=times)
    b = bilinear_T(table2, f, g, 1, p, m, times=times)
    c = bilinear_T(table2, g, g, 1, p, m, times=times)
    assert np.allclose(a.hat, b.hat + 2 * c.hat, atol=1e-12)


# -- reports and fits -----------------------------------------------------------------------

def test_run_report_csv_roundtrip(tmp_path):
    rep = RunReport(["t", "x"])
    for t in np.linspace(0, 1, 5):
        rep.append({"t": t, "x": math.pi * t})
    p = tmp_path / "run.csv"
    rep.to_csv(p, comment="generated")
    text = p.read_text().splitlines()
    assert text[0] == "# generated" and text[1] == "t,x"
    back = RunReport.from_csv(p)
    assert np.array_equal(back.column("x"), rep.column("x"))
    with pytest.raises(ValueError):
        rep.append({"t": 0.5, "x": 0.0})


def test_decay_fit_known_exponent():
    t = np.linspace(1, 200, 400)
    fit = decay_fit(t, 3.0 * (1 + t) ** -1.5, window=(5, 150))
    assert fit.slope == pytest.approx(-1.5, abs=1e-12)
    assert fit.ci_low <= fit.slope <= fit.ci_high
    with pytest.raises(InsufficientSpanError):
        decay_fit(t, (1 + t) ** -1.5, window=(5, 40))


def test_single_mode_does_not_decay(small):
    table = ParameterTable((1.0,), (1.0,))
    spec = KGSystemSpec.zeros(table)
    X = small.mesh()[0]
    u = np.cos(small.dk * X)
    s = KGState(small, 0.0, u[None], np.zeros((1,) + small.shape))
    lam = math.sqrt(1 + small.dk**2)
    period = 2 * math.pi / lam
    rep = kg_run(spec, s, 60 * period, period / 8, record_every=8, diagnostics=())
    fit = decay_report(rep, "linf", window=(1.0, 60 * period))
    assert abs(fit.slope) < 1e-10


def test_energy_constant_on_exact_growth():
    t = np.linspace(0, 3, 301)
    E = np.exp(0.5 * t)
    C = energy_constant(t, E, np.full_like(t, 0.25))
    assert C == pytest.approx(2.0, rel=1e-3)


def test_weighted_sup_column_uses_beta(small):
    table = ParameterTable((1.0,), (1.0,))
    s = kg_initial_data(table, small, amplitude=1e-3)
    rep = kg_run(KGSystemSpec.zeros(table), s, 1.0, 0.5, diagnostics=("wsup",))
    w = rep.column("wsup")
    assert w[0] > 0 and BETA == 0.01
