import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, strategies as st

from volterra_krm import (DcParams, InputFamily, KernelHyper, SeparationCheckFailed, SingularCore, ZetaVariant,
                          assemble_q_generators, eb_cost_fast, predict_fast, separability_rank, separate_input)
from volterra_krm.kernels import dc_gram, zeta_vector
from volterra_krm.output_kernel import InitPolicy, build_qw, build_regressor
from volterra_krm.separable import (GeneratorPair, LowRankSolver, SemiseparableKernelDesc, base_generators,
                                    compositions, dc_quadratic_form, dc_semiseparable, hadamard_power_generators, left_generators,
                                    multinomial_coefficients, semiseparable_apply)

from conftest import random_dc

# (M, r) -> (with off-diagonal blocks, diagonal only), as printed in the rank table
RANK_TABLE = {
    (2, 1): (3, 2), (2, 2): (7, 5), (2, 3): (12, 9), (2, 4): (18, 14), (2, 5): (25, 20),
    (3, 1): (5, 3), (3, 2): (14, 9), (3, 3): (28, 19), (3, 4): (48, 34), (3, 5): (75, 55),
    (4, 1): (7, 4), (4, 2): (23, 14), (4, 3): (53, 34), (4, 4): (103, 69), (4, 5): (180, 125),
    (5, 1): (9, 5), (5, 2): (34, 20), (5, 3): (89, 55), (5, 4): (194, 125), (5, 5): (376, 251),
}


def family_desc(rng, family, N, n, t_start):
    lam = float(rng.uniform(0.0, 0.02))
    if family == "exponential":
        return separate_input(family, N, n, t_start=t_start, lam=lam, amplitude=float(rng.uniform(0.5, 2)))
    if family == "damped_sinusoid":
        return separate_input(family, N, n, t_start=t_start, lam=lam, omega=float(rng.uniform(0.05, 1.0)),
                              phi=float(rng.uniform(0, math.pi)))
    return separate_input(family, N, n, t_start=t_start, lam=float(rng.uniform(0.01, 0.05)))


def three_term_desc(N, n, t_start):
    """Custom rank-3 input ``cos(0.3 t) + e^{-0.01 t}``."""
    pis = [lambda t: np.cos(0.3 * t), lambda t: np.sin(0.3 * t), lambda t: np.exp(-0.01 * t)]
    rhos = [lambda b: np.cos(0.3 * b), lambda b: np.sin(0.3 * b), lambda b: np.exp(0.01 * b)]
    return separate_input("custom", N, n, t_start=t_start, pi_funcs=pis, rho_funcs=rhos,
                          signal_fn=lambda t: np.cos(0.3 * t) + np.exp(-0.01 * t))


def signal_of(desc, T):
    return desc.signal(np.arange(T, dtype=float))


# --------------------------------------------------------------------------
# input descriptors
# --------------------------------------------------------------------------


def test_exponential_rank_one():
    d = separate_input(InputFamily.EXPONENTIAL, 50, 5, lam=0.1)
    assert d.r == 1
    t, b = 7.0, 3.0
    assert d.pi(t)[0] * d.rho(b)[0] == pytest.approx(math.exp(-0.1 * (t - b)), rel=1e-14)


def test_decaying_cosine_rank_two():
    d = separate_input(InputFamily.DAMPED_SINUSOID, 400, 50, lam=0.0003, omega=0.1, phi=math.pi / 3)
    assert d.r == 2
    assert d.signal(0.0) == pytest.approx(0.5, rel=1e-14)


def test_poly_times_exp_rank_two():
    d = separate_input(InputFamily.POLY_TIMES_EXP, 100, 10, t_start=9, lam=0.05)
    assert d.r == 2


def test_custom_descriptor_rejected_when_wrong():
    with pytest.raises(SeparationCheckFailed):
        separate_input("custom", 10, 3, pi_funcs=[lambda t: np.cos(t)], rho_funcs=[lambda b: np.cos(b)],
                       signal_fn=lambda t: np.cos(t))


def test_custom_descriptor_needs_functions():
    with pytest.raises(ValueError):
        separate_input("custom", 10, 3)


@given(st.integers(0, 10_000), st.sampled_from(["exponential", "damped_sinusoid", "poly_times_exp"]))
def test_family_identity_on_grid(seed, family):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 20))
    d = family_desc(rng, family, 60, n, n - 1)
    t = np.arange(n - 1, n + 59, dtype=float)
    b = np.arange(n, dtype=float)
    np.testing.assert_allclose(d.pi(t) @ d.rho(b).T, d.signal(t[:, None] - b[None, :]), rtol=1e-11, atol=1e-12)


# --------------------------------------------------------------------------
# semiseparable kernels
# --------------------------------------------------------------------------


@pytest.mark.parametrize("params", [DcParams(1.0, 0.1, 0.05), DcParams(1.3, 0.02, 0.3), DcParams(1.0, 0.5, 0.0)])
@pytest.mark.parametrize("n", [1, 7, 200, 2000])
def test_semiseparable_apply_matches_dense(params, n, rng):
    H = rng.normal(size=(n, 3))
    K = dc_gram(n, params)
    ref = K @ H
    got = semiseparable_apply(dc_semiseparable(params), H)
    assert np.abs(got - ref).max() <= 1e-10 * max(np.abs(ref).max(), 1e-300)


@pytest.mark.parametrize("params", [DcParams(1.0, 0.1, 0.05), DcParams(1.3, 0.02, 0.3), DcParams(0.7, 4.0, 3.9)])
@pytest.mark.parametrize("n", [1, 7, 200])
def test_dc_quadratic_form_matches_dense(params, n, rng):
    H = rng.normal(size=(n, 3))
    ref = H.T @ dc_gram(n, params) @ H
    got = dc_quadratic_form(params, H)
    assert np.abs(got - ref).max() <= 1e-10 * max(np.abs(ref).max(), 1e-300)


def test_semiseparable_apply_generic_functions(rng):
    desc = SemiseparableKernelDesc([lambda t: np.exp(-0.2 * t), lambda t: 1.0 / (1.0 + t)],
                                   [lambda s: np.exp(0.1 * s), lambda s: np.ones_like(s)])
    H = rng.normal(size=(30, 2))
    np.testing.assert_allclose(semiseparable_apply(desc, H), desc.dense(30) @ H, rtol=1e-12, atol=1e-12)


def test_semiseparable_rank_one_when_uncorrelated(rng):
    p = DcParams(1.0, 0.2, 0.0)
    H = rng.normal(size=(10, 2))
    mu = np.exp(-0.2 * np.arange(10))
    np.testing.assert_allclose(semiseparable_apply(dc_semiseparable(p), H), np.outer(mu, mu @ H), rtol=1e-13)


def test_semiseparable_scalar_case():
    p = DcParams(2.0, 0.3, 0.1)
    assert semiseparable_apply(dc_semiseparable(p), np.array([3.0]))[0] == pytest.approx(12.0, rel=1e-15)


def test_semiseparable_dense_is_dc():
    p = DcParams(1.1, 0.2, 0.15)
    np.testing.assert_allclose(dc_semiseparable(p).dense(12), dc_gram(12, p), rtol=1e-13)


# --------------------------------------------------------------------------
# generators
# --------------------------------------------------------------------------


@pytest.mark.parametrize("family", ["exponential", "damped_sinusoid"])
def test_base_generators_reproduce_x(family, rng):
    n, N = 8, 150
    d = family_desc(rng, family, N, n, n - 1)
    K1 = dc_gram(n, random_dc(rng))
    times = np.arange(n - 1, n - 1 + N)
    U, V = base_generators(d, K1, times)
    psi = build_regressor(signal_of(d, N + n - 1), n, InitPolicy.TRIM_TO_KNOWN).psi
    X = psi @ K1 @ psi.T
    assert np.abs(U @ V.T - X).max() <= 1e-10 * np.abs(X).max()
    U2, V2 = base_generators(d, dc_semiseparable(DcParams(1.0, 0.3, 0.1)), times, n=n)
    X2 = psi @ dc_gram(n, DcParams(1.0, 0.3, 0.1)) @ psi.T
    assert np.abs(U2 @ V2.T - X2).max() <= 1e-10 * np.abs(X2).max()


def test_base_generators_zero_kernel():
    d = separate_input("exponential", 20, 4, t_start=3, lam=0.1)
    _, V = base_generators(d, np.zeros((4, 4)), np.arange(3, 23))
    assert not V.any()


def test_compositions_order():
    np.testing.assert_array_equal(compositions(2, 2), [[2, 0], [1, 1], [0, 2]])
    np.testing.assert_array_equal(multinomial_coefficients(compositions(2, 2)), [1, 2, 1])
    assert len(compositions(3, 3)) == 10


@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 4))
def test_hadamard_power_generators(seed, r, m):
    rng = np.random.default_rng(seed)
    U, V = rng.normal(size=(12, r)), rng.normal(size=(12, r))
    Um, Vm = hadamard_power_generators(U, V, m)
    assert Um.shape[1] == math.comb(r + m - 1, m)
    ref = (U @ V.T) ** m
    np.testing.assert_allclose(Um @ Vm.T, ref, rtol=1e-10, atol=1e-10 * np.abs(ref).max())


def test_hadamard_power_rank_one():
    U, V = np.array([[2.0], [3.0]]), np.array([[1.0], [-1.0]])
    Um, Vm = hadamard_power_generators(U, V, 3)
    np.testing.assert_array_equal(Um[:, 0], [8, 27])
    np.testing.assert_array_equal(Vm[:, 0], [1, -1])


@pytest.mark.parametrize("M,r", sorted(RANK_TABLE))
def test_rank_table(M, r):
    assert (separability_rank(M, r, True), separability_rank(M, r, False)) == RANK_TABLE[(M, r)]


def test_rank_requires_positive_arguments():
    with pytest.raises(ValueError):
        separability_rank(0, 1)


def test_generator_column_counts(rng):
    for M, r in [(2, 1), (3, 2), (2, 3), (4, 2)]:
        U, V = rng.normal(size=(15, r)), rng.normal(size=(15, r))
        psi = rng.normal(size=15)
        a = rng.normal(size=M)
        assert assemble_q_generators(U, V, psi, a).gamma == separability_rank(M, r, True)
        assert assemble_q_generators(U, V, None, a).gamma == separability_rank(M, r, False)


def test_generators_first_order():
    U, V = np.array([[1.0], [2.0]]), np.array([[3.0], [4.0]])
    g = assemble_q_generators(U, V, np.ones(2), [1.5])
    np.testing.assert_allclose(g.dense(), 2.25 * U @ V.T)


def qw_case(rng, M, desc_builder, N, n, zeta):
    d = desc_builder(N, n)
    h = KernelHyper(a=tuple(rng.normal(size=M)), k1=random_dc(rng), n=n, zeta_variant=zeta, n_basis=50)
    K1 = dc_gram(n, h.k1)
    zv = zeta_vector(n, h.zeta)
    times = np.arange(n - 1, n - 1 + N)
    U, V = base_generators(d, K1, times)
    H = d.rho(np.arange(n))
    psi_vec = None if zv is None else U @ (H.T @ zv)
    reg = build_regressor(signal_of(d, N + n - 1), n, InitPolicy.TRIM_TO_KNOWN)
    return h, U, V, psi_vec, build_qw(reg, K1, zv, h.a), reg


@given(st.integers(0, 10_000), st.integers(1, 4), st.sampled_from([None, ZetaVariant.EXP_DECAY,
                                                                     ZetaVariant.ORTHO_BASIS]))
def test_generators_match_output_kernel(seed, M, zeta):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 12))
    N = int(rng.integers(20, 200))
    fam = rng.choice(["exponential", "damped_sinusoid", "poly_times_exp"])
    h, U, V, psi_vec, Q, _ = qw_case(rng, M, lambda N, n: family_desc(rng, fam, N, n, n - 1), N, n, zeta)
    G = assemble_q_generators(U, V, psi_vec, h.a)
    assert np.abs(G.dense() - Q).max() <= 1e-10 * np.abs(Q).max()


def test_generators_rank_three_input(rng):
    h, U, V, psi_vec, Q, _ = qw_case(rng, 3, lambda N, n: three_term_desc(N, n, n - 1), 300, 10,
                                     ZetaVariant.EXP_DECAY)
    G = assemble_q_generators(U, V, psi_vec, h.a)
    assert G.gamma == 28
    assert np.abs(G.dense() - Q).max() <= 1e-10 * np.abs(Q).max()


# --------------------------------------------------------------------------
# lemma-based solves
# --------------------------------------------------------------------------


def dense_cost(Q, Y, s2):
    A = Q + s2 * np.eye(len(Y))
    c = scipy.linalg.cho_factor(A)
    return Y @ scipy.linalg.cho_solve(c, Y) + 2 * np.log(np.diag(c[0])).sum()


def test_pure_noise_cost(rng):
    Y = rng.normal(size=40)
    g = GeneratorPair(np.zeros((40, 3)), np.zeros((40, 3)))
    assert eb_cost_fast(g, Y, 0.7) == pytest.approx(Y @ Y / 0.7 + 40 * math.log(0.7), rel=1e-13)


@given(st.integers(0, 10_000), st.integers(1, 4), st.booleans())
def test_fast_cost_and_prediction_match_dense(seed, M, offdiag):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 15))
    N = int(rng.integers(30, 400))
    zeta = ZetaVariant.EXP_DECAY if offdiag else None
    h, U, V, psi_vec, Q, reg = qw_case(rng, M, lambda N, n: family_desc(rng, "damped_sinusoid", N, n, n - 1),
                                       N, n, zeta)
    G = assemble_q_generators(U, V, psi_vec, h.a)
    Y = rng.normal(size=N) * math.sqrt(np.abs(Q).max())
    s2 = float(rng.uniform(0.01, 1.0)) * np.abs(Q).max()
    assert eb_cost_fast(G, Y, s2) == pytest.approx(dense_cost(Q, Y, s2), rel=1e-6)
    # cross rows: predictions at the training points
    Ubar = left_generators(U, psi_vec, h.a)
    ref = Q @ np.linalg.solve(Q + s2 * np.eye(N), Y)
    got = predict_fast(Ubar, G, Y, s2)
    assert np.abs(got - ref).max() <= 1e-6 * max(np.abs(ref).max(), 1e-300)


def test_cost_increases_with_large_noise_variance(rng):
    U = rng.normal(size=(50, 2))
    G = GeneratorPair(U, U.copy())
    Y = rng.normal(size=50)
    costs = [eb_cost_fast(G, Y, s2) for s2 in 10.0 ** np.arange(3, 8)]
    assert np.all(np.diff(costs) > 0)
    limit = [Y @ Y / s2 + 50 * math.log(s2) for s2 in 10.0 ** np.arange(3, 8)]
    assert abs(costs[-1] - limit[-1]) < abs(costs[0] - limit[0])


def test_predict_interpolates_at_small_noise(rng):
    U = 2.0 * np.eye(6) + 0.1 * rng.normal(size=(6, 6))
    G = GeneratorPair(U, U.copy())
    Y = rng.normal(size=6)
    np.testing.assert_allclose(predict_fast(U, G, Y, 1e-10), Y, atol=1e-6)


def test_predict_zero_coefficients(rng):
    U, V = rng.normal(size=(20, 2)), rng.normal(size=(20, 2))
    G = assemble_q_generators(U, V, rng.normal(size=20), [0.0, 0.0])
    out = predict_fast(left_generators(U, rng.normal(size=20), [0.0, 0.0]), G, rng.normal(size=20), 0.5, h0=1.25)
    np.testing.assert_allclose(out, 1.25)


def test_singular_core_detected(rng):
    u = rng.normal(size=(30, 1))
    U = np.hstack([u, u + 1e-10 * rng.normal(size=(30, 1))])
    with pytest.raises(SingularCore):
        LowRankSolver(GeneratorPair(U, U.copy()), 1e-30)


def test_solver_validates_noise_variance(rng):
    U = rng.normal(size=(5, 1))
    with pytest.raises(ValueError):
        LowRankSolver(GeneratorPair(U, U), 0.0)


def test_solver_gram_and_solve(rng):
    U = rng.normal(size=(25, 3))
    Q = U @ U.T
    S = LowRankSolver(GeneratorPair(U, U.copy()), 0.3)
    Y = rng.normal(size=(25, 2))
    A = np.linalg.inv(Q + 0.3 * np.eye(25))
    np.testing.assert_allclose(S.solve(Y), A @ Y, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(S.gram(Y), Y.T @ A @ Y, rtol=1e-10)
    assert S.logdet == pytest.approx(np.linalg.slogdet(Q + 0.3 * np.eye(25))[1], rel=1e-12)
    assert S.gamma == 3
