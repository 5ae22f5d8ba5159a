import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from volterra_krm import DcParams, KernelHyper, SizeExceeded, ZetaSpec, ZetaVariant, dense_kernel_matrix, min_eig_check
from volterra_krm.kernels import (causal_eval, dc_eigenfunction, dc_eigenpair, dc_eigenvalue, dc_eval, dc_gram,
                                  wh_kernel_eval, wiener_kernel_eval, zeta_eval)
from volterra_krm.simulator import LtiSystem, WhSystem, true_volterra_maps

from conftest import random_dc

alphas = st.floats(0.01, 2.0)
betas = st.floats(0.0, 2.0)


# --------------------------------------------------------------------------
# dc_eval / causal_eval
# --------------------------------------------------------------------------


def test_dc_eval_at_origin():
    assert dc_eval(0, 0, DcParams(2.0, 0.5, 0.3)) == pytest.approx(4.0, rel=1e-15)


def test_dc_eval_pure_correlation():
    assert dc_eval(1, 0, DcParams(1.0, 1e-300, math.log(2))) == pytest.approx(0.5, rel=1e-14)


def test_dc_eval_scalar_value():
    # e^{-0.1*3} e^{-0.2*1} = e^{-0.5}
    assert dc_eval(2, 1, DcParams(1.0, 0.1, 0.2)) == pytest.approx(0.6065306597126334, rel=1e-14)


@given(st.integers(0, 50), st.integers(0, 50), alphas, betas, st.floats(0.0, 3.0))
def test_dc_eval_symmetric(t, s, a, b, c):
    p = DcParams(c, a, b)
    assert dc_eval(t, s, p) == dc_eval(s, t, p)


def test_dcparams_rejects_inadmissible():
    with pytest.raises(ValueError):
        DcParams(1.0, 0.0, 0.1)
    with pytest.raises(ValueError):
        DcParams(1.0, 0.1, -0.1)
    with pytest.raises(ValueError):
        DcParams(-1.0, 0.1, 0.1)


def test_causal_eval_zero_for_negative_lags():
    p = DcParams(1.0, 1.0, 1.0)
    z = ZetaSpec(ZetaVariant.EXP_DECAY, p)
    assert causal_eval(lambda t, s: dc_eval(t, s, p), -1, 3) == 0.0
    assert zeta_eval(-2, z) == 0.0
    assert causal_eval(lambda t, s: dc_eval(t, s, p), 0, 0) == 1.0


def test_causal_eval_vectorized_support():
    p = DcParams(1.0, 0.3, 0.2)
    t = np.array([-1, 0, 2, 5])
    out = causal_eval(lambda x: dc_eval(x, x, p), t, support=5)
    np.testing.assert_array_equal(out == 0, [True, False, False, True])


# --------------------------------------------------------------------------
# zeta and eigenpairs
# --------------------------------------------------------------------------


def test_zeta_exp_decay_values():
    z = ZetaSpec(ZetaVariant.EXP_DECAY, DcParams(1.0, 0.5, 0.2))
    assert zeta_eval(0, z) == 1.0
    z2 = ZetaSpec(ZetaVariant.EXP_DECAY, DcParams(1.0, 0.25 * math.log(2), 0.75 * math.log(2)))
    assert zeta_eval(3, z2) == pytest.approx(0.125, rel=1e-14)


def test_zeta_ortho_single_term_matches_eigenfunction():
    p = DcParams(1.3, 0.2, 0.1)
    z = ZetaSpec(ZetaVariant.ORTHO_BASIS, p, l=1)
    eps1, psi1 = dc_eigenpair(1, p)
    assert eps1 == pytest.approx(0.4052847345693511, rel=1e-15)
    t = np.arange(20)
    np.testing.assert_allclose(zeta_eval(t, z), p.c * math.sqrt(2) * eps1 * psi1(t), rtol=1e-13, atol=1e-300)


@given(alphas, betas, st.integers(1, 60))
def test_zeta_ortho_matches_term_by_term_sum(a, b, l):
    p = DcParams(1.0, a, b)
    z = ZetaSpec(ZetaVariant.ORTHO_BASIS, p, l=l)
    t = np.arange(30)
    ref = sum(math.sqrt(2) * dc_eigenvalue(i) * dc_eigenfunction(i, t, p) for i in range(1, l + 1))
    np.testing.assert_allclose(zeta_eval(t, z), ref, rtol=1e-11, atol=1e-13 * float(np.max(np.abs(ref))))


def test_eigenvalues():
    assert dc_eigenvalue(1) == pytest.approx(4 / math.pi**2, rel=1e-15)
    assert dc_eigenvalue(2) == pytest.approx(0.04503163717437234, rel=1e-15)
    with pytest.raises(ValueError):
        dc_eigenpair(0, DcParams())


def test_eigenvalue_series_bound():
    partial = np.cumsum([2 * dc_eigenvalue(i) for i in range(1, 501)])
    assert np.all(partial < 1.0)
    assert np.all(np.diff(partial) > 0)


@pytest.mark.parametrize("params", [DcParams(1.0, 0.3, 0.1), DcParams(1.0, 0.1, 0.4), DcParams(0.7, 0.05, 0.05)])
def test_mercer_reconstruction_non_increasing(params):
    t = np.arange(30)
    K = dc_gram(30, params)
    acc = np.zeros_like(K)
    errs = []
    for i in range(1, 201):
        f = dc_eigenfunction(i, t, params)
        acc += params.c**2 * dc_eigenvalue(i) * np.outer(f, f)
        errs.append(np.max(np.abs(acc - K)))
    errs = np.array(errs)
    assert np.all(np.diff(errs) <= 1e-12 * K.max())
    if params.beta <= params.alpha:
        # the tail shrinks like 1/L; with beta > alpha it is much wider on an integer grid
        assert errs[-1] < 1e-2 * K.max()


def test_mercer_rejects_opposite_sign():
    # the opposite exponent sign does not reconstruct the kernel
    p = DcParams(1.0, 0.3, 0.1)
    t = np.arange(30)
    acc = sum(dc_eigenvalue(i) * np.outer(dc_eigenfunction(i, t, p, -1), dc_eigenfunction(i, t, p, -1))
              for i in range(1, 201))
    assert np.max(np.abs(acc - dc_gram(30, p))) > 0.1


@pytest.mark.parametrize("variant", list(ZetaVariant))
def test_sufficient_condition_psd(variant, rng):
    for _ in range(25):
        p = random_dc(rng)
        n = int(rng.integers(2, 51))
        z = ZetaSpec(variant, p, l=100)
        zv = zeta_eval(np.arange(n), z)
        assert min_eig_check(dc_gram(n, p) - np.outer(zv, zv), 1e-8)


# --------------------------------------------------------------------------
# multi-index kernels
# --------------------------------------------------------------------------


def test_wiener_kernel_diagonal_block():
    k1 = DcParams(1.0, 0.3, 0.2)
    z = ZetaSpec(ZetaVariant.EXP_DECAY, k1)
    assert wiener_kernel_eval([2], [1], 1.5, 1.5, k1, z) == pytest.approx(2.25 * dc_eval(2, 1, k1), rel=1e-15)


def test_wiener_kernel_all_lags_zero():
    k1 = DcParams(1.0, 0.3, 0.2)
    z = ZetaSpec(ZetaVariant.EXP_DECAY, k1)
    assert wiener_kernel_eval([0], [0, 0], 1.0, 1.0, k1, z) == 1.0


def test_wiener_kernel_product_formula(rng):
    for _ in range(10):
        k1 = random_dc(rng)
        z = ZetaSpec(ZetaVariant.ORTHO_BASIS, k1, l=20)
        t = rng.integers(0, 6, 2)
        s = rng.integers(0, 6, 3)
        a2, a3 = rng.normal(size=2)
        ref = a2 * a3 * dc_eval(t[0], s[0], k1) * dc_eval(t[1], s[1], k1) * zeta_eval(s[2], z)
        assert wiener_kernel_eval(t, s, a2, a3, k1, z) == pytest.approx(ref, rel=1e-13)
        assert wiener_kernel_eval(s, t, a3, a2, k1, z) == pytest.approx(ref, rel=1e-13)


def test_wiener_kernel_block_diagonal_drops_offdiag():
    assert wiener_kernel_eval([0], [0, 0], 1.0, 1.0, DcParams(), None) == 0.0


def test_wh_kernel_delta_reduces_to_wiener(rng):
    k1 = random_dc(rng)
    z = ZetaSpec(ZetaVariant.EXP_DECAY, k1)
    for t, s in [([1], [2]), ([0, 3], [2]), ([1, 1], [2, 0, 1])]:
        assert wh_kernel_eval(t, s, 0.7, -1.1, k1, None, z, 4) == \
            wiener_kernel_eval(t, s, 0.7, -1.1, k1, z, support=4)


def test_wh_kernel_single_shift_is_wiener():
    k1 = DcParams(1.0, 0.2, 0.1)
    k2 = DcParams(1.0, 0.5, 0.5)
    z = ZetaSpec(ZetaVariant.EXP_DECAY, k1)
    assert wh_kernel_eval([0], [0, 0], 1.0, 2.0, k1, k2, z, 1) == pytest.approx(2.0, rel=1e-15)


def test_wh_kernel_brute_force_double_sum(rng):
    n = 3
    for _ in range(5):
        k1, k2 = random_dc(rng), random_dc(rng)
        t, s = int(rng.integers(0, 5)), int(rng.integers(0, 5))
        ref = 0.0
        for x1 in range(n):
            for x2 in range(n):
                a, b = t - x1, s - x2
                if 0 <= a < n and 0 <= b < n:
                    ref += dc_eval(x1, x2, k2) * math.exp(-k1.alpha * (a + b) - k1.beta * abs(a - b))
        got = wh_kernel_eval([t], [s], 1.0, 1.0, k1, k2, None, n)
        assert got == pytest.approx(ref, rel=1e-13, abs=1e-300)


@given(st.integers(0, 10_000))
def test_wh_kernel_symmetry(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4))
    k1, k2 = random_dc(rng), random_dc(rng)
    z = ZetaSpec(ZetaVariant.EXP_DECAY, k1)
    p, q = rng.integers(1, 4, 2)
    t = rng.integers(0, 2 * n - 1, p)
    s = rng.integers(0, 2 * n - 1, q)
    a = rng.normal(size=2)
    assert wh_kernel_eval(t, s, a[0], a[1], k1, k2, z, n) == \
        pytest.approx(wh_kernel_eval(s, t, a[1], a[0], k1, k2, z, n), rel=1e-13, abs=1e-300)


def test_optimal_kernel_reproduces_true_maps(rng):
    # with beta = 0 the DC kernel is g(t) g(s) for g(t) = e^{-alpha t} and the
    # exponential zeta equals g, so the structured kernel is the optimal one
    for _ in range(5):
        n = int(rng.integers(2, 4))
        al1, al2 = rng.uniform(0.1, 1.0, 2)
        a = rng.normal(size=3)
        k1, k2 = DcParams(1.0, al1, 0.0), DcParams(1.0, al2, 0.0)
        z = ZetaSpec(ZetaVariant.EXP_DECAY, k1)
        g1 = LtiSystem.fir(np.exp(-al1 * np.arange(n)))
        g2 = LtiSystem.fir(np.exp(-al2 * np.arange(n)))
        L = 2 * n - 1
        maps = true_volterra_maps(WhSystem(g1, g2, (0.0, *a)), L)
        for p, q in itertools.product(range(1, 4), repeat=2):
            t = tuple(rng.integers(0, L, p))
            s = tuple(rng.integers(0, L, q))
            ref = maps[p - 1][t] * maps[q - 1][s]
            got = wh_kernel_eval(t, s, a[p - 1], a[q - 1], k1, k2, z, n)
            assert got == pytest.approx(ref, rel=1e-12, abs=1e-14)


# --------------------------------------------------------------------------
# dense matrices
# --------------------------------------------------------------------------


def test_dense_matrix_first_order_is_scaled_gram():
    k1 = DcParams(1.0, 0.3, 0.1)
    h = KernelHyper(a=(1.7,), k1=k1, n=5)
    np.testing.assert_allclose(dense_kernel_matrix(h), 1.7**2 * dc_gram(5, k1), rtol=1e-15)


def test_dense_matrix_zero_coefficients():
    h = KernelHyper(a=(0.0, 0.0), k1=DcParams(), n=3, k2=DcParams())
    assert not np.any(dense_kernel_matrix(h))


@pytest.mark.parametrize("k2", [None, DcParams(1.0, 0.4, 0.3)])
@pytest.mark.parametrize("zeta", [None, ZetaVariant.EXP_DECAY, ZetaVariant.ORTHO_BASIS])
def test_dense_matrix_kron_matches_loop(k2, zeta):
    h = KernelHyper(a=(0.8, -1.2), k1=DcParams(1.0, 0.3, 0.2), n=2, k2=k2, zeta_variant=zeta, n_basis=10)
    L = h.volterra_memory
    P = dense_kernel_matrix(h, memory=L)
    assert P.shape == (L + L**2, L + L**2)
    np.testing.assert_allclose(P, dense_kernel_matrix(h, memory=L, method="loop"), rtol=1e-13, atol=1e-15)
    np.testing.assert_array_equal(P, P.T)


def test_dense_matrix_block_entry():
    k1, k2 = DcParams(1.0, 0.3, 0.2), DcParams(1.0, 0.5, 0.1)
    h = KernelHyper(a=(0.8, -1.2), k1=k1, n=2, k2=k2)
    P = dense_kernel_matrix(h)
    # row t1 = 1, column (s1, s2) = (0, 1): 1 + 1*2 + 1 in the flattened layout
    assert P[1, 2 + 1] == pytest.approx(wh_kernel_eval([1], [0, 1], 0.8, -1.2, k1, k2, h.zeta, 2), rel=1e-14)


def test_dense_matrix_size_guard():
    with pytest.raises(SizeExceeded):
        dense_kernel_matrix(KernelHyper(a=(1.0, 1.0, 1.0), k1=DcParams(), n=50))


def test_min_eig_check_basic():
    assert min_eig_check(np.eye(3))
    assert not min_eig_check(np.diag([1.0, -1.0]))


@given(st.integers(0, 10_000), st.sampled_from(list(ZetaVariant)))
def test_dense_matrix_psd_property(seed, variant):
    rng = np.random.default_rng(seed)
    M = int(rng.integers(1, 4))
    n = int(rng.integers(1, 5))
    h = KernelHyper(a=tuple(rng.normal(size=M)), k1=random_dc(rng), n=n,
                    k2=random_dc(rng) if rng.random() < 0.5 else None, zeta_variant=variant)
    assert min_eig_check(dense_kernel_matrix(h), 1e-8)


def test_kernel_hyper_validation():
    with pytest.raises(ValueError):
        KernelHyper(a=(), k1=DcParams(), n=3)
    with pytest.raises(ValueError):
        KernelHyper(a=(1.0,), k1=DcParams(), n=0)
    with pytest.raises(ValueError):
        KernelHyper(a=(1.0,), k1=DcParams(), n=3, sigma2=0.0)
    h = KernelHyper(a=(1.0, 2.0), k1=DcParams(), n=3, k2=DcParams())
    assert h.M == 2 and h.volterra_memory == 5
    assert h.with_(n=4).n == 4
