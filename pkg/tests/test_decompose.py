import itertools
import time

import numpy as np
import pytest
from scipy.optimize import minimize

from dectmultra import (DecompositionParams, DecompositionSystem, EpParams,
                        MassAttenuationMatrix, MultraModel, NoiseWeights, PatchConfig,
                        SparseCodeSet, StParams, TransformUnion, UnionKind, UnitaryTransform,
                        decompose_cultra,
                        decompose_ep, decompose_multra, decompose_st, direct_inversion,
                        generate_phantom, image_update, objective_p0, pixel_cluster_map,
                        simulate_attenuation, sparse_code_and_cluster)
from dectmultra.core_types import DimensionError
from dectmultra.decompose import (InconsistentCodesError, Regularizer, ep_objective,
                                  ep_potential, ep_potential_derivative,
                                  finite_differences, finite_differences_adjoint,
                                  multra_regularizer, run_bcd, st_regularizer)
from dectmultra.patch_ops import hard_threshold
from dectmultra.transform_learning import separable_dct

import oracles
from conftest import make_system, random_model, random_union


def monotone(v, tol=1e-9):
    v = np.asarray(v)
    return bool(np.all(v[1:] <= v[:-1] + tol * np.abs(v[:-1])))


@pytest.fixture
def small_problem(A0, weights):
    x_true = generate_phantom(None, (16, 16), seed=2)
    y = simulate_attenuation(x_true, A0, weights, seed=3)
    return x_true, y, make_system(A0, weights, side=4)


def random_codes(n, m, K1, K2, rng):
    model = rng.integers(1, 3, n)
    classes = np.stack([np.where(model == 1, rng.integers(0, K1, n), rng.integers(0, K2, n)),
                        np.where(model == 1, rng.integers(0, K1, n), -1)], 1)
    codes = hard_threshold(rng.standard_normal((n, 2 * m)), 1.0)
    return SparseCodeSet(model, classes, codes)


# ---------------------------------------------------------------------------
# direct inversion and system

def test_direct_inversion_examples():
    A = MassAttenuationMatrix(2.0, 1e-300, 1e-300, 4.0)
    yy = np.stack([np.full((2, 2), 2.0), np.full((2, 2), 4.0)])
    np.testing.assert_allclose(direct_inversion(yy, A).stacked(), 1.0, rtol=1e-15)


def test_direct_inversion_near_identity():
    # entries must be strictly positive, so identity is approached with tiny off-diagonals
    A = MassAttenuationMatrix(1.0, 1e-300, 1e-300, 1.0)
    y = np.random.default_rng(0).uniform(0.1, 1, (2, 3, 4))
    np.testing.assert_array_equal(direct_inversion(y, A).stacked(), y)


def test_direct_inversion_roundtrip(A0):
    x = generate_phantom(None, (32, 32), seed=1)
    y = simulate_attenuation(x, A0, None)
    np.testing.assert_allclose(direct_inversion(y, A0).stacked(), x.stacked(), rtol=0, atol=1e-10)


def test_system_dims_check(A0, weights):
    s = DecompositionSystem(A0, weights, PatchConfig(8), dims=(16, 16))
    with pytest.raises(DimensionError):
        s.check_dims((16, 17))
    small = np.ones((2, 7, 30))
    with pytest.raises(DimensionError):
        sparse_code_and_cluster(small, random_model(side=8, K1=1, K2=1), DecompositionParams())


# ---------------------------------------------------------------------------
# objective

def test_objective_matches_loop_oracle(small_problem):
    x_true, y, system = small_problem
    model = random_model(side=4, K1=3, K2=2, seed=4)
    params = DecompositionParams(beta1=3.0, beta2=5.0, gamma1_water=0.3, gamma1_bone=0.2,
                                 gamma2=0.25)
    rng = np.random.default_rng(5)
    codes = random_codes(system.patch.count((16, 16)), 16, 3, 2, rng)
    x = x_true.stacked() + 0.01 * rng.standard_normal((2, 16, 16))
    total, fid, reg = objective_p0(x, y, codes, model, params, system)
    assert total == fid + reg
    sig2 = (system.weights.sigma2_high, system.weights.sigma2_low)
    ref_fid = oracles.fidelity(x, y.stacked(), system.A0.matrix, sig2)
    ref_reg = oracles.regularizer_value(x, codes, multra_regularizer(model, params), (16, 16))
    assert fid == pytest.approx(ref_fid, rel=1e-12)
    assert reg == pytest.approx(ref_reg, rel=1e-12)


def test_objective_exact_codes_counts_nonzeros(small_problem):
    x_true, y, system = small_problem
    model = random_model(side=4, K1=2, K2=2, seed=1)
    params = DecompositionParams(beta1=2.0, beta2=3.0)
    x = x_true.stacked()
    codes = sparse_code_and_cluster(x, model, params)
    reg = multra_regularizer(model, params)
    # replace each code by the exact (unthresholded) transform of its patch
    terms = oracles.patch_terms(codes, reg)
    sets = oracles.patch_index_sets((16, 16), 4)
    exact = np.array([T @ x.ravel()[idx] for (T, _, _), idx in zip(terms, sets)])
    exact_codes = SparseCodeSet(codes.model, codes.classes, exact)
    _, _, r = objective_p0(x, y, exact_codes, model, params, system)
    expected = sum(np.sum(beta * gamma ** 2 * (z != 0))
                   for (_, beta, gamma), z in zip(terms, exact))
    assert r == pytest.approx(expected, rel=1e-12)


def test_objective_vanishing_beta_noiseless(A0, weights):
    x_true = generate_phantom(None, (16, 16), seed=2)
    y = simulate_attenuation(x_true, A0, None)
    system = make_system(A0, weights, side=4)
    model = random_model(side=4, K1=2, K2=2)
    params = DecompositionParams(beta1=1e-12, beta2=1e-12)
    x = direct_inversion(y, A0)
    codes = SparseCodeSet(np.ones(169, dtype=np.int8), np.zeros((169, 2), dtype=int),
                          np.zeros((169, 32)))
    total, fid, reg = objective_p0(x, y, codes, model, params, system)
    energy = sum(np.sum(x.stacked().ravel()[idx] ** 2)
                 for idx in oracles.patch_index_sets((16, 16), 4))
    assert fid < 1e-18
    assert reg == pytest.approx(1e-12 * energy, rel=1e-12)
    assert total < 1e-8


def test_objective_inconsistent_codes(small_problem):
    _, y, system = small_problem
    model = random_model(side=4, K1=2, K2=2)
    bad = SparseCodeSet(np.ones(5, dtype=np.int8), np.zeros((5, 2), dtype=int), np.zeros((5, 32)))
    with pytest.raises(InconsistentCodesError):
        objective_p0(y.stacked(), y, bad, model, DecompositionParams(), system)
    n = system.patch.count((16, 16))
    out_of_range = SparseCodeSet(np.ones(n, dtype=np.int8), np.full((n, 2), 7), np.zeros((n, 32)))
    with pytest.raises(InconsistentCodesError):
        objective_p0(y.stacked(), y, out_of_range, model, DecompositionParams(), system)


# ---------------------------------------------------------------------------
# sparse coding and clustering

def brute_force_assignments(x, model, params):
    """Enumerate every block combination of common transforms plus every cross transform."""
    reg = multra_regularizer(model, params)
    m = model.patch.m
    out = []
    sets = oracles.patch_index_sets(x.shape[1:], model.patch.side, model.patch.stride)
    Kc, Kx = model.common.K, model.cross.K
    for idx in sets:
        p = x.ravel()[idx]
        best, lab = np.inf, None
        cands = [(1, kw, kb) for kw, kb in itertools.product(range(Kc), repeat=2)]
        cands += [(2, k, -1) for k in range(Kx)]
        for r, k0, k1 in cands:  # already in tie-break order
            if r == 1:
                uw, ub = reg.water[k0] @ p[:m], reg.bone[k1] @ p[m:]
                c = params.beta1 * (np.sum(np.minimum(uw ** 2, params.gamma1_water ** 2))
                                    + np.sum(np.minimum(ub ** 2, params.gamma1_bone ** 2)))
            else:
                u = reg.cross[k0] @ p
                c = params.beta2 * np.sum(np.minimum(u ** 2, params.gamma2 ** 2))
            if c < best:
                best, lab = c, (r, k0, k1)
        out.append(lab)
    return np.array(out)


@pytest.mark.parametrize("seed", [0, 1])
def test_clustering_matches_brute_force(seed, A0):
    rng = np.random.default_rng(seed)
    model = random_model(side=4, K1=4, K2=3, seed=10 + seed, stride=(1, 1))
    x = rng.standard_normal((2, 18, 17)) * 0.3  # (18-4+1)*(17-4+1) = 210 patches
    params = DecompositionParams(beta1=1.0, beta2=1.0, gamma1_water=0.3, gamma1_bone=0.25,
                                 gamma2=0.28)
    codes = sparse_code_and_cluster(x, model, params)
    ref = brute_force_assignments(x, model, params)
    got = np.column_stack([codes.model, codes.classes])
    assert len(codes) == 210
    assert set(codes.model) == {1, 2}
    np.testing.assert_array_equal(got, ref)


def test_clustering_codes_are_thresholded_transforms(small_problem):
    x_true, _, _ = small_problem
    model = random_model(side=4, K1=3, K2=2)
    params = DecompositionParams(beta1=1.0, beta2=1.0, gamma1_water=0.2, gamma1_bone=0.3,
                                 gamma2=0.25)
    x = x_true.stacked()
    codes = sparse_code_and_cluster(x, model, params)
    reg = multra_regularizer(model, params)
    sets = oracles.patch_index_sets((16, 16), 4)
    for j in range(0, len(codes), 7):
        p = x.ravel()[sets[j]]
        if codes.model[j] == 1:
            kw, kb = codes.classes[j]
            ref = np.r_[hard_threshold(reg.water[kw] @ p[:16], 0.2),
                        hard_threshold(reg.bone[kb] @ p[16:], 0.3)]
        else:
            ref = hard_threshold(reg.cross[codes.classes[j, 0]] @ p, 0.25)
        np.testing.assert_allclose(codes.codes[j], ref, rtol=0, atol=1e-12)


def test_zero_image_tie_break():
    model = random_model(side=4, K1=3, K2=2)
    codes = sparse_code_and_cluster(np.zeros((2, 8, 8)), model, DecompositionParams())
    assert np.all(codes.model == 1)
    assert np.all(codes.classes == 0)
    assert not codes.codes.any()


def test_cost_domination_selects_cross(small_problem):
    x_true, _, _ = small_problem
    model = random_model(side=4)
    codes = sparse_code_and_cluster(x_true, model, DecompositionParams(beta1=1e6, beta2=1.0))
    assert np.all(codes.model == 2)


def test_infinite_beta1_disables_common(small_problem):
    x_true, _, _ = small_problem
    model = random_model(side=4)
    codes = sparse_code_and_cluster(x_true, model, DecompositionParams(beta1=np.inf))
    assert np.all(codes.model == 2)
    assert np.all(codes.classes[:, 1] == -1)


# ---------------------------------------------------------------------------
# image update

def _update_vs_oracle(y, codes, reg, system):
    sig2 = (system.weights.sigma2_high, system.weights.sigma2_low)
    x = image_update(y, codes, reg, None, system).stacked()
    op, b = oracles.quadratic_system(y.stacked(), codes, reg, system.A0.matrix, sig2)
    ref = oracles.cg_solve(op, b)
    return x, ref, op, b


def test_image_update_matches_cg_mixed(small_problem):
    _, y, system = small_problem
    model = random_model(side=4, K1=3, K2=2, seed=3)
    params = DecompositionParams(beta1=40.0, beta2=70.0)
    codes = random_codes(system.patch.count((16, 16)), 16, 3, 2, np.random.default_rng(1))
    x, ref, _, _ = _update_vs_oracle(y, codes, multra_regularizer(model, params), system)
    assert np.linalg.norm(x.ravel() - ref) <= 1e-8 * np.linalg.norm(ref)


def test_image_update_zero_gradient(small_problem):
    _, y, system = small_problem
    model = random_model(side=4, K1=3, K2=2, seed=3)
    params = DecompositionParams(beta1=40.0, beta2=70.0)
    reg = multra_regularizer(model, params)
    codes = random_codes(system.patch.count((16, 16)), 16, 3, 2, np.random.default_rng(2))
    sig2 = (system.weights.sigma2_high, system.weights.sigma2_low)
    ys = y.stacked()
    x = image_update(y, codes, reg, None, system).stacked().ravel()
    x0 = direct_inversion(y, system.A0).stacked().ravel()
    rng = np.random.default_rng(0)
    h = 1e-4
    for _ in range(20):
        v = rng.standard_normal(x.size)
        v /= np.linalg.norm(v)

        def dd(p):
            return (oracles.subproblem_cost(p + h * v, ys, codes, reg, system.A0.matrix, sig2)
                    - oracles.subproblem_cost(p - h * v, ys, codes, reg, system.A0.matrix, sig2)
                    ) / (2 * h)
        assert abs(dd(x)) <= 1e-6 * abs(dd(x0))


def test_image_update_no_coverage_is_direct_inversion(small_problem):
    _, y, system = small_problem
    reg = random_model(side=4)
    params = DecompositionParams(beta1=1e-300, beta2=1e-300)
    codes = sparse_code_and_cluster(y.stacked(), reg, params)
    x = image_update(y, codes, reg, params, system)
    np.testing.assert_allclose(x.stacked(), direct_inversion(y, system.A0).stacked(),
                               rtol=1e-12, atol=1e-12)


def test_image_update_st_per_material_betas(small_problem):
    _, y, system = small_problem
    Ww = random_union(UnionKind.COMMON_2D, 16, 1, 1).transforms[0]
    Wb = random_union(UnionKind.COMMON_2D, 16, 1, 2).transforms[0]
    reg = st_regularizer(Ww, Wb, StParams(beta_water=20.0, beta_bone=90.0), system.patch)
    n = system.patch.count((16, 16))
    rng = np.random.default_rng(6)
    codes = SparseCodeSet(np.ones(n, dtype=np.int8), np.zeros((n, 2), dtype=int),
                          hard_threshold(rng.standard_normal((n, 32)), 1.0))
    x, ref, _, _ = _update_vs_oracle(y, codes, reg, system)
    assert np.linalg.norm(x.ravel() - ref) <= 1e-8 * np.linalg.norm(ref)


def test_huge_gamma_fixed_point_matches_cg(small_problem):
    _, y, system = small_problem
    model = random_model(side=4, K1=2, K2=2, seed=5)
    params = DecompositionParams(beta1=30.0, beta2=30.0, gamma1_water=1e6, gamma1_bone=1e6,
                                 gamma2=1e6, iterations=3)
    x0 = direct_inversion(y, system.A0)
    x, codes, trace = decompose_multra(y, model, params, system, x0)
    assert not codes.codes.any()
    x_ref, _, _, _ = _update_vs_oracle(y, codes, multra_regularizer(model, params), system)
    op, b = oracles.quadratic_system(y.stacked(), codes, multra_regularizer(model, params),
                                     system.A0.matrix, (system.weights.sigma2_high,
                                                        system.weights.sigma2_low))
    ref = oracles.cg_solve(op, b)
    assert np.linalg.norm(x.stacked().ravel() - ref) <= 1e-8 * np.linalg.norm(ref)
    assert monotone(trace.total)


# ---------------------------------------------------------------------------
# solvers

@pytest.fixture
def phantom64(A0, weights):
    x_true = generate_phantom(None, (64, 64), seed=4)
    y = simulate_attenuation(x_true, A0, NoiseWeights(0.004 ** 2, 0.004 ** 2), seed=9)
    return x_true, y, DecompositionSystem(A0, weights, PatchConfig(8))


def test_multra_half_steps_monotone(phantom64):
    _, y, system = phantom64
    model = random_model(side=8, K1=3, K2=2, seed=2)
    params = DecompositionParams(beta1=20.0, beta2=20.0, iterations=15)
    x0 = direct_inversion(y, system.A0)
    _, _, tr = decompose_multra(y, model, params, system, x0, record_half_steps=True)
    assert len(tr) == 16 and len(tr.interleaved()) == 31
    assert monotone(tr.interleaved())


def test_cultra_equals_multra_without_common(phantom64):
    _, y, system = phantom64
    model = random_model(side=8, K1=3, K2=2, seed=2)
    params = DecompositionParams(beta1=np.inf, beta2=20.0, iterations=5)
    x0 = direct_inversion(y, system.A0)
    a = decompose_multra(y, model, params, system, x0)
    b = decompose_cultra(y, model.cross, params, system, x0)
    assert a[0] == b[0] and a[1] == b[1] and a[2] == b[2]


def test_cultra_single_transform_monotone(phantom64):
    _, y, system = phantom64
    cross = random_union(UnionKind.CROSS_3D, 128, 1, 3)
    params = DecompositionParams(beta2=30.0, gamma2=0.5, iterations=10)
    y_clean = simulate_attenuation(generate_phantom(None, (64, 64), seed=4), system.A0, None)
    for data in (y, y_clean):
        _, codes, tr = decompose_cultra(data, cross, params, system,
                                        direct_inversion(data, system.A0), record_half_steps=True)
        assert np.all(codes.model == 2) and np.all(codes.classes[:, 0] == 0)
        assert monotone(tr.interleaved())


def test_st_reduces_to_multra_common_only(phantom64):
    _, y, system = phantom64
    W = random_union(UnionKind.COMMON_2D, 64, 1, 4)
    model = MultraModel(W, random_union(UnionKind.CROSS_3D, 128, 1, 5), system.patch)
    mp = DecompositionParams(beta1=25.0, beta2=np.inf, gamma1_water=0.05, gamma1_bone=0.07,
                             iterations=4)
    sp = StParams(beta_water=25.0, beta_bone=25.0, gamma_water=0.05, gamma_bone=0.07,
                  iterations=4)
    x0 = direct_inversion(y, system.A0)
    a = decompose_multra(y, model, mp, system, x0)
    b = decompose_st(y, W.transforms[0], W.transforms[0], sp, system, x0)
    assert a[0] == b[0] and a[1] == b[1] and a[2] == b[2]


def test_st_distinct_transforms_via_regularizer(phantom64):
    _, y, system = phantom64
    Ww = random_union(UnionKind.COMMON_2D, 64, 1, 6).transforms[0]
    Wb = random_union(UnionKind.COMMON_2D, 64, 1, 7).transforms[0]
    sp = StParams(beta_water=30.0, beta_bone=60.0, iterations=6)
    x0 = direct_inversion(y, system.A0)
    x, codes, tr = decompose_st(y, Ww, Wb, sp, system, x0, record_half_steps=True)
    assert np.all(codes.model == 1) and np.all(codes.classes == 0)
    assert monotone(tr.interleaved())
    # same output from an explicitly built restricted mixed regularizer
    reg = Regularizer(system.patch, Ww.matrix[None], Wb.matrix[None], None, 30.0, 60.0,
                      np.inf, sp.gamma_water, sp.gamma_bone, 1.0)
    x2, codes2, _ = run_bcd(y, reg, system, x0, 6)
    assert x == x2 and codes == codes2


def test_st_identity_huge_gamma_matches_cg(small_problem):
    _, y, system = small_problem
    eye = UnitaryTransform(np.eye(16))
    sp = StParams(beta_water=10.0, beta_bone=40.0, gamma_water=1e6, gamma_bone=1e6,
                  iterations=2)
    x, codes, _ = decompose_st(y, eye, eye, sp, system, direct_inversion(y, system.A0))
    assert not codes.codes.any()
    op, b = oracles.quadratic_system(y.stacked(), codes,
                                     st_regularizer(eye, eye, sp, system.patch),
                                     system.A0.matrix, (system.weights.sigma2_high,
                                                        system.weights.sigma2_low))
    ref = oracles.cg_solve(op, b)
    assert np.linalg.norm(x.stacked().ravel() - ref) <= 1e-8 * np.linalg.norm(ref)


def test_model_patch_mismatch(phantom64):
    _, y, system = phantom64
    with pytest.raises(DimensionError):
        decompose_multra(y, random_model(side=4), DecompositionParams(iterations=1), system,
                         direct_inversion(y, system.A0))


def test_per_iteration_runtime_scales_linearly(A0, weights):
    model = random_model(side=8, K1=4, K2=3, seed=0)
    params = DecompositionParams(beta1=20.0, beta2=20.0, iterations=1)
    x = generate_phantom(None, (256, 256), seed=0).stacked()
    system = DecompositionSystem(A0, weights, PatchConfig(8))

    def best_time(img):
        y = simulate_attenuation(img, A0, weights, seed=1)
        ts = []
        for _ in range(3):
            t0 = time.perf_counter()
            decompose_multra(y, model, params, system, img)
            ts.append(time.perf_counter() - t0)
        return min(ts)

    small, large = x[:, :128, :], x
    ratio = best_time(large) / best_time(small)
    patches = PatchConfig(8).count((256, 256)) / PatchConfig(8).count((128, 256))
    assert ratio <= 2.2 * patches / 2.0, f"runtime ratio {ratio:.2f}"


# ---------------------------------------------------------------------------
# edge-preserving baseline

def test_ep_potential_basics():
    assert ep_potential(0.0, 0.01) == 0.0 and ep_potential_derivative(0.0, 0.01) == 0.0
    for delta in (0.01, 0.02, 1.0):
        t = delta * 1e-4
        assert abs(ep_potential(t, delta) / (t * t / 2) - 1) <= 1e-6
    t = np.array([3.0, -0.5])
    ref = 0.4 ** 2 / 3 * (np.sqrt(1 + 3 * (t / 0.4) ** 2) - 1)
    np.testing.assert_allclose(ep_potential(t, 0.4), ref, rtol=1e-14)


def test_ep_derivative_finite_differences():
    for delta in (0.01, 0.02):
        for t in np.geomspace(1e-4, 1e2, 25) * delta:
            h = 1e-5 * max(abs(t), delta)
            fd = (ep_potential(t + h, delta) - ep_potential(t - h, delta)) / (2 * h)
            d = ep_potential_derivative(t, delta)
            assert abs(fd - d) <= 1e-8 * abs(d)
            assert ep_potential_derivative(-t, delta) == -d


def test_finite_difference_adjoint():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((7, 9))
    diffs = finite_differences(x)
    assert len(diffs) == 4
    r = [rng.standard_normal(d.shape) for d in diffs]
    lhs = sum(np.sum(a * b) for a, b in zip(diffs, r))
    rhs = np.sum(x * finite_differences_adjoint(r, x.shape))
    assert abs(lhs - rhs) <= 1e-12 * abs(lhs)
    # interior pixels touch all 8 neighbours exactly once
    n_pairs = sum(d.size for d in diffs)
    assert n_pairs == 6 * 9 + 7 * 8 + 2 * 6 * 8


@pytest.mark.parametrize("curvature", ["max", "huber"])
def test_ep_monotone_and_converges_to_lbfgs(curvature, A0, weights):
    x_true = generate_phantom(None, (12, 12), seed=1)
    y = simulate_attenuation(x_true, A0, weights, seed=2)
    system = DecompositionSystem(A0, weights, PatchConfig(4))
    ep = EpParams(beta_water=2 ** 8, beta_bone=2 ** 8.5, iterations=400, curvature=curvature)
    x, tr = decompose_ep(y, ep, system, direct_inversion(y, A0))
    assert monotone(tr.total)

    def f(v):
        return ep_objective(v.reshape(2, 12, 12), y, ep, system)[0]
    res = minimize(f, direct_inversion(y, A0).stacked().ravel(), method="L-BFGS-B",
                   options={"maxiter": 20000, "ftol": 1e-15, "gtol": 1e-12})
    assert tr.total[-1] <= res.fun * (1 + 1e-6)


def test_ep_vanishing_beta_is_direct_inversion(A0, weights):
    x_true = generate_phantom(None, (16, 16), seed=1)
    y = simulate_attenuation(x_true, A0, weights, seed=2)
    system = DecompositionSystem(A0, weights, PatchConfig(4))
    ep = EpParams(beta_water=1e-12, beta_bone=1e-12, iterations=5)
    x, _ = decompose_ep(y, ep, system, direct_inversion(y, A0))
    np.testing.assert_allclose(x.stacked(), direct_inversion(y, A0).stacked(), atol=1e-6)


def test_ep_constant_stays_constant(A0, weights):
    x = np.stack([np.full((10, 10), 1.0), np.full((10, 10), 0.5)])
    y = simulate_attenuation(x, A0, None)
    out, tr = decompose_ep(y, EpParams(iterations=10), DecompositionSystem(A0, weights), x)
    np.testing.assert_allclose(out.stacked(), x, rtol=0, atol=1e-14)
    assert tr.regularizer[-1] == 0.0


def test_ep_phantom_500_iterations_monotone(phantom64):
    _, y, system = phantom64
    _, tr = decompose_ep(y, EpParams(iterations=500), system, direct_inversion(y, system.A0))
    assert monotone(tr.total)


# ---------------------------------------------------------------------------
# cluster maps

def test_cluster_map_uniform():
    cfg = PatchConfig(3)
    n = cfg.count((6, 6))
    codes = SparseCodeSet(np.full(n, 2, dtype=np.int8), np.tile([1, -1], (n, 1)),
                          np.zeros((n, 18)))
    cm = pixel_cluster_map(codes, cfg, (6, 6))
    assert np.all(cm.model == 2) and np.all(cm.classes[..., 0] == 1)


def test_cluster_map_majority_and_ties():
    # 1 x 4 image, side 2 patches at columns 0, 1, 2 on a 2 x 4 image
    cfg = PatchConfig(2)
    dims = (2, 4)
    codes = SparseCodeSet(np.array([1, 1, 2], dtype=np.int8),
                          np.array([[0, 1], [0, 1], [0, -1]]), np.zeros((3, 8)))
    cm = pixel_cluster_map(codes, cfg, dims)
    # column 2 is covered by patches 1 (A) and 2 (B): tie -> lowest label (model 1)
    assert list(cm.model[0]) == [1, 1, 1, 2]
    assert cm.classes[0, 1].tolist() == [0, 1]
    codes = SparseCodeSet(np.array([2, 1, 1], dtype=np.int8),
                          np.array([[0, -1], [0, 1], [0, 1]]), np.zeros((3, 8)))
    # column 1 is covered by B, A, A... only patches 0 and 1 -> tie -> model 1
    cm = pixel_cluster_map(codes, cfg, dims)
    assert list(cm.model[0]) == [2, 1, 1, 1]


def test_cluster_map_three_patch_vote():
    cfg = PatchConfig(3)
    dims = (3, 5)  # three patches all covering column 2
    codes = SparseCodeSet(np.array([1, 2, 1], dtype=np.int8),
                          np.array([[2, 2], [0, -1], [2, 2]]), np.zeros((3, 18)))
    cm = pixel_cluster_map(codes, cfg, dims)
    assert cm.model[1, 2] == 1 and cm.classes[1, 2].tolist() == [2, 2]
    lab = cm.label_image(3)
    assert lab[1, 2] == 2 * 3 + 2


def test_cluster_map_boundary_band(A0, weights):
    # water on the left, bone on the right; cross transforms should win at the interface
    h, w = 32, 32
    x = np.zeros((2, h, w))
    x[0, :, :16] = 1.0
    x[1, :, 16:] = 1.92
    cfg = PatchConfig(4)
    m = cfg.m
    # common transform: separable DCT (flat patches are 1-sparse per half);
    # cross transform: leading atoms span the joint water/bone step at every
    # split position, so straddling patches are at most 3-sparse
    common = separable_dct(4)
    cols = np.arange(4)
    edges = [np.concatenate([np.tile((cols < s).astype(float), 4),
                             np.tile((cols >= s) * 1.92, 4)]) for s in (1, 2, 3)]
    rest = np.random.default_rng(0).standard_normal((2 * m, 2 * m - 3))
    basis = np.linalg.qr(np.column_stack(edges + [rest]))[0].T
    model = MultraModel(TransformUnion.from_stack(UnionKind.COMMON_2D, common[None]),
                        TransformUnion.from_stack(UnionKind.CROSS_3D, basis[None]), cfg)
    codes = sparse_code_and_cluster(x, model, DecompositionParams(gamma1_water=0.3,
                                                                  gamma1_bone=0.3, gamma2=0.3))
    cm = pixel_cluster_map(codes, cfg, (h, w))
    # columns 15 and 16 are the only ones where most covering patches straddle
    band = np.zeros((h, w), bool)
    band[:, 15:17] = True
    frac_band = np.mean(cm.model[band] == 2)
    frac_rest = np.mean(cm.model[~band] == 2)
    assert frac_band > 0.9 and frac_rest < 0.1


def test_long_runs_monotone(A0, weights):
    x_true = generate_phantom(None, (32, 32), seed=1)
    y = simulate_attenuation(x_true, A0, weights, seed=2)
    system = DecompositionSystem(A0, weights, PatchConfig(8))
    x0 = direct_inversion(y, A0)
    model = random_model(side=8, K1=3, K2=2)
    _, _, tr = decompose_multra(y, model, DecompositionParams(iterations=500), system, x0,
                                record_half_steps=True)
    assert len(tr) == 501 and monotone(tr.interleaved())
    W = model.common.transforms
    _, _, tr = decompose_st(y, W[0], W[1], StParams(iterations=500), system, x0,
                            record_half_steps=True)
    assert monotone(tr.interleaved())
