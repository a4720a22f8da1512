from fractions import Fraction

import numpy as np
import pytest

from adaptobs.plant import Box
from adaptobs.rls import RlsConfig, RlsState, rls_jump, rls_output
from adaptobs.wavelet import (
    WaveletBasis,
    WaveletIdentifier,
    WaveletRegressor,
    bspline_eval,
    bspline_pieces,
    build_index_sets,
    cascade_jump,
    cascade_predict,
    cdf_filters,
    check_stage_independence,
    stage_rows,
    tensor_eval,
    two_scale_check,
)

BASIS = WaveletBasis()


def _fd(f, x, step=1e-6):
    return (f(x + step) - f(x - step)) / (2 * step)


def test_quadratic_bspline_peak():
    assert bspline_eval(3, 1.5)[0] == pytest.approx(0.75)


@pytest.mark.parametrize("m", [3, 4, 5])
def test_bspline_support_and_partition_of_unity(m):
    assert bspline_eval(m, -0.1)[0] == 0.0
    assert bspline_eval(m, m + 0.1)[0] == 0.0
    x = np.linspace(-3.0, 7.0, 10001)
    total = sum(bspline_eval(m, x - k)[0] for k in range(-m - 4, 8))
    assert np.max(np.abs(total - 1.0)) <= 1e-12


@pytest.mark.parametrize("m", [3, 4])
def test_bspline_derivative(m):
    x = np.linspace(0.05, m - 0.05, 97)
    x = x[np.abs(x - np.round(x)) > 1e-3]
    _, d = bspline_eval(m, x)
    np.testing.assert_allclose(d, _fd(lambda s: bspline_eval(m, s)[0], x), atol=1e-8)


def test_bspline_rejects_low_order():
    with pytest.raises(ValueError):
        bspline_eval(2, 0.5)
    with pytest.raises(ValueError):
        WaveletBasis(order=2)


def test_piecewise_table_matches_recursion():
    pieces = bspline_pieces(3)
    x = np.linspace(0, 2.999, 400)
    p = np.floor(x).astype(int)
    s = x - p
    horner = np.array([np.polyval(pieces[q][::-1], t) for q, t in zip(p, s)])
    np.testing.assert_allclose(horner, bspline_eval(3, x)[0], atol=1e-14)


def test_refinement_filter_is_binomial():
    h, hd, off = cdf_filters(3, 5)
    assert h == [Fraction(1, 4), Fraction(3, 4), Fraction(3, 4), Fraction(1, 4)]
    np.testing.assert_array_equal(BASIS.h, [0.25, 0.75, 0.75, 0.25])


def test_dual_filter_biorthogonality():
    h, hd, off = cdf_filters(3, 5)
    hmap = dict(enumerate(h))
    dmap = {off + i: c for i, c in enumerate(hd)}
    assert sum(hd) == 2
    for k in range(-8, 9):
        s = sum(hmap[n] * dmap.get(n + 2 * k, 0) for n in hmap)
        assert s == (2 if k == 0 else 0)


def test_wavelet_vanishing_moments():
    # psi has as many vanishing moments as the dual filter has zeros at pi
    x = np.linspace(*BASIS.psi_support, 200001)
    v = BASIS.psi(x)[0]
    w = np.full(x.size, x[1] - x[0])
    w[0] = w[-1] = w[0] / 2
    for p in range(5):
        assert abs(np.sum(w * v * x**p)) <= 1e-7
    assert abs(np.sum(w * v * x**5)) > 1e-3


def test_two_scale_residual():
    grid = np.linspace(-4.0, 5.0, 10000)
    r_phi, r_psi = two_scale_check(BASIS, grid)
    assert r_phi <= 1e-12 and r_psi <= 1e-12


@pytest.mark.parametrize("i,k", [(3, -2), (1, 4), (-1, 0)])
def test_two_scale_at_dilated_copies(i, k):
    # f_{i,k} = sum_l h_l phi_{i-1, 2k+l}
    s = np.linspace(-20, 20, 4001)
    lhs = BASIS.dilated("scaling", i, k, s)[0]
    rhs = sum(hl * BASIS.dilated("scaling", i - 1, 2 * k + l, s)[0] for l, hl in enumerate(BASIS.h)) / np.sqrt(2)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12


def test_psi_derivative_and_support():
    lo, hi = BASIS.psi_support
    assert (lo, hi) == (-3.0, 4.0)
    assert BASIS.psi(lo - 0.01)[0] == 0.0 and BASIS.psi(hi + 0.01)[0] == 0.0
    x = np.linspace(lo + 0.01, hi - 0.01, 300)
    x = x[np.abs(2 * x - np.round(2 * x)) > 1e-3]
    np.testing.assert_allclose(BASIS.psi(x)[1], _fd(lambda s: BASIS.psi(s)[0], x), atol=1e-7)


def test_tensor_1d_reduces_to_dilated():
    for s in np.linspace(-20, 20, 41):
        v, g = tensor_eval(BASIS, 1, 2, [1], [s])
        dv, dd = BASIS.dilated("wavelet", 2, 1, s)
        assert v == pytest.approx(dv, abs=1e-15) and g[0] == pytest.approx(dd, abs=1e-15)
        v, g = tensor_eval(BASIS, "scaling", 2, [1], [s])
        assert v == pytest.approx(BASIS.dilated("scaling", 2, 1, s)[0], abs=1e-15)


def test_tensor_outside_support_is_zero():
    v, g = tensor_eval(BASIS, 3, 0, [0, 0], [10.0, 0.5])
    assert v == 0.0 and np.all(g == 0.0)


def test_tensor_product_factorization():
    x = np.array([0.7, -1.3])
    k = [0, -1]
    v, g = tensor_eval(BASIS, 3, 0, k, x)
    a = BASIS.dilated("wavelet", 0, k[0], x[0])
    b = BASIS.dilated("wavelet", 0, k[1], x[1])
    assert v == pytest.approx(a[0] * b[0], rel=1e-14)
    np.testing.assert_allclose(g, [a[1] * b[0], a[0] * b[1]], rtol=1e-14)
    # pattern 1 puts psi on the first coordinate only
    v1, _ = tensor_eval(BASIS, 1, 0, k, x)
    assert v1 == pytest.approx(a[0] * BASIS.dilated("scaling", 0, k[1], x[1])[0], rel=1e-14)
    with pytest.raises(ValueError):
        tensor_eval(BASIS, 4, 0, k, x)


def test_tensor_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(300):
        h = int(rng.integers(0, 4))
        kind = "scaling" if h == 0 else h
        i = int(rng.integers(-1, 3))
        k = rng.integers(-3, 2, 2)
        x = rng.uniform(-6, 6, 2)
        v, g = tensor_eval(BASIS, kind, i, k, x)
        if v == 0.0 and not g.any():
            continue
        step = 1e-6 * 2.0**i
        fd = np.array([(tensor_eval(BASIS, kind, i, k, x + step * e)[0]
                        - tensor_eval(BASIS, kind, i, k, x - step * e)[0]) / (2 * step) for e in np.eye(2)])
        worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(g), 1e-2))
    assert worst <= 1e-5


def test_index_set_interval_arithmetic():
    sets = build_index_sets(BASIS, Box([-10.0], [10.0]), 3, 1)
    assert [k[0] for k in sets.H] == list(range(-4, 2))
    # detail sets use the hull [-3, 4] of the phi and psi supports
    assert [k[0] for k in sets.K[3]] == list(range(-5, 5))
    assert [k[0] for k in sets.K[2]] == list(range(-6, 6))


def test_index_set_covers_and_excludes():
    box = Box([-10.0], [10.0])
    sets = build_index_sets(BASIS, box, 3, 3)
    x = np.linspace(-10, 10, 2001)
    cover = sum(BASIS.dilated("scaling", 3, k[0], x)[0] for k in sets.H)
    assert np.all(cover > 0)
    for k in (-5, 2):
        assert np.all(BASIS.dilated("scaling", 3, k, x)[0] == 0.0)


def test_index_set_of_point_box():
    # a point inside the open supports meets exactly `order` consecutive shifts
    sets = build_index_sets(BASIS, Box([1.3], [1.3]), 0, 0)
    ks = [k[0] for k in sets.H]
    assert len(ks) == 3
    assert all(BASIS.phi(1.3 - k)[0] > 0 for k in ks)
    with pytest.raises(ValueError):
        build_index_sets(BASIS, Box([0.0], [1.0]), 0, 1)


def test_stage_sizes_2d():
    sets = build_index_sets(BASIS, Box([-10.0, -10.0], [10.0, 10.0]), 3, 1)
    assert len(sets.H) == 36
    assert sets.n_theta(2, 3, 2) == 3 * len(sets.K[3]) == 300
    assert stage_rows(sets, 1, 3, 2).shape == (3 * len(sets.K[2]), 4)


def _cascade(i0=3, iT=1, mu=(0.999, 0.995, 0.99), R=1e-3, times=None, box=(-10.0, 10.0), c_gamma=1e4):
    return WaveletIdentifier.build(BASIS, Box([box[0]], [box[1]]), [0], 1, i0, iT, mu=mu, R=R,
                                   enable_times=times, c_gamma=c_gamma)


def test_single_stage_is_plain_rls():
    c = _cascade(3, 3, mu=0.99)
    cfg = c.stages[0].cfg
    rng = np.random.default_rng(1)
    z = c.initial_state()
    zr = RlsState(cfg.z1_0.copy(), cfg.z2_0.copy())
    for _ in range(50):
        x, y = rng.uniform(-10, 10, 1), rng.standard_normal()
        z = cascade_jump(c, z, x, y)
        zr = rls_jump(cfg, zr, x, y)
    np.testing.assert_array_equal(z[0].z1, zr.z1)
    np.testing.assert_array_equal(c.output(z), rls_output(cfg, zr))


def test_exact_coarse_fit_leaves_details_idle():
    c = _cascade(3, 2, mu=0.9, R=[0.0, 1e-3])
    reg = c.stages[0].regressor
    rng = np.random.default_rng(2)
    theta_c = rng.standard_normal(reg.n_theta)
    X = rng.uniform(-10, 10, (400, 1))
    S = reg(X)
    G = S.T @ S
    z = (RlsState(G, G @ theta_c), c.ideal_initial_state()[1])
    for x in X[:100]:
        z = cascade_jump(c, z, x, float(reg(x) @ theta_c))
    th = c.stage_outputs(z)
    np.testing.assert_allclose(th[0], theta_c, atol=1e-8)
    assert np.max(np.abs(th[1])) <= 1e-8


def test_representable_function_fitted_by_first_stage():
    c = _cascade(3, 2, mu=(0.95, 0.95), R=(0.0, 1e-3))
    reg = c.stages[0].regressor
    rng = np.random.default_rng(3)
    theta_c = rng.standard_normal(reg.n_theta)
    z = c.ideal_initial_state()
    for x in rng.uniform(-10, 10, (600, 1)):
        z = c.jump(z, x, float(reg(x) @ theta_c))
    th = c.stage_outputs(z)
    np.testing.assert_allclose(th[0], theta_c, atol=1e-8)
    assert np.max(np.abs(th[1])) <= 1e-6


def test_stage_activation_schedule():
    c = _cascade(times=[50.0, 200.0, 350.0])
    z = c.initial_state()
    assert z == (None, None, None)
    z = c.jump(z, [1.0], 1.0, 49.9)
    assert z == (None, None, None)
    z = c.jump(z, [1.0], 1.0, 50.0)
    assert z[0] is not None and z[1] is None and z[2] is None
    # fresh (I, 0) state, one RLS update applied
    cfg = c.stages[0].cfg
    ref = rls_jump(cfg, RlsState(np.eye(cfg.n_theta), np.zeros(cfg.n_theta)), [1.0], 1.0)
    np.testing.assert_array_equal(z[0].z1, ref.z1)
    z = c.jump(z, [1.0], 1.0, 360.0)
    assert all(s is not None for s in z)
    np.testing.assert_array_equal(c.output(c.initial_state()), 0.0)


def test_regularized_stages_have_pe_from_start():
    c = _cascade()
    ok, value = c.pe_status(c.ideal_initial_state())
    assert ok and value == pytest.approx(1e-3)


def test_cascade_predict_zero_theta_and_outside_box():
    c = _cascade()
    v, g = cascade_predict(c, np.zeros(c.n_theta), np.array([1.0]))
    assert v == 0.0 and np.all(g == 0.0)
    theta = np.random.default_rng(4).standard_normal(c.n_theta)
    v, g = cascade_predict(c, theta, np.array([200.0]))
    assert v == 0.0 and np.all(g == 0.0)


def test_cascade_predict_gradient_and_batch():
    c = _cascade()
    rng = np.random.default_rng(5)
    theta = rng.standard_normal(c.n_theta)
    X = rng.uniform(-10, 10, (1000, 1))
    vals, grads = cascade_predict(c, theta, X)
    step = 1e-6
    fd = (cascade_predict(c, theta, X + step)[0] - cascade_predict(c, theta, X - step)[0]) / (2 * step)
    rel = np.abs(grads[:, 0] - fd) / np.maximum(np.abs(grads[:, 0]), 1.0)
    assert rel.max() <= 1e-5
    for x, v in zip(X[:20], vals[:20]):
        assert cascade_predict(c, theta, x)[0] == pytest.approx(v, rel=1e-13, abs=1e-13)
    # model set gradient matches the cascade gradient
    np.testing.assert_allclose(c.model_set.phi_hat_grad_x(theta, X[0]), grads[0], rtol=1e-12)


def test_dir_kernel_matches_jacobian():
    c = _cascade()
    reg = c.full_regressor
    rng = np.random.default_rng(6)
    theta = rng.standard_normal(c.n_theta)
    for _ in range(50):
        x = rng.uniform(-10, 10, 1)
        v = rng.standard_normal(1)
        expected = float(theta @ reg.jacobian(x) @ v)
        assert reg.dir_kernel(theta, x, v, reg.kernel_params) == pytest.approx(expected, rel=1e-12, abs=1e-14)


def test_regressor_on_unused_coordinates():
    # 1-D wavelets on x1 of a 2-D state ignore x2
    sets = build_index_sets(BASIS, Box([-10.0], [10.0]), 3, 3)
    reg = WaveletRegressor(BASIS, stage_rows(sets, 3, 3, 1), [0], 2)
    np.testing.assert_array_equal(reg(np.array([1.0, 5.0])), reg(np.array([1.0, -7.0])))
    assert np.all(reg.jacobian(np.array([1.0, 5.0]))[:, 1] == 0.0)


def test_stage_independence():
    c = _cascade(times=[0.0, 2.0, 4.0])
    rng = np.random.default_rng(7)
    n = 120
    same, worst = check_stage_independence(c, rng.uniform(-10, 10, (n, 1)), rng.standard_normal(n),
                                           np.arange(n) * 0.1)
    assert same and worst == 0.0


def test_l2_error_decreases_with_detail_stages():
    # offline fit of phi(x) = 3 atan(x) - x sampled on [-6, 6]
    c = _cascade(mu=(0.999, 0.999, 0.999))
    rng = np.random.default_rng(8)
    f = lambda x: 3 * np.arctan(x) - x
    z = c.initial_state()
    for x in rng.uniform(-6, 6, (6000, 1)):
        z = c.jump(z, x, float(f(x[0])))
    theta = c.output(z)
    s = np.linspace(-6, 6, 2401)
    errs = []
    for k in (1, 2, 3):
        v, _ = cascade_predict(c, theta, s[:, None], k)
        errs.append(np.sqrt(np.trapezoid((f(s) - v) ** 2, s)))
    assert errs[0] > errs[1] > errs[2]
