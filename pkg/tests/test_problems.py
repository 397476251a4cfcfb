import numpy as np
import pytest
from scipy.optimize import approx_fprime

from fdehbo import InvalidArgumentError, Point, SampleKey, Stream
from fdehbo.problems import (
    DEFAULT_REG_C,
    HyperCleaning,
    QuadraticBilevelSpec,
    corrupt_labels,
    fit_weighted_logistic,
    make_hypercleaning,
    make_quadratic,
    read_csv_dataset,
    synth_gaussian_dataset,
    write_csv_dataset,
)
from fdehbo.problems.hypercleaning import Dataset


def _central_grad(fun, x, h=1e-5):
    e = np.eye(len(x))
    return np.array([(fun(x + h * e[i]) - fun(x - h * e[i])) / (2 * h) for i in range(len(x))])


# -- quadratic ------------------------------------------------------------------


def test_scalar_hand_solution(scalar_quad):
    x = np.array([1.0])
    assert scalar_quad.y_star(x) == pytest.approx([0.5])
    assert scalar_quad.grad_phi(x) == pytest.approx([1.25], abs=1e-14)
    assert scalar_quad.grad_phi(np.zeros(1)) == pytest.approx([0.0])
    fd = _central_grad(scalar_quad.phi, x)
    assert abs(fd[0] - 1.25) <= 1e-8


def test_degenerate_spectrum_is_scaled_identity():
    prob = make_quadratic(3, 4, 2.5, 2.5, seed=3)
    assert np.array_equal(prob.spec.Q, 2.5 * np.eye(4))


def test_spectrum_in_bounds():
    prob = make_quadratic(5, 6, 0.5, 7.0, seed=1)
    eig = np.linalg.eigvalsh(prob.spec.Q)
    assert eig[0] == pytest.approx(0.5, rel=1e-10) and eig[-1] == pytest.approx(7.0, rel=1e-10)
    assert prob.constants.mu_g == pytest.approx(0.5, rel=1e-10)


@pytest.mark.parametrize("args", [(2, 2, 0.0, 1.0), (2, 2, 2.0, 1.0), (0, 2, 1.0, 1.0), (2, 2, 1.0, np.inf)])
def test_invalid_spectrum(args):
    with pytest.raises(InvalidArgumentError):
        make_quadratic(*args)


def test_spec_validation():
    with pytest.raises(InvalidArgumentError):
        QuadraticBilevelSpec(Q=[[1.0, 2.0], [0.0, 1.0]], P=np.zeros((2, 1)), c=[0, 0], A=[[1.0]], a=[0], b=[0, 0])
    with pytest.raises(InvalidArgumentError):
        QuadraticBilevelSpec(Q=-np.eye(2), P=np.zeros((2, 1)), c=[0, 0], A=[[1.0]], a=[0], b=[0, 0])
    with pytest.raises(InvalidArgumentError):
        QuadraticBilevelSpec(Q=np.eye(2), P=np.zeros((2, 1)), c=[0, 0], A=[[1.0]], a=[0], b=[0, 0],
                             noise_sigma={"bogus": 1.0})


def test_ground_truth_self_consistency(rng):
    prob = make_quadratic(6, 5, 0.5, 8.0, seed=4)
    Q = prob.spec.Q
    for _ in range(100):
        x = rng.standard_normal(6)
        y = rng.standard_normal(5)
        gt = prob.ground_truth(Point(x, y))
        assert np.abs(prob.grad_g_y(Point(x, gt.y_star))).max() <= 1e-10
        assert np.abs(Q @ gt.v_star - prob.grad_f_y(Point(x, y))).max() <= 1e-10
        fd = _central_grad(prob.phi, x)
        assert np.linalg.norm(fd - gt.grad_phi) <= 1e-6 * max(1.0, np.linalg.norm(gt.grad_phi))


def test_gradients_match_finite_differences(noisy_quad, rng):
    x, y = rng.standard_normal(4), rng.standard_normal(3)
    g = lambda xx, yy: noisy_quad.g_value(xx, yy)
    assert np.allclose(noisy_quad.grad_g_y(Point(x, y)), approx_fprime(y, lambda yy: g(x, yy), 1e-7), atol=1e-5)
    assert np.allclose(noisy_quad.grad_g_x(Point(x, y)), approx_fprime(x, lambda xx: g(xx, y), 1e-7), atol=1e-5)
    f = lambda xx, yy: noisy_quad.f_value(Point(xx, yy))
    assert np.allclose(noisy_quad.grad_f_y(Point(x, y)), approx_fprime(y, lambda yy: f(x, yy), 1e-7), atol=1e-5)
    assert np.allclose(noisy_quad.grad_f_x(Point(x, y)), approx_fprime(x, lambda xx: f(xx, y), 1e-7), atol=1e-5)


def test_noise_is_zero_mean_with_requested_sigma(noisy_quad):
    pt = Point(np.zeros(4), np.zeros(3))
    exact = noisy_quad.grad_g_y(pt)
    draws = np.array([noisy_quad.grad_g_y(pt, SampleKey(Stream.LowerZeta, 0, i)) - exact for i in range(4000)])
    assert np.abs(draws.mean(axis=0)).max() < 4 * 0.5 / np.sqrt(4000)
    assert draws.std() == pytest.approx(0.5, rel=0.05)


def test_v_star_bound_on_domain(rng):
    prob = make_quadratic(10, 10, 1.0, 10.0, seed=0)
    c = prob.constants
    R = prob.spec.domain_radius
    for _ in range(1000):
        u = rng.standard_normal(10)
        y = u / np.linalg.norm(u) * R * rng.random() ** 0.1
        gt = prob.ground_truth(Point(5 * rng.standard_normal(10), y))
        assert gt.v_star @ gt.v_star <= c.C_fy / c.mu_g**2


# -- logistic-coupled -------------------------------------------------------------


def test_logistic_products_match_gradient_differences(logistic, rng):
    pt = Point(rng.standard_normal(3), rng.standard_normal(4))
    v = rng.standard_normal(4)
    h = 1e-6
    hv = (logistic.grad_g_y(Point(pt.x, pt.y + h * v)) - logistic.grad_g_y(Point(pt.x, pt.y - h * v))) / (2 * h)
    assert np.allclose(logistic.hess_g_yy_vec(pt, v), hv, atol=1e-7)
    jv = (logistic.grad_g_x(Point(pt.x, pt.y + h * v)) - logistic.grad_g_x(Point(pt.x, pt.y - h * v))) / (2 * h)
    assert np.allclose(logistic.jac_g_xy_vec(pt, v), jv, atol=1e-7)


# -- hyper-cleaning -----------------------------------------------------------------


@pytest.fixture
def small_data():
    return synth_gaussian_dataset(60, 30, 40, 3, separation=2.0, seed=5)


def test_synthetic_dataset_is_seeded(small_data):
    again = synth_gaussian_dataset(60, 30, 40, 3, separation=2.0, seed=5)
    for a, b in zip(small_data.__dict__.values(), again.__dict__.values()):
        assert np.array_equal(a, b)
    assert small_data.train_X.shape == (60, 3) and small_data.d == 3


def test_synthetic_dataset_validation():
    with pytest.raises(InvalidArgumentError):
        synth_gaussian_dataset(0, 10, 10, 5)
    with pytest.raises(InvalidArgumentError):
        synth_gaussian_dataset(10, 10, 10, 5, separation=0)


def test_well_separated_blobs_are_linearly_classified():
    data = synth_gaussian_dataset(500, 200, 500, 5, separation=10.0, seed=0)
    prob = HyperCleaning(data)
    assert prob.test_accuracy(prob.lower_solution(np.zeros(500))) == 1.0


def test_zero_corruption_is_identity(small_data):
    out, flipped = corrupt_labels(small_data.train_y, 0.0, seed=1)
    assert np.array_equal(out, small_data.train_y) and not flipped.any()


def test_corruption_count_is_binomial():
    labels = np.zeros(500, dtype=int)
    out, flipped = corrupt_labels(labels, 0.1, seed=0)
    assert abs(flipped.sum() - 50) <= 3 * np.sqrt(500 * 0.1 * 0.9)
    assert np.array_equal(out != labels, flipped)


def test_corruption_validation():
    with pytest.raises(InvalidArgumentError):
        corrupt_labels(np.zeros(3, dtype=int), 1.0, seed=0)


def test_default_reg_c(small_data):
    assert DEFAULT_REG_C == 0.001
    assert make_hypercleaning(small_data).reg_C == 0.001


def test_hypercleaning_errors(small_data):
    from dataclasses import replace

    with pytest.raises(InvalidArgumentError):
        HyperCleaning(small_data, reg_C=0.0)
    with pytest.raises(InvalidArgumentError):
        HyperCleaning(replace(small_data, val_X=np.zeros((0, 3)), val_y=np.zeros(0, dtype=int)))
    with pytest.raises(InvalidArgumentError):
        HyperCleaning(replace(small_data, val_y=np.ones(30, dtype=int)))


def test_lower_level_strong_convexity(small_data, rng):
    prob = make_hypercleaning(small_data, seed=0)
    for _ in range(50):
        pt = Point(3 * rng.standard_normal(60), rng.standard_normal(3))
        v = rng.standard_normal(3)
        assert v @ prob.hess_g_yy_vec(pt, v) >= 2 * prob.reg_C * (v @ v) * (1 - 1e-12)


def test_minibatches_average_to_full_batch(small_data, rng):
    prob = make_hypercleaning(small_data, seed=0, batch_size=15)  # 4 train chunks, 2 val chunks
    pt = Point(rng.standard_normal(60), rng.standard_normal(3))
    v = rng.standard_normal(3)
    kz, kp, kx = SampleKey(Stream.LowerZeta, 1, 7), SampleKey(Stream.LsPsi, 1, 7), SampleKey(Stream.UpperXi, 1, 7)
    checks = [
        (lambda k: prob.grad_g_y(pt, k), kz, 4, prob.grad_g_y(pt)),
        (lambda k: prob.grad_g_x(pt, k), kx, 4, prob.grad_g_x(pt)),
        (lambda k: prob.hess_g_yy_vec(pt, v, k), kp, 4, prob.hess_g_yy_vec(pt, v)),
        (lambda k: prob.jac_g_xy_vec(pt, v, k), kx, 4, prob.jac_g_xy_vec(pt, v)),
        (lambda k: prob.grad_f_y(pt, k), kx, 2, prob.grad_f_y(pt)),
    ]
    for est, key, n, full in checks:
        avg = np.mean([est(key.with_slot(s)) for s in range(n)], axis=0)
        assert np.abs(avg - full).max() <= 1e-12


def test_hypercleaning_gradients_match_finite_differences(small_data, rng):
    prob = make_hypercleaning(small_data, seed=0)
    x, y = rng.standard_normal(60), rng.standard_normal(3)
    assert np.allclose(prob.grad_g_y(Point(x, y)), _central_grad(lambda yy: prob.g_value(x, yy), y), atol=1e-7)
    assert np.allclose(prob.grad_g_x(Point(x, y)), _central_grad(lambda xx: prob.g_value(xx, y), x), atol=1e-7)
    assert np.allclose(prob.grad_f_y(Point(x, y)), _central_grad(lambda yy: prob.f_value(Point(x, yy)), y),
                       atol=1e-7)
    assert np.array_equal(prob.grad_f_x(Point(x, y)), np.zeros(60))


def test_hypercleaning_numerical_hypergradient(small_data, rng):
    prob = make_hypercleaning(small_data, seed=0)
    x = 0.5 * rng.standard_normal(60)
    fd = _central_grad(prob.phi, x, h=1e-4)
    assert np.allclose(prob.grad_phi(x), fd, atol=1e-8)


def test_weighted_logistic_fit_is_stationary(small_data):
    w = fit_weighted_logistic(small_data.train_X, small_data.train_y, np.full(60, 0.7), 0.01)
    prob = HyperCleaning(small_data, reg_C=0.01)
    x = np.full(60, np.log(0.7 / 0.3))
    assert np.abs(prob.grad_g_y(Point(x, w))).max() <= 1e-10


def test_csv_round_trip(tmp_path, small_data):
    X = np.vstack([small_data.train_X, small_data.val_X])
    y = np.concatenate([small_data.train_y, small_data.val_y])
    path = tmp_path / "d.csv"
    write_csv_dataset(path, X, y)
    text = path.read_bytes()
    assert text.startswith(b"f0,f1,f2,label\n") and b"\r" not in text
    data = read_csv_dataset(path, val_fraction=0.2, test_fraction=0.3, seed=0)
    assert (len(data.train_y), len(data.val_y), len(data.test_y)) == (45, 18, 27)
    back = np.vstack([data.train_X, data.val_X, data.test_X])
    assert sorted(map(tuple, back)) == sorted(map(tuple, X))


@pytest.mark.parametrize("content", ["", "a,b,label\n1,2,0\n", "f0,label\n1,2,3\n", "f0,label\n1,5\n",
                                     "f0,label\nx,1\n"])
def test_csv_rejects_malformed(tmp_path, content):
    path = tmp_path / "bad.csv"
    path.write_text(content)
    with pytest.raises(InvalidArgumentError):
        read_csv_dataset(path)
