import numpy as np
import pytest
from hypothesis import given, strategies as st

from dloadapt import rbfn, training
from dloadapt.data import Dataset
from dloadapt.errors import TrainingDiverged
from dloadapt.gradcheck import check_gradients, random_problem, reference_loss
from dloadapt.optim import Adam


def synthetic(seed, samples=3000, q=8, l=3, n=3, m=2):
    """Data generated by a known network, shapes clustered around its centers."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(q, l * m)) * 2.0
    widths = rng.uniform(1.0, 1.5, q)
    true = rbfn.RbfNetwork(centers, widths, rng.normal(size=(l * n * (m + 1), q)) * 0.5, l, n, m)
    phi = centers[rng.integers(q, size=samples)] + 0.5 * rng.normal(size=(samples, l * m))
    rdot = 0.5 * rng.normal(size=(samples, n))
    theta = rbfn.activations(true, phi)
    jac = (theta @ true.weights[:l * n * m].T).reshape(samples, m, n, l)
    xdot = np.einsum("bhij,bi->bhj", jac, rdot)
    return true, Dataset(np.arange(samples) * 0.02, phi, rdot, xdot)


# --- smooth-L1 -------------------------------------------------------------

def test_smooth_l1_pieces():
    loss, grad = training.smooth_l1_loss(np.array([0.0, 0.5, -0.5, 2.0, -3.0]), beta=1.0)
    assert loss == pytest.approx(0 + 0.125 + 0.125 + 1.5 + 2.5)
    np.testing.assert_allclose(grad, [0, 0.5, -0.5, 1, -1])


@given(st.floats(0.05, 5.0), st.floats(-10, 10))
def test_smooth_l1_continuous_and_bounded_slope(beta, e):
    lo, _ = training.smooth_l1_loss(np.array([beta * (1 - 1e-9)]), beta)
    hi, _ = training.smooth_l1_loss(np.array([beta * (1 + 1e-9)]), beta)
    assert lo == pytest.approx(hi, abs=1e-8)
    _, g = training.smooth_l1_loss(np.array([e]), beta)
    assert abs(g[0]) <= 1.0


@given(st.floats(0.1, 3.0), st.floats(-6, 6).filter(lambda x: abs(x) > 1e-3))
def test_smooth_l1_gradient_matches_difference(beta, e):
    if abs(abs(e) - beta) < 1e-3:
        return
    h = 1e-6
    up, _ = training.smooth_l1_loss(np.array([e + h]), beta)
    down, _ = training.smooth_l1_loss(np.array([e - h]), beta)
    _, g = training.smooth_l1_loss(np.array([e]), beta)
    assert g[0] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-6)


# --- gradients -------------------------------------------------------------

def test_batch_loss_matches_reference():
    rng = np.random.default_rng(3)
    for _ in range(10):
        net, phi, rdot, xdot, beta = random_problem(rng)
        ref = reference_loss(net.centers, net.widths, net.weights, phi, rdot, xdot, beta, net.l, net.n, net.m)
        assert training.batch_loss(net, phi, rdot, xdot, beta) == pytest.approx(float(ref), rel=1e-12)
        value, _ = training.backprop(net, phi, rdot, xdot, beta)
        assert value == pytest.approx(float(ref), rel=1e-12)


def test_backprop_gradients_small_sweep():
    report = check_gradients(configs=10, seed=11)
    assert report.passed, report


def test_backprop_ignores_target_head():
    rng = np.random.default_rng(5)
    net, phi, rdot, xdot, beta = random_problem(rng)
    _, grads = training.backprop(net, phi, rdot, xdot, beta)
    assert np.all(grads["weights"][net.l * net.n * net.m:] == 0.0)


# --- Adam ------------------------------------------------------------------

def test_adam_first_step_is_lr_times_sign():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    Adam(lr=0.1).step(p, {"w": np.array([5.0, -0.001, 0.0])})
    np.testing.assert_allclose(p["w"], [0.9, -1.9, 3.0], atol=1e-6)


def test_adam_matches_scalar_reference(rng):
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    w = rng.normal(size=4)
    p = {"w": w.copy()}
    opt = Adam(lr, b1, b2, eps)
    m = np.zeros(4)
    v = np.zeros(4)
    for t in range(1, 30):
        g = rng.normal(size=4)
        opt.step(p, {"w": g})
        for k in range(4):
            m[k] = b1 * m[k] + (1 - b1) * g[k]
            v[k] = b2 * v[k] + (1 - b2) * g[k] ** 2
            w[k] -= lr * (m[k] / (1 - b1**t)) / (np.sqrt(v[k] / (1 - b2**t)) + eps)
    np.testing.assert_allclose(p["w"], w, rtol=1e-12)


def test_adam_minimises_quadratic():
    p = {"w": np.array([3.0, -4.0])}
    opt = Adam(lr=0.05)
    for _ in range(2000):
        opt.step(p, {"w": 2 * p["w"]})
    assert np.linalg.norm(p["w"]) < 1e-2


# --- k-means ---------------------------------------------------------------

def test_kmeans_recovers_separated_clusters(rng):
    true = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    x = np.concatenate([c + 0.1 * rng.normal(size=(200, 2)) for c in true])
    centers, labels, hist = training.kmeans(x, 3, np.random.default_rng(0))
    found = centers[np.argsort(centers @ [1.0, 3.0])]
    np.testing.assert_allclose(found, true[np.argsort(true @ [1.0, 3.0])], atol=0.05)
    assert len(np.unique(labels)) == 3


def test_kmeans_objective_non_increasing(rng):
    x = rng.normal(size=(500, 4))
    _, _, hist = training.kmeans(x, 12, np.random.default_rng(1))
    assert all(b <= a * (1 + 1e-12) for a, b in zip(hist, hist[1:]))


def test_kmeans_needs_enough_samples():
    with pytest.raises(ValueError):
        training.kmeans(np.zeros((3, 2)), 4, np.random.default_rng(0))


def test_kmeans_handles_duplicate_points():
    x = np.repeat(np.array([[1.0, 2.0], [3.0, 4.0]]), 10, axis=0)
    centers, labels, _ = training.kmeans(x, 4, np.random.default_rng(0))
    assert np.all(np.isfinite(centers))
    assert np.bincount(labels, minlength=4).min() >= 1


def test_kmeans_init_width_is_mean_member_distance(rng):
    x = rng.normal(size=(300, 3))
    centers, widths = training.kmeans_init(x, 5, seed=2)
    labels = training._sqdist(x, centers).argmin(1)
    for j in range(5):
        members = x[labels == j]
        assert widths[j] == pytest.approx(np.linalg.norm(members - centers[j], axis=1).mean(), rel=1e-9)


def test_kmeans_init_floor():
    x = np.zeros((10, 2))
    _, widths = training.kmeans_init(x, 2, sigma_min=0.25)
    assert np.all(widths == 0.25)


# --- normalization ---------------------------------------------------------

def test_normalization_fold_preserves_predictions(rng):
    _, ds = synthetic(1, samples=200)
    ds.phi = ds.phi * 0.01 + 3.0
    norm = training.Normalization.fit(ds)
    nd = norm.apply(ds)
    net = rbfn.RbfNetwork(rng.normal(size=(5, 6)), rng.uniform(0.5, 2, 5), rng.normal(size=(27, 5)), 3, 3, 2)
    raw = norm.denormalize(net)
    np.testing.assert_allclose(rbfn.activations(raw, ds.phi), rbfn.activations(net, nd.phi), rtol=1e-9, atol=1e-12)
    assert training.dataset_loss(raw, ds, 1.0, norm.velocity_scale) == pytest.approx(
        training.dataset_loss(net, nd), rel=1e-9)


def test_normalization_statistics():
    _, ds = synthetic(2, samples=500)
    nd = training.Normalization.fit(ds).apply(ds)
    np.testing.assert_allclose(nd.phi.mean(0), 0, atol=1e-12)
    assert np.mean(nd.phi.var(0)) == pytest.approx(1.0)
    vel = np.concatenate([nd.rdot.ravel(), nd.xdot.ravel()])
    assert np.mean(vel**2) == pytest.approx(1.0)


# --- training --------------------------------------------------------------

def test_training_fits_realizable_target():
    true, ds = synthetic(0)
    train, test = ds.select(slice(0, 2500)), ds.select(slice(2500, None))
    res = training.train(train, training.TrainConfig(q=8, epochs=40, lr=1e-2, batch_size=128, target_feature=0))
    scale = training.Normalization.fit(test).velocity_scale
    trained = training.dataset_loss(res.net, test, 1.0, scale)
    untrained = training.dataset_loss(res.initial_net, test, 1.0, scale)
    assert training.dataset_loss(true, test, 1.0, scale) < 1e-20
    assert trained < 0.2 * untrained
    assert res.history[-1] < res.history[0]


def test_training_is_deterministic():
    _, ds = synthetic(4, samples=600)
    cfg = training.TrainConfig(q=6, epochs=3, lr=1e-2, batch_size=64, seed=9, target_feature=0)
    a = training.train(ds, cfg)
    b = training.train(ds, cfg)
    assert rbfn.to_bytes(a.net) == rbfn.to_bytes(b.net)
    assert a.history == b.history


def test_untrained_network_has_zero_weights_and_metadata():
    _, ds = synthetic(4, samples=400)
    res = training.train(ds, training.TrainConfig(q=4, epochs=1, target_feature=1))
    assert np.all(res.initial_net.weights == 0)
    assert res.net.target_feature == 1
    assert res.net.weights.shape == (3 * 3 * 3, 4)
    assert np.all(res.net.widths >= res.net.sigma_min)


def test_training_diverged_reports_epoch():
    _, ds = synthetic(4, samples=300)
    ds.xdot[10, 0, 0] = np.inf
    with pytest.raises(TrainingDiverged) as info:
        training.train(ds, training.TrainConfig(q=4, epochs=2, target_feature=0))
    assert "0" in str(info.value)


def test_config_validation():
    with pytest.raises(ValueError):
        training.TrainConfig(beta=0)
    with pytest.raises(ValueError):
        training.TrainConfig(batch_size=0)


def test_kmeans_single_cluster_is_mean(rng):
    x = rng.normal(size=(50, 3))
    centers, widths = training.kmeans_init(x, 1)
    np.testing.assert_allclose(centers[0], x.mean(0), rtol=1e-12)
    assert widths[0] == pytest.approx(np.linalg.norm(x - x.mean(0), axis=1).mean())


def test_kmeans_one_cluster_per_distinct_point():
    x = np.repeat(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 5.0]]), 7, axis=0)
    centers, widths = training.kmeans_init(x, 3, sigma_min=1e-3)
    assert sorted(map(tuple, np.round(centers, 12))) == [(0.0, 0.0), (0.0, 5.0), (1.0, 0.0)]
    np.testing.assert_allclose(widths, 1e-3)
