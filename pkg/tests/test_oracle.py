import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from sudelab.oracle import DiracWorld, DiscreteWorld, condition_gaussian, decomposition_check
from sudelab.schedule import forward_noise, make_schedule, posterior_mean
from sudelab.verify import decomposition_error, loss_decomposition_error, revelation_error

SCHED = make_schedule()


@pytest.fixture
def world():
    anchors = {"A": np.array([1.0, 0.0]), "B": np.array([-1.0, 0.5]), "C": np.array([0.2, -1.0])}
    return DiracWorld(anchors, {"A": 0.3, "B": 0.3, "C": 0.4}, SCHED)


def chain_joint_2d(t):
    """Covariance of (x_{t-1}, x_t) in 2-D for x0 = 0, from independent unit noises."""
    ab_prev, b = SCHED.alpha_bar[t - 1], SCHED.beta[t]
    one = np.array([[np.sqrt(1 - ab_prev), 0.0], [np.sqrt((1 - b) * (1 - ab_prev)), np.sqrt(b)]])
    A = np.kron(one, np.eye(2))
    return A @ A.T


def test_exact_mean_zero_noise_on_segment(world):
    a = world.anchors["A"]
    t = 40
    x_t = forward_noise(a, np.zeros(2), t, SCHED)
    m = world.exact_mean(x_t, "A", t)
    c0 = np.sqrt(SCHED.alpha_bar[t - 1]) * SCHED.beta[t] / (1 - SCHED.alpha_bar[t])
    ct = np.sqrt(1 - SCHED.beta[t]) * (1 - SCHED.alpha_bar[t - 1]) / (1 - SCHED.alpha_bar[t])
    np.testing.assert_allclose(m, c0 * a + ct * x_t, atol=1e-15)
    # zero noise keeps x_t on the ray through the anchor, so the mean is too
    assert abs(m[0] * a[1] - m[1] * a[0]) < 1e-12


def test_exact_mean_collapses_at_first_step(world):
    x_t = np.array([0.4, 0.1])
    np.testing.assert_allclose(world.exact_mean(x_t, "B", 1), world.anchors["B"], atol=1e-12)


@pytest.mark.parametrize("t", [2, 17, 50, 100])
def test_exact_mean_matches_gaussian_conditioning(world, t):
    rng = np.random.default_rng(t)
    a = world.anchors["C"]
    x_t = rng.normal(size=2)
    ab_prev, ab = SCHED.alpha_bar[t - 1], SCHED.alpha_bar[t]
    mean = np.concatenate([np.sqrt(ab_prev) * a, np.sqrt(ab) * a])
    m, _ = condition_gaussian(mean, chain_joint_2d(t), [2, 3], x_t)
    assert np.abs(world.exact_mean(x_t, "C", t) - m).max() < 1e-8


def test_null_mean_mixes_by_posterior(world):
    x_t, t = np.array([0.3, -0.2]), 60
    w = world.bayes_posterior(x_t, t)
    mix = sum(wi * posterior_mean(world.anchors[k], x_t, t, SCHED) for wi, k in zip(w, world.labels))
    np.testing.assert_allclose(world.exact_mean(x_t, "null", t), mix, atol=1e-14)


def test_bayes_symmetry():
    w = DiracWorld({"A": np.array([1.0, 0.0]), "B": np.array([-1.0, 0.0])}, {"A": 0.5, "B": 0.5}, SCHED)
    np.testing.assert_allclose(w.bayes_posterior(np.array([0.0, 0.7]), 30), [0.5, 0.5], atol=1e-15)


def test_bayes_dominance(world):
    assert world.bayes_posterior(world.anchors["A"], 3)[0] > 0.99


def test_bayes_direct_densities_and_monte_carlo():
    anchors = {"a": np.array([-1.0]), "b": np.array([0.3]), "c": np.array([1.2])}
    prior = {"a": 0.2, "b": 0.5, "c": 0.3}
    w = DiracWorld(anchors, prior, SCHED)
    t, x = 30, np.array([0.1])
    ab = SCHED.alpha_bar[t]
    dens = np.array([prior[k] * multivariate_normal.pdf(x, np.sqrt(ab) * anchors[k], 1 - ab) for k in anchors])
    direct = dens / dens.sum()
    np.testing.assert_allclose(w.bayes_posterior(x, t), direct, atol=1e-12)

    rng = np.random.default_rng(0)
    n = 1_000_000
    labels = rng.choice(3, size=n, p=list(prior.values()))
    centres = np.sqrt(ab) * np.array([v[0] for v in anchors.values()])
    xs = centres[labels] + np.sqrt(1 - ab) * rng.standard_normal(n)
    near = np.abs(xs - x[0]) < 0.01
    mc = np.bincount(labels[near], minlength=3) / near.sum()
    np.testing.assert_allclose(mc, direct, atol=0.03)


def test_revealed_symmetric_axis():
    w = DiracWorld({"A": np.array([1.0, 0.0]), "B": np.array([-1.0, 0.0])}, {"A": 0.5, "B": 0.5}, SCHED)
    np.testing.assert_allclose(w.revealed_posterior(np.array([0.0, 0.5]), np.array([0.0, 0.4]), 20),
                               [0.5, 0.5], atol=1e-15)


def test_revealed_single_candidate(world):
    assert world.revealed_posterior(np.array([0.1, 0.2]), np.array([0.0, 0.3]), 10, ["B"]).tolist() == [1.0]


@pytest.mark.parametrize("t", [1, 25, 50, 75, 100])
def test_revealed_equals_joint_density(world, t):
    rng = np.random.default_rng(t)
    for _ in range(100):
        _, x_prev, x_t = world.sample_pair(t, rng)
        assert np.abs(world.revealed_posterior(x_t, x_prev, t) - world.joint_posterior(x_prev, x_t, t)).max() < 1e-8


def test_revelation_grid_in_random_world():
    assert revelation_error() < 1e-8


def test_posterior_sharpening_with_noise(world):
    rng = np.random.default_rng(0)
    a = world.anchors["A"]
    means = []
    for t in (1, 10, 25, 50, 75, 100):
        vals = []
        for _ in range(1000):
            x_prev = np.sqrt(SCHED.alpha_bar[t - 1]) * a + 0.05 * rng.normal(size=2)
            x_t = np.sqrt(1 - SCHED.beta[t]) * x_prev + np.sqrt(SCHED.beta[t]) * rng.normal(size=2)
            vals.append(world.revealed_posterior(x_t, x_prev, t)[0])
        means.append(np.mean(vals))
    assert all(b <= a + 1e-3 for a, b in zip(means, means[1:])), means
    assert means[0] > 0.99 and means[-1] < 0.5


def test_decomposition_uniform_and_product():
    assert decomposition_check(DiscreteWorld.uniform()) == 0.0
    px, pk = np.array([0.1, 0.2, 0.3, 0.4]), np.array([0.5, 0.25, 0.25])
    joint = np.outer(px, pk)
    np.testing.assert_allclose(joint / joint.sum(axis=1, keepdims=True), np.broadcast_to(pk, joint.shape), atol=1e-15)
    assert decomposition_check(DiscreteWorld(joint)) < 1e-15


def test_decomposition_random_4x3():
    rng = np.random.default_rng(5)
    for _ in range(50):
        assert decomposition_check(DiscreteWorld.random(rng, 4, 3)) < 1e-12


def test_decomposition_rejects_zero_cell():
    j = np.full((2, 2), 0.25)
    j[0, 1] = 0.0
    with pytest.raises(ValueError):
        decomposition_check(DiscreteWorld(j))


def test_decomposition_thousand_worlds():
    assert decomposition_error(1000) < 1e-10


def test_loss_level_decomposition():
    assert loss_decomposition_error() < 1e-10


def test_world_validation():
    with pytest.raises(ValueError):
        DiracWorld({"A": np.zeros(2), "B": np.zeros(2)}, {"A": 0.5, "B": 0.5}, SCHED)
    with pytest.raises(ValueError):
        DiracWorld({"A": np.zeros(2), "B": np.ones(2)}, {"A": 0.6, "B": 0.5}, SCHED)
    with pytest.raises(ValueError):
        DiracWorld({"A": np.zeros(2)}, {"A": 1.0, "B": 0.0}, SCHED)
    with pytest.raises(KeyError):
        DiracWorld({"A": np.zeros(2)}, {"A": 1.0}, SCHED).exact_mean(np.zeros(2), "Z", 3)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 5), st.integers(1, 4))
def test_random_worlds_are_valid(seed, n, dim):
    w = DiracWorld.random(n, dim, SCHED, np.random.default_rng(seed))
    assert abs(sum(w.prior.values()) - 1) <= 1e-12
    assert all(p > 0 for p in w.prior.values())
    p = w.bayes_posterior(np.zeros(dim), 50)
    assert abs(p.sum() - 1) < 1e-12
