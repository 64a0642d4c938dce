import numpy as np
import pytest

from sudelab import engine as E
from sudelab.conditioning import Vocabulary, category, compose, null_condition, subject
from sudelab.denoiser import Denoiser, DenoiserDims
from sudelab.optim import make_optimizer
from sudelab.oracle import DiracWorld
from sudelab.schedule import forward_noise, make_schedule

SCHED = make_schedule()
SMALL = DenoiserDims(d_x=6, d_c=4, d_time=8, hidden=10, n_hidden=2)


@pytest.fixture
def model():
    m = Denoiser(SCHED, SMALL, seed=3)
    rng = np.random.default_rng(3)
    for p in m.params.values():
        p.value = p.value + rng.normal(0, 0.2, p.shape)
    m.snapshot_pretrained()
    return m


def x_batch(n=5, seed=0):
    return np.random.default_rng(seed).normal(size=(n, SMALL.d_x))


def test_shape_preserved(model):
    cond = compose(subject(0), category(1))
    assert model.predict_mean(x_batch(), cond, 10).shape == (5, SMALL.d_x)
    assert model.predict_mean(x_batch()[0], cond, 10).shape == (SMALL.d_x,)


def test_zero_noise_estimate_gives_scaled_input(model, monkeypatch):
    # an x0 head that implies eps == 0 must yield x_t / sqrt(1 - beta_t)
    def x0_no_noise(x_t, cond, t, branch="live"):
        return E.constant(E.as_array(x_t).value / np.sqrt(SCHED.alpha_bar[t]))

    monkeypatch.setattr(model, "predict_x0", x0_no_noise)
    x = x_batch()
    for t in (1, 30, 100):
        np.testing.assert_allclose(model.predict_mean(x, null_condition(), t).value,
                                   x / np.sqrt(1 - SCHED.beta[t]), rtol=1e-12)
        np.testing.assert_allclose(model.predict_eps(x, null_condition(), t).value, 0, atol=1e-12)


def test_eps_and_mean_consistent(model):
    x, t = x_batch(), 42
    cond = compose(None, category(2))
    eps = model.predict_eps(x, cond, t).value
    b, ab = SCHED.beta[t], SCHED.alpha_bar[t]
    expected = (x - b / np.sqrt(1 - ab) * eps) / np.sqrt(1 - b)
    np.testing.assert_allclose(model.predict_mean(x, cond, t).value, expected, atol=1e-12)


@pytest.mark.parametrize("branch", ["frozen", "pretrained_frozen"])
def test_frozen_branch_gradients_zero(model, branch):
    out = model.predict_mean(x_batch(), compose(subject(0), category(0)), 7, branch)
    loss = E.mse(out, E.constant(np.zeros_like(out.value)))
    for g in E.grad(loss, list(model.params.values())):
        assert np.all(g == 0)


def test_live_branch_has_gradient(model):
    out = model.predict_mean(x_batch(), compose(subject(0), category(0)), 7)
    g = E.grad(E.mse(out, E.constant(np.zeros_like(out.value))), [model.params["out.w"]])[0]
    assert np.abs(g).sum() > 0


def test_pretrained_branch_uses_snapshot(model):
    x, cond = x_batch(), compose(None, category(1))
    before = model.predict_mean(x, cond, 20, "pretrained_frozen").value
    model.params["out.b"].value = model.params["out.b"].value + 1.0
    np.testing.assert_array_equal(model.predict_mean(x, cond, 20, "pretrained_frozen").value, before)
    assert not np.array_equal(model.predict_mean(x, cond, 20, "frozen").value, before)


def test_deterministic_and_pure(model):
    x, cond = x_batch(), compose(subject(0), category(3))
    a = model.predict_mean(x, cond, 55).value
    b = model.predict_mean(x, cond, 55).value
    assert a.tobytes() == b.tobytes()


def test_errors(model):
    with pytest.raises(ValueError):
        model.predict_mean(np.zeros((2, 3)), null_condition(), 5)
    with pytest.raises(ValueError):
        model.predict_mean(x_batch(), null_condition(), 0)
    with pytest.raises(ValueError):
        model.predict_mean(x_batch(), null_condition(), SCHED.T + 1)
    with pytest.raises(ValueError):
        model.predict_mean(x_batch(), null_condition(), 5, "sideways")
    with pytest.raises(RuntimeError):
        Denoiser(SCHED, SMALL).predict_mean(x_batch(), null_condition(), 5, "pretrained_frozen")


def test_select_trainable(model):
    emb = model.select_trainable("embedding_only")
    assert len(emb) == 1 and emb[0].size == SMALL.d_c
    assert emb[0] is model.params["subject.0"]
    full = model.select_trainable("full_model")
    names = {n for n, p in model.params.items() if any(p is q for q in full)}
    assert names == {n for n in model.params if not n.startswith("subject.") or n == "subject.0"}
    with pytest.raises(ValueError):
        model.select_trainable("half")


def test_subject_init_near_category(model):
    model.init_subject(0, category(2), np.random.default_rng(0))
    cat_row = model.params["embed"].value[model.vocab.shared_row(category(2))]
    diff = model.params["subject.0"].value - cat_row
    assert 0 < np.abs(diff).max() < 0.05


def test_converges_to_exact_mean_in_dirac_world():
    """Train a small net on a two-anchor world and compare with the closed form."""
    rng = np.random.default_rng(0)
    vocab = Vocabulary(n_categories=2, n_subjects=1, n_attributes=1, n_contexts=1)
    world = DiracWorld({0: np.array([1.0, -0.5]), 1: np.array([-0.8, 0.6])}, {0: 0.5, 1: 0.5}, SCHED)
    m = Denoiser(SCHED, DenoiserDims(d_x=2, d_c=4, d_time=8, hidden=16, n_hidden=2), vocab, seed=0)
    opt = make_optimizer("adam", list(m.params.values()), 1e-2)
    conds = [compose(None, category(c), vocab=vocab) for c in (0, 1)]
    steps = 3000
    for step in range(steps):
        opt.lr = 1e-2 * 0.5 * (1 + np.cos(np.pi * step / steps))
        lab, t = rng.integers(0, 2, 64), rng.integers(1, SCHED.T + 1, 64)
        x0 = np.stack([world.anchors[k] for k in lab])
        x_t = forward_noise(x0, rng.normal(size=x0.shape), t, SCHED)
        pred = m.predict_x0(x_t, [conds[k] for k in lab], t)
        opt.step(E.scale(E.mse(pred, E.constant(x0)), 1 / 64))
    for c in (0, 1):
        for t in range(1, SCHED.T + 1):
            x_t = forward_noise(np.broadcast_to(world.anchors[c], (16, 2)), rng.normal(size=(16, 2)), t, SCHED)
            err = np.abs(m.predict_mean(x_t, conds[c], t).value - world.exact_mean(x_t, c, t)).max()
            assert err < 1e-2, (c, t, err)
