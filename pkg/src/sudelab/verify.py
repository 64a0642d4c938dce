"""Self-checks runnable from the command line: math identities, gradient
contract and sampler convergence, each against an independent reference."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import engine as E
from .conditioning import Vocabulary, category, compose, null_condition, subject
from .denoiser import Denoiser, DenoiserDims
from .losses import cir_loss, gate_of, sub_loss, sude_raw, threshold_tau, total_loss
from .oracle import DiracWorld, DiscreteWorld, decomposition_check
from .sampler import sample
from .schedule import forward_noise, make_schedule, posterior_mean

SUITES = ("math", "gradients", "sampler")


@dataclass
class CheckResult:
    suite: str
    name: str
    value: float
    threshold: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        limit = f"< {self.threshold:.0e}" if self.threshold else "== 0"
        return f"{status}  {self.suite:<9} {self.name:<34} {self.value:.3e}  ({limit})"


def _below(suite, name, value, threshold) -> CheckResult:
    return CheckResult(suite, name, float(value), threshold, bool(value < threshold))


def _zero(suite, name, value) -> CheckResult:
    return CheckResult(suite, name, float(value), 0.0, value == 0)


# -- math ------------------------------------------------------------------

def decomposition_error(n_worlds: int = 1000, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    err = 0.0
    for _ in range(n_worlds):
        shape = rng.integers(2, 7, size=2)
        err = max(err, decomposition_check(DiscreteWorld.random(rng, int(shape[0]), int(shape[1]))))
    return err


def revelation_error(draws: int = 100, seed: int = 0, n: int = 4, dim: int = 3, T: int = 100) -> float:
    """max |revealed - joint-density posterior| over the t-grid {1, T/4, T/2, 3T/4, T}."""
    sched = make_schedule(T)
    rng = np.random.default_rng(seed)
    world = DiracWorld.random(n, dim, sched, rng)
    err = 0.0
    for t in (1, T // 4, T // 2, 3 * T // 4, T):
        for _ in range(draws):
            _, x_prev, x_t = world.sample_pair(t, rng)
            err = max(err, float(np.max(np.abs(world.revealed_posterior(x_t, x_prev, t)
                                               - world.joint_posterior(x_prev, x_t, t)))))
    return err


def loss_decomposition_error(draws: int = 200, seed: int = 1) -> float:
    sched = make_schedule()
    rng = np.random.default_rng(seed)
    world = DiracWorld.random(3, 2, sched, rng)
    labels = world.labels
    err = 0.0
    for _ in range(draws):
        t = int(rng.integers(2, sched.T + 1))
        w = rng.dirichlet(np.ones(len(labels)))
        label = labels[rng.choice(len(labels), p=w)]
        _, x_prev, x_t = world.sample_pair(t, rng, label)
        err = max(err, world.decomposition_residual(x_t, x_prev, t, dict(zip(labels, w)), labels[0]))
    return err


def boundary_error(n: int = 10_000, dim: int = 8, seed: int = 2) -> tuple[float, int]:
    """(max |sude_raw(c, c, u) - tau|, number of triples with gate 1)."""
    rng = np.random.default_rng(seed)
    c = rng.normal(0, 3, (n, dim))
    u = rng.normal(0, 3, (n, dim))
    sigma = rng.uniform(1e-3, 2.0, n)
    raw = sude_raw(E.constant(c), E.constant(c), E.constant(u), sigma)
    tau = threshold_tau(E.constant(c), E.constant(u), sigma)
    return float(np.max(np.abs(raw.value - tau.value))), int(gate_of(raw, tau).sum())


def math_suite() -> list[CheckResult]:
    b_err, b_open = boundary_error()
    return [
        _below("math", "discrete decomposition", decomposition_error(), 1e-10),
        _below("math", "revealed vs joint posterior", revelation_error(), 1e-8),
        _below("math", "loss-level decomposition", loss_decomposition_error(), 1e-10),
        _below("math", "boundary identity", b_err, 1e-12),
        _zero("math", "gate open at boundary (count)", b_open),
    ]


# -- gradients ---------------------------------------------------------------

def toy_denoiser(seed: int = 0) -> Denoiser:
    dims = DenoiserDims(d_x=4, d_c=3, d_time=4, hidden=6, n_hidden=2)
    model = Denoiser(make_schedule(20), dims, Vocabulary(), seed=seed)
    rng = np.random.default_rng(seed + 1)
    for p in model.params.values():
        p.value = p.value + rng.normal(0, 0.3, p.shape)  # move off the init's zeros
    model.snapshot_pretrained()
    for p in model.params.values():
        p.value = p.value + rng.normal(0, 0.05, p.shape)
    return model


def toy_objective(model: Denoiser, seed: int = 0, w_s: float = 0.4, w_r: float = 0.7,
                  truncation: bool = False, frozen_as_constants: bool = False) -> Callable[[], E.Array]:
    """Full weighted objective on a fixed batch; optionally with the frozen
    predictions swapped for plain constants of the same value."""
    rng = np.random.default_rng(seed)
    sched = model.schedule
    t = np.array([2, 4, 7, 9, 12, 15, 17, 20])
    x0 = rng.normal(0, 1, (len(t), model.dims.d_x))
    x_t = forward_noise(x0, rng.normal(0, 1, x0.shape), t, sched)
    target = posterior_mean(x0, x_t, t, sched)
    c_sub = compose(subject(0), category(1))
    c_cate = compose(None, category(1))

    def frozen(cond, branch):
        out = model.predict_mean(x_t, cond, t, branch)
        return E.constant(out.value.copy()) if frozen_as_constants else out

    def loss() -> E.Array:
        s = model.predict_mean(x_t, c_sub, t, "live")
        c = frozen(c_cate, "frozen")
        u = frozen(null_condition(), "frozen")
        pr = frozen(c_cate, "pretrained_frozen")
        live_c = model.predict_mean(x_t, c_cate, t, "live")
        sigma = sched.sigma[t]
        return total_loss(sub_loss(s, E.constant(target)), sude_raw(s, c, u, sigma),
                          threshold_tau(c, u, sigma), cir_loss(pr, live_c),
                          w_s=w_s, w_r=w_r, truncation=truncation).loss

    return loss


def objective_grad_error(seed: int = 0, truncation: bool = False) -> float:
    model = toy_denoiser(seed)
    loss = toy_objective(model, seed, truncation=truncation)
    worst = 0.0
    for name, p in model.params.items():
        if name.startswith("subject.") and name != "subject.0":
            continue

        def f(x, name=name):
            old = model.params[name]
            model.params[name] = x
            try:
                return loss()
            finally:
                model.params[name] = old

        report = E.finite_diff_check(f, p.value, step=1e-6)
        worst = max(worst, report.max_rel_error)
    return worst


def frozen_branch_leak(seed: int = 0) -> float:
    """max |grad(tagged frozen branches) - grad(constants)| over all weights."""
    model = toy_denoiser(seed)
    params = list(model.params.values())
    g_tag = E.grad(toy_objective(model, seed)(), params)
    g_const = E.grad(toy_objective(model, seed, frozen_as_constants=True)(), params)
    return max(float(np.max(np.abs(a - b))) for a, b in zip(g_tag, g_const))


def frozen_only_grad(seed: int = 0) -> float:
    model = toy_denoiser(seed)
    x = np.random.default_rng(seed).normal(0, 1, (2, model.dims.d_x))
    out = model.predict_mean(x, compose(None, category(0)), 5, "frozen")
    pr = model.predict_mean(x, compose(None, category(0)), 5, "pretrained_frozen")
    grads = E.grad(E.sum(E.sum(out + pr)), list(model.params.values()))
    return max(float(np.max(np.abs(g))) for g in grads)


def ordering_violations(n: int = 10_000, seed: int = 3, weights=(0.1, 0.4, 1.5, 2.0)) -> int:
    rng = np.random.default_rng(seed)
    bad = 0
    c = E.constant(rng.normal(0, 1, (n, 6)))
    u = E.constant(rng.normal(0, 1, (n, 6)))
    sigma = rng.uniform(0.01, 1.0, n)
    ra = sude_raw(E.constant(rng.normal(0, 1, (n, 6))), c, u, sigma).value
    rb = sude_raw(E.constant(rng.normal(0, 1, (n, 6))), c, u, sigma).value
    for w in weights:
        bad += int(np.sum(np.sign(w * ra - w * rb) != np.sign(ra - rb)))
    return bad


def gradients_suite() -> list[CheckResult]:
    return [
        _below("gradients", "objective vs finite differences", objective_grad_error(), 1e-4),
        _below("gradients", "gated objective vs finite diffs", objective_grad_error(seed=1, truncation=True), 1e-4),
        _zero("gradients", "frozen branches vs constants", frozen_branch_leak()),
        _zero("gradients", "frozen-only loss gradient", frozen_only_grad()),
        _zero("gradients", "w_s ordering violations", ordering_violations()),
    ]


# -- sampler -------------------------------------------------------------------

def dirac_convergence(seed: int = 0, count: int = 4) -> float:
    """Largest distance between exact-denoiser samples and their anchor."""
    sched = make_schedule()
    world = DiracWorld.random(3, 5, sched, np.random.default_rng(seed))
    err = 0.0
    for label in world.labels:
        for method, steps in (("ddpm", sched.T), ("ddim", 50), ("ddim", 10)):
            for x in sample(world, label, method, steps, seed=seed, count=count, dim=world.dim):
                err = max(err, float(np.max(np.abs(x - world.anchors[label]))))
    return err


def sampler_suite() -> list[CheckResult]:
    return [_below("sampler", "DiracWorld convergence", dirac_convergence(), 1e-3)]


def run(suite: str = "all") -> list[CheckResult]:
    if suite not in SUITES + ("all",):
        raise ValueError(f"unknown suite {suite!r}; expected one of {SUITES + ('all',)}")
    chosen = SUITES if suite == "all" else (suite,)
    table = {"math": math_suite, "gradients": gradients_suite, "sampler": sampler_suite}
    return [r for name in chosen for r in table[name]()]
