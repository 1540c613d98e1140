"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Desk-scale replications use 5 seeds and report normalized scores (0 = random
policy, 100 = scripted expert on the same evaluation start states).
"""

import time

import numpy as np
import pytest
from conftest import record_criterion

from hipode import augment, data, envs
from hipode import experiments as ex
from hipode.augment import HipodeAugmenter, SyntheticTransitions, filter_lambda
from hipode.config import RunConfig
from hipode.cvae import ConditionalVAE
from hipode.data import Batch
from hipode.dynamics import GaussianDynamics
from hipode.nn import AdamState, Mlp, adam_step, max_relative_error, numerical_gradient
from hipode.policy import TD3BC
from hipode.value import NegativeSamplingValue

pytestmark = pytest.mark.slow

SEEDS = [0, 1, 2, 3, 4]


def study_config() -> RunConfig:
    cfg = RunConfig(dataset_size=5000)
    cfg.set("policy.steps", 10_000)
    cfg.set("policy.eval_episodes", 100)
    cfg.set("policy.eval_seed", 123)
    return cfg


def relative_gain(value, baseline):
    """``value / baseline`` on normalized scores; a non-positive baseline is lifted to stay meaningful."""
    if baseline <= 0:
        baseline = baseline + 0.05 * abs(baseline) if baseline < 0 else 1e-9
        return np.inf if value > baseline else 0.0
    return value / baseline


# -- 1 ---------------------------------------------------------------------------------


def _grad_cases(rng):
    """Yield ``(name, loss_fn, params, analytic)`` for one random small instance of every loss."""
    n = int(rng.integers(2, 6))
    x = rng.normal(size=(n, 3))
    mlp = Mlp.init([3, int(rng.integers(2, 6)), 2], rng, str(rng.choice(["relu", "tanh"])), str(rng.choice(["identity", "tanh"])))
    up = rng.normal(size=(n, 2))
    _, cache = mlp.forward(x, return_cache=True)
    yield "mlp", lambda: float(np.sum(mlp.forward(x) * up)), mlp.parameters(), mlp.backward(cache, up)[0]

    for role in ("state_transition", "inverse_action", "reward"):
        target_dim = 1 if role == "reward" else 2
        cond_dim = 2 if role == "state_transition" else 4
        cv = ConditionalVAE(role=role, hidden_units=4, kl_weight=float(rng.uniform(0.1, 2)), random_state=int(rng.integers(1 << 30)))
        cv.initialize(target_dim, cond_dim)
        t = rng.uniform(-0.9, 0.9, size=(n, target_dim))
        c = rng.normal(size=(n, cond_dim))
        eps = rng.normal(size=(n, cv.latent_dim_))
        _, ge, gd, _ = cv.loss_and_grads(t, c, eps)
        yield f"cvae:{role}", lambda cv=cv, t=t, c=c, eps=eps: cv.loss_and_grads(t, c, eps)[0], cv.encoder_.parameters() + cv.decoder_.parameters(), ge + gd

    v = NegativeSamplingValue(hidden_units=4, discount=float(rng.uniform(0, 1)), penalty_weight=float(rng.uniform(0, 3)), random_state=int(rng.integers(1 << 30)))
    v.initialize(2)
    v.target_.weights[0] += rng.normal(size=v.target_.weights[0].shape) * 0.1
    b = Batch(rng.normal(size=(n, 2)), rng.uniform(-1, 1, (n, 2)), rng.normal(size=n), rng.normal(size=(n, 2)), rng.random(n) < 0.3)
    deltas = rng.normal(size=(n, 2))
    yield "value:td", lambda: v.td_loss(b)[0], v.online_.parameters(), v.td_loss(b)[1]
    yield "value:ns", lambda: v.ns_loss(b, deltas)[0], v.online_.parameters(), v.ns_loss(b, deltas)[1]

    dyn = GaussianDynamics(hidden_units=4, random_state=int(rng.integers(1 << 30))).initialize(2, 2)
    X = rng.normal(size=(n, 4)) * 0.5
    y = X[:, :2] + rng.normal(size=(n, 2)) * 0.3
    yield "dynamics", lambda: dyn.nll_loss(X, y)[0], dyn.net_.parameters(), dyn.nll_loss(X, y)[1]

    agent = TD3BC(hidden_units=4, random_state=int(rng.integers(1 << 30))).initialize(2, 2)
    s, a = rng.normal(size=(n, 2)), rng.uniform(-1, 1, (n, 2))
    targets = rng.normal(size=n)
    _, (g1, g2) = agent.critic_loss(s, a, targets)
    yield "critic", lambda: agent.critic_loss(s, a, targets)[0], agent.critic1_.parameters() + agent.critic2_.parameters(), g1 + g2
    _, ga, lam = agent.actor_loss(s, a)
    yield "actor", lambda: agent.actor_loss(s, a, lam)[0], agent.actor_.parameters(), ga


def test_criterion_01_gradients():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst: dict[str, float] = {}
    counts: dict[str, int] = {}
    for _ in range(100):
        for name, loss, params, analytic in _grad_cases(rng):
            err = max_relative_error(analytic, numerical_gradient(loss, params))
            worst[name] = max(worst.get(name, 0.0), err)
            counts[name] = counts.get(name, 0) + 1
    elapsed = time.perf_counter() - start
    passed = max(worst.values()) < 1e-4 and min(counts.values()) >= 100 and elapsed < 60
    record_criterion(1, passed, f"max rel err {max(worst.values()):.2e} over {len(worst)} losses x {min(counts.values())} instances, {elapsed:.1f}s")
    assert passed, worst


# -- 2 ---------------------------------------------------------------------------------


def test_criterion_02_negative_sampling_exactness():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    spec = envs.make_env()
    d = envs.collect(spec, envs.BehaviorPolicySpec("medium"), 200, seed=3)
    norm = data.Normalizer.from_dataset(d)
    # a fixed set of well-separated states so that distinct targets are learnable
    idx = []
    for i in rng.permutation(d.size):
        if all(np.linalg.norm(norm(d.states[i]) - norm(d.states[j])) > 0.1 for j in idx):
            idx.append(i)
        if len(idx) == 24:
            break
    idx = np.array(idx)
    b = Batch(norm(d.states[idx]), d.actions[idx], d.rewards[idx], norm(d.next_states[idx]), d.dones[idx])
    model = NegativeSamplingValue(hidden_units=256, penalty_weight=1.0, penalty_scope=1.0, random_state=0).initialize(2)
    model.target_ = Mlp.init([2, 16, 1], rng)  # frozen, arbitrary
    deltas = model.draw_perturbations(b, rng)
    opt = AdamState.for_model(model.online_, 1e-3)
    for _ in range(40_000):
        _, grads, _ = model.loss_and_grads(b, deltas)
        adam_step(model.online_, grads, opt)
    target = b.rewards + 0.99 * (1 - b.dones) * model.target_.forward(b.next_states)[:, 0] - np.linalg.norm(deltas, axis=1)
    err = float(np.max(np.abs(model.predict(b.states + deltas) - target)))
    elapsed = time.perf_counter() - start
    passed = err < 0.05 and elapsed < 60
    record_criterion(2, passed, f"max |V(s+d) - target| = {err:.4f} (tol 0.05), {elapsed:.1f}s")
    assert passed


# -- 3 ---------------------------------------------------------------------------------


def _pool(distances):
    n = len(distances)
    z = np.zeros(n)
    return SyntheticTransitions(
        np.zeros((n, 1)), np.zeros((n, 1)), z, np.zeros((n, 1)), np.zeros(n, bool),
        np.arange(n), np.zeros(n, np.int64), np.asarray(distances, float), z, z, z,
    )


def test_criterion_03_filter_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    mismatches = 0
    for trial in range(1000):
        size = int(rng.integers(1, 501))
        rate = [0.1, 0.2, 0.5, 1.0][trial % 4]
        dist = rng.random(size)
        if trial % 2:
            dist = np.round(dist, 1)  # heavy ties
        k = max(1, int(np.floor(rate * size + 1e-9)))
        full = sorted(range(size), key=lambda i: (dist[i], i))
        expected = sorted(full[:k])
        got = filter_lambda(_pool(dist), rate).source_state_index.tolist()
        mismatches += got != expected
    elapsed = time.perf_counter() - start
    passed = mismatches == 0
    record_criterion(3, passed, f"{1000 - mismatches}/1000 pools match the brute-force sort, {elapsed:.1f}s")
    assert passed


# -- 4 ---------------------------------------------------------------------------------


def test_criterion_04_pessimism():
    start = time.perf_counter()
    cfg = study_config()
    table = ex.pessimism_study(cfg, ["random", "medium", "expert"], SEEDS)
    gaps = [c["v_data"] - c["v_2sigma"] for cells in table.values() for c in cells]
    elapsed = time.perf_counter() - start
    passed = min(gaps) > 0 and len(gaps) == 15 and elapsed < 300
    record_criterion(4, passed, f"mean V(s_d) - mean V(s_d + 2 sigma) min over 15 cells = {min(gaps):.3f}, {elapsed:.0f}s")
    assert passed


# -- 5 ---------------------------------------------------------------------------------


def test_criterion_05_quality_vs_diversity():
    start = time.perf_counter()
    cfg = study_config()
    conditions = ["quality", "noise:0.01", "noise:0.1", "noise:1.0"]
    table = ex.comparison_table(cfg, ["medium"], conditions, SEEDS)["medium"]
    means = {c: float(np.mean(v)) for c, v in table.items()}
    elapsed = time.perf_counter() - start
    passed = all(means["quality"] >= means[c] for c in conditions[1:]) and elapsed < 900
    detail = ", ".join(f"{c} {m:.2f}" for c, m in means.items())
    record_criterion(5, passed, f"normalized means: {detail}; {elapsed:.0f}s")
    assert passed


# -- 6 and 7 share runs ------------------------------------------------------------------


@pytest.fixture(scope="module")
def ablation_runs():
    start = time.perf_counter()
    cfg = study_config()
    random_cells = ex.comparison_table(cfg, ["random"], ["none", "hipode", "nov"], SEEDS)["random"]
    medium_cells = ex.comparison_table(cfg, ["medium"], ["none", "hipode"], SEEDS)["medium"]
    return {"random": random_cells, "medium": medium_cells}, time.perf_counter() - start


def test_criterion_06_non_degradation_and_gain(ablation_runs):
    runs, elapsed = ablation_runs
    m = {k: {c: float(np.mean(v)) for c, v in cells.items()} for k, cells in runs.items()}
    medium_ratio = relative_gain(m["medium"]["hipode"], m["medium"]["none"])
    random_ratio = relative_gain(m["random"]["hipode"], m["random"]["none"])
    passed = medium_ratio >= 0.95 and random_ratio >= 1.05 and elapsed < 1200
    record_criterion(
        6,
        passed,
        f"medium {m['medium']['hipode']:.2f} vs {m['medium']['none']:.2f} (x{medium_ratio:.3f}), "
        f"random {m['random']['hipode']:.2f} vs {m['random']['none']:.2f} (x{random_ratio:.3f}); {elapsed:.0f}s incl. NoV",
    )
    assert passed


def test_criterion_07_nov_ablation(ablation_runs):
    runs, _ = ablation_runs
    hipode, nov = float(np.mean(runs["random"]["hipode"])), float(np.mean(runs["random"]["nov"]))
    passed = hipode >= nov
    record_criterion(7, passed, f"random data: HIPODE {hipode:.2f} vs NoV {nov:.2f} (normalized, 5 seeds)")
    assert passed


# -- 8 ---------------------------------------------------------------------------------


def test_criterion_08_density_shift():
    start = time.perf_counter()
    rows = ex.density_study(study_config(), SEEDS, "medium_replay")
    margins = [r["synthetic_mean"] - r["real_mean"] for r in rows]
    elapsed = time.perf_counter() - start
    passed = min(margins) > 0 and elapsed < 300
    record_criterion(8, passed, f"synthetic minus real mean r + V*(s') per seed: {', '.join(f'{x:.3f}' for x in margins)}; {elapsed:.0f}s")
    assert passed


# -- 9 ---------------------------------------------------------------------------------


def test_criterion_09_structural_invariants():
    spec = envs.make_env()
    d = envs.collect(spec, envs.BehaviorPolicySpec("medium"), 10_000, seed=9)
    models = augment.train_models(d, 9, cvae_hidden=256, cvae_epochs=10, hidden_units=64, value_steps=500, dynamics_steps=500)
    failures = []

    aug = HipodeAugmenter(synthetic_rate=0.5, random_state=9).fit(d, models=models)
    syn = aug.generate(augment.synthetic_count(0.5, d.size), random_state=1, keep_candidates=True)
    merged = augment.merge(d, syn)
    if len(syn) != 5000 or merged.size != 15_000:
        failures.append(f"offline count {len(syn)}")
    if syn.dones.any() or merged.dones[d.size :].any():
        failures.append("synthetic done flag set")
    if np.any(np.abs(syn.actions) > 1.0):
        failures.append("action out of bounds")
    rows = np.arange(len(syn))
    if not np.array_equal(syn.next_states, syn.candidates[rows, syn.candidate_rank]):
        failures.append("selected state not among candidates")

    real_pairs = {(tuple(s), tuple(s2)) for s, s2 in zip(d.states, d.next_states)}
    for eta in (0.1, 0.2, 0.5):
        aug.set_params(synthetic_rate=eta)
        for size in (1, 7, 100, 256):
            batch = aug.realtime_batch(size, random_state=size)
            m = int(np.floor(eta * size + 0.5))
            member = np.array([(tuple(s), tuple(s2)) in real_pairs for s, s2 in zip(batch.states, batch.next_states)])
            if len(batch) != size or not member[: size - m].all() or member[size - m :].any():
                failures.append(f"realtime eta={eta} N={size}")
            if batch.dones[size - m :].any() or np.any(np.abs(batch.actions) > 1.0):
                failures.append(f"realtime invariants eta={eta} N={size}")
    passed = not failures
    record_criterion(9, passed, "offline 5000/10000 and realtime batches checked" + ("" if passed else f": {failures}"))
    assert passed


# -- 10 --------------------------------------------------------------------------------


def test_criterion_10_determinism(tmp_path):
    cfg = RunConfig(dataset_size=2000, seeds=[3])
    for key, value in {
        "models.cvae_epochs": 5,
        "models.cvae_hidden": 128,
        "models.value_steps": 300,
        "models.dynamics_steps": 300,
        "policy.steps": 500,
        "policy.eval_episodes": 20,
    }.items():
        cfg.set(key, value)
    reports = []
    for name in ("a", "b"):
        cfg.output_dir = str(tmp_path / name)
        reports.append(ex.pipeline(cfg, argv=["hipode", "run"]))
    same_file = (tmp_path / "a/seed_3/augmented.dat").read_bytes() == (tmp_path / "b/seed_3/augmented.dat").read_bytes()
    same_returns = reports[0]["seeds"]["3"]["evaluation"]["returns"] == reports[1]["seeds"]["3"]["evaluation"]["returns"]
    passed = same_file and same_returns
    record_criterion(10, passed, f"synthetic file byte-identical: {same_file}; evaluation returns identical: {same_returns}")
    assert passed
