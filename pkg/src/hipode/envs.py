"""Desk-scale continuous-control environments, scripted behavior policies and
ground-truth optimal values.

``pointmass2d`` moves a point in the box [-1, 1]^2 by ``action_scale * a`` per
step and pays ``-||s' - goal||``. ``chain1d`` is the same thing on a line and
exists mainly to cross-check the closed-form optimal value against value
iteration.
"""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass

import numpy as np

from .data import TransitionDataset, as_generator

logger = logging.getLogger(__name__)

DEFAULT_DISCOUNT = 0.99
MEDIUM_NOISE = 0.3
# Medium-grade agents move toward the goal at half the expert speed.
MEDIUM_GAIN = 0.5
POLICY_KINDS = ("random", "medium", "expert", "noisy", "medium_replay")


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    horizon: int
    goal: tuple[float, ...]
    action_scale: float
    low: float = -1.0
    high: float = 1.0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.action_scale <= 0:
            raise ValueError("action_scale must be positive")
        if len(self.goal) != self.state_dim:
            raise ValueError("goal dimension does not match state_dim")

    @property
    def goal_array(self) -> np.ndarray:
        return np.asarray(self.goal, dtype=np.float64)


def make_env(name: str = "pointmass2d", **overrides) -> EnvSpec:
    if name == "pointmass2d":
        params = dict(state_dim=2, action_dim=2, horizon=50, goal=(0.8, 0.8), action_scale=0.1)
    elif name == "chain1d":
        params = dict(state_dim=1, action_dim=1, horizon=50, goal=(0.8,), action_scale=0.2)
    else:
        raise ValueError(f"unknown environment {name!r}")
    params.update(overrides)
    params["goal"] = tuple(float(g) for g in params["goal"])
    return EnvSpec(name=name, **params)


@dataclass(frozen=True)
class BehaviorPolicySpec:
    kind: str = "expert"
    noise_scale: float = 0.0

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown behavior policy kind {self.kind!r}")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")
        if self.kind != "noisy" and self.noise_scale != 0.0:
            raise ValueError("noise_scale is only meaningful for kind='noisy'")

    @classmethod
    def parse(cls, text: str) -> "BehaviorPolicySpec":
        """Accepts ``random``, ``medium``, ``expert``, ``medium_replay`` or ``noisy:<sigma>``."""
        kind, _, arg = text.partition(":")
        return cls(kind, float(arg)) if kind == "noisy" else cls(kind)


# -- dynamics -------------------------------------------------------------------


def step(spec: EnvSpec, s, a, t: int | np.ndarray = 1):
    """One transition; ``t`` is the 1-based index of this step within its episode.

    Works on a single state or a batch of states. Returns ``(s', r, done)``.
    """
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    clipped = np.clip(a, -1.0, 1.0)
    if np.any(clipped != a):
        logger.warning("action outside [-1, 1] clipped (max |a| = %.4g)", float(np.max(np.abs(a))))
    s_next = np.clip(s + spec.action_scale * clipped, spec.low, spec.high)
    r = -np.linalg.norm(s_next - spec.goal_array, axis=-1)
    done = np.asarray(t) >= spec.horizon
    if s.ndim == 1:
        return s_next, float(r), bool(done)
    return s_next, r, np.broadcast_to(done, r.shape).copy()


def expert_action(spec: EnvSpec, s):
    """Greedy controller: moves each coordinate straight toward the goal at full speed.

    The reachable set after k steps is a box, and this controller lands on the
    point of that box nearest the goal at every k, so it is optimal for any
    reward that decreases with goal distance.
    """
    s = np.asarray(s, dtype=np.float64)
    return np.clip((spec.goal_array - s) / spec.action_scale, -1.0, 1.0)


def sample_start_states(spec: EnvSpec, n: int, rng) -> np.ndarray:
    return rng.uniform(spec.low, spec.high, size=(n, spec.state_dim))


def _episode_actions(spec, policy, s, rng, progress):
    if policy.kind == "random":
        return rng.uniform(-1.0, 1.0, size=s.shape[:-1] + (spec.action_dim,))
    expert = expert_action(spec, s)
    if policy.kind == "expert":
        return expert
    if policy.kind == "medium":
        sigma = MEDIUM_NOISE
        base = MEDIUM_GAIN * expert
    elif policy.kind == "noisy":
        sigma = policy.noise_scale
        base = expert
    else:
        # medium_replay: early episodes are near-random, late ones medium quality.
        sigma = (1.0 + (MEDIUM_NOISE - 1.0) * progress)[:, None]
        base = (MEDIUM_GAIN * progress)[:, None] * expert
    return np.clip(base + sigma * rng.normal(size=expert.shape), -1.0, 1.0)


def collect(spec: EnvSpec, policy: BehaviorPolicySpec, n_transitions: int, seed) -> TransitionDataset:
    """Roll seeded episodes of the behavior policy until ``n_transitions`` are stored.

    Episodes run in lockstep and are stored episode-major; the final episode
    is cut short if ``n_transitions`` is not a multiple of the horizon.
    """
    if n_transitions < spec.horizon:
        raise ValueError("n_transitions must be at least one horizon")
    rng = as_generator(seed)
    n_episodes = math.ceil(n_transitions / spec.horizon)
    progress = np.linspace(0.0, 1.0, n_episodes) if n_episodes > 1 else np.ones(1)
    s = sample_start_states(spec, n_episodes, rng)
    shape = (n_episodes, spec.horizon)
    states = np.empty(shape + (spec.state_dim,))
    actions = np.empty(shape + (spec.action_dim,))
    rewards = np.empty(shape)
    next_states = np.empty(shape + (spec.state_dim,))
    dones = np.empty(shape, dtype=bool)
    for t in range(spec.horizon):
        a = _episode_actions(spec, policy, s, rng, progress)
        s_next, r, d = step(spec, s, a, t + 1)
        states[:, t], actions[:, t], rewards[:, t], next_states[:, t], dones[:, t] = s, a, r, s_next, d
        s = s_next
    flat = lambda x: x.reshape((n_episodes * spec.horizon,) + x.shape[2:])[:n_transitions]  # noqa: E731
    tag = policy.kind if policy.kind != "noisy" else f"noisy:{policy.noise_scale:g}"
    return TransitionDataset(
        flat(states),
        flat(actions),
        flat(rewards),
        flat(next_states),
        flat(dones),
        source_tag=tag,
        metadata={"env": spec.name, "policy": tag, "seed": seed if isinstance(seed, int) else None},
    )


def episode_returns(dataset: TransitionDataset, horizon: int) -> np.ndarray:
    """Undiscounted return per stored episode (episode-major layout from :func:`collect`)."""
    n_full = dataset.size // horizon
    return dataset.rewards[: n_full * horizon].reshape(n_full, horizon).sum(axis=1)


def rollout(spec: EnvSpec, policy_fn, episodes: int, seed, start_states=None) -> np.ndarray:
    """Run ``episodes`` full-horizon episodes of ``policy_fn`` (batch of states -> actions)."""
    rng = as_generator(seed)
    s = sample_start_states(spec, episodes, rng) if start_states is None else np.array(start_states, dtype=float)
    returns = np.zeros(len(s))
    for t in range(spec.horizon):
        a = np.clip(np.asarray(policy_fn(s), dtype=np.float64), -1.0, 1.0)
        s, r, _ = step(spec, s, a, t + 1)
        returns += r
    return returns


# -- oracle values ----------------------------------------------------------------


def _check_in_bounds(spec, s):
    if np.any(s < spec.low - 1e-12) or np.any(s > spec.high + 1e-12):
        raise ValueError("oracle_value is only defined for states inside the environment bounds")


def closed_form_value(spec: EnvSpec, s, discount: float = DEFAULT_DISCOUNT):
    """Discounted return of the greedy controller, summed exactly until it reaches the goal."""
    s = np.asarray(s, dtype=np.float64)
    gap = np.abs(spec.goal_array - s)
    n_steps = int(np.ceil(np.max(gap) / spec.action_scale + 1e-12)) if gap.size else 0
    value = np.zeros(s.shape[:-1])
    for k in range(1, n_steps + 1):
        remaining = np.maximum(gap - k * spec.action_scale, 0.0)
        value -= discount ** (k - 1) * np.linalg.norm(remaining, axis=-1)
    return value if s.ndim > 1 else float(value)


def value_iteration(spec: EnvSpec, discount: float = DEFAULT_DISCOUNT, refine: int = 20, tol: float = 1e-12, max_iter=100_000):
    """Tabular value iteration for ``chain1d`` on a grid of spacing ``action_scale / refine``.

    Actions move an integer number of cells in ``[-refine, refine]``, which
    is exact for the continuous problem at grid points. Returns
    ``(grid, values, bellman_residual)``.
    """
    if spec.state_dim != 1:
        raise ValueError("value_iteration supports one-dimensional environments only")
    spacing = spec.action_scale / refine
    n_cells = int(round((spec.high - spec.low) / spacing)) + 1
    grid = spec.low + spacing * np.arange(n_cells)
    moves = np.arange(-refine, refine + 1)
    nxt = np.clip(np.arange(n_cells)[:, None] + moves[None, :], 0, n_cells - 1)
    reward = -np.abs(grid[nxt] - spec.goal[0])
    values = np.zeros(n_cells)
    for _ in range(max_iter):
        new = np.max(reward + discount * values[nxt], axis=1)
        delta = np.max(np.abs(new - values))
        values = new
        if delta < tol:
            break
    residual = float(np.max(np.abs(np.max(reward + discount * values[nxt], axis=1) - values)))
    return grid, values, residual


@functools.lru_cache(maxsize=16)
def _chain_table(spec: EnvSpec, discount: float, refine: int):
    grid, values, _ = value_iteration(spec, discount, refine)
    return grid, values


def oracle_value(spec: EnvSpec, s, discount: float = DEFAULT_DISCOUNT):
    """Optimal discounted value V*(s).

    Closed form for ``pointmass2d``; grid value iteration with linear
    interpolation for ``chain1d``.
    """
    s = np.asarray(s, dtype=np.float64)
    _check_in_bounds(spec, s)
    if spec.name == "chain1d":
        grid, values = _chain_table(spec, float(discount), 20)
        out = np.interp(s[..., 0], grid, values)
        return out if s.ndim > 1 else float(out)
    return closed_form_value(spec, s, discount)


def transition_quality(spec: EnvSpec, rewards, next_states, discount: float = DEFAULT_DISCOUNT):
    """``r + V*(s')``, the per-transition score used in density comparisons."""
    return np.asarray(rewards, dtype=np.float64) + oracle_value(spec, np.atleast_2d(next_states), discount)
