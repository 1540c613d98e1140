"""TD3+BC: the downstream offline learner used to measure augmentation effects."""

from __future__ import annotations

from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import envs as envs_mod
from .data import Batch, Normalizer, TransitionDataset, as_generator, sample_batch
from .nn import AdamState, Mlp, NonFiniteError, adam_step, load_checkpoint, save_checkpoint

BatchSource = Callable[[int, np.random.Generator], Batch]


class TD3BC(BaseEstimator):
    """Deterministic actor with twin critics and a behavior-cloning actor penalty.

    Critics regress on ``r + gamma (1 - done) min(Q1', Q2')(s', pi'(s') + clipped noise)``.
    Every ``policy_delay`` steps the actor minimizes
    ``-lambda * mean Q1(s, pi(s)) + mean ||pi(s) - a||^2`` with
    ``lambda = bc_weight / mean|Q1(s, pi(s))|`` held constant, and all target
    networks take a soft step.
    """

    def __init__(
        self,
        hidden_units=256,
        discount=0.99,
        tau=0.005,
        policy_noise=0.2,
        noise_clip=0.5,
        policy_delay=2,
        bc_weight=2.5,
        n_steps=50_000,
        batch_size=256,
        learning_rate=1e-3,
        normalize_states=True,
        log_every=1000,
        random_state=0,
    ):
        self.hidden_units = hidden_units
        self.discount = discount
        self.tau = tau
        self.policy_noise = policy_noise
        self.noise_clip = noise_clip
        self.policy_delay = policy_delay
        self.bc_weight = bc_weight
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.normalize_states = normalize_states
        self.log_every = log_every
        self.random_state = random_state

    def initialize(self, state_dim, action_dim, rng=None, normalizer=None):
        rng = as_generator(self.random_state if rng is None else rng)
        h = self.hidden_units
        self.state_dim_, self.action_dim_ = int(state_dim), int(action_dim)
        self.actor_ = Mlp.init([state_dim, h, action_dim], rng, output_activation="tanh")
        self.critic1_ = Mlp.init([state_dim + action_dim, h, 1], rng)
        self.critic2_ = Mlp.init([state_dim + action_dim, h, 1], rng)
        self.actor_target_ = self.actor_.copy()
        self.critic1_target_ = self.critic1_.copy()
        self.critic2_target_ = self.critic2_.copy()
        if normalizer is None:
            normalizer = Normalizer(np.zeros(state_dim), np.ones(state_dim))
        self.normalizer_ = normalizer
        return self

    # -- losses -------------------------------------------------------------------

    def critic_targets(self, s2, rewards, dones, noise):
        """Bootstrapped targets; ``noise`` is the raw N(0, 1) draw before scaling and clipping."""
        smoothing = np.clip(self.policy_noise * noise, -self.noise_clip, self.noise_clip)
        a2 = np.clip(self.actor_target_.forward(s2) + smoothing, -1.0, 1.0)
        sa2 = np.hstack([s2, a2])
        q1 = self.critic1_target_.forward(sa2)[:, 0]
        q2 = self.critic2_target_.forward(sa2)[:, 0]
        return rewards + self.discount * (1.0 - dones) * np.minimum(q1, q2)

    def critic_loss(self, s, a, targets):
        """Summed twin-critic MSE and gradients ``(grads_q1, grads_q2)``."""
        sa = np.hstack([s, a])
        n = len(s)
        loss = 0.0
        grads = []
        for critic in (self.critic1_, self.critic2_):
            q, cache = critic.forward(sa, return_cache=True)
            err = q[:, 0] - targets
            loss += float(np.mean(err**2))
            g, _ = critic.backward(cache, (2.0 * err / n)[:, None])
            grads.append(g)
        if not np.isfinite(loss):
            raise NonFiniteError("critic loss is not finite")
        return loss, grads

    def actor_loss(self, s, a, lmbda=None):
        """Actor objective and gradients; ``lmbda`` defaults to ``bc_weight / mean|Q|`` of this batch."""
        n = len(s)
        pi, actor_cache = self.actor_.forward(s, return_cache=True)
        q, critic_cache = self.critic1_.forward(np.hstack([s, pi]), return_cache=True)
        q = q[:, 0]
        if lmbda is None:
            lmbda = self.bc_weight / max(float(np.mean(np.abs(q))), 1e-8)
        diff = pi - a
        loss = float(-lmbda * q.mean() + np.mean(np.sum(diff**2, axis=1)))
        if not np.isfinite(loss):
            raise NonFiniteError("actor loss is not finite")
        _, d_input = self.critic1_.backward(critic_cache, np.full((n, 1), -lmbda / n))
        d_pi = d_input[:, self.state_dim_ :] + 2.0 * diff / n
        grads, _ = self.actor_.backward(actor_cache, d_pi)
        return loss, grads, lmbda

    # -- training -------------------------------------------------------------------

    def fit(self, X: TransitionDataset, y=None, batch_source: BatchSource | None = None):
        """Train on ``X`` with uniform batches, or on batches from ``batch_source(batch_size, rng)``.

        ``X`` always supplies dimensions and state statistics.
        """
        rng = as_generator(self.random_state)
        norm = Normalizer.from_dataset(X) if self.normalize_states else None
        self.initialize(X.state_dim, X.action_dim, rng, norm)
        opts = [AdamState.for_model(m, self.learning_rate) for m in (self.critic1_, self.critic2_, self.actor_)]
        if batch_source is None:
            batch_source = lambda size, g: sample_batch(X, size, g)  # noqa: E731
        curve = []
        critic_acc, actor_acc, lam_acc, n_actor = 0.0, 0.0, 0.0, 0
        for step in range(1, self.n_steps + 1):
            batch = batch_source(self.batch_size, rng)
            if batch.states.shape[1] != self.state_dim_ or batch.actions.shape[1] != self.action_dim_:
                raise ValueError("batch dimensions do not match the training dataset")
            s = self.normalizer_(batch.states)
            s2 = self.normalizer_(batch.next_states)
            noise = rng.standard_normal(batch.actions.shape)
            try:
                targets = self.critic_targets(s2, batch.rewards, batch.dones.astype(np.float64), noise)
                c_loss, (g1, g2) = self.critic_loss(s, batch.actions, targets)
                adam_step(self.critic1_, g1, opts[0])
                adam_step(self.critic2_, g2, opts[1])
                critic_acc += c_loss
                if step % self.policy_delay == 0:
                    a_loss, g_actor, lam = self.actor_loss(s, batch.actions)
                    adam_step(self.actor_, g_actor, opts[2])
                    self.actor_target_.soft_update_(self.actor_, self.tau)
                    self.critic1_target_.soft_update_(self.critic1_, self.tau)
                    self.critic2_target_.soft_update_(self.critic2_, self.tau)
                    actor_acc += a_loss
                    lam_acc += lam
                    n_actor += 1
            except NonFiniteError as exc:
                raise NonFiniteError(f"TD3BC diverged at step {step}: {exc}") from None
            if self.log_every and step % self.log_every == 0:
                curve.append(
                    {
                        "step": step,
                        "critic_loss": critic_acc / self.log_every,
                        "actor_loss": actor_acc / max(n_actor, 1),
                        "lambda": lam_acc / max(n_actor, 1),
                    }
                )
                critic_acc, actor_acc, lam_acc, n_actor = 0.0, 0.0, 0.0, 0
        self.learning_curve_ = curve
        return self

    # -- inference --------------------------------------------------------------------

    def predict(self, X):
        check_is_fitted(self, "actor_")
        X = np.asarray(X, dtype=np.float64)
        out = self.actor_.forward(self.normalizer_(np.atleast_2d(X)))
        return out if X.ndim > 1 else out[0]

    def save(self, path):
        check_is_fitted(self, "actor_")
        nets = {
            "actor": self.actor_,
            "critic1": self.critic1_,
            "critic2": self.critic2_,
            "actor_target": self.actor_target_,
            "critic1_target": self.critic1_target_,
            "critic2_target": self.critic2_target_,
        }
        meta = {
            "kind": "td3bc",
            "params": self.get_params(),
            "state_mean": self.normalizer_.mean.tolist(),
            "state_std": self.normalizer_.std.tolist(),
        }
        save_checkpoint(path, nets, meta)

    @classmethod
    def load(cls, path):
        nets, meta = load_checkpoint(path)
        if meta.get("kind") != "td3bc":
            raise ValueError(f"{path} does not hold a TD3BC checkpoint")
        model = cls(**meta["params"])
        for name, net in nets.items():
            setattr(model, f"{name}_", net)
        model.state_dim_ = model.actor_.in_dim
        model.action_dim_ = model.actor_.out_dim
        model.normalizer_ = Normalizer(np.array(meta["state_mean"]), np.array(meta["state_std"]))
        return model


def evaluate(actor, spec: envs_mod.EnvSpec, episodes: int = 10, seed=0):
    """Undiscounted returns of ``episodes`` seeded rollouts.

    ``actor`` is anything with ``predict`` or a plain callable mapping a batch
    of states to actions. Returns ``(mean, std, returns)``.
    """
    policy_fn = actor.predict if hasattr(actor, "predict") else actor
    returns = envs_mod.rollout(spec, policy_fn, episodes, seed)
    return float(returns.mean()), float(returns.std()), returns


def normalized_score(value, random_return, expert_return):
    """D4RL-style score: 0 at the random policy, 100 at the expert."""
    return 100.0 * (np.asarray(value) - random_return) / (expert_return - random_return)


def reference_returns(spec: envs_mod.EnvSpec, episodes: int = 10, seed=0) -> dict:
    """Random-policy and expert-controller anchors evaluated on the same start states."""
    rng = as_generator(seed + 1 if isinstance(seed, int) else seed)
    rand = lambda s: rng.uniform(-1.0, 1.0, size=(len(s), spec.action_dim))  # noqa: E731
    expert = lambda s: envs_mod.expert_action(spec, s)  # noqa: E731
    return {
        "random": evaluate(rand, spec, episodes, seed)[0],
        "expert": evaluate(expert, spec, episodes, seed)[0],
    }
