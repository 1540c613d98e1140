"""State-value approximator with negative-sampling pessimism."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import Batch, as_generator
from .nn import AdamState, LossTrace, Mlp, NonFiniteError, adam_step, add_grads, load_checkpoint, save_checkpoint


def _as_batch(X) -> Batch:
    if isinstance(X, Batch):
        return X
    if hasattr(X, "batch"):
        return X.batch()
    raise TypeError("expected a TransitionDataset or Batch")


class NegativeSamplingValue(BaseEstimator):
    """V(s) fitted by TD on dataset states plus a distance-penalized target on noisy states.

    Each update minimizes ``L_td + L_ns`` where, for a dataset transition
    ``(s_d, r, s')`` and perturbation ``delta ~ N(0, penalty_scope^2 I)``,

        L_td = (r + gamma (1 - done) V_target(s') - V(s_d))^2
        L_ns = (r + gamma (1 - done) V_target(s') - penalty_weight ||delta|| - V(s_d + delta))^2

    States are used in whatever units they arrive in; the augmenter feeds
    normalized states so that ``penalty_scope`` is dimensionless.
    """

    def __init__(
        self,
        hidden_units=256,
        discount=0.99,
        penalty_weight=1.0,
        penalty_scope=1.0,
        noisy_samples_per_state=1,
        target_update_period=2,
        tau=0.005,
        n_steps=5000,
        batch_size=256,
        learning_rate=1e-3,
        random_state=0,
    ):
        self.hidden_units = hidden_units
        self.discount = discount
        self.penalty_weight = penalty_weight
        self.penalty_scope = penalty_scope
        self.noisy_samples_per_state = noisy_samples_per_state
        self.target_update_period = target_update_period
        self.tau = tau
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def initialize(self, state_dim, rng=None):
        rng = as_generator(self.random_state if rng is None else rng)
        self.state_dim_ = int(state_dim)
        self.online_ = Mlp.init([state_dim, self.hidden_units, 1], rng)
        self.target_ = self.online_.copy()
        return self

    # -- losses -----------------------------------------------------------------

    def td_targets(self, batch: Batch):
        """``r + gamma (1 - done) V_target(s')``; the target net is never differentiated."""
        v_next = self.target_.forward(batch.next_states)[:, 0]
        return batch.rewards + self.discount * (1.0 - batch.dones) * v_next

    def td_loss(self, batch: Batch, targets=None):
        if targets is None:
            targets = self.td_targets(batch)
        v, cache = self.online_.forward(batch.states, return_cache=True)
        err = targets - v[:, 0]
        loss = float(np.mean(err**2))
        if not np.isfinite(loss):
            raise NonFiniteError("TD loss is not finite")
        grads, _ = self.online_.backward(cache, (-2.0 * err / len(err))[:, None])
        return loss, grads

    def draw_perturbations(self, batch: Batch, rng):
        k = self.noisy_samples_per_state
        return self.penalty_scope * as_generator(rng).standard_normal((len(batch) * k, batch.states.shape[1]))

    def ns_loss(self, batch: Batch, deltas, targets=None):
        """Negative-sampling loss for given perturbations.

        ``deltas`` has ``noisy_samples_per_state`` rows per batch row, grouped
        by repetition: rows ``j*B:(j+1)*B`` perturb the whole batch once.
        """
        if targets is None:
            targets = self.td_targets(batch)
        reps = len(deltas) // len(batch)
        states = np.tile(batch.states, (reps, 1)) + deltas
        penalized = np.tile(targets, reps) - self.penalty_weight * np.linalg.norm(deltas, axis=1)
        v, cache = self.online_.forward(states, return_cache=True)
        err = penalized - v[:, 0]
        loss = float(np.mean(err**2))
        if not np.isfinite(loss):
            raise NonFiniteError("negative-sampling loss is not finite")
        grads, _ = self.online_.backward(cache, (-2.0 * err / len(err))[:, None])
        return loss, grads

    def loss_and_grads(self, batch: Batch, deltas):
        targets = self.td_targets(batch)
        l_td, g_td = self.td_loss(batch, targets)
        l_ns, g_ns = self.ns_loss(batch, deltas, targets)
        return l_td + l_ns, add_grads(g_td, g_ns), {"td": l_td, "ns": l_ns}

    # -- training ---------------------------------------------------------------

    def fit(self, X, y=None):
        data = _as_batch(X)
        if len(data) == 0:
            raise ValueError("cannot fit a value model on an empty dataset")
        rng = as_generator(self.random_state)
        self.initialize(data.states.shape[1], rng)
        opt = AdamState.for_model(self.online_, self.learning_rate)
        trace = LossTrace()
        bs = min(self.batch_size, len(data))
        for step in range(1, self.n_steps + 1):
            idx = rng.integers(0, len(data), size=bs)
            batch = Batch(data.states[idx], data.actions[idx], data.rewards[idx], data.next_states[idx], data.dones[idx])
            loss, grads, _ = self.loss_and_grads(batch, self.draw_perturbations(batch, rng))
            adam_step(self.online_, grads, opt)
            trace.append(loss)
            if step % self.target_update_period == 0:
                self.target_.soft_update_(self.online_, self.tau)
        self.loss_trace_ = trace
        return self

    # -- inference --------------------------------------------------------------

    def predict(self, X):
        check_is_fitted(self, "online_")
        X = np.asarray(X, dtype=np.float64)
        out = self.online_.forward(np.atleast_2d(X))[:, 0]
        return out if X.ndim > 1 else float(out[0])

    def predict_target(self, X):
        check_is_fitted(self, "target_")
        return self.target_.forward(np.atleast_2d(np.asarray(X, dtype=np.float64)))[:, 0]

    def select_best(self, candidates):
        """Index and state of the highest-valued candidate; ties go to the lowest index."""
        candidates = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
        if len(candidates) == 0:
            raise ValueError("select_best needs at least one candidate")
        idx = int(np.argmax(self.predict(candidates)))
        return idx, candidates[idx]

    def probe_values(self, states, radius, random_state=None):
        """V at ``s + delta`` with ``delta`` uniform on the sphere of the given radius."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        d = as_generator(random_state).standard_normal(states.shape)
        d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
        return self.predict(states + radius * d)

    def save(self, path):
        check_is_fitted(self, "online_")
        meta = {"kind": "value", "params": self.get_params(), "state_dim": self.state_dim_}
        save_checkpoint(path, {"online": self.online_, "target": self.target_}, meta)

    @classmethod
    def load(cls, path):
        nets, meta = load_checkpoint(path)
        if meta.get("kind") != "value":
            raise ValueError(f"{path} does not hold a value checkpoint")
        model = cls(**meta["params"])
        model.online_, model.target_ = nets["online"], nets["target"]
        model.state_dim_ = meta["state_dim"]
        return model


def select_best(values) -> int:
    """Argmax with lowest-index tie breaking over precomputed values."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("select_best needs at least one candidate")
    return int(np.argmax(values))

