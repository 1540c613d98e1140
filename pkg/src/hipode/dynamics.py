"""Diagonal-Gaussian forward dynamics model over state deltas."""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .data import as_generator
from .nn import AdamState, LossTrace, Mlp, NonFiniteError, adam_step, load_checkpoint, save_checkpoint

LOG_2PI = math.log(2.0 * math.pi)


class GaussianDynamics(BaseEstimator):
    """``p(s' | s, a) = N(s + mu(s, a), diag(exp(logvar(s, a))))``.

    ``fit(X, y)`` takes ``X = [s, a]`` and ``y = s'``; ``predict`` returns the
    mean next state. Log-variances are clamped to ``log_var_bounds`` (no
    gradient flows through a clamped output).
    """

    def __init__(
        self,
        hidden_units=256,
        log_var_bounds=(-10.0, 0.5),
        n_steps=5000,
        batch_size=256,
        learning_rate=1e-3,
        validation_fraction=0.1,
        random_state=0,
    ):
        self.hidden_units = hidden_units
        self.log_var_bounds = log_var_bounds
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def initialize(self, state_dim, action_dim, rng=None):
        rng = as_generator(self.random_state if rng is None else rng)
        self.state_dim_, self.action_dim_ = int(state_dim), int(action_dim)
        self.net_ = Mlp.init([state_dim + action_dim, self.hidden_units, 2 * state_dim], rng)
        return self

    def _heads(self, out):
        d = self.state_dim_
        lo, hi = self.log_var_bounds
        raw = out[:, d:]
        return out[:, :d], np.clip(raw, lo, hi), (raw >= lo) & (raw <= hi)

    def nll_loss(self, X, y):
        """Mean over rows of the summed per-dimension Gaussian NLL, with gradients."""
        s = X[:, : self.state_dim_]
        delta = y - s
        out, cache = self.net_.forward(X, return_cache=True)
        mu, log_var, inside = self._heads(out)
        inv_var = np.exp(-log_var)
        err = delta - mu
        per_row = 0.5 * np.sum(err**2 * inv_var + log_var + LOG_2PI, axis=1)
        loss = float(per_row.mean())
        if not np.isfinite(loss):
            raise NonFiniteError("dynamics NLL is not finite")
        n = len(X)
        d_mu = -err * inv_var / n
        d_log_var = 0.5 * (1.0 - err**2 * inv_var) / n * inside
        grads, _ = self.net_.backward(cache, np.hstack([d_mu, d_log_var]))
        return loss, grads

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = check_array(y, dtype=np.float64)
        if y.shape[1] >= X.shape[1]:
            raise ValueError("X must be [state, action] with at least one action column")
        rng = as_generator(self.random_state)
        self.initialize(y.shape[1], X.shape[1] - y.shape[1], rng)
        order = rng.permutation(len(X))
        n_val = int(len(X) * self.validation_fraction) if len(X) >= 10 else 0
        val_idx, train_idx = order[:n_val], order[n_val:]
        opt = AdamState.for_model(self.net_, self.learning_rate)
        trace = LossTrace()
        bs = min(self.batch_size, len(train_idx))
        for _ in range(self.n_steps):
            idx = train_idx[rng.integers(0, len(train_idx), size=bs)]
            loss, grads = self.nll_loss(X[idx], y[idx])
            adam_step(self.net_, grads, opt)
            trace.append(loss)
        self.loss_trace_ = trace
        self.train_error_ = self.one_step_error(X[train_idx], y[train_idx])
        self.heldout_error_ = self.one_step_error(X[val_idx], y[val_idx]) if n_val else float("nan")
        return self

    def predict_distribution(self, X):
        check_is_fitted(self, "net_")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        mu, log_var, _ = self._heads(self.net_.forward(X))
        return X[:, : self.state_dim_] + mu, np.exp(0.5 * log_var)

    def predict(self, X, mode="mean", random_state=None):
        mean, std = self.predict_distribution(X)
        if mode == "mean":
            return mean
        if mode == "sample":
            return mean + std * as_generator(random_state).standard_normal(mean.shape)
        raise ValueError(f"mode must be 'mean' or 'sample', got {mode!r}")

    def one_step_error(self, X, y) -> float:
        """Mean Euclidean distance between mean prediction and the observed next state."""
        return float(np.mean(np.linalg.norm(self.predict(X) - y, axis=1)))

    def save(self, path):
        check_is_fitted(self, "net_")
        meta = {
            "kind": "dynamics",
            "params": {**self.get_params(), "log_var_bounds": list(self.log_var_bounds)},
            "state_dim": self.state_dim_,
            "action_dim": self.action_dim_,
        }
        save_checkpoint(path, {"net": self.net_}, meta)

    @classmethod
    def load(cls, path):
        nets, meta = load_checkpoint(path)
        if meta.get("kind") != "dynamics":
            raise ValueError(f"{path} does not hold a dynamics checkpoint")
        params = dict(meta["params"])
        params["log_var_bounds"] = tuple(params["log_var_bounds"])
        model = cls(**params)
        model.net_ = nets["net"]
        model.state_dim_, model.action_dim_ = meta["state_dim"], meta["action_dim"]
        return model


def predict(model: GaussianDynamics, s, a, rng=None, mode="mean"):
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    return model.predict(np.hstack([s, a]), mode=mode, random_state=rng)
