"""Conditional VAE used for next-state candidates, inverse actions and rewards."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .data import as_generator
from .nn import LossTrace, Mlp, NonFiniteError, adam_step, AdamState, load_checkpoint, save_checkpoint

ROLES = ("state_transition", "inverse_action", "reward")
LOG_SIGMA_BOUNDS = (-8.0, 4.0)


def kl_to_standard_normal(mu, log_sigma):
    """Per-row KL(N(mu, sigma^2) || N(0, I)) = 0.5 * sum(mu^2 + sigma^2 - 1 - 2 log sigma)."""
    return 0.5 * np.sum(mu**2 + np.exp(2.0 * log_sigma) - 1.0 - 2.0 * log_sigma, axis=-1)


class ConditionalVAE(BaseEstimator):
    """Encoder ``(target, condition) -> (mu_z, log sigma_z)``, decoder ``(z, condition) -> target``.

    ``fit(X, y)`` takes the condition as ``X`` and the reconstruction target as
    ``y``, so the estimator lines up with the usual supervised signature.

    Parameters
    ----------
    role : {"state_transition", "inverse_action", "reward"}
        Only changes defaults: the inverse-action decoder squashes its output
        with tanh, and ``state_dim`` is inferred as the condition width for
        state transitions and half of it for the inverse models.
    latent_dim : int, optional
        Defaults to twice the state dimension.
    """

    def __init__(
        self,
        role="state_transition",
        latent_dim=None,
        state_dim=None,
        hidden_units=750,
        epochs=100,
        batch_size=256,
        kl_weight=1.0,
        z_clip=2.0,
        learning_rate=1e-3,
        validation_fraction=0.1,
        random_state=0,
    ):
        self.role = role
        self.latent_dim = latent_dim
        self.state_dim = state_dim
        self.hidden_units = hidden_units
        self.epochs = epochs
        self.batch_size = batch_size
        self.kl_weight = kl_weight
        self.z_clip = z_clip
        self.learning_rate = learning_rate
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    # -- construction ---------------------------------------------------------

    def _resolve_latent_dim(self, condition_dim):
        if self.latent_dim is not None:
            return int(self.latent_dim)
        state_dim = self.state_dim
        if state_dim is None:
            state_dim = condition_dim if self.role == "state_transition" else condition_dim // 2
        return 2 * int(state_dim)

    def _build(self, target_dim, condition_dim, rng):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        self.target_dim_ = int(target_dim)
        self.condition_dim_ = int(condition_dim)
        self.latent_dim_ = self._resolve_latent_dim(condition_dim)
        h = self.hidden_units
        self.encoder_ = Mlp.init([target_dim + condition_dim, h, 2 * self.latent_dim_], rng)
        out_act = "tanh" if self.role == "inverse_action" else "identity"
        self.decoder_ = Mlp.init([self.latent_dim_ + condition_dim, h, target_dim], rng, output_activation=out_act)
        return self

    def initialize(self, target_dim, condition_dim):
        """Allocate untrained networks (used by gradient checks and tests)."""
        return self._build(target_dim, condition_dim, as_generator(self.random_state))

    # -- objective ------------------------------------------------------------

    def loss_and_grads(self, target, condition, eps):
        """Reconstruction + weighted KL for fixed reparameterization noise ``eps``.

        Returns ``(loss, encoder_grads, decoder_grads, parts)``; ``parts`` holds
        the batch-mean reconstruction and KL terms.
        """
        n = len(target)
        k = self.latent_dim_
        enc_out, enc_cache = self.encoder_.forward(np.hstack([target, condition]), return_cache=True)
        mu, raw_log_sigma = enc_out[:, :k], enc_out[:, k:]
        lo, hi = LOG_SIGMA_BOUNDS
        log_sigma = np.clip(raw_log_sigma, lo, hi)
        sigma = np.exp(log_sigma)
        z = mu + sigma * eps
        recon, dec_cache = self.decoder_.forward(np.hstack([z, condition]), return_cache=True)
        err = recon - target
        rec = np.sum(err**2, axis=1)
        kl = kl_to_standard_normal(mu, log_sigma)
        loss = float(np.mean(rec + self.kl_weight * kl))
        if not np.isfinite(loss):
            raise NonFiniteError("CVAE loss is not finite")

        dec_grads, d_dec_in = self.decoder_.backward(dec_cache, 2.0 * err / n)
        dz = d_dec_in[:, :k]
        d_mu = dz + self.kl_weight * mu / n
        d_log_sigma = dz * eps * sigma + self.kl_weight * (sigma**2 - 1.0) / n
        d_log_sigma *= (raw_log_sigma >= lo) & (raw_log_sigma <= hi)
        enc_grads, _ = self.encoder_.backward(enc_cache, np.hstack([d_mu, d_log_sigma]))
        return loss, enc_grads, dec_grads, {"reconstruction": float(rec.mean()), "kl": float(kl.mean())}

    def reconstruct(self, X, y):
        """Decode from the posterior mean; the deterministic reconstruction."""
        check_is_fitted(self, "encoder_")
        enc = self.encoder_.forward(np.hstack([y, X]))
        return self.decoder_.forward(np.hstack([enc[:, : self.latent_dim_], X]))

    # -- training -------------------------------------------------------------

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = check_array(np.reshape(y, (len(y), -1)), dtype=np.float64)
        if len(X) != len(y):
            raise ValueError("condition and target row counts differ")
        rng = as_generator(self.random_state)
        self._build(y.shape[1], X.shape[1], rng)

        order = rng.permutation(len(X))
        n_val = int(len(X) * self.validation_fraction) if len(X) >= 10 else 0
        val_idx, train_idx = order[:n_val], order[n_val:]
        enc_opt = AdamState.for_model(self.encoder_, self.learning_rate)
        dec_opt = AdamState.for_model(self.decoder_, self.learning_rate)
        trace = LossTrace()
        epoch_means = []
        bs = min(self.batch_size, len(train_idx))
        for _ in range(self.epochs):
            perm = rng.permutation(train_idx)
            losses = []
            for start in range(0, len(perm) - bs + 1, bs):
                idx = perm[start : start + bs]
                eps = rng.standard_normal((len(idx), self.latent_dim_))
                loss, g_enc, g_dec, _ = self.loss_and_grads(y[idx], X[idx], eps)
                adam_step(self.encoder_, g_enc, enc_opt)
                adam_step(self.decoder_, g_dec, dec_opt)
                trace.append(loss)
                losses.append(loss)
            epoch_means.append(float(np.mean(losses)))
        self.loss_trace_ = trace
        self.epoch_losses_ = epoch_means
        if n_val:
            self.heldout_mse_ = float(np.mean((self.reconstruct(X[val_idx], y[val_idx]) - y[val_idx]) ** 2))
        else:
            self.heldout_mse_ = float("nan")
        return self

    # -- generation -----------------------------------------------------------

    def sample(self, X, n_samples=1, random_state=None):
        """Decode ``n_samples`` prior draws per condition row.

        Latents are drawn from N(0, I) and clipped to ``[-z_clip, z_clip]``.
        Returns ``(rows, n_samples, target_dim)``, or ``(n_samples,
        target_dim)`` for a single 1-D condition.
        """
        check_is_fitted(self, "decoder_")
        if n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        single = np.ndim(X) == 1
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.condition_dim_:
            raise ValueError(f"condition has {X.shape[1]} features, model expects {self.condition_dim_}")
        rng = as_generator(random_state)
        z = np.clip(rng.standard_normal((len(X), n_samples, self.latent_dim_)), -self.z_clip, self.z_clip)
        cond = np.repeat(X[:, None, :], n_samples, axis=1)
        flat = np.concatenate([z, cond], axis=2).reshape(len(X) * n_samples, -1)
        out = self.decoder_.forward(flat).reshape(len(X), n_samples, self.target_dim_)
        return out[0] if single else out

    # -- persistence ----------------------------------------------------------

    def save(self, path):
        check_is_fitted(self, "decoder_")
        meta = {
            "kind": "cvae",
            "params": self.get_params(),
            "target_dim": self.target_dim_,
            "condition_dim": self.condition_dim_,
            "latent_dim": self.latent_dim_,
            "heldout_mse": getattr(self, "heldout_mse_", None),
        }
        save_checkpoint(path, {"encoder": self.encoder_, "decoder": self.decoder_}, meta)

    @classmethod
    def load(cls, path):
        nets, meta = load_checkpoint(path)
        if meta.get("kind") != "cvae":
            raise ValueError(f"{path} does not hold a CVAE checkpoint")
        model = cls(**meta["params"])
        model.encoder_, model.decoder_ = nets["encoder"], nets["decoder"]
        model.target_dim_ = meta["target_dim"]
        model.condition_dim_ = meta["condition_dim"]
        model.latent_dim_ = meta["latent_dim"]
        model.heldout_mse_ = meta.get("heldout_mse")
        return model


def cvae_loss(model: ConditionalVAE, target, condition, rng):
    """Single-sample ELBO loss and gradients with reparameterization noise from ``rng``."""
    eps = as_generator(rng).standard_normal((len(target), model.latent_dim_))
    loss, g_enc, g_dec, _ = model.loss_and_grads(np.asarray(target, float), np.asarray(condition, float), eps)
    return loss, (g_enc, g_dec)


def cvae_generate(model: ConditionalVAE, condition, n, rng):
    return model.sample(np.asarray(condition, dtype=np.float64), n, rng)
