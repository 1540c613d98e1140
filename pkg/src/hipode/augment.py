"""Policy-decoupled synthetic transition generation.

For each sampled dataset state the augmenter draws ``n_candidates`` next
states from the state-transition CVAE, keeps the one the pessimistic value
model rates highest, fills in an action and a reward with the inverse CVAEs,
and scores the triple by how far the forward dynamics model lands from the
chosen next state. Only the ``selecting_rate`` fraction of each pool with the
smallest such distance survives.

All five models work on normalized states; everything emitted is in
environment units.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import envs as envs_mod
from .cvae import ConditionalVAE
from .data import Batch, Normalizer, TransitionDataset, as_generator, concatenate, derive_seed, sample_batch
from .dynamics import GaussianDynamics
from .value import NegativeSamplingValue

ABLATIONS = ("hipode", "nov", "repeat", "noise", "quality", "none")
MODES = ("offline_merge", "realtime")
REPEAT_TOP_FRACTION = 0.10
_FLOOR_SLACK = 1e-9


# -- synthetic transitions ------------------------------------------------------


@dataclass(frozen=True)
class SyntheticTransition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool
    source_state_index: int
    candidate_rank: int
    dynamics_distance: float


@dataclass
class SyntheticTransitions:
    """Array-backed collection of generated transitions plus provenance.

    ``candidate_rank`` is the index of the emitted next state among its
    ``n`` candidates (-1 for strategies that do not draw candidates).
    ``selected_value``/``first_value``/``mean_value`` record the value model's
    view of the chosen, the first and the average candidate.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    source_state_index: np.ndarray
    candidate_rank: np.ndarray
    dynamics_distance: np.ndarray
    selected_value: np.ndarray
    first_value: np.ndarray
    mean_value: np.ndarray
    candidates: np.ndarray | None = field(default=None, repr=False)

    _ROW_FIELDS = (
        "states",
        "actions",
        "rewards",
        "next_states",
        "dones",
        "source_state_index",
        "candidate_rank",
        "dynamics_distance",
        "selected_value",
        "first_value",
        "mean_value",
    )

    def __len__(self) -> int:
        return len(self.rewards)

    def __getitem__(self, i) -> SyntheticTransition:
        return SyntheticTransition(
            self.states[i],
            self.actions[i],
            float(self.rewards[i]),
            self.next_states[i],
            bool(self.dones[i]),
            int(self.source_state_index[i]),
            int(self.candidate_rank[i]),
            float(self.dynamics_distance[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def take(self, idx) -> "SyntheticTransitions":
        idx = np.asarray(idx, dtype=np.int64)
        kwargs = {name: getattr(self, name)[idx] for name in self._ROW_FIELDS}
        kwargs["candidates"] = None if self.candidates is None else self.candidates[idx]
        return SyntheticTransitions(**kwargs)

    @classmethod
    def concatenate(cls, parts) -> "SyntheticTransitions":
        parts = list(parts)
        kwargs = {name: np.concatenate([getattr(p, name) for p in parts]) for name in cls._ROW_FIELDS}
        has_cands = all(p.candidates is not None for p in parts)
        kwargs["candidates"] = np.concatenate([p.candidates for p in parts]) if has_cands else None
        return cls(**kwargs)

    @classmethod
    def from_real(cls, dataset: TransitionDataset, idx, actions=None, rewards=None, next_states=None, dones=None):
        idx = np.asarray(idx, dtype=np.int64)
        n = len(idx)
        nan = np.full(n, np.nan)
        return cls(
            dataset.states[idx].copy(),
            (dataset.actions[idx] if actions is None else actions).copy(),
            (dataset.rewards[idx] if rewards is None else rewards).copy(),
            (dataset.next_states[idx] if next_states is None else next_states).copy(),
            (dataset.dones[idx] if dones is None else dones).copy(),
            idx,
            np.full(n, -1, dtype=np.int64),
            np.zeros(n),
            nan,
            nan.copy(),
            nan.copy(),
        )

    def as_dataset(self, source_tag="synthetic") -> TransitionDataset:
        return TransitionDataset(self.states, self.actions, self.rewards, self.next_states, self.dones, source_tag)

    def as_batch(self) -> Batch:
        return Batch(self.states, self.actions, self.rewards, self.next_states, self.dones)

    def write_provenance(self, path) -> None:
        """One tab-separated record per synthetic transition."""
        with open(Path(path), "w") as fh:
            fh.write("row\tsource_state_index\tcandidate_rank\tdynamics_distance\tselected_value\tmean_value\n")
            for i in range(len(self)):
                fh.write(
                    f"{i}\t{self.source_state_index[i]}\t{self.candidate_rank[i]}\t"
                    f"{float(self.dynamics_distance[i])!r}\t{float(self.selected_value[i])!r}\t{float(self.mean_value[i])!r}\n"
                )


# -- selection primitives -----------------------------------------------------------


def lambda_count(pool_size: int, selecting_rate: float) -> int:
    return max(1, int(math.floor(selecting_rate * pool_size + _FLOOR_SLACK)))


def filter_lambda(pool: SyntheticTransitions, selecting_rate: float) -> SyntheticTransitions:
    """Keep the ``max(1, floor(rate * |pool|))`` lowest dynamics distances.

    Ties are broken by pool position and survivors keep their pool order.
    """
    if len(pool) == 0:
        raise ValueError("cannot filter an empty pool")
    if not 0.0 < selecting_rate <= 1.0:
        raise ValueError("selecting_rate must be in (0, 1]")
    k = lambda_count(len(pool), selecting_rate)
    keep = np.sort(np.argsort(pool.dynamics_distance, kind="stable")[:k])
    return pool.take(keep)


def pool_size_for(count: int, selecting_rate: float) -> int:
    """Pool of about ``count / rate`` whose lambda-filter yields exactly ``count`` items."""
    if count <= 0:
        return 0
    size = int(math.ceil(count / selecting_rate - _FLOOR_SLACK))
    while lambda_count(size, selecting_rate) < count:
        size += 1
    return size


def synthetic_count(synthetic_rate: float, n_real: int) -> int:
    """Offline stop rule: ``floor(eta * N)`` synthetic transitions."""
    return int(math.floor(synthetic_rate * n_real + _FLOOR_SLACK))


def realtime_count(synthetic_rate: float, batch_size: int) -> int:
    """Per-batch share ``round(eta * N)`` with halves rounded up."""
    return int(math.floor(synthetic_rate * batch_size + 0.5))


@dataclass(frozen=True)
class AblationMode:
    """Which generation strategy fills the synthetic slots.

    ``hipode``: argmax-value candidate. ``nov``: uniformly random candidate.
    ``repeat``: copies of the top 10% real transitions by ``r + gamma V_target(s')``.
    ``noise``: real transitions with Gaussian action noise re-stepped in the
    environment. ``quality``: dataset states with the scripted expert's
    action, re-stepped. ``none``: no synthetic data.
    """

    kind: str
    noise_scale: float = 0.0

    def __post_init__(self):
        if self.kind not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.kind!r}")

    @property
    def needs_models(self) -> bool:
        return self.kind in ("hipode", "nov", "repeat")

    @property
    def needs_env(self) -> bool:
        return self.kind in ("noise", "quality")


def ablation_mode(kind: str, noise_scale: float | None = None) -> AblationMode:
    """Parse ``hipode``, ``nov``, ``repeat``, ``quality``, ``none`` or ``noise:<sigma>``."""
    name, _, arg = kind.partition(":")
    if name == "noise":
        sigma = float(arg) if arg else (noise_scale if noise_scale is not None else 0.1)
        return AblationMode("noise", sigma)
    return AblationMode(name)


# -- trained models ---------------------------------------------------------------


MODEL_FILES = {
    "state_model": "state_transition.npz",
    "value_model": "value.npz",
    "action_model": "inverse_action.npz",
    "reward_model": "reward.npz",
    "dynamics_model": "dynamics.npz",
}


@dataclass
class HipodeModels:
    """The five trained generators plus the state statistics they were trained under."""

    state_model: ConditionalVAE
    value_model: NegativeSamplingValue
    action_model: ConditionalVAE
    reward_model: ConditionalVAE
    dynamics_model: GaussianDynamics
    normalizer: Normalizer

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.state_model.save(directory / MODEL_FILES["state_model"])
        self.value_model.save(directory / MODEL_FILES["value_model"])
        self.action_model.save(directory / MODEL_FILES["action_model"])
        self.reward_model.save(directory / MODEL_FILES["reward_model"])
        self.dynamics_model.save(directory / MODEL_FILES["dynamics_model"])
        stats = {"state_mean": self.normalizer.mean.tolist(), "state_std": self.normalizer.std.tolist()}
        (directory / "normalizer.json").write_text(json.dumps(stats))

    @classmethod
    def load(cls, directory) -> "HipodeModels":
        directory = Path(directory)
        stats = json.loads((directory / "normalizer.json").read_text())
        return cls(
            ConditionalVAE.load(directory / MODEL_FILES["state_model"]),
            NegativeSamplingValue.load(directory / MODEL_FILES["value_model"]),
            ConditionalVAE.load(directory / MODEL_FILES["action_model"]),
            ConditionalVAE.load(directory / MODEL_FILES["reward_model"]),
            GaussianDynamics.load(directory / MODEL_FILES["dynamics_model"]),
            Normalizer(np.array(stats["state_mean"]), np.array(stats["state_std"])),
        )

    def training_report(self) -> dict:
        def window(trace):
            lead, trail = trace.window_means(100)
            return {"leading_mean": lead, "trailing_mean": trail, "steps": len(trace.values)}

        out = {}
        for name in ("state_model", "action_model", "reward_model"):
            m = getattr(self, name)
            if hasattr(m, "loss_trace_"):
                out[name] = {**window(m.loss_trace_), "heldout_reconstruction_mse": m.heldout_mse_}
        if hasattr(self.value_model, "loss_trace_"):
            out["value_model"] = window(self.value_model.loss_trace_)
        if hasattr(self.dynamics_model, "loss_trace_"):
            out["dynamics_model"] = {
                **window(self.dynamics_model.loss_trace_),
                "train_one_step_error": self.dynamics_model.train_error_,
                "heldout_one_step_error": self.dynamics_model.heldout_error_,
            }
        return out


def train_models(
    dataset: TransitionDataset,
    seed: int = 0,
    *,
    penalty_weight=1.0,
    penalty_scope=1.0,
    discount=envs_mod.DEFAULT_DISCOUNT,
    cvae_hidden=750,
    cvae_epochs=100,
    hidden_units=256,
    value_steps=5000,
    dynamics_steps=5000,
    batch_size=256,
    learning_rate=1e-3,
) -> HipodeModels:
    """Fit the state-transition, value, inverse-action, reward and dynamics models.

    Each model draws from its own seed derived from ``seed`` and its name.
    """
    if dataset.size == 0:
        raise ValueError("cannot train models on an empty dataset")
    norm = Normalizer.from_dataset(dataset)
    s, s2 = norm(dataset.states), norm(dataset.next_states)
    pair = np.hstack([s, s2])
    cvae_kw = dict(
        hidden_units=cvae_hidden,
        epochs=cvae_epochs,
        batch_size=batch_size,
        learning_rate=learning_rate,
        state_dim=dataset.state_dim,
    )
    state_model = ConditionalVAE(role="state_transition", random_state=derive_seed(seed, "state_model"), **cvae_kw)
    state_model.fit(s, s2)
    value_model = NegativeSamplingValue(
        hidden_units=hidden_units,
        discount=discount,
        penalty_weight=penalty_weight,
        penalty_scope=penalty_scope,
        n_steps=value_steps,
        batch_size=batch_size,
        learning_rate=learning_rate,
        random_state=derive_seed(seed, "value_model"),
    )
    value_model.fit(Batch(s, dataset.actions, dataset.rewards, s2, dataset.dones))
    action_model = ConditionalVAE(role="inverse_action", random_state=derive_seed(seed, "action_model"), **cvae_kw)
    action_model.fit(pair, dataset.actions)
    reward_model = ConditionalVAE(role="reward", random_state=derive_seed(seed, "reward_model"), **cvae_kw)
    reward_model.fit(pair, dataset.rewards[:, None])
    dynamics_model = GaussianDynamics(
        hidden_units=hidden_units,
        n_steps=dynamics_steps,
        batch_size=batch_size,
        learning_rate=learning_rate,
        random_state=derive_seed(seed, "dynamics_model"),
    )
    dynamics_model.fit(np.hstack([s, dataset.actions]), s2)
    return HipodeModels(state_model, value_model, action_model, reward_model, dynamics_model, norm)


# -- the augmenter ----------------------------------------------------------------


class HipodeAugmenter(TransformerMixin, BaseEstimator, auto_wrap_output_keys=None):
    """Fit the five generators on a dataset, then emit synthetic transitions.

    ``transform(dataset)`` returns the dataset merged with ``floor(eta * N)``
    synthetic transitions (offline mode); ``realtime_batch`` builds mixed
    training batches on the fly.

    Parameters
    ----------
    synthetic_rate : float
        ``eta`` in [0, 1).
    selecting_rate : float
        ``lambda`` in (0, 1]: fraction of each generated pool kept after the
        dynamics-consistency ranking.
    n_candidates : int
        Candidate next states drawn per source state.
    ablation : str
        See :class:`AblationMode`. ``noise:<sigma>`` and ``quality`` need ``env``.
    dynamics_mode : {"mean", "sample"}
        How the forward model's prediction for the consistency distance is drawn.
    """

    def __init__(
        self,
        synthetic_rate=0.2,
        selecting_rate=0.2,
        n_candidates=10,
        penalty_weight=1.0,
        penalty_scope=1.0,
        mode="offline_merge",
        ablation="hipode",
        generation_batch=1024,
        dynamics_mode="mean",
        clip_reward=False,
        discount=envs_mod.DEFAULT_DISCOUNT,
        cvae_hidden=750,
        cvae_epochs=100,
        hidden_units=256,
        value_steps=5000,
        dynamics_steps=5000,
        env=None,
        random_state=0,
    ):
        self.synthetic_rate = synthetic_rate
        self.selecting_rate = selecting_rate
        self.n_candidates = n_candidates
        self.penalty_weight = penalty_weight
        self.penalty_scope = penalty_scope
        self.mode = mode
        self.ablation = ablation
        self.generation_batch = generation_batch
        self.dynamics_mode = dynamics_mode
        self.clip_reward = clip_reward
        self.discount = discount
        self.cvae_hidden = cvae_hidden
        self.cvae_epochs = cvae_epochs
        self.hidden_units = hidden_units
        self.value_steps = value_steps
        self.dynamics_steps = dynamics_steps
        self.env = env
        self.random_state = random_state

    def _validate_params(self):
        if not 0.0 <= self.synthetic_rate < 1.0:
            raise ValueError("synthetic_rate must be in [0, 1)")
        if not 0.0 < self.selecting_rate <= 1.0:
            raise ValueError("selecting_rate must be in (0, 1]")
        if self.n_candidates < 1:
            raise ValueError("n_candidates must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.dynamics_mode not in ("mean", "sample"):
            raise ValueError("dynamics_mode must be 'mean' or 'sample'")
        ablation = ablation_mode(self.ablation) if isinstance(self.ablation, str) else self.ablation
        if ablation.needs_env and self.env is None:
            raise ValueError(f"ablation {ablation.kind!r} needs an environment spec")
        return ablation

    def fit(self, X, y=None, models: HipodeModels | None = None):
        """Train the generators on ``X`` (a TransitionDataset), or adopt pre-trained ``models``."""
        if not isinstance(X, TransitionDataset):
            raise TypeError("HipodeAugmenter.fit expects a TransitionDataset")
        self.ablation_ = self._validate_params()
        self.dataset_ = X
        if models is not None:
            self.models_ = models
        elif self.ablation_.needs_models:
            self.models_ = train_models(
                X,
                derive_seed(self.random_state, "models"),
                penalty_weight=self.penalty_weight,
                penalty_scope=self.penalty_scope,
                discount=self.discount,
                cvae_hidden=self.cvae_hidden,
                cvae_epochs=self.cvae_epochs,
                hidden_units=self.hidden_units,
                value_steps=self.value_steps,
                dynamics_steps=self.dynamics_steps,
            )
        else:
            self.models_ = None
        self._reward_range = (float(X.rewards.min()), float(X.rewards.max()))
        return self

    def _require_models(self):
        check_is_fitted(self, "dataset_")
        if self.models_ is None:
            raise RuntimeError("generation needs trained models; fit the augmenter first")
        return self.models_

    # -- generation -------------------------------------------------------------

    def generate_pool(self, pool_size: int, random_state=None, keep_candidates=False) -> SyntheticTransitions:
        """Pre-filter pool of ``pool_size`` candidate-selected transitions."""
        models = self._require_models()
        ablation = self.ablation_
        if ablation.kind not in ("hipode", "nov"):
            raise ValueError(f"generate_pool is undefined for ablation {ablation.kind!r}")
        rng = as_generator(random_state)
        # random picks come from a child stream so hipode and nov see the same candidates
        pick_rng = rng.spawn(1)[0]
        data, norm, n = self.dataset_, models.normalizer, self.n_candidates
        parts = []
        remaining = int(pool_size)
        while remaining > 0:
            b = min(remaining, self.generation_batch)
            remaining -= b
            idx = rng.integers(0, data.size, size=b)
            s = norm(data.states[idx])
            cands = models.state_model.sample(s, n, rng)
            values = models.value_model.predict(cands.reshape(b * n, -1)).reshape(b, n)
            if ablation.kind == "hipode":
                rank = np.argmax(values, axis=1)
            else:
                rank = pick_rng.integers(0, n, size=b)
            rows = np.arange(b)
            s2 = cands[rows, rank]
            pair = np.hstack([s, s2])
            actions = models.action_model.sample(pair, 1, rng)[:, 0]
            rewards = models.reward_model.sample(pair, 1, rng)[:, 0, 0]
            if self.clip_reward:
                rewards = np.clip(rewards, *self._reward_range)
            s_dyna = models.dynamics_model.predict(np.hstack([s, actions]), self.dynamics_mode, rng)
            dist = np.linalg.norm(s_dyna - s2, axis=1)
            parts.append(
                SyntheticTransitions(
                    data.states[idx].copy(),
                    actions,
                    rewards,
                    norm.inverse(s2),
                    np.zeros(b, dtype=bool),
                    idx,
                    rank.astype(np.int64),
                    dist,
                    values[rows, rank],
                    values[:, 0].copy(),
                    values.mean(axis=1),
                    norm.inverse(cands) if keep_candidates else None,
                )
            )
        if not parts:
            return _empty_synthetic(data.state_dim, data.action_dim)
        return SyntheticTransitions.concatenate(parts)

    def _repeat(self, count, rng) -> SyntheticTransitions:
        models = self._require_models()
        data, norm = self.dataset_, models.normalizer
        v_next = models.value_model.predict_target(norm(data.next_states))
        score = data.rewards + self.discount * v_next
        n_top = max(1, int(math.ceil(REPEAT_TOP_FRACTION * data.size)))
        top = np.argsort(-score, kind="stable")[:n_top]
        return SyntheticTransitions.from_real(data, top[rng.integers(0, n_top, size=count)])

    def _restep(self, count, rng, kind) -> SyntheticTransitions:
        data, env = self.dataset_, self.env
        idx = rng.integers(0, data.size, size=count)
        s = data.states[idx]
        if kind == "noise":
            a = np.clip(data.actions[idx] + self.ablation_.noise_scale * rng.standard_normal(data.actions[idx].shape), -1, 1)
        else:
            a = envs_mod.expert_action(env, s)
        s_next, r, _ = envs_mod.step(env, s, a, 1)
        return SyntheticTransitions.from_real(
            data, idx, actions=a, rewards=r, next_states=s_next, dones=np.zeros(count, dtype=bool)
        )

    def generate(self, count: int, random_state=None, keep_candidates=False) -> SyntheticTransitions:
        """Exactly ``count`` synthetic transitions under the configured ablation."""
        check_is_fitted(self, "dataset_")
        rng = as_generator(random_state)
        kind = self.ablation_.kind
        data = self.dataset_
        if count <= 0 or kind == "none":
            return _empty_synthetic(data.state_dim, data.action_dim)
        if kind == "repeat":
            return self._repeat(count, rng)
        if kind in ("noise", "quality"):
            return self._restep(count, rng, kind)
        pool = self.generate_pool(pool_size_for(count, self.selecting_rate), rng, keep_candidates)
        kept = filter_lambda(pool, self.selecting_rate)
        if len(kept) != count:
            order = np.argsort(kept.dynamics_distance, kind="stable")[:count]
            kept = kept.take(np.sort(order))
        return kept

    def transform(self, X, random_state=None):
        """Merged dataset: ``X`` plus ``floor(eta * N)`` synthetic transitions."""
        check_is_fitted(self, "dataset_")
        data = X
        if data is not self.dataset_ and not data.equals(self.dataset_):
            raise ValueError("transform expects the dataset the augmenter was fitted on")
        seed = derive_seed(self.random_state, "generation") if random_state is None else random_state
        synthetic = self.generate(synthetic_count(self.synthetic_rate, data.size), seed)
        return merge(data, synthetic)

    def realtime_batch(self, batch_size: int, random_state) -> Batch:
        """Mixed batch: ``round(eta*N)`` synthetic after ``N - round(eta*N)`` real rows.

        The real part is drawn first from ``random_state`` so that ``eta = 0``
        reproduces :func:`hipode.data.sample_batch` exactly.
        """
        check_is_fitted(self, "dataset_")
        rng = as_generator(random_state)
        m = realtime_count(self.synthetic_rate, batch_size)
        if m == batch_size:
            real = self.dataset_.batch(np.zeros(0, dtype=np.int64))
        else:
            real = sample_batch(self.dataset_, batch_size - m, rng)
        if m == 0:
            return real
        syn = self.generate(m, rng)
        return Batch(
            np.concatenate([real.states, syn.states]),
            np.concatenate([real.actions, syn.actions]),
            np.concatenate([real.rewards, syn.rewards]),
            np.concatenate([real.next_states, syn.next_states]),
            np.concatenate([real.dones, syn.dones]),
        )


def _empty_synthetic(state_dim, action_dim) -> SyntheticTransitions:
    e = np.empty(0)
    return SyntheticTransitions(
        np.empty((0, state_dim)),
        np.empty((0, action_dim)),
        e,
        np.empty((0, state_dim)),
        np.empty(0, dtype=bool),
        np.empty(0, dtype=np.int64),
        np.empty(0, dtype=np.int64),
        e.copy(),
        e.copy(),
        e.copy(),
        e.copy(),
    )


def merge(dataset: TransitionDataset, synthetic: SyntheticTransitions) -> TransitionDataset:
    """Append synthetic rows to a dataset; the result carries the provenance."""
    if len(synthetic) and (
        synthetic.states.shape[1] != dataset.state_dim or synthetic.actions.shape[1] != dataset.action_dim
    ):
        raise ValueError("synthetic transitions do not match the dataset's dimensions")
    if len(synthetic) == 0:
        merged = dataset.subset(slice(None))
    else:
        merged = concatenate(
            [dataset, synthetic.as_dataset()],
            source_tag=dataset.source_tag,
        )
    merged.metadata.update(dataset.metadata)
    merged.metadata.update({"n_original": dataset.size, "n_synthetic": len(synthetic)})
    merged.provenance = synthetic
    return merged
