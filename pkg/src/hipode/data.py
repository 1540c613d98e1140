"""Transition storage, the binary dataset file format and batch sampling."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

MAGIC = "HIPODE-TRANSITIONS"
FORMAT_VERSION = 1
STD_FLOOR = 1e-6


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass
class Batch:
    """Column-major view of a set of transitions, the unit every trainer consumes."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)

    def transitions(self) -> list[Transition]:
        return [
            Transition(self.states[i], self.actions[i], float(self.rewards[i]), self.next_states[i], bool(self.dones[i]))
            for i in range(len(self))
        ]


def _readonly(a, dtype, ndim):
    a = np.array(a, dtype=dtype, copy=True)
    if a.ndim != ndim:
        raise ValueError(f"expected a {ndim}-D array, got shape {a.shape}")
    a.setflags(write=False)
    return a


class TransitionDataset:
    """Immutable store of ``(s, a, r, s', done)`` with state normalization stats.

    Arrays are frozen at construction, so the statistics computed there stay
    valid for the lifetime of the object; a changed transition set means a
    new dataset.
    """

    def __init__(self, states, actions, rewards, next_states, dones, source_tag: str = "unknown", metadata=None):
        self.states = _readonly(states, np.float64, 2)
        self.actions = _readonly(actions, np.float64, 2)
        self.rewards = _readonly(np.reshape(rewards, -1), np.float64, 1)
        self.next_states = _readonly(next_states, np.float64, 2)
        self.dones = _readonly(np.reshape(dones, -1), bool, 1)
        self.source_tag = str(source_tag)
        self.metadata = dict(metadata or {})
        self.provenance = None
        n = len(self.rewards)
        for name in ("states", "actions", "next_states", "dones"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        if self.states.shape[1] != self.next_states.shape[1]:
            raise ValueError("state and next_state dimensions differ")
        if n and np.any(np.abs(self.actions) > 1.0):
            raise ValueError("actions must lie in [-1, 1]")
        if n:
            self.state_mean = self.states.mean(axis=0)
            self.state_std = np.maximum(self.states.std(axis=0), STD_FLOOR)
        else:
            self.state_mean = np.zeros(self.state_dim)
            self.state_std = np.ones(self.state_dim)

    @classmethod
    def from_transitions(cls, transitions, source_tag="unknown", metadata=None) -> "TransitionDataset":
        transitions = list(transitions)
        if not transitions:
            raise ValueError("cannot build a dataset from zero transitions")
        return cls(
            np.stack([t.state for t in transitions]),
            np.stack([t.action for t in transitions]),
            np.array([t.reward for t in transitions]),
            np.stack([t.next_state for t in transitions]),
            np.array([t.done for t in transitions]),
            source_tag,
            metadata,
        )

    @property
    def size(self) -> int:
        return len(self.rewards)

    def __len__(self) -> int:
        return self.size

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def __getitem__(self, i) -> Transition:
        return Transition(self.states[i], self.actions[i], float(self.rewards[i]), self.next_states[i], bool(self.dones[i]))

    def __iter__(self) -> Iterator[Transition]:
        return (self[i] for i in range(self.size))

    @property
    def transitions(self) -> list[Transition]:
        return list(self)

    def batch(self, idx=None) -> Batch:
        if idx is None:
            idx = slice(None)
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx], self.dones[idx])

    def subset(self, idx, source_tag=None) -> "TransitionDataset":
        b = self.batch(idx)
        return TransitionDataset(
            b.states, b.actions, b.rewards, b.next_states, b.dones, source_tag or self.source_tag, self.metadata
        )

    def normalize(self, s):
        return (np.asarray(s, dtype=np.float64) - self.state_mean) / self.state_std

    def denormalize(self, z):
        return np.asarray(z, dtype=np.float64) * self.state_std + self.state_mean

    def payload(self) -> bytes:
        rows = np.concatenate(
            [
                self.states,
                self.actions,
                self.rewards[:, None],
                self.next_states,
                self.dones[:, None].astype(np.float64),
            ],
            axis=1,
        )
        return rows.astype("<f8").tobytes()

    def checksum(self) -> str:
        return hashlib.sha256(self.payload()).hexdigest()

    def equals(self, other: "TransitionDataset") -> bool:
        return self.payload() == other.payload() and self.state_dim == other.state_dim

    def __repr__(self) -> str:
        return f"TransitionDataset(size={self.size}, state_dim={self.state_dim}, action_dim={self.action_dim}, tag={self.source_tag!r})"


def concatenate(datasets, source_tag=None, metadata=None) -> TransitionDataset:
    datasets = list(datasets)
    dims = {(d.state_dim, d.action_dim) for d in datasets}
    if len(dims) != 1:
        raise ValueError(f"cannot concatenate datasets with differing dimensions {sorted(dims)}")
    return TransitionDataset(
        np.concatenate([d.states for d in datasets]),
        np.concatenate([d.actions for d in datasets]),
        np.concatenate([d.rewards for d in datasets]),
        np.concatenate([d.next_states for d in datasets]),
        np.concatenate([d.dones for d in datasets]),
        source_tag or datasets[0].source_tag,
        metadata,
    )


# -- file format --------------------------------------------------------------
#
# Text header, one ``key value`` pair per line, terminated by ``END``; then
# ``count`` little-endian float64 records laid out as [s, a, r, s', done].


def save(dataset: TransitionDataset, path) -> None:
    payload = dataset.payload()
    header = [
        f"{MAGIC} {FORMAT_VERSION}",
        f"state_dim {dataset.state_dim}",
        f"action_dim {dataset.action_dim}",
        f"count {dataset.size}",
        f"tag {json.dumps(dataset.source_tag)}",
        f"metadata {json.dumps(dataset.metadata, sort_keys=True)}",
        f"sha256 {hashlib.sha256(payload).hexdigest()}",
        "END",
    ]
    with open(Path(path), "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(payload)


def load(path) -> TransitionDataset:
    path = Path(path)
    raw = path.read_bytes()
    end = raw.find(b"\nEND\n")
    if end < 0:
        raise ValueError(f"{path}: malformed header (no END line)")
    try:
        lines = raw[:end].decode("ascii").split("\n")
    except UnicodeDecodeError:
        raise ValueError(f"{path}: header is not ASCII text") from None
    magic = lines[0].split()
    if len(magic) != 2 or magic[0] != MAGIC:
        raise ValueError(f"{path}: not a transition dataset file")
    if int(magic[1]) != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported dataset format version {magic[1]}")
    fields = {}
    for line in lines[1:]:
        key, _, value = line.partition(" ")
        fields[key] = value
    try:
        ds, da, count = int(fields["state_dim"]), int(fields["action_dim"]), int(fields["count"])
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{path}: malformed header field: {exc}") from None
    if ds < 1 or da < 1 or count < 0:
        raise ValueError(f"{path}: invalid dimensions in header")
    payload = raw[end + len(b"\nEND\n") :]
    width = 2 * ds + da + 2
    if len(payload) != count * width * 8:
        raise ValueError(f"{path}: payload holds {len(payload)} bytes, header implies {count * width * 8}")
    if "sha256" in fields and hashlib.sha256(payload).hexdigest() != fields["sha256"]:
        raise ValueError(f"{path}: checksum mismatch")
    rows = np.frombuffer(payload, dtype="<f8").reshape(count, width).astype(np.float64)
    try:
        tag = json.loads(fields.get("tag", '"unknown"'))
        metadata = json.loads(fields.get("metadata", "{}"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: malformed header field: {exc}") from None
    return TransitionDataset(
        rows[:, :ds],
        rows[:, ds : ds + da],
        rows[:, ds + da],
        rows[:, ds + da + 1 : 2 * ds + da + 1],
        rows[:, -1] != 0.0,
        tag,
        metadata,
    )


# -- sampling and normalization -------------------------------------------------


def derive_seed(master_seed, component: str) -> int:
    """Stable 32-bit seed for a named component; adding components never shifts others."""
    digest = hashlib.sha256(f"{master_seed}:{component}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_indices(dataset: TransitionDataset, batch_size: int, rng_seed) -> np.ndarray:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if dataset.size == 0:
        raise ValueError("cannot sample from an empty dataset")
    return as_generator(rng_seed).integers(0, dataset.size, size=batch_size)


def sample_batch(dataset: TransitionDataset, batch_size: int, rng_seed) -> Batch:
    """Uniform sampling with replacement; ``rng_seed`` is an int or a Generator."""
    return dataset.batch(sample_indices(dataset, batch_size, rng_seed))


def normalize_state(dataset: TransitionDataset, s):
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != dataset.state_dim:
        raise ValueError(f"state has {s.shape[-1]} components, dataset has {dataset.state_dim}")
    return dataset.normalize(s)


def denormalize_state(dataset: TransitionDataset, z):
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != dataset.state_dim:
        raise ValueError(f"state has {z.shape[-1]} components, dataset has {dataset.state_dim}")
    return dataset.denormalize(z)


@dataclass
class Normalizer:
    """Frozen copy of a dataset's state statistics, carried by fitted estimators."""

    mean: np.ndarray
    std: np.ndarray = field(repr=False)

    @classmethod
    def from_dataset(cls, dataset: TransitionDataset) -> "Normalizer":
        return cls(dataset.state_mean.copy(), dataset.state_std.copy())

    def __call__(self, s):
        return (np.asarray(s, dtype=np.float64) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean
