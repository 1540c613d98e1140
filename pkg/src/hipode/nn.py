"""Feed-forward networks in float64 numpy with hand-written backprop and Adam.

Every learned model in the package is built from :class:`Mlp`. Inputs are
row-major batches ``(batch, features)``; a 1-D input is treated as a batch of
one and the output is squeezed back.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

CHECKPOINT_FORMAT = "hipode-mlp"
CHECKPOINT_VERSION = 1

HIDDEN_ACTIVATIONS = ("relu", "tanh")
OUTPUT_ACTIVATIONS = ("identity", "tanh")


class NonFiniteError(FloatingPointError):
    """Raised when a loss, gradient or parameter stops being finite."""


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _apply_activation_grad(g, z, out, kind):
    if kind == "relu":
        return np.where(z > 0.0, g, 0.0)
    if kind == "tanh":
        return g * (1.0 - out * out)
    return g


def _all_finite(arrays) -> bool:
    # A non-finite entry makes the sum non-finite; one reduction per array is cheap.
    return bool(np.isfinite(sum(float(np.sum(a)) for a in arrays)))


@dataclass
class Mlp:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        if len(self.layer_dims) < 2 or any(int(d) < 1 for d in self.layer_dims):
            raise ValueError(f"layer_dims must hold >= 2 positive ints, got {self.layer_dims}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        self.layer_dims = [int(d) for d in self.layer_dims]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.layer_dims[i], self.layer_dims[i + 1])
            if w.shape != expect or b.shape != (expect[1],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} do not match {expect}")
        if len(self.weights) != len(self.layer_dims) - 1:
            raise ValueError("number of weight matrices does not match layer_dims")

    @classmethod
    def init(
        cls,
        layer_dims: Sequence[int],
        rng: np.random.Generator,
        hidden_activation: str = "relu",
        output_activation: str = "identity",
    ) -> "Mlp":
        """Uniform init in +-1/sqrt(fan_in) for both weights and biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=(fan_out,)))
        return cls(list(layer_dims), weights, biases, hidden_activation, output_activation)

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in canonical order ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "Mlp":
        return Mlp(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.hidden_activation,
            self.output_activation,
        )

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input with {self.in_dim} features, got shape {np.shape(x)}")
        return x, squeeze

    def forward(self, x, return_cache: bool = False):
        x, squeeze = self._check_input(x)
        pre, post = [], [x]
        h = x
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            kind = self.hidden_activation if i < n_layers - 1 else self.output_activation
            h = _activate(z, kind)
            pre.append(z)
            post.append(h)
        out = h[0] if squeeze else h
        if return_cache:
            return out, (pre, post, squeeze)
        return out

    __call__ = forward

    def backward(self, cache, output_grad):
        """Backpropagate ``output_grad`` through a cached forward pass.

        Returns ``(grads, input_grad)`` with ``grads`` aligned to :meth:`parameters`.
        """
        pre, post, squeeze = cache
        g = np.asarray(output_grad, dtype=np.float64)
        if squeeze:
            g = g[None, :]
        if g.shape != post[-1].shape:
            raise ValueError(f"output_grad shape {g.shape} does not match output {post[-1].shape}")
        n_layers = len(self.weights)
        grads: list[np.ndarray] = [None] * (2 * n_layers)  # type: ignore[list-item]
        for i in reversed(range(n_layers)):
            kind = self.hidden_activation if i < n_layers - 1 else self.output_activation
            g = _apply_activation_grad(g, pre[i], post[i + 1], kind)
            grads[2 * i] = post[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        if not _all_finite(grads):
            raise NonFiniteError("non-finite parameter gradient in backward pass")
        return grads, (g[0] if squeeze else g)

    def soft_update_(self, source: "Mlp", tau: float) -> None:
        """In-place Polyak blend ``self <- tau * source + (1 - tau) * self``."""
        for dst, src in zip(self.parameters(), source.parameters()):
            dst *= 1.0 - tau
            dst += tau * src


def forward(model: Mlp, x):
    return model.forward(x)


def backward(model: Mlp, x, output_grad):
    _, cache = model.forward(x, return_cache=True)
    return model.backward(cache, output_grad)


def add_grads(a: list[np.ndarray], b: list[np.ndarray]) -> list[np.ndarray]:
    return [x + y for x, y in zip(a, b)]


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_model(cls, model: Mlp, learning_rate: float = 1e-3, **kwargs) -> "AdamState":
        params = model.parameters()
        return cls(
            [np.zeros_like(p) for p in params],
            [np.zeros_like(p) for p in params],
            learning_rate=learning_rate,
            **kwargs,
        )


def adam_step(model: Mlp, grads: list[np.ndarray], state: AdamState) -> tuple[Mlp, AdamState]:
    """Bias-corrected Adam update, applied in place; returns ``(model, state)``."""
    if not _all_finite(grads):
        raise NonFiniteError("refusing Adam step with non-finite gradient")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for p, g, m, v in zip(model.parameters(), grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
    if not _all_finite(model.parameters()):
        raise NonFiniteError(f"parameters became non-finite at Adam step {t}")
    return model, state


# -- checkpoints ---------------------------------------------------------------


def _mlp_header(model: Mlp) -> dict:
    return {
        "layer_dims": model.layer_dims,
        "hidden_activation": model.hidden_activation,
        "output_activation": model.output_activation,
    }


def save_checkpoint(path, models: dict[str, Mlp], meta: dict | None = None) -> None:
    """Write named networks plus a JSON header into one ``.npz`` file.

    The header records format name and version, each network's shape and
    activations, and free-form ``meta``. Parameters are stored as float64,
    so a reload reproduces forward outputs bit for bit.
    """
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "networks": {name: _mlp_header(m) for name, m in models.items()},
        "meta": meta or {},
    }
    arrays = {"__header__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for name, m in models.items():
        for i, p in enumerate(m.parameters()):
            arrays[f"{name}/{i}"] = p
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[dict[str, Mlp], dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        if "__header__" not in data:
            raise ValueError(f"{path}: not a network checkpoint (missing header)")
        header = json.loads(data["__header__"].tobytes().decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unexpected checkpoint format {header.get('format')!r}")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        models = {}
        for name, spec in header["networks"].items():
            n_layers = len(spec["layer_dims"]) - 1
            params = [data[f"{name}/{i}"].astype(np.float64) for i in range(2 * n_layers)]
            models[name] = Mlp(
                spec["layer_dims"],
                params[0::2],
                params[1::2],
                spec["hidden_activation"],
                spec["output_activation"],
            )
    return models, header["meta"]


# -- gradient checking -----------------------------------------------------------


def numerical_gradient(loss_fn: Callable[[], float], params: list[np.ndarray], eps: float = 1e-5):
    """Central differences of ``loss_fn`` w.r.t. each array in ``params`` (perturbed in place)."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = loss_fn()
            flat[i] = orig - eps
            minus = loss_fn()
            flat[i] = orig
            gflat[i] = (plus - minus) / (2.0 * eps)
        out.append(g)
    return out


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)`` over all arrays.

    ``floor`` keeps gradients that are zero up to rounding from dominating.
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.asarray(a, dtype=np.float64)
        n = np.asarray(n, dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


@dataclass
class LossTrace:
    """Per-step loss record kept by every trainer."""

    values: list[float] = field(default_factory=list)

    def append(self, value: float) -> None:
        if not np.isfinite(value):
            raise NonFiniteError(f"loss diverged (non-finite) at step {len(self.values)}")
        self.values.append(float(value))

    def window_means(self, window: int = 100) -> tuple[float, float]:
        v = np.asarray(self.values)
        w = max(1, min(window, len(v) // 2 or 1))
        return float(v[:w].mean()), float(v[-w:].mean())
