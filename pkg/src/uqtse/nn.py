"""Fully connected networks, input-coordinate derivatives, Adam, checkpoints.

Networks are tanh MLPs with an identity output layer. The input-derivative
evaluation propagates tangents through the same tape ops as the forward pass,
so losses built on those derivatives backpropagate exactly to the weights.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tape import Tensor, tanh

__all__ = ["Mlp", "EvalWithInputDerivs", "AdamState", "adam_step", "save_checkpoint", "load_checkpoint"]

CHECKPOINT_VERSION = "uqtse-checkpoint-1"


@dataclass
class EvalWithInputDerivs:
    """Network outputs plus their derivatives w.r.t. selected input coordinates.

    `d_input[j]` has the same shape as `outputs` and holds d(outputs)/d(x_j).
    """

    outputs: Tensor
    d_input: list


class Mlp:
    """Tanh multilayer perceptron with weights stored as tape tensors.

    Layout: for widths (w0, ..., wk), weight l has shape (w_l, w_{l+1}) and
    the forward map is x -> tanh(x W + b) per hidden layer, affine at the end.
    """

    def __init__(self, widths: Sequence[int], seed=0):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError(f"need at least two widths, all >= 1, got {widths}")
        self.widths = widths
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            limit = np.sqrt(6.0 / (w_in + w_out))
            self.weights.append(Tensor(rng.uniform(-limit, limit, size=(w_in, w_out))))
            self.biases.append(Tensor(np.zeros(w_out)))

    @property
    def n_params(self) -> int:
        return sum(w_in * w_out + w_out for w_in, w_out in zip(self.widths[:-1], self.widths[1:]))

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def _check_input(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.widths[0]:
            raise ValueError(f"input shape {X.shape} incompatible with first width {self.widths[0]}")
        return X

    def forward(self, X) -> Tensor:
        """Differentiable forward pass; X is a constant (m, w0) batch."""
        h = X if isinstance(X, Tensor) else Tensor(self._check_input(X))
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if l != last:
                h = tanh(h)
        return h

    def forward_numpy(self, X: np.ndarray) -> np.ndarray:
        """Fast evaluation without building a tape (for prediction/metrics)."""
        h = self._check_input(X)
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.value + b.value
            if l != last:
                h = np.tanh(h)
        return h

    def forward_with_input_derivs(self, X, coords: Sequence[int] = (0, 1)) -> EvalWithInputDerivs:
        """Forward pass plus exact d(outputs)/d(X[:, j]) for each j in coords.

        The tangents are propagated with tape ops, so a loss built on them
        still differentiates exactly w.r.t. the weights.
        """
        Xv = self._check_input(X.value if isinstance(X, Tensor) else X)
        h = X if isinstance(X, Tensor) else Tensor(Xv)
        tangents = []
        for j in coords:
            if not (0 <= j < self.widths[0]):
                raise ValueError(f"coordinate {j} out of range for input width {self.widths[0]}")
            # seed e_j through the first affine layer: row j of W0
            tangents.append(self.weights[0][j : j + 1, :])
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if l == 0:
                a = h @ w + b
            else:
                a = h @ w + b
                tangents = [t @ w for t in tangents]
            if l != last:
                h = tanh(a)
                damp = 1.0 - h * h
                tangents = [damp * t for t in tangents]
            else:
                h = a
        return EvalWithInputDerivs(outputs=h, d_input=tangents)

    # -- flat parameter vector (checkpoints, finite-difference tests) -------

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.value.ravel() for p in self.params()])

    def set_flat_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {flat.shape}")
        i = 0
        for p in self.params():
            n = p.value.size
            p.value = flat[i : i + n].reshape(p.value.shape).copy()
            i += n


@dataclass
class AdamState:
    """Bias-corrected Adam state for one parameter group."""

    lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step_count: int = 0

    @classmethod
    def for_params(cls, params, lr: float = 0.0005) -> "AdamState":
        return cls(
            lr=lr,
            m=[np.zeros_like(p.value) for p in params],
            v=[np.zeros_like(p.value) for p in params],
        )


def adam_step(state: AdamState, params, grads) -> None:
    """One in-place Adam update of `params` given `grads` (same structure)."""
    if len(params) != len(state.m) or len(grads) != len(state.m):
        raise ValueError("params/grads length does not match optimizer state")
    for gi, g in enumerate(grads):
        bad = ~np.isfinite(g)
        if np.any(bad):
            idx = int(np.argwhere(bad.ravel())[0][0])
            raise FloatingPointError(f"non-finite gradient in group {gi} at flat index {idx}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.value = p.value - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- checkpoint files ---------------------------------------------------------


def save_checkpoint(path, arrays: dict, meta: dict) -> None:
    """Write arrays + JSON metadata to a versioned .npz, atomically."""
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    payload["__meta__"] = np.frombuffer(
        json.dumps({"format_version": CHECKPOINT_VERSION, **meta}, sort_keys=True).encode(), dtype=np.uint8
    )
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    os.close(fd)
    try:
        with open(tmp, "wb") as fh:
            np.savez(fh, **payload)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_checkpoint(path) -> tuple:
    """Read back (arrays, meta); raises on version mismatch."""
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
        meta = json.loads(bytes(data["__meta__"]).decode())
    version = meta.pop("format_version", None)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    return arrays, meta
