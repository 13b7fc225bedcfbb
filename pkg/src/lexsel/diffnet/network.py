"""MLP construction and the parameter container.

Both networks in this project are plain fully connected stacks: relu
hidden layers, then softmax (predictor) or sigmoid (selector) on the
output. Weights are W[in, out], inputs are row batches.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class MlpSpec:
    """Layer sizes including input and output, e.g. (11, 200, 200, 200, 2)."""

    sizes: tuple
    out_act: str = "identity"  # identity | softmax | sigmoid

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ValueError("MlpSpec needs at least input and output sizes")
        if self.out_act not in ("identity", "softmax", "sigmoid"):
            raise ValueError(f"unknown out_act {self.out_act!r}")


@dataclass
class ParamStore:
    """Named parameters plus per-parameter Adam state."""

    params: dict = field(default_factory=dict)
    opt_state: dict = field(default_factory=dict)
    spec: MlpSpec | None = None

    def add(self, name: str, value: np.ndarray):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        self.params[name] = T.Tensor(value, requires_grad=True)

    def __getitem__(self, name: str) -> T.Tensor:
        return self.params[name]

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def arrays(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict):
        for name, arr in arrays.items():
            p = self.params[name]
            if p.data.shape != arr.shape:
                raise ValueError(
                    f"shape mismatch for {name}: {p.data.shape} vs {arr.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)
        self.opt_state.clear()

    def copy(self) -> "ParamStore":
        out = ParamStore(spec=self.spec)
        for name, p in self.params.items():
            out.add(name, p.data.copy())
        return out

    def checksum(self) -> str:
        """sha256 over names, shapes and raw parameter bytes."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            p = self.params[name]
            h.update(name.encode())
            h.update(str(p.data.shape).encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def init_mlp(spec: MlpSpec, rng: np.random.Generator,
             dtype=np.float32) -> ParamStore:
    """Uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) for weights and biases."""
    store = ParamStore(spec=spec)
    for i, (fan_in, fan_out) in enumerate(zip(spec.sizes[:-1], spec.sizes[1:])):
        bound = float(np.sqrt(1.0 / fan_in))
        store.add(f"w{i}", rng.uniform(-bound, bound,
                                       size=(fan_in, fan_out)).astype(dtype))
        store.add(f"b{i}", rng.uniform(-bound, bound,
                                       size=(fan_out,)).astype(dtype))
    return store


def mlp_logits(store: ParamStore, x) -> T.Tensor:
    """Forward pass up to the pre-activation of the output layer."""
    spec = store.spec
    if spec is None:
        raise ValueError("store has no MlpSpec attached")
    h = T.as_tensor(x)
    n_layers = len(spec.sizes) - 1
    for i in range(n_layers):
        act = "relu" if i < n_layers - 1 else "identity"
        h = T.dense(h, store[f"w{i}"], store[f"b{i}"], act=act)
    return h


def mlp_forward(store: ParamStore, x) -> T.Tensor:
    """Full forward pass including the declared output activation."""
    z = mlp_logits(store, x)
    if store.spec.out_act == "softmax":
        return T.softmax(z)
    if store.spec.out_act == "sigmoid":
        return T.sigmoid(z)
    return z
