"""Adam with classic L2 coupling (decay folded into the gradient)."""

from __future__ import annotations

import numpy as np

from lexsel._backend import ops

from .network import ParamStore


class MissingGradError(RuntimeError):
    pass


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0):
    """One in-place update over every parameter in the store.

    Every parameter must carry a gradient; backward() zero-fills
    unreachable ones, so a missing grad means a bookkeeping bug.
    """
    for name, p in store.params.items():
        if p.grad is None:
            raise MissingGradError(f"parameter {name!r} has no gradient; "
                                   "call backward before adam_step")
        state = store.opt_state.get(name)
        if state is None:
            state = {"m": np.zeros_like(p.data),
                     "v": np.zeros_like(p.data), "t": 0}
            store.opt_state[name] = state
        state["t"] += 1
        ops.adam_step(p.data.ravel(), p.grad.ravel(),
                      state["m"].ravel(), state["v"].ravel(),
                      state["t"], lr, beta1, beta2, eps, weight_decay)
