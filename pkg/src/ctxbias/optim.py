"""Adam optimizer over a named parameter dict."""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class Adam:
    """Standard Adam with bias correction.

    Parameters are a ``name -> Tensor`` dict; every tensor passed in must
    require gradients. ``step()`` consumes the gradients (they are cleared
    afterwards so stale grads cannot leak into the next batch).
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        for name, p in params.items():
            if not p.requires_grad:
                raise ContractError(f"parameter {name!r} does not require grad")
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float | None = None) -> None:
        """Apply one update using each parameter's accumulated gradient.

        ``lr`` overrides the stored learning rate for this step only
        (warmup schedules pass the scheduled rate here).
        """
        rate = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient; run backward first")
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= rate * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat view of optimizer state for checkpointing."""
        out: dict[str, np.ndarray] = {}
        for name in self.params:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for name in self.params:
            for prefix, store in (("m", self.m), ("v", self.v)):
                key = f"{prefix}.{name}"
                if key not in arrays:
                    raise ContractError(f"missing optimizer state {key!r}")
                if arrays[key].shape != store[name].shape:
                    raise ContractError(f"optimizer state {key!r} has shape {arrays[key].shape}, "
                                        f"expected {store[name].shape}")
                store[name] = arrays[key].astype(store[name].dtype)
        self.t = int(t)
