"""Parameter store, seeded initialization, Adam, and gradient clipping."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor

__all__ = ["ParamStore", "uniform_init", "adam_step", "clip_global_norm"]


def uniform_init(
    rng: np.random.Generator,
    shape: tuple[int, ...],
    fan_in: int | None = None,
    dtype=np.float32,
) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); fan_in defaults to shape[0]."""
    if fan_in is None:
        fan_in = shape[0]
    bound = 1.0 / float(np.sqrt(fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ParamStore:
    """Named trainable tensors plus per-parameter Adam moment buffers."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(values, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def items(self):
        return self.params.items()

    def names(self):
        return list(self.params)

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None

    def n_entries(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def clone_values(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            t = self.params[name]
            if t.data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name!r}: {t.data.shape} vs {arr.shape}")
            t.data = np.asarray(arr, dtype=self.dtype).copy()

    def astype(self, dtype) -> "ParamStore":
        """Copy of the store in another float precision (moments reset)."""
        out = ParamStore(dtype=dtype)
        for name, t in self.params.items():
            out.add(name, t.data.astype(dtype))
        return out


def clip_global_norm(store: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for t in store.params.values():
        if t.grad is not None:
            total += float((t.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        scale = max_norm / norm
        for t in store.params.values():
            if t.grad is not None:
                t.grad = t.grad * scale
    return norm


def adam_step(
    store: ParamStore,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-9,
) -> None:
    """Bias-corrected Adam update; zeroes gradients and bumps the step count."""
    store.step += 1
    t = store.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data = p.data - lr * update.astype(p.data.dtype, copy=False)
        p.grad = None
