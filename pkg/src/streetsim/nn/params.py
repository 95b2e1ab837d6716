"""Named parameter collections and weight initializers."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor


class DuplicateParam(Exception):
    pass


class UnknownParam(KeyError):
    pass


def fanin_uniform(rng, shape, dtype=np.float32) -> np.ndarray:
    """Uniform on [-1/sqrt(fan_in), 1/sqrt(fan_in)]; fan_in is the product of
    all but the last axis."""
    fan_in = 1
    for s in shape[:-1]:
        fan_in *= s
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def orthogonal(rng, shape, dtype=np.float32) -> np.ndarray:
    """Orthogonal init via QR of a gaussian, sign-fixed so the result is
    deterministic given the rng draw."""
    rows, cols = shape
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return q[:rows, :cols].astype(dtype)


def lstm_recurrent(rng, units: int, dtype=np.float32) -> np.ndarray:
    """[units, 4*units] recurrent matrix, one orthogonal block per gate."""
    blocks = [orthogonal(rng, (units, units), dtype) for _ in range(4)]
    return np.concatenate(blocks, axis=1)


def lstm_bias(units: int, forget_bias: float = 1.0, dtype=np.float32) -> np.ndarray:
    """Zero bias except the forget gate, which starts at forget_bias."""
    b = np.zeros(4 * units, dtype=dtype)
    b[units : 2 * units] = forget_bias
    return b


class ParamSet:
    """Insertion-ordered name -> Tensor map plus per-parameter optimizer slots.

    Slot arrays (e.g. RMSProp mean squares) live beside the parameters so a
    checkpoint restores training exactly.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.slots: dict[str, np.ndarray] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise DuplicateParam(name)
        t = Tensor(np.asarray(data), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise UnknownParam(name) from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: t.grad for n, t in self._params.items() if t.grad is not None}

    def n_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        """Copies of all parameter arrays, for actor-side weight refresh."""
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_snapshot(self, arrays: dict[str, np.ndarray]) -> None:
        for n, arr in arrays.items():
            t = self[n]
            if t.data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {n!r}: {t.data.shape} vs {arr.shape}")
            t.data = arr.astype(t.data.dtype, copy=True)

    def subset(self, prefix: str) -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]
