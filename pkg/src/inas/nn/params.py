"""Named parameter collections and weight initialization."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, get_default_dtype


class ParameterSet:
    """Ordered map of name -> trainable Tensor, one gradient buffer each."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.ascontiguousarray(values, dtype=get_default_dtype()), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def count(self) -> int:
        return sum(t.size for t in self._params.values())

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        """Overwrite matching parameters in place; shapes must agree."""
        for name, t in self._params.items():
            key = prefix + name
            if key not in arrays:
                raise KeyError(f"checkpoint missing parameter {key!r}")
            arr = arrays[key]
            if arr.shape != t.data.shape:
                raise ValueError(f"parameter {key!r} shape {arr.shape} != expected {t.data.shape}")
            t.data = np.ascontiguousarray(arr, dtype=t.data.dtype)
            t.grad = None


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Fan-in scaled normal init for conv/dense weights feeding ReLU-family units."""
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape)
