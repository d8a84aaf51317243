from __future__ import annotations

import fnmatch
from typing import Iterator

import numpy as np

from .autodiff import Tensor, backward, default_dtype


class ParameterStore:
    """Named parameters with per-name trainable flags.

    A parameter's ``requires_grad`` mirrors its trainable flag, so frozen
    parameters never receive gradients and never enter the optimizer.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(np.array(value, dtype=default_dtype()), requires_grad=trainable, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self, pattern: str = "*") -> list[str]:
        return [n for n in self._params if fnmatch.fnmatchcase(n, pattern)]

    def is_trainable(self, name: str) -> bool:
        return self._params[name].requires_grad

    def trainable_names(self) -> list[str]:
        return [n for n, p in self._params.items() if p.requires_grad]

    def set_trainable(self, pattern: str, flag: bool) -> int:
        """Set the flag on every parameter whose name matches a glob pattern."""
        hits = self.names(pattern)
        for n in hits:
            self._params[n].requires_grad = flag
        return len(hits)

    def freeze_all(self) -> None:
        self.set_trainable("*", False)

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self._params.items()}

    def flags(self) -> dict[str, bool]:
        return {n: p.requires_grad for n, p in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if strict and (missing or extra):
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for n, arr in arrays.items():
            if n not in self._params:
                continue
            p = self._params[n]
            if p.shape != arr.shape:
                raise ValueError(f"{n}: shape {arr.shape} != {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)

    def astype(self, dtype) -> None:
        for p in self._params.values():
            p.data = p.data.astype(dtype)

    def gradients(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Reverse-mode gradients of a scalar loss for every trainable parameter."""
        trainable = [p for p in self._params.values() if p.requires_grad]
        backward(loss, trainable)
        out = {}
        for p in trainable:
            out[p.name] = np.zeros_like(p.data) if p.grad is None else np.asarray(p.grad, dtype=p.dtype)
            p.grad = None
        return out

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(p.data.size for p in self._params.values() if p.requires_grad or not trainable_only)
