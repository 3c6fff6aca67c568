"""Named parameter storage with aliasing.

Weight sharing is realized by aliasing: several hierarchical names resolve to
one Tensor storage. Gradients accumulate into the shared storage through every
alias path automatically; enumeration and optimizer updates deduplicate by
storage identity so a shared weight is counted and stepped exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class Parameter:
    name: str
    tensor: Tensor
    shared_with: str | None = None  # canonical path when this name is an alias


class ParamStore:
    def __init__(self, dtype=np.float32):
        self.dtype = dtype
        self._entries: dict[str, Parameter] = {}

    def create(self, name: str, shape: tuple[int, ...]) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True, op="param")
        self._entries[name] = Parameter(name, t)
        return t

    def alias(self, name: str, canonical: str):
        if name in self._entries:
            raise ValueError(f"duplicate parameter name: {name}")
        target = self._entries[canonical]
        root = target.shared_with or canonical
        self._entries[name] = Parameter(name, target.tensor, shared_with=root)

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def named(self):
        return self._entries.items()

    def names(self):
        return list(self._entries)

    def unique(self) -> list[tuple[str, Tensor]]:
        """(canonical name, tensor) pairs, each storage exactly once."""
        out = []
        seen: set[int] = set()
        for name, p in self._entries.items():
            if id(p.tensor) in seen:
                continue
            seen.add(id(p.tensor))
            out.append((name, p.tensor))
        return out

    def count(self) -> int:
        return sum(t.size for _, t in self.unique())

    def nbytes(self) -> int:
        return sum(t.data.nbytes for _, t in self.unique())

    def zero_grad(self):
        for _, t in self.unique():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.unique()}

    def load_state(self, state: dict[str, np.ndarray]):
        for name, t in self.unique():
            if name not in state:
                raise KeyError(f"checkpoint missing parameter: {name}")
            src = state[name]
            if tuple(src.shape) != t.shape:
                raise ValueError(f"shape mismatch for {name}: {src.shape} vs {t.shape}")
            t.data[...] = src.astype(t.dtype, copy=False)
