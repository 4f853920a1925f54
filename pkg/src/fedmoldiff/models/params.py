"""Named, ordered parameter tensors: the unit of aggregation and transport."""

from __future__ import annotations

from typing import Callable, Iterator, Mapping

import numpy as np
import torch


class ShapeMismatch(ValueError):
    pass


class ParamStore:
    """Immutable mapping ``name -> ndarray`` iterated in lexicographic name order.

    Values are float32 by default; float64 stores are used as a shadow copy for
    finite-difference checks.
    """

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping[str, np.ndarray]):
        items = {}
        for name in sorted(entries):
            arr = np.array(entries[name], copy=True)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float32)
            arr.flags.writeable = False
            items[name] = arr
        self._entries = items

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self) -> list[str]:
        return list(self._entries)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._entries.items()}

    @property
    def dtype(self):
        return next(iter(self._entries.values())).dtype if self._entries else np.dtype(np.float32)

    @property
    def num_params(self) -> int:
        return int(sum(v.size for v in self._entries.values()))

    def flatten(self) -> np.ndarray:
        if not self._entries:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate([v.reshape(-1) for v in self._entries.values()])

    def unflatten(self, flat: np.ndarray) -> "ParamStore":
        """Store with this layout filled from ``flat``."""
        flat = np.asarray(flat)
        if flat.size != self.num_params:
            raise ShapeMismatch(f"expected {self.num_params} values, got {flat.size}")
        out, k = {}, 0
        for name, v in self._entries.items():
            out[name] = flat[k:k + v.size].reshape(v.shape)
            k += v.size
        return ParamStore(out)

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({k: v.astype(dtype) for k, v in self._entries.items()})

    def check_congruent(self, other: "ParamStore"):
        if self.shapes() != other.shapes():
            raise ShapeMismatch("parameter stores differ in names or shapes")

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParamStore":
        return ParamStore({k: fn(v) for k, v in self._entries.items()})

    def zip_map(self, fn, *others: "ParamStore") -> "ParamStore":
        for o in others:
            self.check_congruent(o)
        return ParamStore({k: fn(v, *(o[k] for o in others)) for k, v in self._entries.items()})

    def zeros_like(self) -> "ParamStore":
        return self.map(np.zeros_like)

    def to_torch(self, requires_grad: bool = False) -> dict[str, torch.Tensor]:
        return {k: torch.tensor(v, requires_grad=requires_grad) for k, v in self._entries.items()}

    @classmethod
    def from_torch(cls, tensors: Mapping[str, torch.Tensor]) -> "ParamStore":
        return cls({k: t.detach().cpu().numpy() for k, t in tensors.items()})

    def __eq__(self, other):
        if not isinstance(other, ParamStore) or self.names() != other.names():
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self._entries.values(), other._entries.values())
        )

    def __repr__(self):
        return f"ParamStore({len(self)} tensors, {self.num_params} values, {self.dtype})"

    def max_abs_diff(self, other: "ParamStore") -> float:
        self.check_congruent(other)
        if not self._entries:
            return 0.0
        return float(max(np.max(np.abs(a.astype(np.float64) - other[k].astype(np.float64)), initial=0.0)
                         for k, a in self._entries.items()))
