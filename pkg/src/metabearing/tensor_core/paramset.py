from __future__ import annotations

from collections.abc import Callable, Iterable, Iterator, Mapping

import numpy as np

from .tensor import Tensor


class ParamSet(Mapping):
    """Ordered, named collection of parameter tensors.

    Order is fixed when the set is built. Sets derived from one another with
    :meth:`with_tensors` or :meth:`map` keep the same names and order.
    """

    def __init__(self, entries: Iterable[tuple[str, Tensor]]):
        entries = list(entries)
        names = [name for name, _ in entries]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate parameter names in {names}")
        self._names = tuple(names)
        self._tensors = {name: t for name, t in entries}

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._names)

    def __len__(self) -> int:
        return len(self._names)

    def __repr__(self):
        body = ", ".join(f"{n}={list(self._tensors[n].shape)}" for n in self._names)
        return f"ParamSet({body})"

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    def shapes(self) -> list[tuple[int, ...]]:
        return [self._tensors[n].shape for n in self._names]

    def with_tensors(self, tensors: Iterable[Tensor]) -> ParamSet:
        tensors = list(tensors)
        if len(tensors) != len(self._names):
            raise ValueError(f"expected {len(self._names)} tensors, got {len(tensors)}")
        return ParamSet(zip(self._names, tensors))

    def map(self, fn: Callable[[str, Tensor], Tensor]) -> ParamSet:
        return ParamSet((n, fn(n, self._tensors[n])) for n in self._names)

    def detached(self, requires_grad: bool = False) -> ParamSet:
        """Fresh leaf tensors holding copies of the current values."""
        return self.map(lambda n, t: Tensor(t.data.copy(), requires_grad=requires_grad))

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: self._tensors[n].data for n in self._names}

    def same_layout(self, other: ParamSet) -> bool:
        return self._names == other.names and self.shapes() == other.shapes()

    def astype(self, dtype) -> ParamSet:
        return self.map(lambda n, t: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad))
