from __future__ import annotations

from collections.abc import Iterator, MutableMapping

import numpy as np

from .tensor import Tensor

OWNERS = ("extractor", "navigator", "teacher", "scrutinizer")


def owner_of(name: str) -> str:
    owner = name.split(".", 1)[0]
    if owner not in OWNERS:
        raise KeyError(f"parameter {name!r} has no owner prefix from {OWNERS}")
    return owner


class ParamSet(MutableMapping):
    """Named trainable tensors plus non-trainable buffers.

    Names are dotted paths whose first component is the owning agent, e.g.
    ``extractor.conv1.w`` or ``teacher.fc2.b``. Buffers (batch-norm running
    statistics) live beside the parameters so checkpoints carry them too.
    """

    def __init__(self, params: dict[str, Tensor] | None = None, buffers: dict[str, np.ndarray] | None = None):
        self._params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = dict(buffers or {})
        for name, t in (params or {}).items():
            self[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __setitem__(self, name: str, value) -> None:
        owner_of(name)
        t = value if isinstance(value, Tensor) else Tensor(np.asarray(value))
        t.requires_grad = True
        self._params[name] = t

    def __delitem__(self, name: str) -> None:
        del self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def owned_by(self, owner: str) -> dict[str, Tensor]:
        return {n: t for n, t in self._params.items() if owner_of(n) == owner}

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def copy(self, dtype=None) -> "ParamSet":
        params = {n: Tensor(t.data.astype(dtype or t.dtype, copy=True)) for n, t in self._params.items()}
        buffers = {n: b.astype(dtype or b.dtype, copy=True) for n, b in self.buffers.items()}
        return ParamSet(params, buffers)

    def arrays(self) -> dict[str, np.ndarray]:
        """Parameters then buffers, as plain arrays (checkpoint order)."""
        out = {n: t.data for n, t in self._params.items()}
        out.update(self.buffers)
        return out

    def spec(self) -> dict[str, tuple[int, ...]]:
        return {n: a.shape for n, a in self.arrays().items()}
